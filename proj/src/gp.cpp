#include "delag/gp.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "delag/error.hpp"
#include "delag/rng.hpp"

namespace delag {

namespace {

constexpr double kJitterBase = 1e-6;
constexpr double kJitterMax = 1e-2;
constexpr double kLogParamClamp = 23.0;

Eigen::MatrixXd pairwise_sqdist(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::VectorXd a2 = a.rowwise().squaredNorm();
    const Eigen::VectorXd b2 = b.rowwise().squaredNorm();
    Eigen::MatrixXd d = -2.0 * a * b.transpose();
    d.colwise() += a2;
    d.rowwise() += b2.transpose();
    return d.cwiseMax(0.0);
}

Eigen::MatrixXd kernel_from_sqdist(const Eigen::MatrixXd& d, double lengthscale,
                                   double signal_variance) {
    return signal_variance * (-d / (2.0 * lengthscale * lengthscale)).array().exp().matrix();
}

/// Cholesky of sv*(R + jitter*I) + extra_diag*I with the spec escalation
/// policy. `jitter_rel` is escalated in place; throws after the cap.
Eigen::LLT<Eigen::MatrixXd> chol_with_escalation(const Eigen::MatrixXd& scaled_corr,
                                                 double signal_variance, double extra_diag,
                                                 double& jitter_rel, const char* what) {
    for (;;) {
        Eigen::MatrixXd k = scaled_corr;
        k.diagonal().array() += signal_variance * jitter_rel + extra_diag;
        Eigen::LLT<Eigen::MatrixXd> llt(k);
        if (llt.info() == Eigen::Success) return llt;
        if (jitter_rel >= kJitterMax) {
            const double dmin = k.diagonal().minCoeff();
            const double dmax = k.diagonal().maxCoeff();
            throw NumericError(std::string(what) + ": Cholesky failed at jitter " +
                               std::to_string(jitter_rel) + " (n=" + std::to_string(k.rows()) +
                               ", diag range [" + std::to_string(dmin) + "," +
                               std::to_string(dmax) + "])");
        }
        jitter_rel *= 10.0;
    }
}

struct AdamState {
    Eigen::Vector3d m = Eigen::Vector3d::Zero();
    Eigen::Vector3d v = Eigen::Vector3d::Zero();
    double b1t = 1.0, b2t = 1.0;

    /// Ascent step.
    void step(Eigen::Vector3d& theta, const Eigen::Vector3d& grad, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        b1t *= b1;
        b2t *= b2;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
        const Eigen::Vector3d mhat = m / (1.0 - b1t);
        const Eigen::Vector3d vhat = v / (1.0 - b2t);
        theta += lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
        theta = theta.cwiseMax(-kLogParamClamp).cwiseMin(kLogParamClamp);
    }
};

struct Standardization {
    Eigen::VectorXd mean, sd;
};

Standardization standardize_columns(Eigen::MatrixXd& x) {
    Standardization s;
    s.mean = x.colwise().mean();
    x.rowwise() -= s.mean.transpose();
    s.sd = (x.colwise().squaredNorm() / static_cast<double>(x.rows())).cwiseSqrt();
    for (Eigen::Index f = 0; f < s.sd.size(); ++f)
        if (s.sd[f] < 1e-12) s.sd[f] = 1.0;
    x.array().rowwise() /= s.sd.transpose().array();
    return s;
}

/// Uniform subsample of k row indices out of n, sorted (partial
/// Fisher-Yates on the index vector).
std::vector<int> subsample_indices(int n, int k, std::uint64_t seed) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return out;
}

Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<int>& rows) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[rows[i]];
    return out;
}

} // namespace

void KernelHyper::validate() const {
    if (!(lengthscale > 0) || !(signal_variance > 0) || !(noise_variance > 0))
        throw ValidationError("kernel hyperparameters must be strictly positive");
}

void GpConfig::validate() const {
    if (min_train < 2) throw ConfigError("gp: min_train must be >= 2");
    if (exact_threshold < 1) throw ConfigError("gp: exact_threshold must be >= 1");
    if (inducing_points < 1) throw ConfigError("gp: inducing_points must be >= 1");
    if (minibatch < 1) throw ConfigError("gp: minibatch must be >= 1");
    if (hyper_subsample < 2) throw ConfigError("gp: hyper_subsample must be >= 2");
    if (lr_main <= 0 || lr_fine <= 0 || epochs_main < 0 || epochs_fine < 0)
        throw ConfigError("gp: bad optimizer schedule");
    if (estep_every < 1) throw ConfigError("gp: estep_every must be >= 1");
}

double rbf_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x2, const KernelHyper& hyper) {
    if (x.size() != x2.size())
        throw ValidationError("rbf_kernel: feature dimensions differ (" +
                              std::to_string(x.size()) + " vs " + std::to_string(x2.size()) + ")");
    const double d2 = (x - x2).squaredNorm();
    return hyper.signal_variance * std::exp(-d2 / (2.0 * hyper.lengthscale * hyper.lengthscale));
}

Eigen::ArrayXd compute_residuals(const Eigen::ArrayXf& observed, const Eigen::ArrayXd& atc_mean) {
    if (observed.size() != atc_mean.size())
        throw ValidationError("compute_residuals: grid sizes differ (" +
                              std::to_string(observed.size()) + " vs " +
                              std::to_string(atc_mean.size()) + ")");
    Eigen::ArrayXd r(observed.size());
    for (Eigen::Index i = 0; i < observed.size(); ++i) {
        const float o = observed[i];
        r[i] = std::isfinite(o) ? static_cast<double>(o) - atc_mean[i]
                                : std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

double exact_lml(const Eigen::MatrixXd& x_std, const Eigen::VectorXd& y_centered,
                 const Eigen::Vector3d& log_hyper, double jitter_rel, Eigen::Vector3d* grad) {
    const auto n = x_std.rows();
    const double ls = std::exp(log_hyper[0]);
    const double sv = std::exp(log_hyper[1]);
    const double nv = std::exp(log_hyper[2]);

    const Eigen::MatrixXd d = pairwise_sqdist(x_std, x_std);
    const Eigen::MatrixXd k = kernel_from_sqdist(d, ls, sv);
    Eigen::MatrixXd ky = k;
    ky.diagonal().array() += sv * jitter_rel + nv;
    Eigen::LLT<Eigen::MatrixXd> llt(ky);
    if (llt.info() != Eigen::Success)
        throw NumericError("exact_lml: Cholesky failed (jitter " + std::to_string(jitter_rel) +
                           ", n=" + std::to_string(n) + ")");

    const Eigen::VectorXd alpha = llt.solve(y_centered);
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) logdet += std::log(llt.matrixLLT()(i, i));
    const double lml =
        -0.5 * y_centered.dot(alpha) - logdet - 0.5 * n * std::log(2.0 * M_PI);

    if (grad) {
        const Eigen::MatrixXd kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
        const Eigen::MatrixXd w = alpha * alpha.transpose() - kinv;
        // d k / d log(ls) = k .* d / ls^2 ; diagonal jitter has no ls term
        const Eigen::MatrixXd dk_ls = k.cwiseProduct(d) / (ls * ls);
        Eigen::MatrixXd dk_sv = k;
        dk_sv.diagonal().array() += sv * jitter_rel;
        (*grad)[0] = 0.5 * w.cwiseProduct(dk_ls).sum();
        (*grad)[1] = 0.5 * w.cwiseProduct(dk_sv).sum();
        (*grad)[2] = 0.5 * nv * w.trace();
    }
    return lml;
}

namespace {

/// Shared state of the inducing-point approximation at given
/// hyperparameters, with the closed-form optimal q(u) = N(m, S).
struct InducingState {
    Eigen::LLT<Eigen::MatrixXd> kmm_llt;    // sv*(Rmm + jitter*I)
    Eigen::MatrixXd kmm;                    // jittered
    Eigen::MatrixXd rmm_scaled;             // sv*Rmm (no jitter)
    Eigen::MatrixXd dmm;                    // inducing pairwise sq dists
    Eigen::LLT<Eigen::MatrixXd> sigma_llt;  // Kmm + Kmn*Knm/nv
    Eigen::VectorXd m;                      // variational mean
    Eigen::MatrixXd s_chol;                 // lower factor of S = Kmm Sigma^-1 Kmm
    Eigen::VectorXd w;                      // Kmm^-1 m
    double bound = 0.0;                     // collapsed variational bound
};

InducingState estep(const Eigen::MatrixXd& x_std, const Eigen::VectorXd& yc,
                    const Eigen::MatrixXd& z, const Eigen::Vector3d& log_hyper,
                    double& jitter_rel) {
    const auto n = x_std.rows();
    const auto m_pts = z.rows();
    const double ls = std::exp(log_hyper[0]);
    const double sv = std::exp(log_hyper[1]);
    const double nv = std::exp(log_hyper[2]);

    InducingState st;
    st.dmm = pairwise_sqdist(z, z);
    st.rmm_scaled = kernel_from_sqdist(st.dmm, ls, sv);
    st.kmm_llt = chol_with_escalation(st.rmm_scaled, sv, 0.0, jitter_rel, "inducing Kmm");
    st.kmm = st.rmm_scaled;
    st.kmm.diagonal().array() += sv * jitter_rel;

    const Eigen::MatrixXd kmn = kernel_from_sqdist(pairwise_sqdist(z, x_std), ls, sv);
    Eigen::MatrixXd sigma = st.kmm + kmn * kmn.transpose() / nv;
    st.sigma_llt.compute(sigma);
    if (st.sigma_llt.info() != Eigen::Success) {
        sigma.diagonal().array() += 1e-10 * sigma.trace() / static_cast<double>(m_pts);
        st.sigma_llt.compute(sigma);
        if (st.sigma_llt.info() != Eigen::Success)
            throw NumericError("inducing Sigma: Cholesky failed");
    }

    const Eigen::VectorXd kmn_y = kmn * yc;
    st.m = st.kmm * st.sigma_llt.solve(kmn_y) / nv;
    st.w = st.kmm_llt.solve(st.m);

    // S = Kmm Sigma^-1 Kmm = T^T T with T = Lsigma^-1 Kmm
    Eigen::MatrixXd t = st.sigma_llt.matrixL().solve(st.kmm);
    Eigen::MatrixXd s = t.transpose() * t;
    Eigen::LLT<Eigen::MatrixXd> s_llt(s);
    if (s_llt.info() != Eigen::Success) {
        s.diagonal().array() += 1e-10 * s.trace() / static_cast<double>(m_pts);
        s_llt.compute(s);
        if (s_llt.info() != Eigen::Success)
            throw NumericError("inducing S: Cholesky failed");
    }
    st.s_chol = s_llt.matrixL();

    // Collapsed bound via the standard SGPR identities:
    //   C = Lm^-1 Kmn, B = I + C C^T / nv
    const Eigen::MatrixXd c = st.kmm_llt.matrixL().solve(kmn);
    Eigen::MatrixXd b = Eigen::MatrixXd::Identity(m_pts, m_pts) + c * c.transpose() / nv;
    const Eigen::LLT<Eigen::MatrixXd> b_llt(b);
    double logdet_b = 0.0;
    for (Eigen::Index i = 0; i < m_pts; ++i) logdet_b += 2.0 * std::log(b_llt.matrixLLT()(i, i));
    const Eigen::VectorXd cy = c * yc;
    const Eigen::VectorXd bi_cy = b_llt.matrixL().solve(cy);
    const double quad = (yc.squaredNorm() - bi_cy.squaredNorm() / nv) / nv;
    const double trace_term = (static_cast<double>(n) * sv - c.squaredNorm()) / (2.0 * nv);
    st.bound = -0.5 * static_cast<double>(n) * std::log(2.0 * M_PI * nv) - 0.5 * logdet_b -
               0.5 * quad - trace_term;
    return st;
}

/// Gradient of the (minibatch-estimated) evidence bound w.r.t. log
/// hyperparameters at fixed variational q(u) = N(m, S). Kernel matrices are
/// rebuilt at the current hyperparameters; only q is held from the last
/// refresh. When q is optimal for the current hyperparameters this is the
/// exact gradient of the collapsed bound (envelope theorem).
Eigen::Vector3d inducing_gradient(const Eigen::MatrixXd& x_std, const Eigen::VectorXd& yc,
                                  const Eigen::MatrixXd& z, const Eigen::Vector3d& log_hyper,
                                  const Eigen::VectorXd& q_mean, const Eigen::MatrixXd& q_chol,
                                  double jitter_rel, const std::vector<int>& batch,
                                  Eigen::Index n_total) {
    const double ls = std::exp(log_hyper[0]);
    const double sv = std::exp(log_hyper[1]);
    const double nv = std::exp(log_hyper[2]);
    const auto m_pts = z.rows();
    const auto nb = static_cast<Eigen::Index>(batch.size());
    const double scale = static_cast<double>(n_total) / static_cast<double>(nb);

    const Eigen::MatrixXd dmm = pairwise_sqdist(z, z);
    const Eigen::MatrixXd rmm_scaled = kernel_from_sqdist(dmm, ls, sv);
    double jit = jitter_rel;
    const auto kmm_llt = chol_with_escalation(rmm_scaled, sv, 0.0, jit, "inducing gradient Kmm");
    Eigen::MatrixXd kmm = rmm_scaled;
    kmm.diagonal().array() += sv * jit;

    const Eigen::MatrixXd xb = gather_rows(x_std, batch);
    const Eigen::VectorXd yb = gather(yc, batch);
    const Eigen::MatrixXd db = pairwise_sqdist(z, xb);
    const Eigen::MatrixXd kb = kernel_from_sqdist(db, ls, sv);

    const Eigen::VectorXd w = kmm_llt.solve(q_mean);   // Kmm^-1 m
    const Eigen::MatrixXd a = kmm_llt.solve(kb);       // Kmm^-1 Kb
    const Eigen::MatrixXd t = kmm_llt.solve(q_chol);   // Kmm^-1 Ls
    const Eigen::MatrixXd p = t * t.transpose();       // Kmm^-1 S Kmm^-1
    const Eigen::MatrixXd g = p * kb;

    const Eigen::VectorXd mu = kb.transpose() * w;
    const Eigen::VectorXd r = yb - mu;
    const Eigen::VectorXd t2 = kb.cwiseProduct(a).colwise().sum().transpose();
    const Eigen::VectorXd t3 = kb.cwiseProduct(g).colwise().sum().transpose();
    const Eigen::VectorXd svar = (sv - t2.array() + t3.array()).max(0.0).matrix();

    const Eigen::MatrixXd kmm_inv = kmm_llt.solve(Eigen::MatrixXd::Identity(m_pts, m_pts));

    // Structural derivative matrices per log-parameter.
    const Eigen::MatrixXd dkb_ls = kb.cwiseProduct(db) / (ls * ls);
    const Eigen::MatrixXd dkmm_ls = rmm_scaled.cwiseProduct(dmm) / (ls * ls);

    const Eigen::MatrixXd aat = a * a.transpose();
    const Eigen::MatrixXd agt = a * g.transpose();

    auto directional = [&](const Eigen::MatrixXd& dkb, const Eigen::MatrixXd& dkmm,
                           double dkii) {
        // sum_i (r_i/nv) dmu_i
        const double dmu_part = (w.dot(dkb * r) - (a * r).dot(dkmm * w)) / nv;
        // sum_i dsigma_i^2 (shared coefficient -1/(2nv))
        const double dsig_sum = static_cast<double>(nb) * dkii -
                                2.0 * dkb.cwiseProduct(a).sum() +
                                aat.cwiseProduct(dkmm).sum() +
                                2.0 * dkb.cwiseProduct(g).sum() -
                                2.0 * agt.cwiseProduct(dkmm).sum();
        const double data = scale * (dmu_part - dsig_sum / (2.0 * nv));
        const double dkl = 0.5 * (-p.cwiseProduct(dkmm).sum() - w.dot(dkmm * w) +
                                  kmm_inv.cwiseProduct(dkmm).sum());
        return data - dkl;
    };

    Eigen::Vector3d grad;
    grad[0] = directional(dkb_ls, dkmm_ls, 0.0);
    grad[1] = directional(kb, kmm, sv);
    // log nv: only the data term depends on the noise at fixed q.
    grad[2] = scale * (-0.5 * static_cast<double>(nb) +
                       (r.squaredNorm() + svar.sum()) / (2.0 * nv));
    return grad;
}

} // namespace

double collapsed_bound(const Eigen::MatrixXd& x_std, const Eigen::VectorXd& y_centered,
                       const Eigen::MatrixXd& inducing_x, const Eigen::Vector3d& log_hyper,
                       double jitter_rel, Eigen::Vector3d* grad) {
    double jit = jitter_rel;
    const InducingState st = estep(x_std, y_centered, inducing_x, log_hyper, jit);
    if (grad) {
        std::vector<int> all(static_cast<std::size_t>(x_std.rows()));
        std::iota(all.begin(), all.end(), 0);
        *grad = inducing_gradient(x_std, y_centered, inducing_x, log_hyper, st.m, st.s_chol,
                                  jitter_rel, all, x_std.rows());
    }
    return st.bound;
}

GpModel condition_exact(const Eigen::MatrixXd& features, const Eigen::VectorXd& residuals,
                        const KernelHyper& hyper, bool include_noise) {
    hyper.validate();
    if (features.rows() != residuals.size())
        throw ValidationError("condition_exact: row counts differ");
    GpModel model;
    model.mode = GpMode::Exact;
    model.hyper = hyper;
    model.include_noise = include_noise;
    model.n_train = static_cast<int>(features.rows());
    model.train_x = features;
    const Standardization std = standardize_columns(model.train_x);
    model.feat_mean = std.mean;
    model.feat_sd = std.sd;
    model.y_mean = residuals.mean();
    const Eigen::VectorXd yc = residuals.array() - model.y_mean;

    const Eigen::MatrixXd d = pairwise_sqdist(model.train_x, model.train_x);
    const Eigen::MatrixXd k = kernel_from_sqdist(d, hyper.lengthscale, hyper.signal_variance);
    model.jitter_rel = kJitterBase;
    const auto llt = chol_with_escalation(k, hyper.signal_variance, hyper.noise_variance,
                                          model.jitter_rel, "exact conditioning");
    model.chol_l = llt.matrixL();
    model.alpha = llt.solve(yc);
    return model;
}

GpFitOutcome fit_gp_day(const Eigen::MatrixXd& features, const Eigen::VectorXd& residuals,
                        const GpConfig& config, std::uint64_t seed) {
    config.validate();
    if (features.rows() != residuals.size())
        throw ValidationError("fit_gp_day: row counts differ");
    const int n = static_cast<int>(features.rows());
    GpFitOutcome out;
    if (n < config.min_train) {
        out.skip_reason = "too few residuals: " + std::to_string(n) + " < min_train " +
                          std::to_string(config.min_train);
        return out;
    }

    GpModel model;
    model.include_noise = config.include_noise_in_variance;
    model.n_train = n;
    Eigen::MatrixXd x_std = features;
    const Standardization std_ = standardize_columns(x_std);
    model.feat_mean = std_.mean;
    model.feat_sd = std_.sd;
    model.y_mean = residuals.mean();
    const Eigen::VectorXd yc = residuals.array() - model.y_mean;
    const double var0 = yc.squaredNorm() / n;

    if (var0 < 1e-12) {
        // Constant residual field: nothing to regress, predictions revert to
        // the mean with vanishing variance.
        model.mode = GpMode::Exact;
        model.hyper = {1.0, 1e-12, 1e-12};
        model.train_x = x_std;
        const Eigen::MatrixXd d = pairwise_sqdist(x_std, x_std);
        const Eigen::MatrixXd k = kernel_from_sqdist(d, 1.0, 1e-12);
        model.jitter_rel = kJitterBase;
        auto llt = chol_with_escalation(k, 1e-12, 1e-12, model.jitter_rel, "degenerate fit");
        model.chol_l = llt.matrixL();
        model.alpha = llt.solve(yc);
        out.model = std::move(model);
        return out;
    }

    // The marginal likelihood has a well-known spurious short-lengthscale
    // optimum; two deterministic starts (smooth/noisy prior vs the default)
    // and keeping the better final objective avoids it.
    const Eigen::Vector3d starts[2] = {
        {std::log(1.0), std::log(var0), std::log(0.1 * var0)},
        {std::log(3.0), std::log(0.7 * var0), std::log(0.5 * var0)},
    };

    if (n <= config.exact_threshold) {
        model.mode = GpMode::Exact;
        // Hyperparameters are fitted on a capped subsample; conditioning
        // below always uses the full training set.
        const Eigen::MatrixXd* xh = &x_std;
        const Eigen::VectorXd* yh = &yc;
        Eigen::MatrixXd x_sub;
        Eigen::VectorXd y_sub;
        if (n > config.hyper_subsample) {
            const auto idx = subsample_indices(n, config.hyper_subsample,
                                               derive_seed(seed, 0x677073ULL /*"gps"*/, 1));
            x_sub = gather_rows(x_std, idx);
            y_sub = gather(yc, idx);
            xh = &x_sub;
            yh = &y_sub;
        }

        Eigen::Vector3d best_theta;
        double best_jitter = kJitterBase;
        double best_obj = -std::numeric_limits<double>::infinity();
        for (const Eigen::Vector3d& start : starts) {
            Eigen::Vector3d theta = start;
            double jitter = kJitterBase;
            std::vector<double> trace;
            AdamState adam;
            auto run = [&](int epochs, double lr) {
                for (int e = 0; e < epochs; ++e) {
                    Eigen::Vector3d grad;
                    double obj;
                    for (;;) {
                        try {
                            obj = exact_lml(*xh, *yh, theta, jitter, &grad);
                            break;
                        } catch (const NumericError&) {
                            if (jitter >= kJitterMax) throw;
                            jitter *= 10.0;
                        }
                    }
                    trace.push_back(obj);
                    adam.step(theta, grad, lr);
                }
            };
            run(config.epochs_main, config.lr_main);
            run(config.epochs_fine, config.lr_fine);
            double final_obj;
            for (;;) {
                try {
                    final_obj = exact_lml(*xh, *yh, theta, jitter, nullptr);
                    break;
                } catch (const NumericError&) {
                    if (jitter >= kJitterMax) throw;
                    jitter *= 10.0;
                }
            }
            trace.push_back(final_obj);
            if (final_obj > best_obj) {
                best_obj = final_obj;
                best_theta = theta;
                best_jitter = jitter;
                model.objective_trace = std::move(trace);
            }
        }

        model.hyper = {std::exp(best_theta[0]), std::exp(best_theta[1]),
                       std::exp(best_theta[2])};
        model.train_x = x_std;
        const Eigen::MatrixXd d = pairwise_sqdist(x_std, x_std);
        const Eigen::MatrixXd k =
            kernel_from_sqdist(d, model.hyper.lengthscale, model.hyper.signal_variance);
        model.jitter_rel = best_jitter;
        auto llt = chol_with_escalation(k, model.hyper.signal_variance,
                                        model.hyper.noise_variance, model.jitter_rel,
                                        "exact conditioning");
        model.chol_l = llt.matrixL();
        model.alpha = llt.solve(yc);
    } else {
        model.mode = GpMode::Inducing;
        const int m_pts = std::min(config.inducing_points, n);
        const auto z_idx =
            subsample_indices(n, m_pts, derive_seed(seed, 0x677069ULL /*"gpi"*/, 2));
        model.inducing_x = gather_rows(x_std, z_idx);

        Eigen::Vector3d best_theta;
        double best_jitter = kJitterBase;
        double best_obj = -std::numeric_limits<double>::infinity();
        for (const Eigen::Vector3d& start : starts) {
            Eigen::Vector3d theta = start;
            double jitter = kJitterBase;
            std::vector<double> trace;
            AdamState adam;
            InducingState st = estep(x_std, yc, model.inducing_x, theta, jitter);
            trace.push_back(st.bound);

            std::vector<int> order(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            int epoch_index = 0;
            auto run = [&](int epochs, double lr) {
                for (int e = 0; e < epochs; ++e, ++epoch_index) {
                    if (epoch_index > 0 && epoch_index % config.estep_every == 0) {
                        st = estep(x_std, yc, model.inducing_x, theta, jitter);
                        trace.push_back(st.bound);
                    }
                    Rng shuffler(derive_seed(seed, 0x67706dULL /*"gpm"*/,
                                             static_cast<std::uint64_t>(epoch_index)));
                    shuffler.shuffle(order);
                    for (int start_i = 0; start_i < n; start_i += config.minibatch) {
                        const int stop = std::min(n, start_i + config.minibatch);
                        const std::vector<int> batch(order.begin() + start_i,
                                                     order.begin() + stop);
                        const Eigen::Vector3d grad =
                            inducing_gradient(x_std, yc, model.inducing_x, theta, st.m,
                                              st.s_chol, jitter, batch, n);
                        adam.step(theta, grad, lr);
                    }
                }
            };
            run(config.epochs_main, config.lr_main);
            run(config.epochs_fine, config.lr_fine);
            st = estep(x_std, yc, model.inducing_x, theta, jitter);
            trace.push_back(st.bound);
            if (st.bound > best_obj) {
                best_obj = st.bound;
                best_theta = theta;
                best_jitter = jitter;
                model.objective_trace = std::move(trace);
            }
        }

        double jitter = best_jitter;
        InducingState st = estep(x_std, yc, model.inducing_x, best_theta, jitter);
        model.hyper = {std::exp(best_theta[0]), std::exp(best_theta[1]),
                       std::exp(best_theta[2])};
        model.jitter_rel = jitter;
        model.kmm_l = st.kmm_llt.matrixL();
        model.var_mean = st.m;
        model.var_cov_l = st.s_chol;
        model.w = st.w;
        model.train_x = Eigen::MatrixXd(); // not needed for prediction
    }

    out.model = std::move(model);
    return out;
}

namespace {

/// Factor of the exact-mode training covariance, rebuilt from stored state.
Eigen::MatrixXd rebuild_exact_factor(const GpModel& model) {
    const Eigen::MatrixXd d = pairwise_sqdist(model.train_x, model.train_x);
    Eigen::MatrixXd k =
        kernel_from_sqdist(d, model.hyper.lengthscale, model.hyper.signal_variance);
    k.diagonal().array() +=
        model.hyper.signal_variance * model.jitter_rel + model.hyper.noise_variance;
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success)
        throw NumericError("gp_predict: Cholesky rebuild failed");
    return llt.matrixL();
}

Eigen::MatrixXd rebuild_kmm_factor(const GpModel& model) {
    const Eigen::MatrixXd d = pairwise_sqdist(model.inducing_x, model.inducing_x);
    Eigen::MatrixXd kmm =
        kernel_from_sqdist(d, model.hyper.lengthscale, model.hyper.signal_variance);
    kmm.diagonal().array() += model.hyper.signal_variance * model.jitter_rel;
    Eigen::LLT<Eigen::MatrixXd> llt(kmm);
    if (llt.info() != Eigen::Success)
        throw NumericError("gp_predict: Kmm Cholesky rebuild failed");
    return llt.matrixL();
}

} // namespace

GpPrediction gp_predict(const GpModel& model, const Eigen::MatrixXd& query_features) {
    if (model.n_train == 0) throw ValidationError("gp_predict: model is not fitted");
    if (query_features.cols() != model.feat_mean.size())
        throw ValidationError("gp_predict: feature dimension " +
                              std::to_string(query_features.cols()) + " != model " +
                              std::to_string(model.feat_mean.size()));
    Eigen::MatrixXd q = query_features;
    q.rowwise() -= model.feat_mean.transpose();
    q.array().rowwise() /= model.feat_sd.transpose().array();

    const double sv = model.hyper.signal_variance;
    const double nv = model.hyper.noise_variance;
    const auto nq = q.rows();
    GpPrediction pred;
    pred.mean.resize(nq);
    pred.variance.resize(nq);

    // Stripped models rebuild their factors once per call.
    Eigen::MatrixXd rebuilt_l;
    Eigen::VectorXd rebuilt_w;
    const Eigen::MatrixXd* chol_l = &model.chol_l;
    const Eigen::MatrixXd* kmm_l = &model.kmm_l;
    const Eigen::VectorXd* w = &model.w;
    if (model.mode == GpMode::Exact && model.chol_l.size() == 0) {
        rebuilt_l = rebuild_exact_factor(model);
        chol_l = &rebuilt_l;
    } else if (model.mode == GpMode::Inducing && model.kmm_l.size() == 0) {
        rebuilt_l = rebuild_kmm_factor(model);
        kmm_l = &rebuilt_l;
        Eigen::VectorXd tmp = rebuilt_l.triangularView<Eigen::Lower>().solve(model.var_mean);
        rebuilt_w = rebuilt_l.transpose().triangularView<Eigen::Upper>().solve(tmp);
        w = &rebuilt_w;
    }

    constexpr Eigen::Index kBlock = 2048;
    for (Eigen::Index start = 0; start < nq; start += kBlock) {
        const Eigen::Index stop = std::min(nq, start + kBlock);
        const Eigen::MatrixXd qb = q.middleRows(start, stop - start);
        if (model.mode == GpMode::Exact) {
            const Eigen::MatrixXd kq = kernel_from_sqdist(
                pairwise_sqdist(model.train_x, qb), model.hyper.lengthscale, sv);
            pred.mean.segment(start, stop - start) =
                (kq.transpose() * model.alpha).array() + model.y_mean;
            const Eigen::MatrixXd v = chol_l->triangularView<Eigen::Lower>().solve(kq);
            pred.variance.segment(start, stop - start) =
                (sv - v.colwise().squaredNorm().transpose().array()).max(0.0);
        } else {
            const Eigen::MatrixXd kq = kernel_from_sqdist(
                pairwise_sqdist(model.inducing_x, qb), model.hyper.lengthscale, sv);
            pred.mean.segment(start, stop - start) =
                (kq.transpose() * (*w)).array() + model.y_mean;
            // latent var = sv - k*^T Kmm^-1 k* + ||Ls^T Kmm^-1 k*||^2
            const Eigen::MatrixXd li_k = kmm_l->triangularView<Eigen::Lower>().solve(kq);
            Eigen::MatrixXd g = kmm_l->transpose().triangularView<Eigen::Upper>().solve(li_k);
            const Eigen::MatrixXd sg = model.var_cov_l.transpose() * g;
            pred.variance.segment(start, stop - start) =
                (sv - li_k.colwise().squaredNorm().transpose().array() +
                 sg.colwise().squaredNorm().transpose().array())
                    .max(0.0);
        }
    }
    if (model.include_noise) pred.variance += nv;
    return pred;
}

namespace {

constexpr char kGpmMagic[6] = {'G', 'P', 'M', '1', '0', '\n'};

void append_block(std::vector<double>& payload, nlohmann::json& blocks, const char* name,
                  const Eigen::MatrixXd& m) {
    blocks.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    const auto off = payload.size();
    payload.resize(off + static_cast<std::size_t>(m.size()));
    // column-major, matching Eigen's default layout
    std::memcpy(payload.data() + off, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

Eigen::MatrixXd read_block(const std::vector<double>& payload, std::size_t& cursor,
                           const nlohmann::json& spec) {
    const auto rows = spec.at("rows").get<Eigen::Index>();
    const auto cols = spec.at("cols").get<Eigen::Index>();
    Eigen::MatrixXd m(rows, cols);
    const auto count = static_cast<std::size_t>(m.size());
    if (cursor + count > payload.size())
        throw TruncationError("gp model payload: expected more data for block " +
                              spec.at("name").get<std::string>());
    std::memcpy(m.data(), payload.data() + cursor, count * sizeof(double));
    cursor += count;
    return m;
}

} // namespace

void save_gp_model(const GpModel& model, const std::string& path) {
    nlohmann::json h;
    h["kind"] = "gp_model";
    h["mode"] = model.mode == GpMode::Exact ? "exact" : "inducing";
    h["hyper"] = {{"lengthscale", model.hyper.lengthscale},
                  {"signal_variance", model.hyper.signal_variance},
                  {"noise_variance", model.hyper.noise_variance}};
    h["jitter_rel"] = model.jitter_rel;
    h["y_mean"] = model.y_mean;
    h["include_noise"] = model.include_noise;
    h["n_train"] = model.n_train;
    h["feat_mean"] = std::vector<double>(model.feat_mean.data(),
                                         model.feat_mean.data() + model.feat_mean.size());
    h["feat_sd"] = std::vector<double>(model.feat_sd.data(),
                                       model.feat_sd.data() + model.feat_sd.size());
    nlohmann::json blocks = nlohmann::json::array();
    std::vector<double> payload;
    if (model.mode == GpMode::Exact) {
        append_block(payload, blocks, "train_x", model.train_x);
        append_block(payload, blocks, "alpha", model.alpha);
    } else {
        append_block(payload, blocks, "inducing_x", model.inducing_x);
        append_block(payload, blocks, "var_mean", model.var_mean);
        append_block(payload, blocks, "var_cov_l", model.var_cov_l);
    }
    h["blocks"] = blocks;
    const std::string header = h.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kGpmMagic, sizeof(kGpmMagic));
    std::uint64_t len = header.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!out) throw IoError("write failed: " + path);
}

GpModel load_gp_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (raw.size() < sizeof(kGpmMagic) + 8)
        throw TruncationError("gp model file shorter than preamble");
    if (std::memcmp(raw.data(), kGpmMagic, sizeof(kGpmMagic)) != 0)
        throw FormatError("bad magic, expected GPM10");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i)
        len |= static_cast<std::uint64_t>(raw[sizeof(kGpmMagic) + i]) << (8 * i);
    const std::size_t header_off = sizeof(kGpmMagic) + 8;
    if (header_off + len > raw.size()) throw TruncationError("gp model header exceeds file");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(raw.begin() + static_cast<std::ptrdiff_t>(header_off),
                                  raw.begin() + static_cast<std::ptrdiff_t>(header_off + len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("gp model header: ") + e.what());
    }

    const std::size_t payload_bytes = raw.size() - header_off - len;
    if (payload_bytes % sizeof(double) != 0)
        throw TruncationError("gp model payload not a multiple of 8 bytes");
    std::vector<double> payload(payload_bytes / sizeof(double));
    std::memcpy(payload.data(), raw.data() + header_off + len, payload_bytes);

    GpModel model;
    model.mode = h.at("mode").get<std::string>() == "exact" ? GpMode::Exact : GpMode::Inducing;
    model.hyper.lengthscale = h.at("hyper").at("lengthscale").get<double>();
    model.hyper.signal_variance = h.at("hyper").at("signal_variance").get<double>();
    model.hyper.noise_variance = h.at("hyper").at("noise_variance").get<double>();
    model.jitter_rel = h.at("jitter_rel").get<double>();
    model.y_mean = h.at("y_mean").get<double>();
    model.include_noise = h.at("include_noise").get<bool>();
    model.n_train = h.at("n_train").get<int>();
    const auto fm = h.at("feat_mean").get<std::vector<double>>();
    const auto fs = h.at("feat_sd").get<std::vector<double>>();
    model.feat_mean = Eigen::Map<const Eigen::VectorXd>(fm.data(), static_cast<Eigen::Index>(fm.size()));
    model.feat_sd = Eigen::Map<const Eigen::VectorXd>(fs.data(), static_cast<Eigen::Index>(fs.size()));

    std::size_t cursor = 0;
    if (model.mode == GpMode::Exact) {
        model.train_x = read_block(payload, cursor, h.at("blocks").at(0));
        model.alpha = read_block(payload, cursor, h.at("blocks").at(1)).col(0);
        // Rebuild the Cholesky factor deterministically from the stored state.
        const Eigen::MatrixXd d = pairwise_sqdist(model.train_x, model.train_x);
        Eigen::MatrixXd k =
            kernel_from_sqdist(d, model.hyper.lengthscale, model.hyper.signal_variance);
        k.diagonal().array() +=
            model.hyper.signal_variance * model.jitter_rel + model.hyper.noise_variance;
        Eigen::LLT<Eigen::MatrixXd> llt(k);
        if (llt.info() != Eigen::Success)
            throw NumericError("gp model load: Cholesky rebuild failed");
        model.chol_l = llt.matrixL();
    } else {
        model.inducing_x = read_block(payload, cursor, h.at("blocks").at(0));
        model.var_mean = read_block(payload, cursor, h.at("blocks").at(1)).col(0);
        model.var_cov_l = read_block(payload, cursor, h.at("blocks").at(2));
        const Eigen::MatrixXd d = pairwise_sqdist(model.inducing_x, model.inducing_x);
        Eigen::MatrixXd kmm =
            kernel_from_sqdist(d, model.hyper.lengthscale, model.hyper.signal_variance);
        kmm.diagonal().array() += model.hyper.signal_variance * model.jitter_rel;
        Eigen::LLT<Eigen::MatrixXd> llt(kmm);
        if (llt.info() != Eigen::Success)
            throw NumericError("gp model load: Kmm Cholesky rebuild failed");
        model.kmm_l = llt.matrixL();
        model.w = llt.solve(model.var_mean);
    }
    return model;
}

} // namespace delag

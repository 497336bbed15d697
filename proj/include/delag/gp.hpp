#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "delag/types.hpp"

namespace delag {

/// Isotropic RBF kernel hyperparameters over standardized features.
struct KernelHyper {
    double lengthscale = 1.0;      // feature-space units
    double signal_variance = 1.0;  // K^2
    double noise_variance = 0.1;   // K^2

    void validate() const;
};

struct GpConfig {
    int min_train = 30;          // fewer residuals => day is GP-skipped
    int exact_threshold = 4096;  // n above this switches to inducing mode
    int inducing_points = 512;   // M
    int minibatch = 1024;        // inducing-mode batch size for hyper steps
    int hyper_subsample = 512;   // cap on points used to fit hyperparameters (exact mode)
    double lr_main = 0.05;
    int epochs_main = 50;
    double lr_fine = 0.005;
    int epochs_fine = 10;
    int estep_every = 2;                  // refresh the optimal q(u) every k epochs
    bool include_noise_in_variance = true; // predictive variance = latent + noise

    void validate() const;
};

enum class GpMode { Exact, Inducing };

/// Fitted per-day residual regressor. Exact mode keeps the training set and
/// the Cholesky factor of (K + sigma^2 I); inducing mode keeps M inducing
/// locations with the (closed-form optimal) variational mean/covariance.
/// Features are standardized per dimension and residuals centered by their
/// training mean; both transforms are undone at prediction.
struct GpModel {
    GpMode mode = GpMode::Exact;
    KernelHyper hyper;
    double jitter_rel = 1e-6; // relative diagonal jitter actually applied
    Eigen::VectorXd feat_mean, feat_sd;
    double y_mean = 0.0;
    bool include_noise = true;
    int n_train = 0;

    // exact mode
    Eigen::MatrixXd train_x; // standardized, n x F
    Eigen::MatrixXd chol_l;  // lower factor of sv*(R + jitter_rel*I) + nv*I
    Eigen::VectorXd alpha;   // (K + sigma^2 I)^-1 (y - y_mean)

    // inducing mode
    Eigen::MatrixXd inducing_x; // standardized, M x F
    Eigen::MatrixXd kmm_l;      // lower factor of Kmm (jittered)
    Eigen::VectorXd var_mean;   // variational mean m
    Eigen::MatrixXd var_cov_l;  // lower factor of variational covariance S
    Eigen::VectorXd w;          // Kmm^-1 m, cached for prediction

    std::vector<double> objective_trace; // LML / ELBO per optimizer step

    /// Free the dense factors that gp_predict can rebuild from the rest of
    /// the state (a per-day exact factor is O(n^2); a year of them is not).
    void strip_prediction_cache() {
        chol_l.resize(0, 0);
        kmm_l.resize(0, 0);
        w.resize(0);
    }
};

struct GpPrediction {
    Eigen::ArrayXd mean;     // kelvin, de-centered
    Eigen::ArrayXd variance; // K^2, latent (+ noise when configured)
};

/// k(x,x') = signal_variance * exp(-||x-x'||^2 / (2*lengthscale^2)).
double rbf_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& x2, const KernelHyper& hyper);

/// observed - atc_mean where observed is finite, NaN elsewhere.
Eigen::ArrayXd compute_residuals(const Eigen::ArrayXf& observed, const Eigen::ArrayXd& atc_mean);

struct GpFitOutcome {
    std::optional<GpModel> model;
    std::string skip_reason; // non-empty iff the day was skipped
};

/// Fit one day's residual surface. features: raw (unstandardized) n x F
/// rows for the valid cells, residuals: matching n-vector.
GpFitOutcome fit_gp_day(const Eigen::MatrixXd& features, const Eigen::VectorXd& residuals,
                        const GpConfig& config, std::uint64_t seed);

/// Posterior mean/variance at raw query features (q x F).
GpPrediction gp_predict(const GpModel& model, const Eigen::MatrixXd& query_features);

/// Conditioning with fixed hyperparameters (no optimization); exact mode.
GpModel condition_exact(const Eigen::MatrixXd& features, const Eigen::VectorXd& residuals,
                        const KernelHyper& hyper, bool include_noise = true);

/// Exact log marginal likelihood of centered targets under standardized
/// inputs, with optional analytic gradient w.r.t. (log ls, log sv, log nv).
double exact_lml(const Eigen::MatrixXd& x_std, const Eigen::VectorXd& y_centered,
                 const Eigen::Vector3d& log_hyper, double jitter_rel,
                 Eigen::Vector3d* grad = nullptr);

/// Collapsed variational bound at the closed-form optimal q(u), with the
/// envelope gradient w.r.t. log-hyperparameters (equal to the bound's total
/// derivative since q is optimal).
double collapsed_bound(const Eigen::MatrixXd& x_std, const Eigen::VectorXd& y_centered,
                       const Eigen::MatrixXd& inducing_x, const Eigen::Vector3d& log_hyper,
                       double jitter_rel, Eigen::Vector3d* grad = nullptr);

void save_gp_model(const GpModel& model, const std::string& path);
GpModel load_gp_model(const std::string& path);

} // namespace delag

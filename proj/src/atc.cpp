#include "delag/atc.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "delag/container.hpp"
#include "delag/error.hpp"
#include "delag/parallel.hpp"

namespace delag {

namespace {

constexpr double kOmega = 2.0 * M_PI / 365.0;

double reduce_phi(double phi) {
    double r = std::fmod(phi, 365.0);
    if (r < 0) r += 365.0;
    return r;
}

double median_of(std::vector<double> v) {
    const std::size_t n = v.size();
    auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (n % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

/// Positions of every stack day on the era5 axis; throws on any mismatch.
std::vector<int> align_days(const SceneStack& stack, const Era5Series& era5) {
    if (era5.pixel_height != stack.shape.height || era5.pixel_width != stack.shape.width)
        throw ValidationError("era5 pixel grid " + std::to_string(era5.pixel_height) + "x" +
                              std::to_string(era5.pixel_width) + " does not match stack " +
                              std::to_string(stack.shape.height) + "x" +
                              std::to_string(stack.shape.width));
    std::vector<int> pos(stack.days.size());
    for (std::size_t i = 0; i < stack.days.size(); ++i) {
        pos[i] = era5.day_pos(stack.days[i]);
        if (pos[i] < 0)
            throw ValidationError("day-axis mismatch: stack day " +
                                  std::to_string(stack.days[i]) + " missing from era5 axis");
    }
    return pos;
}

} // namespace

void FitConfig::validate() const {
    if (learning_rate <= 0) throw ConfigError("fit: learning_rate must be positive");
    if (epochs <= 0) throw ConfigError("fit: epochs must be positive");
    if (snapshot_stride <= 0 || snapshot_window <= 0)
        throw ConfigError("fit: snapshot stride/window must be positive");
    if (snapshot_window % snapshot_stride != 0)
        throw ConfigError("fit: snapshot_window must be a multiple of snapshot_stride");
    if (snapshot_count() < 2) throw ConfigError("fit: need at least 2 snapshots");
    if (epochs < snapshot_window)
        throw ConfigError("fit: epochs " + std::to_string(epochs) + " < snapshot_window " +
                          std::to_string(snapshot_window));
    if (min_valid_obs < 1) throw ConfigError("fit: min_valid_obs must be >= 1");
    if (laplace_scale_beta <= 0) throw ConfigError("fit: laplace_scale_beta must be positive");
}

void AtcEnsemble::validate() const {
    if (count() < 2) throw ValidationError("ensemble: need at least 2 snapshots");
    for (const auto& s : snapshots)
        if (s.height != height() || s.width != width())
            throw ValidationError("ensemble: snapshots disagree on grid shape");
}

Eigen::Vector4d atc_l1_gradient(double c, double a, double phi, double b, double day_of_year,
                                double era5_value, double observed) {
    const double arg = kOmega * (day_of_year - phi);
    const double pred = c + a * std::cos(arg) + b * era5_value;
    const double r = pred - observed;
    const double s = (r > 0) - (r < 0);
    Eigen::Vector4d g;
    g[0] = s;
    g[1] = s * std::cos(arg);
    g[2] = s * a * kOmega * std::sin(arg);
    g[3] = s * era5_value;
    return g;
}

InitResult init_params(const SceneStack& stack, const Era5Series& era5, int min_valid_obs) {
    const int pixels = stack.shape.pixels();
    InitResult res;
    res.params = AtcParams::zeros(stack.shape.height, stack.shape.width);

    std::vector<double> c_ok, a_ok, phi_ok;
    c_ok.reserve(pixels);
    a_ok.reserve(pixels);
    phi_ok.reserve(pixels);
    (void)era5; // initialization uses observations only; b starts at 0

    for (int p = 0; p < pixels; ++p) {
        double sum = 0.0, vmin = 0.0, vmax = 0.0;
        int count = 0, warmest_day = stack.days.front();
        for (int d = 0; d < stack.shape.n_days; ++d) {
            const float v = stack.at(d, p);
            if (!std::isfinite(v)) continue;
            if (count == 0) {
                vmin = vmax = v;
                warmest_day = stack.days[d];
            } else {
                if (v > vmax) {
                    vmax = v;
                    warmest_day = stack.days[d];
                }
                vmin = std::min(vmin, static_cast<double>(v));
            }
            sum += v;
            ++count;
        }
        if (count < min_valid_obs) {
            res.deficient_pixels.push_back(p);
            continue;
        }
        const double c = sum / count;
        const double a = 0.5 * (vmax - vmin);
        res.params.c[p] = static_cast<float>(c);
        res.params.a[p] = static_cast<float>(a);
        res.params.phi[p] = static_cast<float>(warmest_day);
        res.params.b[p] = 0.f;
        c_ok.push_back(c);
        a_ok.push_back(a);
        phi_ok.push_back(warmest_day);
    }

    if (!res.deficient_pixels.empty()) {
        if (c_ok.empty())
            throw ValidationError("init: no pixel meets min_valid_obs=" +
                                  std::to_string(min_valid_obs));
        const float c_med = static_cast<float>(median_of(c_ok));
        const float a_med = static_cast<float>(median_of(a_ok));
        const float phi_med = static_cast<float>(median_of(phi_ok));
        for (int p : res.deficient_pixels) {
            res.params.c[p] = c_med;
            res.params.a[p] = a_med;
            res.params.phi[p] = phi_med;
            res.params.b[p] = 0.f;
        }
    }
    return res;
}

AtcEnsemble fit_atc(const SceneStack& stack, const Era5Series& era5, const FitConfig& config,
                    std::uint64_t seed, int workers, AtcFitDiagnostics* diag) {
    (void)seed; // full-batch updates are deterministic; seed is recorded by callers
    config.validate();
    stack.validate();
    era5.validate();
    const std::vector<int> era5_pos = align_days(stack, era5);

    const int pixels = stack.shape.pixels();
    const int n_days = stack.shape.n_days;
    const InitResult init = init_params(stack, era5, config.min_valid_obs);
    std::vector<char> deficient(pixels, 0);
    for (int p : init.deficient_pixels) deficient[p] = 1;

    // Shared per-day trig tables; cos(w(d-phi)) expands over them.
    Eigen::ArrayXd cos_wd(n_days), sin_wd(n_days);
    for (int d = 0; d < n_days; ++d) {
        cos_wd[d] = std::cos(kOmega * stack.days[d]);
        sin_wd[d] = std::sin(kOmega * stack.days[d]);
    }

    const int J = config.snapshot_count();
    const int window_start = config.epochs - config.snapshot_window;
    AtcEnsemble ens;
    ens.snapshots.assign(static_cast<std::size_t>(J),
                         AtcParams::zeros(stack.shape.height, stack.shape.width));
    ens.snapshot_epochs.resize(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j)
        ens.snapshot_epochs[j] = window_start + (j + 1) * config.snapshot_stride;

    // Deficient pixels keep their median-fallback parameters in every snapshot.
    for (int p : init.deficient_pixels) {
        for (auto& snap : ens.snapshots) {
            snap.c[p] = init.params.c[p];
            snap.a[p] = init.params.a[p];
            snap.phi[p] = static_cast<float>(reduce_phi(init.params.phi[p]));
            snap.b[p] = init.params.b[p];
        }
    }

    Eigen::ArrayXXd loss_trace; // (epochs, pixels), only when diagnostics requested
    if (diag) loss_trace = Eigen::ArrayXXd::Zero(config.epochs, pixels);

    parallel_for(static_cast<std::size_t>(pixels), workers, [&](std::size_t pi) {
        const int p = static_cast<int>(pi);
        if (deficient[p]) return;

        // Gather this pixel's valid observations once.
        Eigen::ArrayXd cd(n_days), sd(n_days), e5(n_days), obs(n_days);
        int n = 0;
        const int cell = era5.cell_for_pixel(p);
        for (int d = 0; d < n_days; ++d) {
            const float v = stack.at(d, p);
            if (!std::isfinite(v)) continue;
            cd[n] = cos_wd[d];
            sd[n] = sin_wd[d];
            e5[n] = era5.value(era5_pos[d], cell);
            obs[n] = v;
            ++n;
        }
        cd.conservativeResize(n);
        sd.conservativeResize(n);
        e5.conservativeResize(n);
        obs.conservativeResize(n);

        // The raw-kelvin reanalysis regressor makes the (C, b) valley
        // pathologically ill-conditioned for coordinate-wise steps (a b
        // nudge of 0.01 shifts the whole prediction by ~3 K). Optimize in a
        // per-pixel z-scored parameterization g = b*sd(era5), translating
        // back to the reported raw parameters at snapshot time:
        //   C + A cos + b*era5 == (C + b*mean) + A cos + g*z,  z = (era5-mean)/sd
        const double e5_mean = e5.mean();
        double e5_sd = std::sqrt((e5 - e5_mean).square().mean());
        const bool era5_usable = e5_sd > 1e-9;
        if (!era5_usable) e5_sd = 1.0;
        const Eigen::ArrayXd z = (e5 - e5_mean) / e5_sd;

        double c = init.params.c[p]; // centered-parameterization intercept
        double a = init.params.a[p];
        double phi = init.params.phi[p];
        double g_coef = 0.0; // init b = 0 implies g = 0

        Eigen::Array4d m = Eigen::Array4d::Zero();
        Eigen::Array4d v = Eigen::Array4d::Zero();
        double b1t = 1.0, b2t = 1.0;

        Eigen::ArrayXd cosarg(n), sinarg(n), r(n), sgn(n);
        for (int epoch = 1; epoch <= config.epochs; ++epoch) {
            const double cphi = std::cos(kOmega * phi);
            const double sphi = std::sin(kOmega * phi);
            cosarg = cd * cphi + sd * sphi; // cos(w(d - phi))
            sinarg = sd * cphi - cd * sphi; // sin(w(d - phi))
            r = c + a * cosarg + g_coef * z - obs;
            const double loss = r.abs().mean();
            if (!std::isfinite(loss))
                throw NumericError("atc fit diverged at epoch " + std::to_string(epoch) +
                                   " (pixel " + std::to_string(p) + ")");
            if (diag) loss_trace(epoch - 1, p) = loss;

            sgn = r.sign();
            Eigen::Array4d g;
            g[0] = sgn.mean();
            g[1] = (sgn * cosarg).mean();
            g[2] = (sgn * sinarg).mean() * a * kOmega;
            g[3] = era5_usable ? (sgn * z).mean() : 0.0;

            b1t *= config.adam_beta1;
            b2t *= config.adam_beta2;
            m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * g;
            v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * g.square();
            const Eigen::Array4d mhat = m / (1.0 - b1t);
            const Eigen::Array4d vhat = v / (1.0 - b2t);
            const Eigen::Array4d step =
                config.learning_rate * mhat / (vhat.sqrt() + config.adam_eps);
            c -= step[0];
            a -= step[1];
            phi -= step[2];
            g_coef -= step[3];

            if (epoch > window_start && (epoch - window_start) % config.snapshot_stride == 0) {
                const int j = (epoch - window_start) / config.snapshot_stride - 1;
                auto& snap = ens.snapshots[static_cast<std::size_t>(j)];
                const double b_raw = g_coef / e5_sd;
                snap.c[p] = static_cast<float>(c - b_raw * e5_mean);
                snap.a[p] = static_cast<float>(a);
                snap.phi[p] = static_cast<float>(reduce_phi(phi));
                snap.b[p] = static_cast<float>(b_raw);
            }
        }
    });

    if (diag) {
        diag->deficient_pixels = init.deficient_pixels;
        const int fitted = pixels - static_cast<int>(init.deficient_pixels.size());
        diag->epoch_mean_loss = Eigen::ArrayXd::Zero(config.epochs);
        if (fitted > 0) {
            for (int e = 0; e < config.epochs; ++e)
                diag->epoch_mean_loss[e] = loss_trace.row(e).sum() / fitted;
        }
        diag->initial_loss = diag->epoch_mean_loss.size() ? diag->epoch_mean_loss[0] : 0.0;
        diag->final_loss =
            diag->epoch_mean_loss.size() ? diag->epoch_mean_loss[config.epochs - 1] : 0.0;
    }
    return ens;
}

namespace {

/// Predictions of every snapshot at one day: (J x pixels).
Eigen::MatrixXd ensemble_forward(const AtcEnsemble& ens, int day_of_year,
                                 const Era5Series& era5) {
    if (day_of_year < 1 || day_of_year > kMaxDayOfYear)
        throw ValidationError("day " + std::to_string(day_of_year) + " outside [1,366]");
    const int pos = era5.day_pos(day_of_year);
    if (pos < 0)
        throw ValidationError("day-axis mismatch: day " + std::to_string(day_of_year) +
                              " missing from era5 axis");
    const int J = ens.count();
    const int pixels = ens.height() * ens.width();
    if (era5.pixel_height != ens.height() || era5.pixel_width != ens.width())
        throw ValidationError("era5 pixel grid does not match ensemble grid");

    Eigen::MatrixXd pred(J, pixels);
    const double cwd = std::cos(kOmega * day_of_year);
    const double swd = std::sin(kOmega * day_of_year);
    for (int j = 0; j < J; ++j) {
        const AtcParams& s = ens.snapshots[static_cast<std::size_t>(j)];
        for (int p = 0; p < pixels; ++p) {
            const double cphi = std::cos(kOmega * s.phi[p]);
            const double sphi = std::sin(kOmega * s.phi[p]);
            const double e5 = era5.value(pos, era5.cell_for_pixel(p));
            pred(j, p) = s.c[p] + s.a[p] * (cwd * cphi + swd * sphi) + s.b[p] * e5;
        }
    }
    return pred;
}

void percentile_bounds(const Eigen::MatrixXd& pred, double level, Eigen::ArrayXd& lower,
                       Eigen::ArrayXd& upper) {
    const int J = static_cast<int>(pred.rows());
    const int pixels = static_cast<int>(pred.cols());
    const double q_lo = 0.5 * (1.0 - level);
    const double q_hi = 1.0 - q_lo;
    lower.resize(pixels);
    upper.resize(pixels);
    std::vector<double> buf(static_cast<std::size_t>(J));
    auto interp = [&](double q) {
        const double h = q * (J - 1);
        const int lo = static_cast<int>(std::floor(h));
        const double frac = h - lo;
        if (lo + 1 >= J) return buf[static_cast<std::size_t>(J - 1)];
        return buf[static_cast<std::size_t>(lo)] +
               frac * (buf[static_cast<std::size_t>(lo + 1)] - buf[static_cast<std::size_t>(lo)]);
    };
    for (int p = 0; p < pixels; ++p) {
        for (int j = 0; j < J; ++j) buf[static_cast<std::size_t>(j)] = pred(j, p);
        std::sort(buf.begin(), buf.end());
        lower[p] = interp(q_lo);
        upper[p] = interp(q_hi);
    }
}

} // namespace

void ensemble_predict(const AtcEnsemble& ens, int day_of_year, const Era5Series& era5,
                      Eigen::ArrayXd& mean, Eigen::ArrayXd& spread) {
    ens.validate();
    const Eigen::MatrixXd pred = ensemble_forward(ens, day_of_year, era5);
    const int J = static_cast<int>(pred.rows());
    mean = pred.colwise().mean().array();
    spread.resize(pred.cols());
    for (Eigen::Index p = 0; p < pred.cols(); ++p) {
        const double mu = mean[p];
        double ss = 0.0;
        for (int j = 0; j < J; ++j) {
            const double d = pred(j, p) - mu;
            ss += d * d;
        }
        spread[p] = std::sqrt(ss / (J - 1));
    }
}

void atc_interval(const AtcEnsemble& ens, int day_of_year, const Era5Series& era5, double level,
                  Eigen::ArrayXd& lower, Eigen::ArrayXd& upper) {
    ens.validate();
    if (!(level > 0.0 && level < 1.0))
        throw ValidationError("interval level " + std::to_string(level) + " outside (0,1)");
    const double min_snapshots = 2.0 / (1.0 - level);
    if (ens.count() < min_snapshots)
        throw ValidationError("ensemble of " + std::to_string(ens.count()) +
                              " snapshots too small for level " + std::to_string(level));
    const Eigen::MatrixXd pred = ensemble_forward(ens, day_of_year, era5);
    percentile_bounds(pred, level, lower, upper);
    const Eigen::ArrayXd mean = pred.colwise().mean().array();
    lower = lower.min(mean);
    upper = upper.max(mean);
}

void save_ensemble(const AtcEnsemble& ens, const std::string& dir) {
    ens.validate();
    std::filesystem::create_directories(dir);
    const int J = ens.count();
    const int h = ens.height();
    const int w = ens.width();
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    auto write_param = [&](const char* name, auto getter) {
        LstcCube cube;
        cube.dims = {J, h, w};
        cube.days = {};
        cube.meta = nlohmann::json{{"kind", "atc_snapshots"}, {"param", name}};
        cube.data.resize(static_cast<std::size_t>(J) * plane);
        for (int j = 0; j < J; ++j) {
            const auto& src = getter(ens.snapshots[static_cast<std::size_t>(j)]);
            std::copy(src.begin(), src.end(), cube.data.begin() + j * plane);
        }
        save_cube(cube, (std::filesystem::path(dir) / (std::string(name) + ".lstc")).string());
    };
    write_param("C", [](const AtcParams& p) -> const std::vector<float>& { return p.c; });
    write_param("A", [](const AtcParams& p) -> const std::vector<float>& { return p.a; });
    write_param("PHI", [](const AtcParams& p) -> const std::vector<float>& { return p.phi; });
    write_param("B", [](const AtcParams& p) -> const std::vector<float>& { return p.b; });

    nlohmann::json manifest;
    manifest["snapshots"] = J;
    manifest["height"] = h;
    manifest["width"] = w;
    manifest["snapshot_epochs"] = ens.snapshot_epochs;
    manifest["params"] = {"C", "A", "PHI", "B"};
    std::ofstream out(std::filesystem::path(dir) / "manifest.json");
    if (!out) throw IoError("cannot write ensemble manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

AtcEnsemble load_ensemble(const std::string& dir) {
    std::ifstream in(std::filesystem::path(dir) / "manifest.json");
    if (!in) throw IoError("cannot read ensemble manifest in " + dir);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("ensemble manifest: ") + e.what());
    }
    const int J = manifest.at("snapshots").get<int>();
    const int h = manifest.at("height").get<int>();
    const int w = manifest.at("width").get<int>();
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    AtcEnsemble ens;
    ens.snapshots.assign(static_cast<std::size_t>(J), AtcParams::zeros(h, w));
    ens.snapshot_epochs = manifest.at("snapshot_epochs").get<std::vector<int>>();

    auto read_param = [&](const char* name, auto setter) {
        const LstcCube cube =
            load_cube((std::filesystem::path(dir) / (std::string(name) + ".lstc")).string());
        if (cube.dims[0] != J || cube.dims[1] != h || cube.dims[2] != w)
            throw ValidationError(std::string("ensemble cube ") + name +
                                  " dims disagree with manifest");
        for (int j = 0; j < J; ++j) {
            auto& dst = setter(ens.snapshots[static_cast<std::size_t>(j)]);
            std::copy(cube.data.begin() + j * plane, cube.data.begin() + (j + 1) * plane,
                      dst.begin());
        }
    };
    read_param("C", [](AtcParams& p) -> std::vector<float>& { return p.c; });
    read_param("A", [](AtcParams& p) -> std::vector<float>& { return p.a; });
    read_param("PHI", [](AtcParams& p) -> std::vector<float>& { return p.phi; });
    read_param("B", [](AtcParams& p) -> std::vector<float>& { return p.b; });
    ens.validate();
    return ens;
}

} // namespace delag

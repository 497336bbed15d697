#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "delag/types.hpp"

namespace delag {

/// Per-pixel enhanced annual temperature cycle coefficients, stored as one
/// plane per coefficient: annual mean C (K), amplitude A (K), phase shift
/// phi (days), reanalysis coupling b (unitless).
struct AtcParams {
    int height = 0;
    int width = 0;
    std::vector<float> c, a, phi, b;

    int pixels() const { return height * width; }

    static AtcParams zeros(int height, int width) {
        AtcParams p;
        p.height = height;
        p.width = width;
        const auto n = static_cast<std::size_t>(height) * width;
        p.c.assign(n, 0.f);
        p.a.assign(n, 0.f);
        p.phi.assign(n, 0.f);
        p.b.assign(n, 0.f);
        return p;
    }
};

/// J snapshots of the parameter grid collected along the tail of the
/// optimization trajectory, used as an ensemble.
struct AtcEnsemble {
    std::vector<AtcParams> snapshots;
    std::vector<int> snapshot_epochs;

    int count() const { return static_cast<int>(snapshots.size()); }
    int height() const { return snapshots.empty() ? 0 : snapshots.front().height; }
    int width() const { return snapshots.empty() ? 0 : snapshots.front().width; }

    void validate() const;
};

struct FitConfig {
    double learning_rate = 0.1;
    int epochs = 1200;
    int snapshot_stride = 4;
    int snapshot_window = 800; // final epochs from which snapshots are taken
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int min_valid_obs = 8;
    double laplace_scale_beta = 1.0; // scale of Eq. objective; argmin independent of it

    int snapshot_count() const { return snapshot_window / snapshot_stride; }
    void validate() const;
};

/// eATC forward model: C + A*cos(2*pi/365*(d - phi)) + b*era5_value.
inline double atc_forward(double c, double a, double phi, double b, double day_of_year,
                          double era5_value) {
    constexpr double w = 2.0 * M_PI / 365.0;
    return c + a * std::cos(w * (day_of_year - phi)) + b * era5_value;
}

/// Analytic gradient of |obs - forward| w.r.t. (c, a, phi, b) at one
/// observation; the subgradient at zero residual is defined as 0.
Eigen::Vector4d atc_l1_gradient(double c, double a, double phi, double b, double day_of_year,
                                double era5_value, double observed);

struct InitResult {
    AtcParams params;
    std::vector<int> deficient_pixels; // pixels below min_valid_obs, given median fallbacks
};

/// Per-pixel initialization: C = mean of valid observations, A = half the
/// observed range, phi = day-of-year of the warmest observation, b = 0.
/// Pixels with fewer than min_valid_obs observations fall back to area-wide
/// medians and are listed in the deficiency report.
InitResult init_params(const SceneStack& stack, const Era5Series& era5, int min_valid_obs = 8);

struct AtcFitDiagnostics {
    Eigen::ArrayXd epoch_mean_loss; // filled only when requested
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<int> deficient_pixels;
};

/// Full-batch Adam on the per-pixel L1 objective, collecting one snapshot
/// every snapshot_stride epochs over the final snapshot_window epochs.
/// Deterministic for a given seed regardless of worker count.
AtcEnsemble fit_atc(const SceneStack& stack, const Era5Series& era5, const FitConfig& config,
                    std::uint64_t seed, int workers = 1, AtcFitDiagnostics* diag = nullptr);

/// Ensemble mean and per-pixel sample standard deviation across snapshots.
void ensemble_predict(const AtcEnsemble& ens, int day_of_year, const Era5Series& era5,
                      Eigen::ArrayXd& mean, Eigen::ArrayXd& spread);

/// Empirical per-pixel percentile interval (linear interpolation between
/// order statistics) across the snapshot predictions. Bounds are widened,
/// if needed, to bracket the ensemble mean.
void atc_interval(const AtcEnsemble& ens, int day_of_year, const Era5Series& era5, double level,
                  Eigen::ArrayXd& lower, Eigen::ArrayXd& upper);

/// Ensemble storage: one J-plane LSTC container per coefficient plus a JSON
/// manifest, inside `dir`.
void save_ensemble(const AtcEnsemble& ens, const std::string& dir);
AtcEnsemble load_ensemble(const std::string& dir);

} // namespace delag

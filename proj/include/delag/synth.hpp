#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "delag/atc.hpp"
#include "delag/types.hpp"

namespace delag {

/// Observation schedules: offsets within the 16-day repeat cycle.
/// 4-per-16 mirrors a dual-satellite cross-track city (days 4,5,12,13 of
/// each cycle), 2-per-16 a single satellite with cross-track coverage,
/// 1-per-16 a single track.
enum class Cadence { FourPer16, TwoPer16, OnePer16 };

const std::vector<int>& cadence_offsets(Cadence c);
std::vector<int> cadence_days(Cadence c);
std::string cadence_name(Cadence c);
Cadence cadence_from_name(const std::string& name);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

struct SynthConfig {
    GridShape shape{0, 64, 64}; // n_days 0 = derive from cadence
    std::uint64_t seed = 0;
    Interval c_range{255.0, 280.0};
    Interval a_range{4.0, 12.0};
    Interval phi_range{160.0, 230.0};
    Interval b_range{0.02, 0.10};
    double era5_ar1_rho = 0.7;
    double era5_daily_sd = 2.5;
    double residual_lengthscale = 2.0; // standardized feature-space units
    double residual_sd = 1.0;
    double obs_noise_sd = 0.5;
    double cloud_fraction_target = 0.5;
    Cadence cadence = Cadence::FourPer16;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& cfg);
void from_json(const nlohmann::json& j, SynthConfig& cfg);

/// Planted truth. true_lst(d,s) = eATC(true_params(s), d, era5) +
/// true_residuals(d,s) holds exactly (double arithmetic, float-stored
/// parameters and forcing).
struct GroundTruth {
    AtcParams true_params;
    std::vector<int> days;
    std::vector<double> true_residuals; // day-major, row-major
    std::vector<double> true_lst;       // day-major, row-major

    double residual_at(int day_index, int pixel, int pixels) const {
        return true_residuals[static_cast<std::size_t>(day_index) * pixels + pixel];
    }
    double lst_at(int day_index, int pixel, int pixels) const {
        return true_lst[static_cast<std::size_t>(day_index) * pixels + pixel];
    }
};

struct SynthData {
    SceneStack stack;
    Era5Series era5;
    FeatureRaster features;
    GroundTruth truth;
};

/// Generate a synthetic scene with known ground truth. Fully determined by
/// the config (per-day substreams are derived from (seed, purpose, day), so
/// e.g. changing the cloud fraction never changes the observation noise).
SynthData generate(const SynthConfig& config);

/// Drop days that do not belong to the target cadence. Thinning to the
/// stack's own cadence is the identity; a stack missing target days is an
/// error.
SceneStack thin_cadence(const SceneStack& stack, Cadence target);

} // namespace delag

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "delag/atc.hpp"
#include "delag/gp.hpp"
#include "delag/types.hpp"

namespace delag {

enum class SourceFlag : std::uint8_t {
    Observed = 0,
    ReconWithGp = 1,
    ReconAtcOnly = 2,
};

/// One day's gap-free reconstruction. `mean` is the model mean everywhere
/// (kept for diagnostics even on observed pixels); `seamless` substitutes
/// the observation wherever one exists.
struct ReconstructionResult {
    int day = 0;
    Eigen::ArrayXd mean;
    Eigen::ArrayXd seamless;
    Eigen::ArrayXd lower95, upper95;
    Eigen::ArrayXd var_atc, var_gp;
    std::vector<std::uint8_t> source;

    void validate() const;
};

/// Variance decomposition: total = cross-day (ATC ensemble) + within-day
/// (GP), summed elementwise by the law of total variance.
Eigen::ArrayXd combine_uncertainty(const Eigen::ArrayXd& var_atc, const Eigen::ArrayXd& var_gp);

/// 95% bounds combined as the sum of the two stages' bounds.
void total_interval(const Eigen::ArrayXd& atc_lower, const Eigen::ArrayXd& atc_upper,
                    const Eigen::ArrayXd& gp_lower, const Eigen::ArrayXd& gp_upper,
                    Eigen::ArrayXd& lower, Eigen::ArrayXd& upper);

/// Reconstruct one calendar day. gp_model may be null (no observations that
/// day, or the day was GP-skipped): the reconstruction then reduces to the
/// ATC ensemble alone. If the day has valid observations but no GP model,
/// a warning is emitted through `warning` (never silent).
ReconstructionResult reconstruct_day(const AtcEnsemble& ens, const GpModel* gp_model,
                                     const Era5Series& era5, const FeatureRaster& features,
                                     const SceneStack& stack, int day_of_year,
                                     double level = 0.95, std::string* warning = nullptr);

/// Write the seamless cube plus companion lower/upper/variance/source cubes
/// with the given path prefix ("<prefix>.lstc", "<prefix>_lower.lstc", ...).
void write_reconstruction_cubes(const std::vector<ReconstructionResult>& results, int height,
                                int width, const std::string& prefix);

} // namespace delag

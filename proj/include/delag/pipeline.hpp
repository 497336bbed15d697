#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "delag/atc.hpp"
#include "delag/gp.hpp"
#include "delag/recon.hpp"
#include "delag/types.hpp"

namespace delag {

struct PipelineConfig {
    FitConfig fit;
    GpConfig gp;
    double interval_level = 0.95;
    std::uint64_t seed = 0;
    int workers = 1;
};

/// Fitted two-stage model: the ATC ensemble plus one GP model (or a skip
/// reason) per observation day.
struct PipelineModel {
    AtcEnsemble ensemble;
    std::vector<std::optional<GpModel>> gp_models; // aligned with stack.days
    std::vector<std::string> gp_skips;             // "" where a model exists
    std::vector<int> days;
};

PipelineModel fit_pipeline(const SceneStack& stack, const Era5Series& era5,
                           const FeatureRaster& features, const PipelineConfig& config);

/// Reconstruct one calendar day with the fitted model (ATC-only fallback
/// where no GP model exists for that day).
ReconstructionResult reconstruct_with_model(const PipelineModel& model, const SceneStack& stack,
                                            const Era5Series& era5,
                                            const FeatureRaster& features, int day_of_year,
                                            double level = 0.95, std::string* warning = nullptr);

/// Valid-cell helpers shared by the GP stage and the validation harness.
std::vector<int> valid_pixels(const SceneStack& stack, int day_index);

} // namespace delag

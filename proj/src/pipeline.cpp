#include "delag/pipeline.hpp"

#include <cmath>

#include "delag/error.hpp"
#include "delag/parallel.hpp"
#include "delag/rng.hpp"

namespace delag {

std::vector<int> valid_pixels(const SceneStack& stack, int day_index) {
    std::vector<int> ids;
    const auto vals = stack.day(day_index);
    for (int p = 0; p < stack.shape.pixels(); ++p)
        if (std::isfinite(vals[p])) ids.push_back(p);
    return ids;
}

PipelineModel fit_pipeline(const SceneStack& stack, const Era5Series& era5,
                           const FeatureRaster& features, const PipelineConfig& config) {
    features.validate();
    if (features.height != stack.shape.height || features.width != stack.shape.width)
        throw ValidationError("pipeline: feature grid does not match stack grid");

    PipelineModel model;
    model.days = stack.days;
    model.ensemble = fit_atc(stack, era5, config.fit, config.seed, config.workers);

    const int n_days = stack.shape.n_days;
    model.gp_models.resize(static_cast<std::size_t>(n_days));
    model.gp_skips.assign(static_cast<std::size_t>(n_days), "");

    parallel_for(static_cast<std::size_t>(n_days), config.workers, [&](std::size_t di) {
        const int d = static_cast<int>(di);
        const std::vector<int> ids = valid_pixels(stack, d);
        if (ids.empty()) {
            model.gp_skips[di] = "no valid observations";
            return;
        }
        Eigen::ArrayXd atc_mean, atc_sd;
        ensemble_predict(model.ensemble, stack.days[d], era5, atc_mean, atc_sd);

        Eigen::VectorXd resid(static_cast<Eigen::Index>(ids.size()));
        for (std::size_t i = 0; i < ids.size(); ++i)
            resid[static_cast<Eigen::Index>(i)] =
                static_cast<double>(stack.at(d, ids[i])) - atc_mean[ids[i]];
        const Eigen::MatrixXd x = features.gather(ids);

        GpFitOutcome out = fit_gp_day(x, resid, config.gp,
                                      derive_seed(config.seed, 0x6770ULL /*"gp"*/,
                                                  static_cast<std::uint64_t>(stack.days[d])));
        if (out.model) {
            out.model->strip_prediction_cache(); // a year of dense factors won't fit
            model.gp_models[di] = std::move(*out.model);
        } else {
            model.gp_skips[di] = out.skip_reason;
        }
    });
    return model;
}

ReconstructionResult reconstruct_with_model(const PipelineModel& model, const SceneStack& stack,
                                            const Era5Series& era5,
                                            const FeatureRaster& features, int day_of_year,
                                            double level, std::string* warning) {
    const GpModel* gp = nullptr;
    for (std::size_t i = 0; i < model.days.size(); ++i) {
        if (model.days[i] == day_of_year && model.gp_models[i].has_value()) {
            gp = &*model.gp_models[i];
            break;
        }
    }
    return reconstruct_day(model.ensemble, gp, era5, features, stack, day_of_year, level,
                           warning);
}

} // namespace delag

#include "delag/recon.hpp"

#include <algorithm>
#include <cmath>

#include "delag/container.hpp"
#include "delag/error.hpp"

namespace delag {

namespace {
constexpr double kZ95 = 1.959963984540054; // Phi^-1(0.975)
}

void ReconstructionResult::validate() const {
    const auto n = mean.size();
    if (lower95.size() != n || upper95.size() != n || var_atc.size() != n || var_gp.size() != n ||
        seamless.size() != n || static_cast<Eigen::Index>(source.size()) != n)
        throw ValidationError("reconstruction: grid sizes disagree");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(lower95[i] <= mean[i] && mean[i] <= upper95[i]))
            throw ValidationError("reconstruction: interval does not bracket mean at pixel " +
                                  std::to_string(i));
        if (var_atc[i] < 0 || var_gp[i] < 0)
            throw ValidationError("reconstruction: negative variance at pixel " +
                                  std::to_string(i));
    }
}

Eigen::ArrayXd combine_uncertainty(const Eigen::ArrayXd& var_atc, const Eigen::ArrayXd& var_gp) {
    if (var_atc.size() != var_gp.size())
        throw ValidationError("combine_uncertainty: grid sizes differ");
    if ((var_atc < 0).any() || (var_gp < 0).any())
        throw ValidationError("combine_uncertainty: negative variance input");
    return var_atc + var_gp;
}

void total_interval(const Eigen::ArrayXd& atc_lower, const Eigen::ArrayXd& atc_upper,
                    const Eigen::ArrayXd& gp_lower, const Eigen::ArrayXd& gp_upper,
                    Eigen::ArrayXd& lower, Eigen::ArrayXd& upper) {
    if (atc_lower.size() != atc_upper.size() || gp_lower.size() != gp_upper.size() ||
        atc_lower.size() != gp_lower.size())
        throw ValidationError("total_interval: grid sizes differ");
    if ((atc_lower > atc_upper).any() || (gp_lower > gp_upper).any())
        throw ValidationError("total_interval: crossed input bounds");
    lower = atc_lower + gp_lower;
    upper = atc_upper + gp_upper;
}

ReconstructionResult reconstruct_day(const AtcEnsemble& ens, const GpModel* gp_model,
                                     const Era5Series& era5, const FeatureRaster& features,
                                     const SceneStack& stack, int day_of_year, double level,
                                     std::string* warning) {
    const int pixels = ens.height() * ens.width();
    if (features.pixels() != pixels || features.height != ens.height())
        throw ValidationError("reconstruct_day: feature grid does not match ensemble grid");

    ReconstructionResult res;
    res.day = day_of_year;

    Eigen::ArrayXd atc_mean, atc_sd, atc_lower, atc_upper;
    ensemble_predict(ens, day_of_year, era5, atc_mean, atc_sd);
    atc_interval(ens, day_of_year, era5, level, atc_lower, atc_upper);
    res.var_atc = atc_sd.square();

    // Day on the observation calendar? Count valid pixels.
    int day_index = -1;
    for (std::size_t i = 0; i < stack.days.size(); ++i)
        if (stack.days[i] == day_of_year) day_index = static_cast<int>(i);
    const int n_valid = day_index >= 0
                            ? static_cast<int>(stack.day(day_index).isFinite().count())
                            : 0;

    const bool use_gp = gp_model != nullptr && n_valid > 0;
    if (!use_gp) {
        if (n_valid > 0 && warning)
            *warning = "day " + std::to_string(day_of_year) +
                       " has valid observations but no GP model; using ATC-only fallback";
        res.mean = atc_mean;
        res.lower95 = atc_lower;
        res.upper95 = atc_upper;
        res.var_gp = Eigen::ArrayXd::Zero(pixels);
    } else {
        Eigen::MatrixXd query(pixels, features.f_dim);
        for (int p = 0; p < pixels; ++p)
            for (int f = 0; f < features.f_dim; ++f) query(p, f) = features.at(f, p);
        const GpPrediction gp = gp_predict(*gp_model, query);
        res.mean = atc_mean + gp.mean;
        res.var_gp = gp.variance;
        const Eigen::ArrayXd gp_sd = gp.variance.max(0.0).sqrt();
        const Eigen::ArrayXd gp_lower = gp.mean - kZ95 * gp_sd;
        const Eigen::ArrayXd gp_upper = gp.mean + kZ95 * gp_sd;
        total_interval(atc_lower, atc_upper, gp_lower, gp_upper, res.lower95, res.upper95);
    }

    res.lower95 = res.lower95.min(res.mean);
    res.upper95 = res.upper95.max(res.mean);

    res.seamless = res.mean;
    res.source.assign(static_cast<std::size_t>(pixels),
                      static_cast<std::uint8_t>(use_gp ? SourceFlag::ReconWithGp
                                                       : SourceFlag::ReconAtcOnly));
    if (day_index >= 0) {
        const auto obs = stack.day(day_index);
        for (int p = 0; p < pixels; ++p) {
            if (std::isfinite(obs[p])) {
                res.seamless[p] = obs[p];
                res.source[static_cast<std::size_t>(p)] =
                    static_cast<std::uint8_t>(SourceFlag::Observed);
            }
        }
    }
    return res;
}

void write_reconstruction_cubes(const std::vector<ReconstructionResult>& results, int height,
                                int width, const std::string& prefix) {
    if (results.empty()) throw ValidationError("write_reconstruction: no days");
    const int n_days = static_cast<int>(results.size());
    const std::size_t plane = static_cast<std::size_t>(height) * width;

    std::vector<int> days(results.size());
    for (std::size_t i = 0; i < results.size(); ++i) days[i] = results[i].day;

    auto write = [&](const std::string& suffix, const char* kind, auto getter) {
        LstcCube cube;
        cube.dims = {n_days, height, width};
        cube.days = days;
        cube.meta = nlohmann::json{{"kind", kind}};
        cube.data.resize(static_cast<std::size_t>(n_days) * plane);
        for (int d = 0; d < n_days; ++d) {
            for (std::size_t p = 0; p < plane; ++p)
                cube.data[static_cast<std::size_t>(d) * plane + p] =
                    static_cast<float>(getter(results[static_cast<std::size_t>(d)], p));
        }
        save_cube(cube, prefix + suffix + ".lstc");
    };
    write("", "recon", [](const ReconstructionResult& r, std::size_t p) { return r.seamless[static_cast<Eigen::Index>(p)]; });
    write("_mean", "recon_mean", [](const ReconstructionResult& r, std::size_t p) { return r.mean[static_cast<Eigen::Index>(p)]; });
    write("_lower", "recon_lower", [](const ReconstructionResult& r, std::size_t p) { return r.lower95[static_cast<Eigen::Index>(p)]; });
    write("_upper", "recon_upper", [](const ReconstructionResult& r, std::size_t p) { return r.upper95[static_cast<Eigen::Index>(p)]; });
    write("_var_atc", "recon_var_atc", [](const ReconstructionResult& r, std::size_t p) { return r.var_atc[static_cast<Eigen::Index>(p)]; });
    write("_var_gp", "recon_var_gp", [](const ReconstructionResult& r, std::size_t p) { return r.var_gp[static_cast<Eigen::Index>(p)]; });
    write("_source", "recon_source", [](const ReconstructionResult& r, std::size_t p) { return static_cast<double>(r.source[p]); });
}

} // namespace delag

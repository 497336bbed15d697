#include "delag/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "delag/error.hpp"
#include "delag/rng.hpp"

namespace delag {

namespace {

// Fixed ERA5 climate shape; the config controls only the anomaly process.
constexpr double kEra5Mean = 288.0;
constexpr double kEra5SeasonalAmp = 8.0;
constexpr double kEra5Phase = 200.0;
constexpr double kOmega = 2.0 * M_PI / 365.0;

// Substream tags.
enum : std::uint64_t {
    kTagParams = 1,
    kTagEra5 = 2,
    kTagFeatures = 3,
    kTagResidual = 4,
    kTagResidualNoise = 5,
    kTagObsNoise = 6,
    kTagMask = 7,
};

// The smooth residual component gets sqrt(3)/2 of the target sd and the
// i.i.d. component 1/2, so the total sd is residual_sd.
constexpr double kSmoothShare = 0.8660254037844386;
constexpr double kIidShare = 0.5;

} // namespace

const std::vector<int>& cadence_offsets(Cadence c) {
    static const std::vector<int> four{4, 5, 12, 13};
    static const std::vector<int> two{4, 13};
    static const std::vector<int> one{4};
    switch (c) {
        case Cadence::FourPer16: return four;
        case Cadence::TwoPer16: return two;
        case Cadence::OnePer16: return one;
    }
    throw ConfigError("unknown cadence");
}

std::vector<int> cadence_days(Cadence c) {
    std::vector<int> days;
    for (int base = 0; base + 16 <= 368; base += 16) {
        for (int off : cadence_offsets(c)) {
            const int d = base + off;
            if (d >= 1 && d <= 365) days.push_back(d);
        }
    }
    std::sort(days.begin(), days.end());
    return days;
}

std::string cadence_name(Cadence c) {
    switch (c) {
        case Cadence::FourPer16: return "4-per-16";
        case Cadence::TwoPer16: return "2-per-16";
        case Cadence::OnePer16: return "1-per-16";
    }
    throw ConfigError("unknown cadence");
}

Cadence cadence_from_name(const std::string& name) {
    if (name == "4-per-16") return Cadence::FourPer16;
    if (name == "2-per-16") return Cadence::TwoPer16;
    if (name == "1-per-16") return Cadence::OnePer16;
    throw ConfigError("unknown cadence \"" + name + "\" (want 4-per-16, 2-per-16 or 1-per-16)");
}

void SynthConfig::validate() const {
    auto check_interval = [](const Interval& iv, const char* name) {
        if (!(iv.lo <= iv.hi))
            throw ConfigError(std::string("synth: empty interval for ") + name);
    };
    check_interval(c_range, "c_range");
    check_interval(a_range, "a_range");
    check_interval(phi_range, "phi_range");
    check_interval(b_range, "b_range");
    if (shape.height <= 0 || shape.width <= 0)
        throw ConfigError("synth: grid dims must be positive");
    const int expected = static_cast<int>(cadence_days(cadence).size());
    if (shape.n_days != 0 && shape.n_days != expected)
        throw ConfigError("synth: shape.n_days " + std::to_string(shape.n_days) +
                          " does not match cadence " + cadence_name(cadence) + " (" +
                          std::to_string(expected) + " days)");
    if (!(era5_ar1_rho >= 0.0 && era5_ar1_rho < 1.0))
        throw ConfigError("synth: era5_ar1_rho must be in [0,1)");
    if (era5_daily_sd < 0 || residual_sd < 0 || obs_noise_sd < 0)
        throw ConfigError("synth: standard deviations must be >= 0");
    if (residual_lengthscale <= 0)
        throw ConfigError("synth: residual_lengthscale must be positive");
    if (cloud_fraction_target < 0.0 || cloud_fraction_target > 1.0)
        throw ConfigError("synth: cloud_fraction_target must be in [0,1]");
    if (cloud_fraction_target >= 1.0)
        throw ConfigError("synth: cloud_fraction_target = 1 cannot leave any valid pixel");
}

void to_json(nlohmann::json& j, const SynthConfig& cfg) {
    j = nlohmann::json{
        {"shape", {cfg.shape.n_days, cfg.shape.height, cfg.shape.width}},
        {"seed", cfg.seed},
        {"c_range", {cfg.c_range.lo, cfg.c_range.hi}},
        {"a_range", {cfg.a_range.lo, cfg.a_range.hi}},
        {"phi_range", {cfg.phi_range.lo, cfg.phi_range.hi}},
        {"b_range", {cfg.b_range.lo, cfg.b_range.hi}},
        {"era5_ar1_rho", cfg.era5_ar1_rho},
        {"era5_daily_sd", cfg.era5_daily_sd},
        {"residual_lengthscale", cfg.residual_lengthscale},
        {"residual_sd", cfg.residual_sd},
        {"obs_noise_sd", cfg.obs_noise_sd},
        {"cloud_fraction_target", cfg.cloud_fraction_target},
        {"cadence", cadence_name(cfg.cadence)},
    };
}

void from_json(const nlohmann::json& j, SynthConfig& cfg) {
    auto interval = [&](const char* key, Interval& iv) {
        if (j.contains(key)) {
            iv.lo = j.at(key).at(0).get<double>();
            iv.hi = j.at(key).at(1).get<double>();
        }
    };
    if (j.contains("shape")) {
        cfg.shape.n_days = j.at("shape").at(0).get<int>();
        cfg.shape.height = j.at("shape").at(1).get<int>();
        cfg.shape.width = j.at("shape").at(2).get<int>();
    }
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    interval("c_range", cfg.c_range);
    interval("a_range", cfg.a_range);
    interval("phi_range", cfg.phi_range);
    interval("b_range", cfg.b_range);
    if (j.contains("era5_ar1_rho")) cfg.era5_ar1_rho = j.at("era5_ar1_rho").get<double>();
    if (j.contains("era5_daily_sd")) cfg.era5_daily_sd = j.at("era5_daily_sd").get<double>();
    if (j.contains("residual_lengthscale"))
        cfg.residual_lengthscale = j.at("residual_lengthscale").get<double>();
    if (j.contains("residual_sd")) cfg.residual_sd = j.at("residual_sd").get<double>();
    if (j.contains("obs_noise_sd")) cfg.obs_noise_sd = j.at("obs_noise_sd").get<double>();
    if (j.contains("cloud_fraction_target"))
        cfg.cloud_fraction_target = j.at("cloud_fraction_target").get<double>();
    if (j.contains("cadence")) cfg.cadence = cadence_from_name(j.at("cadence").get<std::string>());
}

namespace {

Era5Series make_era5(const SynthConfig& cfg) {
    Era5Series era5;
    era5.pixel_height = cfg.shape.height;
    era5.pixel_width = cfg.shape.width;
    era5.rows = std::max(1, cfg.shape.height / 32);
    era5.cols = std::max(1, cfg.shape.width / 32);
    era5.days.resize(365);
    for (int d = 0; d < 365; ++d) era5.days[d] = d + 1;
    era5.values.resize(365 * static_cast<std::size_t>(era5.n_cells()));

    for (int cell = 0; cell < era5.n_cells(); ++cell) {
        Rng rng(derive_seed(cfg.seed, kTagEra5, static_cast<std::uint64_t>(cell)));
        double anomaly = rng.normal(0.0, cfg.era5_daily_sd);
        const double innov_sd = cfg.era5_daily_sd * std::sqrt(1.0 - cfg.era5_ar1_rho * cfg.era5_ar1_rho);
        for (int d = 0; d < 365; ++d) {
            if (d > 0) anomaly = cfg.era5_ar1_rho * anomaly + rng.normal(0.0, innov_sd);
            const double seasonal = kEra5SeasonalAmp * std::cos(kOmega * (era5.days[d] - kEra5Phase));
            const double v = kEra5Mean + seasonal + anomaly;
            era5.values[static_cast<std::size_t>(d) * era5.n_cells() + cell] =
                static_cast<float>(std::clamp(v, kTempMinK, kTempMaxK));
        }
    }
    return era5;
}

FeatureRaster make_features(const SynthConfig& cfg) {
    FeatureRaster f;
    f.f_dim = 6;
    f.height = cfg.shape.height;
    f.width = cfg.shape.width;
    f.values.resize(static_cast<std::size_t>(f.f_dim) * f.pixels());

    // Four smooth pseudo-reflectance bands from a few random cosine waves,
    // squashed into [0,1].
    for (int band = 0; band < 4; ++band) {
        Rng rng(derive_seed(cfg.seed, kTagFeatures, static_cast<std::uint64_t>(band)));
        constexpr int kWaves = 3;
        double u[kWaves], v[kWaves], phase[kWaves], amp[kWaves];
        for (int i = 0; i < kWaves; ++i) {
            u[i] = rng.uniform(0.5, 2.5);
            v[i] = rng.uniform(0.5, 2.5);
            phase[i] = rng.uniform(0.0, 2.0 * M_PI);
            amp[i] = rng.uniform(0.5, 1.0);
        }
        for (int row = 0; row < f.height; ++row) {
            const double y = f.height > 1 ? static_cast<double>(row) / (f.height - 1) : 0.0;
            for (int col = 0; col < f.width; ++col) {
                const double x = f.width > 1 ? static_cast<double>(col) / (f.width - 1) : 0.0;
                double s = 0.0;
                for (int i = 0; i < kWaves; ++i)
                    s += amp[i] * std::cos(2.0 * M_PI * (u[i] * x + v[i] * y) + phase[i]);
                const double refl = 0.5 + 0.5 * std::tanh(s);
                f.values[static_cast<std::size_t>(band) * f.pixels() + row * f.width + col] =
                    static_cast<float>(refl);
            }
        }
    }
    // Normalized coordinates.
    for (int row = 0; row < f.height; ++row) {
        for (int col = 0; col < f.width; ++col) {
            const int p = row * f.width + col;
            f.values[4 * static_cast<std::size_t>(f.pixels()) + p] =
                f.width > 1 ? static_cast<float>(col) / (f.width - 1) : 0.f;
            f.values[5 * static_cast<std::size_t>(f.pixels()) + p] =
                f.height > 1 ? static_cast<float>(row) / (f.height - 1) : 0.f;
        }
    }
    return f;
}

/// Smooth deterministic residual surface for one day: a small random-cosine
/// expansion over the feature vector. Frequencies are unit directions in
/// grid-standardized feature space scaled by 1/residual_lengthscale, so the
/// surface has one controlled correlation length (in standardized units)
/// with no rough spectral tail.
void day_residuals(const SynthConfig& cfg, const FeatureRaster& features, int day_index,
                   std::vector<double>& out) {
    const int pixels = features.pixels();
    out.assign(static_cast<std::size_t>(pixels), 0.0);
    if (cfg.residual_sd <= 0.0) return;

    const int F = features.f_dim;
    std::vector<double> f_mean(static_cast<std::size_t>(F), 0.0);
    std::vector<double> f_sd(static_cast<std::size_t>(F), 0.0);
    for (int f = 0; f < F; ++f) {
        double m = 0.0;
        for (int p = 0; p < pixels; ++p) m += features.at(f, p);
        m /= pixels;
        double var = 0.0;
        for (int p = 0; p < pixels; ++p) {
            const double d = features.at(f, p) - m;
            var += d * d;
        }
        f_mean[static_cast<std::size_t>(f)] = m;
        f_sd[static_cast<std::size_t>(f)] = std::sqrt(var / pixels);
        if (f_sd[static_cast<std::size_t>(f)] < 1e-12) f_sd[static_cast<std::size_t>(f)] = 1.0;
    }

    Rng rng(derive_seed(cfg.seed, kTagResidual, static_cast<std::uint64_t>(day_index)));
    constexpr int kComponents = 8;
    std::vector<double> w(static_cast<std::size_t>(kComponents) * F);
    double beta[kComponents], phase[kComponents];
    for (int i = 0; i < kComponents; ++i) {
        double norm2 = 0.0;
        for (int f = 0; f < F; ++f) {
            const double g = rng.normal();
            w[static_cast<std::size_t>(i) * F + f] = g;
            norm2 += g * g;
        }
        const double unit = 1.0 / std::sqrt(std::max(norm2, 1e-12));
        for (int f = 0; f < F; ++f) {
            // direction in standardized space, mapped back to raw features
            w[static_cast<std::size_t>(i) * F + f] *=
                unit / (cfg.residual_lengthscale * f_sd[static_cast<std::size_t>(f)]);
        }
        phase[i] = rng.uniform(0.0, 2.0 * M_PI);
        beta[i] = rng.normal();
    }

    double mean = 0.0;
    for (int p = 0; p < pixels; ++p) {
        double s = 0.0;
        for (int i = 0; i < kComponents; ++i) {
            double arg = phase[i];
            for (int f = 0; f < F; ++f)
                arg += w[static_cast<std::size_t>(i) * F + f] *
                       (features.at(f, p) - f_mean[static_cast<std::size_t>(f)]);
            s += beta[i] * std::cos(arg);
        }
        out[p] = s;
        mean += s;
    }
    mean /= pixels;
    double var = 0.0;
    for (int p = 0; p < pixels; ++p) var += (out[p] - mean) * (out[p] - mean);
    var /= pixels;
    const double sd = std::sqrt(var);
    const double smooth_scale = sd > 1e-12 ? kSmoothShare * cfg.residual_sd / sd : 0.0;

    Rng noise(derive_seed(cfg.seed, kTagResidualNoise, static_cast<std::uint64_t>(day_index)));
    const double iid_sd = kIidShare * cfg.residual_sd;
    for (int p = 0; p < pixels; ++p)
        out[p] = (out[p] - mean) * smooth_scale + noise.normal(0.0, iid_sd);
}

/// Contiguous cloud blobs: threshold a box-smoothed white-noise field at its
/// own empirical quantile so the masked fraction lands on target.
void day_mask(const SynthConfig& cfg, int day_index, std::vector<char>& masked) {
    const int h = cfg.shape.height;
    const int w = cfg.shape.width;
    const int pixels = h * w;
    masked.assign(static_cast<std::size_t>(pixels), 0);
    if (cfg.cloud_fraction_target <= 0.0) return;

    Rng rng(derive_seed(cfg.seed, kTagMask, static_cast<std::uint64_t>(day_index)));
    std::vector<double> field(static_cast<std::size_t>(pixels));
    for (auto& v : field) v = rng.uniform();

    // Three separable box-blur passes approximate a Gaussian smooth.
    const int radius = std::max(1, std::min(h, w) / 10);
    std::vector<double> tmp(field.size());
    for (int pass = 0; pass < 3; ++pass) {
        for (int row = 0; row < h; ++row) { // horizontal
            for (int col = 0; col < w; ++col) {
                double s = 0.0;
                int count = 0;
                for (int k = -radius; k <= radius; ++k) {
                    const int cc = col + k;
                    if (cc < 0 || cc >= w) continue;
                    s += field[static_cast<std::size_t>(row) * w + cc];
                    ++count;
                }
                tmp[static_cast<std::size_t>(row) * w + col] = s / count;
            }
        }
        for (int col = 0; col < w; ++col) { // vertical
            for (int row = 0; row < h; ++row) {
                double s = 0.0;
                int count = 0;
                for (int k = -radius; k <= radius; ++k) {
                    const int rr = row + k;
                    if (rr < 0 || rr >= h) continue;
                    s += tmp[static_cast<std::size_t>(rr) * w + col];
                    ++count;
                }
                field[static_cast<std::size_t>(row) * w + col] = s / count;
            }
        }
    }

    const int k = std::min(pixels - 1, static_cast<int>(std::lround(cfg.cloud_fraction_target * pixels)));
    if (k <= 0) return;
    std::vector<double> sorted = field;
    std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
    const double threshold = sorted[static_cast<std::size_t>(k - 1)];
    for (int p = 0; p < pixels; ++p) masked[p] = field[p] <= threshold ? 1 : 0;
}

} // namespace

SynthData generate(const SynthConfig& config) {
    config.validate();
    SynthData out;

    const std::vector<int> days = cadence_days(config.cadence);
    const int n_days = static_cast<int>(days.size());
    const int pixels = config.shape.height * config.shape.width;

    out.era5 = make_era5(config);
    out.features = make_features(config);

    // Planted per-pixel eATC parameters (stored as float, truth computed
    // from the stored values so the self-consistency identity is exact).
    out.truth.true_params = AtcParams::zeros(config.shape.height, config.shape.width);
    for (int p = 0; p < pixels; ++p) {
        Rng rng(derive_seed(config.seed, kTagParams, static_cast<std::uint64_t>(p)));
        out.truth.true_params.c[p] = static_cast<float>(rng.uniform(config.c_range.lo, config.c_range.hi));
        out.truth.true_params.a[p] = static_cast<float>(rng.uniform(config.a_range.lo, config.a_range.hi));
        out.truth.true_params.phi[p] =
            static_cast<float>(rng.uniform(config.phi_range.lo, config.phi_range.hi));
        out.truth.true_params.b[p] = static_cast<float>(rng.uniform(config.b_range.lo, config.b_range.hi));
    }

    out.truth.days = days;
    out.truth.true_residuals.resize(static_cast<std::size_t>(n_days) * pixels);
    out.truth.true_lst.resize(static_cast<std::size_t>(n_days) * pixels);

    out.stack.shape = {n_days, config.shape.height, config.shape.width};
    out.stack.days = days;
    out.stack.temps.assign(static_cast<std::size_t>(n_days) * pixels,
                           std::numeric_limits<float>::quiet_NaN());

    std::vector<double> resid;
    std::vector<char> masked;
    for (int d = 0; d < n_days; ++d) {
        const int day = days[d];
        const int era5_pos = out.era5.day_pos(day);
        day_residuals(config, out.features, d, resid);
        day_mask(config, d, masked);
        Rng noise(derive_seed(config.seed, kTagObsNoise, static_cast<std::uint64_t>(d)));
        for (int p = 0; p < pixels; ++p) {
            const double e5 = out.era5.value(era5_pos, out.era5.cell_for_pixel(p));
            const double atc = atc_forward(out.truth.true_params.c[p], out.truth.true_params.a[p],
                                           out.truth.true_params.phi[p], out.truth.true_params.b[p],
                                           day, e5);
            const double truth = atc + resid[p];
            out.truth.true_residuals[static_cast<std::size_t>(d) * pixels + p] = resid[p];
            out.truth.true_lst[static_cast<std::size_t>(d) * pixels + p] = truth;
            const double obs = truth + (config.obs_noise_sd > 0 ? noise.normal(0.0, config.obs_noise_sd) : 0.0);
            if (!masked[p]) out.stack.at(d, p) = static_cast<float>(obs);
        }
    }

    try {
        out.stack.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("synth: generated temperatures violate invariants (") +
                          e.what() + "); adjust the planted ranges");
    }
    return out;
}

SceneStack thin_cadence(const SceneStack& stack, Cadence target) {
    const std::vector<int> want = cadence_days(target);
    std::vector<int> keep;
    for (int day : want) {
        auto it = std::lower_bound(stack.days.begin(), stack.days.end(), day);
        if (it == stack.days.end() || *it != day)
            throw ValidationError("thin_cadence: stack lacks day " + std::to_string(day) +
                                  " required by cadence " + cadence_name(target));
        keep.push_back(static_cast<int>(it - stack.days.begin()));
    }
    SceneStack out;
    out.shape = {static_cast<int>(keep.size()), stack.shape.height, stack.shape.width};
    out.days.reserve(keep.size());
    out.temps.resize(static_cast<std::size_t>(keep.size()) * stack.shape.pixels());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        out.days.push_back(stack.days[static_cast<std::size_t>(keep[i])]);
        const auto src = stack.day(keep[i]);
        std::copy(src.data(), src.data() + stack.shape.pixels(),
                  out.temps.begin() + static_cast<std::ptrdiff_t>(i) * stack.shape.pixels());
    }
    return out;
}

} // namespace delag

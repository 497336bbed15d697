#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "delag/container.hpp"
#include "delag/eval.hpp"
#include "delag/geo.hpp"
#include "delag/pipeline.hpp"
#include "delag/rng.hpp"
#include "delag/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_log_level = 2; // 0=error 1=warn 2=info 3=debug

void log_at(int level, const char* tag, const std::string& msg) {
    if (level > g_log_level) return;
    std::fprintf(stderr, "delag: [%s] %s\n", tag, msg.c_str());
}
void log_info(const std::string& msg) { log_at(2, "info", msg); }
void log_warn(const std::string& msg) { log_at(1, "warn", msg); }

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw delag::IoError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw delag::ConfigError(std::string("config parse: ") + e.what());
    }
    return j;
}

json section(const json& cfg, const char* name) {
    return cfg.contains(name) ? cfg.at(name) : json::object();
}

delag::FitConfig fit_config_from(const json& j) {
    delag::FitConfig c;
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("snapshot_stride")) c.snapshot_stride = j.at("snapshot_stride").get<int>();
    if (j.contains("snapshot_window")) c.snapshot_window = j.at("snapshot_window").get<int>();
    if (j.contains("adam_beta1")) c.adam_beta1 = j.at("adam_beta1").get<double>();
    if (j.contains("adam_beta2")) c.adam_beta2 = j.at("adam_beta2").get<double>();
    if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<double>();
    if (j.contains("min_valid_obs")) c.min_valid_obs = j.at("min_valid_obs").get<int>();
    if (j.contains("laplace_scale_beta"))
        c.laplace_scale_beta = j.at("laplace_scale_beta").get<double>();
    return c;
}

delag::GpConfig gp_config_from(const json& j) {
    delag::GpConfig c;
    if (j.contains("min_train")) c.min_train = j.at("min_train").get<int>();
    if (j.contains("exact_threshold")) c.exact_threshold = j.at("exact_threshold").get<int>();
    if (j.contains("inducing_points")) c.inducing_points = j.at("inducing_points").get<int>();
    if (j.contains("minibatch")) c.minibatch = j.at("minibatch").get<int>();
    if (j.contains("hyper_subsample")) c.hyper_subsample = j.at("hyper_subsample").get<int>();
    if (j.contains("lr_main")) c.lr_main = j.at("lr_main").get<double>();
    if (j.contains("epochs_main")) c.epochs_main = j.at("epochs_main").get<int>();
    if (j.contains("lr_fine")) c.lr_fine = j.at("lr_fine").get<double>();
    if (j.contains("epochs_fine")) c.epochs_fine = j.at("epochs_fine").get<int>();
    if (j.contains("estep_every")) c.estep_every = j.at("estep_every").get<int>();
    if (j.contains("include_noise_in_variance"))
        c.include_noise_in_variance = j.at("include_noise_in_variance").get<bool>();
    return c;
}

/// Seed resolution: flag wins, then config; stochastic subcommands require one.
std::uint64_t require_seed(const CLI::Option* seed_opt, std::uint64_t flag_seed, const json& cfg,
                           const char* subcommand) {
    if (seed_opt->count() > 0) return flag_seed;
    if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
    throw delag::ConfigError(std::string(subcommand) +
                             ": seed is mandatory (pass --seed or set it in the config)");
}

void log_run(const char* subcommand, std::uint64_t seed, const json& effective) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(effective.dump())));
    log_info(std::string(subcommand) + ": seed=" + std::to_string(seed) + " config_hash=0x" + buf);
}

std::map<int, Eigen::ArrayXd> load_recon_means(const std::string& prefix) {
    // The model-mean companion cube drives air-temperature rows.
    const delag::LstcCube cube = delag::load_cube(prefix + "_mean.lstc");
    const auto plane = static_cast<std::size_t>(cube.dims[1] * cube.dims[2]);
    std::map<int, Eigen::ArrayXd> means;
    for (std::size_t d = 0; d < cube.days.size(); ++d) {
        Eigen::ArrayXd grid(static_cast<Eigen::Index>(plane));
        for (std::size_t p = 0; p < plane; ++p)
            grid[static_cast<Eigen::Index>(p)] = cube.data[d * plane + p];
        means[cube.days[d]] = std::move(grid);
    }
    return means;
}

std::vector<int> parse_day_range(const std::string& spec) {
    const auto pos = spec.find("..");
    std::vector<int> days;
    if (pos == std::string::npos) {
        days.push_back(std::stoi(spec));
        return days;
    }
    const int lo = std::stoi(spec.substr(0, pos));
    const int hi = std::stoi(spec.substr(pos + 2));
    if (lo < 1 || hi > delag::kMaxDayOfYear || lo > hi)
        throw delag::ConfigError("bad day range " + spec);
    for (int d = lo; d <= hi; ++d) days.push_back(d);
    return days;
}

// -----------------------------------------------------------------------
// Subcommands
// -----------------------------------------------------------------------

int cmd_generate(const std::string& config_path, const CLI::Option* seed_opt,
                 std::uint64_t flag_seed, const std::string& out_dir) {
    const json cfg = load_config_file(config_path);
    const json synth_section = cfg.contains("synth") ? cfg.at("synth") : cfg;
    delag::SynthConfig sc = synth_section.get<delag::SynthConfig>();
    if (seed_opt->count() > 0) sc.seed = flag_seed;
    if (sc.seed == 0 && seed_opt->count() == 0 && !synth_section.contains("seed"))
        throw delag::ConfigError("generate: seed is mandatory (pass --seed or set it in the config)");
    json effective;
    delag::to_json(effective, sc);
    log_run("generate", sc.seed, effective);

    const delag::SynthData data = delag::generate(sc);
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    delag::save_stack(data.stack, (dir / "stack.lstc").string());
    delag::save_era5(data.era5, (dir / "era5.lstc").string());
    delag::save_features(data.features, (dir / "features.lstc").string());

    const int pixels = data.stack.shape.pixels();
    delag::LstcCube truth;
    truth.dims = {data.stack.shape.n_days, data.stack.shape.height, data.stack.shape.width};
    truth.days = data.stack.days;
    truth.meta = json{{"kind", "truth_lst"}};
    truth.data.assign(data.truth.true_lst.begin(), data.truth.true_lst.end());
    delag::save_cube(truth, (dir / "truth_lst.lstc").string());
    truth.meta = json{{"kind", "truth_residuals"}};
    truth.data.assign(data.truth.true_residuals.begin(), data.truth.true_residuals.end());
    delag::save_cube(truth, (dir / "truth_residuals.lstc").string());

    json params;
    params["height"] = data.stack.shape.height;
    params["width"] = data.stack.shape.width;
    params["days"] = data.stack.days;
    params["config"] = effective;
    params["C"] = data.truth.true_params.c;
    params["A"] = data.truth.true_params.a;
    params["PHI"] = data.truth.true_params.phi;
    params["B"] = data.truth.true_params.b;
    std::ofstream out(dir / "truth_params.json");
    out << params.dump() << "\n";
    if (!out) throw delag::IoError("cannot write truth_params.json");
    log_info("generate: wrote " + std::to_string(pixels) + "-pixel scene with " +
             std::to_string(data.stack.shape.n_days) + " days to " + out_dir);
    return 0;
}

int cmd_fit_atc(const std::string& config_path, const CLI::Option* seed_opt,
                std::uint64_t flag_seed, int workers, const std::string& stack_path,
                const std::string& era5_path, const std::string& out_dir) {
    const json cfg = load_config_file(config_path);
    const delag::FitConfig fc = fit_config_from(section(cfg, "fit_atc"));
    const std::uint64_t seed = require_seed(seed_opt, flag_seed, cfg, "fit-atc");
    json effective = section(cfg, "fit_atc");
    effective["seed"] = seed;
    log_run("fit-atc", seed, effective);

    const delag::SceneStack stack = delag::load_stack(stack_path);
    const delag::Era5Series era5 = delag::load_era5(era5_path);
    const delag::AtcEnsemble ens = delag::fit_atc(stack, era5, fc, seed, workers);
    delag::save_ensemble(ens, out_dir);
    log_info("fit-atc: wrote " + std::to_string(ens.count()) + " snapshots to " + out_dir);
    return 0;
}

int cmd_fit_gp(const std::string& config_path, const CLI::Option* seed_opt,
               std::uint64_t flag_seed, int workers, const std::string& stack_path,
               const std::string& era5_path, const std::string& features_path,
               const std::string& atc_dir, const std::string& out_dir) {
    const json cfg = load_config_file(config_path);
    const delag::GpConfig gc = gp_config_from(section(cfg, "gp"));
    const std::uint64_t seed = require_seed(seed_opt, flag_seed, cfg, "fit-gp");
    json effective = section(cfg, "gp");
    effective["seed"] = seed;
    log_run("fit-gp", seed, effective);

    const delag::SceneStack stack = delag::load_stack(stack_path);
    const delag::Era5Series era5 = delag::load_era5(era5_path);
    const delag::FeatureRaster features = delag::load_features(features_path);
    const delag::AtcEnsemble ens = delag::load_ensemble(atc_dir);

    fs::create_directories(out_dir);
    json skips = json::array();
    int fitted = 0;
    for (int d = 0; d < stack.shape.n_days; ++d) {
        const std::vector<int> ids = delag::valid_pixels(stack, d);
        if (ids.empty()) {
            skips.push_back({{"day", stack.days[d]}, {"reason", "no valid observations"}});
            continue;
        }
        Eigen::ArrayXd atc_mean, atc_sd;
        delag::ensemble_predict(ens, stack.days[d], era5, atc_mean, atc_sd);
        Eigen::VectorXd resid(static_cast<Eigen::Index>(ids.size()));
        for (std::size_t i = 0; i < ids.size(); ++i)
            resid[static_cast<Eigen::Index>(i)] =
                static_cast<double>(stack.at(d, ids[i])) - atc_mean[ids[i]];
        const Eigen::MatrixXd x = features.gather(ids);
        delag::GpFitOutcome out = delag::fit_gp_day(
            x, resid, gc,
            delag::derive_seed(seed, 0x6770ULL, static_cast<std::uint64_t>(stack.days[d])));
        if (out.model) {
            char name[32];
            std::snprintf(name, sizeof(name), "day_%03d.gpm", stack.days[d]);
            delag::save_gp_model(*out.model, (fs::path(out_dir) / name).string());
            ++fitted;
        } else {
            skips.push_back({{"day", stack.days[d]}, {"reason", out.skip_reason}});
            log_warn("fit-gp: day " + std::to_string(stack.days[d]) + " skipped: " +
                     out.skip_reason);
        }
    }
    std::ofstream skipf(fs::path(out_dir) / "skips.json");
    skipf << skips.dump(2) << "\n";
    log_info("fit-gp: " + std::to_string(fitted) + " day models written to " + out_dir + ", " +
             std::to_string(skips.size()) + " skipped");
    return 0;
}

int cmd_reconstruct(const std::string& stack_path, const std::string& era5_path,
                    const std::string& features_path, const std::string& atc_dir,
                    const std::string& gp_dir, const std::string& days_spec,
                    const std::string& out_prefix) {
    const delag::SceneStack stack = delag::load_stack(stack_path);
    const delag::Era5Series era5 = delag::load_era5(era5_path);
    const delag::FeatureRaster features = delag::load_features(features_path);
    const delag::AtcEnsemble ens = delag::load_ensemble(atc_dir);

    std::map<int, delag::GpModel> gp_models;
    if (!gp_dir.empty()) {
        for (int day : stack.days) {
            char name[32];
            std::snprintf(name, sizeof(name), "day_%03d.gpm", day);
            const fs::path p = fs::path(gp_dir) / name;
            if (fs::exists(p)) gp_models.emplace(day, delag::load_gp_model(p.string()));
        }
    }

    const std::vector<int> days = parse_day_range(days_spec);
    std::vector<delag::ReconstructionResult> results;
    results.reserve(days.size());
    for (int day : days) {
        std::string warning;
        const delag::GpModel* gp = nullptr;
        const auto it = gp_models.find(day);
        if (it != gp_models.end()) gp = &it->second;
        results.push_back(
            delag::reconstruct_day(ens, gp, era5, features, stack, day, 0.95, &warning));
        if (!warning.empty()) log_warn("reconstruct: " + warning);
    }
    delag::write_reconstruction_cubes(results, stack.shape.height, stack.shape.width, out_prefix);
    log_info("reconstruct: wrote " + std::to_string(results.size()) + " days to " + out_prefix +
             "*.lstc");
    return 0;
}

int cmd_validate(const std::string& config_path, const CLI::Option* seed_opt,
                 std::uint64_t flag_seed, int workers, const std::string& stack_path,
                 const std::string& era5_path, const std::string& features_path,
                 const std::string& recon_prefix, const std::string& stations_path,
                 const std::string& out_path) {
    const json cfg = load_config_file(config_path);
    delag::ValidateConfig vc;
    vc.pipeline.fit = fit_config_from(section(cfg, "fit_atc"));
    vc.pipeline.gp = gp_config_from(section(cfg, "gp"));
    vc.pipeline.workers = workers;
    vc.pipeline.seed = require_seed(seed_opt, flag_seed, cfg, "validate");
    const json vs = section(cfg, "validate");
    if (vs.contains("clear_threshold")) vc.clear_threshold = vs.at("clear_threshold").get<double>();
    if (vs.contains("heavy_cloud_threshold"))
        vc.heavy_cloud_threshold = vs.at("heavy_cloud_threshold").get<double>();
    if (vs.contains("holdout_fraction"))
        vc.holdout_fraction = vs.at("holdout_fraction").get<double>();
    if (vs.contains("strategy1_max_days"))
        vc.strategy1_max_days = vs.at("strategy1_max_days").get<int>();
    log_run("validate", vc.pipeline.seed, cfg);

    const delag::SceneStack stack = delag::load_stack(stack_path);
    const delag::Era5Series era5 = delag::load_era5(era5_path);
    const delag::FeatureRaster features = delag::load_features(features_path);

    std::optional<std::map<int, Eigen::ArrayXd>> recon;
    if (!recon_prefix.empty()) recon = load_recon_means(recon_prefix);
    std::optional<delag::StationTable> stations;
    if (!stations_path.empty()) stations = delag::load_stations_csv(stations_path);

    const json report = delag::validate_all(stack, era5, features,
                                            recon ? &*recon : nullptr,
                                            stations ? &*stations : nullptr, vc);
    std::ofstream out(out_path);
    out << report.dump(2) << "\n";
    if (!out) throw delag::IoError("cannot write report: " + out_path);
    log_info("validate: report written to " + out_path);
    return 0;
}

int cmd_airtemp(const std::string& stack_path, const std::string& recon_prefix,
                const std::string& stations_path, const std::string& out_path) {
    const delag::SceneStack stack = delag::load_stack(stack_path);
    const auto recon = load_recon_means(recon_prefix);
    const delag::StationTable stations = delag::load_stations_csv(stations_path);
    const json report = delag::airtemp_report(stack, recon, stations);
    if (out_path.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        std::ofstream out(out_path);
        out << report.dump(2) << "\n";
        if (!out) throw delag::IoError("cannot write report: " + out_path);
    }
    return 0;
}

int cmd_metrics(const std::string& pred_path, const std::string& truth_path,
                const std::string& lower_path, const std::string& upper_path) {
    const delag::LstcCube pred = delag::load_cube(pred_path);
    const delag::LstcCube truth = delag::load_cube(truth_path);
    if (pred.dims != truth.dims)
        throw delag::ValidationError("metrics: cube dims differ");
    std::optional<delag::LstcCube> lower, upper;
    if (!lower_path.empty()) lower = delag::load_cube(lower_path);
    if (!upper_path.empty()) upper = delag::load_cube(upper_path);

    std::vector<double> p, t, lo, hi;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        if (!std::isfinite(pred.data[i]) || !std::isfinite(truth.data[i])) continue;
        p.push_back(pred.data[i]);
        t.push_back(truth.data[i]);
        if (lower) {
            lo.push_back(lower->data[i]);
            hi.push_back(upper->data[i]);
        }
    }
    const auto n = static_cast<Eigen::Index>(p.size());
    const Eigen::ArrayXd pa = Eigen::Map<const Eigen::ArrayXd>(p.data(), n);
    const Eigen::ArrayXd ta = Eigen::Map<const Eigen::ArrayXd>(t.data(), n);
    delag::Metrics m;
    if (lower) {
        const Eigen::ArrayXd la = Eigen::Map<const Eigen::ArrayXd>(lo.data(), n);
        const Eigen::ArrayXd ha = Eigen::Map<const Eigen::ArrayXd>(hi.data(), n);
        m = delag::compute_metrics(pa, ta, &la, &ha);
    } else {
        m = delag::compute_metrics(pa, ta);
    }
    std::cout << delag::metrics_to_json(m).dump() << "\n";
    return 0;
}

int cmd_crosstrack(const CLI::Option* lat_opt, double lat, const std::string& table_spec) {
    if (!table_spec.empty()) {
        double lo = 0, hi = 0, step = 0;
        if (std::sscanf(table_spec.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 || step <= 0)
            throw delag::ConfigError("crosstrack: --table wants lo:hi:step");
        std::cout << "latitude_deg,ratio,overlap_fraction\n";
        for (double l = lo; l <= hi + 1e-9; l += step) {
            std::printf("%.2f,%.4f,%.4f\n", l, delag::crosstrack_ratio(l),
                        delag::overlap_fraction(l));
        }
        return 0;
    }
    if (lat_opt->count() == 0)
        throw delag::ConfigError("crosstrack: pass --lat or --table");
    std::printf("latitude=%.2f ratio=%.4f overlap_fraction=%.4f\n", lat,
                delag::crosstrack_ratio(lat), delag::overlap_fraction(lat));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DELAG: daily land-surface-temperature reconstruction"};
    app.set_version_flag("--version", std::string(DELAG_VERSION));
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    std::string config_path;
    std::uint64_t seed = 0;
    int workers = 1;
    std::string log_level = "info";
    app.add_option("--config", config_path, "JSON config with per-subcommand sections");
    auto* seed_opt = app.add_option("--seed", seed, "RNG seed (mandatory for stochastic runs)");
    app.add_option("--workers", workers, "max parallel workers");
    app.add_option("--log-level", log_level, "error|warn|info|debug");

    // generate
    std::string out_dir;
    auto* gen = app.add_subcommand("generate", "synthesize a scene with known ground truth");
    gen->add_option("--out-dir", out_dir, "output directory")->required();

    // fit-atc
    std::string stack_path, era5_path, features_path, atc_dir, gp_dir;
    auto* fatc = app.add_subcommand("fit-atc", "fit the per-pixel eATC snapshot ensemble");
    fatc->add_option("--stack", stack_path)->required();
    fatc->add_option("--era5", era5_path)->required();
    fatc->add_option("--out", atc_dir, "ensemble output directory")->required();

    // fit-gp
    std::string gp_out;
    auto* fgp = app.add_subcommand("fit-gp", "fit per-day residual GP models");
    fgp->add_option("--stack", stack_path)->required();
    fgp->add_option("--era5", era5_path)->required();
    fgp->add_option("--features", features_path)->required();
    fgp->add_option("--atc", atc_dir, "fitted ensemble directory")->required();
    fgp->add_option("--out", gp_out, "GP model output directory")->required();

    // reconstruct
    std::string days_spec = "1..365", recon_prefix;
    auto* rec = app.add_subcommand("reconstruct", "produce gap-free daily LST cubes");
    rec->add_option("--stack", stack_path)->required();
    rec->add_option("--era5", era5_path)->required();
    rec->add_option("--features", features_path)->required();
    rec->add_option("--atc", atc_dir)->required();
    rec->add_option("--gp-dir", gp_dir);
    rec->add_option("--days", days_spec, "day range, e.g. 1..365");
    rec->add_option("--out", recon_prefix, "output path prefix")->required();

    // validate
    std::string stations_path, report_path;
    auto* val = app.add_subcommand("validate", "run the three validation strategies");
    val->add_option("--stack", stack_path)->required();
    val->add_option("--era5", era5_path)->required();
    val->add_option("--features", features_path)->required();
    val->add_option("--recon", recon_prefix, "reconstruction prefix (for strategy 3)");
    val->add_option("--stations", stations_path, "stations CSV (for strategy 3)");
    val->add_option("--out", report_path, "report JSON path")->required();

    // airtemp
    std::string airtemp_out;
    auto* air = app.add_subcommand("airtemp", "paired air-temperature regression");
    air->add_option("--stack", stack_path)->required();
    air->add_option("--recon", recon_prefix, "reconstruction prefix")->required();
    air->add_option("--stations", stations_path)->required();
    air->add_option("--out", airtemp_out, "report JSON path (stdout if omitted)");

    // metrics
    std::string pred_path, truth_path, lower_path, upper_path;
    auto* met = app.add_subcommand("metrics", "compare two cubes");
    met->add_option("--pred", pred_path)->required();
    met->add_option("--truth", truth_path)->required();
    met->add_option("--lower", lower_path);
    met->add_option("--upper", upper_path);

    // crosstrack
    double lat = 0.0;
    std::string table_spec;
    auto* cross = app.add_subcommand("crosstrack", "Landsat cross-track coverage geometry");
    auto* lat_opt = cross->add_option("--lat", lat, "latitude in degrees");
    cross->add_option("--table", table_spec, "lo:hi:step CSV sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (log_level == "error") g_log_level = 0;
    else if (log_level == "warn") g_log_level = 1;
    else if (log_level == "debug") g_log_level = 3;

    try {
        if (gen->parsed()) return cmd_generate(config_path, seed_opt, seed, out_dir);
        if (fatc->parsed())
            return cmd_fit_atc(config_path, seed_opt, seed, workers, stack_path, era5_path,
                               atc_dir);
        if (fgp->parsed())
            return cmd_fit_gp(config_path, seed_opt, seed, workers, stack_path, era5_path,
                              features_path, atc_dir, gp_out);
        if (rec->parsed())
            return cmd_reconstruct(stack_path, era5_path, features_path, atc_dir, gp_dir,
                                   days_spec, recon_prefix);
        if (val->parsed())
            return cmd_validate(config_path, seed_opt, seed, workers, stack_path, era5_path,
                                features_path, recon_prefix, stations_path, report_path);
        if (air->parsed())
            return cmd_airtemp(stack_path, recon_prefix, stations_path, airtemp_out);
        if (met->parsed()) return cmd_metrics(pred_path, truth_path, lower_path, upper_path);
        if (cross->parsed()) return cmd_crosstrack(lat_opt, lat, table_spec);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

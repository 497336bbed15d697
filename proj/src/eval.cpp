#include "delag/eval.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "delag/error.hpp"
#include "delag/rng.hpp"

namespace delag {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

Metrics compute_metrics(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                        const Eigen::ArrayXd* lower, const Eigen::ArrayXd* upper) {
    if (pred.size() != truth.size())
        throw ValidationError("metrics: pred/truth lengths differ");
    const auto n = pred.size();
    if (n < 2) throw ValidationError("metrics: need at least 2 samples");
    if ((lower == nullptr) != (upper == nullptr))
        throw ValidationError("metrics: intervals need both bounds");

    Metrics m;
    m.n = n;
    const Eigen::ArrayXd err = pred - truth;
    m.mae = err.abs().mean();
    m.rmse = std::sqrt(err.square().mean());
    m.bias = err.mean();
    const double truth_mean = truth.mean();
    const double sst = (truth - truth_mean).square().sum();
    if (sst <= 0.0) {
        m.r2_missing_reason = "constant truth: SST = 0";
    } else {
        m.r2 = 1.0 - err.square().sum() / sst;
    }
    if (lower) {
        if (lower->size() != n || upper->size() != n)
            throw ValidationError("metrics: interval lengths differ from samples");
        Eigen::Index inside = 0;
        for (Eigen::Index i = 0; i < n; ++i)
            if (truth[i] >= (*lower)[i] && truth[i] <= (*upper)[i]) ++inside;
        m.cov95 = static_cast<double>(inside) / static_cast<double>(n);
    }
    return m;
}

nlohmann::json metrics_to_json(const Metrics& m) {
    nlohmann::json j;
    j["mae"] = m.mae;
    j["rmse"] = m.rmse;
    j["bias"] = m.bias;
    j["n"] = m.n;
    if (m.r2)
        j["r2"] = *m.r2;
    else {
        j["r2"] = nullptr;
        j["r2_missing_reason"] = m.r2_missing_reason;
    }
    if (m.cov95) j["cov95"] = *m.cov95;
    return j;
}

Metrics metrics_from_json(const nlohmann::json& j) {
    Metrics m;
    m.mae = j.at("mae").get<double>();
    m.rmse = j.at("rmse").get<double>();
    m.bias = j.at("bias").get<double>();
    m.n = j.at("n").get<std::int64_t>();
    if (j.contains("r2") && !j.at("r2").is_null()) m.r2 = j.at("r2").get<double>();
    if (j.contains("r2_missing_reason"))
        m.r2_missing_reason = j.at("r2_missing_reason").get<std::string>();
    if (j.contains("cov95")) m.cov95 = j.at("cov95").get<double>();
    return m;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

std::vector<char> cloud_mask_of_day(const SceneStack& stack, int day_index) {
    const auto vals = stack.day(day_index);
    std::vector<char> mask(static_cast<std::size_t>(stack.shape.pixels()));
    for (int p = 0; p < stack.shape.pixels(); ++p)
        mask[static_cast<std::size_t>(p)] = std::isfinite(vals[p]) ? 0 : 1;
    return mask;
}

SplitCells hypothetical_mask(const SceneStack& stack, int target_day_index,
                             const std::vector<char>& pattern_mask) {
    if (pattern_mask.size() != static_cast<std::size_t>(stack.shape.pixels()))
        throw ValidationError("hypothetical_mask: pattern size does not match grid");
    const double vf = valid_fraction(stack, target_day_index);
    if (vf < 0.99)
        throw ValidationError("hypothetical_mask: target day only " + std::to_string(vf * 100) +
                              "% valid, needs >= 99%");
    SplitCells split;
    const auto vals = stack.day(target_day_index);
    int n_valid = 0;
    for (int p = 0; p < stack.shape.pixels(); ++p) {
        if (!std::isfinite(vals[p])) continue;
        ++n_valid;
        if (pattern_mask[static_cast<std::size_t>(p)])
            split.test.push_back(p);
        else
            split.train.push_back(p);
    }
    if (static_cast<double>(split.train.size()) < 0.01 * n_valid)
        throw ValidationError("hypothetical_mask: pattern leaves " +
                              std::to_string(split.train.size()) +
                              " training pixels (< 1% of valid)");
    return split;
}

SplitCells holdout_split(const SceneStack& stack, int day_index, double fraction,
                         std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw ValidationError("holdout_split: fraction must be in (0,1)");
    std::vector<int> valid;
    const auto vals = stack.day(day_index);
    for (int p = 0; p < stack.shape.pixels(); ++p)
        if (std::isfinite(vals[p])) valid.push_back(p);
    if (valid.size() < 10)
        throw ValidationError("holdout_split: only " + std::to_string(valid.size()) +
                              " valid cells, need >= 10");
    const auto k = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(valid.size())));
    Rng rng(derive_seed(seed, 0x686f6cULL /*"hol"*/, static_cast<std::uint64_t>(day_index)));
    rng.shuffle(valid);
    SplitCells split;
    split.test.assign(valid.begin(), valid.begin() + static_cast<std::ptrdiff_t>(k));
    split.train.assign(valid.begin() + static_cast<std::ptrdiff_t>(k), valid.end());
    std::sort(split.test.begin(), split.test.end());
    std::sort(split.train.begin(), split.train.end());
    return split;
}

// ---------------------------------------------------------------------------
// Stations
// ---------------------------------------------------------------------------

void StationTable::validate() const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const StationRow& r = rows[i];
        const std::string where = "stations row " + std::to_string(i);
        if (r.air_temp_k < 200.0 || r.air_temp_k > 340.0)
            throw ValidationError(where + ": air_temp " + std::to_string(r.air_temp_k) +
                                  " outside [200,340] K");
        if (r.sza_deg < 0.0 || r.sza_deg > 90.0)
            throw ValidationError(where + ": sza outside [0,90]");
        for (double v : {r.ndvi, r.elev_m, r.sol, r.sza_deg})
            if (!std::isfinite(v)) throw ValidationError(where + ": non-finite covariate");
        if (r.day < 1 || r.day > kMaxDayOfYear)
            throw ValidationError(where + ": day outside [1,366]");
        if (r.lst_source != "observed" && r.lst_source != "reconstructed")
            throw ValidationError(where + ": lst_source must be observed|reconstructed");
    }
}

static const char* kStationHeader =
    "station_id,pixel_row,pixel_col,day,air_temp_k,ndvi,elev_m,sol,sza_deg,lst_source";

StationTable load_stations_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open stations csv: " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("stations csv: empty file");
    if (line != kStationHeader)
        throw FormatError("stations csv: unexpected header \"" + line + "\"");
    StationTable table;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 10)
            throw FormatError("stations csv line " + std::to_string(lineno) + ": want 10 fields");
        StationRow r;
        try {
            r.station_id = fields[0];
            r.pixel_row = std::stoi(fields[1]);
            r.pixel_col = std::stoi(fields[2]);
            r.day = std::stoi(fields[3]);
            r.air_temp_k = std::stod(fields[4]);
            r.ndvi = std::stod(fields[5]);
            r.elev_m = std::stod(fields[6]);
            r.sol = std::stod(fields[7]);
            r.sza_deg = std::stod(fields[8]);
            r.lst_source = fields[9];
        } catch (const std::exception&) {
            throw FormatError("stations csv line " + std::to_string(lineno) + ": parse failure");
        }
        table.rows.push_back(std::move(r));
    }
    table.validate();
    return table;
}

void save_stations_csv(const StationTable& table, const std::string& path) {
    table.validate();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write stations csv: " + path);
    out << kStationHeader << "\n";
    for (const StationRow& r : table.rows) {
        out << r.station_id << ',' << r.pixel_row << ',' << r.pixel_col << ',' << r.day << ','
            << r.air_temp_k << ',' << r.ndvi << ',' << r.elev_m << ',' << r.sol << ','
            << r.sza_deg << ',' << r.lst_source << "\n";
    }
}

// ---------------------------------------------------------------------------
// Air-temperature regression
// ---------------------------------------------------------------------------

namespace {
const char* kColumnNames[5] = {"lst", "ndvi", "elev", "sol", "sza"};
}

AirTempModel fit_airtemp(const std::vector<StationRow>& rows, const Eigen::ArrayXd& lst) {
    if (static_cast<Eigen::Index>(rows.size()) != lst.size())
        throw ValidationError("fit_airtemp: rows and lst lengths differ");
    const auto n = static_cast<Eigen::Index>(rows.size());
    if (n < 20) throw ValidationError("fit_airtemp: need >= 20 rows, got " + std::to_string(n));

    Eigen::MatrixXd cols(n, 5);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const StationRow& r = rows[static_cast<std::size_t>(i)];
        cols(i, 0) = lst[i];
        cols(i, 1) = r.ndvi;
        cols(i, 2) = r.elev_m;
        cols(i, 3) = r.sol;
        cols(i, 4) = r.sza_deg;
        y[i] = r.air_temp_k;
    }

    AirTempModel model;
    std::vector<int> kept;
    for (int c = 0; c < 5; ++c) {
        const double sd = std::sqrt(
            (cols.col(c).array() - cols.col(c).mean()).square().sum() / static_cast<double>(n));
        if (sd < 1e-12)
            model.dropped_columns.push_back(kColumnNames[c]);
        else
            kept.push_back(c);
    }
    if (kept.empty()) throw ValidationError("fit_airtemp: all columns constant");

    const int k = static_cast<int>(kept.size());
    Eigen::MatrixXd design(n, k + 1);
    for (int c = 0; c < k; ++c) design.col(c) = cols.col(kept[static_cast<std::size_t>(c)]);
    design.col(k).setOnes();

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < design.cols()) {
        // Name the columns outside the independent leading set.
        const auto perm = qr.colsPermutation().indices();
        std::string names;
        for (Eigen::Index i = qr.rank(); i < design.cols(); ++i) {
            const int col = perm[i];
            if (!names.empty()) names += ", ";
            names += col < k ? kColumnNames[kept[static_cast<std::size_t>(col)]] : "intercept";
        }
        throw ValidationError("fit_airtemp: rank-deficient design, collinear columns: " + names);
    }
    const Eigen::VectorXd beta = qr.solve(y);

    double* slots[5] = {&model.a_lst, &model.a_ndvi, &model.a_elev, &model.a_sol, &model.a_sza};
    for (int c = 0; c < k; ++c) *slots[kept[static_cast<std::size_t>(c)]] = beta[c];
    model.intercept = beta[k];
    return model;
}

double predict_airtemp(const AirTempModel& model, const StationRow& row, double lst) {
    return model.a_lst * lst + model.a_ndvi * row.ndvi + model.a_elev * row.elev_m +
           model.a_sol * row.sol + model.a_sza * row.sza_deg + model.intercept;
}

// ---------------------------------------------------------------------------
// validate_all
// ---------------------------------------------------------------------------

namespace {

/// Copy of the stack with the given cells NaN-ed out on one day.
void mask_cells(SceneStack& stack, int day_index, const std::vector<int>& cells) {
    for (int p : cells) stack.at(day_index, p) = std::numeric_limits<float>::quiet_NaN();
}

struct HeldOut {
    std::vector<int> days;           // day-of-year per batch
    std::vector<std::vector<int>> cells;
    std::vector<std::vector<double>> truth; // the masked observation values
};

nlohmann::json run_masked_experiment(SceneStack masked, const Era5Series& era5,
                                     const FeatureRaster& features, const HeldOut& held,
                                     const ValidateConfig& config) {
    const PipelineModel model = fit_pipeline(masked, era5, features, config.pipeline);

    std::vector<double> pred, truth, lo, hi;
    for (std::size_t b = 0; b < held.days.size(); ++b) {
        const ReconstructionResult rec = reconstruct_with_model(
            model, masked, era5, features, held.days[b], config.pipeline.interval_level);
        for (std::size_t i = 0; i < held.cells[b].size(); ++i) {
            const int p = held.cells[b][i];
            pred.push_back(rec.mean[p]);
            truth.push_back(held.truth[b][i]);
            lo.push_back(rec.lower95[p]);
            hi.push_back(rec.upper95[p]);
        }
    }
    const auto n = static_cast<Eigen::Index>(pred.size());
    const Eigen::ArrayXd pred_a = Eigen::Map<const Eigen::ArrayXd>(pred.data(), n);
    const Eigen::ArrayXd truth_a = Eigen::Map<const Eigen::ArrayXd>(truth.data(), n);
    const Eigen::ArrayXd lo_a = Eigen::Map<const Eigen::ArrayXd>(lo.data(), n);
    const Eigen::ArrayXd hi_a = Eigen::Map<const Eigen::ArrayXd>(hi.data(), n);
    nlohmann::json out;
    out["status"] = "ok";
    out["days"] = held.days;
    out["metrics"] = metrics_to_json(compute_metrics(pred_a, truth_a, &lo_a, &hi_a));
    return out;
}

} // namespace

nlohmann::json validate_all(const SceneStack& stack, const Era5Series& era5,
                            const FeatureRaster& features,
                            const std::map<int, Eigen::ArrayXd>* recon_means,
                            const StationTable* stations, const ValidateConfig& config) {
    stack.validate();
    nlohmann::json report;
    report["grid"] = {stack.shape.n_days, stack.shape.height, stack.shape.width};

    // --- Strategy 1: clear days under borrowed real cloud patterns --------
    {
        std::vector<int> clear_days, pattern_days;
        for (int d = 0; d < stack.shape.n_days; ++d) {
            const double vf = valid_fraction(stack, d);
            if (vf >= config.clear_threshold) clear_days.push_back(d);
            const double cloud = 1.0 - vf;
            if (cloud >= config.pattern_min_cloud && cloud <= config.pattern_max_cloud)
                pattern_days.push_back(d);
        }
        if (clear_days.empty() || pattern_days.empty()) {
            report["strategy1"] = {
                {"status", "skipped"},
                {"reason", clear_days.empty() ? "no day with >= 99% valid pixels"
                                              : "no day provides a usable cloud pattern"}};
        } else {
            Rng rng(derive_seed(config.pipeline.seed, 0x737431ULL /*"st1"*/));
            if (static_cast<int>(clear_days.size()) > config.strategy1_max_days) {
                rng.shuffle(clear_days);
                clear_days.resize(static_cast<std::size_t>(config.strategy1_max_days));
                std::sort(clear_days.begin(), clear_days.end());
            }
            SceneStack masked = stack;
            HeldOut held;
            for (int d : clear_days) {
                const int pattern =
                    pattern_days[static_cast<std::size_t>(rng.below(pattern_days.size()))];
                const SplitCells split =
                    hypothetical_mask(stack, d, cloud_mask_of_day(stack, pattern));
                held.days.push_back(stack.days[d]);
                held.cells.push_back(split.test);
                std::vector<double> vals;
                vals.reserve(split.test.size());
                for (int p : split.test) vals.push_back(stack.at(d, p));
                held.truth.push_back(std::move(vals));
                mask_cells(masked, d, split.test);
            }
            report["strategy1"] =
                run_masked_experiment(std::move(masked), era5, features, held, config);
        }
    }

    // --- Strategy 2: >80% cloud days, hold out 20% of valid cells ---------
    {
        std::vector<int> heavy_days;
        for (int d = 0; d < stack.shape.n_days; ++d) {
            const double vf = valid_fraction(stack, d);
            const int n_valid = static_cast<int>(stack.day(d).isFinite().count());
            if (vf > 0.0 && vf < config.heavy_cloud_threshold && n_valid >= 10)
                heavy_days.push_back(d);
        }
        if (heavy_days.empty()) {
            report["strategy2"] = {{"status", "skipped"},
                                   {"reason", "no day with > 80% cloud cover"}};
        } else {
            SceneStack masked = stack;
            HeldOut held;
            for (int d : heavy_days) {
                const SplitCells split = holdout_split(stack, d, config.holdout_fraction,
                                                       config.pipeline.seed);
                held.days.push_back(stack.days[d]);
                held.cells.push_back(split.test);
                std::vector<double> vals;
                vals.reserve(split.test.size());
                for (int p : split.test) vals.push_back(stack.at(d, p));
                held.truth.push_back(std::move(vals));
                mask_cells(masked, d, split.test);
            }
            report["strategy2"] =
                run_masked_experiment(std::move(masked), era5, features, held, config);
        }
    }

    // --- Strategy 3: paired air-temperature models ------------------------
    {
        if (stations == nullptr || stations->rows.empty()) {
            report["strategy3"] = {{"status", "skipped"}, {"reason", "no station table"}};
        } else if (recon_means == nullptr) {
            report["strategy3"] = {{"status", "skipped"},
                                   {"reason", "no reconstruction supplied"}};
        } else {
            report["strategy3"] = airtemp_report(stack, *recon_means, *stations);
        }
    }
    return report;
}

nlohmann::json airtemp_report(const SceneStack& stack,
                              const std::map<int, Eigen::ArrayXd>& recon_means,
                              const StationTable& stations) {
    std::vector<StationRow> obs_rows, rec_rows;
    std::vector<double> obs_lst, rec_lst;
    for (const StationRow& r : stations.rows) {
        const int pixel = r.pixel_row * stack.shape.width + r.pixel_col;
        if (pixel < 0 || pixel >= stack.shape.pixels())
            throw ValidationError("stations: station " + r.station_id + " pixel out of grid");
        if (r.lst_source == "observed") {
            int day_index = -1;
            for (std::size_t i = 0; i < stack.days.size(); ++i)
                if (stack.days[i] == r.day) day_index = static_cast<int>(i);
            if (day_index < 0 || !std::isfinite(stack.at(day_index, pixel)))
                throw ValidationError("stations: row for station " + r.station_id + " day " +
                                      std::to_string(r.day) +
                                      " marked observed but stack has no observation");
            obs_rows.push_back(r);
            obs_lst.push_back(stack.at(day_index, pixel));
        } else {
            const auto it = recon_means.find(r.day);
            if (it == recon_means.end())
                throw ValidationError("stations: no reconstruction for day " +
                                      std::to_string(r.day));
            rec_rows.push_back(r);
            rec_lst.push_back(it->second[pixel]);
        }
    }
    auto fit_group = [&](const std::vector<StationRow>& rows,
                         const std::vector<double>& lst_v) -> nlohmann::json {
        const auto n = static_cast<Eigen::Index>(rows.size());
        const Eigen::ArrayXd lst = Eigen::Map<const Eigen::ArrayXd>(lst_v.data(), n);
        const AirTempModel model = fit_airtemp(rows, lst);
        Eigen::ArrayXd pred(n), truth(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            pred[i] = predict_airtemp(model, rows[static_cast<std::size_t>(i)], lst[i]);
            truth[i] = rows[static_cast<std::size_t>(i)].air_temp_k;
        }
        nlohmann::json j;
        j["metrics"] = metrics_to_json(compute_metrics(pred, truth));
        j["coefficients"] = {{"lst", model.a_lst},   {"ndvi", model.a_ndvi},
                             {"elev", model.a_elev}, {"sol", model.a_sol},
                             {"sza", model.a_sza},   {"intercept", model.intercept}};
        if (!model.dropped_columns.empty()) j["dropped"] = model.dropped_columns;
        return j;
    };
    if (static_cast<int>(obs_rows.size()) < 20 || static_cast<int>(rec_rows.size()) < 20)
        return {{"status", "skipped"}, {"reason", "fewer than 20 rows in a group"}};
    return {{"status", "ok"},
            {"observed", fit_group(obs_rows, obs_lst)},
            {"reconstructed", fit_group(rec_rows, rec_lst)}};
}

} // namespace delag

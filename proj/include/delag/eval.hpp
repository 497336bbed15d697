#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "delag/pipeline.hpp"
#include "delag/types.hpp"

namespace delag {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// MAE, RMSE, bias, R^2 (1 - SSE/SST about the truth mean) and, when
/// intervals are supplied, the fraction of truth values inside them.
Metrics compute_metrics(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                        const Eigen::ArrayXd* lower = nullptr,
                        const Eigen::ArrayXd* upper = nullptr);

nlohmann::json metrics_to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Split strategies
// ---------------------------------------------------------------------------

struct SplitCells {
    std::vector<int> train;
    std::vector<int> test;
};

/// Invalid-cell mask of one day (true = cloud-masked).
std::vector<char> cloud_mask_of_day(const SceneStack& stack, int day_index);

/// Strategy 1: mask a nearly clear target day with another day's real cloud
/// pattern. Test cells are the valid target cells under the pattern; the
/// remaining valid cells train.
SplitCells hypothetical_mask(const SceneStack& stack, int target_day_index,
                             const std::vector<char>& pattern_mask);

/// Strategy 2: uniform random holdout of `fraction` of the valid cells,
/// without replacement, deterministic per (seed, day).
SplitCells holdout_split(const SceneStack& stack, int day_index, double fraction,
                         std::uint64_t seed);

// ---------------------------------------------------------------------------
// Near-surface air temperature (strategy 3)
// ---------------------------------------------------------------------------

struct StationRow {
    std::string station_id;
    int pixel_row = 0;
    int pixel_col = 0;
    int day = 0;
    double air_temp_k = 0.0;
    double ndvi = 0.0;
    double elev_m = 0.0;
    double sol = 0.0;
    double sza_deg = 0.0;
    std::string lst_source; // "observed" | "reconstructed"
};

struct StationTable {
    std::vector<StationRow> rows;
    void validate() const;
};

StationTable load_stations_csv(const std::string& path);
void save_stations_csv(const StationTable& table, const std::string& path);

/// T_air = a_lst*LST + a_ndvi*NDVI + a_elev*ELEV + a_sol*SOL + a_sza*SZA + c.
/// Covariates that are constant across rows are dropped (coefficient 0 and
/// listed); any remaining collinearity is an error naming the columns.
struct AirTempModel {
    double a_lst = 0.0, a_ndvi = 0.0, a_elev = 0.0, a_sol = 0.0, a_sza = 0.0;
    double intercept = 0.0;
    std::vector<std::string> dropped_columns;
};

AirTempModel fit_airtemp(const std::vector<StationRow>& rows, const Eigen::ArrayXd& lst);
double predict_airtemp(const AirTempModel& model, const StationRow& row, double lst);

// ---------------------------------------------------------------------------
// Full harness
// ---------------------------------------------------------------------------

struct ValidateConfig {
    PipelineConfig pipeline;
    double clear_threshold = 0.99;       // strategy-1 eligibility (valid fraction)
    double heavy_cloud_threshold = 0.2;  // strategy-2 eligibility (valid fraction below)
    double holdout_fraction = 0.2;
    int strategy1_max_days = 4;
    double pattern_min_cloud = 0.2; // pattern days must mask at least this fraction
    double pattern_max_cloud = 0.95;
};

/// Paired air-temperature experiment: one OLS model per lst_source group
/// (observed rows use stack observations, reconstructed rows use the
/// supplied reconstruction means). Returns per-group metrics and
/// coefficients.
nlohmann::json airtemp_report(const SceneStack& stack,
                              const std::map<int, Eigen::ArrayXd>& recon_means,
                              const StationTable& stations);

/// Runs the three validation strategies and returns a JSON report with one
/// metrics block per strategy. Strategies without eligible inputs are
/// reported as skipped. `recon_means` supplies the full-data reconstruction
/// used for strategy-3 rows flagged "reconstructed" (day -> mean grid);
/// `stations` may be null (strategy 3 skipped).
nlohmann::json validate_all(const SceneStack& stack, const Era5Series& era5,
                            const FeatureRaster& features,
                            const std::map<int, Eigen::ArrayXd>* recon_means,
                            const StationTable* stations, const ValidateConfig& config);

} // namespace delag

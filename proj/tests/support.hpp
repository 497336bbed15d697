#pragma once

// Shared test fixtures and independent oracles. Everything here is
// deliberately written without reusing the library's computation paths so
// the tests cross-check rather than echo the implementation.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "delag/eval.hpp"
#include "delag/rng.hpp"
#include "delag/synth.hpp"
#include "delag/types.hpp"

namespace testsupport {

inline std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() /
               ("delag_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline delag::SceneStack make_random_stack(std::uint64_t seed) {
    delag::Rng rng(seed);
    delag::SceneStack s;
    s.shape.n_days = 1 + static_cast<int>(rng.below(5));
    s.shape.height = 1 + static_cast<int>(rng.below(6));
    s.shape.width = 1 + static_cast<int>(rng.below(6));
    int day = 1 + static_cast<int>(rng.below(10));
    for (int d = 0; d < s.shape.n_days; ++d) {
        s.days.push_back(day);
        day += 1 + static_cast<int>(rng.below(20));
    }
    s.temps.resize(s.shape.cells());
    for (auto& v : s.temps) {
        if (rng.uniform() < 0.25)
            v = std::numeric_limits<float>::quiet_NaN();
        else
            v = static_cast<float>(rng.uniform(185.0, 355.0));
    }
    return s;
}

/// Linear-interpolation percentile (independent implementation).
inline double oracle_percentile(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const double h = q * (static_cast<double>(values.size()) - 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + (h - lo) * (values[lo + 1] - values[lo]);
}

/// Dense direct-solve GP oracle replicating the documented algorithm with
/// plain loops and an explicit inverse.
struct DenseGpOracle {
    Eigen::MatrixXd x_std;
    Eigen::VectorXd mean_f, sd_f;
    double y_mean = 0.0;
    Eigen::MatrixXd kinv;
    Eigen::VectorXd yc;
    delag::KernelHyper hyper;
    bool include_noise = true;

    DenseGpOracle(const Eigen::MatrixXd& features, const Eigen::VectorXd& y,
                  const delag::KernelHyper& h, bool with_noise)
        : hyper(h), include_noise(with_noise) {
        const auto n = features.rows();
        const auto f = features.cols();
        mean_f.resize(f);
        sd_f.resize(f);
        for (Eigen::Index c = 0; c < f; ++c) {
            mean_f[c] = features.col(c).mean();
            double var = 0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const double d = features(i, c) - mean_f[c];
                var += d * d;
            }
            sd_f[c] = std::sqrt(var / static_cast<double>(n));
            if (sd_f[c] < 1e-12) sd_f[c] = 1.0;
        }
        x_std.resize(n, f);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index c = 0; c < f; ++c)
                x_std(i, c) = (features(i, c) - mean_f[c]) / sd_f[c];
        y_mean = y.mean();
        yc = y.array() - y_mean;

        Eigen::MatrixXd k(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                const double d2 = (x_std.row(i) - x_std.row(j)).squaredNorm();
                k(i, j) = h.signal_variance *
                          std::exp(-d2 / (2.0 * h.lengthscale * h.lengthscale));
            }
            k(i, i) += h.signal_variance * 1e-6 + h.noise_variance;
        }
        kinv = k.fullPivLu().inverse();
    }

    void predict(const Eigen::VectorXd& raw_query, double& mean, double& var) const {
        Eigen::VectorXd q(raw_query.size());
        for (Eigen::Index c = 0; c < q.size(); ++c)
            q[c] = (raw_query[c] - mean_f[c]) / sd_f[c];
        Eigen::VectorXd ks(x_std.rows());
        for (Eigen::Index i = 0; i < x_std.rows(); ++i) {
            const double d2 = (x_std.row(i).transpose() - q).squaredNorm();
            ks[i] = hyper.signal_variance *
                    std::exp(-d2 / (2.0 * hyper.lengthscale * hyper.lengthscale));
        }
        mean = y_mean + ks.dot(kinv * yc);
        var = hyper.signal_variance - ks.dot(kinv * ks);
        if (var < 0) var = 0;
        if (include_noise) var += hyper.noise_variance;
    }
};

/// Draw an exact GP sample over given (already standardized or raw) inputs
/// via a dense Cholesky, plus i.i.d. noise.
inline Eigen::VectorXd sample_gp(const Eigen::MatrixXd& x, const delag::KernelHyper& hyper,
                                 std::uint64_t seed) {
    const auto n = x.rows();
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            const double d2 = (x.row(i) - x.row(j)).squaredNorm();
            k(i, j) = hyper.signal_variance *
                      std::exp(-d2 / (2.0 * hyper.lengthscale * hyper.lengthscale));
        }
        k(i, i) += 1e-10;
    }
    const Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(k).matrixL();
    delag::Rng rng(seed);
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
    Eigen::VectorXd y = l * z;
    const double noise_sd = std::sqrt(hyper.noise_variance);
    for (Eigen::Index i = 0; i < n; ++i) y[i] += noise_sd * rng.normal();
    return y;
}

/// Planted air-temperature law used to build synthetic station tables.
struct AirTempTruth {
    double a_lst = 0.7, a_ndvi = 2.0, a_elev = -0.002, a_sol = 1.5, a_sza = -0.01;
    double intercept = 80.0;
    double noise_sd = 1.0;
};

/// Stations at `n_stations` random pixels on every stack day. air_temp is
/// the planted law applied to the noiseless true LST; lst_source reflects
/// whether the stack actually observed that (day, pixel).
inline delag::StationTable make_stations(const delag::SynthData& data, int n_stations,
                                         const AirTempTruth& law, std::uint64_t seed) {
    delag::StationTable table;
    delag::Rng rng(seed);
    const int pixels = data.stack.shape.pixels();
    constexpr double w = 2.0 * M_PI / 365.0;
    for (int s = 0; s < n_stations; ++s) {
        const int pixel = static_cast<int>(rng.below(static_cast<std::uint64_t>(pixels)));
        const double ndvi = rng.uniform(0.0, 1.0);
        const double elev = rng.uniform(0.0, 500.0);
        const double sol = rng.uniform(0.2, 1.0);
        for (int d = 0; d < data.stack.shape.n_days; ++d) {
            const int day = data.stack.days[static_cast<std::size_t>(d)];
            delag::StationRow row;
            row.station_id = "S" + std::to_string(s);
            row.pixel_row = pixel / data.stack.shape.width;
            row.pixel_col = pixel % data.stack.shape.width;
            row.day = day;
            row.ndvi = ndvi;
            row.elev_m = elev;
            row.sol = sol;
            row.sza_deg = std::clamp(25.0 + 15.0 * (1.0 - std::cos(w * (day - 172))) +
                                         rng.normal(0.0, 2.0),
                                     0.0, 90.0);
            const double lst = data.truth.lst_at(d, pixel, pixels);
            row.air_temp_k = law.a_lst * lst + law.a_ndvi * row.ndvi + law.a_elev * row.elev_m +
                             law.a_sol * row.sol + law.a_sza * row.sza_deg + law.intercept +
                             rng.normal(0.0, law.noise_sd);
            row.lst_source =
                std::isfinite(data.stack.at(d, pixel)) ? "observed" : "reconstructed";
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

} // namespace testsupport

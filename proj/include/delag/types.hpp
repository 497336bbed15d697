#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "delag/error.hpp"

namespace delag {

constexpr double kTempMinK = 180.0;
constexpr double kTempMaxK = 360.0;
constexpr int kMaxDayOfYear = 366;

struct GridShape {
    int n_days = 0;
    int height = 0;
    int width = 0;

    int pixels() const { return height * width; }
    std::size_t cells() const {
        return static_cast<std::size_t>(n_days) * static_cast<std::size_t>(pixels());
    }

    void validate() const {
        if (n_days <= 0 || height <= 0 || width <= 0)
            throw ValidationError("grid shape: all dims must be strictly positive, got [" +
                                  std::to_string(n_days) + "," + std::to_string(height) + "," +
                                  std::to_string(width) + "]");
        if (n_days > kMaxDayOfYear)
            throw ValidationError("grid shape: n_days " + std::to_string(n_days) + " exceeds " +
                                  std::to_string(kMaxDayOfYear));
    }

    bool operator==(const GridShape&) const = default;
};

/// Day-of-year axes must be strictly increasing integers in [1, 366].
inline void validate_day_axis(const std::vector<int>& days, const std::string& what) {
    for (std::size_t i = 0; i < days.size(); ++i) {
        if (days[i] < 1 || days[i] > kMaxDayOfYear)
            throw ValidationError(what + ": days[" + std::to_string(i) + "]=" +
                                  std::to_string(days[i]) + " outside [1,366]");
        if (i > 0 && days[i] <= days[i - 1])
            throw ValidationError(what + ": days[" + std::to_string(i) +
                                  "] not strictly increasing");
    }
}

/// The observational record: a (days x height x width) temperature cube in
/// kelvin, day-major then row-major, with NaN marking cloud-masked or
/// otherwise unobserved cells.
struct SceneStack {
    GridShape shape;
    std::vector<int> days;
    std::vector<float> temps;

    float at(int day_index, int pixel) const {
        return temps[static_cast<std::size_t>(day_index) * shape.pixels() + pixel];
    }
    float& at(int day_index, int pixel) {
        return temps[static_cast<std::size_t>(day_index) * shape.pixels() + pixel];
    }
    Eigen::Map<const Eigen::ArrayXf> day(int day_index) const {
        return {temps.data() + static_cast<std::size_t>(day_index) * shape.pixels(),
                shape.pixels()};
    }
    Eigen::Map<Eigen::ArrayXf> day(int day_index) {
        return {temps.data() + static_cast<std::size_t>(day_index) * shape.pixels(),
                shape.pixels()};
    }

    void validate() const {
        shape.validate();
        if (static_cast<int>(days.size()) != shape.n_days)
            throw ValidationError("stack: days length " + std::to_string(days.size()) +
                                  " != n_days " + std::to_string(shape.n_days));
        validate_day_axis(days, "stack");
        if (temps.size() != shape.cells())
            throw ValidationError("stack: temps length " + std::to_string(temps.size()) +
                                  " != n_days*height*width " + std::to_string(shape.cells()));
        for (std::size_t i = 0; i < temps.size(); ++i) {
            const float v = temps[i];
            if (std::isfinite(v) && (v < kTempMinK || v > kTempMaxK))
                throw ValidationError("stack: temps[" + std::to_string(i) + "]=" +
                                      std::to_string(v) + " outside [180,360] K");
        }
    }
};

/// Fraction of finite cells on one day.
inline double valid_fraction(const SceneStack& stack, int day_index) {
    if (day_index < 0 || day_index >= stack.shape.n_days)
        throw ValidationError("valid_fraction: day_index " + std::to_string(day_index) +
                              " out of range [0," + std::to_string(stack.shape.n_days) + ")");
    const auto vals = stack.day(day_index);
    const auto finite = vals.isFinite().count();
    return static_cast<double>(finite) / static_cast<double>(stack.shape.pixels());
}

/// Gap-free daily reanalysis skin temperature on a coarse cell grid laid
/// uniformly over the pixel grid. Its day axis must contain every stack day
/// (it usually spans the whole year so any calendar day can be
/// reconstructed).
struct Era5Series {
    std::vector<int> days;
    int rows = 1;
    int cols = 1;
    int pixel_height = 0;
    int pixel_width = 0;
    std::vector<float> values; // day-major, then row-major over cells

    int n_cells() const { return rows * cols; }

    float value(int day_index, int cell) const {
        return values[static_cast<std::size_t>(day_index) * n_cells() + cell];
    }

    /// Nearest coarse cell for a pixel (uniform grid partition).
    int cell_for_pixel(int pixel) const {
        const int pr = pixel / pixel_width;
        const int pc = pixel % pixel_width;
        const int r = std::min(rows - 1, pr * rows / pixel_height);
        const int c = std::min(cols - 1, pc * cols / pixel_width);
        return r * cols + c;
    }

    std::vector<int> cell_map() const {
        std::vector<int> map(static_cast<std::size_t>(pixel_height) * pixel_width);
        for (std::size_t p = 0; p < map.size(); ++p)
            map[p] = cell_for_pixel(static_cast<int>(p));
        return map;
    }

    /// Index into `days` of a given day-of-year, or -1.
    int day_pos(int day_of_year) const {
        auto it = std::lower_bound(days.begin(), days.end(), day_of_year);
        if (it == days.end() || *it != day_of_year) return -1;
        return static_cast<int>(it - days.begin());
    }

    void validate() const {
        if (rows <= 0 || cols <= 0 || pixel_height <= 0 || pixel_width <= 0)
            throw ValidationError("era5: grid dims must be positive");
        validate_day_axis(days, "era5");
        if (values.size() != days.size() * static_cast<std::size_t>(n_cells()))
            throw ValidationError("era5: values length " + std::to_string(values.size()) +
                                  " != n_days*cells");
        for (std::size_t i = 0; i < values.size(); ++i) {
            const float v = values[i];
            if (!std::isfinite(v))
                throw ValidationError("era5: values[" + std::to_string(i) +
                                      "] not finite (reanalysis must be gap-free)");
            if (v < kTempMinK || v > kTempMaxK)
                throw ValidationError("era5: values[" + std::to_string(i) + "]=" +
                                      std::to_string(v) + " outside [180,360] K");
        }
    }
};

/// Per-pixel feature vectors of fixed dimension F. The default layout is
/// {red, green, blue, nir mean reflectance in [0,1], normalized x, y}.
struct FeatureRaster {
    int f_dim = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values; // feature-plane-major: values[f*H*W + pixel]

    int pixels() const { return height * width; }

    float at(int f, int pixel) const {
        return values[static_cast<std::size_t>(f) * pixels() + pixel];
    }

    Eigen::VectorXd pixel_features(int pixel) const {
        Eigen::VectorXd x(f_dim);
        for (int f = 0; f < f_dim; ++f) x[f] = at(f, pixel);
        return x;
    }

    /// Rows = selected pixels, columns = features.
    Eigen::MatrixXd gather(const std::vector<int>& pixel_ids) const {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(pixel_ids.size()), f_dim);
        for (std::size_t i = 0; i < pixel_ids.size(); ++i)
            for (int f = 0; f < f_dim; ++f) m(static_cast<Eigen::Index>(i), f) = at(f, pixel_ids[i]);
        return m;
    }

    void validate() const {
        if (f_dim <= 0 || height <= 0 || width <= 0)
            throw ValidationError("features: dims must be positive");
        if (values.size() != static_cast<std::size_t>(f_dim) * pixels())
            throw ValidationError("features: values length mismatch");
        for (std::size_t i = 0; i < values.size(); ++i)
            if (!std::isfinite(values[i]))
                throw ValidationError("features: values[" + std::to_string(i) + "] is not finite");
    }
};

/// Standard evaluation metrics. r2 and cov95 are optional: r2 is undefined
/// when the truth is constant, cov95 only exists when intervals were given.
struct Metrics {
    double mae = 0.0;
    double rmse = 0.0;
    std::optional<double> r2;
    std::string r2_missing_reason;
    double bias = 0.0;
    std::optional<double> cov95;
    std::int64_t n = 0;
};

} // namespace delag

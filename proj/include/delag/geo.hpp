#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "delag/error.hpp"

namespace delag {

/// Landsat cross-track coverage geometry on a spherical Earth.
struct CrosstrackConfig {
    double scene_width_km = 185.0;
    double inclination_offset_deg = 8.2;
    double tracks_per_cycle = 233.0;
    double equator_circumference_km = 40075.0;
};

/// Ratio of the total horizontal scene coverage per 16-day cycle to the
/// length of the parallel at the given latitude.
inline double crosstrack_ratio(double latitude_deg, const CrosstrackConfig& cfg = {}) {
    if (std::abs(latitude_deg) >= 82.0)
        throw DomainError("crosstrack: |latitude| must be < 82, got " +
                          std::to_string(latitude_deg));
    constexpr double deg = M_PI / 180.0;
    const double horizontal = cfg.scene_width_km * std::cos(cfg.inclination_offset_deg * deg);
    const double parallel = cfg.equator_circumference_km * std::cos(latitude_deg * deg);
    return horizontal * cfg.tracks_per_cycle / parallel;
}

/// Fraction of the parallel seen at least twice per 16-day cycle.
inline double overlap_fraction(double latitude_deg, const CrosstrackConfig& cfg = {}) {
    const double r = crosstrack_ratio(latitude_deg, cfg);
    return std::clamp(r - 1.0, 0.0, 1.0);
}

} // namespace delag

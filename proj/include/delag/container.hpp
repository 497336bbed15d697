#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "delag/types.hpp"

namespace delag {

// LSTC container, bit-exact layout:
//   bytes 0..5    magic "LSTC1\n"
//   bytes 6..13   unsigned 64-bit little-endian header length H
//   bytes 14..14+H  UTF-8 JSON header with required keys
//                   dims ([d0,d1,d2]), days (array), dtype ("f32le"),
//                   order ("day-major,row-major"), optional meta object
//   rest          raw payload, exactly 4*d0*d1*d2 bytes, NaN = invalid
// The header JSON is serialized with sorted keys and no whitespace, so the
// same cube always produces the same bytes.

inline constexpr char kLstcMagic[6] = {'L', 'S', 'T', 'C', '1', '\n'};

struct LstcCube {
    std::vector<std::int64_t> dims; // always 3 entries
    std::vector<int> days;
    nlohmann::json meta; // object or null
    std::vector<float> data;

    std::size_t cell_count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
};

void save_cube(const LstcCube& cube, const std::string& path);
LstcCube load_cube(const std::string& path);

void save_stack(const SceneStack& stack, const std::string& path);
SceneStack load_stack(const std::string& path);

void save_features(const FeatureRaster& features, const std::string& path);
FeatureRaster load_features(const std::string& path);

void save_era5(const Era5Series& era5, const std::string& path);
Era5Series load_era5(const std::string& path);

} // namespace delag

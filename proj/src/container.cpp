#include "delag/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "delag/error.hpp"

namespace delag {

static_assert(std::endian::native == std::endian::little,
              "LSTC I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace {

void write_u64_le(std::ofstream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64_le(const unsigned char* buf) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

nlohmann::json header_json(const LstcCube& cube) {
    nlohmann::json h;
    h["dims"] = cube.dims;
    h["days"] = cube.days;
    h["dtype"] = "f32le";
    h["order"] = "day-major,row-major";
    if (!cube.meta.is_null()) h["meta"] = cube.meta;
    return h;
}

} // namespace

void save_cube(const LstcCube& cube, const std::string& path) {
    if (cube.dims.size() != 3)
        throw ValidationError("container: dims must have 3 entries");
    if (cube.data.size() != cube.cell_count())
        throw ValidationError("container: payload has " + std::to_string(cube.data.size()) +
                              " values but dims imply " + std::to_string(cube.cell_count()));
    const std::string header = header_json(cube).dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kLstcMagic, sizeof(kLstcMagic));
    write_u64_le(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(cube.data.data()),
              static_cast<std::streamsize>(cube.data.size() * sizeof(float)));
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

LstcCube load_cube(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());

    if (raw.size() < sizeof(kLstcMagic) + 8)
        throw TruncationError("file shorter than fixed preamble: " + std::to_string(raw.size()) +
                              " bytes");
    if (std::memcmp(raw.data(), kLstcMagic, sizeof(kLstcMagic)) != 0)
        throw FormatError("bad magic, expected LSTC1");
    const std::uint64_t header_len = read_u64_le(raw.data() + sizeof(kLstcMagic));
    const std::size_t header_off = sizeof(kLstcMagic) + 8;
    if (header_off + header_len > raw.size())
        throw TruncationError("header length " + std::to_string(header_len) +
                              " exceeds file size " + std::to_string(raw.size()));

    nlohmann::json h;
    try {
        h = nlohmann::json::parse(raw.begin() + static_cast<std::ptrdiff_t>(header_off),
                                  raw.begin() + static_cast<std::ptrdiff_t>(header_off + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    for (const char* key : {"dims", "days", "dtype", "order"})
        if (!h.contains(key)) throw FormatError(std::string("header missing key ") + key);
    if (h["dtype"].get<std::string>() != "f32le")
        throw FormatError("unsupported dtype " + h["dtype"].dump());
    if (h["order"].get<std::string>() != "day-major,row-major")
        throw FormatError("unsupported order " + h["order"].dump());

    LstcCube cube;
    cube.dims = h["dims"].get<std::vector<std::int64_t>>();
    if (cube.dims.size() != 3) throw FormatError("dims must have 3 entries");
    for (auto d : cube.dims)
        if (d <= 0) throw FormatError("dims entries must be positive");
    cube.days = h["days"].get<std::vector<int>>();
    if (h.contains("meta")) cube.meta = h["meta"];

    const std::size_t expected = cube.cell_count() * sizeof(float);
    const std::size_t actual = raw.size() - header_off - header_len;
    if (actual != expected)
        throw TruncationError("payload: expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(actual));
    cube.data.resize(cube.cell_count());
    std::memcpy(cube.data.data(), raw.data() + header_off + header_len, expected);
    return cube;
}

void save_stack(const SceneStack& stack, const std::string& path) {
    stack.validate();
    LstcCube cube;
    cube.dims = {stack.shape.n_days, stack.shape.height, stack.shape.width};
    cube.days = stack.days;
    cube.meta = nlohmann::json{{"kind", "stack"}};
    cube.data = stack.temps;
    save_cube(cube, path);
}

SceneStack load_stack(const std::string& path) {
    const LstcCube cube = load_cube(path);
    SceneStack stack;
    stack.shape = {static_cast<int>(cube.dims[0]), static_cast<int>(cube.dims[1]),
                   static_cast<int>(cube.dims[2])};
    stack.days = cube.days;
    stack.temps = cube.data;
    stack.validate();
    return stack;
}

void save_features(const FeatureRaster& features, const std::string& path) {
    features.validate();
    LstcCube cube;
    cube.dims = {features.f_dim, features.height, features.width};
    cube.days = {};
    cube.meta = nlohmann::json{{"kind", "features"}};
    cube.data = features.values;
    save_cube(cube, path);
}

FeatureRaster load_features(const std::string& path) {
    const LstcCube cube = load_cube(path);
    FeatureRaster f;
    f.f_dim = static_cast<int>(cube.dims[0]);
    f.height = static_cast<int>(cube.dims[1]);
    f.width = static_cast<int>(cube.dims[2]);
    f.values = cube.data;
    f.validate();
    return f;
}

void save_era5(const Era5Series& era5, const std::string& path) {
    era5.validate();
    LstcCube cube;
    cube.dims = {static_cast<std::int64_t>(era5.days.size()), era5.rows, era5.cols};
    cube.days = era5.days;
    cube.meta = nlohmann::json{{"kind", "era5"},
                               {"pixel_dims", {era5.pixel_height, era5.pixel_width}}};
    cube.data = era5.values;
    save_cube(cube, path);
}

Era5Series load_era5(const std::string& path) {
    const LstcCube cube = load_cube(path);
    Era5Series e;
    e.days = cube.days;
    e.rows = static_cast<int>(cube.dims[1]);
    e.cols = static_cast<int>(cube.dims[2]);
    if (!cube.meta.is_object() || !cube.meta.contains("pixel_dims"))
        throw FormatError("era5 container missing meta.pixel_dims");
    e.pixel_height = cube.meta["pixel_dims"][0].get<int>();
    e.pixel_width = cube.meta["pixel_dims"][1].get<int>();
    e.values = cube.data;
    e.validate();
    return e;
}

} // namespace delag

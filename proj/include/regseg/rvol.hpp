#pragma once

// RVOL on-disk volume format: <name>.rvol holds channels*W*H*D little-endian
// f32 values (channel-major, x fastest); <name>.rvol.json is the sidecar
// header {"dims":[W,H,D],"spacing":[sx,sy,sz],"channels":c,"dtype":"f32le",
// "kind":"intensity"|"mask"}. Round trips are bitwise for f32 payloads.
// Little-endian hosts only (checked at runtime).

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "regseg/volume.hpp"

namespace regseg {

inline void check_little_endian() {
    const std::uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    require(b == 1, "RVOL I/O requires a little-endian host");
}

struct RvolHeader {
    std::int64_t W = 0, H = 0, D = 0;
    double sx = 1, sy = 1, sz = 1;
    std::int64_t channels = 1;
    std::string kind = "intensity";  // or "mask"
};

inline void write_rvol(const std::string& path, const Volume3D& vol, const std::string& kind) {
    check_little_endian();
    vol.validate_meta();
    require(kind == "intensity" || kind == "mask", "write_rvol: kind must be intensity or mask");

    nlohmann::json hdr;
    hdr["dims"] = {vol.W, vol.H, vol.D};
    hdr["spacing"] = {vol.sx, vol.sy, vol.sz};
    hdr["channels"] = vol.channels;
    hdr["dtype"] = "f32le";
    hdr["kind"] = kind;
    {
        std::ofstream js(path + ".json", std::ios::trunc);
        if (!js.good()) throw FormatError("write_rvol: cannot open " + path + ".json for writing");
        js << hdr.dump(2) << "\n";
        if (!js.good()) throw FormatError("write_rvol: failed writing header " + path + ".json");
    }

    std::ofstream raw(path, std::ios::binary | std::ios::trunc);
    if (!raw.good()) throw FormatError("write_rvol: cannot open " + path + " for writing");
    const std::int64_t n = vol.data.numel();
    std::vector<float> buf(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(vol.data[i]);
    raw.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    if (!raw.good()) throw FormatError("write_rvol: failed writing payload " + path);
}

inline Volume3D read_rvol(const std::string& path, RvolHeader* out_hdr = nullptr) {
    check_little_endian();
    std::ifstream js(path + ".json");
    if (!js.good()) throw FormatError("read_rvol: missing header " + path + ".json");
    nlohmann::json hdr;
    try {
        js >> hdr;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("read_rvol: malformed JSON header " + path + ".json: " + e.what());
    }

    RvolHeader h;
    try {
        const auto& dims = hdr.at("dims");
        const auto& spacing = hdr.at("spacing");
        if (!dims.is_array() || dims.size() != 3 || !spacing.is_array() || spacing.size() != 3)
            throw FormatError("read_rvol: dims/spacing must be 3-element arrays in " + path + ".json");
        h.W = dims[0].get<std::int64_t>();
        h.H = dims[1].get<std::int64_t>();
        h.D = dims[2].get<std::int64_t>();
        h.sx = spacing[0].get<double>();
        h.sy = spacing[1].get<double>();
        h.sz = spacing[2].get<double>();
        h.channels = hdr.at("channels").get<std::int64_t>();
        const std::string dtype = hdr.at("dtype").get<std::string>();
        if (dtype != "f32le") throw FormatError("read_rvol: unsupported dtype \"" + dtype + "\" in " + path);
        h.kind = hdr.at("kind").get<std::string>();
        if (h.kind != "intensity" && h.kind != "mask")
            throw FormatError("read_rvol: unsupported kind \"" + h.kind + "\" in " + path);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("read_rvol: header field error in " + path + ".json: " + e.what());
    }
    if (h.W < 1 || h.H < 1 || h.D < 1 || h.channels < 1 || h.sx <= 0 || h.sy <= 0 || h.sz <= 0)
        throw FormatError("read_rvol: invalid dims/spacing/channels in " + path + ".json");

    std::ifstream raw(path, std::ios::binary | std::ios::ate);
    if (!raw.good()) throw FormatError("read_rvol: missing raw file " + path);
    const std::int64_t bytes = static_cast<std::int64_t>(raw.tellg());
    const std::int64_t expected_floats = h.channels * h.W * h.H * h.D;
    const std::int64_t expected_bytes = expected_floats * 4;
    if (bytes != expected_bytes)
        throw FormatError("read_rvol: size mismatch in " + path + ": header expects " +
                          std::to_string(expected_floats) + " floats (" + std::to_string(expected_bytes) +
                          " bytes) but file has " + std::to_string(bytes) +
                          " bytes (mismatch at byte offset " + std::to_string(std::min(bytes, expected_bytes)) +
                          ")");
    raw.seekg(0);
    std::vector<float> buf(static_cast<std::size_t>(expected_floats));
    raw.read(reinterpret_cast<char*>(buf.data()), expected_bytes);
    if (!raw.good()) throw FormatError("read_rvol: short read on " + path);

    Volume3D vol(h.W, h.H, h.D, h.sx, h.sy, h.sz, h.channels);
    for (std::int64_t i = 0; i < expected_floats; ++i)
        vol.data[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]);
    if (out_hdr) *out_hdr = h;
    return vol;
}

// Masks travel as 3-channel RVOL files of 0/1 floats.
inline void write_labelmask(const std::string& path, const LabelMask& mask) {
    Volume3D v(mask.W, mask.H, mask.D, mask.sx, mask.sy, mask.sz, 3);
    v.data = mask.data;
    write_rvol(path, v, "mask");
}

inline LabelMask read_labelmask(const std::string& path) {
    RvolHeader h;
    Volume3D v = read_rvol(path, &h);
    if (h.kind != "mask") throw FormatError("read_labelmask: " + path + " has kind \"" + h.kind + "\", expected mask");
    if (h.channels != 3)
        throw FormatError("read_labelmask: " + path + " has " + std::to_string(h.channels) +
                          " channels, expected 3");
    LabelMask m(v.W, v.H, v.D, v.sx, v.sy, v.sz);
    m.data = v.data;
    m.validate();
    return m;
}

}  // namespace regseg

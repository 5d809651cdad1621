#pragma once

// Single-file NIfTI-1 (.nii) reading and writing, little-endian only.
// Volume element (d, h, w) is stored at NIfTI index d + D * (h + H * w), so
// the NIfTI dims read back as (D, H, W).

#include <array>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>

#include "bldm/volume.hpp"

namespace bldm::nifti {

enum class DataType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16, float64 = 64 };

struct WriteOptions {
    DataType dtype = DataType::float32;
    std::string description = "bldm";
};

namespace detail {

constexpr int header_size = 348;
constexpr int vox_offset = 352;

template <class V>
void put(std::array<char, vox_offset>& buf, int off, V v) {
    std::memcpy(buf.data() + off, &v, sizeof v);
}
template <class V>
V get(const std::array<char, vox_offset>& buf, int off) {
    V v;
    std::memcpy(&v, buf.data() + off, sizeof v);
    return v;
}

inline int bitpix(DataType t) {
    switch (t) {
        case DataType::uint8: return 8;
        case DataType::int16: return 16;
        case DataType::float32: return 32;
        case DataType::float64: return 64;
    }
    return 0;
}

inline std::size_t linear_index(const Index3& s, int d, int h, int w) {
    return static_cast<std::size_t>(d) + static_cast<std::size_t>(s[0]) * (h + static_cast<std::size_t>(s[1]) * w);
}

}  // namespace detail

// Integer dtypes are quantised with scl_slope = (max - min) / range and
// scl_inter = min; the quantisation step is the slope.
inline void write(const Volume& v, const std::string& path, const WriteOptions& opt = {}) {
    v.validate();
    const Index3 s = v.shape();
    std::array<char, detail::vox_offset> hdr{};
    detail::put<std::int32_t>(hdr, 0, detail::header_size);
    const std::int16_t dims[8] = {3, static_cast<std::int16_t>(s[0]), static_cast<std::int16_t>(s[1]),
                                  static_cast<std::int16_t>(s[2]), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) detail::put<std::int16_t>(hdr, 40 + 2 * i, dims[i]);
    detail::put<std::int16_t>(hdr, 70, static_cast<std::int16_t>(opt.dtype));
    detail::put<std::int16_t>(hdr, 72, static_cast<std::int16_t>(detail::bitpix(opt.dtype)));
    const float pixdim[8] = {1.0f, float(v.spacing[0]), float(v.spacing[1]), float(v.spacing[2]), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) detail::put<float>(hdr, 76 + 4 * i, pixdim[i]);
    detail::put<float>(hdr, 108, float(detail::vox_offset));

    float lo = 0, hi = 0;
    if (v.numel()) {
        auto [mn, mx] = std::minmax_element(v.data.data.begin(), v.data.data.end());
        lo = *mn, hi = *mx;
    }
    float slope = 1.0f, inter = 0.0f;
    if (opt.dtype == DataType::int16 || opt.dtype == DataType::uint8) {
        const double levels = opt.dtype == DataType::int16 ? 65535.0 : 255.0;
        const double base = opt.dtype == DataType::int16 ? -32768.0 : 0.0;
        slope = hi > lo ? static_cast<float>((double(hi) - lo) / levels) : 1.0f;
        inter = static_cast<float>(lo - base * slope);
    }
    detail::put<float>(hdr, 112, slope);
    detail::put<float>(hdr, 116, inter);
    hdr[123] = 2;  // mm
    std::strncpy(hdr.data() + 148, opt.description.c_str(), 79);
    // Scanner-space affine: diagonal spacing, origin at the volume centre.
    detail::put<std::int16_t>(hdr, 254, 1);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) {
            float val = 0;
            if (c == r) val = float(v.spacing[r]);
            if (c == 3) val = float(-0.5 * (s[r] - 1) * v.spacing[r]);
            detail::put<float>(hdr, 280 + 16 * r + 4 * c, val);
        }
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(hdr.data(), hdr.size());
    std::vector<char> body(v.numel() * detail::bitpix(opt.dtype) / 8);
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) {
                const std::size_t i = detail::linear_index(s, d, h, w);
                const float x = v.at(d, h, w);
                switch (opt.dtype) {
                    case DataType::float32: std::memcpy(body.data() + 4 * i, &x, 4); break;
                    case DataType::float64: {
                        const double y = x;
                        std::memcpy(body.data() + 8 * i, &y, 8);
                        break;
                    }
                    case DataType::int16: {
                        const double q = std::round((double(x) - inter) / slope);
                        const auto y = static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
                        std::memcpy(body.data() + 2 * i, &y, 2);
                        break;
                    }
                    case DataType::uint8: {
                        const double q = std::round((double(x) - inter) / slope);
                        body[i] = static_cast<char>(static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0)));
                        break;
                    }
                }
            }
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!os) throw std::runtime_error("short write to " + path);
}

struct ReadResult {
    Volume volume;
    DataType dtype = DataType::float32;
    double quantisation_step = 0.0;  // scl_slope for integer types, 0 for floats
};

inline ReadResult read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::array<char, detail::vox_offset> hdr{};
    is.read(hdr.data(), detail::header_size);
    if (!is) throw std::runtime_error(path + ": truncated NIfTI header");
    if (detail::get<std::int32_t>(hdr, 0) != detail::header_size)
        throw std::runtime_error(path + ": not a little-endian NIfTI-1 file (sizeof_hdr != 348)");
    if (std::memcmp(hdr.data() + 344, "n+1", 3) != 0)
        throw std::runtime_error(path + ": only single-file NIfTI-1 (magic n+1) is supported");
    const auto ndim = detail::get<std::int16_t>(hdr, 40);
    Index3 s{detail::get<std::int16_t>(hdr, 42), detail::get<std::int16_t>(hdr, 44), detail::get<std::int16_t>(hdr, 46)};
    if (ndim < 3 || ndim > 4 || (ndim == 4 && detail::get<std::int16_t>(hdr, 48) != 1))
        throw std::runtime_error(path + ": expected a 3D volume, found " + std::to_string(ndim) + " dims");
    for (int d : s)
        if (d <= 0) throw std::runtime_error(path + ": non-positive dimension");
    const auto dtype = static_cast<DataType>(detail::get<std::int16_t>(hdr, 70));
    if (dtype != DataType::uint8 && dtype != DataType::int16 && dtype != DataType::float32 && dtype != DataType::float64)
        throw std::runtime_error(path + ": unsupported datatype code " + std::to_string(int(dtype)));
    Spacing3 sp{detail::get<float>(hdr, 80), detail::get<float>(hdr, 84), detail::get<float>(hdr, 88)};
    float slope = detail::get<float>(hdr, 112), inter = detail::get<float>(hdr, 116);
    if (slope == 0.0f) slope = 1.0f, inter = 0.0f;
    const auto offset = static_cast<std::streamoff>(detail::get<float>(hdr, 108));
    is.seekg(offset);
    const std::size_t n = static_cast<std::size_t>(s[0]) * s[1] * s[2];
    std::vector<char> body(n * detail::bitpix(dtype) / 8);
    is.read(body.data(), static_cast<std::streamsize>(body.size()));
    if (!is) throw std::runtime_error(path + ": voxel data truncated");

    ReadResult r;
    r.dtype = dtype;
    r.volume = Volume(s, sp, VolumeSource::ingested);
    const bool integer = dtype == DataType::uint8 || dtype == DataType::int16;
    r.quantisation_step = integer ? slope : 0.0;
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) {
                const std::size_t i = detail::linear_index(s, d, h, w);
                double x = 0;
                switch (dtype) {
                    case DataType::float32: {
                        float f;
                        std::memcpy(&f, body.data() + 4 * i, 4);
                        x = f;
                        break;
                    }
                    case DataType::float64: std::memcpy(&x, body.data() + 8 * i, 8); break;
                    case DataType::int16: {
                        std::int16_t q;
                        std::memcpy(&q, body.data() + 2 * i, 2);
                        x = q;
                        break;
                    }
                    case DataType::uint8: x = static_cast<std::uint8_t>(body[i]); break;
                }
                if (integer || slope != 1.0f || inter != 0.0f) x = x * slope + inter;
                r.volume.at(d, h, w) = static_cast<float>(x);
            }
    return r;
}

}  // namespace bldm::nifti

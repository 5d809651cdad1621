#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>
#include <stdexcept>
#include <string>

#include "bldm/tensor.hpp"

namespace bldm {

enum class VolumeSource { phantom, ingested, synthetic };

inline const char* to_string(VolumeSource s) {
    switch (s) {
        case VolumeSource::phantom: return "phantom";
        case VolumeSource::ingested: return "ingested";
        case VolumeSource::synthetic: return "synthetic";
    }
    return "unknown";
}

inline VolumeSource volume_source_from_string(const std::string& s) {
    if (s == "phantom") return VolumeSource::phantom;
    if (s == "ingested") return VolumeSource::ingested;
    if (s == "synthetic") return VolumeSource::synthetic;
    throw std::invalid_argument("unknown volume source '" + s + "'");
}

using Index3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

inline std::string index3_str(const Index3& s) {
    return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + ")";
}

inline std::string spacing3_str(const Spacing3& s) {
    auto f = [](double v) {
        std::string t = std::to_string(v);
        t.erase(t.find_last_not_of('0') + 1);
        if (t.back() == '.') t.pop_back();
        return t;
    };
    return "(" + f(s[0]) + "," + f(s[1]) + "," + f(s[2]) + ")";
}

// 3D scalar grid, data laid out [D, H, W] with W fastest.
struct Volume {
    Tensor<float> data;
    Spacing3 spacing{1.0, 1.0, 1.0};
    VolumeSource source = VolumeSource::phantom;

    Volume() = default;
    Volume(Index3 shape, Spacing3 sp, VolumeSource src = VolumeSource::phantom)
        : data(Shape{shape[0], shape[1], shape[2]}), spacing(sp), source(src) {}

    Index3 shape() const { return {data.dim(0), data.dim(1), data.dim(2)}; }
    std::size_t numel() const { return data.numel(); }
    double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

    float& at(int d, int h, int w) {
        return data.data[(static_cast<std::size_t>(d) * data.dim(1) + h) * data.dim(2) + w];
    }
    float at(int d, int h, int w) const {
        return data.data[(static_cast<std::size_t>(d) * data.dim(1) + h) * data.dim(2) + w];
    }

    void validate() const {
        if (data.ndim() != 3) throw std::invalid_argument("volume must be 3D, got " + shape_str(data.shape));
        for (int i = 0; i < 3; ++i) {
            if (data.dim(i) <= 0) throw std::invalid_argument("volume shape components must be positive");
            if (!(spacing[i] > 0) || !std::isfinite(spacing[i]))
                throw std::invalid_argument("volume spacing must be positive and finite");
        }
        if (!data.all_finite()) throw std::invalid_argument("volume contains non-finite voxels");
    }
};

// Packs volumes into an [N, 1, D, H, W] network batch.
inline Tensor<float> stack_volumes(const std::vector<const Volume*>& vols) {
    if (vols.empty()) throw std::invalid_argument("stack_volumes: empty batch");
    const Index3 s = vols.front()->shape();
    Tensor<float> out({static_cast<int>(vols.size()), 1, s[0], s[1], s[2]});
    const std::size_t n = vols.front()->numel();
    for (std::size_t i = 0; i < vols.size(); ++i) {
        if (vols[i]->shape() != s) throw std::invalid_argument("stack_volumes: mixed shapes in batch");
        std::copy(vols[i]->data.data.begin(), vols[i]->data.data.end(), out.data.begin() + i * n);
    }
    return out;
}

inline double psnr(const Volume& ref, const Volume& test, double peak = 1.0) {
    if (ref.shape() != test.shape()) throw std::invalid_argument("psnr: shape mismatch");
    double se = 0;
    for (std::size_t i = 0; i < ref.numel(); ++i) {
        const double d = double(ref.data.data[i]) - test.data.data[i];
        se += d * d;
    }
    const double mse = se / ref.numel();
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

}  // namespace bldm

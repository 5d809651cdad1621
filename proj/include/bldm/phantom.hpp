#pragma once

// Procedural head phantoms with analytically known ventricle and brain
// volumes, covariate min-max normalisation, and the threshold/connected-
// component volumetry used to measure phantoms and syntheses alike.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

#include "bldm/rng.hpp"
#include "bldm/volume.hpp"

namespace bldm {

struct Covariates {
    double age = 63.0;                  // years
    double sex = 0.0;                   // 0 female, 1 male
    double ventricular_volume = 30000;  // mm^3
    double brain_volume_norm = 1.45e6;  // mm^3, normalised for head size
};

struct Range {
    double min = 0.0;
    double max = 1.0;
};

struct CovariateBounds {
    Range age{44.0, 82.0};
    Range ventricular{6995.68, 171375.0};
    Range brain{1144240.0, 1793910.0};

    void validate() const {
        auto check = [](const Range& r, const char* name) {
            if (!std::isfinite(r.min) || !std::isfinite(r.max) || !(r.min < r.max))
                throw std::invalid_argument(std::string("covariate bounds for ") + name + " need finite min < max");
        };
        check(age, "age");
        check(ventricular, "ventricular_volume");
        check(brain, "brain_volume_norm");
    }
};

// Normalised conditioning vector: (age, sex, ventricular, brain). Values
// outside [0, 1] are legal and mean extrapolation.
using Conditioning = std::array<double, 4>;

namespace cond {
constexpr int age = 0;
constexpr int sex = 1;
constexpr int ventricular = 2;
constexpr int brain = 3;
}  // namespace cond

inline double minmax(double v, const Range& r) { return (v - r.min) / (r.max - r.min); }
inline double unminmax(double v, const Range& r) { return r.min + v * (r.max - r.min); }

// Sex passes through unchanged as {0, 1}.
inline Conditioning normalize_covariates(const Covariates& c, const CovariateBounds& b) {
    b.validate();
    const double raw[4] = {c.age, c.sex, c.ventricular_volume, c.brain_volume_norm};
    const char* names[4] = {"age", "sex", "ventricular_volume", "brain_volume_norm"};
    for (int i = 0; i < 4; ++i)
        if (!std::isfinite(raw[i]))
            throw std::invalid_argument(std::string("covariate ") + names[i] + " is not finite");
    return {minmax(c.age, b.age), c.sex, minmax(c.ventricular_volume, b.ventricular),
            minmax(c.brain_volume_norm, b.brain)};
}

inline Covariates denormalize_covariates(const Conditioning& n, const CovariateBounds& b) {
    b.validate();
    for (double v : n)
        if (!std::isfinite(v)) throw std::invalid_argument("normalised conditioning is not finite");
    return {unminmax(n[cond::age], b.age), n[cond::sex], unminmax(n[cond::ventricular], b.ventricular),
            unminmax(n[cond::brain], b.brain)};
}

struct PhantomSpec {
    Covariates covariates;
    std::uint64_t geometry_seed = 0;
    double noise_level = 0.01;
};

// Class intensities and head geometry. Ellipsoid semi-axes are expressed as
// fractions of the field-of-view half extents.
struct PhantomStyle {
    double background = 0.0;
    double skull = 0.3;
    double csf = 0.1;  // ventricles and extra-cerebral fluid
    double tissue = 0.7;
    double age_contrast = 0.12;   // tissue brightness drop from youngest to oldest
    double texture_base = 0.02;   // cortical texture amplitude at normalised age 0
    double texture_age = 0.05;    // additional amplitude at normalised age 1
    double texture_wavelength_mm = 36.0;
    double head_outer = 0.98;
    double skull_inner = 0.94;
    double shape_jitter = 0.04;      // per-axis, volume preserving
    double ventricle_jitter = 0.08;  // per-axis, volume preserving
    Spacing3 ventricle_aspect{0.7, 1.45, 0.75};
    CovariateBounds bounds;
};

namespace detail {

struct Ellipsoid {
    Spacing3 semi{0, 0, 0};  // mm

    double volume() const { return 4.0 / 3.0 * std::numbers::pi * semi[0] * semi[1] * semi[2]; }

    // Normalised radius sqrt(sum (p_i / a_i)^2).
    double radius(const Spacing3& p) const {
        double q = 0;
        for (int i = 0; i < 3; ++i) q += (p[i] / semi[i]) * (p[i] / semi[i]);
        return std::sqrt(q);
    }

    // Linear ramp in the first-order signed distance, one cell-extent wide
    // along the normal.
    double ramp(const Spacing3& p, const Spacing3& h) const {
        const double r = radius(p);
        if (r < 1e-12) return 1.0;
        Spacing3 grad;
        double gnorm = 0;
        for (int i = 0; i < 3; ++i) {
            grad[i] = p[i] / (semi[i] * semi[i] * r);
            gnorm += grad[i] * grad[i];
        }
        gnorm = std::sqrt(gnorm);
        const double dist = (r - 1.0) / gnorm;
        double width = 0;
        for (int i = 0; i < 3; ++i) width += std::abs(grad[i] / gnorm) * h[i];
        return std::clamp(0.5 - dist / width, 0.0, 1.0);
    }

    // Partial-volume occupancy of the voxel centred at p. Voxels near the
    // surface are supersampled 4x per axis with a sub-cell ramp.
    double occupancy(const Spacing3& p, const Spacing3& h) const {
        if (semi[0] <= 0 || semi[1] <= 0 || semi[2] <= 0) return 0.0;
        const double coarse = ramp(p, h);
        if (coarse <= 0.0 || coarse >= 1.0) {
            // A cell this far from the surface cannot be partially covered.
            const double r = radius(p);
            if (std::abs(r - 1.0) * std::min({semi[0], semi[1], semi[2]}) > h[0] + h[1] + h[2]) return coarse;
        }
        constexpr int k = 4;
        const Spacing3 sub{h[0] / k, h[1] / k, h[2] / k};
        double acc = 0;
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b)
                for (int c = 0; c < k; ++c) {
                    const Spacing3 q{p[0] + (a + 0.5 - 0.5 * k) * sub[0], p[1] + (b + 0.5 - 0.5 * k) * sub[1],
                                     p[2] + (c + 0.5 - 0.5 * k) * sub[2]};
                    acc += ramp(q, sub);
                }
        return acc / (k * k * k);
    }
};

// Three factors with product 1, each within [1 - j, 1 + j] before renormalising.
inline Spacing3 volume_preserving_jitter(Rng& rng, double j) {
    Spacing3 f;
    for (auto& v : f) v = 1.0 + j * (2.0 * rng.uniform() - 1.0);
    const double g = std::cbrt(f[0] * f[1] * f[2]);
    for (auto& v : f) v /= g;
    return f;
}

inline Ellipsoid scaled_to_volume(const Spacing3& shape_axes, double volume) {
    Ellipsoid e;
    if (volume <= 0) return e;
    const double unit = 4.0 / 3.0 * std::numbers::pi * shape_axes[0] * shape_axes[1] * shape_axes[2];
    const double k = std::cbrt(volume / unit);
    for (int i = 0; i < 3; ++i) e.semi[i] = k * shape_axes[i];
    return e;
}

inline Spacing3 half_extent(const Index3& shape, const Spacing3& spacing) {
    return {0.5 * shape[0] * spacing[0], 0.5 * shape[1] * spacing[1], 0.5 * shape[2] * spacing[2]};
}

inline Spacing3 voxel_centre(int d, int h, int w, const Index3& shape, const Spacing3& sp) {
    return {(d + 0.5 - 0.5 * shape[0]) * sp[0], (h + 0.5 - 0.5 * shape[1]) * sp[1], (w + 0.5 - 0.5 * shape[2]) * sp[2]};
}

}  // namespace detail

struct PhantomGeometry {
    detail::Ellipsoid head, skull_inner, brain, ventricle;
};

inline PhantomGeometry phantom_geometry(const PhantomSpec& spec, const Index3& shape, const Spacing3& spacing,
                                        const PhantomStyle& style = {}) {
    const auto& c = spec.covariates;
    if (!(c.ventricular_volume >= 0) || !std::isfinite(c.ventricular_volume))
        throw std::invalid_argument("phantom: ventricular volume must be finite and non-negative");
    if (!(c.brain_volume_norm > 0) || !std::isfinite(c.brain_volume_norm))
        throw std::invalid_argument("phantom: brain volume must be finite and positive");
    const Spacing3 half = detail::half_extent(shape, spacing);
    Rng rng(derive_seed(spec.geometry_seed, "geometry"));
    PhantomGeometry g;
    for (int i = 0; i < 3; ++i) {
        g.head.semi[i] = style.head_outer * half[i];
        g.skull_inner.semi[i] = style.skull_inner * half[i];
    }
    const Spacing3 bj = detail::volume_preserving_jitter(rng, style.shape_jitter);
    g.brain = detail::scaled_to_volume({half[0] * bj[0], half[1] * bj[1], half[2] * bj[2]}, c.brain_volume_norm);
    const Spacing3 vj = detail::volume_preserving_jitter(rng, style.ventricle_jitter);
    g.ventricle = detail::scaled_to_volume(
        {style.ventricle_aspect[0] * vj[0], style.ventricle_aspect[1] * vj[1], style.ventricle_aspect[2] * vj[2]},
        c.ventricular_volume);
    for (int i = 0; i < 3; ++i) {
        if (g.brain.semi[i] > g.skull_inner.semi[i] - spacing[i])
            throw std::invalid_argument("phantom: brain volume " + std::to_string(c.brain_volume_norm) +
                                        " mm^3 does not fit inside the skull for shape " + index3_str(shape) +
                                        " at spacing " + spacing3_str(spacing));
        if (g.ventricle.semi[i] > g.brain.semi[i] - spacing[i])
            throw std::invalid_argument("phantom: ventricular cavity of " + std::to_string(c.ventricular_volume) +
                                        " mm^3 is larger than the brain can hold");
    }
    return g;
}

// Renders a head phantom: skull shell, extra-cerebral fluid, brain tissue with
// age/sex-dependent brightness and cortical texture, and a central ventricle
// cavity. Deterministic in (spec, shape, spacing).
inline Volume generate_phantom(const PhantomSpec& spec, const Index3& shape, const Spacing3& spacing,
                               const PhantomStyle& style = {}) {
    for (int i = 0; i < 3; ++i)
        if (shape[i] <= 0 || !(spacing[i] > 0)) throw std::invalid_argument("phantom: shape and spacing must be positive");
    if (!(spec.noise_level >= 0)) throw std::invalid_argument("phantom: noise level must be >= 0");
    const PhantomGeometry g = phantom_geometry(spec, shape, spacing, style);
    const auto& c = spec.covariates;
    const double age_n = minmax(c.age, style.bounds.age);
    const double tissue = style.tissue + style.age_contrast * (0.5 - age_n);
    const double amp = style.texture_base + style.texture_age * std::clamp(age_n, 0.0, 1.0);
    const double phase = c.sex >= 0.5 ? 0.5 * std::numbers::pi : 0.0;
    const double k = 2.0 * std::numbers::pi / style.texture_wavelength_mm;

    Volume v(shape, spacing, VolumeSource::phantom);
    Rng noise(derive_seed(spec.geometry_seed, "noise"));
    for (int d = 0; d < shape[0]; ++d)
        for (int h = 0; h < shape[1]; ++h)
            for (int w = 0; w < shape[2]; ++w) {
                const Spacing3 p = detail::voxel_centre(d, h, w, shape, spacing);
                double val = style.background;
                val += (style.skull - val) * g.head.occupancy(p, spacing);
                val += (style.csf - val) * g.skull_inner.occupancy(p, spacing);
                const double fb = g.brain.occupancy(p, spacing);
                if (fb > 0) {
                    const double rho = g.brain.radius(p);
                    const double shell = std::clamp((rho - 0.65) / 0.2, 0.0, 1.0);
                    const double pattern =
                        0.5 + 0.5 * std::sin(k * p[0]) * std::sin(k * p[1]) * std::sin(k * p[2] + phase);
                    val += (tissue - amp * shell * pattern - val) * fb;
                }
                val += (style.csf - val) * g.ventricle.occupancy(p, spacing);
                if (spec.noise_level > 0) val += spec.noise_level * noise.normal();
                v.at(d, h, w) = static_cast<float>(val);
            }
    return v;
}

struct OracleVolumes {
    double ventricular = 0.0;  // mm^3
    double brain = 0.0;        // mm^3
    bool empty = false;        // no tissue or no cavity was segmented
};

namespace detail {

// 6-connected component labels of `mask`; returns the component count.
inline int label_components(const std::vector<char>& mask, const Index3& s, std::vector<int>& labels) {
    labels.assign(mask.size(), -1);
    int next = 0;
    std::deque<std::size_t> queue;
    const std::size_t HW = static_cast<std::size_t>(s[1]) * s[2];
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || labels[start] >= 0) continue;
        labels[start] = next;
        queue.push_back(start);
        while (!queue.empty()) {
            const std::size_t i = queue.front();
            queue.pop_front();
            const int d = static_cast<int>(i / HW), h = static_cast<int>((i / s[2]) % s[1]),
                      w = static_cast<int>(i % s[2]);
            const int nb[6][3] = {{d - 1, h, w}, {d + 1, h, w}, {d, h - 1, w}, {d, h + 1, w}, {d, h, w - 1}, {d, h, w + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= s[0] || q[1] < 0 || q[1] >= s[1] || q[2] < 0 || q[2] >= s[2]) continue;
                const std::size_t j = (static_cast<std::size_t>(q[0]) * s[1] + q[1]) * s[2] + q[2];
                if (mask[j] && labels[j] < 0) {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
        ++next;
    }
    return next;
}

// 26-neighbourhood dilation.
inline std::vector<char> dilate(const std::vector<char>& mask, const Index3& s) {
    std::vector<char> out(mask.size(), 0);
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) {
                if (!mask[(static_cast<std::size_t>(d) * s[1] + h) * s[2] + w]) continue;
                for (int a = std::max(d - 1, 0); a <= std::min(d + 1, s[0] - 1); ++a)
                    for (int b = std::max(h - 1, 0); b <= std::min(h + 1, s[1] - 1); ++b)
                        for (int e = std::max(w - 1, 0); e <= std::min(w + 1, s[2] - 1); ++e)
                            out[(static_cast<std::size_t>(a) * s[1] + b) * s[2] + e] = 1;
            }
    return out;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto mid = v.begin() + v.size() / 2;
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

}  // namespace detail

// Measures ventricle and brain volumes of a volume in phantom intensity
// convention. Tissue is thresholded midway between fluid and the median core
// tissue level; dark 6-connected components that do not touch the border and
// reach the central region are the ventricles. Partial-volume fractions are
// read off the intensities of the voxels bordering each segmentation.
inline OracleVolumes oracle_volumes(const Volume& v, const PhantomStyle& style = {}) {
    OracleVolumes out;
    const Index3 s = v.shape();
    const std::size_t n = v.numel();
    const auto& I = v.data.data;
    const double vox = v.voxel_volume();
    const double csf = style.csf;
    const double provisional = 0.5 * (csf + style.tissue);
    const std::size_t HW = static_cast<std::size_t>(s[1]) * s[2];
    auto idx = [&](int d, int h, int w) { return (static_cast<std::size_t>(d) * s[1] + h) * s[2] + w; };

    std::vector<char> tissue(n);
    for (std::size_t i = 0; i < n; ++i) tissue[i] = I[i] > provisional;
    std::vector<double> core;
    for (int d = 1; d + 1 < s[0]; ++d)
        for (int h = 1; h + 1 < s[1]; ++h)
            for (int w = 1; w + 1 < s[2]; ++w) {
                const std::size_t i = idx(d, h, w);
                if (tissue[i] && tissue[i - 1] && tissue[i + 1] && tissue[i - s[2]] && tissue[i + s[2]] &&
                    tissue[i - HW] && tissue[i + HW])
                    core.push_back(I[i]);
            }
    if (core.empty()) {
        out.empty = true;
        return out;
    }
    const double ref = detail::median(core);
    const double threshold = 0.5 * (csf + ref);
    const double span = ref - csf;
    auto fraction = [&](std::size_t i) { return std::clamp((double(I[i]) - csf) / span, -0.5, 1.5); };

    std::vector<char> dark(n);
    for (std::size_t i = 0; i < n; ++i) dark[i] = I[i] <= threshold;
    std::vector<int> labels;
    const int count = detail::label_components(dark, s, labels);
    std::vector<char> touches_border(count, 0), central(count, 0);
    const Spacing3 half = detail::half_extent(s, v.spacing);
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) {
                const int l = labels[idx(d, h, w)];
                if (l < 0) continue;
                if (d == 0 || h == 0 || w == 0 || d == s[0] - 1 || h == s[1] - 1 || w == s[2] - 1) touches_border[l] = 1;
                const Spacing3 p = detail::voxel_centre(d, h, w, s, v.spacing);
                double r2 = 0;
                for (int k = 0; k < 3; ++k) r2 += (p[k] / half[k]) * (p[k] / half[k]);
                if (r2 < 0.25) central[l] = 1;
            }

    std::vector<char> exterior(n, 0), cavity(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const int l = labels[i];
        if (l < 0) continue;
        if (touches_border[l]) exterior[i] = 1;
        else if (central[l]) cavity[i] = 1;
    }

    // Brain: everything not connected to the outside, with the outer band
    // weighted by tissue fraction.
    const auto inside = [&] {
        std::vector<char> m(n);
        for (std::size_t i = 0; i < n; ++i) m[i] = !exterior[i];
        return m;
    }();
    const auto inside_grown = detail::dilate(inside, s);
    std::vector<char> exterior_grown = detail::dilate(exterior, s);
    double brain = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (inside[i] && !exterior_grown[i]) brain += 1.0;
        else if (inside_grown[i] && exterior_grown[i] && !cavity[i]) brain += std::clamp(fraction(i), 0.0, 1.0);
    }
    out.brain = brain * vox;

    bool any_cavity = false;
    for (char c : cavity) any_cavity |= c != 0;
    if (!any_cavity) {
        out.empty = true;
        return out;
    }
    // Local tissue level from the ring just outside the cavity band.
    const auto band = detail::dilate(cavity, s);
    const auto ring = detail::dilate(band, s);
    std::vector<double> ring_vals;
    for (std::size_t i = 0; i < n; ++i)
        if (ring[i] && !band[i] && !exterior[i]) ring_vals.push_back(I[i]);
    const double local = ring_vals.empty() ? ref : detail::median(ring_vals);
    const double local_span = local - csf;
    double vent = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (band[i] && !exterior[i]) vent += std::clamp((local - double(I[i])) / local_span, -0.5, 1.5);
    out.ventricular = std::max(vent, 0.0) * vox;
    return out;
}

}  // namespace bldm

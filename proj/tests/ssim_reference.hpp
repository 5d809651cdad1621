#pragma once

// Literal per-definition MS-SSIM and 4-G-R-SSIM used as test oracles:
// explicit 3D / 2D window sums, two-pass moments, no separable filtering and
// nothing shared with the library implementation.

#include <algorithm>
#include <cmath>
#include <vector>

#include "bldm/volume.hpp"

namespace ssim_ref {

using bldm::Index3;
using bldm::Volume;

using Arr3 = std::vector<std::vector<std::vector<double>>>;

inline Arr3 to_arr(const Volume& v) {
    const Index3 s = v.shape();
    Arr3 a(s[0], std::vector<std::vector<double>>(s[1], std::vector<double>(s[2])));
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) a[d][h][w] = v.at(d, h, w);
    return a;
}

inline Arr3 downsample(const Arr3& a) {
    const int D = a.size() / 2, H = a[0].size() / 2, W = a[0][0].size() / 2;
    Arr3 o(D, std::vector<std::vector<double>>(H, std::vector<double>(W)));
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double s = 0;
                for (int i = 0; i < 8; ++i) s += a[2 * d + (i >> 2)][2 * h + ((i >> 1) & 1)][2 * w + (i & 1)];
                o[d][h][w] = s / 8;
            }
    return o;
}

inline std::vector<double> gauss1d(int k) {
    std::vector<double> g(k);
    double s = 0;
    for (int i = 0; i < k; ++i) {
        const double x = i - (k - 1) / 2.0;
        g[i] = std::exp(-x * x / 4.5);  // 2 * 1.5^2
        s += g[i];
    }
    for (auto& x : g) x /= s;
    return g;
}

// Mean luminance and contrast-structure terms of one scale.
inline std::pair<double, double> ssim_terms(const Arr3& x, const Arr3& y) {
    const double c1 = 1e-4, c2 = 9e-4;
    const int D = x.size(), H = x[0].size(), W = x[0][0].size();
    int k = std::min({11, D, H, W});
    if (k % 2 == 0) --k;
    const auto g = gauss1d(k);
    double lsum = 0, cssum = 0, lcssum = 0;
    int n = 0;
    for (int d = 0; d + k <= D; ++d)
        for (int h = 0; h + k <= H; ++h)
            for (int w = 0; w + k <= W; ++w) {
                double mx = 0, my = 0;
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b)
                        for (int c = 0; c < k; ++c) {
                            const double wt = g[a] * g[b] * g[c];
                            mx += wt * x[d + a][h + b][w + c];
                            my += wt * y[d + a][h + b][w + c];
                        }
                double vx = 0, vy = 0, cxy = 0;
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b)
                        for (int c = 0; c < k; ++c) {
                            const double wt = g[a] * g[b] * g[c];
                            const double dx = x[d + a][h + b][w + c] - mx, dy = y[d + a][h + b][w + c] - my;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
                const double cs = (2 * cxy + c2) / (vx + vy + c2);
                lsum += l;
                cssum += cs;
                lcssum += l * cs;
                ++n;
            }
    return {cssum / n, lcssum / n};
}

inline double ref_ms_ssim(const Volume& vx, const Volume& vy, int scales) {
    const double wts[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double wsum = 0;
    for (int j = 0; j < scales; ++j) wsum += wts[j];
    Arr3 x = to_arr(vx), y = to_arr(vy);
    double out = 1;
    for (int j = 0; j < scales; ++j) {
        const auto [cs, lcs] = ssim_terms(x, y);
        const double e = wts[j] / wsum;
        if (j + 1 < scales) {
            out *= std::pow(std::max(cs, 0.0), e);
            x = downsample(x);
            y = downsample(y);
        } else {
            out *= std::pow(std::max(lcs, 0.0), e);
        }
    }
    return out;
}

using Arr2 = std::vector<std::vector<double>>;

inline Arr2 slice_of(const Volume& v, int axis) {
    const Index3 s = v.shape();
    Arr2 a;
    if (axis == 0)
        for (int h = 0; h < s[1]; ++h) {
            a.emplace_back();
            for (int w = 0; w < s[2]; ++w) a.back().push_back(v.at(s[0] / 2, h, w));
        }
    if (axis == 1)
        for (int d = 0; d < s[0]; ++d) {
            a.emplace_back();
            for (int w = 0; w < s[2]; ++w) a.back().push_back(v.at(d, s[1] / 2, w));
        }
    if (axis == 2)
        for (int d = 0; d < s[0]; ++d) {
            a.emplace_back();
            for (int h = 0; h < s[1]; ++h) a.back().push_back(v.at(d, h, s[2] / 2));
        }
    return a;
}

inline Arr2 sobel(const Arr2& x) {
    const int kx[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    const int A = x.size() - 2, B = x[0].size() - 2;
    Arr2 g(A, std::vector<double>(B));
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b) {
            double ga = 0, gb = 0;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    ga += kx[i][j] * x[a + i][b + j];
                    gb += kx[j][i] * x[a + i][b + j];
                }
            g[a][b] = std::hypot(ga, gb);
        }
    return g;
}

inline double ref_g4r_slice(const Arr2& x, const Arr2& y) {
    const double c1 = 1e-4, c2 = 9e-4;
    const Arr2 gx = sobel(x), gy = sobel(y);
    const int A = gx.size(), B = gx[0].size();
    int k = std::min({11, A, B});
    if (k % 2 == 0) --k;
    const auto g = gauss1d(k);
    double gmax = 0;
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b) gmax = std::max({gmax, gx[a][b], gy[a][b]});
    double sum[4] = {0, 0, 0, 0};
    int cnt[4] = {0, 0, 0, 0};
    for (int a = 0; a + k <= A; ++a)
        for (int b = 0; b + k <= B; ++b) {
            double mx = 0, my = 0, ugx = 0, ugy = 0;
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    const double wt = g[i] * g[j];
                    mx += wt * x[a + i + 1][b + j + 1];
                    my += wt * y[a + i + 1][b + j + 1];
                    ugx += wt * gx[a + i][b + j];
                    ugy += wt * gy[a + i][b + j];
                }
            double vx = 0, vy = 0, cxy = 0;
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    const double wt = g[i] * g[j];
                    const double dx = gx[a + i][b + j] - ugx, dy = gy[a + i][b + j] - ugy;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
            const double cs = (2 * cxy + c2) / (vx + vy + c2);
            const double px = gx[a + k / 2][b + k / 2], py = gy[a + k / 2][b + k / 2];
            const double t1 = 0.12 * gmax, t2 = 0.06 * gmax;
            int r = 3;
            if (px > t1 && py > t1) r = 0;
            else if ((px > t1 && py <= t1) || (py > t1 && px <= t1)) r = 1;
            else if (px < t2 && py < t2) r = 2;
            sum[r] += l * std::max(cs, 0.0);
            ++cnt[r];
        }
    double num = 0, den = 0;
    for (int r = 0; r < 4; ++r)
        if (cnt[r]) num += 0.25 * sum[r] / cnt[r], den += 0.25;
    return num / den;
}

inline double ref_g4r(const Volume& x, const Volume& y) {
    double s = 0;
    for (int axis = 0; axis < 3; ++axis) s += ref_g4r_slice(slice_of(x, axis), slice_of(y, axis));
    return s / 3;
}

}  // namespace ssim_ref

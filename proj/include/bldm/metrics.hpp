#pragma once

// Image-quality and diversity metrics: FID over pluggable feature
// extractors, 3D MS-SSIM, slice-wise 4-G-R-SSIM, and the pair protocol.

#include <Eigen/Dense>
#include <charconv>
#include <numeric>

#include "bldm/diffusion.hpp"

namespace bldm {

// ----------------------------------------------------------------------- FID

struct FeatureSet {
    Eigen::MatrixXd x;  // n x d
    std::string extractor;

    int n() const { return static_cast<int>(x.rows()); }
    int d() const { return static_cast<int>(x.cols()); }
};

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    bool shrunk = false;
};

inline Moments feature_moments(const FeatureSet& f, double shrinkage = 1e-6) {
    if (f.n() < 2) throw std::invalid_argument("fid: need at least 2 samples, got " + std::to_string(f.n()));
    if (!f.x.allFinite()) throw std::invalid_argument("fid: features are not finite");
    Moments m;
    m.mean = f.x.colwise().mean().transpose();
    const Eigen::MatrixXd c = f.x.rowwise() - m.mean.transpose();
    m.cov = (c.transpose() * c) / double(f.n() - 1);
    if (f.n() <= f.d()) {
        m.cov += shrinkage * Eigen::MatrixXd::Identity(f.d(), f.d());
        m.shrunk = true;
    }
    return m;
}

struct FidResult {
    double value = 0;
    bool clamped = false;  // a tiny negative roundoff result was set to 0
    bool shrunk = false;   // n <= d for at least one set; covariance shrinkage applied
};

namespace detail {
// Symmetric PSD square root with eigenvalues clamped at 0. Throws when an
// eigenvalue is clearly negative.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a, const char* what) {
    const Eigen::MatrixXd s = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-9 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    if (ev.minCoeff() < -tol) throw std::runtime_error(std::string("fid: ") + what + " is not positive semi-definite");
    return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the trace of the
// product root taken as Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}).
inline FidResult fid_from_moments(const Moments& a, const Moments& b) {
    if (a.mean.size() != b.mean.size())
        throw std::invalid_argument("fid: feature dimension mismatch (" + std::to_string(a.mean.size()) + " vs " +
                                    std::to_string(b.mean.size()) + ")");
    const Eigen::MatrixXd ra = detail::psd_sqrt(a.cov, "covariance of the first set");
    detail::psd_sqrt(b.cov, "covariance of the second set");
    const Eigen::MatrixXd m = ra * b.cov * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    const double tr_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    FidResult r;
    r.value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    r.shrunk = a.shrunk || b.shrunk;
    if (r.value < 0) {
        r.value = 0;
        r.clamped = true;
    }
    return r;
}

inline FidResult fid(const FeatureSet& a, const FeatureSet& b) {
    if (a.d() != b.d())
        throw std::invalid_argument("fid: feature dimension mismatch (" + std::to_string(a.d()) + " vs " +
                                    std::to_string(b.d()) + ")");
    return fid_from_moments(feature_moments(a), feature_moments(b));
}

// ------------------------------------------------------------------- MS-SSIM

namespace detail {

struct Grid {
    Index3 s{0, 0, 0};
    std::vector<double> v;

    Grid() = default;
    explicit Grid(Index3 shape, double fill = 0) : s(shape), v(std::size_t(shape[0]) * shape[1] * shape[2], fill) {}
    double& at(int d, int h, int w) { return v[(std::size_t(d) * s[1] + h) * s[2] + w]; }
    double at(int d, int h, int w) const { return v[(std::size_t(d) * s[1] + h) * s[2] + w]; }
};

inline Grid to_grid(const Volume& x) {
    Grid g(x.shape());
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = x.data.data[i];
    return g;
}

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(size);
    const double c = (size - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < size; ++i) sum += (w[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma)));
    for (auto& x : w) x /= sum;
    return w;
}

// Valid-mode separable filtering; axis a uses window win[a] (size 1 = identity).
inline Grid filter_valid(const Grid& g, const std::array<std::vector<double>, 3>& win) {
    Grid cur = g;
    for (int axis = 0; axis < 3; ++axis) {
        const int k = static_cast<int>(win[axis].size());
        if (k == 1) continue;
        Index3 os = cur.s;
        os[axis] -= k - 1;
        Grid out(os);
        for (int d = 0; d < os[0]; ++d)
            for (int h = 0; h < os[1]; ++h)
                for (int w = 0; w < os[2]; ++w) {
                    double acc = 0;
                    for (int j = 0; j < k; ++j) {
                        const int dd = d + (axis == 0 ? j : 0), hh = h + (axis == 1 ? j : 0), ww = w + (axis == 2 ? j : 0);
                        acc += win[axis][j] * cur.at(dd, hh, ww);
                    }
                    out.at(d, h, w) = acc;
                }
        cur = std::move(out);
    }
    return cur;
}

inline Grid avg_pool2(const Grid& g) {
    Index3 os{std::max(1, g.s[0] / 2), std::max(1, g.s[1] / 2), std::max(1, g.s[2] / 2)};
    Grid out(os);
    const int fd = g.s[0] > 1 ? 2 : 1, fh = g.s[1] > 1 ? 2 : 1, fw = g.s[2] > 1 ? 2 : 1;
    for (int d = 0; d < os[0]; ++d)
        for (int h = 0; h < os[1]; ++h)
            for (int w = 0; w < os[2]; ++w) {
                double acc = 0;
                for (int a = 0; a < fd; ++a)
                    for (int b = 0; b < fh; ++b)
                        for (int c = 0; c < fw; ++c) acc += g.at(fd * d + a, fh * h + b, fw * w + c);
                out.at(d, h, w) = acc / (fd * fh * fw);
            }
    return out;
}

// Per-position luminance and contrast-structure maps. Luminance comes from
// (lx, ly); contrast-structure from (sx, sy), which for plain SSIM are the
// same images.
struct SsimMaps {
    Grid l, cs;
};

inline SsimMaps ssim_maps(const Grid& lx, const Grid& ly, const Grid& sx, const Grid& sy,
                          const std::array<std::vector<double>, 3>& win, double c1, double c2) {
    auto sq = [](const Grid& a, const Grid& b) {
        Grid out(a.s);
        for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
        return out;
    };
    const Grid mx = filter_valid(lx, win), my = filter_valid(ly, win);
    const Grid ux = filter_valid(sx, win), uy = filter_valid(sy, win);
    const Grid xx = filter_valid(sq(sx, sx), win), yy = filter_valid(sq(sy, sy), win), xy = filter_valid(sq(sx, sy), win);
    SsimMaps m{Grid(mx.s), Grid(mx.s)};
    for (std::size_t i = 0; i < mx.v.size(); ++i) {
        const double vx = xx.v[i] - ux.v[i] * ux.v[i], vy = yy.v[i] - uy.v[i] * uy.v[i];
        const double cxy = xy.v[i] - ux.v[i] * uy.v[i];
        m.l.v[i] = (2 * mx.v[i] * my.v[i] + c1) / (mx.v[i] * mx.v[i] + my.v[i] * my.v[i] + c1);
        m.cs.v[i] = (2 * cxy + c2) / (vx + vy + c2);
    }
    return m;
}

inline double grid_mean(const Grid& g) { return std::accumulate(g.v.begin(), g.v.end(), 0.0) / double(g.v.size()); }

inline int window_for(int side) {
    int w = std::min(11, side);
    if (w % 2 == 0) --w;
    return std::max(w, 1);
}

}  // namespace detail

struct SsimParams {
    double sigma = 1.5;
    double k1 = 0.01, k2 = 0.03;
    double data_range = 1.0;
    int min_side = 3;  // coarsest scale must keep at least this many voxels per axis
};

inline const std::array<double, 5> ms_ssim_weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

inline int max_ms_ssim_scales(const Index3& shape, const SsimParams& p = {}) {
    int side = *std::min_element(shape.begin(), shape.end());
    int n = 0;
    while (n < 5 && side >= p.min_side) {
        ++n;
        side /= 2;
    }
    return n;
}

// Product-of-scales MS-SSIM with 3D Gaussian windows. scales = 0 selects the
// largest feasible count (at most 5); weights are the first `scales` standard
// weights renormalised to sum to 1. Negative cs/l means are clamped to 0.
inline double ms_ssim_pair(const Volume& x, const Volume& y, int scales = 0, const SsimParams& p = {}) {
    if (x.shape() != y.shape())
        throw std::invalid_argument("ms_ssim: shape mismatch " + index3_str(x.shape()) + " vs " + index3_str(y.shape()));
    const int feasible = max_ms_ssim_scales(x.shape(), p);
    if (scales == 0) scales = feasible;
    if (scales < 1 || scales > feasible)
        throw std::invalid_argument("ms_ssim: " + std::to_string(scales) + " scales requested for shape " +
                                    index3_str(x.shape()) + ", at most " + std::to_string(feasible) + " feasible");
    const double c1 = std::pow(p.k1 * p.data_range, 2), c2 = std::pow(p.k2 * p.data_range, 2);
    double wsum = 0;
    for (int j = 0; j < scales; ++j) wsum += ms_ssim_weights[j];
    detail::Grid gx = detail::to_grid(x), gy = detail::to_grid(y);
    double result = 1.0;
    for (int j = 0; j < scales; ++j) {
        const int k = detail::window_for(*std::min_element(gx.s.begin(), gx.s.end()));
        const auto w = detail::gaussian_window(k, p.sigma);
        const auto maps = detail::ssim_maps(gx, gy, gx, gy, {w, w, w}, c1, c2);
        const double weight = ms_ssim_weights[j] / wsum;
        const double cs = std::max(0.0, detail::grid_mean(maps.cs));
        if (j + 1 < scales) {
            result *= std::pow(cs, weight);
            gx = detail::avg_pool2(gx);
            gy = detail::avg_pool2(gy);
        } else {
            detail::Grid lcs(maps.l.s);
            for (std::size_t i = 0; i < lcs.v.size(); ++i) lcs.v[i] = maps.l.v[i] * maps.cs.v[i];
            result *= std::pow(std::max(0.0, detail::grid_mean(lcs)), weight);
        }
    }
    return result;
}

// --------------------------------------------------------------- 4-G-R-SSIM

struct G4rParams {
    double sigma = 1.5;
    double k1 = 0.01, k2 = 0.03;
    double data_range = 1.0;
    double th1 = 0.12, th2 = 0.06;               // edge / smooth thresholds, fractions of the max gradient
    std::array<double, 4> weights{0.25, 0.25, 0.25, 0.25};  // preserved edge, changed edge, smooth, texture
};

namespace detail {

// Sobel gradient magnitude of a 2D slice (stored as [1, A, B]); output is
// [1, A-2, B-2].
inline Grid sobel_magnitude(const Grid& g) {
    Grid out({1, g.s[1] - 2, g.s[2] - 2});
    for (int a = 1; a + 1 < g.s[1]; ++a)
        for (int b = 1; b + 1 < g.s[2]; ++b) {
            auto v = [&](int da, int db) { return g.at(0, a + da, b + db); };
            const double ga = (v(1, -1) + 2 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2 * v(-1, 0) + v(-1, 1));
            const double gb = (v(-1, 1) + 2 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2 * v(0, -1) + v(1, -1));
            out.at(0, a - 1, b - 1) = std::sqrt(ga * ga + gb * gb);
        }
    return out;
}

inline Grid crop(const Grid& g, int m) {
    Grid out({1, g.s[1] - 2 * m, g.s[2] - 2 * m});
    for (int a = 0; a < out.s[1]; ++a)
        for (int b = 0; b < out.s[2]; ++b) out.at(0, a, b) = g.at(0, a + m, b + m);
    return out;
}

inline Grid central_slice(const Volume& v, int axis) {
    const Index3 s = v.shape();
    const int mid = s[axis] / 2;
    const int A = axis == 0 ? s[1] : s[0];
    const int B = axis == 2 ? s[1] : s[2];
    Grid g({1, A, B});
    for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b) {
            const int d = axis == 0 ? mid : a;
            const int h = axis == 1 ? mid : (axis == 0 ? a : b);
            const int w = axis == 2 ? mid : b;
            g.at(0, a, b) = v.at(d, h, w);
        }
    return g;
}

// Four-region gradient SSIM of one 2D slice.
inline double g4r_ssim_slice(const Grid& x, const Grid& y, const G4rParams& p) {
    if (x.s[1] < 3 || x.s[2] < 3) throw std::invalid_argument("4-G-R-SSIM: slices must be at least 3x3");
    const Grid gx = sobel_magnitude(x), gy = sobel_magnitude(y);
    const Grid cx = crop(x, 1), cy = crop(y, 1);
    const int k = window_for(std::min(gx.s[1], gx.s[2]));
    const auto w = gaussian_window(k, p.sigma);
    const double c1 = std::pow(p.k1 * p.data_range, 2), c2 = std::pow(p.k2 * p.data_range, 2);
    const SsimMaps m = ssim_maps(cx, cy, gx, gy, {std::vector<double>{1.0}, w, w}, c1, c2);
    double gmax = 0;
    for (double v : gx.v) gmax = std::max(gmax, v);
    for (double v : gy.v) gmax = std::max(gmax, v);
    const double t1 = p.th1 * gmax, t2 = p.th2 * gmax;
    const int off = (k - 1) / 2;
    std::array<double, 4> sum{}, count{};
    for (int a = 0; a < m.l.s[1]; ++a)
        for (int b = 0; b < m.l.s[2]; ++b) {
            const double vx = gx.at(0, a + off, b + off), vy = gy.at(0, a + off, b + off);
            int r;
            if (vx > t1 && vy > t1) r = 0;
            else if ((vx > t1) != (vy > t1)) r = 1;
            else if (vx < t2 && vy < t2) r = 2;
            else r = 3;
            sum[r] += m.l.at(0, a, b) * std::max(0.0, m.cs.at(0, a, b));
            count[r] += 1;
        }
    double num = 0, den = 0;
    for (int r = 0; r < 4; ++r)
        if (count[r] > 0) {
            num += p.weights[r] * sum[r] / count[r];
            den += p.weights[r];
        }
    return den > 0 ? num / den : 1.0;
}

}  // namespace detail

// Mean of the per-slice score over the three central orthogonal slices.
inline double g4r_ssim_pair(const Volume& x, const Volume& y, const G4rParams& p = {}) {
    if (x.shape() != y.shape())
        throw std::invalid_argument("4-G-R-SSIM: shape mismatch " + index3_str(x.shape()) + " vs " +
                                    index3_str(y.shape()));
    double acc = 0;
    for (int axis = 0; axis < 3; ++axis)
        acc += detail::g4r_ssim_slice(detail::central_slice(x, axis), detail::central_slice(y, axis), p);
    return acc / 3.0;
}

// ------------------------------------------------------ diversity protocol

struct DiversityResult {
    int n_pairs = 0;
    std::uint64_t seed = 0;
    double ms_ssim = 0;
    double g4r_ssim = 0;
    std::vector<std::pair<int, int>> pairs;
    std::vector<double> ms_ssim_scores, g4r_ssim_scores;
};

// n_pairs disjoint random pairs from `n_available` samples fetched through
// `source(index)`; 2 * n_pairs samples are consumed.
inline DiversityResult diversity_protocol(const std::function<Volume(int)>& source, int n_available, int n_pairs,
                                          std::uint64_t seed) {
    if (n_pairs < 0) throw std::invalid_argument("diversity: n_pairs must be >= 0");
    if (2 * n_pairs > n_available)
        throw std::invalid_argument("diversity: " + std::to_string(n_pairs) + " pairs need " +
                                    std::to_string(2 * n_pairs) + " samples, only " + std::to_string(n_available) +
                                    " available");
    DiversityResult r;
    r.n_pairs = n_pairs;
    r.seed = seed;
    std::vector<int> idx(n_available);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (int i = 0; i < n_pairs; ++i) {
        const Volume a = source(idx[2 * i]), b = source(idx[2 * i + 1]);
        r.pairs.push_back({idx[2 * i], idx[2 * i + 1]});
        r.ms_ssim_scores.push_back(ms_ssim_pair(a, b));
        r.g4r_ssim_scores.push_back(g4r_ssim_pair(a, b));
    }
    if (n_pairs > 0) {
        r.ms_ssim = std::accumulate(r.ms_ssim_scores.begin(), r.ms_ssim_scores.end(), 0.0) / n_pairs;
        r.g4r_ssim = std::accumulate(r.g4r_ssim_scores.begin(), r.g4r_ssim_scores.end(), 0.0) / n_pairs;
    }
    return r;
}

inline DiversityResult diversity_protocol(const std::vector<Volume>& vols, int n_pairs, std::uint64_t seed) {
    return diversity_protocol([&](int i) { return vols[i]; }, static_cast<int>(vols.size()), n_pairs, seed);
}

// -------------------------------------------------------- feature extractors

// Small strided 3D CNN: `widths.size()` stride-2 conv stages, global average
// pool, linear head. Used for covariate classification (FID features) and
// brain-age regression.
template <class T>
struct VolumeCnn {
    std::vector<nn::Conv3d<T>> convs;
    nn::Linear<T> head;
    std::vector<int> widths;

    VolumeCnn(std::vector<int> w, int outputs, std::uint64_t seed) : widths(std::move(w)) {
        Rng rng(seed);
        int cin = 1;
        for (int c : widths) {
            convs.emplace_back(cin, c, 3, 2, rng, T(1.4));
            cin = c;
        }
        head = nn::Linear<T>(cin, outputs, rng);
    }
    VolumeCnn(const VolumeCnn&) = delete;

    ag::Var<T> features(const ag::Var<T>& x) const {
        auto h = x;
        for (const auto& c : convs) h = ag::leaky_relu(c(h));
        return ag::spatial_mean(h);
    }
    ag::Var<T> operator()(const ag::Var<T>& x) const { return head(features(x)); }

    nn::ParamList<T> params() {
        nn::ParamList<T> ps;
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect("conv" + std::to_string(i), ps);
        head.collect("head", ps);
        return ps;
    }
};

// Class label used by the feature classifier: (age above the midpoint) x sex.
inline int covariate_class(const Conditioning& c) { return (c[cond::age] > 0.5 ? 2 : 0) + (c[cond::sex] > 0.5 ? 1 : 0); }

struct FeatureClassifier {
    VolumeCnn<float> net;
    std::uint64_t seed;

    explicit FeatureClassifier(std::uint64_t s = 99) : net({8, 16, 16, 16}, 4, derive_seed(s, "classifier-init")), seed(s) {}

    // Cross-entropy training with Adam; returns final-epoch mean loss.
    double train(const std::vector<Volume>& vols, const std::vector<Conditioning>& cond, int steps, int batch = 8,
                 double lr = 2e-3) {
        if (vols.empty()) throw std::invalid_argument("classifier: no training volumes");
        nn::Adam<float> opt(net.params(), {lr, 0.9, 0.999, 1e-8, 1.0});
        double last = 0;
        for (int s = 0; s < steps; ++s) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
            std::vector<const Volume*> b;
            std::vector<int> labels;
            for (int i = 0; i < batch; ++i) {
                const int k = rng.uniform_int(0, static_cast<int>(vols.size()) - 1);
                b.push_back(&vols[k]);
                labels.push_back(covariate_class(cond[k]));
            }
            auto loss = ag::cross_entropy(net(ag::constant(stack_volumes(b))), labels);
            last = loss.item();
            opt.zero_grad();
            ag::backward(loss);
            opt.step();
        }
        return last;
    }

    std::vector<double> embed(const Volume& v) const {
        ag::NoGradGuard ng;
        const auto f = net.features(ag::constant(stack_volumes({&v}))).value();
        return {f.data.begin(), f.data.end()};
    }

    int predict(const Volume& v) const {
        ag::NoGradGuard ng;
        const auto z = net(ag::constant(stack_volumes({&v}))).value();
        return static_cast<int>(std::max_element(z.data.begin(), z.data.end()) - z.data.begin());
    }

    void save(const fs::path& stem) {
        fs::create_directories(stem.parent_path());
        nn::save_params(net.params(), stem.string() + ".bin");
        write_text_atomic(stem.string() + ".json", json{{"kind", "feature-classifier"}, {"seed", seed}}.dump(2) + "\n");
    }

    static std::unique_ptr<FeatureClassifier> load(const fs::path& stem) {
        if (!fs::exists(stem.string() + ".bin"))
            throw MissingArtifact("evaluate", "feature classifier " + stem.string() + ".bin not found");
        const json j = read_json(stem.string() + ".json");
        auto c = std::make_unique<FeatureClassifier>(j.at("seed").get<std::uint64_t>());
        auto ps = c->net.params();
        nn::load_params(ps, stem.string() + ".bin");
        return c;
    }
};

struct ExtractorSpec {
    std::string id = "random-projection";
    int dim = 8;
    std::uint64_t seed = 17;
    const FeatureClassifier* classifier = nullptr;  // required for "trained-classifier"
};

inline std::string extractor_label(const ExtractorSpec& e) {
    if (e.id == "random-projection") return e.id + "/d" + std::to_string(e.dim) + "/seed" + std::to_string(e.seed);
    return e.id;
}

inline FeatureSet extract_features(const std::vector<Volume>& vols, const ExtractorSpec& e) {
    FeatureSet f;
    f.extractor = extractor_label(e);
    if (e.id == "random-projection") {
        if (e.dim < 1) throw std::invalid_argument("random-projection: dim must be >= 1");
        f.x.resize(static_cast<Eigen::Index>(vols.size()), e.dim);
        if (vols.empty()) return f;
        const std::size_t n = vols.front().numel();
        Rng rng(derive_seed(e.seed, "projection"));
        std::vector<float> proj(n * e.dim);
        for (auto& p : proj) p = static_cast<float>(rng.normal() / std::sqrt(double(n)));
        for (std::size_t i = 0; i < vols.size(); ++i) {
            if (vols[i].numel() != n) throw std::invalid_argument("random-projection: volumes differ in size");
            for (int k = 0; k < e.dim; ++k) {
                double acc = 0;
                const float* row = proj.data() + k * n;
                for (std::size_t j = 0; j < n; ++j) acc += double(row[j]) * vols[i].data.data[j];
                f.x(static_cast<Eigen::Index>(i), k) = acc;
            }
        }
        return f;
    }
    if (e.id == "trained-classifier") {
        if (!e.classifier) throw std::invalid_argument("trained-classifier extractor needs a trained classifier");
        for (std::size_t i = 0; i < vols.size(); ++i) {
            const auto emb = e.classifier->embed(vols[i]);
            if (i == 0) f.x.resize(static_cast<Eigen::Index>(vols.size()), static_cast<Eigen::Index>(emb.size()));
            for (std::size_t k = 0; k < emb.size(); ++k) f.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = emb[k];
        }
        return f;
    }
    throw std::invalid_argument("unknown feature extractor '" + e.id +
                                "' (expected random-projection or trained-classifier)");
}

// ---------------------------------------------------------------- reporting

struct MetricsReport {
    std::string model;
    double fid = 0;
    bool fid_clamped = false;
    bool fid_shrunk = false;
    double ms_ssim = 0;
    double g4r_ssim = 0;
    int n_pairs = 0;
    std::string extractor;
    std::uint64_t seed = 0;
    std::optional<TimingStats> timing;
};

inline json to_json(const MetricsReport& r) {
    json j{{"model", r.model},     {"fid", r.fid},         {"fid_clamped", r.fid_clamped}, {"fid_shrunk", r.fid_shrunk},
           {"ms_ssim", r.ms_ssim}, {"g4r_ssim", r.g4r_ssim}, {"n_pairs", r.n_pairs},       {"extractor", r.extractor},
           {"seed", r.seed}};
    if (r.timing) j["timing"] = timing_json(*r.timing);
    return j;
}

inline MetricsReport metrics_report_from_json(const json& j) {
    MetricsReport r;
    r.model = j.at("model").get<std::string>();
    r.fid = j.at("fid").get<double>();
    r.fid_clamped = j.value("fid_clamped", false);
    r.fid_shrunk = j.value("fid_shrunk", false);
    r.ms_ssim = j.at("ms_ssim").get<double>();
    r.g4r_ssim = j.at("g4r_ssim").get<double>();
    r.n_pairs = j.at("n_pairs").get<int>();
    r.extractor = j.at("extractor").get<std::string>();
    r.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("timing")) {
        const auto& t = j.at("timing");
        r.timing = TimingStats{t.at("n").get<int>(), t.at("mean_s").get<double>(), t.at("sd_s").get<double>(),
                               t.at("hardware").get<std::string>()};
    }
    return r;
}

// Shortest decimal text that parses back to the same double.
inline std::string shortest(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string metrics_table(const std::vector<MetricsReport>& rows) {
    std::size_t w = 5;
    for (const auto& r : rows) w = std::max(w, r.model.size());
    auto pad = [](std::string s, std::size_t n) {
        s.resize(std::max(n, s.size()), ' ');
        return s;
    };
    std::string out = pad("model", w) + "  " + pad("FID", 24) + "  " + pad("MS-SSIM", 24) + "  4-G-R-SSIM\n";
    for (const auto& r : rows)
        out += pad(r.model, w) + "  " + pad(shortest(r.fid), 24) + "  " + pad(shortest(r.ms_ssim), 24) + "  " +
               shortest(r.g4r_ssim) + "\n";
    return out;
}

struct TableRow {
    std::string model;
    double fid, ms_ssim, g4r_ssim;
};

inline std::vector<TableRow> parse_metrics_table(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    if (line.rfind("model", 0) != 0) throw std::runtime_error("metrics table: missing header");
    std::vector<TableRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        TableRow r;
        if (!(ls >> r.model >> r.fid >> r.ms_ssim >> r.g4r_ssim))
            throw std::runtime_error("metrics table: malformed row '" + line + "'");
        rows.push_back(r);
    }
    return rows;
}

}  // namespace bldm

#include <gtest/gtest.h>

#include <set>

#include "bldm/metrics.hpp"
#include "ssim_reference.hpp"

using namespace bldm;
using ssim_ref::ref_g4r;
using ssim_ref::ref_ms_ssim;

namespace {

const Spacing3 sp{5, 7, 5};

Volume noise_volume(Index3 s, std::uint64_t seed, double lo = 0, double hi = 1) {
    Volume v(s, sp);
    Rng rng(seed);
    for (auto& x : v.data.data) x = static_cast<float>(lo + (hi - lo) * rng.uniform());
    return v;
}

Volume constant_volume(Index3 s, float c) {
    Volume v(s, sp);
    v.data.fill(c);
    return v;
}

Volume plus_noise(const Volume& x, double amp, std::uint64_t seed, double centre = 0) {
    Volume y = x;
    Rng rng(seed);
    for (auto& v : y.data.data) v += static_cast<float>(amp * (rng.uniform() - centre));
    return y;
}

// Bright cube on a dark background; blurred copy by a 3x3x3 box filter.
Volume edge_volume(Index3 s) {
    Volume v(s, sp);
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) {
                const bool in = d >= s[0] / 4 && d < 3 * s[0] / 4 && h >= s[1] / 4 && h < 3 * s[1] / 4 &&
                                w >= s[2] / 3 && w < 3 * s[2] / 4;
                v.at(d, h, w) = in ? 0.8f : 0.1f;
            }
    return v;
}

Volume box_blur(const Volume& x) {
    const Index3 s = x.shape();
    Volume y(s, sp);
    for (int d = 0; d < s[0]; ++d)
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w) {
                double acc = 0;
                int n = 0;
                for (int a = -1; a <= 1; ++a)
                    for (int b = -1; b <= 1; ++b)
                        for (int c = -1; c <= 1; ++c) {
                            const int dd = d + a, hh = h + b, ww = w + c;
                            if (dd < 0 || hh < 0 || ww < 0 || dd >= s[0] || hh >= s[1] || ww >= s[2]) continue;
                            acc += x.at(dd, hh, ww);
                            ++n;
                        }
                y.at(d, h, w) = static_cast<float>(acc / n);
            }
    return y;
}

FeatureSet gaussian_features(int n, int d, const Eigen::VectorXd& mu, std::uint64_t seed) {
    FeatureSet f;
    f.x.resize(n, d);
    Rng rng(seed);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k) f.x(i, k) = mu(k) + rng.normal();
    return f;
}

}  // namespace

// ----------------------------------------------------------------------- FID

TEST(Fid, ConstructedMomentsMatchClosedForm) {
    // 2x2 PSD: Tr((A B)^{1/2}) = sqrt(tr(AB) + 2 sqrt(det(AB))).
    Moments a, b;
    a.mean = Eigen::Vector2d(0.3, -1.0);
    b.mean = Eigen::Vector2d(1.1, 0.5);
    a.cov.resize(2, 2);
    b.cov.resize(2, 2);
    a.cov << 2.0, 0.6, 0.6, 1.0;
    b.cov << 0.5, -0.2, -0.2, 3.0;
    const Eigen::Matrix2d ab = a.cov * b.cov;
    const double tr_root = std::sqrt(ab.trace() + 2 * std::sqrt(ab.determinant()));
    const double expect = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * tr_root;
    EXPECT_NEAR(fid_from_moments(a, b).value, expect, 1e-10);
    EXPECT_NEAR(fid_from_moments(b, a).value, expect, 1e-10);
}

TEST(Fid, DiagonalCovariancesMatchClosedForm) {
    Moments a, b;
    const int d = 6;
    a.mean = Eigen::VectorXd::LinSpaced(d, 0, 1);
    b.mean = Eigen::VectorXd::Zero(d);
    a.cov = Eigen::MatrixXd::Zero(d, d);
    b.cov = Eigen::MatrixXd::Zero(d, d);
    double expect = a.mean.squaredNorm();
    for (int i = 0; i < d; ++i) {
        a.cov(i, i) = 0.5 + i;
        b.cov(i, i) = 2.0 / (1 + i);
        expect += std::pow(std::sqrt(a.cov(i, i)) - std::sqrt(b.cov(i, i)), 2);
    }
    EXPECT_NEAR(fid_from_moments(a, b).value, expect, 1e-10);
}

TEST(Fid, GaussianShiftApproachesSquaredNorm) {
    const int n = 100000, d = 8;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    const FeatureSet a = gaussian_features(n, d, mu, 1);
    mu(0) = 1.0;
    const FeatureSet b = gaussian_features(n, d, mu, 2);
    EXPECT_NEAR(fid(a, b).value, 1.0, 0.02);
}

TEST(Fid, IdentityAndSymmetry) {
    const FeatureSet a = gaussian_features(300, 5, Eigen::VectorXd::Zero(5), 3);
    const FeatureSet b = gaussian_features(300, 5, Eigen::VectorXd::Constant(5, 0.2), 4);
    const FidResult self = fid(a, a);
    EXPECT_GE(self.value, 0.0);
    EXPECT_NEAR(self.value, 0.0, 1e-6);
    EXPECT_NEAR(fid(a, b).value, fid(b, a).value, 1e-8);
    EXPECT_GT(fid(a, b).value, 0.1);
}

TEST(Fid, ShrinkageFlaggedWhenFewSamples) {
    const FeatureSet a = gaussian_features(5, 8, Eigen::VectorXd::Zero(8), 5);
    const FeatureSet b = gaussian_features(50, 8, Eigen::VectorXd::Zero(8), 6);
    EXPECT_TRUE(fid(a, b).shrunk);
    EXPECT_TRUE(std::isfinite(fid(a, b).value));
    EXPECT_FALSE(fid(b, b).shrunk);
}

TEST(Fid, Errors) {
    const FeatureSet a = gaussian_features(20, 4, Eigen::VectorXd::Zero(4), 7);
    const FeatureSet b = gaussian_features(20, 3, Eigen::VectorXd::Zero(3), 8);
    EXPECT_THROW(fid(a, b), std::invalid_argument);
    Moments m, neg;
    m.mean = neg.mean = Eigen::Vector2d::Zero();
    m.cov = Eigen::Matrix2d::Identity();
    neg.cov = Eigen::Matrix2d::Identity();
    neg.cov(1, 1) = -0.5;
    EXPECT_THROW(fid_from_moments(m, neg), std::runtime_error);
    EXPECT_THROW(fid_from_moments(neg, m), std::runtime_error);
    FeatureSet bad = a;
    bad.x(0, 0) = std::nan("");
    EXPECT_THROW(fid(bad, a), std::invalid_argument);
}

// ------------------------------------------------------------------- MS-SSIM

TEST(MsSsim, SelfSimilarityIsOne) {
    const Volume x = noise_volume({32, 32, 32}, 11);
    EXPECT_NEAR(ms_ssim_pair(x, x), 1.0, 1e-9);
}

TEST(MsSsim, ScaleCountForDeskShape) {
    EXPECT_EQ(max_ms_ssim_scales({32, 32, 32}), 4);
    EXPECT_EQ(max_ms_ssim_scales({160, 224, 160}), 5);
    EXPECT_EQ(max_ms_ssim_scales({2, 40, 40}), 0);
}

TEST(MsSsim, ConstantPlusNoiseMatchesReference) {
    const Volume x = constant_volume({24, 24, 24}, 0.5f);
    const Volume y = plus_noise(x, 0.5, 12);
    for (int scales : {1, 2, 3}) EXPECT_NEAR(ms_ssim_pair(x, y, scales), ref_ms_ssim(x, y, scales), 1e-6) << scales;
}

TEST(MsSsim, RandomisedSmallVolumesMatchReference) {
    Rng rng(13);
    for (int trial = 0; trial < 4; ++trial) {
        const Index3 s{rng.uniform_int(12, 20), rng.uniform_int(12, 20), rng.uniform_int(12, 20)};
        const Volume x = noise_volume(s, 100 + trial);
        const Volume y = plus_noise(x, 0.3, 200 + trial);
        const int scales = max_ms_ssim_scales(s);
        EXPECT_NEAR(ms_ssim_pair(x, y), ref_ms_ssim(x, y, scales), 1e-6) << index3_str(s);
    }
}

TEST(MsSsim, SymmetricAndShiftTolerant) {
    const Volume x = edge_volume({24, 24, 24});
    const Volume y = plus_noise(x, 0.2, 14, 0.5);
    const double xy = ms_ssim_pair(x, y);
    EXPECT_NEAR(xy, ms_ssim_pair(y, x), 1e-9);
    Volume xs = x, ys = y;
    for (auto& v : xs.data.data) v += 0.1f;
    for (auto& v : ys.data.data) v += 0.1f;
    // Zero-mean perturbation: only the luminance stabiliser sees the level.
    EXPECT_NEAR(ms_ssim_pair(xs, ys), xy, 0.01);
    EXPECT_GE(xy, 0.0);
    EXPECT_LE(xy, 1.0);
}

TEST(MsSsim, TooSmallRejectedWithFeasibleCount) {
    const Volume x = noise_volume({8, 8, 8}, 15);
    try {
        ms_ssim_pair(x, x, 5);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("at most 2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(ms_ssim_pair(x, noise_volume({8, 8, 9}, 16)), std::invalid_argument);
}

// ---------------------------------------------------------------- 4-G-R-SSIM

TEST(G4rSsim, SelfSimilarityIsOne) {
    const Volume x = edge_volume({32, 32, 32});
    EXPECT_NEAR(g4r_ssim_pair(x, x), 1.0, 1e-9);
}

TEST(G4rSsim, EdgeVersusBlurMatchesReference) {
    const Volume x = edge_volume({32, 32, 32});
    const Volume y = box_blur(x);
    const double v = g4r_ssim_pair(x, y);
    EXPECT_NEAR(v, ref_g4r(x, y), 1e-6);
    EXPECT_LT(v, 0.99);
}

TEST(G4rSsim, RandomisedSmallVolumesMatchReference) {
    Rng rng(17);
    for (int trial = 0; trial < 4; ++trial) {
        const Index3 s{rng.uniform_int(9, 20), rng.uniform_int(9, 20), rng.uniform_int(9, 20)};
        const Volume x = box_blur(noise_volume(s, 300 + trial));
        const Volume y = plus_noise(x, 0.2, 400 + trial);
        EXPECT_NEAR(g4r_ssim_pair(x, y), ref_g4r(x, y), 1e-6) << index3_str(s);
    }
}

TEST(G4rSsim, SymmetricBoundedAndShiftTolerant) {
    const Volume x = edge_volume({24, 24, 24});
    const Volume y = plus_noise(box_blur(x), 0.1, 18, 0.5);
    const double xy = g4r_ssim_pair(x, y);
    EXPECT_NEAR(xy, g4r_ssim_pair(y, x), 1e-9);
    EXPECT_GE(xy, 0.0);
    EXPECT_LE(xy, 1.0);
    Volume xs = x, ys = y;
    for (auto& v : xs.data.data) v += 0.1f;
    for (auto& v : ys.data.data) v += 0.1f;
    EXPECT_NEAR(g4r_ssim_pair(xs, ys), xy, 0.01);
}

TEST(G4rSsim, ShapeErrors) {
    EXPECT_THROW(g4r_ssim_pair(noise_volume({8, 8, 8}, 1), noise_volume({8, 8, 7}, 2)), std::invalid_argument);
    EXPECT_THROW(g4r_ssim_pair(noise_volume({2, 8, 8}, 1), noise_volume({2, 8, 8}, 2)), std::invalid_argument);
}

// --------------------------------------------------------- diversity protocol

TEST(Diversity, ThousandPairsConsumeTwoThousandSamples) {
    int calls = 0;
    auto source = [&](int i) {
        ++calls;
        return noise_volume({12, 12, 12}, 5000 + i);
    };
    const DiversityResult r = diversity_protocol(source, 2000, 1000, 21);
    EXPECT_EQ(calls, 2000);
    EXPECT_EQ(r.n_pairs, 1000);
    EXPECT_EQ(r.ms_ssim_scores.size(), 1000u);
    std::set<int> used;
    for (auto [a, b] : r.pairs) used.insert(a), used.insert(b);
    EXPECT_EQ(used.size(), 2000u);
}

TEST(Diversity, IdenticalSourceGivesOne) {
    const Volume x = edge_volume({16, 16, 16});
    const DiversityResult r = diversity_protocol([&](int) { return x; }, 20, 10, 22);
    EXPECT_NEAR(r.ms_ssim, 1.0, 1e-9);
    EXPECT_NEAR(r.g4r_ssim, 1.0, 1e-9);
}

TEST(Diversity, MeanIsMeanOfIndividualPairs) {
    std::vector<Volume> vols;
    for (int i = 0; i < 16; ++i) vols.push_back(plus_noise(edge_volume({16, 16, 16}), 0.3, 600 + i));
    const DiversityResult r = diversity_protocol(vols, 8, 23);
    double ms = 0, g4 = 0;
    for (auto [a, b] : r.pairs) {
        ms += ms_ssim_pair(vols[a], vols[b]);
        g4 += g4r_ssim_pair(vols[a], vols[b]);
    }
    EXPECT_NEAR(r.ms_ssim, ms / 8, 1e-12);
    EXPECT_NEAR(r.g4r_ssim, g4 / 8, 1e-12);
}

TEST(Diversity, SeedReproducibleAndInsufficientRejected) {
    std::vector<Volume> vols;
    for (int i = 0; i < 10; ++i) vols.push_back(noise_volume({12, 12, 12}, 700 + i));
    const auto a = diversity_protocol(vols, 5, 24), b = diversity_protocol(vols, 5, 24);
    EXPECT_EQ(a.pairs, b.pairs);
    EXPECT_EQ(a.ms_ssim, b.ms_ssim);
    EXPECT_EQ(a.seed, 24u);
    EXPECT_NE(diversity_protocol(vols, 5, 25).pairs, a.pairs);
    EXPECT_THROW(diversity_protocol(vols, 6, 24), std::invalid_argument);
}

// ---------------------------------------------------------------- extractors

TEST(Extractors, RandomProjectionDeterministicWithShape) {
    std::vector<Volume> vols;
    for (int i = 0; i < 7; ++i) vols.push_back(noise_volume({8, 8, 8}, 800 + i));
    const ExtractorSpec e{"random-projection", 8, 31, nullptr};
    const FeatureSet a = extract_features(vols, e), b = extract_features(vols, e);
    EXPECT_EQ(a.n(), 7);
    EXPECT_EQ(a.d(), 8);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.extractor, "random-projection/d8/seed31");
    EXPECT_NE(extract_features(vols, {"random-projection", 8, 32, nullptr}).x, a.x);
}

TEST(Extractors, UnknownIdRejected) {
    const std::vector<Volume> vols{noise_volume({4, 4, 4}, 1)};
    EXPECT_THROW(extract_features(vols, {"med3d", 8, 1, nullptr}), std::invalid_argument);
    EXPECT_THROW(extract_features(vols, {"trained-classifier", 8, 1, nullptr}), std::invalid_argument);
}

TEST(Extractors, TrainedClassifierOrdersHoldoutBeforeNoise) {
    const Index3 shape{32, 32, 32};
    const CovariateBounds bounds;
    auto cohort = [&](int n, std::uint64_t seed, std::vector<Conditioning>* cs) {
        std::vector<Volume> out;
        Rng rng(seed);
        for (int i = 0; i < n; ++i) {
            Conditioning c{rng.uniform(), rng.bernoulli(0.5) ? 1.0 : 0.0, 0.2 + 0.6 * rng.uniform(), 0.2 + 0.6 * rng.uniform()};
            PhantomSpec spec;
            spec.covariates = denormalize_covariates(c, bounds);
            spec.geometry_seed = rng.engine()();
            out.push_back(generate_phantom(spec, shape, sp));
            if (cs) cs->push_back(c);
        }
        return out;
    };
    std::vector<Conditioning> cs;
    const auto train = cohort(48, 41, &cs);
    const auto holdout = cohort(48, 42, nullptr);
    std::vector<Volume> noise;
    for (int i = 0; i < 48; ++i) noise.push_back(noise_volume(shape, 900 + i));
    FeatureClassifier clf(43);
    clf.train(train, cs, 150);
    const ExtractorSpec e{"trained-classifier", 16, 0, &clf};
    const FeatureSet ft = extract_features(train, e), fh = extract_features(holdout, e), fn = extract_features(noise, e);
    EXPECT_EQ(ft.d(), 16);
    EXPECT_LT(fid(ft, fh).value, fid(ft, fn).value);
}

// ----------------------------------------------------------------- reporting

TEST(Report, TableRoundTripsJsonValues) {
    MetricsReport a, b;
    a.model = "real";
    a.fid = 0.000512345678901;
    a.ms_ssim = 0.6536123456789;
    a.g4r_ssim = 0.39091;
    a.n_pairs = 50;
    a.extractor = "trained-classifier";
    b.model = "ldm";
    b.fid = 1.0 / 3.0;
    b.ms_ssim = 2.0 / 3.0;
    b.g4r_ssim = 0.1;
    b.n_pairs = 50;
    b.extractor = "trained-classifier";
    b.timing = TimingStats{4, 0.5, 0.01, "cpu"};
    const auto rows = parse_metrics_table(metrics_table({a, b}));
    ASSERT_EQ(rows.size(), 2u);
    for (const auto& [r, m] : {std::pair{rows[0], a}, std::pair{rows[1], b}}) {
        const MetricsReport j = metrics_report_from_json(json::parse(to_json(m).dump()));
        EXPECT_EQ(r.model, j.model);
        EXPECT_EQ(r.fid, j.fid);
        EXPECT_EQ(r.ms_ssim, j.ms_ssim);
        EXPECT_EQ(r.g4r_ssim, j.g4r_ssim);
        EXPECT_EQ(j.n_pairs, 50);
        EXPECT_EQ(j.extractor, "trained-classifier");
    }
    EXPECT_TRUE(metrics_report_from_json(to_json(b)).timing.has_value());
    const std::string header = metrics_table({}).substr(0, metrics_table({}).find('\n'));
    EXPECT_NE(header.find("FID"), std::string::npos);
    EXPECT_NE(header.find("MS-SSIM"), std::string::npos);
    EXPECT_NE(header.find("4-G-R-SSIM"), std::string::npos);
}

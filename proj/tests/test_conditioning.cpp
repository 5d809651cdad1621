#include <gtest/gtest.h>

#include <unistd.h>

#include "bldm/conditioning_eval.hpp"

using namespace bldm;

namespace {

VolumeContract desk_contract() {
    VolumeContract k;
    k.shape = {32, 32, 32};
    k.spacing = {5, 7, 5};
    return k;
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("bldm_conditioning_" + std::to_string(getpid()) + "_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<double> random_series(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

}  // namespace

// ------------------------------------------------------------------ pearson

TEST(Pearson, IdentityAndNegation) {
    const auto x = random_series(50, 1);
    std::vector<double> neg;
    for (double v : x) neg.push_back(-v);
    EXPECT_NEAR(pearson(x, x), 1.0, 1e-15);
    EXPECT_NEAR(pearson(x, neg), -1.0, 1e-15);
}

TEST(Pearson, MatchesCovarianceOverSigmaOracle) {
    for (std::uint64_t seed = 2; seed < 8; ++seed) {
        const auto x = random_series(37, seed), e = random_series(37, seed + 100);
        std::vector<double> y;
        for (int i = 0; i < 37; ++i) y.push_back(0.4 * x[i] + e[i]);
        long double mx = 0, my = 0;
        for (int i = 0; i < 37; ++i) mx += x[i], my += y[i];
        mx /= 37, my /= 37;
        long double cov = 0, vx = 0, vy = 0;
        for (int i = 0; i < 37; ++i) {
            cov += (x[i] - mx) * (y[i] - my) / 36;
            vx += (x[i] - mx) * (x[i] - mx) / 36;
            vy += (y[i] - my) * (y[i] - my) / 36;
        }
        EXPECT_NEAR(pearson(x, y), double(cov / std::sqrt(vx) / std::sqrt(vy)), 1e-12);
    }
}

TEST(Pearson, AffineInvariant) {
    const auto x = random_series(40, 9), y = random_series(40, 10);
    std::vector<double> xa, ya;
    for (double v : x) xa.push_back(3.5 * v - 12.0);
    for (double v : y) ya.push_back(0.01 * v + 7.0);
    EXPECT_NEAR(pearson(xa, ya), pearson(x, y), 1e-12);
}

TEST(Pearson, Errors) {
    const std::vector<double> c(10, 63.0), x = random_series(10, 11);
    try {
        pearson(c, x, "inputted age", "predicted age");
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("'inputted age' has zero variance"), std::string::npos) << e.what();
    }
    EXPECT_THROW(pearson(x, c), std::invalid_argument);
    EXPECT_THROW(pearson({1, 2}, {1, 2}), std::invalid_argument);
    EXPECT_THROW(pearson({1, 2, 3}, {1, 2}), std::invalid_argument);
}

TEST(CorrelationReport, LeastSquaresFitAndTable) {
    std::vector<double> x{1, 2, 3, 4, 5}, y;
    for (double v : x) y.push_back(2.5 * v - 1.0);
    const CorrelationReport r = correlation_report("q", x, y);
    EXPECT_EQ(r.n, 5);
    EXPECT_NEAR(r.r, 1.0, 1e-15);
    EXPECT_NEAR(r.slope, 2.5, 1e-12);
    EXPECT_NEAR(r.intercept, -1.0, 1e-12);
    ASSERT_EQ(r.table.size(), 5u);
    EXPECT_EQ(r.table[2], std::make_pair(3.0, 6.5));
    const json j = to_json(r);
    EXPECT_EQ(j.at("samples").size(), 5u);
    EXPECT_EQ(j.at("quantity"), "q");
}

// ------------------------------------------------------- volume conditioning

TEST(VolumeConditioning, OracleGeneratorIsNearPerfect) {
    const CovariateBounds b;
    const CorrelationReport r = eval_volume_conditioning(oracle_generator(b, desk_contract()), 200, b, 5);
    EXPECT_EQ(r.n, 200);
    EXPECT_GE(r.r, 0.999);
}

TEST(VolumeConditioning, SamplingFailureNamesIndex) {
    int calls = 0;
    VolumeGenerator bad = [&](const Conditioning&, std::uint64_t) -> Volume {
        if (++calls == 4) throw std::runtime_error("boom");
        return Volume({4, 4, 4}, {1, 1, 1});
    };
    try {
        eval_volume_conditioning(bad, 10, CovariateBounds{}, 1);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("sample 3 failed: boom"), std::string::npos) << e.what();
    }
}

TEST(VolumeConditioning, SweepIsSeededAndCoversUnitRange) {
    const auto a = sweep_conditionings(300, 7), b = sweep_conditionings(300, 7);
    EXPECT_EQ(a, b);
    double lo = 1, hi = 0;
    for (const auto& c : a) {
        lo = std::min(lo, c[cond::ventricular]);
        hi = std::max(hi, c[cond::ventricular]);
        EXPECT_TRUE(c[cond::sex] == 0.0 || c[cond::sex] == 1.0);
    }
    EXPECT_LT(lo, 0.05);
    EXPECT_GT(hi, 0.95);
}

// -------------------------------------------------------------- age regressor

TEST(AgeConditioning, ConstantAgeReportsZeroVariance) {
    const AgeRegressor reg;
    const VolumeGenerator gen = oracle_generator(CovariateBounds{}, desk_contract());
    std::vector<Volume> vols;
    for (int i = 0; i < 5; ++i) vols.push_back(gen({0.5, 0, 0.5, 0.5}, i));
    try {
        regressor_sanity(reg, vols, std::vector<double>(5, 63.0));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("inputted age_years' has zero variance"), std::string::npos) << e.what();
    }
}

TEST(AgeRegressor, TrainingReducesLossAndSaveLoadRoundTrips) {
    const CovariateBounds b;
    const VolumeGenerator gen = oracle_generator(b, desk_contract());
    std::vector<Volume> vols;
    std::vector<double> ages;
    Rng rng(12);
    for (int i = 0; i < 24; ++i) {
        const Conditioning c{rng.uniform(), rng.bernoulli(0.5) ? 1.0 : 0.0, 0.3, 0.5};
        vols.push_back(gen(c, 100 + i));
        ages.push_back(unminmax(c[cond::age], b.age));
    }
    AgeRegressor reg(b, 13);
    double before = 0;
    for (int i = 0; i < 24; ++i) before += std::abs(reg.predict_years(vols[i]) - ages[i]);
    reg.train(vols, ages, 120, 4);
    double after = 0;
    for (int i = 0; i < 24; ++i) after += std::abs(reg.predict_years(vols[i]) - ages[i]);
    EXPECT_LT(after, before);
    EXPECT_EQ(reg.steps_trained, 120);

    const fs::path dir = scratch("regressor");
    reg.save(dir / "age_regressor");
    const auto back = AgeRegressor::load(dir / "age_regressor");
    EXPECT_EQ(back->steps_trained, 120);
    EXPECT_EQ(back->predict_years(vols[0]), reg.predict_years(vols[0]));
    EXPECT_THROW(AgeRegressor::load(dir / "missing"), MissingArtifact);
    fs::remove_all(dir);
}

TEST(AgeRegressor, MismatchedTrainingInputsRejected) {
    AgeRegressor reg;
    EXPECT_THROW(reg.train({}, {}, 1), std::invalid_argument);
    EXPECT_THROW(reg.train({Volume({32, 32, 32}, {5, 7, 5})}, {60.0, 61.0}, 1), std::invalid_argument);
}

// -------------------------------------------------------------- extrapolation

TEST(Extrapolation, OracleGeneratorIsStrictlyIncreasing) {
    const CovariateBounds b;
    const auto r = extrapolation_sweep(oracle_generator(b, desk_contract()), {-0.5, 0.0, 0.5, 1.5, 1.9}, 3);
    ASSERT_EQ(r.rows.size(), 5u);
    EXPECT_LE(r.rows[0].ventricular_mm3, r.rows[1].ventricular_mm3);
    EXPECT_EQ(r.rows[0].ventricular_mm3, 0.0);
    const std::size_t seq[4] = {0, 2, 3, 4};  // -0.5, 0.5, 1.5, 1.9
    for (int i = 0; i < 3; ++i) EXPECT_LT(r.rows[seq[i]].ventricular_mm3, r.rows[seq[i + 1]].ventricular_mm3) << i;
}

TEST(Extrapolation, OtherCovariatesHeldAtHalf) {
    std::vector<Conditioning> seen;
    std::vector<std::uint64_t> seeds;
    VolumeGenerator spy = [&](const Conditioning& c, std::uint64_t s) {
        seen.push_back(c);
        seeds.push_back(s);
        return Volume({8, 8, 8}, {1, 1, 1});
    };
    extrapolation_sweep(spy, {-0.5, 1.9}, 44);
    ASSERT_EQ(seen.size(), 2u);
    for (const auto& c : seen) {
        EXPECT_EQ(c[cond::age], 0.5);
        EXPECT_EQ(c[cond::sex], 0.5);
        EXPECT_EQ(c[cond::brain], 0.5);
    }
    EXPECT_EQ(seen[0][cond::ventricular], -0.5);
    EXPECT_EQ(seen[1][cond::ventricular], 1.9);
    EXPECT_EQ(seeds[0], seeds[1]);
}

TEST(Extrapolation, EmptyValuesGiveEmptyTable) {
    const auto r = extrapolation_sweep(oracle_generator(CovariateBounds{}, desk_contract()), {}, 1);
    EXPECT_TRUE(r.rows.empty());
    EXPECT_TRUE(to_json(r).empty());
}

TEST(Extrapolation, DeterministicTableAndMontage) {
    const auto gen = oracle_generator(CovariateBounds{}, desk_contract());
    const auto a = extrapolation_sweep(gen, {0.2, 1.5}, 8), b = extrapolation_sweep(gen, {0.2, 1.5}, 8);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    const Image m = slice_montage(a.volumes, 2);
    EXPECT_EQ(m.width, 2 * (32 * 2 + 2));
    EXPECT_EQ(m.height, 32 * 2 + 32 * 2 + 2);
    const fs::path dir = scratch("montage");
    write_png(m, (dir / "m.png").string());
    write_png(scatter_plot(correlation_report("q", {1, 2, 3}, {1, 3, 2})), (dir / "s.png").string());
    std::ifstream f(dir / "m.png", std::ios::binary);
    char sig[8];
    f.read(sig, 8);
    EXPECT_EQ(std::string(sig + 1, 3), "PNG");
    EXPECT_GT(fs::file_size(dir / "s.png"), 100u);
    fs::remove_all(dir);
}

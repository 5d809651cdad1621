#include <gtest/gtest.h>

#include <unistd.h>

#include "bldm/dataset.hpp"
#include "bldm/phantom.hpp"

using namespace bldm;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("bldm_phantom_" + std::to_string(getpid()) + "_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

PhantomSpec spec_with(double vent, double brain = 1.45e6, std::uint64_t seed = 11, double noise = 0.01) {
    PhantomSpec s;
    s.covariates = {63.0, 0.0, vent, brain};
    s.geometry_seed = seed;
    s.noise_level = noise;
    return s;
}

const Index3 desk_shape{32, 32, 32};
const Spacing3 desk_spacing{5.0, 7.0, 5.0};

}  // namespace

TEST(Normalize, VentricularBoundsMapToUnitInterval) {
    CovariateBounds b;
    Covariates c;
    c.ventricular_volume = 6995.68;
    EXPECT_DOUBLE_EQ(normalize_covariates(c, b)[cond::ventricular], 0.0);
    c.ventricular_volume = 171375.0;
    EXPECT_DOUBLE_EQ(normalize_covariates(c, b)[cond::ventricular], 1.0);
    c.ventricular_volume = 89185.34;
    EXPECT_NEAR(normalize_covariates(c, b)[cond::ventricular], 0.5, 1e-12);
}

TEST(Normalize, SexPassesThrough) {
    CovariateBounds b;
    Covariates c;
    c.sex = 1.0;
    EXPECT_EQ(normalize_covariates(c, b)[cond::sex], 1.0);
    c.sex = 0.0;
    EXPECT_EQ(normalize_covariates(c, b)[cond::sex], 0.0);
}

TEST(Normalize, RoundTripWithinBounds) {
    CovariateBounds b;
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        Covariates c{b.age.min + rng.uniform() * (b.age.max - b.age.min), double(rng.bernoulli(0.5)),
                     b.ventricular.min + rng.uniform() * (b.ventricular.max - b.ventricular.min),
                     b.brain.min + rng.uniform() * (b.brain.max - b.brain.min)};
        const Conditioning n = normalize_covariates(c, b);
        for (double v : n) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        const Covariates r = denormalize_covariates(n, b);
        EXPECT_NEAR(r.age, c.age, 1e-9 * c.age);
        EXPECT_EQ(r.sex, c.sex);
        EXPECT_NEAR(r.ventricular_volume, c.ventricular_volume, 1e-9 * c.ventricular_volume);
        EXPECT_NEAR(r.brain_volume_norm, c.brain_volume_norm, 1e-9 * c.brain_volume_norm);
    }
}

TEST(Normalize, StrictlyMonotone) {
    CovariateBounds b;
    Covariates lo, hi;
    lo.age = 50, hi.age = 50.001;
    EXPECT_LT(normalize_covariates(lo, b)[cond::age], normalize_covariates(hi, b)[cond::age]);
}

TEST(Normalize, RejectsNonFinite) {
    CovariateBounds b;
    Covariates c;
    c.age = std::nan("");
    EXPECT_THROW(normalize_covariates(c, b), std::invalid_argument);
    c.age = 60;
    c.brain_volume_norm = std::numeric_limits<double>::infinity();
    try {
        normalize_covariates(c, b);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("brain_volume_norm"), std::string::npos);
    }
}

TEST(Normalize, BoundsNeedMinBelowMax) {
    CovariateBounds b;
    b.age = {80, 40};
    EXPECT_THROW(b.validate(), std::invalid_argument);
    EXPECT_THROW(normalize_covariates(Covariates{}, b), std::invalid_argument);
}

TEST(Phantom, DeterministicBytes) {
    const auto s = spec_with(40000);
    const Volume a = generate_phantom(s, desk_shape, desk_spacing);
    const Volume b = generate_phantom(s, desk_shape, desk_spacing);
    ASSERT_EQ(a.numel(), b.numel());
    EXPECT_EQ(0, std::memcmp(a.data.ptr(), b.data.ptr(), a.numel() * sizeof(float)));
}

TEST(Phantom, DifferentSeedsDiffer) {
    const Volume a = generate_phantom(spec_with(40000, 1.45e6, 1), desk_shape, desk_spacing);
    const Volume b = generate_phantom(spec_with(40000, 1.45e6, 2), desk_shape, desk_spacing);
    EXPECT_NE(0, std::memcmp(a.data.ptr(), b.data.ptr(), a.numel() * sizeof(float)));
}

TEST(Phantom, ZeroVentricleHasNoCavity) {
    const Volume v = generate_phantom(spec_with(0.0), desk_shape, desk_spacing);
    EXPECT_EQ(oracle_volumes(v).ventricular, 0.0);
}

TEST(Phantom, AllZeroVolumeMeasuresZero) {
    const Volume v(desk_shape, desk_spacing);
    const OracleVolumes o = oracle_volumes(v);
    EXPECT_EQ(o.ventricular, 0.0);
    EXPECT_EQ(o.brain, 0.0);
    EXPECT_TRUE(o.empty);
}

TEST(Phantom, EllipsoidVoxelCountMatchesAnalyticVolume) {
    // Brute-force indicator count on a 1 mm grid, and the renderer's
    // partial-volume occupancy sum, against (4/3) pi abc.
    const Spacing3 h{1, 1, 1};
    for (const Spacing3 semi : {Spacing3{10, 14, 8}, Spacing3{6, 6, 6}, Spacing3{12.5, 9.3, 7.1}}) {
        detail::Ellipsoid e;
        e.semi = semi;
        const double analytic = 4.0 / 3.0 * std::numbers::pi * semi[0] * semi[1] * semi[2];
        double count = 0, occ = 0;
        for (int d = -20; d < 20; ++d)
            for (int y = -20; y < 20; ++y)
                for (int x = -20; x < 20; ++x) {
                    const Spacing3 p{d + 0.5, y + 0.5, x + 0.5};
                    double q = 0;
                    for (int i = 0; i < 3; ++i) q += (p[i] / semi[i]) * (p[i] / semi[i]);
                    count += q <= 1.0;
                    occ += e.occupancy(p, h);
                }
        EXPECT_NEAR(count, analytic, 0.02 * analytic);
        EXPECT_NEAR(occ, analytic, 0.02 * analytic);
        EXPECT_NEAR(e.volume(), analytic, 1e-9 * analytic);
    }
}

TEST(Phantom, OracleRecoversVolumesWithinTwoPercent) {
    CovariateBounds b;
    Rng rng(77);
    for (int i = 0; i < 12; ++i) {
        const double vent = b.ventricular.min + rng.uniform() * (b.ventricular.max - b.ventricular.min);
        const double brain = b.brain.min + rng.uniform() * (b.brain.max - b.brain.min);
        PhantomSpec s = spec_with(vent, brain, 100 + i);
        s.covariates.age = 44 + 38 * rng.uniform();
        s.covariates.sex = rng.bernoulli(0.5);
        const OracleVolumes o = oracle_volumes(generate_phantom(s, desk_shape, desk_spacing));
        EXPECT_NEAR(o.ventricular, vent, 0.02 * vent) << "item " << i;
        EXPECT_NEAR(o.brain, brain, 0.02 * brain) << "item " << i;
    }
}

TEST(Phantom, OracleMonotoneInVentricularVolume) {
    double prev = -1;
    for (double v : {8000.0, 20000.0, 45000.0, 80000.0, 120000.0, 170000.0}) {
        const double m = oracle_volumes(generate_phantom(spec_with(v), desk_shape, desk_spacing)).ventricular;
        EXPECT_GT(m, prev);
        prev = m;
    }
}

TEST(Phantom, InfeasibleCavityRejected) {
    EXPECT_THROW(generate_phantom(spec_with(1.2e6, 1.2e6), desk_shape, desk_spacing), std::invalid_argument);
    EXPECT_THROW(generate_phantom(spec_with(-1.0), desk_shape, desk_spacing), std::invalid_argument);
    EXPECT_THROW(generate_phantom(spec_with(4e4, 9e6), desk_shape, desk_spacing), std::invalid_argument);
}

TEST(Phantom, AgeAndSexChangeTissue) {
    PhantomSpec young = spec_with(40000, 1.45e6, 3, 0.0), old = young, male = young;
    young.covariates.age = 45;
    old.covariates.age = 80;
    male.covariates.sex = 1;
    const Volume a = generate_phantom(young, desk_shape, desk_spacing);
    const Volume b = generate_phantom(old, desk_shape, desk_spacing);
    const Volume c = generate_phantom(male, desk_shape, desk_spacing);
    double sa = 0, sb = 0, dc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) sa += a.data[i], sb += b.data[i], dc += std::abs(a.data[i] - c.data[i]);
    EXPECT_GT(sa, sb);
    EXPECT_GT(dc, 0.0);
}

TEST(Contract, DivisibilityChecked) {
    VolumeContract c{{33, 32, 32}, {1, 1, 1}, 8};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.shape = {32, 32, 32};
    EXPECT_NO_THROW(c.validate());
    EXPECT_NO_THROW(VolumeContract::full_scale().validate());
}

TEST(Ingest, FullScaleShapeAccepted) {
    const fs::path dir = scratch("full_scale");
    Volume v({160, 224, 160}, {1, 1, 1});
    v.at(80, 100, 80) = 2.0f;
    nifti::write(v, (dir / "big.nii").string());
    const Volume r = ingest_volume((dir / "big.nii").string(), VolumeContract::full_scale());
    EXPECT_EQ(r.shape(), (Index3{160, 224, 160}));
    EXPECT_EQ(r.source, VolumeSource::ingested);
    EXPECT_FLOAT_EQ(r.at(80, 100, 80), 1.0f);
    fs::remove_all(dir);
}

TEST(Ingest, WrongShapeReportsExpectedAndFound) {
    const fs::path dir = scratch("shape");
    nifti::write(Volume({64, 64, 64}, {1, 1, 1}), (dir / "small.nii").string());
    try {
        ingest_volume((dir / "small.nii").string(), VolumeContract::full_scale());
        FAIL();
    } catch (const std::invalid_argument& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("(160,224,160)"), std::string::npos) << m;
        EXPECT_NE(m.find("(64,64,64)"), std::string::npos) << m;
    }
    fs::remove_all(dir);
}

TEST(Ingest, WrongSpacingRejected) {
    const fs::path dir = scratch("spacing");
    nifti::write(Volume(desk_shape, {4, 4, 4}), (dir / "v.nii").string());
    EXPECT_THROW(ingest_volume((dir / "v.nii").string(), VolumeContract{}), std::invalid_argument);
    fs::remove_all(dir);
}

TEST(Ingest, NonFiniteRejected) {
    const fs::path dir = scratch("nan");
    nifti::write(Volume(desk_shape, desk_spacing), (dir / "v.nii").string());
    {
        // float32 payload starts at byte 352
        std::fstream f(dir / "v.nii", std::ios::in | std::ios::out | std::ios::binary);
        const float nan = std::numeric_limits<float>::quiet_NaN();
        f.seekp(352 + 4 * 1000);
        f.write(reinterpret_cast<const char*>(&nan), sizeof nan);
    }
    EXPECT_THROW(ingest_volume((dir / "v.nii").string(), VolumeContract{}), std::invalid_argument);
    fs::remove_all(dir);
}

TEST(Ingest, RoundTripWithinQuantisationStep) {
    const fs::path dir = scratch("roundtrip");
    const Volume v = generate_phantom(spec_with(50000), desk_shape, desk_spacing);
    nifti::write(v, (dir / "f.nii").string());
    const Volume f = ingest_volume((dir / "f.nii").string(), VolumeContract{}, IntensityRange{0, 1});
    for (std::size_t i = 0; i < v.numel(); ++i) ASSERT_EQ(f.data[i], v.data[i]);

    nifti::write(v, (dir / "q.nii").string(), {nifti::DataType::int16});
    const double step = nifti::read((dir / "q.nii").string()).quantisation_step;
    ASSERT_GT(step, 0.0);
    const Volume q = ingest_volume((dir / "q.nii").string(), VolumeContract{}, IntensityRange{0, 1});
    double worst = 0;
    for (std::size_t i = 0; i < v.numel(); ++i) worst = std::max(worst, std::abs(double(q.data[i]) - v.data[i]));
    EXPECT_LE(worst, step);
    fs::remove_all(dir);
}

TEST(Ingest, DatasetLevelRescale) {
    const fs::path dir = scratch("dataset");
    Volume a(desk_shape, desk_spacing), b(desk_shape, desk_spacing);
    a.data.fill(1.0f);
    b.data.fill(3.0f);
    b.at(0, 0, 0) = 5.0f;
    nifti::write(a, (dir / "a.nii").string());
    nifti::write(b, (dir / "b.nii").string());
    const auto vs = ingest_dataset({(dir / "a.nii").string(), (dir / "b.nii").string()}, VolumeContract{});
    EXPECT_FLOAT_EQ(vs[0].at(5, 5, 5), 0.0f);
    EXPECT_FLOAT_EQ(vs[1].at(5, 5, 5), 0.5f);
    EXPECT_FLOAT_EQ(vs[1].at(0, 0, 0), 1.0f);
    fs::remove_all(dir);
}

TEST(Dataset, SidecarAndIndexRoundTrip) {
    const fs::path dir = scratch("sidecar");
    CovariateBounds b;
    ItemRecord r{"x001", {70.5, 1, 123456.5, 1.5e6}, {}, 99, VolumeSource::phantom, "sub/x001.nii"};
    r.normalized = normalize_covariates(r.covariates, b);
    write_item(dir, r, generate_phantom(spec_with(30000), desk_shape, desk_spacing));
    const ItemRecord s = read_sidecar(dir / r.path);
    EXPECT_EQ(s.id, r.id);
    EXPECT_EQ(s.seed, r.seed);
    EXPECT_EQ(s.covariates.ventricular_volume, r.covariates.ventricular_volume);
    EXPECT_EQ(s.normalized, r.normalized);
    write_text_atomic(dir / "index.csv", index_csv({r}));
    const auto rows = read_index_csv(dir / "index.csv");
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].path, r.path);
    EXPECT_EQ(rows[0].covariates.age, r.covariates.age);
    EXPECT_EQ(rows[0].covariates.brain_volume_norm, r.covariates.brain_volume_norm);
    fs::remove_all(dir);
}

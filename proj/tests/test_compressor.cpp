#include <gtest/gtest.h>

#include <unistd.h>

#include "bldm/compressor.hpp"

using namespace bldm;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("bldm_compressor_" + std::to_string(getpid()) + "_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

CompressorConfig tiny_config() {
    CompressorConfig c;
    c.encoder_channels = {4, 4, 8, 8};
    c.decoder_channels = {4, 4, 8, 8};
    c.steps = 60;
    c.batch = 2;
    c.lr = 3e-3;
    c.adversarial_warmup = 0.5;
    return c;
}

std::vector<Volume> tiny_phantoms(int n) {
    std::vector<Volume> out;
    for (int i = 0; i < n; ++i) {
        PhantomSpec s;
        s.covariates = {50.0 + 3 * i, double(i % 2), 60000.0 + 10000 * i, 1.45e6};
        s.geometry_seed = 40 + i;
        out.push_back(generate_phantom(s, {16, 16, 16}, {10, 14, 10}));
    }
    return out;
}

Tensor<float> random_latent(Shape s, std::uint64_t seed) {
    Rng rng(seed);
    return rng.normal_tensor<float>(std::move(s));
}

// KL(N(mu, var) || N(0, 1)) by composite Simpson integration of p log(p/q).
double kl_numeric(double mu, double var) {
    const double sd = std::sqrt(var);
    const double a = mu - 14 * sd, b = mu + 14 * sd;
    const int n = 200000;
    const double h = (b - a) / n;
    auto f = [&](double x) {
        const double lp = -0.5 * std::log(2 * std::numbers::pi * var) - (x - mu) * (x - mu) / (2 * var);
        const double lq = -0.5 * std::log(2 * std::numbers::pi) - x * x / 2;
        return std::exp(lp) * (lp - lq);
    };
    double s = f(a) + f(b);
    for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
    return s * h / 3;
}

double kl_closed(double mu, double logvar) {
    auto m = ag::constant(Tensor<double>({1}, mu));
    auto lv = ag::constant(Tensor<double>({1}, logvar));
    return ag::kl_standard_normal(m, lv).item();
}

}  // namespace

TEST(CompressorShape, FullScaleLatent) {
    Compressor m(CompressorConfig{});
    EXPECT_EQ(m.latent_shape_for({160, 224, 160}), (Index3{20, 28, 20}));
}

TEST(CompressorShape, DeskScaleEncode) {
    Compressor m(tiny_config());
    const Volume v({32, 32, 32}, {5, 7, 5});
    const PosteriorParams p = m.encode(v);
    EXPECT_EQ(p.mean.shape, (Shape{1, 3, 4, 4, 4}));
    EXPECT_EQ(p.logvar.shape, p.mean.shape);
}

TEST(CompressorShape, IndivisibleRejected) {
    Compressor m(tiny_config());
    EXPECT_THROW(m.latent_shape_for({33, 32, 32}), std::invalid_argument);
    EXPECT_THROW(m.encode(Volume({33, 32, 32}, {1, 1, 1})), std::invalid_argument);
}

TEST(CompressorShape, RoundTripShapeForRandomDivisibleShapes) {
    Compressor m(tiny_config());
    Rng rng(3);
    for (int i = 0; i < 6; ++i) {
        const Index3 s{8 * rng.uniform_int(1, 3), 8 * rng.uniform_int(1, 3), 8 * rng.uniform_int(1, 3)};
        const Volume v(s, {1, 1, 1});
        const auto out = m.decode_volumes(sample_posterior(m.encode(v), 1), v.spacing);
        ASSERT_EQ(out.size(), 1u);
        EXPECT_EQ(out[0].shape(), s);
    }
}

TEST(CompressorShape, DecodeShapeAndFiniteness) {
    Compressor m(tiny_config());
    const Tensor<float> x = m.decode(random_latent({2, 3, 4, 4, 4}, 9));
    EXPECT_EQ(x.shape, (Shape{2, 1, 32, 32, 32}));
    EXPECT_TRUE(x.all_finite());
}

TEST(CompressorShape, DecodeRejectsMismatch) {
    Compressor m(tiny_config());
    EXPECT_THROW(m.decode(random_latent({1, 2, 4, 4, 4}, 1)), std::invalid_argument);
    m.trained_latent_shape = Index3{4, 4, 4};
    EXPECT_THROW(m.decode(random_latent({1, 3, 2, 4, 4}, 1)), std::invalid_argument);
    EXPECT_NO_THROW(m.decode(random_latent({1, 3, 4, 4, 4}, 1)));
}

TEST(Posterior, ClampFloorReturnsMean) {
    PosteriorParams p{random_latent({1, 3, 2, 2, 2}, 4), Tensor<float>({1, 3, 2, 2, 2}, -30.0f)};
    const Latent z = sample_posterior(p, 8);
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(z.data[i], p.mean.data[i], 1e-6);
}

TEST(Posterior, EncoderClampsLogvar) {
    CompressorConfig c = tiny_config();
    c.logvar_min = -0.5;
    c.logvar_max = 0.5;
    Compressor m(c);
    Volume v({16, 16, 16}, {1, 1, 1});
    v.data.fill(50.0f);
    const PosteriorParams p = m.encode(v);
    for (float lv : p.logvar.data) {
        EXPECT_GE(lv, -0.5f);
        EXPECT_LE(lv, 0.5f);
    }
}

TEST(Posterior, FixedSeedDeterministic) {
    PosteriorParams p{random_latent({1, 3, 2, 2, 2}, 4), random_latent({1, 3, 2, 2, 2}, 5)};
    EXPECT_EQ(sample_posterior(p, 8).data, sample_posterior(p, 8).data);
    EXPECT_NE(sample_posterior(p, 8).data, sample_posterior(p, 9).data);
}

TEST(Posterior, MonteCarloVarianceMatches) {
    PosteriorParams p{Tensor<float>({1, 1, 1, 2, 2}, std::vector<float>{0.0f, 1.0f, -2.0f, 0.5f}),
                      Tensor<float>({1, 1, 1, 2, 2}, std::vector<float>{0.0f, -1.0f, 1.0f, 2.5f})};
    const int n = 10000;
    std::vector<double> s(4), ss(4);
    for (int k = 0; k < n; ++k) {
        const Latent z = sample_posterior(p, derive_seed(77, static_cast<std::uint64_t>(k)));
        for (int i = 0; i < 4; ++i) s[i] += z.data[i], ss[i] += double(z.data[i]) * z.data[i];
    }
    for (int i = 0; i < 4; ++i) {
        const double mean = s[i] / n, var = ss[i] / n - mean * mean;
        EXPECT_NEAR(var, std::exp(p.logvar.data[i]), 0.05 * std::exp(p.logvar.data[i])) << i;
    }
}

TEST(Losses, IdentityReconstructionIsZero) {
    const auto vols = tiny_phantoms(2);
    const Tensor<float> x = stack_volumes({&vols[0], &vols[1]});
    const PosteriorParams p{Tensor<float>({2, 3, 2, 2, 2}), Tensor<float>({2, 3, 2, 2, 2})};
    const CompressorLossReport r = compressor_losses(x, x, p, nullptr);
    EXPECT_EQ(r.l1, 0.0);
    EXPECT_EQ(r.perceptual, 0.0);
    EXPECT_EQ(r.kl, 0.0);
    EXPECT_EQ(r.total, 0.0);
}

TEST(Losses, KlClosedForm) {
    for (double mu : {0.0, 0.3, -1.7, 2.5}) EXPECT_NEAR(kl_closed(mu, 0.0), mu * mu / 2, 1e-15);
}

TEST(Losses, KlMatchesNumericalIntegration) {
    for (auto [mu, lv] : {std::pair{0.0, 0.0}, {1.0, 0.0}, {-0.7, -1.2}, {2.0, 0.8}, {0.3, -3.0}})
        EXPECT_NEAR(kl_closed(mu, lv), kl_numeric(mu, std::exp(lv)), 1e-6) << mu << " " << lv;
}

TEST(Losses, TotalIsWeightedSumAndAdversarialFinite) {
    const auto vols = tiny_phantoms(2);
    const Tensor<float> x = stack_volumes({&vols[0], &vols[1]});
    Compressor m(tiny_config());
    const PosteriorParams p = m.encode(x);
    const Tensor<float> recon = m.decode(p.mean);
    PatchDiscriminator<float> disc(3);
    const LossWeights w{1.0, 0.5, 0.25, 0.125};
    const CompressorLossReport r = compressor_losses(x, recon, p, &disc, w);
    EXPECT_GT(r.l1, 0);
    EXPECT_GT(r.perceptual, 0);
    EXPECT_GE(r.kl, 0);
    EXPECT_TRUE(std::isfinite(r.adversarial_g));
    EXPECT_TRUE(std::isfinite(r.adversarial_d));
    EXPECT_NEAR(r.total, r.l1 + 0.5 * r.perceptual + 0.25 * r.adversarial_g + 0.125 * r.kl, 1e-5 * r.total);
    const CompressorLossReport warm = compressor_losses(x, recon, p, nullptr, w);
    EXPECT_FALSE(warm.adversarial_enabled);
    EXPECT_NEAR(warm.total, r.l1 + 0.5 * r.perceptual + 0.125 * r.kl, 1e-5 * r.total);
}

TEST(Losses, ShapeMismatchRejected) {
    const PosteriorParams p{Tensor<float>({1, 3, 2, 2, 2}), Tensor<float>({1, 3, 2, 2, 2})};
    EXPECT_THROW(compressor_losses(Tensor<float>({1, 1, 16, 16, 16}), Tensor<float>({1, 1, 8, 16, 16}), p, nullptr),
                 std::invalid_argument);
}

TEST(Training, LossDecreasesAndAdversarialStaysFinite) {
    const auto data = tiny_phantoms(6);
    Compressor m(tiny_config());
    CompressorTrainer tr(m);
    tr.train(data, 60, [](long, const CompressorLossReport& r) {
        ASSERT_TRUE(std::isfinite(r.adversarial_g));
        ASSERT_TRUE(std::isfinite(r.adversarial_d));
    });
    const auto total = tr.curve.series("total");
    ASSERT_EQ(total.size(), 60u);
    const double first = std::accumulate(total.begin(), total.begin() + 6, 0.0);
    const double last = std::accumulate(total.end() - 6, total.end(), 0.0);
    EXPECT_LT(last, first);
    const auto d = tr.curve.series("adversarial_d");
    EXPECT_EQ(d[10], 0.0);
    EXPECT_GT(d[50], 0.0);
}

TEST(Training, EmptyDatasetRejected) {
    Compressor m(tiny_config());
    CompressorTrainer tr(m);
    EXPECT_THROW(tr.train({}, 5), std::invalid_argument);
}

TEST(Training, NanNamesStepAndTerm) {
    auto data = tiny_phantoms(1);
    data[0].at(3, 3, 3) = std::numeric_limits<float>::quiet_NaN();
    Compressor m(tiny_config());
    CompressorTrainer tr(m);
    try {
        tr.train(data, 5);
        FAIL();
    } catch (const DivergenceError& e) {
        const std::string s = e.what();
        EXPECT_NE(s.find("step 0"), std::string::npos) << s;
        EXPECT_NE(s.find("'l1'"), std::string::npos) << s;
    }
}

TEST(Training, ResumeMatchesUninterruptedRun) {
    const auto data = tiny_phantoms(4);
    const fs::path dir = scratch("resume");
    Compressor a(tiny_config());
    CompressorTrainer ta(a);
    ta.train(data, 40);

    Compressor b(tiny_config());
    CompressorTrainer tb(b);
    tb.train(data, 20);
    tb.save(dir / "ckpt");
    Compressor c(tiny_config());
    CompressorTrainer tc(c);
    tc.resume(dir / "ckpt");
    EXPECT_EQ(tc.step, 20);
    tc.train(data, 40);

    // Loss continuity at the resume point.
    const auto full = ta.curve.series("total");
    const auto tail = tc.curve.series("total");
    ASSERT_EQ(tail.size(), 20u);
    double mean = 0, var = 0;
    for (int i = 10; i < 20; ++i) mean += full[i] / 10;
    for (int i = 10; i < 20; ++i) var += (full[i] - mean) * (full[i] - mean) / 9;
    EXPECT_LE(std::abs(tail[0] - full[19]), 10 * std::sqrt(var));
    for (int i = 0; i < 20; ++i) EXPECT_NEAR(tail[i], full[20 + i], 1e-4 * full[20 + i]) << i;
    fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripEncodesBitwiseIdentically) {
    const auto data = tiny_phantoms(3);
    const fs::path dir = scratch("ckpt");
    Compressor m(tiny_config());
    CompressorTrainer tr(m);
    tr.train(data, 5);
    tr.save(dir / "ae");
    const json j = read_json(dir / "ae.json");
    EXPECT_EQ(j.at("factor"), 8);
    EXPECT_EQ(j.at("channels"), 3);
    EXPECT_EQ(j.at("seed"), 1234);
    EXPECT_EQ(j.at("step"), 5);
    EXPECT_EQ(j.at("data_fingerprint"), data_fingerprint(data));
    EXPECT_EQ(j.at("loss_weights").at("adversarial"), 0.005);
    auto loaded = load_compressor(dir / "ae");
    const PosteriorParams p = m.encode(data[0]), q = loaded->encode(data[0]);
    EXPECT_EQ(p.mean.data, q.mean.data);
    EXPECT_EQ(p.logvar.data, q.logvar.data);
    EXPECT_EQ(loaded->trained_latent_shape, (Index3{2, 2, 2}));
    fs::remove_all(dir);
}

TEST(Checkpoint, MissingNamesTrainAe) {
    try {
        load_compressor(fs::temp_directory_path() / "bldm_no_such_checkpoint");
        FAIL();
    } catch (const MissingArtifact& e) {
        EXPECT_EQ(e.prerequisite(), "train-ae");
    }
}

TEST(Config, InvalidFieldsListed) {
    CompressorConfig c;
    c.factor = 6;
    c.batch = 0;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_GE(e.problems().size(), 2u);
    }
}

TEST(LossCurveCsv, Format) {
    LossCurve c;
    c.add(0, "l1", 0.5);
    c.add(1, "kl", 2.0);
    EXPECT_EQ(c.csv(), "step,term,value\n0,l1,0.5\n1,kl,2\n");
}

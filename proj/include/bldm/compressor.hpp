#pragma once

// KL-regularised convolutional autoencoder (the first stage): volume ->
// Gaussian posterior over a latent grid downsampled by F per axis -> volume.
// Trained with L1 + slice-wise perceptual + 3D patch least-squares adversarial
// + KL terms.

#include <cmath>
#include <functional>
#include <optional>

#include "bldm/dataset.hpp"
#include "bldm/digest.hpp"
#include "bldm/errors.hpp"
#include "bldm/nn.hpp"

namespace bldm {

struct LossWeights {
    double l1 = 1.0;
    double perceptual = 0.002;
    double adversarial = 0.005;
    double kl = 1e-7;
};

struct CompressorConfig {
    int factor = 8;  // power of two
    int latent_channels = 3;
    std::vector<int> encoder_channels{8, 16, 32, 32};  // full resolution, then one entry per downsampling
    std::vector<int> decoder_channels{8, 16, 32, 32};
    LossWeights weights;
    double adversarial_warmup = 0.25;  // fraction of steps before the adversarial term switches on
    double logvar_min = -30.0;
    double logvar_max = 20.0;
    int steps = 2000;
    int batch = 2;
    double lr = 1e-3;
    double disc_lr = 5e-4;
    double lr_final_fraction = 0.1;  // cosine decay floor
    std::uint64_t seed = 1234;

    int levels() const {
        int l = 0;
        for (int f = factor; f > 1; f >>= 1) ++l;
        return l;
    }

    void validate() const {
        std::vector<std::string> p;
        if (factor < 1 || (factor & (factor - 1)) != 0) p.push_back("compressor.factor must be a power of two");
        if (latent_channels < 1) p.push_back("compressor.latent_channels must be >= 1");
        if (static_cast<int>(encoder_channels.size()) != levels() + 1)
            p.push_back("compressor.encoder_channels needs log2(factor) + 1 entries");
        if (static_cast<int>(decoder_channels.size()) != levels() + 1)
            p.push_back("compressor.decoder_channels needs log2(factor) + 1 entries");
        if (steps < 0) p.push_back("compressor.steps must be >= 0");
        if (batch < 1) p.push_back("compressor.batch must be >= 1");
        if (!(logvar_min < logvar_max)) p.push_back("compressor.logvar range must satisfy min < max");
        if (!(adversarial_warmup >= 0 && adversarial_warmup <= 1))
            p.push_back("compressor.adversarial_warmup must lie in [0, 1]");
        if (!p.empty()) throw ConfigError(p);
    }
};

// Per-item posterior over the latent grid, [N, C, d, h, w].
struct PosteriorParams {
    Tensor<float> mean;
    Tensor<float> logvar;
};

using Latent = Tensor<float>;  // [N, C, d, h, w]

struct CompressorLossReport {
    double l1 = 0, perceptual = 0, adversarial_g = 0, adversarial_d = 0, kl = 0, total = 0;
    LossWeights weights;
    bool adversarial_enabled = false;
};

// latent = mean + exp(logvar / 2) * eps, eps ~ N(0, I) drawn from `seed`.
inline Latent sample_posterior(const PosteriorParams& p, std::uint64_t seed) {
    if (p.mean.shape != p.logvar.shape) throw std::invalid_argument("posterior mean/logvar shapes differ");
    Rng rng(seed);
    Latent z = p.mean;
    for (std::size_t i = 0; i < z.numel(); ++i) z.data[i] += static_cast<float>(std::exp(0.5 * p.logvar.data[i]) * rng.normal());
    return z;
}

namespace detail {

template <class T>
struct PerceptualBackbone {
    // Fixed, seeded 2D feature stack applied to the three central orthogonal
    // planes. Never trained.
    nn::Conv3d<T> c1, c2;
    explicit PerceptualBackbone(std::uint64_t seed) {
        Rng rng(seed);
        c1 = nn::Conv3d<T>(1, 8, {1, 3, 3}, 1, rng, T(1.4));
        c2 = nn::Conv3d<T>(8, 16, {1, 3, 3}, 1, rng, T(1.4));
        c1.weight = ag::constant(c1.weight.value());
        c1.bias = ag::constant(c1.bias.value());
        c2.weight = ag::constant(c2.weight.value());
        c2.bias = ag::constant(c2.bias.value());
    }

    ag::Var<T> distance(const ag::Var<T>& x, const ag::Var<T>& y) const {
        const auto& s = x.shape();
        std::vector<std::pair<T, ag::Var<T>>> terms;
        for (int axis = 0; axis < 3; ++axis) {
            const int mid = s[2 + axis] / 2;
            auto px = ag::extract_plane(x, axis, mid);
            auto py = ag::extract_plane(y, axis, mid);
            auto fx1 = ag::leaky_relu(c1(px)), fy1 = ag::leaky_relu(c1(py));
            auto fx2 = ag::leaky_relu(c2(fx1)), fy2 = ag::leaky_relu(c2(fy1));
            terms.push_back({T(1) / T(3), ag::add(ag::mse(fx1, fy1), ag::mse(fx2, fy2))});
        }
        return ag::weighted_sum(terms);
    }
};

}  // namespace detail

// 3D patch discriminator; receptive field 7 voxels (about a quarter of a 32-voxel side).
template <class T>
struct PatchDiscriminator {
    nn::Conv3d<T> c1, c2, c3;
    explicit PatchDiscriminator(std::uint64_t seed) {
        Rng rng(seed);
        c1 = nn::Conv3d<T>(1, 8, 3, 2, rng, T(1.4));
        c2 = nn::Conv3d<T>(8, 16, 3, 2, rng, T(1.4));
        c3 = nn::Conv3d<T>(16, 1, 1, 1, rng);
    }
    ag::Var<T> operator()(const ag::Var<T>& x) const { return c3(ag::leaky_relu(c2(ag::leaky_relu(c1(x))))); }
    nn::ParamList<T> params() {
        nn::ParamList<T> ps;
        c1.collect("disc.c1", ps);
        c2.collect("disc.c2", ps);
        c3.collect("disc.c3", ps);
        return ps;
    }
};

class Compressor {
public:
    using T = float;

    explicit Compressor(CompressorConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, "compressor-init"));
        const int L = cfg_.levels();
        const auto& ec = cfg_.encoder_channels;
        const auto& dc = cfg_.decoder_channels;
        enc_in_ = nn::Conv3d<T>(1, ec[0], 3, 1, rng, T(1.4));
        for (int i = 1; i <= L; ++i) {
            enc_down_.emplace_back(ec[i - 1], ec[i], 3, 2, rng, T(1.4));
            enc_mid_.emplace_back(ec[i], ec[i], 3, 1, rng, T(1.4));
        }
        enc_out_ = nn::Conv3d<T>(ec[L], 2 * cfg_.latent_channels, 1, 1, rng);
        dec_in_ = nn::Conv3d<T>(cfg_.latent_channels, dc[L], 3, 1, rng, T(1.4));
        dec_mid_ = nn::Conv3d<T>(dc[L], dc[L], 3, 1, rng, T(1.4));
        for (int i = L; i >= 1; --i) dec_up_.emplace_back(dc[i], dc[i - 1], 3, 1, rng, T(1.4));
        dec_out_ = nn::Conv3d<T>(dc[0], 1, 3, 1, rng);
    }

    Compressor(const Compressor&) = delete;
    Compressor& operator=(const Compressor&) = delete;

    const CompressorConfig& config() const { return cfg_; }
    int factor() const { return cfg_.factor; }
    int latent_channels() const { return cfg_.latent_channels; }

    // Latent spatial shape the decoder was trained for; unset for fresh models.
    std::optional<Index3> trained_latent_shape;

    nn::ParamList<T> params() {
        nn::ParamList<T> ps;
        enc_in_.collect("enc.in", ps);
        for (std::size_t i = 0; i < enc_down_.size(); ++i) {
            enc_down_[i].collect("enc.down" + std::to_string(i), ps);
            enc_mid_[i].collect("enc.mid" + std::to_string(i), ps);
        }
        enc_out_.collect("enc.out", ps);
        dec_in_.collect("dec.in", ps);
        dec_mid_.collect("dec.mid", ps);
        for (std::size_t i = 0; i < dec_up_.size(); ++i) dec_up_[i].collect("dec.up" + std::to_string(i), ps);
        dec_out_.collect("dec.out", ps);
        return ps;
    }

    Index3 latent_shape_for(const Index3& volume_shape) const {
        Index3 out;
        for (int i = 0; i < 3; ++i) {
            if (volume_shape[i] % cfg_.factor != 0)
                throw std::invalid_argument("encode: shape " + index3_str(volume_shape) +
                                            " is not divisible by the downsampling factor " + std::to_string(cfg_.factor));
            out[i] = volume_shape[i] / cfg_.factor;
        }
        return out;
    }

    // x [N, 1, D, H, W] -> (mean, logvar) graph nodes.
    std::pair<ag::Var<T>, ag::Var<T>> encode_graph(const ag::Var<T>& x) const {
        latent_shape_for({x.value().dim(2), x.value().dim(3), x.value().dim(4)});
        auto h = ag::silu(enc_in_(x));
        for (std::size_t i = 0; i < enc_down_.size(); ++i) {
            h = ag::silu(enc_down_[i](h));
            h = ag::silu(enc_mid_[i](h));
        }
        auto [mean, logvar] = ag::split_channels(enc_out_(h), cfg_.latent_channels);
        return {mean, ag::clamp(logvar, T(cfg_.logvar_min), T(cfg_.logvar_max))};
    }

    ag::Var<T> decode_graph(const ag::Var<T>& z) const {
        if (z.value().ndim() != 5 || z.value().dim(1) != cfg_.latent_channels)
            throw std::invalid_argument("decode: latent " + shape_str(z.shape()) + " does not have " +
                                        std::to_string(cfg_.latent_channels) + " channels");
        if (trained_latent_shape) {
            const Index3 zs{z.value().dim(2), z.value().dim(3), z.value().dim(4)};
            if (zs != *trained_latent_shape)
                throw std::invalid_argument("decode: latent spatial shape " + index3_str(zs) +
                                            " does not match the trained configuration " +
                                            index3_str(*trained_latent_shape));
        }
        auto h = ag::silu(dec_in_(z));
        h = ag::silu(dec_mid_(h));
        for (const auto& up : dec_up_) h = ag::silu(up(ag::upsample2(h)));
        return dec_out_(h);
    }

    PosteriorParams encode(const Tensor<float>& batch) const {
        ag::NoGradGuard ng;
        auto [m, lv] = encode_graph(ag::constant(batch));
        return {m.value(), lv.value()};
    }

    PosteriorParams encode(const Volume& v) const { return encode(stack_volumes({&v})); }

    Tensor<float> decode(const Latent& z) const {
        ag::NoGradGuard ng;
        return decode_graph(ag::constant(z)).value();
    }

    std::vector<Volume> decode_volumes(const Latent& z, const Spacing3& spacing) const {
        Tensor<float> x = decode(z);
        std::vector<Volume> out;
        const int N = x.dim(0);
        const Index3 s{x.dim(2), x.dim(3), x.dim(4)};
        for (int i = 0; i < N; ++i) {
            Volume v(s, spacing, VolumeSource::synthetic);
            std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(i * v.numel()), v.numel(), v.data.data.begin());
            out.push_back(std::move(v));
        }
        return out;
    }

private:
    CompressorConfig cfg_;
    nn::Conv3d<T> enc_in_, enc_out_, dec_in_, dec_mid_, dec_out_;
    std::vector<nn::Conv3d<T>> enc_down_, enc_mid_, dec_up_;
};

// Loss terms for one batch. `disc` may be null, in which case both
// adversarial terms are zero and excluded from the total.
struct CompressorLossGraph {
    ag::Var<float> total, l1, perceptual, kl, adversarial_g;
    CompressorLossReport report;
};

inline CompressorLossGraph compressor_loss_graph(const ag::Var<float>& x, const ag::Var<float>& recon,
                                                 const ag::Var<float>& mean, const ag::Var<float>& logvar,
                                                 PatchDiscriminator<float>* disc, const LossWeights& w,
                                                 std::uint64_t perceptual_seed = 7) {
    if (x.shape() != recon.shape())
        throw std::invalid_argument("compressor losses: input " + shape_str(x.shape()) + " vs reconstruction " +
                                    shape_str(recon.shape()));
    static thread_local std::optional<std::pair<std::uint64_t, detail::PerceptualBackbone<float>>> backbone;
    if (!backbone || backbone->first != perceptual_seed) backbone.emplace(perceptual_seed, detail::PerceptualBackbone<float>(perceptual_seed));
    CompressorLossGraph g;
    g.l1 = ag::l1(recon, x);
    g.perceptual = backbone->second.distance(recon, x);
    g.kl = ag::kl_standard_normal(mean, logvar);
    std::vector<std::pair<float, ag::Var<float>>> terms{{float(w.l1), g.l1},
                                                        {float(w.perceptual), g.perceptual},
                                                        {float(w.kl), g.kl}};
    if (disc) {
        g.adversarial_g = ag::scale(ag::mse_to_scalar((*disc)(recon), 1.0f), 0.5f);
        terms.push_back({float(w.adversarial), g.adversarial_g});
        g.report.adversarial_g = g.adversarial_g.item();
        g.report.adversarial_enabled = true;
    }
    g.total = ag::weighted_sum(terms);
    g.report.l1 = g.l1.item();
    g.report.perceptual = g.perceptual.item();
    g.report.kl = g.kl.item();
    g.report.total = g.total.item();
    g.report.weights = w;
    return g;
}

// Least-squares discriminator loss on real x and (detached) reconstruction.
inline ag::Var<float> discriminator_loss(PatchDiscriminator<float>& disc, const ag::Var<float>& x,
                                         const ag::Var<float>& recon) {
    auto real = ag::mse_to_scalar(disc(x), 1.0f);
    auto fake = ag::mse_to_scalar(disc(ag::detach(recon)), 0.0f);
    return ag::scale(ag::add(real, fake), 0.5f);
}

// All loss terms for fixed inputs, evaluated without gradients.
inline CompressorLossReport compressor_losses(const Tensor<float>& x, const Tensor<float>& recon,
                                              const PosteriorParams& p, PatchDiscriminator<float>* disc,
                                              const LossWeights& w = {}) {
    ag::NoGradGuard ng;
    auto xv = ag::constant(x), rv = ag::constant(recon);
    auto g = compressor_loss_graph(xv, rv, ag::constant(p.mean), ag::constant(p.logvar), disc, w);
    if (disc) g.report.adversarial_d = discriminator_loss(*disc, xv, rv).item();
    return g.report;
}

// ------------------------------------------------------------------ training

struct LossCurve {
    struct Row {
        long step;
        std::string term;
        double value;
    };
    std::vector<Row> rows;

    void add(long step, const std::string& term, double value) { rows.push_back({step, term, value}); }

    std::vector<double> series(const std::string& term) const {
        std::vector<double> out;
        for (const auto& r : rows)
            if (r.term == term) out.push_back(r.value);
        return out;
    }

    std::string csv() const {
        std::string out = "step,term,value\n";
        for (const auto& r : rows) out += std::to_string(r.step) + "," + r.term + "," + format_number(r.value) + "\n";
        return out;
    }
};

inline std::string data_fingerprint(const std::vector<Volume>& data) {
    Sha256 h;
    for (const auto& v : data) h.update(v.data.ptr(), v.numel() * sizeof(float));
    return h.hex();
}

struct CompressorTrainer {
    Compressor& model;
    PatchDiscriminator<float> disc;
    nn::Adam<float> opt;
    nn::Adam<float> disc_opt;
    long step = 0;
    LossCurve curve;
    std::string fingerprint;

    CompressorTrainer(Compressor& m)
        : model(m),
          disc(derive_seed(m.config().seed, "disc-init")),
          opt(m.params(), {m.config().lr, 0.9, 0.999, 1e-8, 1.0}),
          disc_opt(disc.params(), {m.config().disc_lr, 0.5, 0.999, 1e-8, 1.0}) {}

    CompressorTrainer(const CompressorTrainer&) = delete;

    double lr_at(long s) const {
        const auto& c = model.config();
        const double t = c.steps > 0 ? std::min(1.0, double(s) / c.steps) : 1.0;
        return c.lr * (c.lr_final_fraction + (1 - c.lr_final_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
    }

    // Runs steps [step, until). Each step draws its batch from a stream
    // derived from (seed, step), so resumed runs see the same batches.
    void train(const std::vector<Volume>& data, long until,
               const std::function<void(long, const CompressorLossReport&)>& on_step = {}) {
        if (data.empty()) throw std::invalid_argument("train_compressor: dataset is empty");
        const auto& c = model.config();
        const Index3 shape = data.front().shape();
        for (const auto& v : data)
            if (v.shape() != shape) throw std::invalid_argument("train_compressor: volumes have mixed shapes");
        model.trained_latent_shape = model.latent_shape_for(shape);
        if (fingerprint.empty()) fingerprint = data_fingerprint(data);
        const long warmup = static_cast<long>(std::ceil(c.adversarial_warmup * c.steps));
        for (; step < until; ++step) {
            Rng rng(derive_seed(c.seed, static_cast<std::uint64_t>(step)));
            std::vector<const Volume*> batch;
            for (int b = 0; b < c.batch; ++b) batch.push_back(&data[rng.uniform_int(0, int(data.size()) - 1)]);
            auto x = ag::constant(stack_volumes(batch));
            opt.set_lr(lr_at(step));
            auto [mean, logvar] = model.encode_graph(x);
            Tensor<float> eps = rng.normal_tensor<float>(mean.shape());
            auto z = ag::reparameterize(mean, logvar, eps);
            auto recon = model.decode_graph(z);
            const bool adv = c.weights.adversarial > 0 && step >= warmup;
            auto g = compressor_loss_graph(x, recon, mean, logvar, adv ? &disc : nullptr, c.weights);
            check_finite(g.report);
            opt.zero_grad();
            disc_opt.zero_grad();
            ag::backward(g.total);
            opt.step();
            if (adv) {
                disc_opt.zero_grad();
                auto dl = discriminator_loss(disc, x, recon);
                g.report.adversarial_d = dl.item();
                if (!std::isfinite(g.report.adversarial_d))
                    throw DivergenceError("compressor step " + std::to_string(step) + ": term 'adversarial_d' diverged");
                ag::backward(dl);
                disc_opt.step();
            }
            curve.add(step, "l1", g.report.l1);
            curve.add(step, "perceptual", g.report.perceptual);
            curve.add(step, "kl", g.report.kl);
            curve.add(step, "adversarial_g", g.report.adversarial_g);
            curve.add(step, "adversarial_d", g.report.adversarial_d);
            curve.add(step, "total", g.report.total);
            if (on_step) on_step(step, g.report);
        }
    }

    void check_finite(const CompressorLossReport& r) const {
        const std::pair<const char*, double> terms[] = {{"l1", r.l1}, {"perceptual", r.perceptual}, {"kl", r.kl},
                                                        {"adversarial_g", r.adversarial_g}, {"total", r.total}};
        for (const auto& [name, v] : terms)
            if (!std::isfinite(v))
                throw DivergenceError("compressor step " + std::to_string(step) + ": term '" + name + "' diverged");
    }

    // Writes <stem>.bin (weights), <stem>.json (manifest), and the
    // discriminator/optimizer state needed to resume.
    void save(const fs::path& stem) const {
        fs::create_directories(stem.parent_path());
        const std::string s = stem.string();
        nn::save_params(model.params(), s + ".bin");
        nn::save_params(const_cast<PatchDiscriminator<float>&>(disc).params(), s + ".disc.bin");
        opt.save_state(s + ".opt.bin");
        disc_opt.save_state(s + ".disc_opt.bin");
        write_text_atomic(s + ".json", manifest().dump(2) + "\n");
    }

    json manifest() const {
        const auto& c = model.config();
        json j;
        j["kind"] = "compressor";
        j["factor"] = c.factor;
        j["channels"] = c.latent_channels;
        j["encoder_channels"] = c.encoder_channels;
        j["decoder_channels"] = c.decoder_channels;
        j["loss_weights"] = {{"l1", c.weights.l1},
                             {"perceptual", c.weights.perceptual},
                             {"adversarial", c.weights.adversarial},
                             {"kl", c.weights.kl}};
        j["adversarial_warmup"] = c.adversarial_warmup;
        j["logvar_range"] = {c.logvar_min, c.logvar_max};
        j["steps"] = c.steps;
        j["batch"] = c.batch;
        j["lr"] = c.lr;
        j["seed"] = c.seed;
        j["step"] = step;
        j["data_fingerprint"] = fingerprint;
        if (model.trained_latent_shape) j["latent_shape"] = *model.trained_latent_shape;
        return j;
    }

    void resume(const fs::path& stem) {
        const std::string s = stem.string();
        const json j = read_json(s + ".json");
        auto ps = model.params();
        nn::load_params(ps, s + ".bin");
        auto dps = disc.params();
        nn::load_params(dps, s + ".disc.bin");
        opt.load_state(s + ".opt.bin");
        disc_opt.load_state(s + ".disc_opt.bin");
        step = j.at("step").get<long>();
        fingerprint = j.value("data_fingerprint", "");
        if (j.contains("latent_shape")) model.trained_latent_shape = j.at("latent_shape").get<Index3>();
    }
};

inline CompressorConfig compressor_config_from_manifest(const json& j) {
    CompressorConfig c;
    c.factor = j.at("factor").get<int>();
    c.latent_channels = j.at("channels").get<int>();
    c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    c.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
    const auto& w = j.at("loss_weights");
    c.weights = {w.at("l1").get<double>(), w.at("perceptual").get<double>(), w.at("adversarial").get<double>(),
                 w.at("kl").get<double>()};
    c.adversarial_warmup = j.at("adversarial_warmup").get<double>();
    c.logvar_min = j.at("logvar_range")[0].get<double>();
    c.logvar_max = j.at("logvar_range")[1].get<double>();
    c.steps = j.at("steps").get<int>();
    c.batch = j.at("batch").get<int>();
    c.lr = j.at("lr").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

// Loads a frozen compressor for encoding/decoding.
inline std::unique_ptr<Compressor> load_compressor(const fs::path& stem) {
    const std::string s = stem.string();
    if (!fs::exists(s + ".json") || !fs::exists(s + ".bin"))
        throw MissingArtifact("train-ae", "compressor checkpoint " + s + ".{bin,json} not found");
    const json j = read_json(s + ".json");
    auto model = std::make_unique<Compressor>(compressor_config_from_manifest(j));
    auto ps = model->params();
    nn::load_params(ps, s + ".bin");
    if (j.contains("latent_shape")) model->trained_latent_shape = j.at("latent_shape").get<Index3>();
    return model;
}

}  // namespace bldm

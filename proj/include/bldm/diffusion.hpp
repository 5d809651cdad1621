#pragma once

// Latent DDPM: linear variance schedule, epsilon-prediction training, a small
// conditional 3D U-Net with concatenated + cross-attended covariates, and the
// ancestral (DDPM) and accelerated (DDIM) samplers.

#include <chrono>
#include <numbers>
#include <thread>

#include "bldm/compressor.hpp"

namespace bldm {

// ------------------------------------------------------------------ schedule

// Index t runs 1..T; entry 0 of alpha_bar is the empty product 1.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0, beta_end = 0;
    std::vector<double> beta, alpha, alpha_bar;

    double b(int t) const { return beta[t]; }
    double a(int t) const { return alpha[t]; }
    double abar(int t) const { return alpha_bar[t]; }

    // Variance of the true posterior q(z_{t-1} | z_t, z_0).
    double posterior_variance(int t) const { return (1.0 - abar(t - 1)) / (1.0 - abar(t)) * b(t); }
};

inline NoiseSchedule make_linear_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1, got " + std::to_string(T));
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1, got [" + format_number(beta_start) +
                                    ", " + format_number(beta_end) + "]");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    return s;
}

inline void check_timestep(const NoiseSchedule& s, int t) {
    if (t < 1 || t > s.T)
        throw std::invalid_argument("timestep " + std::to_string(t) + " outside 1.." + std::to_string(s.T));
}

template <class T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    check_timestep(s, t);
    if (z0.shape != eps.shape)
        throw std::invalid_argument("q_sample: z0 " + shape_str(z0.shape) + " vs eps " + shape_str(eps.shape));
    const double ca = std::sqrt(s.abar(t)), cb = std::sqrt(1.0 - s.abar(t));
    Tensor<T> out(z0.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = static_cast<T>(ca * z0.data[i] + cb * eps.data[i]);
    return out;
}

// Batched form: item i of z0 [N, ...] noised to ts[i].
template <class T>
Tensor<T> q_sample(const Tensor<T>& z0, const std::vector<int>& ts, const Tensor<T>& eps, const NoiseSchedule& s) {
    const int N = z0.dim(0);
    if (static_cast<int>(ts.size()) != N) throw std::invalid_argument("q_sample: one timestep per item required");
    const std::size_t per = z0.inner(1);
    Tensor<T> out(z0.shape);
    for (int i = 0; i < N; ++i) {
        check_timestep(s, ts[i]);
        const double ca = std::sqrt(s.abar(ts[i])), cb = std::sqrt(1.0 - s.abar(ts[i]));
        for (std::size_t k = i * per; k < (i + 1) * per; ++k)
            out.data[k] = static_cast<T>(ca * z0.data[k] + cb * eps.data[k]);
    }
    return out;
}

// ----------------------------------------------------------------- denoisers

// epsilon-predictor eps_theta(z_t, t, c) over a batch [N, k, d, h, w].
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Tensor<float> predict(const Tensor<float>& z_t, const std::vector<int>& t,
                                  const std::vector<Conditioning>& c) const = 0;
};

struct UNetConfig {
    int latent_channels = 3;
    std::vector<int> channels{32, 64};  // one entry per resolution level
    int time_dim = 64;
    int context_dim = 64;
    int context_tokens = 4;
    int groups = 8;

    void validate() const {
        std::vector<std::string> p;
        if (latent_channels < 1) p.push_back("diffusion.unet.latent_channels must be >= 1");
        if (channels.empty() || channels.size() > 4) p.push_back("diffusion.unet.channels needs 1..4 levels");
        for (int c : channels)
            if (c < 1) p.push_back("diffusion.unet.channels entries must be positive");
        if (time_dim < 2 || time_dim % 2) p.push_back("diffusion.unet.time_dim must be even and >= 2");
        if (context_dim < 1 || context_tokens < 1) p.push_back("diffusion.unet context dims must be positive");
        if (!p.empty()) throw ConfigError(p);
    }
};

inline json unet_config_json(const UNetConfig& u) {
    return {{"latent_channels", u.latent_channels}, {"channels", u.channels},           {"time_dim", u.time_dim},
            {"context_dim", u.context_dim},         {"context_tokens", u.context_tokens}, {"groups", u.groups}};
}

inline UNetConfig unet_config_from_json(const json& j) {
    UNetConfig u;
    u.latent_channels = j.at("latent_channels").get<int>();
    u.channels = j.at("channels").get<std::vector<int>>();
    u.time_dim = j.at("time_dim").get<int>();
    u.context_dim = j.at("context_dim").get<int>();
    u.context_tokens = j.at("context_tokens").get<int>();
    u.groups = j.at("groups").get<int>();
    return u;
}

constexpr int conditioning_channels = 4;

// Sinusoidal embedding of integer timesteps, [N, dim].
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Tensor<T> e({static_cast<int>(ts.size()), dim});
    for (std::size_t i = 0; i < ts.size(); ++i)
        for (int k = 0; k < half; ++k) {
            const double f = std::exp(-std::log(10000.0) * k / half);
            e.data[i * dim + k] = static_cast<T>(std::sin(ts[i] * f));
            e.data[i * dim + half + k] = static_cast<T>(std::cos(ts[i] * f));
        }
    return e;
}

// Concatenation path: z_t [N, k, ...] followed by the 4 conditioning scalars
// broadcast as constant channels.
template <class T>
Tensor<T> concat_conditioning(const Tensor<T>& z, const std::vector<Conditioning>& c) {
    const int N = z.dim(0), k = z.dim(1);
    if (static_cast<int>(c.size()) != N) throw std::invalid_argument("conditioning: one vector per batch item required");
    for (const auto& ci : c)
        for (double v : ci)
            if (!std::isfinite(v)) throw std::invalid_argument("conditioning vector is not finite");
    const std::size_t S = z.inner(2);
    Shape os = z.shape;
    os[1] = k + conditioning_channels;
    Tensor<T> out(os);
    for (int i = 0; i < N; ++i) {
        std::copy_n(z.ptr() + i * k * S, k * S, out.ptr() + i * (k + conditioning_channels) * S);
        for (int j = 0; j < conditioning_channels; ++j)
            std::fill_n(out.ptr() + (i * (k + conditioning_channels) + k + j) * S, S, static_cast<T>(c[i][j]));
    }
    return out;
}

template <class T>
Tensor<T> conditioning_tensor(const std::vector<Conditioning>& c) {
    Tensor<T> t({static_cast<int>(c.size()), conditioning_channels});
    for (std::size_t i = 0; i < c.size(); ++i)
        for (int j = 0; j < conditioning_channels; ++j) t.data[i * conditioning_channels + j] = static_cast<T>(c[i][j]);
    return t;
}

namespace detail {

template <class T>
struct ResBlock {
    nn::GroupNorm<T> n1, n2;
    nn::Conv3d<T> c1, c2, skip;
    nn::Linear<T> temb;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(int cin, int cout, int tdim, int groups, Rng& rng)
        : n1(cin, groups), n2(cout, groups), c1(cin, cout, 3, 1, rng), c2(cout, cout, 3, 1, rng, T(0.1)),
          temb(tdim, cout, rng), has_skip(cin != cout) {
        if (has_skip) skip = nn::Conv3d<T>(cin, cout, 1, 1, rng);
    }

    ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& t) const {
        auto h = c1(ag::silu(n1(x)));
        h = ag::add_channel_offset(h, temb(t));
        h = c2(ag::silu(n2(h)));
        return ag::add(h, has_skip ? skip(x) : x);
    }

    void collect(const std::string& p, nn::ParamList<T>& ps) {
        n1.collect(p + ".n1", ps);
        n2.collect(p + ".n2", ps);
        c1.collect(p + ".c1", ps);
        c2.collect(p + ".c2", ps);
        temb.collect(p + ".temb", ps);
        if (has_skip) skip.collect(p + ".skip", ps);
    }
};

// Single-head cross-attention from spatial positions (queries) to the
// conditioning context tokens (keys/values), with a residual connection.
template <class T>
struct CrossAttention {
    nn::GroupNorm<T> norm;
    nn::Linear<T> q, k, v, o;
    int channels = 0;

    CrossAttention() = default;
    CrossAttention(int c, int context_dim, int groups, Rng& rng)
        : norm(c, groups), q(c, c, rng), k(context_dim, c, rng), v(context_dim, c, rng), o(c, c, rng, T(0.1)),
          channels(c) {}

    ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& ctx) const {
        const Shape s = x.shape();
        const int N = s[0], C = s[1];
        const int S = static_cast<int>(x.value().inner(2));
        auto tokens = ag::transpose12(ag::reshape(norm(x), {N, C, S}));  // [N, S, C]
        auto qs = q(tokens);
        auto ks = k(ctx), vs = v(ctx);                                     // [N, M, C]
        auto att = ag::softmax(ag::scale(ag::bmm(qs, ag::transpose12(ks)), T(1) / std::sqrt(T(C))));
        auto out = o(ag::bmm(att, vs));                                    // [N, S, C]
        return ag::add(x, ag::reshape(ag::transpose12(out), s));
    }

    void collect(const std::string& p, nn::ParamList<T>& ps) {
        norm.collect(p + ".norm", ps);
        q.collect(p + ".q", ps);
        k.collect(p + ".k", ps);
        v.collect(p + ".v", ps);
        o.collect(p + ".o", ps);
    }
};

}  // namespace detail

// Conditional U-Net over latent grids. Level l runs at spatial size
// latent / 2^l with channels[l]; every level has a residual block followed by
// cross-attention on the way down and on the way up.
template <class T>
class UNet {
public:
    explicit UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "unet-init"));
        const int L = static_cast<int>(cfg_.channels.size());
        const auto& ch = cfg_.channels;
        const int td = 2 * cfg_.time_dim;
        t1_ = nn::Linear<T>(cfg_.time_dim, td, rng);
        t2_ = nn::Linear<T>(td, td, rng);
        ctx1_ = nn::Linear<T>(conditioning_channels, cfg_.context_dim, rng);
        ctx2_ = nn::Linear<T>(cfg_.context_dim, cfg_.context_tokens * cfg_.context_dim, rng);
        in_ = nn::Conv3d<T>(cfg_.latent_channels + conditioning_channels, ch[0], 3, 1, rng);
        for (int l = 0; l < L; ++l) {
            down_res_.emplace_back(ch[l], ch[l], td, cfg_.groups, rng);
            down_att_.emplace_back(ch[l], cfg_.context_dim, cfg_.groups, rng);
            if (l + 1 < L) downsample_.emplace_back(ch[l], ch[l + 1], 3, 2, rng);
        }
        mid_ = detail::ResBlock<T>(ch[L - 1], ch[L - 1], td, cfg_.groups, rng);
        for (int l = L - 2; l >= 0; --l) {
            upsample_.emplace_back(ch[l + 1], ch[l], 3, 1, rng);
            up_res_.emplace_back(2 * ch[l], ch[l], td, cfg_.groups, rng);
            up_att_.emplace_back(ch[l], cfg_.context_dim, cfg_.groups, rng);
        }
        out_norm_ = nn::GroupNorm<T>(ch[0], cfg_.groups);
        out_ = nn::Conv3d<T>(ch[0], cfg_.latent_channels, 3, 1, rng, T(0.1));
    }

    UNet(const UNet&) = delete;
    UNet& operator=(const UNet&) = delete;

    const UNetConfig& config() const { return cfg_; }

    // Context token sequence [N, M, context_dim] for conditioning c [N, 4].
    ag::Var<T> context(const ag::Var<T>& c) const {
        const int N = c.value().dim(0);
        return ag::reshape(ctx2_(ag::silu(ctx1_(c))), {N, cfg_.context_tokens, cfg_.context_dim});
    }

    // x: z_t with the conditioning channels already appended, [N, k+4, ...].
    ag::Var<T> forward(const ag::Var<T>& x, const std::vector<int>& ts, const ag::Var<T>& c) const {
        const int L = static_cast<int>(cfg_.channels.size());
        const int min_side = std::min({x.value().dim(2), x.value().dim(3), x.value().dim(4)});
        if (x.value().dim(1) != cfg_.latent_channels + conditioning_channels)
            throw std::invalid_argument("unet: expected " + std::to_string(cfg_.latent_channels + conditioning_channels) +
                                        " input channels, got " + std::to_string(x.value().dim(1)));
        for (int l = 1; l < L; ++l)
            if (x.value().dim(2) % (1 << l) || x.value().dim(3) % (1 << l) || x.value().dim(4) % (1 << l) ||
                min_side < (1 << l))
                throw std::invalid_argument("unet: latent " + shape_str(x.shape()) + " too small or not divisible for " +
                                            std::to_string(L) + " levels");
        auto temb = ag::silu(t2_(ag::silu(t1_(ag::constant(timestep_embedding<T>(ts, cfg_.time_dim))))));
        auto ctx = context(c);
        auto h = in_(x);
        std::vector<ag::Var<T>> skips;
        for (int l = 0; l < L; ++l) {
            h = down_att_[l](down_res_[l](h, temb), ctx);
            skips.push_back(h);
            if (l + 1 < L) h = downsample_[l](h);
        }
        h = mid_(h, temb);
        for (int i = 0; i + 1 < L; ++i) {
            const int l = L - 2 - i;
            h = upsample_[i](ag::upsample2(h));
            h = ag::concat_channels(h, skips[l]);
            h = up_att_[i](up_res_[i](h, temb), ctx);
        }
        return out_(ag::silu(out_norm_(h)));
    }

    ag::Var<T> predict_graph(const Tensor<T>& z_t, const std::vector<int>& ts, const std::vector<Conditioning>& c) const {
        return forward(ag::constant(concat_conditioning(z_t, c)), ts, ag::constant(conditioning_tensor<T>(c)));
    }

    nn::ParamList<T> params() {
        nn::ParamList<T> ps;
        t1_.collect("time.l1", ps);
        t2_.collect("time.l2", ps);
        ctx1_.collect("ctx.l1", ps);
        ctx2_.collect("ctx.l2", ps);
        in_.collect("in", ps);
        for (std::size_t l = 0; l < down_res_.size(); ++l) {
            down_res_[l].collect("down" + std::to_string(l) + ".res", ps);
            down_att_[l].collect("down" + std::to_string(l) + ".att", ps);
        }
        for (std::size_t l = 0; l < downsample_.size(); ++l) downsample_[l].collect("downsample" + std::to_string(l), ps);
        mid_.collect("mid", ps);
        for (std::size_t i = 0; i < up_res_.size(); ++i) {
            upsample_[i].collect("upsample" + std::to_string(i), ps);
            up_res_[i].collect("up" + std::to_string(i) + ".res", ps);
            up_att_[i].collect("up" + std::to_string(i) + ".att", ps);
        }
        out_norm_.collect("out.norm", ps);
        out_.collect("out.conv", ps);
        return ps;
    }

private:
    UNetConfig cfg_;
    nn::Linear<T> t1_, t2_, ctx1_, ctx2_;
    nn::Conv3d<T> in_, out_;
    nn::GroupNorm<T> out_norm_;
    std::vector<detail::ResBlock<T>> down_res_, up_res_;
    std::vector<detail::CrossAttention<T>> down_att_, up_att_;
    std::vector<nn::Conv3d<T>> downsample_, upsample_;
    detail::ResBlock<T> mid_;
};

class UNetDenoiser : public Denoiser {
public:
    UNetDenoiser(UNetConfig cfg, std::uint64_t seed) : net(std::move(cfg), seed) {}
    Tensor<float> predict(const Tensor<float>& z_t, const std::vector<int>& t,
                          const std::vector<Conditioning>& c) const override {
        ag::NoGradGuard ng;
        return net.predict_graph(z_t, t, c).value();
    }
    UNet<float> net;
};

// ----------------------------------------------------------- training loss

struct NoiseDraw {
    std::vector<int> t;
    Tensor<float> eps;
};

// t uniform in 1..T per item and standard-normal eps, both from `rng`.
inline NoiseDraw draw_training_noise(const Shape& shape, const NoiseSchedule& s, Rng& rng) {
    NoiseDraw d;
    for (int i = 0; i < shape[0]; ++i) d.t.push_back(rng.uniform_int(1, s.T));
    d.eps = rng.normal_tensor<float>(shape);
    return d;
}

namespace detail {
inline std::string conditioning_str(const Conditioning& c) {
    return "(" + format_number(c[0]) + ", " + format_number(c[1]) + ", " + format_number(c[2]) + ", " +
           format_number(c[3]) + ")";
}

inline void check_prediction(const Tensor<float>& eps_hat, const std::vector<int>& ts,
                             const std::vector<Conditioning>& c) {
    const std::size_t per = eps_hat.inner(1);
    for (int i = 0; i < eps_hat.dim(0); ++i)
        for (std::size_t k = i * per; k < (i + 1) * per; ++k)
            if (!std::isfinite(eps_hat.data[k]))
                throw DivergenceError("denoiser output is not finite at t = " + std::to_string(ts[i]) +
                                      ", c = " + conditioning_str(c[i]));
}
}  // namespace detail

// Mean squared error between drawn noise and the denoiser's prediction on the
// noised batch. Deterministic given `seed`.
inline double training_loss(const Denoiser& model, const Tensor<float>& z0, const std::vector<Conditioning>& c,
                            const NoiseSchedule& s, std::uint64_t seed) {
    Rng rng(seed);
    const NoiseDraw d = draw_training_noise(z0.shape, s, rng);
    const Tensor<float> z_t = q_sample(z0, d.t, d.eps, s);
    const Tensor<float> eps_hat = model.predict(z_t, d.t, c);
    if (eps_hat.shape != z0.shape)
        throw std::logic_error("denoiser output " + shape_str(eps_hat.shape) + " differs from latent " + shape_str(z0.shape));
    detail::check_prediction(eps_hat, d.t, c);
    double acc = 0;
    for (std::size_t i = 0; i < eps_hat.numel(); ++i) {
        const double e = double(eps_hat.data[i]) - d.eps.data[i];
        acc += e * e;
    }
    return acc / double(eps_hat.numel());
}

// ------------------------------------------------------------------ samplers

enum class SamplerKind { ddpm, ddim };

inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "ddpm") return SamplerKind::ddpm;
    if (s == "ddim") return SamplerKind::ddim;
    throw std::invalid_argument("unknown sampler '" + s + "' (expected ddpm or ddim)");
}

inline const char* to_string(SamplerKind k) { return k == SamplerKind::ddpm ? "ddpm" : "ddim"; }

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddim;
    int steps = 50;
    double eta = 0.0;
    std::uint64_t seed = 0;
};

// Evenly spaced subset tau_i = round(i * T / S), i = 1..S; always ends at T.
inline std::vector<int> ddim_timesteps(int T, int S) {
    if (S < 1 || S > T)
        throw std::invalid_argument("ddim steps " + std::to_string(S) + " must lie in 1.." + std::to_string(T));
    std::vector<int> out;
    for (int i = 1; i <= S; ++i) out.push_back(static_cast<int>(std::llround(double(i) * T / S)));
    return out;
}

// One reverse transition, returned as its Gaussian parameters.
struct Transition {
    double mean_z = 0, mean_eps = 0;  // mean = mean_z * z_t + mean_eps * eps_hat
    double stddev = 0;
};

// Ancestral step t -> t-1 with the posterior variance.
inline Transition ddpm_kernel(const NoiseSchedule& s, int t) {
    check_timestep(s, t);
    Transition k;
    k.mean_z = 1.0 / std::sqrt(s.a(t));
    k.mean_eps = -s.b(t) / (std::sqrt(s.a(t)) * std::sqrt(1.0 - s.abar(t)));
    k.stddev = std::sqrt(s.posterior_variance(t));
    return k;
}

// Generalised step t -> t_prev (t_prev = 0 means the final clean estimate).
inline Transition ddim_kernel(const NoiseSchedule& s, int t, int t_prev, double eta) {
    check_timestep(s, t);
    if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddim: previous timestep must lie in [0, t)");
    const double ab = s.abar(t), ap = s.abar(t_prev);
    const double sigma = eta * std::sqrt((1.0 - ap) / (1.0 - ab)) * std::sqrt(1.0 - ab / ap);
    // z0_hat = (z_t - sqrt(1 - ab) eps) / sqrt(ab)
    // z_prev = sqrt(ap) z0_hat + sqrt(1 - ap - sigma^2) eps + sigma noise
    Transition k;
    k.mean_z = std::sqrt(ap / ab);
    k.mean_eps = -std::sqrt(ap) * std::sqrt(1.0 - ab) / std::sqrt(ab) + std::sqrt(std::max(0.0, 1.0 - ap - sigma * sigma));
    k.stddev = sigma;
    return k;
}

template <class T>
Tensor<T> apply_transition(const Transition& k, const Tensor<T>& z_t, const Tensor<T>& eps_hat, const Tensor<T>& noise) {
    Tensor<T> out(z_t.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = static_cast<T>(k.mean_z * z_t.data[i] + k.mean_eps * eps_hat.data[i] + k.stddev * noise.data[i]);
    return out;
}

struct SampleResult {
    Latent latent;
    std::vector<int> visited;  // timesteps at which the denoiser ran, in order
    int evaluations = 0;
};

// Shared reverse loop over `path` (decreasing timesteps). z_T and every
// step's noise come from streams derived from cfg.seed.
inline SampleResult run_sampler(const Denoiser& model, const NoiseSchedule& s, const SamplerConfig& cfg,
                                const std::vector<Conditioning>& c, const Shape& latent_shape,
                                const std::optional<Latent>& z_T = std::nullopt) {
    if (latent_shape.empty() || latent_shape[0] != static_cast<int>(c.size()))
        throw std::invalid_argument("sampler: latent batch must match the number of conditioning vectors");
    std::vector<int> taus;
    if (cfg.kind == SamplerKind::ddpm) {
        for (int t = 1; t <= s.T; ++t) taus.push_back(t);
    } else {
        if (!(cfg.eta >= 0 && cfg.eta <= 1)) throw std::invalid_argument("ddim eta must lie in [0, 1]");
        taus = ddim_timesteps(s.T, cfg.steps);
    }
    SampleResult r;
    if (z_T) {
        if (z_T->shape != latent_shape) throw std::invalid_argument("sampler: z_T shape mismatch");
        r.latent = *z_T;
    } else {
        Rng rng(derive_seed(cfg.seed, "z_T"));
        r.latent = rng.normal_tensor<float>(latent_shape);
    }
    for (int i = static_cast<int>(taus.size()) - 1; i >= 0; --i) {
        const int t = taus[i];
        const int t_prev = i > 0 ? taus[i - 1] : 0;
        std::vector<int> tb(c.size(), t);
        Tensor<float> eps_hat = model.predict(r.latent, tb, c);
        ++r.evaluations;
        r.visited.push_back(t);
        if (eps_hat.shape != latent_shape) throw std::logic_error("denoiser changed the latent shape");
        const Transition k = cfg.kind == SamplerKind::ddpm ? ddpm_kernel(s, t) : ddim_kernel(s, t, t_prev, cfg.eta);
        Tensor<float> noise(latent_shape);
        if (k.stddev > 0) {
            Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t)));
            noise = rng.normal_tensor<float>(latent_shape);
        }
        r.latent = apply_transition(k, r.latent, eps_hat, noise);
        if (!r.latent.all_finite())
            throw DivergenceError(std::string(to_string(cfg.kind)) + " sampling diverged at step t = " + std::to_string(t));
    }
    std::reverse(r.visited.begin(), r.visited.end());
    return r;
}

inline SampleResult ddpm_sample(const Denoiser& model, const NoiseSchedule& s, const std::vector<Conditioning>& c,
                                const Shape& latent_shape, std::uint64_t seed) {
    return run_sampler(model, s, {SamplerKind::ddpm, s.T, 1.0, seed}, c, latent_shape);
}

inline SampleResult ddim_sample(const Denoiser& model, const NoiseSchedule& s, const SamplerConfig& cfg,
                                const std::vector<Conditioning>& c, const Shape& latent_shape,
                                const std::optional<Latent>& z_T = std::nullopt) {
    if (cfg.kind != SamplerKind::ddim) throw std::invalid_argument("ddim_sample needs a ddim sampler config");
    return run_sampler(model, s, cfg, c, latent_shape, z_T);
}

// ------------------------------------------------------------------- timing

struct TimingStats {
    int n = 0;
    double mean = 0;
    double sd = 0;
    std::string hardware;
};

inline std::string hardware_descriptor() {
    std::string model = "unknown cpu";
    std::ifstream is("/proc/cpuinfo");
    for (std::string line; std::getline(is, line);)
        if (line.rfind("model name", 0) == 0) {
            model = line.substr(line.find(':') + 2);
            break;
        }
    return model + ", " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " threads";
}

// Wall-clock seconds of `run` over n repetitions.
inline TimingStats time_sampling(const std::function<void()>& run, int n) {
    TimingStats st;
    st.hardware = hardware_descriptor();
    if (n <= 0) return st;
    run();  // untimed warm-up: first-call allocation and cache effects
    std::vector<double> secs;
    for (int i = 0; i < n; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    st.n = n;
    for (double x : secs) st.mean += x;
    st.mean /= n;
    if (n > 1) {
        for (double x : secs) st.sd += (x - st.mean) * (x - st.mean);
        st.sd = std::sqrt(st.sd / (n - 1));
    }
    return st;
}

inline json timing_json(const TimingStats& t) {
    return {{"n", t.n}, {"mean_s", t.mean}, {"sd_s", t.sd}, {"hardware", t.hardware}};
}

// ----------------------------------------------------------------- training

struct DiffusionConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    UNetConfig unet;
    int steps = 8000;
    int batch = 32;
    double lr = 1e-3;
    double lr_final_fraction = 0.05;
    std::uint64_t seed = 4321;
    SamplerConfig sampler;  // defaults used by `sample`

    void validate() const {
        std::vector<std::string> p;
        if (T < 1) p.push_back("diffusion.T must be >= 1");
        if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
            p.push_back("diffusion.beta range must satisfy 0 < start <= end < 1");
        if (sampler.kind == SamplerKind::ddim && (sampler.steps < 1 || sampler.steps > T))
            p.push_back("diffusion.sampler.steps must lie in 1..T");
        if (!(sampler.eta >= 0 && sampler.eta <= 1)) p.push_back("diffusion.sampler.eta must lie in [0, 1]");
        if (steps < 0) p.push_back("diffusion.steps must be >= 0");
        if (batch < 1) p.push_back("diffusion.batch must be >= 1");
        try {
            unet.validate();
        } catch (const ConfigError& e) {
            p.insert(p.end(), e.problems().begin(), e.problems().end());
        }
        if (!p.empty()) throw ConfigError(p);
    }

    NoiseSchedule schedule() const { return make_linear_schedule(T, beta_start, beta_end); }
};

// Latents the diffusion model trains on, already multiplied by `scale`.
struct LatentDataset {
    Latent latents;  // [N, k, d, h, w]
    std::vector<Conditioning> conditioning;
    double scale = 1.0;

    int size() const { return latents.shape.empty() ? 0 : latents.dim(0); }
    Shape item_shape() const { return {1, latents.dim(1), latents.dim(2), latents.dim(3), latents.dim(4)}; }
};

// Encodes volumes to posterior means and rescales them to unit overall
// standard deviation.
inline LatentDataset encode_dataset(const Compressor& ae, const std::vector<Volume>& vols,
                                    const std::vector<Conditioning>& cond, int batch = 8) {
    if (vols.size() != cond.size()) throw std::invalid_argument("encode_dataset: one conditioning per volume required");
    if (vols.empty()) throw std::invalid_argument("encode_dataset: no volumes");
    LatentDataset ds;
    ds.conditioning = cond;
    std::vector<float> all;
    Shape item;
    for (std::size_t i = 0; i < vols.size(); i += batch) {
        std::vector<const Volume*> b;
        for (std::size_t j = i; j < std::min(vols.size(), i + batch); ++j) b.push_back(&vols[j]);
        PosteriorParams p = ae.encode(stack_volumes(b));
        item = p.mean.shape;
        all.insert(all.end(), p.mean.data.begin(), p.mean.data.end());
    }
    item[0] = static_cast<int>(vols.size());
    ds.latents = Tensor<float>(item, std::move(all));
    double m = 0, sq = 0;
    for (float x : ds.latents.data) m += x, sq += double(x) * x;
    m /= ds.latents.numel();
    const double sd = std::sqrt(std::max(1e-12, sq / ds.latents.numel() - m * m));
    ds.scale = 1.0 / sd;
    for (auto& x : ds.latents.data) x = static_cast<float>(x * ds.scale);
    return ds;
}

class DiffusionModel {
public:
    DiffusionModel(DiffusionConfig cfg, Shape latent_item_shape)
        : cfg_(std::move(cfg)), latent_shape_(std::move(latent_item_shape)), denoiser_(cfg_.unet, cfg_.seed) {
        cfg_.validate();
        schedule_ = cfg_.schedule();
    }

    const DiffusionConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const Denoiser& denoiser() const { return denoiser_; }
    UNet<float>& net() { return denoiser_.net; }
    const Shape& latent_item_shape() const { return latent_shape_; }
    double latent_scale = 1.0;

    // Samples n latents (already divided by latent_scale, ready to decode).
    SampleResult sample(const std::vector<Conditioning>& c, const SamplerConfig& sc,
                        const std::optional<Latent>& z_T = std::nullopt) const {
        Shape s = latent_shape_;
        s[0] = static_cast<int>(c.size());
        SampleResult r = sc.kind == SamplerKind::ddpm ? run_sampler(denoiser_, schedule_, sc, c, s, z_T)
                                                      : ddim_sample(denoiser_, schedule_, sc, c, s, z_T);
        for (auto& x : r.latent.data) x = static_cast<float>(x / latent_scale);
        return r;
    }

    json manifest() const {
        json j;
        j["kind"] = "diffusion";
        j["T"] = cfg_.T;
        j["beta_range"] = {cfg_.beta_start, cfg_.beta_end};
        j["latent_shape"] = latent_shape_;
        j["latent_scale"] = latent_scale;
        j["conditioning"] = {{"concat_channels", conditioning_channels},
                             {"context_dim", cfg_.unet.context_dim},
                             {"context_tokens", cfg_.unet.context_tokens}};
        j["unet"] = unet_config_json(cfg_.unet);
        j["steps"] = cfg_.steps;
        j["batch"] = cfg_.batch;
        j["lr"] = cfg_.lr;
        j["seed"] = cfg_.seed;
        return j;
    }

private:
    DiffusionConfig cfg_;
    Shape latent_shape_;
    NoiseSchedule schedule_;
    UNetDenoiser denoiser_;
};

struct DiffusionTrainer {
    DiffusionModel& model;
    nn::Adam<float> opt;
    long step = 0;
    LossCurve curve;
    std::string fingerprint;

    explicit DiffusionTrainer(DiffusionModel& m)
        : model(m), opt(m.net().params(), {m.config().lr, 0.9, 0.999, 1e-8, 1.0}) {}

    double lr_at(long s) const {
        const auto& c = model.config();
        const double t = c.steps > 0 ? std::min(1.0, double(s) / c.steps) : 1.0;
        return c.lr * (c.lr_final_fraction + (1 - c.lr_final_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
    }

    void train(const LatentDataset& data, long until, const std::function<void(long, double)>& on_step = {}) {
        if (data.size() == 0) throw std::invalid_argument("train_diffusion: latent dataset is empty");
        const auto& c = model.config();
        const NoiseSchedule& s = model.schedule();
        model.latent_scale = data.scale;
        const std::size_t per = data.latents.inner(1);
        for (; step < until; ++step) {
            Rng rng(derive_seed(c.seed, static_cast<std::uint64_t>(step)));
            Shape bs = data.item_shape();
            bs[0] = c.batch;
            Tensor<float> z0(bs);
            std::vector<Conditioning> cb;
            for (int b = 0; b < c.batch; ++b) {
                const int idx = rng.uniform_int(0, data.size() - 1);
                std::copy_n(data.latents.ptr() + idx * per, per, z0.ptr() + b * per);
                cb.push_back(data.conditioning[idx]);
            }
            const NoiseDraw d = draw_training_noise(bs, s, rng);
            opt.set_lr(lr_at(step));
            auto pred = model.net().predict_graph(q_sample(z0, d.t, d.eps, s), d.t, cb);
            detail::check_prediction(pred.value(), d.t, cb);
            auto loss = ag::mse(pred, ag::constant(d.eps));
            const double lv = loss.item();
            if (!std::isfinite(lv)) throw DivergenceError("diffusion step " + std::to_string(step) + ": loss diverged");
            opt.zero_grad();
            ag::backward(loss);
            opt.step();
            curve.add(step, "mse", lv);
            if (on_step) on_step(step, lv);
        }
    }

    void save(const fs::path& stem) const {
        fs::create_directories(stem.parent_path());
        const std::string s = stem.string();
        nn::save_params(model.net().params(), s + ".bin");
        opt.save_state(s + ".opt.bin");
        json j = model.manifest();
        j["step"] = step;
        j["data_fingerprint"] = fingerprint;
        write_text_atomic(s + ".json", j.dump(2) + "\n");
    }

    void resume(const fs::path& stem) {
        const std::string s = stem.string();
        const json j = read_json(s + ".json");
        auto ps = model.net().params();
        nn::load_params(ps, s + ".bin");
        opt.load_state(s + ".opt.bin");
        step = j.at("step").get<long>();
        fingerprint = j.value("data_fingerprint", "");
        model.latent_scale = j.at("latent_scale").get<double>();
    }
};

inline std::unique_ptr<DiffusionModel> load_diffusion(const fs::path& stem, std::optional<SamplerConfig> sampler = {}) {
    const std::string s = stem.string();
    if (!fs::exists(s + ".json") || !fs::exists(s + ".bin"))
        throw MissingArtifact("train-ldm", "diffusion checkpoint " + s + ".{bin,json} not found");
    const json j = read_json(s + ".json");
    DiffusionConfig c;
    c.T = j.at("T").get<int>();
    c.beta_start = j.at("beta_range")[0].get<double>();
    c.beta_end = j.at("beta_range")[1].get<double>();
    c.unet = unet_config_from_json(j.at("unet"));
    c.steps = j.at("steps").get<int>();
    c.batch = j.at("batch").get<int>();
    c.lr = j.at("lr").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (sampler) c.sampler = *sampler;
    else c.sampler.steps = std::min(c.sampler.steps, c.T);
    auto m = std::make_unique<DiffusionModel>(c, j.at("latent_shape").get<Shape>());
    auto ps = m->net().params();
    nn::load_params(ps, s + ".bin");
    m->latent_scale = j.at("latent_scale").get<double>();
    return m;
}

}  // namespace bldm

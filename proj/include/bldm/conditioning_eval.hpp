#pragma once

// Conditioning fidelity: inputted-vs-measured correlations for ventricular
// volume and age, and the out-of-range extrapolation sweep.

#include "bldm/metrics.hpp"
#include "bldm/png.hpp"

namespace bldm {

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& x_name = "xs",
                      const std::string& y_name = "ys") {
    if (xs.size() != ys.size())
        throw std::invalid_argument("pearson: series lengths differ (" + std::to_string(xs.size()) + " vs " +
                                    std::to_string(ys.size()) + ")");
    if (xs.size() < 3) throw std::invalid_argument("pearson: need at least 3 samples, got " + std::to_string(xs.size()));
    const double n = double(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0)) throw std::invalid_argument("pearson: series '" + x_name + "' has zero variance");
    if (!(syy > 0)) throw std::invalid_argument("pearson: series '" + y_name + "' has zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CorrelationReport {
    std::string quantity;
    double r = 0;
    int n = 0;
    double slope = 0, intercept = 0;
    std::vector<std::pair<double, double>> table;  // (inputted, measured)
};

inline CorrelationReport correlation_report(const std::string& quantity, const std::vector<double>& inputted,
                                            const std::vector<double>& measured) {
    CorrelationReport rep;
    rep.quantity = quantity;
    rep.r = pearson(inputted, measured, "inputted " + quantity, "measured " + quantity);
    rep.n = static_cast<int>(inputted.size());
    const double mx = std::accumulate(inputted.begin(), inputted.end(), 0.0) / rep.n;
    const double my = std::accumulate(measured.begin(), measured.end(), 0.0) / rep.n;
    double sxy = 0, sxx = 0;
    for (int i = 0; i < rep.n; ++i) {
        sxy += (inputted[i] - mx) * (measured[i] - my);
        sxx += (inputted[i] - mx) * (inputted[i] - mx);
    }
    rep.slope = sxy / sxx;
    rep.intercept = my - rep.slope * mx;
    for (int i = 0; i < rep.n; ++i) rep.table.push_back({inputted[i], measured[i]});
    return rep;
}

inline json to_json(const CorrelationReport& r) {
    json rows = json::array();
    for (const auto& [a, b] : r.table) rows.push_back({{"inputted", a}, {"measured", b}});
    return {{"quantity", r.quantity}, {"r", r.r},         {"n", r.n},
            {"slope", r.slope},       {"intercept", r.intercept}, {"samples", rows}};
}

// Scatter of measured against inputted values with the identity line.
inline Image scatter_plot(const CorrelationReport& r, int size = 480) {
    Image img(size, size);
    const int m = 40;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [a, b] : r.table) lo = std::min({lo, a, b}), hi = std::max({hi, a, b});
    if (!(hi > lo)) hi = lo + 1;
    const double pad = 0.05 * (hi - lo);
    lo -= pad, hi += pad;
    auto px = [&](double v) { return m + static_cast<int>((v - lo) / (hi - lo) * (size - 2 * m)); };
    auto py = [&](double v) { return size - 1 - px(v); };
    const Rgb axis{0, 0, 0}, ident{170, 170, 170}, point{31, 119, 180};
    img.line(m, size - m, size - m, size - m, axis);
    img.line(m, size - m, m, m, axis);
    img.line(px(lo), py(lo), px(hi), py(hi), ident);
    for (const auto& [a, b] : r.table) img.dot(px(a), py(b), 3, point);
    return img;
}

// ---------------------------------------------------------- generator hooks

// Produces one volume for normalized conditioning c; the seed is the only
// randomness source.
using VolumeGenerator = std::function<Volume(const Conditioning& c, std::uint64_t seed)>;

// Perfect generator: builds the phantom described by c directly. Ventricular
// values below zero mm^3 render without a cavity. When the jittered geometry
// does not fit, the jitter seed is redrawn (deterministically) while c stays
// fixed.
inline VolumeGenerator oracle_generator(const CovariateBounds& bounds, const VolumeContract& contract,
                                        double noise = 0.01) {
    return [=](const Conditioning& c, std::uint64_t seed) {
        PhantomSpec spec;
        spec.covariates = denormalize_covariates(c, bounds);
        spec.covariates.ventricular_volume = std::max(0.0, spec.covariates.ventricular_volume);
        spec.noise_level = noise;
        std::string last;
        for (int attempt = 0; attempt < 20; ++attempt) {
            spec.geometry_seed = attempt == 0 ? seed : derive_seed(seed, static_cast<std::uint64_t>(attempt));
            try {
                return generate_phantom(spec, contract.shape, contract.spacing);
            } catch (const std::invalid_argument& e) {
                last = e.what();
            }
        }
        throw std::invalid_argument(last);
    };
}

inline VolumeGenerator ldm_generator(const Compressor& ae, const DiffusionModel& ldm, SamplerConfig sc,
                                     const Spacing3& spacing) {
    return [&ae, &ldm, sc, spacing](const Conditioning& c, std::uint64_t seed) {
        SamplerConfig s = sc;
        s.seed = seed;
        const SampleResult r = ldm.sample({c}, s);
        return ae.decode_volumes(r.latent, spacing).front();
    };
}

// Conditioning vectors for correlation sweeps: every covariate uniform over
// [0, 1] except sex, which is Bernoulli(0.5).
inline std::vector<Conditioning> sweep_conditionings(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Conditioning> out;
    for (int i = 0; i < n; ++i) {
        Conditioning c{};
        c[cond::age] = rng.uniform();
        c[cond::sex] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        c[cond::ventricular] = rng.uniform();
        c[cond::brain] = rng.uniform();
        out.push_back(c);
    }
    return out;
}

// n generated volumes across a ventricular sweep, measured with the phantom
// oracle; correlation of inputted vs measured mm^3.
inline CorrelationReport eval_volume_conditioning(const VolumeGenerator& gen, int n, const CovariateBounds& bounds,
                                                  std::uint64_t seed, std::vector<Volume>* keep = nullptr) {
    const auto cs = sweep_conditionings(n, derive_seed(seed, "volume-sweep"));
    std::vector<double> in, out;
    for (int i = 0; i < n; ++i) {
        Volume v;
        try {
            v = gen(cs[i], derive_seed(seed, static_cast<std::uint64_t>(i)));
        } catch (const std::exception& e) {
            throw std::runtime_error("volume conditioning: sample " + std::to_string(i) + " failed: " + e.what());
        }
        in.push_back(unminmax(cs[i][cond::ventricular], bounds.ventricular));
        out.push_back(oracle_volumes(v).ventricular);
        if (keep) keep->push_back(std::move(v));
    }
    return correlation_report("ventricular_volume_mm3", in, out);
}

// ------------------------------------------------------------ age regressor

struct AgeRegressor {
    VolumeCnn<float> net;
    CovariateBounds bounds;
    std::uint64_t seed;
    int steps_trained = 0;

    explicit AgeRegressor(const CovariateBounds& b = {}, std::uint64_t s = 77)
        : net({8, 16, 32, 32}, 1, derive_seed(s, "age-regressor-init")), bounds(b), seed(s) {}

    // L1 regression on normalized age; returns the mean loss of the last 10% of steps.
    double train(const std::vector<Volume>& vols, const std::vector<double>& ages_years, int steps, int batch = 8,
                 double lr = 2e-3) {
        if (vols.empty() || vols.size() != ages_years.size())
            throw std::invalid_argument("age regressor: need one age per training volume");
        nn::Adam<float> opt(net.params(), {lr, 0.9, 0.999, 1e-8, 1.0});
        double tail = 0;
        int tail_n = 0;
        for (int s = 0; s < steps; ++s) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
            const double t = double(s) / std::max(1, steps);
            opt.set_lr(lr * (0.05 + 0.95 * 0.5 * (1 + std::cos(std::numbers::pi * t))));
            std::vector<const Volume*> b;
            Tensor<float> target({batch, 1});
            for (int i = 0; i < batch; ++i) {
                const int k = rng.uniform_int(0, static_cast<int>(vols.size()) - 1);
                b.push_back(&vols[k]);
                target.data[i] = static_cast<float>(minmax(ages_years[k], bounds.age));
            }
            auto loss = ag::l1(net(ag::constant(stack_volumes(b))), ag::constant(target));
            if (s >= steps - std::max(1, steps / 10)) tail += loss.item(), ++tail_n;
            opt.zero_grad();
            ag::backward(loss);
            opt.step();
        }
        steps_trained += steps;
        return tail_n ? tail / tail_n : 0.0;
    }

    double predict_years(const Volume& v) const {
        ag::NoGradGuard ng;
        const auto y = net(ag::constant(stack_volumes({&v}))).value();
        return unminmax(y.data[0], bounds.age);
    }

    void save(const fs::path& stem) {
        fs::create_directories(stem.parent_path());
        nn::save_params(net.params(), stem.string() + ".bin");
        write_text_atomic(stem.string() + ".json",
                          json{{"kind", "age-regressor"},
                               {"seed", seed},
                               {"steps", steps_trained},
                               {"age_range", {bounds.age.min, bounds.age.max}}}
                                  .dump(2) +
                              "\n");
    }

    static std::unique_ptr<AgeRegressor> load(const fs::path& stem) {
        if (!fs::exists(stem.string() + ".bin"))
            throw MissingArtifact("eval-conditioning", "age regressor " + stem.string() + ".bin not found");
        const json j = read_json(stem.string() + ".json");
        CovariateBounds b;
        b.age = {j.at("age_range")[0].get<double>(), j.at("age_range")[1].get<double>()};
        auto r = std::make_unique<AgeRegressor>(b, j.at("seed").get<std::uint64_t>());
        r->steps_trained = j.at("steps").get<int>();
        auto ps = r->net.params();
        nn::load_params(ps, stem.string() + ".bin");
        return r;
    }
};

// Regressor applied to given volumes with known ages (no generation).
inline CorrelationReport regressor_sanity(const AgeRegressor& reg, const std::vector<Volume>& vols,
                                          const std::vector<double>& ages_years) {
    std::vector<double> pred;
    for (const auto& v : vols) pred.push_back(reg.predict_years(v));
    return correlation_report("age_years", ages_years, pred);
}

inline CorrelationReport eval_age_conditioning(const VolumeGenerator& gen, const AgeRegressor& reg, int n,
                                               const CovariateBounds& bounds, std::uint64_t seed) {
    const auto cs = sweep_conditionings(n, derive_seed(seed, "age-sweep"));
    std::vector<double> in, out;
    for (int i = 0; i < n; ++i) {
        Volume v;
        try {
            v = gen(cs[i], derive_seed(seed, static_cast<std::uint64_t>(i)));
        } catch (const std::exception& e) {
            throw std::runtime_error("age conditioning: sample " + std::to_string(i) + " failed: " + e.what());
        }
        in.push_back(unminmax(cs[i][cond::age], bounds.age));
        out.push_back(reg.predict_years(v));
    }
    return correlation_report("age_years", in, out);
}

// ----------------------------------------------------- extrapolation sweep

struct ExtrapolationRow {
    double value;
    double ventricular_mm3;
    double brain_mm3;
};

struct ExtrapolationResult {
    std::vector<ExtrapolationRow> rows;
    std::vector<Volume> volumes;
};

// One volume per normalized ventricular value; every other covariate is held
// at 0.5 and every value reuses the same seed.
inline ExtrapolationResult extrapolation_sweep(const VolumeGenerator& gen, const std::vector<double>& values,
                                               std::uint64_t seed) {
    ExtrapolationResult r;
    for (double v : values) {
        Conditioning c{0.5, 0.5, v, 0.5};
        Volume vol = gen(c, seed);
        const OracleVolumes o = oracle_volumes(vol);
        r.rows.push_back({v, o.ventricular, o.brain});
        r.volumes.push_back(std::move(vol));
    }
    return r;
}

inline json to_json(const ExtrapolationResult& r) {
    json rows = json::array();
    for (const auto& x : r.rows)
        rows.push_back({{"value", x.value}, {"ventricular_mm3", x.ventricular_mm3}, {"brain_mm3", x.brain_mm3}});
    return rows;
}

// Central axial (top row) and coronal (bottom row) slices, one column per
// volume, intensities clamped to [0, 1].
inline Image slice_montage(const std::vector<Volume>& vols, int zoom = 4) {
    if (vols.empty()) return Image(1, 1);
    const Index3 s = vols.front().shape();
    const int cw = s[2] * zoom, rh1 = s[1] * zoom, rh2 = s[0] * zoom;
    Image img(static_cast<int>(vols.size()) * (cw + 2), rh1 + rh2 + 2, {0, 0, 0});
    auto grey = [](float x) {
        const auto g = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(double(x), 0.0, 1.0)));
        return Rgb{g, g, g};
    };
    for (std::size_t i = 0; i < vols.size(); ++i) {
        const Volume& v = vols[i];
        const int x0 = static_cast<int>(i) * (cw + 2);
        for (int h = 0; h < s[1]; ++h)
            for (int w = 0; w < s[2]; ++w)
                for (int a = 0; a < zoom; ++a)
                    for (int b = 0; b < zoom; ++b) img.set(x0 + w * zoom + b, h * zoom + a, grey(v.at(s[0] / 2, h, w)));
        for (int d = 0; d < s[0]; ++d)
            for (int w = 0; w < s[2]; ++w)
                for (int a = 0; a < zoom; ++a)
                    for (int b = 0; b < zoom; ++b)
                        img.set(x0 + w * zoom + b, rh1 + 2 + d * zoom + a, grey(v.at(d, s[1] / 2, w)));
    }
    return img;
}

}  // namespace bldm

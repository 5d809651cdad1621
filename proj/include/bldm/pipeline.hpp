#pragma once

// Pipeline configuration, run directories, per-subcommand stages, dataset
// packaging and manifest verification.

#include <ctime>
#include <iostream>

#include "bldm/conditioning_eval.hpp"

namespace bldm {

// ------------------------------------------------------------------- config

struct DataConfig {
    VolumeContract contract;
    int n_train = 200;
    int n_holdout = 20;
    double noise = 0.01;
    CovariateBounds bounds;
    double sex_p = 0.47;  // P(male) when drawing cohort covariates
};

struct EvalConfig {
    std::string extractor = "trained-classifier";
    int feature_dim = 8;  // random-projection only
    int n_pairs = 50;
    int n_fid = 100;  // generated samples for FID
    int classifier_steps = 600;
    int regressor_steps = 1500;
    int n_conditioning = 200;
    std::vector<double> extrapolation{-0.5, 0.0, 0.5, 1.0, 1.5, 1.9};
};

struct PackageConfig {
    int n = 500;
    std::string distribution = "uniform";  // or "empirical"
    double sex_p = 0.47;
    std::uintmax_t reserve_bytes = 64ull << 20;  // headroom kept free beyond the estimate
};

struct Seeds {
    std::uint64_t data = 1, compressor = 2, diffusion = 3, eval = 4, package = 5, sample = 6;
};

struct PipelineConfig {
    DataConfig data;
    CompressorConfig compressor;
    DiffusionConfig diffusion;
    EvalConfig eval;
    PackageConfig package;
    Seeds seeds;
    std::string output_root = "runs";
    int checkpoint_every = 250;

    // Seeds are stored once under `seeds`; the module configs pick them up here.
    void sync_seeds() {
        compressor.seed = seeds.compressor;
        diffusion.seed = seeds.diffusion;
        diffusion.unet.latent_channels = compressor.latent_channels;
    }
};

namespace detail {

inline json range_json(const Range& r) { return json::array({r.min, r.max}); }

inline json bounds_json(const CovariateBounds& b) {
    return {{"age", range_json(b.age)}, {"ventricular_volume", range_json(b.ventricular)},
            {"brain_volume_norm", range_json(b.brain)}};
}

}  // namespace detail

inline json to_json(const PipelineConfig& c) {
    const auto& d = c.data;
    const auto& a = c.compressor;
    const auto& f = c.diffusion;
    return {
        {"data",
         {{"shape", d.contract.shape},
          {"spacing", d.contract.spacing},
          {"n_train", d.n_train},
          {"n_holdout", d.n_holdout},
          {"noise", d.noise},
          {"sex_p", d.sex_p},
          {"bounds", detail::bounds_json(d.bounds)}}},
        {"compressor",
         {{"factor", a.factor},
          {"channels", a.latent_channels},
          {"encoder_channels", a.encoder_channels},
          {"decoder_channels", a.decoder_channels},
          {"loss_weights",
           {{"l1", a.weights.l1}, {"perceptual", a.weights.perceptual}, {"adversarial", a.weights.adversarial}, {"kl", a.weights.kl}}},
          {"adversarial_warmup", a.adversarial_warmup},
          {"logvar_range", {a.logvar_min, a.logvar_max}},
          {"steps", a.steps},
          {"batch", a.batch},
          {"lr", a.lr},
          {"disc_lr", a.disc_lr}}},
        {"diffusion",
         {{"T", f.T},
          {"beta_range", {f.beta_start, f.beta_end}},
          {"unet", unet_config_json(f.unet)},
          {"steps", f.steps},
          {"batch", f.batch},
          {"lr", f.lr},
          {"sampler", {{"kind", to_string(f.sampler.kind)}, {"steps", f.sampler.steps}, {"eta", f.sampler.eta}}}}},
        {"eval",
         {{"extractor", c.eval.extractor},
          {"feature_dim", c.eval.feature_dim},
          {"n_pairs", c.eval.n_pairs},
          {"n_fid", c.eval.n_fid},
          {"classifier_steps", c.eval.classifier_steps},
          {"regressor_steps", c.eval.regressor_steps},
          {"n_conditioning", c.eval.n_conditioning},
          {"extrapolation", c.eval.extrapolation}}},
        {"package",
         {{"n", c.package.n},
          {"distribution", c.package.distribution},
          {"sex_p", c.package.sex_p},
          {"reserve_bytes", c.package.reserve_bytes}}},
        {"seeds",
         {{"data", c.seeds.data},
          {"compressor", c.seeds.compressor},
          {"diffusion", c.seeds.diffusion},
          {"eval", c.seeds.eval},
          {"package", c.seeds.package},
          {"sample", c.seeds.sample}}},
        {"output_root", c.output_root},
        {"checkpoint_every", c.checkpoint_every},
    };
}

namespace detail {

// Reads fields of one JSON object onto defaults, recording type errors and
// unknown keys under their dotted path.
class FieldReader {
public:
    FieldReader(const json& j, std::string path, std::vector<std::string>& problems)
        : j_(j), path_(std::move(path)), problems_(problems) {
        if (!j_.is_object()) problems_.push_back(path_ + ": expected an object");
    }

    template <class V>
    void get(const char* key, V& out) {
        seen_.push_back(key);
        if (!j_.is_object() || !j_.contains(key)) return;
        try {
            out = j_.at(key).get<V>();
        } catch (const std::exception&) {
            problems_.push_back(path_ + "." + key + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
        }
    }

    void range(const char* key, Range& r) {
        std::vector<double> v{r.min, r.max};
        get(key, v);
        if (v.size() != 2) problems_.push_back(path_ + "." + key + ": expected [min, max]");
        else r = {v[0], v[1]};
    }

    const json* child(const char* key) {
        seen_.push_back(key);
        return j_.is_object() && j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() {
        if (!j_.is_object()) return;
        for (const auto& [k, _] : j_.items())
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
                problems_.push_back(path_ + "." + k + ": unknown field");
    }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string>& problems_;
    std::vector<std::string> seen_;
};

}  // namespace detail

// Cross-module constraint checks; throws ConfigError listing every problem.
inline void validate(const PipelineConfig& c) {
    std::vector<std::string> p;
    auto collect = [&](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            p.insert(p.end(), e.problems().begin(), e.problems().end());
        } catch (const std::invalid_argument& e) {
            p.push_back(e.what());
        }
    };
    const auto& d = c.data;
    for (int i = 0; i < 3; ++i) {
        if (d.contract.shape[i] <= 0) p.push_back("data.shape: components must be positive");
        if (!(d.contract.spacing[i] > 0)) p.push_back("data.spacing: components must be positive");
        if (d.contract.shape[i] > 0 && c.compressor.factor > 0 && d.contract.shape[i] % c.compressor.factor != 0)
            p.push_back("data.shape: " + index3_str(d.contract.shape) + " is not divisible by compressor.factor " +
                        std::to_string(c.compressor.factor));
    }
    if (d.contract.factor != c.compressor.factor) p.push_back("data contract factor differs from compressor.factor");
    if (d.n_train < 1) p.push_back("data.n_train must be >= 1");
    if (d.n_holdout < 0) p.push_back("data.n_holdout must be >= 0");
    if (!(d.noise >= 0)) p.push_back("data.noise must be >= 0");
    if (!(d.sex_p >= 0 && d.sex_p <= 1)) p.push_back("data.sex_p must lie in [0, 1]");
    collect([&] { d.bounds.validate(); });
    collect([&] { c.compressor.validate(); });
    collect([&] { c.diffusion.validate(); });
    if (c.eval.extractor != "random-projection" && c.eval.extractor != "trained-classifier")
        p.push_back("eval.extractor must be random-projection or trained-classifier");
    if (c.eval.n_pairs < 0) p.push_back("eval.n_pairs must be >= 0");
    if (c.eval.n_fid < 2) p.push_back("eval.n_fid must be >= 2");
    if (c.eval.n_conditioning < 3) p.push_back("eval.n_conditioning must be >= 3");
    if (c.package.n < 0) p.push_back("package.n must be >= 0");
    if (c.package.distribution != "uniform" && c.package.distribution != "empirical")
        p.push_back("package.distribution must be uniform or empirical");
    if (!(c.package.sex_p >= 0 && c.package.sex_p <= 1)) p.push_back("package.sex_p must lie in [0, 1]");
    if (c.checkpoint_every < 1) p.push_back("checkpoint_every must be >= 1");
    if (c.diffusion.unet.latent_channels != c.compressor.latent_channels)
        p.push_back("diffusion.unet.latent_channels must equal compressor.channels");
    if (!p.empty()) throw ConfigError(p);
}

// Overlays `j` on the defaults, then validates.
inline PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    std::vector<std::string> p;
    detail::FieldReader root(j, "config", p);
    if (const json* dj = root.child("data")) {
        detail::FieldReader r(*dj, "data", p);
        r.get("shape", c.data.contract.shape);
        r.get("spacing", c.data.contract.spacing);
        r.get("n_train", c.data.n_train);
        r.get("n_holdout", c.data.n_holdout);
        r.get("noise", c.data.noise);
        r.get("sex_p", c.data.sex_p);
        if (const json* bj = r.child("bounds")) {
            detail::FieldReader b(*bj, "data.bounds", p);
            b.range("age", c.data.bounds.age);
            b.range("ventricular_volume", c.data.bounds.ventricular);
            b.range("brain_volume_norm", c.data.bounds.brain);
            b.finish();
        }
        r.finish();
    }
    if (const json* cj = root.child("compressor")) {
        auto& a = c.compressor;
        detail::FieldReader r(*cj, "compressor", p);
        r.get("factor", a.factor);
        r.get("channels", a.latent_channels);
        r.get("encoder_channels", a.encoder_channels);
        r.get("decoder_channels", a.decoder_channels);
        if (const json* wj = r.child("loss_weights")) {
            detail::FieldReader w(*wj, "compressor.loss_weights", p);
            w.get("l1", a.weights.l1);
            w.get("perceptual", a.weights.perceptual);
            w.get("adversarial", a.weights.adversarial);
            w.get("kl", a.weights.kl);
            w.finish();
        }
        r.get("adversarial_warmup", a.adversarial_warmup);
        Range lv{a.logvar_min, a.logvar_max};
        r.range("logvar_range", lv);
        a.logvar_min = lv.min, a.logvar_max = lv.max;
        r.get("steps", a.steps);
        r.get("batch", a.batch);
        r.get("lr", a.lr);
        r.get("disc_lr", a.disc_lr);
        r.finish();
    }
    if (const json* fj = root.child("diffusion")) {
        auto& f = c.diffusion;
        detail::FieldReader r(*fj, "diffusion", p);
        r.get("T", f.T);
        Range br{f.beta_start, f.beta_end};
        r.range("beta_range", br);
        f.beta_start = br.min, f.beta_end = br.max;
        if (const json* uj = r.child("unet")) {
            detail::FieldReader u(*uj, "diffusion.unet", p);
            u.get("latent_channels", f.unet.latent_channels);
            u.get("channels", f.unet.channels);
            u.get("time_dim", f.unet.time_dim);
            u.get("context_dim", f.unet.context_dim);
            u.get("context_tokens", f.unet.context_tokens);
            u.get("groups", f.unet.groups);
            u.finish();
        }
        r.get("steps", f.steps);
        r.get("batch", f.batch);
        r.get("lr", f.lr);
        if (const json* sj = r.child("sampler")) {
            detail::FieldReader s(*sj, "diffusion.sampler", p);
            std::string kind = to_string(f.sampler.kind);
            s.get("kind", kind);
            try {
                f.sampler.kind = sampler_kind_from_string(kind);
            } catch (const std::exception& e) {
                p.push_back(std::string("diffusion.sampler.kind: ") + e.what());
            }
            s.get("steps", f.sampler.steps);
            s.get("eta", f.sampler.eta);
            s.finish();
        }
        r.finish();
    }
    if (const json* ej = root.child("eval")) {
        detail::FieldReader r(*ej, "eval", p);
        r.get("extractor", c.eval.extractor);
        r.get("feature_dim", c.eval.feature_dim);
        r.get("n_pairs", c.eval.n_pairs);
        r.get("n_fid", c.eval.n_fid);
        r.get("classifier_steps", c.eval.classifier_steps);
        r.get("regressor_steps", c.eval.regressor_steps);
        r.get("n_conditioning", c.eval.n_conditioning);
        r.get("extrapolation", c.eval.extrapolation);
        r.finish();
    }
    if (const json* pj = root.child("package")) {
        detail::FieldReader r(*pj, "package", p);
        r.get("n", c.package.n);
        r.get("distribution", c.package.distribution);
        r.get("sex_p", c.package.sex_p);
        r.get("reserve_bytes", c.package.reserve_bytes);
        r.finish();
    }
    if (const json* sj = root.child("seeds")) {
        detail::FieldReader r(*sj, "seeds", p);
        r.get("data", c.seeds.data);
        r.get("compressor", c.seeds.compressor);
        r.get("diffusion", c.seeds.diffusion);
        r.get("eval", c.seeds.eval);
        r.get("package", c.seeds.package);
        r.get("sample", c.seeds.sample);
        r.finish();
    }
    root.get("output_root", c.output_root);
    root.get("checkpoint_every", c.checkpoint_every);
    root.finish();
    c.data.contract.factor = c.compressor.factor;
    c.sync_seeds();
    try {
        validate(c);
    } catch (const ConfigError& e) {
        p.insert(p.end(), e.problems().begin(), e.problems().end());
    }
    if (!p.empty()) throw ConfigError(p);
    return c;
}

inline PipelineConfig load_config(const fs::path& path) {
    json j;
    try {
        j = read_json(path);
    } catch (const json::parse_error& e) {
        throw ConfigError({path.string() + ": not valid JSON (" + e.what() + ")"});
    } catch (const std::runtime_error& e) {
        throw ConfigError({e.what()});
    }
    return config_from_json(j);
}

inline std::string config_fingerprint(const PipelineConfig& c) {
    json j = to_json(c);
    j.erase("output_root");
    return sha256_hex(j.dump());
}

// ---------------------------------------------------------------- run layout

struct RunContext {
    fs::path dir;
    PipelineConfig cfg;
    std::ostream* log = &std::cerr;

    fs::path data_dir() const { return dir / "data"; }
    fs::path checkpoints() const { return dir / "checkpoints"; }
    fs::path samples() const { return dir / "samples"; }
    fs::path reports() const { return dir / "reports"; }
    fs::path compressor_stem() const { return checkpoints() / "compressor"; }
    fs::path diffusion_stem() const { return checkpoints() / "diffusion"; }
    fs::path classifier_stem() const { return checkpoints() / "feature_classifier"; }
    fs::path regressor_stem() const { return checkpoints() / "age_regressor"; }

    void note(const std::string& s) const {
        if (log) *log << s << std::endl;
    }
};

inline std::string timestamp_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

inline fs::path resolve_output_root(const PipelineConfig& c) {
    if (const char* env = std::getenv("BRAINLDM_OUTPUT_ROOT"); env && *env) return env;
    return c.output_root;
}

// Writes the exact config that produced the artifacts in `dir`.
inline void snapshot_config(const fs::path& dir, const PipelineConfig& c) {
    fs::create_directories(dir);
    write_text_atomic(dir / "config.json", to_json(c).dump(2) + "\n");
}

inline RunContext open_run(const fs::path& dir, const PipelineConfig& c) {
    RunContext ctx{dir, c};
    for (const auto& d : {ctx.dir, ctx.checkpoints(), ctx.samples(), ctx.reports()}) fs::create_directories(d);
    snapshot_config(ctx.dir, c);
    return ctx;
}

// ------------------------------------------------------------------ gen-data

inline Covariates draw_covariates(Rng& rng, const CovariateBounds& b, double sex_p) {
    Covariates c;
    c.age = b.age.min + rng.uniform() * (b.age.max - b.age.min);
    c.sex = rng.bernoulli(sex_p) ? 1.0 : 0.0;
    c.ventricular_volume = b.ventricular.min + rng.uniform() * (b.ventricular.max - b.ventricular.min);
    c.brain_volume_norm = b.brain.min + rng.uniform() * (b.brain.max - b.brain.min);
    return c;
}

// Phantom for cohort item `index`; covariates are redrawn (deterministically)
// until the geometry is feasible.
inline std::pair<ItemRecord, Volume> cohort_item(const DataConfig& d, std::uint64_t seed, int index,
                                                 const std::string& prefix) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(index)), static_cast<std::uint64_t>(attempt)));
        PhantomSpec spec;
        spec.covariates = draw_covariates(rng, d.bounds, d.sex_p);
        spec.geometry_seed = rng.engine()();
        spec.noise_level = d.noise;
        try {
            Volume v = generate_phantom(spec, d.contract.shape, d.contract.spacing);
            char id[32];
            std::snprintf(id, sizeof id, "%s%05d", prefix.c_str(), index);
            ItemRecord r{id, spec.covariates, normalize_covariates(spec.covariates, d.bounds), spec.geometry_seed,
                         VolumeSource::phantom, std::string(id) + ".nii"};
            return {r, std::move(v)};
        } catch (const std::invalid_argument&) {
        }
    }
    throw std::runtime_error("cohort item " + std::to_string(index) + ": no feasible covariates found");
}

struct Cohort {
    std::vector<ItemRecord> items;
    std::vector<Volume> volumes;

    std::vector<Conditioning> conditioning() const {
        std::vector<Conditioning> c;
        for (const auto& r : items) c.push_back(r.normalized);
        return c;
    }
    std::vector<double> ages() const {
        std::vector<double> a;
        for (const auto& r : items) a.push_back(r.covariates.age);
        return a;
    }
};

inline Cohort make_cohort(const DataConfig& d, std::uint64_t seed, int n, const std::string& prefix) {
    Cohort c;
    for (int i = 0; i < n; ++i) {
        auto [r, v] = cohort_item(d, seed, i, prefix);
        c.items.push_back(std::move(r));
        c.volumes.push_back(std::move(v));
    }
    return c;
}

inline json file_entry(const fs::path& root, const std::string& rel) {
    return {{"path", rel}, {"sha256", sha256_file(root / rel)}};
}

// Writes train/ and holdout/ splits with sidecars, index CSVs and a manifest.
inline void gen_data(const RunContext& ctx) {
    const auto& d = ctx.cfg.data;
    const fs::path root = ctx.data_dir();
    json files = json::array();
    for (const auto& [split, n, seed] : {std::tuple{std::string("train"), d.n_train, ctx.cfg.seeds.data},
                                          std::tuple{std::string("holdout"), d.n_holdout, derive_seed(ctx.cfg.seeds.data, "holdout")}}) {
        const Cohort c = make_cohort(d, seed, n, split == "train" ? "t" : "h");
        std::vector<ItemRecord> items = c.items;
        for (std::size_t i = 0; i < items.size(); ++i) {
            items[i].path = split + "/" + items[i].path;
            write_item(root, items[i], c.volumes[i]);
            files.push_back(file_entry(root, items[i].path));
        }
        write_text_atomic(root / ("index_" + split + ".csv"), index_csv(items));
        files.push_back(file_entry(root, "index_" + split + ".csv"));
        ctx.note("gen-data: wrote " + std::to_string(n) + " " + split + " phantoms");
    }
    snapshot_config(root, ctx.cfg);
    json m{{"kind", "phantom-dataset"},
           {"n_train", d.n_train},
           {"n_holdout", d.n_holdout},
           {"config_fingerprint", config_fingerprint(ctx.cfg)},
           {"files", files}};
    write_text_atomic(root / "manifest.json", m.dump(2) + "\n");
}

inline Cohort load_split(const RunContext& ctx, const std::string& split) {
    const fs::path root = ctx.data_dir();
    if (!fs::exists(root / "manifest.json"))
        throw MissingArtifact("gen-data", "phantom dataset not found under " + root.string());
    Cohort c;
    for (auto r : read_index_csv(root / ("index_" + split + ".csv"))) {
        Volume v = nifti::read((root / r.path).string()).volume;
        ctx.cfg.data.contract.check(v, r.path);
        v.source = VolumeSource::phantom;
        r.normalized = normalize_covariates(r.covariates, ctx.cfg.data.bounds);
        c.items.push_back(r);
        c.volumes.push_back(std::move(v));
    }
    return c;
}

// ------------------------------------------------------------------ training

inline bool checkpoint_exists(const fs::path& stem) {
    return fs::exists(stem.string() + ".json") && fs::exists(stem.string() + ".bin");
}

// Trains (or resumes) the compressor to cfg.compressor.steps, checkpointing
// every `checkpoint_every` steps. Writes the loss CSV and a held-out PSNR report.
inline json train_ae(const RunContext& ctx) {
    const Cohort train = load_split(ctx, "train");
    Compressor model(ctx.cfg.compressor);
    CompressorTrainer tr(model);
    const fs::path stem = ctx.compressor_stem();
    if (checkpoint_exists(stem)) {
        tr.resume(stem);
        const fs::path curve = ctx.reports() / "compressor_loss.csv";
        if (fs::exists(curve)) {
            std::ifstream is(curve);
            std::string line;
            std::getline(is, line);
            while (std::getline(is, line)) {
                const auto a = line.find(','), b = line.rfind(',');
                const long s = std::stol(line.substr(0, a));
                if (s < tr.step) tr.curve.add(s, line.substr(a + 1, b - a - 1), std::stod(line.substr(b + 1)));
            }
        }
        ctx.note("train-ae: resuming at step " + std::to_string(tr.step));
    }
    const long total = ctx.cfg.compressor.steps;
    while (tr.step < total) {
        const long until = std::min<long>(total, (tr.step / ctx.cfg.checkpoint_every + 1) * ctx.cfg.checkpoint_every);
        tr.train(train.volumes, until);
        tr.save(stem);
        write_text_atomic(ctx.reports() / "compressor_loss.csv", tr.curve.csv());
        const auto l1 = tr.curve.series("l1");
        ctx.note("train-ae: step " + std::to_string(tr.step) + "/" + std::to_string(total) + " l1 " +
                 format_number(l1.empty() ? 0.0 : l1.back()));
    }
    if (total == 0 || !checkpoint_exists(stem)) {
        model.trained_latent_shape = model.latent_shape_for(ctx.cfg.data.contract.shape);
        if (tr.fingerprint.empty()) tr.fingerprint = data_fingerprint(train.volumes);
        tr.save(stem);
    }
    snapshot_config(ctx.checkpoints(), ctx.cfg);
    json rep{{"steps", tr.step}};
    if (ctx.cfg.data.n_holdout > 0) {
        const Cohort hold = load_split(ctx, "holdout");
        std::vector<double> ps;
        for (const auto& v : hold.volumes)
            ps.push_back(psnr(v, model.decode_volumes(model.encode(v).mean, v.spacing).front()));
        rep["holdout_psnr_db"] = ps;
        rep["holdout_psnr_mean_db"] = std::accumulate(ps.begin(), ps.end(), 0.0) / ps.size();
        rep["holdout_psnr_min_db"] = *std::min_element(ps.begin(), ps.end());
    }
    const auto total_curve = tr.curve.series("total");
    if (total_curve.size() >= 10) {
        const std::size_t k = total_curve.size() / 10;
        rep["total_loss_first_10pct"] = std::accumulate(total_curve.begin(), total_curve.begin() + k, 0.0) / k;
        rep["total_loss_last_10pct"] = std::accumulate(total_curve.end() - k, total_curve.end(), 0.0) / k;
    }
    write_text_atomic(ctx.reports() / "compressor.json", rep.dump(2) + "\n");
    snapshot_config(ctx.reports(), ctx.cfg);
    return rep;
}

inline std::unique_ptr<Compressor> require_compressor(const RunContext& ctx) {
    return load_compressor(ctx.compressor_stem());
}

inline std::unique_ptr<DiffusionModel> require_diffusion(const RunContext& ctx) {
    if (!checkpoint_exists(ctx.compressor_stem()))
        throw MissingArtifact("train-ae", "compressor checkpoint missing under " + ctx.checkpoints().string());
    return load_diffusion(ctx.diffusion_stem(), ctx.cfg.diffusion.sampler);
}

inline json train_ldm(const RunContext& ctx) {
    auto ae = require_compressor(ctx);
    const Cohort train = load_split(ctx, "train");
    const LatentDataset ds = encode_dataset(*ae, train.volumes, train.conditioning());
    Shape item = ds.item_shape();
    DiffusionModel model(ctx.cfg.diffusion, item);
    DiffusionTrainer tr(model);
    const fs::path stem = ctx.diffusion_stem();
    if (checkpoint_exists(stem)) {
        tr.resume(stem);
        const fs::path curve = ctx.reports() / "diffusion_loss.csv";
        if (fs::exists(curve)) {
            std::ifstream is(curve);
            std::string line;
            std::getline(is, line);
            while (std::getline(is, line)) {
                const auto a = line.find(','), b = line.rfind(',');
                const long s = std::stol(line.substr(0, a));
                if (s < tr.step) tr.curve.add(s, line.substr(a + 1, b - a - 1), std::stod(line.substr(b + 1)));
            }
        }
        ctx.note("train-ldm: resuming at step " + std::to_string(tr.step));
    }
    tr.fingerprint = sha256_hex(std::string_view(reinterpret_cast<const char*>(ds.latents.ptr()),
                                                 ds.latents.numel() * sizeof(float)));
    const long total = ctx.cfg.diffusion.steps;
    while (tr.step < total) {
        const long until = std::min<long>(total, (tr.step / ctx.cfg.checkpoint_every + 1) * ctx.cfg.checkpoint_every);
        tr.train(ds, until);
        tr.save(stem);
        write_text_atomic(ctx.reports() / "diffusion_loss.csv", tr.curve.csv());
        const auto mse = tr.curve.series("mse");
        double recent = 0;
        const std::size_t k = std::min<std::size_t>(mse.size(), 100);
        for (std::size_t i = mse.size() - k; i < mse.size(); ++i) recent += mse[i] / k;
        ctx.note("train-ldm: step " + std::to_string(tr.step) + "/" + std::to_string(total) + " mse(100) " +
                 format_number(recent));
    }
    if (!checkpoint_exists(stem)) {
        model.latent_scale = ds.scale;
        tr.save(stem);
    }
    snapshot_config(ctx.checkpoints(), ctx.cfg);
    return {{"steps", tr.step}, {"latent_scale", ds.scale}};
}

// -------------------------------------------------------------------- sample

struct SampleRequest {
    int n = 1;
    SamplerConfig sampler;
    Conditioning conditioning{0.5, 0.0, 0.5, 0.5};
    fs::path out;
};

inline std::vector<ItemRecord> sample_volumes(const RunContext& ctx, const SampleRequest& req,
                                              TimingStats* timing = nullptr) {
    auto ldm = require_diffusion(ctx);
    auto ae = require_compressor(ctx);
    const fs::path out = req.out.empty() ? ctx.samples() : req.out;
    fs::create_directories(out);
    std::vector<ItemRecord> items;
    std::vector<double> secs;
    for (int i = 0; i < req.n; ++i) {
        SamplerConfig sc = req.sampler;
        sc.seed = derive_seed(req.sampler.seed, static_cast<std::uint64_t>(i));
        const auto t0 = std::chrono::steady_clock::now();
        const SampleResult r = ldm->sample({req.conditioning}, sc);
        Volume v = ae->decode_volumes(r.latent, ctx.cfg.data.contract.spacing).front();
        secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        char id[32];
        std::snprintf(id, sizeof id, "s%05d", i);
        ItemRecord rec{id, denormalize_covariates(req.conditioning, ctx.cfg.data.bounds), req.conditioning, sc.seed,
                       VolumeSource::synthetic, std::string(id) + ".nii"};
        write_item(out, rec, v);
        items.push_back(rec);
    }
    write_text_atomic(out / "index.csv", index_csv(items));
    snapshot_config(out, ctx.cfg);
    if (timing) {
        *timing = TimingStats{static_cast<int>(secs.size()), 0, 0, hardware_descriptor()};
        for (double s : secs) timing->mean += s / secs.size();
        if (secs.size() > 1) {
            for (double s : secs) timing->sd += (s - timing->mean) * (s - timing->mean);
            timing->sd = std::sqrt(timing->sd / (secs.size() - 1));
        }
    }
    return items;
}

// ------------------------------------------------------------------ evaluate

inline std::unique_ptr<FeatureClassifier> classifier_for(const RunContext& ctx, const Cohort& train) {
    if (checkpoint_exists(ctx.classifier_stem())) return FeatureClassifier::load(ctx.classifier_stem());
    auto c = std::make_unique<FeatureClassifier>(derive_seed(ctx.cfg.seeds.eval, "classifier"));
    c->train(train.volumes, train.conditioning(), ctx.cfg.eval.classifier_steps);
    c->save(ctx.classifier_stem());
    return c;
}

inline std::vector<Volume> generate_batch(const VolumeGenerator& gen, const std::vector<Conditioning>& cs,
                                          std::uint64_t seed) {
    std::vector<Volume> out;
    for (std::size_t i = 0; i < cs.size(); ++i) out.push_back(gen(cs[i], derive_seed(seed, static_cast<std::uint64_t>(i))));
    return out;
}

// FID against the held-out phantoms plus pair diversity, for real data and
// the trained LDM under the configured sampler. Writes metrics.json/.txt.
inline std::vector<MetricsReport> evaluate(const RunContext& ctx) {
    auto ldm = require_diffusion(ctx);
    auto ae = require_compressor(ctx);
    const Cohort train = load_split(ctx, "train");
    const Cohort hold = load_split(ctx, "holdout");
    const auto& e = ctx.cfg.eval;
    std::unique_ptr<FeatureClassifier> clf;
    ExtractorSpec spec{e.extractor, e.feature_dim, derive_seed(ctx.cfg.seeds.eval, "projection"), nullptr};
    if (e.extractor == "trained-classifier") {
        clf = classifier_for(ctx, train);
        spec.classifier = clf.get();
    }
    const SamplerConfig sc = ctx.cfg.diffusion.sampler;
    const VolumeGenerator gen = ldm_generator(*ae, *ldm, sc, ctx.cfg.data.contract.spacing);
    const int n_gen = std::max(e.n_fid, 2 * e.n_pairs);
    const auto cs = sweep_conditionings(n_gen, derive_seed(ctx.cfg.seeds.eval, "evaluate"));
    std::vector<double> secs;
    std::vector<Volume> synth;
    for (int i = 0; i < n_gen; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        synth.push_back(gen(cs[i], derive_seed(ctx.cfg.seeds.eval, static_cast<std::uint64_t>(i))));
        secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    const FeatureSet f_train = extract_features(train.volumes, spec);
    const FeatureSet f_hold = extract_features(hold.volumes, spec);
    const FeatureSet f_syn = extract_features({synth.begin(), synth.begin() + e.n_fid}, spec);
    const std::uint64_t div_seed = derive_seed(ctx.cfg.seeds.eval, "pairs");

    MetricsReport real;
    real.model = "real";
    const FidResult fr = fid(f_train, f_hold);
    real.fid = fr.value, real.fid_clamped = fr.clamped, real.fid_shrunk = fr.shrunk;
    const int real_pairs = std::min(e.n_pairs, static_cast<int>(train.volumes.size()) / 2);
    const DiversityResult dr = diversity_protocol(train.volumes, real_pairs, div_seed);
    real.ms_ssim = dr.ms_ssim, real.g4r_ssim = dr.g4r_ssim, real.n_pairs = dr.n_pairs;
    real.extractor = f_train.extractor;
    real.seed = div_seed;

    MetricsReport syn;
    syn.model = std::string("ldm-") + to_string(sc.kind) + (sc.kind == SamplerKind::ddim ? std::to_string(sc.steps) : "");
    const FidResult fs_ = fid(f_train, f_syn);
    syn.fid = fs_.value, syn.fid_clamped = fs_.clamped, syn.fid_shrunk = fs_.shrunk;
    const DiversityResult ds = diversity_protocol(synth, e.n_pairs, div_seed);
    syn.ms_ssim = ds.ms_ssim, syn.g4r_ssim = ds.g4r_ssim, syn.n_pairs = ds.n_pairs;
    syn.extractor = f_syn.extractor;
    syn.seed = div_seed;
    TimingStats t{static_cast<int>(secs.size()), 0, 0, hardware_descriptor()};
    for (double s : secs) t.mean += s / secs.size();
    for (double s : secs) t.sd += (s - t.mean) * (s - t.mean) / std::max<std::size_t>(1, secs.size() - 1);
    t.sd = std::sqrt(t.sd);
    syn.timing = t;

    std::vector<MetricsReport> rows{real, syn};
    json j = json::array();
    for (const auto& r : rows) j.push_back(to_json(r));
    write_text_atomic(ctx.reports() / "metrics.json", j.dump(2) + "\n");
    write_text_atomic(ctx.reports() / "metrics.txt", metrics_table(rows));
    snapshot_config(ctx.reports(), ctx.cfg);
    return rows;
}

// --------------------------------------------------------- eval-conditioning

inline std::unique_ptr<AgeRegressor> regressor_for(const RunContext& ctx, const Cohort& train) {
    if (checkpoint_exists(ctx.regressor_stem())) return AgeRegressor::load(ctx.regressor_stem());
    auto r = std::make_unique<AgeRegressor>(ctx.cfg.data.bounds, derive_seed(ctx.cfg.seeds.eval, "regressor"));
    r->train(train.volumes, train.ages(), ctx.cfg.eval.regressor_steps);
    r->save(ctx.regressor_stem());
    return r;
}

struct ConditioningResults {
    CorrelationReport volume, age, regressor_sanity;
    ExtrapolationResult extrapolation;
};

inline ConditioningResults eval_conditioning(const RunContext& ctx) {
    auto ldm = require_diffusion(ctx);
    auto ae = require_compressor(ctx);
    const Cohort train = load_split(ctx, "train");
    const auto& e = ctx.cfg.eval;
    const auto& b = ctx.cfg.data.bounds;
    auto reg = regressor_for(ctx, train);
    const VolumeGenerator gen = ldm_generator(*ae, *ldm, ctx.cfg.diffusion.sampler, ctx.cfg.data.contract.spacing);
    ConditioningResults res;
    const Cohort sanity = make_cohort(ctx.cfg.data, derive_seed(ctx.cfg.seeds.eval, "regressor-sanity"), 100, "r");
    res.regressor_sanity = regressor_sanity(*reg, sanity.volumes, sanity.ages());
    res.volume = eval_volume_conditioning(gen, e.n_conditioning, b, derive_seed(ctx.cfg.seeds.eval, "volume"));
    res.age = eval_age_conditioning(gen, *reg, e.n_conditioning, b, derive_seed(ctx.cfg.seeds.eval, "age"));
    res.extrapolation = extrapolation_sweep(gen, e.extrapolation, derive_seed(ctx.cfg.seeds.eval, "extrapolation"));
    const fs::path r = ctx.reports();
    write_text_atomic(r / "volume_conditioning.json", to_json(res.volume).dump(2) + "\n");
    write_text_atomic(r / "age_conditioning.json", to_json(res.age).dump(2) + "\n");
    write_text_atomic(r / "age_regressor_sanity.json", to_json(res.regressor_sanity).dump(2) + "\n");
    write_text_atomic(r / "extrapolation.json", to_json(res.extrapolation).dump(2) + "\n");
    write_png(scatter_plot(res.volume), (r / "volume_conditioning.png").string());
    write_png(scatter_plot(res.age), (r / "age_conditioning.png").string());
    write_png(slice_montage(res.extrapolation.volumes), (r / "extrapolation_montage.png").string());
    snapshot_config(r, ctx.cfg);
    return res;
}

// ------------------------------------------------------------------- package

struct PackageOptions {
    int n = 500;
    std::string distribution = "uniform";
    double sex_p = 0.47;
    std::uint64_t seed = 5;
    std::vector<Covariates> empirical;       // pool for the "empirical" distribution
    std::optional<int> stop_after;           // generate at most this many new items, then stop (no manifest)
    std::optional<std::uintmax_t> available_bytes;  // overrides the filesystem query
    std::uintmax_t reserve_bytes = 64ull << 20;
};

struct DatasetManifest {
    json j;
    int n() const { return j.at("n").get<int>(); }
};

struct PreflightError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline Conditioning package_conditioning(const PackageOptions& o, const CovariateBounds& b, int i) {
    Rng rng(derive_seed(derive_seed(o.seed, "conditioning"), static_cast<std::uint64_t>(i)));
    if (o.distribution == "empirical") {
        if (o.empirical.empty()) throw std::invalid_argument("package: empirical distribution needs training covariates");
        return normalize_covariates(o.empirical[rng.uniform_int(0, static_cast<int>(o.empirical.size()) - 1)], b);
    }
    Conditioning c{};
    c[cond::age] = rng.uniform();
    c[cond::sex] = rng.bernoulli(o.sex_p) ? 1.0 : 0.0;
    c[cond::ventricular] = rng.uniform();
    c[cond::brain] = rng.uniform();
    return c;
}

inline std::string package_id(int i) {
    char id[32];
    std::snprintf(id, sizeof id, "syn%06d", i);
    return id;
}

// Generates n items into `out` (skipping ids already complete), then writes
// the index CSV and the manifest with SHA-256 digests. Returns nullopt when
// stopped early through `stop_after`.
inline std::optional<DatasetManifest> package_dataset(const VolumeGenerator& gen, const PackageOptions& o,
                                                      const CovariateBounds& bounds, const VolumeContract& contract,
                                                      const fs::path& out, const json& fingerprints) {
    if (o.n < 0) throw std::invalid_argument("package: n must be >= 0");
    fs::create_directories(out / "volumes");
    auto complete = [&](int i) {
        const fs::path v = out / "volumes" / (package_id(i) + ".nii");
        return fs::exists(v) && fs::exists(sidecar_path(v));
    };
    int remaining = 0;
    for (int i = 0; i < o.n; ++i) remaining += !complete(i);
    const std::uintmax_t per_item = contract.shape[0] * std::uintmax_t(contract.shape[1]) * contract.shape[2] * 4 + 352 + 2048;
    const std::uintmax_t need = remaining * per_item + o.reserve_bytes;
    const std::uintmax_t avail = o.available_bytes ? *o.available_bytes : fs::space(out).available;
    if (remaining > 0 && avail < need)
        throw PreflightError("package: need about " + std::to_string(need) + " bytes free in " + out.string() + ", " +
                             std::to_string(avail) + " available");
    std::vector<ItemRecord> items;
    int generated = 0;
    for (int i = 0; i < o.n; ++i) {
        const Conditioning c = package_conditioning(o, bounds, i);
        const std::uint64_t seed = derive_seed(derive_seed(o.seed, "item"), static_cast<std::uint64_t>(i));
        ItemRecord r{package_id(i), denormalize_covariates(c, bounds), c, seed, VolumeSource::synthetic,
                     "volumes/" + package_id(i) + ".nii"};
        if (!complete(i)) {
            if (o.stop_after && generated >= *o.stop_after) return std::nullopt;
            Volume v = gen(c, seed);
            const fs::path vp = out / r.path;
            fs::path tmp = vp;
            tmp += ".tmp";
            nifti::write(v, tmp.string());
            fs::rename(tmp, vp);
            write_text_atomic(sidecar_path(vp), sidecar_json(r).dump(2) + "\n");
            ++generated;
        }
        items.push_back(r);
    }
    write_text_atomic(out / "index.csv", index_csv(items));
    json entries = json::array();
    for (const auto& r : items) {
        const fs::path vp = out / r.path;
        entries.push_back({{"id", r.id},
                           {"path", r.path},
                           {"sha256", sha256_file(vp)},
                           {"sidecar", fs::relative(sidecar_path(vp), out).string()},
                           {"sidecar_sha256", sha256_file(sidecar_path(vp))},
                           {"covariates_raw", covariates_json(r.covariates)},
                           {"covariates_normalized", conditioning_json(r.normalized)},
                           {"seed", r.seed}});
    }
    DatasetManifest m;
    m.j = {{"kind", "synthetic-dataset"},
           {"n", o.n},
           {"distribution", o.distribution},
           {"seed", o.seed},
           {"index", "index.csv"},
           {"index_sha256", sha256_file(out / "index.csv")},
           {"fingerprints", fingerprints},
           {"items", entries}};
    write_text_atomic(out / "manifest.json", m.j.dump(2) + "\n");
    return m;
}

// Re-hashes every listed file and cross-checks sidecar covariates against the
// index CSV and the manifest. Returns one message per violation.
inline std::vector<std::string> verify_manifest(const fs::path& manifest_path) {
    std::vector<std::string> v;
    const json m = read_json(manifest_path);
    const fs::path root = manifest_path.parent_path();
    std::map<std::string, Covariates> index;
    const fs::path index_path = root / m.value("index", "index.csv");
    if (!fs::exists(index_path)) {
        v.push_back("index: " + index_path.string() + " missing");
    } else {
        if (m.contains("index_sha256") && sha256_file(index_path) != m.at("index_sha256").get<std::string>())
            v.push_back("index: digest mismatch");
        for (const auto& r : read_index_csv(index_path)) index[r.id] = r.covariates;
    }
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); };
    auto same = [&](const Covariates& a, const Covariates& b) {
        return close(a.age, b.age) && close(a.sex, b.sex) && close(a.ventricular_volume, b.ventricular_volume) &&
               close(a.brain_volume_norm, b.brain_volume_norm);
    };
    for (const auto& it : m.at("items")) {
        const std::string id = it.at("id").get<std::string>();
        const fs::path vp = root / it.at("path").get<std::string>();
        if (!fs::exists(vp)) {
            v.push_back(id + ": volume file missing");
        } else if (sha256_file(vp) != it.at("sha256").get<std::string>()) {
            v.push_back(id + ": volume digest mismatch");
        }
        const fs::path sp = root / it.at("sidecar").get<std::string>();
        if (!fs::exists(sp)) {
            v.push_back(id + ": sidecar missing");
            continue;
        }
        if (sha256_file(sp) != it.at("sidecar_sha256").get<std::string>()) v.push_back(id + ": sidecar digest mismatch");
        Covariates side;
        try {
            side = covariates_from_json(read_json(sp).at("covariates_raw"));
        } catch (const std::exception& e) {
            v.push_back(id + ": sidecar unreadable (" + e.what() + ")");
            continue;
        }
        const Covariates listed = covariates_from_json(it.at("covariates_raw"));
        const auto idx = index.find(id);
        if (idx == index.end()) v.push_back(id + ": not listed in the index CSV");
        else if (!same(side, idx->second)) v.push_back(id + ": sidecar covariates disagree with the index CSV");
        if (!same(side, listed)) v.push_back(id + ": sidecar covariates disagree with the manifest");
    }
    return v;
}

inline json checkpoint_fingerprints(const RunContext& ctx) {
    return {{"config", config_fingerprint(ctx.cfg)},
            {"compressor", sha256_file(ctx.compressor_stem().string() + ".bin")},
            {"diffusion", sha256_file(ctx.diffusion_stem().string() + ".bin")}};
}

inline DatasetManifest package(const RunContext& ctx, const fs::path& out, std::optional<int> n = {}) {
    auto ldm = require_diffusion(ctx);
    auto ae = require_compressor(ctx);
    PackageOptions o;
    o.n = n.value_or(ctx.cfg.package.n);
    o.distribution = ctx.cfg.package.distribution;
    o.sex_p = ctx.cfg.package.sex_p;
    o.seed = ctx.cfg.seeds.package;
    o.reserve_bytes = ctx.cfg.package.reserve_bytes;
    if (o.distribution == "empirical")
        for (const auto& r : read_index_csv(ctx.data_dir() / "index_train.csv")) o.empirical.push_back(r.covariates);
    const VolumeGenerator gen = ldm_generator(*ae, *ldm, ctx.cfg.diffusion.sampler, ctx.cfg.data.contract.spacing);
    auto m = package_dataset(gen, o, ctx.cfg.data.bounds, ctx.cfg.data.contract, out, checkpoint_fingerprints(ctx));
    snapshot_config(out, ctx.cfg);
    return *m;
}

}  // namespace bldm

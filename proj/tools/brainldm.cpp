// brainldm: phantom data, compressor and latent diffusion training, sampling,
// evaluation and dataset packaging.

#include <CLI11.hpp>
#include <regex>

#include "bldm/pipeline.hpp"

using namespace bldm;

namespace {

struct Common {
    std::string config_path;
    std::string run;
    std::string tag = "desk";
    bool print_config = false;
};

PipelineConfig load_or_default(const std::string& path) {
    return path.empty() ? config_from_json(json::object()) : load_config(path);
}

// Most recent run directory under the output root. Only <timestamp>-<tag>
// names count; they sort chronologically.
std::optional<fs::path> latest_run(const fs::path& root) {
    if (!fs::is_directory(root)) return std::nullopt;
    static const std::regex run_name(R"(\d{8}T\d{6}Z-.*)");
    std::optional<fs::path> best;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "config.json") &&
            std::regex_match(e.path().filename().string(), run_name))
            if (!best || e.path().filename() > best->filename()) best = e.path();
    return best;
}

// Picks the run directory: --run, else a fresh one for gen-data, else the
// latest one. An existing snapshot must match an explicit --config.
RunContext resolve_run(const Common& o, const std::string& sub) {
    PipelineConfig cfg = load_or_default(o.config_path);
    const fs::path root = resolve_output_root(cfg);
    std::optional<fs::path> dir;
    if (!o.run.empty()) dir = fs::path(o.run);
    else if (sub != "gen-data") dir = latest_run(root);
    if (!dir) dir = root / (timestamp_now() + "-" + o.tag);
    if (fs::exists(*dir / "config.json")) {
        const PipelineConfig snap = load_config(*dir / "config.json");
        if (o.config_path.empty()) cfg = snap;
        else if (config_fingerprint(snap) != config_fingerprint(cfg))
            throw ConfigError({"config: " + o.config_path + " differs from the snapshot in " + dir->string() +
                               "; start a new run with --tag or --run"});
    }
    std::cerr << "run: " << dir->string() << "\n";
    return open_run(*dir, cfg);
}

struct SampleFlags {
    int n = 1;
    std::string sampler;
    std::optional<int> steps;
    std::optional<double> eta;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::optional<double> age, sex, ventricular, brain;
    bool raw_normalized = false;
    std::string out;
};

Conditioning conditioning_from_flags(const SampleFlags& f, const CovariateBounds& b) {
    std::vector<std::string> p;
    if (f.sex && *f.sex != 0.0 && *f.sex != 1.0) p.push_back("--sex must be 0 or 1");
    if (!p.empty()) throw ConfigError(p);
    Conditioning c{0.5, 0.0, 0.5, 0.5};
    if (f.raw_normalized) {
        if (f.age) c[cond::age] = *f.age;
        if (f.ventricular) c[cond::ventricular] = *f.ventricular;
        if (f.brain) c[cond::brain] = *f.brain;
    } else {
        if (f.age) c[cond::age] = minmax(*f.age, b.age);
        if (f.ventricular) c[cond::ventricular] = minmax(*f.ventricular, b.ventricular);
        if (f.brain) c[cond::brain] = minmax(*f.brain, b.brain);
    }
    if (f.sex) c[cond::sex] = *f.sex;
    return c;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Latent diffusion pipeline for conditional 3D brain phantoms"};
    app.require_subcommand(1);
    Common o;
    auto common = [&](CLI::App* s) {
        s->add_option("--config", o.config_path, "pipeline config JSON (defaults are used for missing fields)");
        s->add_option("--run", o.run, "run directory (default: latest run, or a new one for gen-data)");
        s->add_option("--tag", o.tag, "tag for a new run directory name");
        s->add_flag("--print-config", o.print_config, "print the effective config and exit");
    };
    std::vector<CLI::App*> subs;
    for (const char* name : {"gen-data", "train-ae", "train-ldm", "evaluate", "eval-conditioning"}) {
        subs.push_back(app.add_subcommand(name));
        common(subs.back());
    }
    subs[0]->description("write the phantom cohort (train and holdout splits)");
    subs[1]->description("train or resume the compressor");
    subs[2]->description("encode the cohort and train or resume the latent diffusion model");
    subs[3]->description("FID, MS-SSIM and 4-G-R-SSIM for real data and the trained model");
    subs[4]->description("volume and age conditioning correlations, extrapolation sweep");

    SampleFlags sf;
    auto* sample = app.add_subcommand("sample", "generate volumes for one conditioning");
    common(sample);
    sample->add_option("--n", sf.n, "number of volumes")->check(CLI::NonNegativeNumber);
    sample->add_option("--sampler", sf.sampler, "ddpm or ddim")->check(CLI::IsMember({"ddpm", "ddim"}));
    sample->add_option("--steps", sf.steps, "DDIM steps");
    sample->add_option("--eta", sf.eta, "DDIM eta");
    sample->add_option("--seed", sf.seed, "sampling seed")->each([&](const std::string&) { sf.seed_set = true; });
    sample->add_option("--age", sf.age, "age in years");
    sample->add_option("--sex", sf.sex, "0 female, 1 male");
    sample->add_option("--ventricular", sf.ventricular, "ventricular volume in mm^3");
    sample->add_option("--brain", sf.brain, "normalised brain volume in mm^3");
    sample->add_flag("--raw-normalized", sf.raw_normalized, "covariate flags are already normalised values");
    sample->add_option("--out", sf.out, "output directory (default: <run>/samples)");

    int pkg_n = -1;
    std::string pkg_out;
    auto* pkg = app.add_subcommand("package", "generate and package a synthetic dataset with a manifest");
    common(pkg);
    pkg->add_option("--n", pkg_n, "number of items (default: package.n)");
    pkg->add_option("--out", pkg_out, "output directory (default: <run>/package)");

    std::string manifest;
    auto* verify = app.add_subcommand("verify", "re-hash a packaged dataset and check sidecar consistency");
    verify->add_option("manifest", manifest, "manifest.json path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "verify") {
        const auto v = verify_manifest(manifest);
        for (const auto& s : v) std::cout << "violation: " << s << "\n";
        if (!v.empty()) return 1;
        std::cout << "ok\n";
        return 0;
    }
    if (o.print_config) {
        std::cout << to_json(load_or_default(o.config_path)).dump(2) << "\n";
        return 0;
    }
    const RunContext ctx = resolve_run(o, name);
    if (name == "gen-data") {
        gen_data(ctx);
    } else if (name == "train-ae") {
        std::cout << train_ae(ctx).dump(2) << "\n";
    } else if (name == "train-ldm") {
        std::cout << train_ldm(ctx).dump(2) << "\n";
    } else if (name == "sample") {
        SampleRequest req;
        req.n = sf.n;
        req.sampler = ctx.cfg.diffusion.sampler;
        req.sampler.seed = sf.seed_set ? sf.seed : ctx.cfg.seeds.sample;
        if (!sf.sampler.empty()) req.sampler.kind = sampler_kind_from_string(sf.sampler);
        if (sf.steps) req.sampler.steps = *sf.steps;
        if (sf.eta) req.sampler.eta = *sf.eta;
        if (req.sampler.kind == SamplerKind::ddim && (req.sampler.steps < 1 || req.sampler.steps > ctx.cfg.diffusion.T))
            throw ConfigError({"--steps must lie in [1, " + std::to_string(ctx.cfg.diffusion.T) + "]"});
        if (!(req.sampler.eta >= 0)) throw ConfigError({"--eta must be >= 0"});
        req.conditioning = conditioning_from_flags(sf, ctx.cfg.data.bounds);
        if (!sf.out.empty()) req.out = sf.out;
        TimingStats t;
        const auto items = sample_volumes(ctx, req, &t);
        std::cout << "wrote " << items.size() << " volumes, " << timing_json(t).dump() << "\n";
    } else if (name == "evaluate") {
        std::cout << metrics_table(evaluate(ctx));
    } else if (name == "eval-conditioning") {
        const auto r = eval_conditioning(ctx);
        std::cout << "ventricular r " << format_number(r.volume.r) << "\nage r " << format_number(r.age.r)
                  << "\nregressor sanity r " << format_number(r.regressor_sanity.r) << "\n";
    } else if (name == "package") {
        const fs::path out = pkg_out.empty() ? ctx.dir / "package" : fs::path(pkg_out);
        const auto m = package(ctx, out, pkg_n >= 0 ? std::optional<int>(pkg_n) : std::nullopt);
        std::cout << "packaged " << m.n() << " items into " << out.string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error:\n";
        for (const auto& p : e.problems()) std::cerr << "  " << p << "\n";
        return 2;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        std::cerr << "prerequisite: " << e.prerequisite() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

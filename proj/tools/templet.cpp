// templet.cpp - command-line surface over the template runtime
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.
#include <cstdio>
#include <exception>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "templet/dataset.hpp"
#include "templet/hub.hpp"
#include "templet/package.hpp"
#include "templet/pipeline.hpp"
#include "templet/training.hpp"
#include "templet/zoo.hpp"

namespace {

using namespace templet;

void save_base(const std::string& path, const DenoiserModel& model) {
    archive_save(path, model.params);
}

// Reconstructs the model configuration from parameter shapes.
DenoiserModel load_base(const std::string& path) {
    TensorMap params = archive_load(path);
    DenoiserConfig cfg;
    cfg.d_model = params.at("patch_embed.w").shape[0];
    cfg.n_conditions = params.at("cond_embed").shape[0];
    int n_patches = params.at("pos_embed").shape[0];
    int side = 1;
    while (side * side < n_patches) ++side;
    cfg.image_size = side * 2 * 2;
    cfg.n_blocks = 0;
    while (params.count("blocks." + std::to_string(cfg.n_blocks) + ".ln1.g")) ++cfg.n_blocks;
    cfg.mlp_ratio = params.at("blocks.0.mlp.fc1.w").shape[0] / cfg.d_model;
    cfg.time_dim = params.at("time_mlp.fc1.w").shape[1];
    DenoiserModel m;
    m.cfg = cfg;
    m.params = std::move(params);
    return m;
}

// "name=pkg:input"; the package/input split is at the last ':' so inputs like
// "0.2,0.3,0.4" stay intact.
TemplateActivation parse_template_flag(const std::string& flag) {
    size_t eq = flag.find('=');
    if (eq == std::string::npos || eq == 0)
        throw CLI::ValidationError("--template", "expected name=pkg:input, got '" + flag + "'");
    TemplateActivation act;
    act.name = flag.substr(0, eq);
    std::string rest = flag.substr(eq + 1);
    size_t colon = rest.rfind(':');
    if (colon == std::string::npos) {
        act.package_ref = rest;
    } else {
        act.package_ref = rest.substr(0, colon);
        act.input = rest.substr(colon + 1);
    }
    if (act.package_ref.empty())
        throw CLI::ValidationError("--template", "empty package ref in '" + flag + "'");
    return act;
}

ManifestValue parse_hyper_value(const std::string& raw) {
    try {
        size_t used = 0;
        int64_t i = std::stoll(raw, &used);
        if (used == raw.size()) return i;
    } catch (const std::exception&) {
    }
    try {
        size_t used = 0;
        double d = std::stod(raw, &used);
        if (used == raw.size()) return d;
    } catch (const std::exception&) {
    }
    return raw;
}

zoo::Dataset load_data_dir(const std::string& dir) { return zoo::read_dataset(dir); }

int fail(const std::exception& e) {
    const char* label = "error";
    if (dynamic_cast<const IntegrityError*>(&e)) label = "integrity error";
    else if (dynamic_cast<const TransportError*>(&e)) label = "transport error";
    else if (dynamic_cast<const ConflictError*>(&e)) label = "conflict error";
    else if (dynamic_cast<const ParseError*>(&e)) label = "parse error";
    else if (dynamic_cast<const RegistryError*>(&e)) label = "registry error";
    else if (dynamic_cast<const VersionError*>(&e)) label = "version error";
    else if (dynamic_cast<const FrozenParamError*>(&e)) label = "frozen-parameter error";
    else if (dynamic_cast<const ShapeError*>(&e)) label = "shape error";
    std::fprintf(stderr, "%s: %s\n", label, e.what());
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"templet - pluggable capability templates for a desk-scale "
                 "latent flow-matching pipeline"};
    app.require_subcommand(1);

    // ---- gen ----
    auto* gen = app.add_subcommand("gen", "generate an image");
    int condition = 0, steps = 50;
    uint64_t seed = 0;
    float cfg_scale = 4.0f;
    std::vector<std::string> template_flags;
    std::string out_path = "out.ppm", events_path, base_path;
    gen->add_option("--condition", condition, "condition id (0 = unconditional)");
    gen->add_option("--seed", seed, "generation seed");
    gen->add_option("--steps", steps, "denoising steps");
    gen->add_option("--cfg", cfg_scale, "classifier-free guidance scale");
    gen->add_option("--template", template_flags, "template activation name=pkg:input");
    gen->add_option("--out", out_path, "output PPM path");
    gen->add_option("--events", events_path, "write the pipeline event log here");
    gen->add_option("--base", base_path, "base weights archive (default: seeded init)");

    // ---- train-base ----
    auto* tb = app.add_subcommand("train-base", "pretrain the base denoiser");
    std::string tb_data, tb_out = "base.tmpl", tb_loss_csv;
    TrainConfig tb_cfg;
    tb_cfg.steps = 10000;
    tb->add_option("--data", tb_data, "dataset directory")->required();
    tb->add_option("--out", tb_out, "output weights archive");
    tb->add_option("--steps", tb_cfg.steps);
    tb->add_option("--batch", tb_cfg.batch);
    tb->add_option("--lr", tb_cfg.lr);
    tb->add_option("--seed", tb_cfg.seed);
    tb->add_option("--loss-csv", tb_loss_csv, "write the loss curve here");

    // ---- train-template ----
    auto* tt = app.add_subcommand("train-template", "train a template against a frozen base");
    std::string tt_kind, tt_name = "template", tt_data, tt_base, tt_out = "template_pkg";
    std::string tt_cache_dir, tt_loss_csv;
    bool tt_no_cache = false;
    std::vector<std::string> tt_hyper;
    TrainConfig tt_cfg;
    tt->add_option("--kind", tt_kind, "template kind")->required();
    tt->add_option("--name", tt_name, "template name");
    tt->add_option("--data", tt_data, "dataset directory")->required();
    tt->add_option("--base", tt_base, "base weights archive")->required();
    tt->add_option("--out", tt_out, "output package directory");
    tt->add_option("--steps", tt_cfg.steps);
    tt->add_option("--batch", tt_cfg.batch);
    tt->add_option("--lr", tt_cfg.lr);
    tt->add_option("--seed", tt_cfg.seed);
    tt->add_option("--cache-dir", tt_cache_dir, "stage-I feature cache directory");
    tt->add_flag("--no-feature-cache", tt_no_cache, "disable the stage-I feature cache");
    tt->add_option("--hyper", tt_hyper, "hyperparameter override key=value");
    tt->add_option("--loss-csv", tt_loss_csv, "write the loss curve here");

    // ---- make-data ----
    auto* md = app.add_subcommand("make-data", "generate a synthetic dataset");
    std::string md_kind, md_out;
    int md_n = 64;
    uint64_t md_seed = 0;
    md->add_option("--kind", md_kind, "dataset kind")->required();
    md->add_option("--n", md_n, "sample count");
    md->add_option("--seed", md_seed);
    md->add_option("--out", md_out, "output directory")->required();

    // ---- package inspect ----
    auto* pkg = app.add_subcommand("package", "package utilities");
    pkg->require_subcommand(1);
    auto* inspect = pkg->add_subcommand("inspect", "print manifest fields and tensor shapes");
    std::string inspect_dir;
    inspect->add_option("dir", inspect_dir, "package directory")->required();

    // ---- fetch ----
    auto* fetch = app.add_subcommand("fetch", "resolve a remote package into the local cache");
    std::string f_manifest, f_weights, f_sha, f_cache;
    fetch->add_option("--manifest-url", f_manifest)->required();
    fetch->add_option("--weights-url", f_weights)->required();
    fetch->add_option("--sha256", f_sha, "expected weights digest")->required();
    fetch->add_option("--cache-dir", f_cache, "cache root (default: TEMPLET_CACHE_DIR)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            GenerationRequest req;
            req.condition_id = condition;
            req.seed = seed;
            req.steps = steps;
            req.guidance_scale = cfg_scale;
            for (const std::string& f : template_flags)
                req.templates.push_back(parse_template_flag(f));
            DenoiserModel base =
                base_path.empty() ? DenoiserModel::init(DenoiserConfig{}, 0) : load_base(base_path);
            req.width = base.cfg.image_size;
            req.height = base.cfg.image_size;
            RunOptions opts;
            opts.events_path = events_path;
            RunResult result = run_pipeline(base, req, opts);
            write_ppm(out_path, result.image);
            std::printf("wrote %s\n", out_path.c_str());
        } else if (tb->parsed()) {
            zoo::Dataset data = load_data_dir(tb_data);
            DenoiserModel base = DenoiserModel::init(DenoiserConfig{}, tb_cfg.seed);
            BaseTrainReport report = train_base(base, data, tb_cfg);
            save_base(tb_out, base);
            if (!tb_loss_csv.empty()) write_loss_curve(tb_loss_csv, report.loss_curve);
            std::printf("trained base for %d steps, final loss %.6f, weights %s\n",
                        tb_cfg.steps,
                        report.loss_curve.empty() ? 0.0 : report.loss_curve.back().second,
                        tb_out.c_str());
        } else if (tt->parsed()) {
            zoo::Dataset data = load_data_dir(tt_data);
            DenoiserModel base = load_base(tt_base);
            std::map<std::string, ManifestValue> hyper;
            for (const std::string& h : tt_hyper) {
                size_t eq = h.find('=');
                if (eq == std::string::npos)
                    throw ParseError("--hyper expects key=value, got '" + h + "'");
                hyper[h.substr(0, eq)] = parse_hyper_value(h.substr(eq + 1));
            }
            auto model =
                TemplateRegistry::instance().create(tt_kind, tt_name, hyper, tt_cfg.seed);
            if (tt_no_cache) tt_cfg.cache_dir.clear();
            else tt_cfg.cache_dir = tt_cache_dir;
            TrainReport report = stage2_train(*model, base, data, tt_cfg);
            save_package(tt_out, model->manifest(), model->params());
            if (!tt_loss_csv.empty()) write_loss_curve(tt_loss_csv, report.loss_curve);
            std::printf("trained %s (%s) for %d steps, final loss %.6f, package %s\n",
                        tt_name.c_str(), tt_kind.c_str(), tt_cfg.steps,
                        report.loss_curve.empty() ? 0.0 : report.loss_curve.back().second,
                        tt_out.c_str());
        } else if (md->parsed()) {
            zoo::Dataset data = zoo::make_dataset(zoo::dataset_kind_from(md_kind), md_n, md_seed);
            zoo::write_dataset(md_out, data);
            std::printf("wrote %zu %s samples to %s\n", data.samples.size(), md_kind.c_str(),
                        md_out.c_str());
        } else if (inspect->parsed()) {
            auto [manifest, tensors] = load_package(inspect_dir);
            std::printf("name = %s\nversion = %s\ncache_type = %s\ntemplate_kind = %s\n",
                        manifest.name.c_str(), manifest.version.c_str(),
                        manifest.cache_type.c_str(), manifest.template_kind.c_str());
            std::printf("weights_file = %s\nweights_sha256 = %s\n",
                        manifest.weights_file.c_str(), manifest.weights_sha256.c_str());
            for (const auto& [k, v] : manifest.input_schema)
                std::printf("input_schema.%s = %s\n", k.c_str(), v.c_str());
            std::printf("tensors = %zu\n", tensors.size());
            for (const auto& [name, t] : tensors)
                std::printf("  %s %s\n", name.c_str(), t.shape_str().c_str());
        } else if (fetch->parsed()) {
            ResolveStats stats;
            std::string dir =
                resolve(PackageRef::remote(f_manifest, f_weights, f_sha), f_cache, &stats);
            std::printf("resolved to %s (%d requests)\n", dir.c_str(), stats.http_requests);
        }
    } catch (const std::exception& e) {
        return fail(e);
    }
    return 0;
}

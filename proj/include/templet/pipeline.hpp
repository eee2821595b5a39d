// pipeline.hpp - orchestrates generation: run templates, merge caches, inject
// into the base sampler. Templates execute strictly before the denoising
// loop; round-robin lazy loading keeps at most one template's weights
// resident at a time.
#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "templet/backbone.hpp"
#include "templet/cache.hpp"
#include "templet/package.hpp"
#include "templet/template_model.hpp"
#include "templet/zoo.hpp"

namespace templet {

struct PipelineEvent {
    std::string kind;  // load | process_inputs | forward | unload | merge |
                       // denoise_step | constraint_applied
    std::string arg;   // template name, step index, or "-"
};

struct PipelineRun {
    GenerationRequest request;
    std::vector<PipelineEvent> events;

    std::string serialize() const {
        std::string out;
        for (const PipelineEvent& e : events) out += "EVENT " + e.kind + " " + e.arg + "\n";
        return out;
    }
};

// Instrumented count of resident template weight bytes.
struct ResidencyGauge {
    size_t current = 0;
    size_t peak = 0;

    void add(size_t bytes) {
        current += bytes;
        peak = std::max(peak, current);
    }
    void remove(size_t bytes) { current -= bytes; }
};

struct RunOptions {
    // Maps a package ref to a local package directory. Defaults to identity
    // (local refs); the hub client plugs in here for remote refs.
    std::function<std::string(const std::string&)> resolve;
    std::string events_path;  // when set, the event log is written here
};

namespace detail_pipeline {

inline std::string resolve_ref(const RunOptions& opts, const std::string& ref) {
    return opts.resolve ? opts.resolve(ref) : ref;
}

struct ScheduleResult {
    std::vector<TemplateCache> caches;
    ResidencyGauge gauge;
    int forward_invocations = 0;
};

// load -> process_inputs -> forward -> unload, one template at a time; the
// emitted caches are retained, the weights are not.
inline ScheduleResult schedule_round_robin(const std::vector<TemplateActivation>& templates,
                                           const RunOptions& opts, PipelineRun& run) {
    ScheduleResult result;
    for (const TemplateActivation& act : templates) {
        std::string dir = resolve_ref(opts, act.package_ref);
        std::unique_ptr<TemplateModel> model = load_template(dir);
        result.gauge.add(model->weight_bytes());
        run.events.push_back({"load", act.name});
        TemplateInput input = model->parse_input(act.input);
        Features features = model->process_inputs(input);
        run.events.push_back({"process_inputs", act.name});
        std::vector<TemplateCache> caches = model->forward(features);
        ++result.forward_invocations;
        run.events.push_back({"forward", act.name});
        result.gauge.remove(model->weight_bytes());
        model.reset();
        run.events.push_back({"unload", act.name});
        for (TemplateCache& c : caches) result.caches.push_back(std::move(c));
    }
    return result;
}

// Baseline for the memory comparison: all templates resident at once.
inline ScheduleResult schedule_eager(const std::vector<TemplateActivation>& templates,
                                     const RunOptions& opts, PipelineRun& run) {
    ScheduleResult result;
    std::vector<std::unique_ptr<TemplateModel>> models;
    for (const TemplateActivation& act : templates) {
        models.push_back(load_template(resolve_ref(opts, act.package_ref)));
        result.gauge.add(models.back()->weight_bytes());
        run.events.push_back({"load", act.name});
    }
    for (size_t i = 0; i < models.size(); ++i) {
        TemplateInput input = models[i]->parse_input(templates[i].input);
        Features features = models[i]->process_inputs(input);
        run.events.push_back({"process_inputs", templates[i].name});
        std::vector<TemplateCache> caches = models[i]->forward(features);
        ++result.forward_invocations;
        run.events.push_back({"forward", templates[i].name});
        for (TemplateCache& c : caches) result.caches.push_back(std::move(c));
    }
    for (size_t i = models.size(); i-- > 0;) {
        result.gauge.remove(models[i]->weight_bytes());
        models[i].reset();
        run.events.push_back({"unload", templates[i].name});
    }
    return result;
}

}  // namespace detail_pipeline

struct RunResult {
    Image image;
    Tensor latent;
    MergedBundle bundle;
    PipelineRun run;
    ResidencyGauge gauge;
};

// The three pipeline steps: run each template on its own input, merge the
// emitted caches by type, pass the merged bundle into the base sampler.
inline RunResult run_pipeline(const DenoiserModel& base, const GenerationRequest& req,
                              const RunOptions& opts = {}, bool eager_load = false) {
    req.check();
    RunResult result;
    result.run.request = req;

    detail_pipeline::ScheduleResult scheduled =
        eager_load ? detail_pipeline::schedule_eager(req.templates, opts, result.run)
                   : detail_pipeline::schedule_round_robin(req.templates, opts, result.run);
    result.gauge = scheduled.gauge;

    result.bundle = merge_heterogeneous(scheduled.caches);
    result.run.events.push_back({"merge", "-"});

    SampleHooks hooks;
    hooks.on_step = [&](int i) {
        result.run.events.push_back({"denoise_step", std::to_string(i)});
    };
    hooks.on_constraint = [&](int i) {
        result.run.events.push_back({"constraint_applied", std::to_string(i)});
    };
    result.latent = sample_latent(base, req, result.bundle, hooks);
    result.image = vae_decode(result.latent);

    if (!opts.events_path.empty()) {
        std::string text = result.run.serialize();
        std::ofstream f(opts.events_path, std::ios::binary);
        if (!f) throw IoError("cannot write event log: " + opts.events_path);
        f << text;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Timing probe: template path encodes conditions once; the in-loop baseline
// re-runs every template's encoding work inside each denoising step.
// ---------------------------------------------------------------------------

struct TimingProbeResult {
    int encoder_invocations = 0;
    double wall_seconds = 0.0;
};

inline TimingProbeResult timing_probe(const DenoiserModel& base, const GenerationRequest& req,
                                      bool with_templates, const RunOptions& opts = {}) {
    auto t0 = std::chrono::steady_clock::now();
    TimingProbeResult probe;
    if (with_templates) {
        RunResult r = run_pipeline(base, req, opts);
        for (const PipelineEvent& e : r.run.events)
            if (e.kind == "forward") ++probe.encoder_invocations;
    } else {
        // in-loop conditioning: caches recomputed inside every step
        std::vector<std::unique_ptr<TemplateModel>> models;
        std::vector<TemplateInput> inputs;
        for (const TemplateActivation& act : req.templates) {
            models.push_back(load_template(detail_pipeline::resolve_ref(opts, act.package_ref)));
            inputs.push_back(models.back()->parse_input(act.input));
        }
        Rng rng(req.seed);
        Rng constraint_rng = derive_stream(req.seed, "step-constraint");
        const int hl = base.cfg.latent_size(), wl = base.cfg.latent_size();
        Tensor x = Tensor::randn({hl, wl, 3}, rng);
        const float dt = 1.0f / static_cast<float>(req.steps);
        for (int i = 0; i < req.steps; ++i) {
            std::vector<TemplateCache> caches;
            for (size_t m = 0; m < models.size(); ++m) {
                Features f = models[m]->process_inputs(inputs[m]);
                std::vector<TemplateCache> cs = models[m]->forward(f);
                ++probe.encoder_invocations;
                for (TemplateCache& c : cs) caches.push_back(std::move(c));
            }
            MergedBundle bundle = merge_heterogeneous(caches);
            const float tval = 1.0f - static_cast<float>(i) / static_cast<float>(req.steps);
            Tape t;
            InjectedKV inj;
            TensorMap adapted = base.params;
            if (bundle.lora)
                for (const auto& [target, deltas] : bundle.lora->deltas)
                    adapted[target + ".w"] = ops::apply_lora(adapted.at(target + ".w"), deltas,
                                                             bundle.lora->strength);
            ParamVars pv_cond = lift_params(t, adapted, Leaf::Constant);
            if (bundle.kv) inj = lift_kv(t, *bundle.kv);
            Var v_cond = denoiser_forward(t, base.cfg, pv_cond, t.leaf(x), tval,
                                          req.condition_id, bundle.kv ? &inj : nullptr);
            ParamVars pv_null = lift_params(t, base.params, Leaf::Constant);
            Var v_null = denoiser_forward(t, base.cfg, pv_null, t.leaf(x), tval,
                                          kNullConditionId, nullptr);
            Tensor v = ops::add(t.value(v_null),
                                ops::scale(ops::sub(t.value(v_cond), t.value(v_null)),
                                           req.guidance_scale));
            x = ops::sub(x, ops::scale(v, dt));
            if (!bundle.constraints.empty()) {
                const float t_next =
                    1.0f - static_cast<float>(i + 1) / static_cast<float>(req.steps);
                x = apply_step_constraints(x, bundle.constraints,
                                           i + 1 == req.steps ? 0.0f : t_next, constraint_rng);
            }
        }
    }
    probe.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return probe;
}

}  // namespace templet

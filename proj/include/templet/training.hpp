// training.hpp - two-stage template training and base pretraining
//
// Stage I runs process_inputs with no tape and caches the features on disk,
// keyed by sha256(name || version || serialized raw input). Stage II
// optimizes only template parameters through forward against the frozen
// base's flow loss. The feature cache is an optimization, never a semantic
// change: training with it on or off yields bit-identical weights.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "templet/archive.hpp"
#include "templet/backbone.hpp"
#include "templet/dataset.hpp"
#include "templet/errors.hpp"
#include "templet/package.hpp"
#include "templet/sha256.hpp"
#include "templet/template_model.hpp"

namespace templet {

// ---------------------------------------------------------------------------
// Adam with fixed defaults (beta1 0.9, beta2 0.999, eps 1e-8)
// ---------------------------------------------------------------------------

class AdamOptimizer {
public:
    explicit AdamOptimizer(float lr) : lr_(lr) {
        if (!(lr > 0.0f)) throw ShapeError("adam: learning rate must be > 0");
    }

    void update(TensorMap& params, const std::map<std::string, Tensor>& grads) {
        ++step_;
        const float bc1 = 1.0f - std::pow(0.9f, static_cast<float>(step_));
        const float bc2 = 1.0f - std::pow(0.999f, static_cast<float>(step_));
        for (const auto& [name, g] : grads) {
            Tensor& p = params.at(name);
            Tensor& m = moment1_.try_emplace(name, Tensor(p.shape)).first->second;
            Tensor& v = moment2_.try_emplace(name, Tensor(p.shape)).first->second;
            for (size_t i = 0; i < p.data.size(); ++i) {
                m.data[i] = 0.9f * m.data[i] + 0.1f * g.data[i];
                v.data[i] = 0.999f * v.data[i] + 0.001f * g.data[i] * g.data[i];
                float mhat = m.data[i] / bc1;
                float vhat = v.data[i] / bc2;
                p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + 1e-8f);
            }
        }
    }

private:
    float lr_;
    int step_ = 0;
    std::map<std::string, Tensor> moment1_, moment2_;
};

// ---------------------------------------------------------------------------
// Stage I feature cache
// ---------------------------------------------------------------------------

inline std::string feature_cache_key(const TemplateModel& tm, const TemplateInput& input) {
    std::vector<uint8_t> buf;
    const Manifest& m = tm.manifest();
    buf.insert(buf.end(), m.name.begin(), m.name.end());
    buf.push_back(0);
    buf.insert(buf.end(), m.version.begin(), m.version.end());
    buf.push_back(0);
    std::vector<uint8_t> in = input.canonical_bytes();
    buf.insert(buf.end(), in.begin(), in.end());
    return sha256_hex(buf);
}

class FeatureCache {
public:
    explicit FeatureCache(std::string dir) : dir_(std::move(dir)) {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    bool enabled() const { return !dir_.empty(); }
    int recomputes() const { return recomputes_; }
    int hits() const { return hits_; }
    int corruptions() const { return corruptions_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    Features get_or_compute(const TemplateModel& tm, const TemplateInput& input) {
        if (!enabled()) {
            ++recomputes_;
            return tm.process_inputs(input);
        }
        const std::string key = feature_cache_key(tm, input);
        const std::string path = dir_ + "/" + key;
        if (std::filesystem::exists(path)) {
            std::ifstream f(path, std::ios::binary);
            std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                       std::istreambuf_iterator<char>());
            std::string want;
            {
                std::ifstream sf(path + ".sum");
                std::getline(sf, want);
            }
            if (!want.empty() && want == sha256_hex(bytes)) {
                ++hits_;
                return archive_decode(bytes);
            }
            ++corruptions_;
            std::string w = "feature cache entry " + key + " failed its checksum; recomputing";
            warnings_.push_back(w);
            std::fprintf(stderr, "warning: %s\n", w.c_str());
        }
        ++recomputes_;
        Features features = tm.process_inputs(input);
        std::vector<uint8_t> bytes = archive_encode(features);
        write_binary_file(path, bytes.data(), bytes.size());
        std::string digest = sha256_hex(bytes) + "\n";
        write_binary_file(path + ".sum", digest.data(), digest.size());
        return features;
    }

private:
    std::string dir_;
    int recomputes_ = 0;
    int hits_ = 0;
    int corruptions_ = 0;
    std::vector<std::string> warnings_;
};

struct Stage1Report {
    int computed = 0;
    int hits = 0;
    int corruptions = 0;
    std::vector<std::string> keys;
};

// No-gradient preprocessing pass over the dataset; re-runs hit the cache and
// skip computation entirely.
inline Stage1Report stage1_preprocess(const TemplateModel& tm, const zoo::Dataset& data,
                                      const std::string& cache_dir) {
    FeatureCache cache(cache_dir);
    Stage1Report report;
    for (const zoo::Sample& s : data.samples) {
        int before = cache.recomputes();
        cache.get_or_compute(tm, s.input);
        report.keys.push_back(feature_cache_key(tm, s.input));
        report.computed += cache.recomputes() - before;
    }
    report.hits = cache.hits();
    report.corruptions = cache.corruptions();
    return report;
}

// ---------------------------------------------------------------------------
// Stage II: optimize template parameters against the frozen base
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 2000;
    int batch = 8;
    float lr = 1e-3f;
    uint64_t seed = 0;
    std::string cache_dir;  // empty disables the feature cache
    float t_min = 0.001f;
    float t_max = 0.999f;
    float cond_dropout = 0.1f;  // train_base only

    void check() const {
        if (steps < 0) throw ShapeError("train: steps must be >= 0");
        if (batch < 1) throw ShapeError("train: batch must be >= 1");
        if (!(lr > 0.0f)) throw ShapeError("train: learning rate must be > 0");
    }
};

struct TrainReport {
    std::vector<std::pair<int, float>> loss_curve;
    std::string base_digest_before;
    std::string base_digest_after;
    int cache_recomputes = 0;
    int cache_hits = 0;
    std::vector<std::string> dead_params;  // no gradient within the first 10 steps
};

inline void write_loss_curve(const std::string& path,
                             const std::vector<std::pair<int, float>>& curve) {
    std::string text = "step,loss\n";
    for (const auto& [step, loss] : curve) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%d,%.9g\n", step, static_cast<double>(loss));
        text += buf;
    }
    write_binary_file(path, text.data(), text.size());
}

inline TrainReport stage2_train(TemplateModel& tm, const DenoiserModel& base,
                                const zoo::Dataset& data, const TrainConfig& cfg) {
    cfg.check();
    if (data.samples.empty()) throw ShapeError("train: empty dataset");
    TrainReport report;
    report.base_digest_before = weights_digest(base.params);

    FeatureCache cache(cfg.cache_dir);
    AdamOptimizer adam(cfg.lr);
    Rng rng(cfg.seed);
    std::map<std::string, bool> grad_seen;
    for (const auto& [name, p] : tm.params()) grad_seen[name] = false;

    for (int step = 0; step < cfg.steps; ++step) {
        Tape t;
        ParamVars base_pv = lift_params(t, base.params, Leaf::Frozen);
        ParamVars tmpl_pv = lift_params(t, tm.params(), Leaf::Trainable);

        Var total;
        for (int b = 0; b < cfg.batch; ++b) {
            const zoo::Sample& s =
                data.samples[rng.below(data.samples.size())];
            Features features = cache.get_or_compute(tm, s.input);
            CacheVars cv = tm.forward_on_tape(t, tmpl_pv, features);

            ParamVars pv = base_pv;
            if (cv.lora) {
                for (const auto& [target, ds] : cv.lora->deltas) {
                    auto it = pv.find(target + ".w");
                    if (it == pv.end())
                        throw ShapeError("train: lora target " + target +
                                         " names no base linear");
                    Var w = it->second;
                    for (const LoRAVarDelta& d : ds)
                        w = t.add(w, t.scale(t.matmul(d.up, d.down),
                                             cv.lora->strength * d.alpha /
                                                 static_cast<float>(
                                                     t.value(d.down).shape[0])));
                    it->second = w;
                }
            }
            InjectedKV inj;
            if (cv.kv)
                for (const auto& [layer, kv] : cv.kv->banks) inj.banks[layer] = kv;

            Tensor x0 = vae_encode(s.target);
            float tval = static_cast<float>(rng.uniform(cfg.t_min, cfg.t_max));
            Tensor noise = Tensor::randn(x0.shape, rng);
            Var loss = flow_loss_tape(t, base.cfg, pv, x0, s.condition_id, noise, tval,
                                      cv.kv ? &inj : nullptr);
            total = b == 0 ? loss : t.add(total, loss);
        }
        Var mean_loss = t.scale(total, 1.0f / static_cast<float>(cfg.batch));
        t.backward(mean_loss);
        t.assert_frozen_clean();

        std::map<std::string, Tensor> grads;
        for (const auto& [name, var] : tmpl_pv) {
            if (step < 10 && t.has_grad(var)) {
                for (float v : t.grad(var).data)
                    if (v != 0.0f) {
                        grad_seen[name] = true;
                        break;
                    }
            }
            grads[name] = t.grad(var);
        }
        adam.update(tm.params(), grads);
        report.loss_curve.emplace_back(step, t.value(mean_loss).data[0]);
    }

    for (const auto& [name, seen] : grad_seen)
        if (!seen && cfg.steps >= 10) report.dead_params.push_back(name);
    report.cache_recomputes = cache.recomputes();
    report.cache_hits = cache.hits();
    report.base_digest_after = weights_digest(base.params);
    if (report.base_digest_after != report.base_digest_before)
        throw FrozenParamError("train: base weights changed during template training");
    return report;
}

// ---------------------------------------------------------------------------
// Base pretraining: unconditional + per-condition with condition dropout so
// classifier-free guidance has a null branch to extrapolate from.
// ---------------------------------------------------------------------------

struct BaseTrainReport {
    std::vector<std::pair<int, float>> loss_curve;
    int dropout_draws = 0;
    int dropout_nulls = 0;
    std::string final_digest;
};

inline BaseTrainReport train_base(DenoiserModel& base, const zoo::Dataset& data,
                                  const TrainConfig& cfg) {
    cfg.check();
    if (data.samples.empty()) throw ShapeError("train: empty dataset");
    BaseTrainReport report;
    AdamOptimizer adam(cfg.lr);
    Rng rng(cfg.seed);

    for (int step = 0; step < cfg.steps; ++step) {
        Tape t;
        ParamVars pv = lift_params(t, base.params, Leaf::Trainable);
        Var total;
        for (int b = 0; b < cfg.batch; ++b) {
            const zoo::Sample& s = data.samples[rng.below(data.samples.size())];
            ++report.dropout_draws;
            int cond = s.condition_id;
            if (rng.uniform() < cfg.cond_dropout) {
                cond = kNullConditionId;
                ++report.dropout_nulls;
            }
            Tensor x0 = vae_encode(s.target);
            float tval = static_cast<float>(rng.uniform(cfg.t_min, cfg.t_max));
            Tensor noise = Tensor::randn(x0.shape, rng);
            Var loss = flow_loss_tape(t, base.cfg, pv, x0, cond, noise, tval, nullptr);
            total = b == 0 ? loss : t.add(total, loss);
        }
        Var mean_loss = t.scale(total, 1.0f / static_cast<float>(cfg.batch));
        t.backward(mean_loss);

        std::map<std::string, Tensor> grads;
        for (const auto& [name, var] : pv) grads[name] = t.grad(var);
        adam.update(base.params, grads);
        report.loss_curve.emplace_back(step, t.value(mean_loss).data[0]);
    }
    report.final_digest = weights_digest(base.params);
    return report;
}

}  // namespace templet

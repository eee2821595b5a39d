// template_model.hpp - the plugin model interface and the kind registry
//
// A template model maps task-specific input to a capability cache in two
// stages: process_inputs (deterministic, side-effect free, never taped) and
// forward (all and only the trainable computation, recordable on a Tape).
// Implementations are selected declaratively by the manifest's template_kind;
// loading a package never executes stored code.
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "templet/autodiff.hpp"
#include "templet/backbone.hpp"
#include "templet/cache.hpp"
#include "templet/errors.hpp"
#include "templet/image.hpp"
#include "templet/manifest.hpp"

namespace templet {

struct TemplateInput {
    std::string text;
    std::vector<Image> images;

    // Canonical serialization used for feature-cache keys.
    std::vector<uint8_t> canonical_bytes() const {
        std::vector<uint8_t> out(text.begin(), text.end());
        out.push_back(0);
        for (const Image& img : images) {
            std::vector<uint8_t> ppm = encode_ppm(img);
            out.insert(out.end(), ppm.begin(), ppm.end());
        }
        return out;
    }
};

using Features = TensorMap;

// Tape-resident mirror of a TemplateCache, produced by forward during
// training so gradients can flow from the base loss into template parameters.
struct KVCacheVars {
    std::map<int, std::pair<Var, Var>> banks;  // layer -> (keys, values)
};

struct LoRAVarDelta {
    std::string target_id;
    Var down;
    Var up;
    float alpha = 1.0f;
};

struct LoRACacheVars {
    std::map<std::string, std::vector<LoRAVarDelta>> deltas;
    float strength = 1.0f;
};

struct CacheVars {
    std::optional<KVCacheVars> kv;
    std::optional<LoRACacheVars> lora;
    std::vector<StepConstraint> constraints;
};

class TemplateModel {
public:
    virtual ~TemplateModel() = default;

    const Manifest& manifest() const { return manifest_; }
    Manifest& manifest() { return manifest_; }
    const TensorMap& params() const { return params_; }
    TensorMap& params() { return params_; }

    size_t weight_bytes() const {
        size_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel() * sizeof(float);
        return n;
    }

    // CLI/raw input string -> TemplateInput; image kinds load referenced files.
    virtual TemplateInput parse_input(const std::string& raw) const {
        return TemplateInput{raw, {}};
    }

    virtual Features process_inputs(const TemplateInput& input) const = 0;

    virtual CacheVars forward_on_tape(Tape& t, const ParamVars& pv,
                                      const Features& f) const = 0;

    // Inference-path forward: runs the taped computation with constant leaves
    // and extracts plain caches. The pipelines and trainer share one forward
    // implementation this way.
    std::vector<TemplateCache> forward(const Features& f) const {
        Tape t;
        ParamVars pv = lift_params(t, params_, Leaf::Constant);
        CacheVars cv = forward_on_tape(t, pv, f);
        std::vector<TemplateCache> out;
        if (!cv.constraints.empty()) out.push_back(PipelineArgsCache{cv.constraints});
        if (cv.kv) {
            KVCache kv;
            for (const auto& [layer, pair] : cv.kv->banks) {
                KVBank bank;
                bank.layer_id = layer;
                bank.keys = t.value(pair.first);
                bank.values = t.value(pair.second);
                kv.banks[layer] = std::move(bank);
            }
            out.push_back(std::move(kv));
        }
        if (cv.lora) {
            LoRACache lc;
            lc.strength = cv.lora->strength;
            for (const auto& [target, ds] : cv.lora->deltas)
                for (const LoRAVarDelta& d : ds) {
                    LoRADelta delta;
                    delta.target_id = target;
                    delta.down = t.value(d.down);
                    delta.up = t.value(d.up);
                    delta.alpha = d.alpha;
                    lc.deltas[target].push_back(std::move(delta));
                }
            out.push_back(std::move(lc));
        }
        return out;
    }

protected:
    Manifest manifest_;
    TensorMap params_;
};

class TemplateRegistry {
public:
    using Factory =
        std::function<std::unique_ptr<TemplateModel>(const Manifest&, TensorMap)>;
    // Builds a fresh, untrained template of the kind with seeded init.
    using Creator = std::function<std::unique_ptr<TemplateModel>(
        const std::string& name, const std::map<std::string, ManifestValue>& hyper,
        uint64_t seed)>;

    static TemplateRegistry& instance() {
        static TemplateRegistry reg;
        return reg;
    }

    void register_kind(const std::string& kind, Factory factory, Creator creator) {
        factories_[kind] = std::move(factory);
        creators_[kind] = std::move(creator);
    }

    bool has(const std::string& kind) const { return factories_.count(kind) != 0; }

    std::vector<std::string> kinds() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : factories_) out.push_back(k);
        return out;
    }

    std::unique_ptr<TemplateModel> instantiate(const Manifest& m, TensorMap tensors) const {
        auto it = factories_.find(m.template_kind);
        if (it == factories_.end())
            throw RegistryError("unregistered template_kind '" + m.template_kind + "'");
        return it->second(m, std::move(tensors));
    }

    std::unique_ptr<TemplateModel> create(const std::string& kind, const std::string& name,
                                          const std::map<std::string, ManifestValue>& hyper,
                                          uint64_t seed) const {
        auto it = creators_.find(kind);
        if (it == creators_.end())
            throw RegistryError("unregistered template_kind '" + kind + "'");
        return it->second(name, hyper, seed);
    }

private:
    std::map<std::string, Factory> factories_;
    std::map<std::string, Creator> creators_;
};

}  // namespace templet

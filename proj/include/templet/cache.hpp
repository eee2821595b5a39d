// cache.hpp - capability caches and the merge engine
//
// A TemplateCache carries exactly one capability variant: per-layer KV token
// banks, per-target low-rank deltas, or pipeline-argument constraints.
// Merging is pure and never converts between variants: KV caches concatenate
// along the token dimension, LoRA caches along the rank dimension, constraint
// caches are collected in activation order.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "templet/errors.hpp"
#include "templet/tensor.hpp"

namespace templet {

struct KVCache {
    std::map<int, KVBank> banks;  // layer_id -> bank
};

struct LoRACache {
    std::map<std::string, std::vector<LoRADelta>> deltas;  // target_id -> deltas
    float strength = 1.0f;
};

// Post-step latent constraint: mask is latent-shaped in {0,1} (1 = editable),
// reference is the latent preserved where the mask is 0.
struct StepConstraint {
    Tensor mask;
    Tensor reference;
};

struct PipelineArgsCache {
    std::vector<StepConstraint> constraints;
};

using TemplateCache = std::variant<KVCache, LoRACache, PipelineArgsCache>;

// Banks concatenated along the token dimension in list order; layers present
// in only some caches pass through unchanged.
inline KVCache merge_kv(const std::vector<KVCache>& caches) {
    if (caches.empty()) throw ShapeError("merge_kv: empty cache list");
    KVCache out;
    for (const KVCache& c : caches) {
        for (const auto& [layer, bank] : c.banks) {
            bank.check();
            auto it = out.banks.find(layer);
            if (it == out.banks.end()) {
                out.banks[layer] = bank;
                continue;
            }
            KVBank& acc = it->second;
            if (!bank.empty() && !acc.empty() && acc.keys.shape[1] != bank.keys.shape[1])
                throw ShapeError("merge_kv: layer " + std::to_string(layer) +
                                 " dim mismatch " + acc.keys.shape_str() + " vs " +
                                 bank.keys.shape_str());
            acc.keys = ops::concat_rows(acc.keys, bank.keys);
            acc.values = ops::concat_rows(acc.values, bank.values);
        }
    }
    return out;
}

// Deltas stacked per target: down matrices along rank rows, up matrices along
// rank columns. Each sub-delta's (strength * alpha / rank) is folded into its
// up block, so the merged cache is self-contained with strength 1 and
// alpha == merged rank (unit applied scale). Sub-deltas from a strength-0
// cache contribute nothing and are dropped, keeping the applied weight
// bit-identical to the no-LoRA weight.
inline LoRACache merge_lora(const std::vector<LoRACache>& caches) {
    if (caches.empty()) throw ShapeError("merge_lora: empty cache list");
    struct Stack {
        std::vector<const LoRADelta*> parts;
        std::vector<float> folds;
    };
    std::map<std::string, Stack> stacks;
    for (const LoRACache& c : caches) {
        if (c.strength == 0.0f) continue;
        for (const auto& [target, ds] : c.deltas)
            for (const LoRADelta& d : ds) {
                d.check();
                stacks[target].parts.push_back(&d);
                stacks[target].folds.push_back(c.strength * d.alpha /
                                               static_cast<float>(d.rank()));
            }
    }
    LoRACache out;
    out.strength = 1.0f;
    for (auto& [target, st] : stacks) {
        int total_rank = 0;
        const int d_in = st.parts[0]->down.shape[1];
        const int d_out = st.parts[0]->up.shape[0];
        for (const LoRADelta* d : st.parts) {
            if (d->down.shape[1] != d_in || d->up.shape[0] != d_out)
                throw ShapeError("merge_lora: target " + target + " shape mismatch " +
                                 d->down.shape_str() + "/" + d->up.shape_str());
            total_rank += d->rank();
        }
        LoRADelta merged;
        merged.target_id = target;
        merged.alpha = static_cast<float>(total_rank);
        merged.down = Tensor({total_rank, d_in});
        merged.up = Tensor({d_out, total_rank});
        int row = 0;
        for (size_t p = 0; p < st.parts.size(); ++p) {
            const LoRADelta& d = *st.parts[p];
            const float f = st.folds[p];
            for (int r = 0; r < d.rank(); ++r)
                for (int j = 0; j < d_in; ++j) merged.down.at(row + r, j) = d.down.at(r, j);
            for (int i = 0; i < d_out; ++i)
                for (int r = 0; r < d.rank(); ++r)
                    merged.up.at(i, row + r) = d.up.at(i, r) * f;
            row += d.rank();
        }
        out.deltas[target].push_back(std::move(merged));
    }
    return out;
}

// Grouped heterogeneous merge; variants never convert into one another.
struct MergedBundle {
    std::optional<KVCache> kv;
    std::optional<LoRACache> lora;
    std::vector<StepConstraint> constraints;

    bool empty() const { return !kv && !lora && constraints.empty(); }
};

inline MergedBundle merge_heterogeneous(const std::vector<TemplateCache>& caches) {
    std::vector<KVCache> kvs;
    std::vector<LoRACache> loras;
    MergedBundle bundle;
    for (const TemplateCache& c : caches) {
        if (const KVCache* kv = std::get_if<KVCache>(&c)) {
            kvs.push_back(*kv);
        } else if (const LoRACache* lora = std::get_if<LoRACache>(&c)) {
            loras.push_back(*lora);
        } else {
            const PipelineArgsCache& pa = std::get<PipelineArgsCache>(c);
            bundle.constraints.insert(bundle.constraints.end(), pa.constraints.begin(),
                                      pa.constraints.end());
        }
    }
    if (!kvs.empty()) bundle.kv = merge_kv(kvs);
    if (!loras.empty()) {
        LoRACache merged = merge_lora(loras);
        if (!merged.deltas.empty()) bundle.lora = std::move(merged);
    }
    return bundle;
}

}  // namespace templet

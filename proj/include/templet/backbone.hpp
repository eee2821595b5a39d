// backbone.hpp - the desk-scale base pipeline: toy VAE, transformer denoiser,
// flow-matching loss, and the guided Euler sampler.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "templet/archive.hpp"
#include "templet/autodiff.hpp"
#include "templet/cache.hpp"
#include "templet/errors.hpp"
#include "templet/image.hpp"
#include "templet/rng.hpp"
#include "templet/sha256.hpp"
#include "templet/tensor.hpp"

namespace templet {

// ---------------------------------------------------------------------------
// VAE: fixed parameter-free pool/upsample pair. Latent is (h/2, w/2, 3).
// ---------------------------------------------------------------------------

// 2x2 average pool per channel. Dimensions must be divisible by 4 (one factor
// for the pool, one for the denoiser's patching).
inline Tensor vae_encode(const Image& img) {
    if (img.width % 4 != 0 || img.height % 4 != 0)
        throw ShapeError("vae_encode: dimensions " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " not divisible by 4");
    const int hl = img.height / 2, wl = img.width / 2;
    Tensor lat({hl, wl, 3});
    for (int y = 0; y < hl; ++y)
        for (int x = 0; x < wl; ++x)
            for (int c = 0; c < 3; ++c)
                lat.data[(static_cast<size_t>(y) * wl + x) * 3 + c] =
                    0.25f * (img.at(2 * y, 2 * x, c) + img.at(2 * y, 2 * x + 1, c) +
                             img.at(2 * y + 1, 2 * x, c) + img.at(2 * y + 1, 2 * x + 1, c));
    return lat;
}

// 2x block upsample (each latent pixel fills its 2x2 block), clamped to [0,1].
// The block kernel, rather than an interpolating one, keeps encode/decode an
// exact inverse pair on block-constant content.
inline Image vae_decode(const Tensor& lat) {
    if (lat.shape.size() != 3 || lat.shape[2] != 3)
        throw ShapeError("vae_decode: expected (h,w,3), got " + lat.shape_str());
    const int hl = lat.shape[0], wl = lat.shape[1];
    Image img(wl * 2, hl * 2);
    for (int y = 0; y < hl; ++y)
        for (int x = 0; x < wl; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(lat.data[(static_cast<size_t>(y) * wl + x) * 3 + c],
                                     0.0f, 1.0f);
                img.at(2 * y, 2 * x, c) = v;
                img.at(2 * y, 2 * x + 1, c) = v;
                img.at(2 * y + 1, 2 * x, c) = v;
                img.at(2 * y + 1, 2 * x + 1, c) = v;
            }
    return img;
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    int image_size = 32;  // square images; latent 16x16x3, 64 patch tokens
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 4;
    int mlp_ratio = 4;
    int patch = 2;
    int n_conditions = 4;  // condition ids 1.. plus null id 0
    int time_dim = 64;

    int latent_size() const { return image_size / 2; }
    int n_patches() const {
        int s = latent_size() / patch;
        return s * s;
    }
    int patch_dim() const { return patch * patch * 3; }
    int seq_len() const { return n_patches() + 2; }  // two conditioning tokens
};

constexpr int kNullConditionId = 0;

// Sinusoidal embedding of a scalar; cos in the first half, sin in the second.
inline Tensor sinusoidal_embedding(float x, int dim, float scale = 1000.0f) {
    const int half = dim / 2;
    Tensor out({1, dim});
    for (int j = 0; j < half; ++j) {
        float freq = std::exp(-std::log(10000.0f) * static_cast<float>(j) / half);
        float ang = scale * x * freq;
        out.data[static_cast<size_t>(j)] = std::cos(ang);
        out.data[static_cast<size_t>(half + j)] = std::sin(ang);
    }
    return out;
}

// Row-gather indices mapping a (hl, wl, 3) latent, viewed as (hl*wl*3, 1),
// onto (n_patches * patch_dim, 1) patch-major order.
inline std::vector<int> patchify_indices(int hl, int wl, int patch) {
    const int ph = hl / patch, pw = wl / patch;
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(hl) * wl * 3);
    for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < 3; ++c)
                        idx.push_back(((py * patch + dy) * wl + (px * patch + dx)) * 3 + c);
    return idx;
}

inline std::vector<int> unpatchify_indices(int hl, int wl, int patch) {
    std::vector<int> fwd = patchify_indices(hl, wl, patch);
    std::vector<int> inv(fwd.size());
    for (size_t i = 0; i < fwd.size(); ++i) inv[static_cast<size_t>(fwd[i])] = static_cast<int>(i);
    return inv;
}

// Per-layer injected KV as tape vars (template training passes live nodes).
struct InjectedKV {
    std::map<int, std::pair<Var, Var>> banks;  // layer -> (keys, values)
};

inline InjectedKV lift_kv(Tape& t, const KVCache& kv) {
    InjectedKV inj;
    for (const auto& [layer, bank] : kv.banks) {
        if (bank.empty()) continue;
        inj.banks[layer] = {t.leaf(bank.keys), t.leaf(bank.values)};
    }
    return inj;
}

struct DenoiserModel {
    DenoiserConfig cfg;
    TensorMap params;

    static DenoiserModel init(const DenoiserConfig& cfg, uint64_t seed) {
        DenoiserModel m;
        m.cfg = cfg;
        Rng rng(seed);
        const int d = cfg.d_model;
        const float w0 = 0.02f;
        auto W = [&](std::vector<int> s) { return Tensor::randn(std::move(s), rng, w0); };
        auto zeros = [](std::vector<int> s) { return Tensor(std::move(s)); };
        auto ones = [](std::vector<int> s) { return Tensor(std::move(s), 1.0f); };

        m.params["patch_embed.w"] = W({d, cfg.patch_dim()});
        m.params["patch_embed.b"] = zeros({d});
        m.params["pos_embed"] = W({cfg.n_patches(), d});
        m.params["time_mlp.fc1.w"] = W({d, cfg.time_dim});
        m.params["time_mlp.fc1.b"] = zeros({d});
        m.params["time_mlp.fc2.w"] = W({d, d});
        m.params["time_mlp.fc2.b"] = zeros({d});
        m.params["cond_embed"] = W({cfg.n_conditions, d});
        for (int i = 0; i < cfg.n_blocks; ++i) {
            std::string p = "blocks." + std::to_string(i) + ".";
            m.params[p + "ln1.g"] = ones({d});
            m.params[p + "ln1.b"] = zeros({d});
            for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
                m.params[p + name + ".w"] = W({d, d});
                m.params[p + name + ".b"] = zeros({d});
            }
            m.params[p + "ln2.g"] = ones({d});
            m.params[p + "ln2.b"] = zeros({d});
            m.params[p + "mlp.fc1.w"] = W({d * cfg.mlp_ratio, d});
            m.params[p + "mlp.fc1.b"] = zeros({d * cfg.mlp_ratio});
            m.params[p + "mlp.fc2.w"] = W({d, d * cfg.mlp_ratio});
            m.params[p + "mlp.fc2.b"] = zeros({d});
        }
        m.params["final_ln.g"] = ones({d});
        m.params["final_ln.b"] = zeros({d});
        m.params["out_proj.w"] = W({cfg.patch_dim(), d});
        m.params["out_proj.b"] = zeros({cfg.patch_dim()});
        return m;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [k, v] : params) n += v.numel();
        return n;
    }

    // Names of every LoRA-wrappable linear.
    std::vector<std::string> linear_targets() const {
        std::vector<std::string> out = {"patch_embed", "time_mlp.fc1", "time_mlp.fc2",
                                        "out_proj"};
        for (int i = 0; i < cfg.n_blocks; ++i) {
            std::string p = "blocks." + std::to_string(i) + ".";
            for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.out", "mlp.fc1",
                                     "mlp.fc2"})
                out.push_back(p + name);
        }
        return out;
    }
};

// Pure transformer forward: (latent, t, condition, injected caches) -> velocity.
// Sequence layout: [time token, condition token, patch tokens...].
inline Var denoiser_forward(Tape& t, const DenoiserConfig& cfg, const ParamVars& pv,
                            Var latent, float tval, int cond_id, const InjectedKV* inj) {
    const int hl = cfg.latent_size(), wl = cfg.latent_size();
    if (t.value(latent).shape != std::vector<int>{hl, wl, 3})
        throw ShapeError("denoiser: latent " + t.value(latent).shape_str() + " vs expected (" +
                         std::to_string(hl) + "," + std::to_string(wl) + ",3)");
    if (cond_id < 0 || cond_id >= cfg.n_conditions)
        throw ShapeError("denoiser: condition id " + std::to_string(cond_id) +
                         " outside vocabulary of " + std::to_string(cfg.n_conditions));

    Var flat = t.reshape(latent, {hl * wl * 3, 1});
    Var tokens = t.reshape(t.gather_rows(flat, patchify_indices(hl, wl, cfg.patch)),
                           {cfg.n_patches(), cfg.patch_dim()});
    Var h = t.add(linear(t, pv, "patch_embed", tokens), pv.at("pos_embed"));

    Var time_in = t.leaf(sinusoidal_embedding(tval, cfg.time_dim));
    Var time_tok = linear(t, pv, "time_mlp.fc2", t.gelu(linear(t, pv, "time_mlp.fc1", time_in)));
    Var cond_tok = t.gather_rows(pv.at("cond_embed"), {cond_id});

    Var x = t.concat_rows(t.concat_rows(time_tok, cond_tok), h);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        std::string p = "blocks." + std::to_string(i) + ".";
        Var n1 = t.layernorm_rows(x, pv.at(p + "ln1.g"), pv.at(p + "ln1.b"));
        Var q = linear(t, pv, p + "attn.q", n1);
        Var k = linear(t, pv, p + "attn.k", n1);
        Var v = linear(t, pv, p + "attn.v", n1);
        Var bk, bv;
        if (inj) {
            auto it = inj->banks.find(i);
            if (it != inj->banks.end()) {
                bk = it->second.first;
                bv = it->second.second;
            }
        }
        Var a = attention_injected(t, q, k, v, bk, bv, cfg.n_heads);
        x = t.add(x, linear(t, pv, p + "attn.out", a));
        Var n2 = t.layernorm_rows(x, pv.at(p + "ln2.g"), pv.at(p + "ln2.b"));
        x = t.add(x, linear(t, pv, p + "mlp.fc2", t.gelu(linear(t, pv, p + "mlp.fc1", n2))));
    }
    Var n = t.layernorm_rows(x, pv.at("final_ln.g"), pv.at("final_ln.b"));
    Var patches = linear(t, pv, "out_proj", t.slice_rows(n, 2, cfg.n_patches()));
    Var flat_out = t.reshape(patches, {hl * wl * 3, 1});
    return t.reshape(t.gather_rows(flat_out, unpatchify_indices(hl, wl, cfg.patch)),
                     {hl, wl, 3});
}

// ---------------------------------------------------------------------------
// Flow-matching loss: x_t = (1-t) x0 + t noise, target velocity noise - x0.
// ---------------------------------------------------------------------------

inline void check_flow_t(float tval) {
    if (!(tval > 0.0f && tval < 1.0f))
        throw ShapeError("flow_loss: t=" + std::to_string(tval) + " outside (0,1)");
}

// Tape form used by training; x0/noise enter as constants, caches as live vars.
inline Var flow_loss_tape(Tape& t, const DenoiserConfig& cfg, const ParamVars& pv,
                          const Tensor& x0, int cond_id, const Tensor& noise, float tval,
                          const InjectedKV* inj) {
    check_flow_t(tval);
    ops::require_same_shape(x0, noise, "flow_loss");
    Tensor x_t = ops::add(ops::scale(x0, 1.0f - tval), ops::scale(noise, tval));
    Tensor v_star = ops::sub(noise, x0);
    Var pred = denoiser_forward(t, cfg, pv, t.leaf(std::move(x_t)), tval, cond_id, inj);
    return t.mse(pred, t.leaf(std::move(v_star)));
}

inline float flow_loss(const DenoiserModel& m, const Tensor& x0, int cond_id,
                       const Tensor& noise, float tval, const MergedBundle& bundle) {
    Tape t;
    TensorMap adapted = m.params;
    if (bundle.lora)
        for (const auto& [target, deltas] : bundle.lora->deltas)
            adapted[target + ".w"] =
                ops::apply_lora(adapted.at(target + ".w"), deltas, bundle.lora->strength);
    ParamVars pv = lift_params(t, adapted, Leaf::Constant);
    InjectedKV inj;
    if (bundle.kv) inj = lift_kv(t, *bundle.kv);
    Var loss = flow_loss_tape(t, m.cfg, pv, x0, cond_id, noise, tval,
                              bundle.kv ? &inj : nullptr);
    return t.value(loss).data[0];
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct TemplateActivation {
    std::string name;         // instance name used in event logs
    std::string package_ref;  // local directory or resolvable ref
    std::string input;        // raw template input
};

struct GenerationRequest {
    int condition_id = kNullConditionId;
    uint64_t seed = 0;
    int steps = 50;
    float guidance_scale = 4.0f;
    int width = 32;
    int height = 32;
    std::vector<TemplateActivation> templates;

    void check() const {
        if (steps < 1) throw ShapeError("request: steps must be >= 1");
        if (guidance_scale < 0.0f) throw ShapeError("request: guidance scale must be >= 0");
    }
};

// Re-noises the reference to the level of t_next and replaces non-editable
// elements (mask 0). At t_next == 0 the reference is used as-is, which makes
// the unmasked region of the final latent bit-identical to the reference.
inline Tensor apply_step_constraints(const Tensor& latent,
                                     const std::vector<StepConstraint>& constraints,
                                     float t_next, Rng& rng) {
    Tensor out = latent;
    for (const StepConstraint& c : constraints) {
        ops::require_same_shape(out, c.mask, "step_constraint");
        ops::require_same_shape(out, c.reference, "step_constraint");
        Tensor noised = c.reference;
        if (t_next != 0.0f) {
            for (float& v : noised.data)
                v = (1.0f - t_next) * v + t_next * rng.normal();
        }
        for (size_t i = 0; i < out.data.size(); ++i)
            if (c.mask.data[i] == 0.0f) out.data[i] = noised.data[i];
    }
    return out;
}

struct SampleHooks {
    std::function<void(int)> on_step;        // after each Euler update
    std::function<void(int)> on_constraint;  // after constraints were applied
};

// Euler sampler, t: 1 -> 0 in `steps` equal strides, with classifier-free
// guidance v = v_null + s (v_cond - v_null). The null branch always runs the
// pristine base model with the null condition id and no caches; s == 0 and
// s == 1 short-circuit to the single matching branch (bitwise identities).
// Returns the final latent; decode separately for the image.
inline Tensor sample_latent(const DenoiserModel& m, const GenerationRequest& req,
                            const MergedBundle& bundle, const SampleHooks& hooks = {}) {
    req.check();
    if (req.width != m.cfg.image_size || req.height != m.cfg.image_size)
        throw ShapeError("sample: request " + std::to_string(req.width) + "x" +
                         std::to_string(req.height) + " vs model image size " +
                         std::to_string(m.cfg.image_size));
    const int hl = m.cfg.latent_size(), wl = m.cfg.latent_size();

    TensorMap adapted;
    const TensorMap* cond_params = &m.params;
    if (bundle.lora) {
        adapted = m.params;
        for (const auto& [target, deltas] : bundle.lora->deltas) {
            auto it = adapted.find(target + ".w");
            if (it == adapted.end())
                throw ShapeError("sample: lora target " + target + " names no base linear");
            it->second = ops::apply_lora(it->second, deltas, bundle.lora->strength);
        }
        cond_params = &adapted;
    }

    Rng rng(req.seed);
    Rng constraint_rng = derive_stream(req.seed, "step-constraint");
    Tensor x = Tensor::randn({hl, wl, 3}, rng);

    auto velocity = [&](const TensorMap& params, int cond_id, bool inject,
                        const Tensor& xt, float tval) {
        Tape t;
        ParamVars pv = lift_params(t, params, Leaf::Constant);
        InjectedKV inj;
        bool use_inj = inject && bundle.kv.has_value();
        if (use_inj) inj = lift_kv(t, *bundle.kv);
        Var out = denoiser_forward(t, m.cfg, pv, t.leaf(xt), tval, cond_id,
                                   use_inj ? &inj : nullptr);
        return t.value(out);
    };

    const float dt = 1.0f / static_cast<float>(req.steps);
    for (int i = 0; i < req.steps; ++i) {
        const float tval = 1.0f - static_cast<float>(i) / static_cast<float>(req.steps);
        Tensor v;
        const float s = req.guidance_scale;
        if (s == 0.0f) {
            v = velocity(m.params, kNullConditionId, false, x, tval);
        } else if (s == 1.0f) {
            v = velocity(*cond_params, req.condition_id, true, x, tval);
        } else {
            Tensor v_null = velocity(m.params, kNullConditionId, false, x, tval);
            Tensor v_cond = velocity(*cond_params, req.condition_id, true, x, tval);
            v = ops::add(v_null, ops::scale(ops::sub(v_cond, v_null), s));
        }
        x = ops::sub(x, ops::scale(v, dt));
        if (hooks.on_step) hooks.on_step(i);
        if (!bundle.constraints.empty()) {
            const float t_next = 1.0f - static_cast<float>(i + 1) / static_cast<float>(req.steps);
            x = apply_step_constraints(x, bundle.constraints, i + 1 == req.steps ? 0.0f : t_next,
                                       constraint_rng);
            if (hooks.on_constraint) hooks.on_constraint(i);
        }
    }
    return x;
}

inline Image sample(const DenoiserModel& m, const GenerationRequest& req,
                    const MergedBundle& bundle, const SampleHooks& hooks = {}) {
    return vae_decode(sample_latent(m, req, bundle, hooks));
}

// Canonical byte serialization of model weights; the digest is the frozen-base
// fingerprint used by training checks.
inline std::string weights_digest(const TensorMap& params) {
    return sha256_hex(archive_encode(params));
}

}  // namespace templet

// zoo.hpp - desk-scale template models, the synthetic scene generator, and
// the control-signal extractors that supervise them.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "templet/backbone.hpp"
#include "templet/image.hpp"
#include "templet/package.hpp"
#include "templet/rng.hpp"
#include "templet/template_model.hpp"

namespace templet::zoo {

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

enum class Shape { circle = 0, square = 1, triangle = 2 };

struct SyntheticScene {
    Shape shape = Shape::circle;
    std::array<float, 3> fill = {0.8f, 0.2f, 0.2f};
    float background = 0.5f;
    float cx = 0.5f, cy = 0.5f;  // relative center
    float radius = 0.25f;        // relative size
    float blur_sigma = 0.0f;

    int condition_id() const { return static_cast<int>(shape) + 1; }
};

inline Image render_scene(const SyntheticScene& s, int size = 32) {
    Image img(size, size, 0.0f);
    auto inside = [&](float x, float y) {
        float dx = x - s.cx, dy = y - s.cy;
        switch (s.shape) {
            case Shape::circle:
                return dx * dx + dy * dy <= s.radius * s.radius;
            case Shape::square:
                return std::max(std::fabs(dx), std::fabs(dy)) <= s.radius;
            case Shape::triangle: {
                // equilateral-ish, apex up
                float ax = s.cx, ay = s.cy - s.radius;
                float bx = s.cx - 0.866f * s.radius, by = s.cy + 0.5f * s.radius;
                float cx2 = s.cx + 0.866f * s.radius, cy2 = s.cy + 0.5f * s.radius;
                auto cross = [](float ox, float oy, float px, float py, float qx, float qy) {
                    return (px - ox) * (qy - oy) - (py - oy) * (qx - ox);
                };
                float d1 = cross(ax, ay, bx, by, x, y);
                float d2 = cross(bx, by, cx2, cy2, x, y);
                float d3 = cross(cx2, cy2, ax, ay, x, y);
                bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
                bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
                return !(neg && pos);
            }
        }
        return false;
    };
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float fx = (x + 0.5f) / size, fy = (y + 0.5f) / size;
            bool in = inside(fx, fy);
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = in ? s.fill[static_cast<size_t>(c)] : s.background;
        }
    if (s.blur_sigma > 0.0f) img = gaussian_blur(img, s.blur_sigma).clamped();
    return img;
}

// Fill luminance is kept at least 0.15 away from the background so every
// scene has visible structure.
inline SyntheticScene random_scene(Rng& rng) {
    SyntheticScene s;
    s.shape = static_cast<Shape>(rng.below(3));
    s.background = static_cast<float>(rng.uniform(0.05, 0.95));
    for (int tries = 0; tries < 64; ++tries) {
        for (float& c : s.fill) c = static_cast<float>(rng.uniform(0.0, 1.0));
        float lum = 0.299f * s.fill[0] + 0.587f * s.fill[1] + 0.114f * s.fill[2];
        if (std::fabs(lum - s.background) >= 0.15f) break;
    }
    s.cx = static_cast<float>(rng.uniform(0.3, 0.7));
    s.cy = static_cast<float>(rng.uniform(0.3, 0.7));
    s.radius = static_cast<float>(rng.uniform(0.12, 0.3));
    s.blur_sigma = rng.uniform() < 0.3 ? 0.0f : static_cast<float>(rng.uniform(0.2, 1.6));
    return s;
}

inline Image contrast_boost(const Image& img, float gain) {
    Image out = img;
    for (float& v : out.data) v = std::clamp(0.5f + (v - 0.5f) * gain, 0.0f, 1.0f);
    return out;
}

// ---------------------------------------------------------------------------
// Control-signal extractors
// ---------------------------------------------------------------------------

inline float brightness_signal(const Image& img) {
    double s = 0.0;
    for (float v : img.data) s += v;
    return static_cast<float>(s / static_cast<double>(img.data.size()));
}

inline std::array<float, 3> channel_means(const Image& img) {
    std::array<double, 3> acc = {0, 0, 0};
    const size_t px = img.data.size() / 3;
    for (size_t i = 0; i < px; ++i)
        for (int c = 0; c < 3; ++c) acc[static_cast<size_t>(c)] += img.data[i * 3 + c];
    return {static_cast<float>(acc[0] / px), static_cast<float>(acc[1] / px),
            static_cast<float>(acc[2] / px)};
}

// Sobel-magnitude threshold on [0,1] luminance gradients.
constexpr float kEdgeThreshold = 0.25f;

inline float edge_fraction(const Image& img) {
    std::vector<float> mag = sobel_magnitude(img);
    size_t edges = 0;
    for (float v : mag)
        if (v > kEdgeThreshold) ++edges;
    return static_cast<float>(edges) / static_cast<float>(mag.size());
}

inline Image edge_map(const Image& img) {
    std::vector<float> mag = sobel_magnitude(img);
    Image out(img.width, img.height);
    for (size_t i = 0; i < mag.size(); ++i) {
        float v = mag[i] > kEdgeThreshold ? 1.0f : 0.0f;
        out.data[i * 3] = out.data[i * 3 + 1] = out.data[i * 3 + 2] = v;
    }
    return out;
}

// Empirical CDF of edge fractions over a calibration corpus; rank uses the
// midpoint convention for ties.
struct SharpnessCalibration {
    std::vector<float> fractions;  // sorted

    static SharpnessCalibration from_fractions(std::vector<float> f) {
        if (f.empty()) throw ShapeError("sharpness: empty calibration set");
        std::sort(f.begin(), f.end());
        return SharpnessCalibration{std::move(f)};
    }

    static SharpnessCalibration from_corpus(const std::vector<Image>& corpus) {
        std::vector<float> f;
        f.reserve(corpus.size());
        for (const Image& img : corpus) f.push_back(edge_fraction(img));
        return from_fractions(std::move(f));
    }

    float rank(float fraction) const {
        auto lo = std::lower_bound(fractions.begin(), fractions.end(), fraction);
        auto hi = std::upper_bound(fractions.begin(), fractions.end(), fraction);
        double less = static_cast<double>(lo - fractions.begin());
        double equal = static_cast<double>(hi - lo);
        return static_cast<float>((less + 0.5 * equal) / static_cast<double>(fractions.size()));
    }
};

inline float sharpness_signal(const Image& img, const SharpnessCalibration& cal) {
    return cal.rank(edge_fraction(img));
}

// ---------------------------------------------------------------------------
// Text helpers for scalar inputs
// ---------------------------------------------------------------------------

inline std::string format_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

inline std::vector<float> parse_floats(const std::string& text) {
    std::vector<float> out;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t comma = text.find(',', pos);
        std::string tok = text.substr(pos, comma == std::string::npos ? std::string::npos
                                                                      : comma - pos);
        try {
            size_t used = 0;
            out.push_back(std::stof(tok, &used));
        } catch (const std::exception&) {
            throw ParseError("expected comma-separated numbers, got '" + text + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Template models
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t geti(const Manifest& m, const char* k, int64_t dflt) {
    return m.hyper_int(k, dflt);
}

inline std::vector<std::string> split_targets(const std::string& csv) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos <= csv.size()) {
        size_t comma = csv.find(',', pos);
        std::string tok =
            csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) out.push_back(tok);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

// Transformer block shared by the image-conditioned templates.
inline Var mini_block(Tape& t, const ParamVars& pv, const std::string& p, Var x, int heads) {
    Var n1 = t.layernorm_rows(x, pv.at(p + "ln1.g"), pv.at(p + "ln1.b"));
    Var q = linear(t, pv, p + "attn.q", n1);
    Var k = linear(t, pv, p + "attn.k", n1);
    Var v = linear(t, pv, p + "attn.v", n1);
    Var a = attention_injected(t, q, k, v, Var{}, Var{}, heads);
    x = t.add(x, linear(t, pv, p + "attn.out", a));
    Var n2 = t.layernorm_rows(x, pv.at(p + "ln2.g"), pv.at(p + "ln2.b"));
    return t.add(x, linear(t, pv, p + "mlp.fc2", t.gelu(linear(t, pv, p + "mlp.fc1", n2))));
}

inline void init_mini_block(TensorMap& params, const std::string& p, int d, int mlp_ratio,
                            Rng& rng) {
    const float w0 = 0.02f;
    params[p + "ln1.g"] = Tensor({d}, 1.0f);
    params[p + "ln1.b"] = Tensor({d});
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
        params[p + name + ".w"] = Tensor::randn({d, d}, rng, w0);
        params[p + name + ".b"] = Tensor({d});
    }
    params[p + "ln2.g"] = Tensor({d}, 1.0f);
    params[p + "ln2.b"] = Tensor({d});
    params[p + "mlp.fc1.w"] = Tensor::randn({d * mlp_ratio, d}, rng, w0);
    params[p + "mlp.fc1.b"] = Tensor({d * mlp_ratio});
    params[p + "mlp.fc2.w"] = Tensor::randn({d, d * mlp_ratio}, rng, w0);
    params[p + "mlp.fc2.b"] = Tensor({d});
}

}  // namespace detail

// Scalar controls (brightness: 1 scalar, color: 3): sinusoidal encoding of
// each scalar, two fully connected layers, 4 KV tokens per base layer.
class ScalarControlTemplate final : public TemplateModel {
public:
    ScalarControlTemplate(Manifest m, TensorMap params) {
        manifest_ = std::move(m);
        params_ = std::move(params);
        n_scalars_ = static_cast<int>(detail::geti(manifest_, "n_scalars", 1));
        pe_dim_ = static_cast<int>(detail::geti(manifest_, "pe_dim", 32));
        base_layers_ = static_cast<int>(detail::geti(manifest_, "base_layers", 4));
        base_d_ = static_cast<int>(detail::geti(manifest_, "base_d_model", 64));
        n_tokens_ = static_cast<int>(detail::geti(manifest_, "n_tokens", 4));
    }

    static std::unique_ptr<TemplateModel> create(
        const std::string& name, const std::map<std::string, ManifestValue>& hyper,
        uint64_t seed) {
        Manifest m;
        m.name = name;
        m.cache_type = "kv";
        m.template_kind = "scalar_control";
        m.hyperparameters = {{"n_scalars", int64_t{1}}, {"pe_dim", int64_t{32}},
                             {"hidden", int64_t{128}},  {"n_tokens", int64_t{4}},
                             {"base_layers", int64_t{4}}, {"base_d_model", int64_t{64}}};
        for (const auto& [k, v] : hyper) m.hyperparameters[k] = v;
        int64_t n_scalars = std::get<int64_t>(m.hyperparameters["n_scalars"]);
        m.input_schema["value"] =
            n_scalars == 1 ? "scalar" : "scalars" + std::to_string(n_scalars);
        int pe = static_cast<int>(std::get<int64_t>(m.hyperparameters["pe_dim"]));
        int hidden = static_cast<int>(std::get<int64_t>(m.hyperparameters["hidden"]));
        int layers = static_cast<int>(std::get<int64_t>(m.hyperparameters["base_layers"]));
        int d = static_cast<int>(std::get<int64_t>(m.hyperparameters["base_d_model"]));
        int tok = static_cast<int>(std::get<int64_t>(m.hyperparameters["n_tokens"]));
        Rng rng(seed);
        TensorMap p;
        p["fc1.w"] = Tensor::randn({hidden, static_cast<int>(n_scalars) * pe}, rng, 0.05f);
        p["fc1.b"] = Tensor({hidden});
        p["fc2.w"] = Tensor::randn({layers * 2 * tok * d, hidden}, rng, 0.02f);
        p["fc2.b"] = Tensor({layers * 2 * tok * d});
        return std::make_unique<ScalarControlTemplate>(std::move(m), std::move(p));
    }

    Features process_inputs(const TemplateInput& input) const override {
        std::vector<float> vals = parse_floats(input.text);
        if (static_cast<int>(vals.size()) != n_scalars_)
            throw ParseError("template " + manifest_.name + ": expected " +
                             std::to_string(n_scalars_) + " scalars, got " +
                             std::to_string(vals.size()));
        Tensor pe({1, n_scalars_ * pe_dim_});
        for (int i = 0; i < n_scalars_; ++i) {
            Tensor e = sinusoidal_embedding(vals[static_cast<size_t>(i)], pe_dim_, 30.0f);
            std::copy(e.data.begin(), e.data.end(),
                      pe.data.begin() + static_cast<size_t>(i) * pe_dim_);
        }
        return {{"pe", std::move(pe)}};
    }

    CacheVars forward_on_tape(Tape& t, const ParamVars& pv, const Features& f) const override {
        Var h = t.gelu(linear(t, pv, "fc1", t.leaf(f.at("pe"))));
        Var out = t.reshape(linear(t, pv, "fc2", h),
                            {base_layers_ * 2 * n_tokens_, base_d_});
        CacheVars cv;
        cv.kv = KVCacheVars{};
        for (int l = 0; l < base_layers_; ++l) {
            Var keys = t.slice_rows(out, l * 2 * n_tokens_, n_tokens_);
            Var values = t.slice_rows(out, l * 2 * n_tokens_ + n_tokens_, n_tokens_);
            cv.kv->banks[l] = {keys, values};
        }
        return cv;
    }

private:
    int n_scalars_, pe_dim_, base_layers_, base_d_, n_tokens_;
};

// Image-conditioned KV (structural control, editing, super-resolution):
// patch tokens share the base geometry, two small transformer blocks, one
// token per patch for every base layer.
class ImageConditionTemplate final : public TemplateModel {
public:
    ImageConditionTemplate(Manifest m, TensorMap params) {
        manifest_ = std::move(m);
        params_ = std::move(params);
        image_size_ = static_cast<int>(detail::geti(manifest_, "image_size", 32));
        d_ = static_cast<int>(detail::geti(manifest_, "d_model", 64));
        n_blocks_ = static_cast<int>(detail::geti(manifest_, "n_blocks", 2));
        heads_ = static_cast<int>(detail::geti(manifest_, "n_heads", 4));
        base_layers_ = static_cast<int>(detail::geti(manifest_, "base_layers", 4));
        base_d_ = static_cast<int>(detail::geti(manifest_, "base_d_model", 64));
    }

    static TensorMap init_params(int image_size, int d, int n_blocks, int mlp_ratio,
                                 int base_layers, int base_d, uint64_t seed) {
        Rng rng(seed);
        TensorMap p;
        const int n_patches = (image_size / 4) * (image_size / 4);
        p["embed.w"] = Tensor::randn({d, 12}, rng, 0.05f);
        p["embed.b"] = Tensor({d});
        p["pos"] = Tensor::randn({n_patches, d}, rng, 0.02f);
        for (int i = 0; i < n_blocks; ++i)
            detail::init_mini_block(p, "blocks." + std::to_string(i) + ".", d, mlp_ratio, rng);
        for (int l = 0; l < base_layers; ++l) {
            std::string hp = "heads." + std::to_string(l) + ".";
            p[hp + "k.w"] = Tensor::randn({base_d, d}, rng, 0.02f);
            p[hp + "k.b"] = Tensor({base_d});
            p[hp + "v.w"] = Tensor::randn({base_d, d}, rng, 0.02f);
            p[hp + "v.b"] = Tensor({base_d});
        }
        return p;
    }

    static std::unique_ptr<TemplateModel> create(
        const std::string& name, const std::map<std::string, ManifestValue>& hyper,
        uint64_t seed) {
        Manifest m;
        m.name = name;
        m.cache_type = "kv";
        m.template_kind = "image_kv";
        m.input_schema["image"] = "image";
        m.hyperparameters = {{"image_size", int64_t{32}}, {"d_model", int64_t{64}},
                             {"n_blocks", int64_t{2}},    {"n_heads", int64_t{4}},
                             {"mlp_ratio", int64_t{2}},   {"base_layers", int64_t{4}},
                             {"base_d_model", int64_t{64}}};
        for (const auto& [k, v] : hyper) m.hyperparameters[k] = v;
        auto gi = [&](const char* k) {
            return static_cast<int>(std::get<int64_t>(m.hyperparameters[k]));
        };
        TensorMap p = init_params(gi("image_size"), gi("d_model"), gi("n_blocks"),
                                  gi("mlp_ratio"), gi("base_layers"), gi("base_d_model"), seed);
        return std::make_unique<ImageConditionTemplate>(std::move(m), std::move(p));
    }

    TemplateInput parse_input(const std::string& raw) const override {
        return TemplateInput{"", {read_ppm(raw)}};
    }

    Features process_inputs(const TemplateInput& input) const override {
        if (input.images.size() != 1)
            throw ParseError("template " + manifest_.name + ": expected one condition image");
        return {{"tokens", condition_tokens(input.images[0], image_size_)}};
    }

    // vae-encode + patchify; shared with the inpaint template.
    static Tensor condition_tokens(const Image& img, int image_size) {
        if (img.width != image_size || img.height != image_size)
            throw ShapeError("condition image " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + " vs expected " +
                             std::to_string(image_size));
        Tensor lat = vae_encode(img);
        const int hl = lat.shape[0], wl = lat.shape[1];
        Tensor flat = ops::reshape(lat, {hl * wl * 3, 1});
        Tensor tokens = ops::gather_rows(flat, patchify_indices(hl, wl, 2));
        return ops::reshape(tokens, {(hl / 2) * (wl / 2), 12});
    }

    CacheVars forward_on_tape(Tape& t, const ParamVars& pv, const Features& f) const override {
        return kv_from_tokens(t, pv, f.at("tokens"), "", n_blocks_, heads_, base_layers_);
    }

    static CacheVars kv_from_tokens(Tape& t, const ParamVars& pv, const Tensor& tokens,
                                    const std::string& prefix, int n_blocks, int heads,
                                    int base_layers) {
        Var h = t.add(linear(t, pv, prefix + "embed", t.leaf(tokens)), pv.at(prefix + "pos"));
        for (int i = 0; i < n_blocks; ++i)
            h = detail::mini_block(t, pv, prefix + "blocks." + std::to_string(i) + ".", h,
                                   heads);
        CacheVars cv;
        cv.kv = KVCacheVars{};
        for (int l = 0; l < base_layers; ++l) {
            std::string hp = prefix + "heads." + std::to_string(l) + ".";
            cv.kv->banks[l] = {linear(t, pv, hp + "k", h), linear(t, pv, hp + "v", h)};
        }
        return cv;
    }

private:
    int image_size_, d_, n_blocks_, heads_, base_layers_, base_d_;
};

// Image-to-LoRA (content reference): small conv encoder, global pooling,
// fully connected heads emitting rank-4 factors for the declared base linears.
class ImageToLoRATemplate final : public TemplateModel {
public:
    ImageToLoRATemplate(Manifest m, TensorMap params) {
        manifest_ = std::move(m);
        params_ = std::move(params);
        image_size_ = static_cast<int>(detail::geti(manifest_, "image_size", 32));
        c1_ = static_cast<int>(detail::geti(manifest_, "conv1_channels", 8));
        c2_ = static_cast<int>(detail::geti(manifest_, "conv2_channels", 16));
        hidden_ = static_cast<int>(detail::geti(manifest_, "hidden", 32));
        rank_ = static_cast<int>(detail::geti(manifest_, "rank", 4));
        d_out_ = static_cast<int>(detail::geti(manifest_, "target_d_out", 64));
        d_in_ = static_cast<int>(detail::geti(manifest_, "target_d_in", 64));
        targets_ = detail::split_targets(manifest_.hyper_string(
            "targets", "blocks.0.attn.out,blocks.1.attn.out,blocks.2.attn.out,blocks.3.attn.out"));
    }

    static std::unique_ptr<TemplateModel> create(
        const std::string& name, const std::map<std::string, ManifestValue>& hyper,
        uint64_t seed) {
        Manifest m;
        m.name = name;
        m.cache_type = "lora";
        m.template_kind = "image_lora";
        m.input_schema["image"] = "image";
        m.hyperparameters = {
            {"image_size", int64_t{32}}, {"conv1_channels", int64_t{8}},
            {"conv2_channels", int64_t{16}}, {"hidden", int64_t{32}},
            {"rank", int64_t{4}}, {"target_d_out", int64_t{64}}, {"target_d_in", int64_t{64}},
            {"targets", std::string(
                "blocks.0.attn.out,blocks.1.attn.out,blocks.2.attn.out,blocks.3.attn.out")}};
        for (const auto& [k, v] : hyper) m.hyperparameters[k] = v;
        auto gi = [&](const char* k) {
            return static_cast<int>(std::get<int64_t>(m.hyperparameters[k]));
        };
        Rng rng(seed);
        TensorMap p;
        int c1 = gi("conv1_channels"), c2 = gi("conv2_channels"), hidden = gi("hidden");
        int rank = gi("rank"), d_out = gi("target_d_out"), d_in = gi("target_d_in");
        p["conv1.w"] = Tensor::randn({c1, 9 * 3}, rng, 0.1f);
        p["conv1.b"] = Tensor({c1});
        p["conv2.w"] = Tensor::randn({c2, 9 * c1}, rng, 0.1f);
        p["conv2.b"] = Tensor({c2});
        p["fc.w"] = Tensor::randn({hidden, c2}, rng, 0.1f);
        p["fc.b"] = Tensor({hidden});
        auto targets = detail::split_targets(std::get<std::string>(m.hyperparameters["targets"]));
        for (size_t i = 0; i < targets.size(); ++i) {
            std::string hp = "head." + std::to_string(i) + ".";
            p[hp + "down.w"] = Tensor::randn({rank * d_in, hidden}, rng, 0.05f);
            p[hp + "down.b"] = Tensor::randn({rank * d_in}, rng, 0.05f);
            // zero-init up heads: the delta starts at zero, standard for
            // low-rank adapters
            p[hp + "up.w"] = Tensor({d_out * rank, hidden});
            p[hp + "up.b"] = Tensor({d_out * rank});
        }
        return std::make_unique<ImageToLoRATemplate>(std::move(m), std::move(p));
    }

    TemplateInput parse_input(const std::string& raw) const override {
        return TemplateInput{"", {read_ppm(raw)}};
    }

    Features process_inputs(const TemplateInput& input) const override {
        if (input.images.size() != 1)
            throw ParseError("template " + manifest_.name + ": expected one reference image");
        const Image& img = input.images[0];
        if (img.width != image_size_ || img.height != image_size_)
            throw ShapeError("reference image " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + " vs expected " +
                             std::to_string(image_size_));
        return {{"image", Tensor({image_size_ * image_size_ * 3, 1}, img.data)}};
    }

    // 3x3 stride-2 pad-1 convolution indices over flat HWC input; -1 rows
    // gather zeros (padding).
    static std::vector<int> im2col_indices(int h, int w, int c) {
        std::vector<int> idx;
        const int oh = h / 2, ow = w / 2;
        idx.reserve(static_cast<size_t>(oh) * ow * 9 * c);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int ky = -1; ky <= 1; ++ky)
                    for (int kx = -1; kx <= 1; ++kx)
                        for (int ch = 0; ch < c; ++ch) {
                            int iy = oy * 2 + ky, ix = ox * 2 + kx;
                            idx.push_back(iy < 0 || iy >= h || ix < 0 || ix >= w
                                              ? -1
                                              : (iy * w + ix) * c + ch);
                        }
        return idx;
    }

    CacheVars forward_on_tape(Tape& t, const ParamVars& pv, const Features& f) const override {
        const int s = image_size_;
        Var x = t.leaf(f.at("image"));  // (s*s*3, 1)
        Var cols1 = t.reshape(t.gather_rows(x, im2col_indices(s, s, 3)),
                              {(s / 2) * (s / 2), 9 * 3});
        Var h1 = t.gelu(linear(t, pv, "conv1", cols1));  // (s/2*s/2, c1)
        Var flat1 = t.reshape(h1, {(s / 2) * (s / 2) * c1_, 1});
        Var cols2 = t.reshape(t.gather_rows(flat1, im2col_indices(s / 2, s / 2, c1_)),
                              {(s / 4) * (s / 4), 9 * c1_});
        Var h2 = t.gelu(linear(t, pv, "conv2", cols2));  // (s/4*s/4, c2)
        const int n_pos = (s / 4) * (s / 4);
        Var pooled = t.scale(t.matmul(t.leaf(Tensor({1, n_pos}, 1.0f)), h2),
                             1.0f / static_cast<float>(n_pos));  // (1, c2)
        Var feat = t.gelu(linear(t, pv, "fc", pooled));          // (1, hidden)

        CacheVars cv;
        cv.lora = LoRACacheVars{};
        cv.lora->strength = 1.0f;
        for (size_t i = 0; i < targets_.size(); ++i) {
            std::string hp = "head." + std::to_string(i) + ".";
            LoRAVarDelta d;
            d.target_id = targets_[i];
            d.alpha = static_cast<float>(rank_);
            d.down = t.reshape(linear(t, pv, hp + "down", feat), {rank_, d_in_});
            d.up = t.reshape(linear(t, pv, hp + "up", feat), {d_out_, rank_});
            cv.lora->deltas[targets_[i]].push_back(d);
        }
        return cv;
    }

private:
    int image_size_, c1_, c2_, hidden_, rank_, d_out_, d_in_;
    std::vector<std::string> targets_;
};

// Preference-modulated LoRA (aesthetic alignment): fixed trained factors, the
// runtime input scales the cache strength and may exceed the training range.
class PreferenceLoRATemplate final : public TemplateModel {
public:
    PreferenceLoRATemplate(Manifest m, TensorMap params) {
        manifest_ = std::move(m);
        params_ = std::move(params);
        rank_ = static_cast<int>(detail::geti(manifest_, "rank", 4));
        targets_ = detail::split_targets(manifest_.hyper_string(
            "targets", "blocks.0.attn.out,blocks.1.attn.out,blocks.2.attn.out,blocks.3.attn.out"));
    }

    static std::unique_ptr<TemplateModel> create(
        const std::string& name, const std::map<std::string, ManifestValue>& hyper,
        uint64_t seed) {
        Manifest m;
        m.name = name;
        m.cache_type = "lora";
        m.template_kind = "preference_lora";
        m.input_schema["scale"] = "scalar";
        m.hyperparameters = {
            {"rank", int64_t{4}}, {"target_d_out", int64_t{64}}, {"target_d_in", int64_t{64}},
            {"targets", std::string(
                "blocks.0.attn.out,blocks.1.attn.out,blocks.2.attn.out,blocks.3.attn.out")}};
        for (const auto& [k, v] : hyper) m.hyperparameters[k] = v;
        auto gi = [&](const char* k) {
            return static_cast<int>(std::get<int64_t>(m.hyperparameters[k]));
        };
        Rng rng(seed);
        TensorMap p;
        int rank = gi("rank"), d_out = gi("target_d_out"), d_in = gi("target_d_in");
        auto targets = detail::split_targets(std::get<std::string>(m.hyperparameters["targets"]));
        for (size_t i = 0; i < targets.size(); ++i) {
            std::string hp = "lora." + std::to_string(i) + ".";
            p[hp + "down"] = Tensor::randn({rank, d_in}, rng, 0.05f);
            p[hp + "up"] = Tensor({d_out, rank});  // zero-init: identity at start
        }
        return std::make_unique<PreferenceLoRATemplate>(std::move(m), std::move(p));
    }

    Features process_inputs(const TemplateInput& input) const override {
        std::vector<float> vals = parse_floats(input.text.empty() ? "1" : input.text);
        return {{"scale", Tensor::scalar(vals.at(0))}};
    }

    CacheVars forward_on_tape(Tape& t, const ParamVars& pv, const Features& f) const override {
        CacheVars cv;
        cv.lora = LoRACacheVars{};
        cv.lora->strength = f.at("scale").data[0];
        for (size_t i = 0; i < targets_.size(); ++i) {
            std::string hp = "lora." + std::to_string(i) + ".";
            LoRAVarDelta d;
            d.target_id = targets_[i];
            d.alpha = static_cast<float>(rank_);
            d.down = pv.at(hp + "down");
            d.up = pv.at(hp + "up");
            cv.lora->deltas[targets_[i]].push_back(d);
        }
        return cv;
    }

private:
    int rank_;
    std::vector<std::string> targets_;
};

// Local inpainting: pipeline-args hard constraint (latent mask + reference)
// plus an image_kv-style cache computed from the masked image.
class InpaintTemplate final : public TemplateModel {
public:
    InpaintTemplate(Manifest m, TensorMap params) {
        manifest_ = std::move(m);
        params_ = std::move(params);
        image_size_ = static_cast<int>(detail::geti(manifest_, "image_size", 32));
        n_blocks_ = static_cast<int>(detail::geti(manifest_, "n_blocks", 2));
        heads_ = static_cast<int>(detail::geti(manifest_, "n_heads", 4));
        base_layers_ = static_cast<int>(detail::geti(manifest_, "base_layers", 4));
    }

    static std::unique_ptr<TemplateModel> create(
        const std::string& name, const std::map<std::string, ManifestValue>& hyper,
        uint64_t seed) {
        Manifest m;
        m.name = name;
        m.cache_type = "pipeline_args";
        m.template_kind = "inpaint";
        m.input_schema["image"] = "image";
        m.input_schema["mask"] = "mask_image";
        m.hyperparameters = {{"image_size", int64_t{32}}, {"d_model", int64_t{64}},
                             {"n_blocks", int64_t{2}},    {"n_heads", int64_t{4}},
                             {"mlp_ratio", int64_t{2}},   {"base_layers", int64_t{4}},
                             {"base_d_model", int64_t{64}}};
        for (const auto& [k, v] : hyper) m.hyperparameters[k] = v;
        auto gi = [&](const char* k) {
            return static_cast<int>(std::get<int64_t>(m.hyperparameters[k]));
        };
        TensorMap p = ImageConditionTemplate::init_params(
            gi("image_size"), gi("d_model"), gi("n_blocks"), gi("mlp_ratio"),
            gi("base_layers"), gi("base_d_model"), seed);
        return std::make_unique<InpaintTemplate>(std::move(m), std::move(p));
    }

    // "image.ppm,mask.ppm"
    TemplateInput parse_input(const std::string& raw) const override {
        size_t comma = raw.find(',');
        if (comma == std::string::npos)
            throw ParseError("inpaint input must be 'image.ppm,mask.ppm'");
        return TemplateInput{"", {read_ppm(raw.substr(0, comma)),
                                  read_ppm(raw.substr(comma + 1))}};
    }

    Features process_inputs(const TemplateInput& input) const override {
        if (input.images.size() != 2)
            throw ParseError("template " + manifest_.name + ": expected image + mask");
        const Image& img = input.images[0];
        const Image& mask = input.images[1];
        if (img.width != mask.width || img.height != mask.height)
            throw ShapeError("inpaint: image and mask sizes differ");

        // pixel mask: editable where mask luminance > 0.5
        std::vector<float> lum = luminance(mask);
        Image masked = img;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                if (lum[static_cast<size_t>(y) * img.width + x] > 0.5f)
                    for (int c = 0; c < 3; ++c) masked.at(y, x, c) = 0.0f;

        // latent mask: any 2x2 block containing an editable pixel is editable
        const int hl = img.height / 2, wl = img.width / 2;
        Tensor mask_latent({hl, wl, 3});
        for (int y = 0; y < hl; ++y)
            for (int x = 0; x < wl; ++x) {
                bool editable = false;
                for (int dy = 0; dy < 2 && !editable; ++dy)
                    for (int dx = 0; dx < 2 && !editable; ++dx)
                        editable =
                            lum[static_cast<size_t>(2 * y + dy) * img.width + 2 * x + dx] > 0.5f;
                for (int c = 0; c < 3; ++c)
                    mask_latent.data[(static_cast<size_t>(y) * wl + x) * 3 + c] =
                        editable ? 1.0f : 0.0f;
            }

        return {{"tokens", ImageConditionTemplate::condition_tokens(masked, image_size_)},
                {"mask", std::move(mask_latent)},
                {"reference", vae_encode(img)}};
    }

    CacheVars forward_on_tape(Tape& t, const ParamVars& pv, const Features& f) const override {
        CacheVars cv = ImageConditionTemplate::kv_from_tokens(t, pv, f.at("tokens"), "",
                                                              n_blocks_, heads_, base_layers_);
        cv.constraints.push_back(StepConstraint{f.at("mask"), f.at("reference")});
        return cv;
    }

private:
    int image_size_, n_blocks_, heads_, base_layers_;
};

// ---------------------------------------------------------------------------
// Registry wiring
// ---------------------------------------------------------------------------

inline bool register_builtin_kinds() {
    static const bool done = [] {
        auto& reg = TemplateRegistry::instance();
        reg.register_kind(
            "scalar_control",
            [](const Manifest& m, TensorMap p) -> std::unique_ptr<TemplateModel> {
                return std::make_unique<ScalarControlTemplate>(m, std::move(p));
            },
            &ScalarControlTemplate::create);
        reg.register_kind(
            "image_kv",
            [](const Manifest& m, TensorMap p) -> std::unique_ptr<TemplateModel> {
                return std::make_unique<ImageConditionTemplate>(m, std::move(p));
            },
            &ImageConditionTemplate::create);
        reg.register_kind(
            "image_lora",
            [](const Manifest& m, TensorMap p) -> std::unique_ptr<TemplateModel> {
                return std::make_unique<ImageToLoRATemplate>(m, std::move(p));
            },
            &ImageToLoRATemplate::create);
        reg.register_kind(
            "preference_lora",
            [](const Manifest& m, TensorMap p) -> std::unique_ptr<TemplateModel> {
                return std::make_unique<PreferenceLoRATemplate>(m, std::move(p));
            },
            &PreferenceLoRATemplate::create);
        reg.register_kind(
            "inpaint",
            [](const Manifest& m, TensorMap p) -> std::unique_ptr<TemplateModel> {
                return std::make_unique<InpaintTemplate>(m, std::move(p));
            },
            &InpaintTemplate::create);
        return true;
    }();
    return done;
}

inline const bool kBuiltinKindsRegistered = register_builtin_kinds();

}  // namespace templet::zoo

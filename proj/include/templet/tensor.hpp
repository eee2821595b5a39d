// tensor.hpp - dense row-major float32 tensors and the pure (untaped) kernels
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "templet/errors.hpp"
#include "templet/rng.hpp"

namespace templet {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ")";
        return os.str();
    }

    size_t numel() const { return data.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    std::string shape_str() const { return shape_str(shape); }

    float& at(int i) { return data[static_cast<size_t>(i)]; }
    float at(int i) const { return data[static_cast<size_t>(i)]; }
    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }
    static Tensor randn(std::vector<int> s, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(s));
        for (float& v : t.data) v = rng.normal() * stddev;
        return t;
    }
    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }
};

// Externally computed key/value token bank for one attention layer.
// keys/values are (n_tokens x d_model); heads are contiguous column slices.
// An empty bank (0 tokens) acts as the identity.
struct KVBank {
    int layer_id = 0;
    Tensor keys;    // (n_tokens, d_model)
    Tensor values;  // (n_tokens, d_model)

    int n_tokens() const { return keys.shape.empty() ? 0 : keys.shape[0]; }
    bool empty() const { return n_tokens() == 0; }

    void check() const {
        if (!keys.same_shape(values))
            throw ShapeError("kv bank: keys " + keys.shape_str() + " vs values " +
                             values.shape_str());
    }
};

// Low-rank additive update for one named linear. Effective delta is
// (alpha / rank) * up * down.
struct LoRADelta {
    std::string target_id;
    Tensor down;  // (rank, d_in)
    Tensor up;    // (d_out, rank)
    float alpha = 1.0f;

    int rank() const { return down.shape.empty() ? 0 : down.shape[0]; }

    void check() const {
        if (down.shape.size() != 2 || up.shape.size() != 2 || up.shape[1] != down.shape[0])
            throw ShapeError("lora delta " + target_id + ": down " + down.shape_str() +
                             " vs up " + up.shape_str());
    }
};

namespace ops {

inline void require_matrix(const Tensor& t, const char* who) {
    if (t.shape.size() != 2)
        throw ShapeError(std::string(who) + ": expected a matrix, got " + t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

inline void require_finite(const Tensor& t, const char* who) {
    if (!t.all_finite())
        throw ShapeError(std::string(who) + ": non-finite value in tensor " + t.shape_str());
}

// C = A * B, (m x k) * (k x n). ikj loop order keeps the inner loop contiguous.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    const int m = a.shape[0], k = a.shape[1], n = b.shape[0] ? b.shape[1] : 0;
    Tensor c({m, n});
    for (int i = 0; i < m; ++i) {
        const float* arow = a.data.data() + static_cast<size_t>(i) * k;
        float* crow = c.data.data() + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            if (av == 0.0f) continue;
            const float* brow = b.data.data() + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A * B^T, (m x k) * (n x k) -> (m x n). Dot products over contiguous rows.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.shape[1] != b.shape[1])
        throw ShapeError("matmul_nt: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor c({m, n});
    for (int i = 0; i < m; ++i) {
        const float* arow = a.data.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const float* brow = b.data.data() + static_cast<size_t>(j) * k;
            float s = 0.0f;
            for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            c.at(i, j) = s;
        }
    }
    return c;
}

// C = A^T * B, (k x m) * (k x n) -> (m x n).
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.shape[0] != b.shape[0])
        throw ShapeError("matmul_tn: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    const int k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor c({m, n});
    for (int kk = 0; kk < k; ++kk) {
        const float* arow = a.data.data() + static_cast<size_t>(kk) * m;
        const float* brow = b.data.data() + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const float av = arow[i];
            if (av == 0.0f) continue;
            float* crow = c.data.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    Tensor t({a.shape[1], a.shape[0]});
    for (int i = 0; i < a.shape[0]; ++i)
        for (int j = 0; j < a.shape[1]; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor c = a;
    for (float& v : c.data) v *= s;
    return c;
}

// (n x d) + (d): adds the row vector to every row.
inline Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
    require_matrix(a, "add_rowwise");
    if (static_cast<int>(bias.numel()) != a.shape[1])
        throw ShapeError("add_rowwise: shape mismatch " + a.shape_str() + " vs " +
                         bias.shape_str());
    Tensor c = a;
    const int n = a.shape[0], d = a.shape[1];
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) c.at(i, j) += bias.data[static_cast<size_t>(j)];
    return c;
}

// Softmax over the last dimension of a matrix, row by row.
inline Tensor softmax_rows(const Tensor& a) {
    require_matrix(a, "softmax");
    Tensor c = a;
    const int n = a.shape[0], d = a.shape[1];
    for (int i = 0; i < n; ++i) {
        float mx = -1e30f;
        for (int j = 0; j < d; ++j) mx = std::max(mx, a.at(i, j));
        float sum = 0.0f;
        for (int j = 0; j < d; ++j) {
            float e = std::exp(a.at(i, j) - mx);
            c.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < d; ++j) c.at(i, j) /= sum;
    }
    return c;
}

constexpr float kLayerNormEps = 1e-5f;

// Normalizes each row to zero mean / unit variance, then applies gain + bias.
inline Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    require_matrix(x, "layernorm");
    const int n = x.shape[0], d = x.shape[1];
    if (static_cast<int>(gamma.numel()) != d || static_cast<int>(beta.numel()) != d)
        throw ShapeError("layernorm: shape mismatch " + x.shape_str() + " vs gamma " +
                         gamma.shape_str() + " / beta " + beta.shape_str());
    Tensor y({n, d});
    for (int i = 0; i < n; ++i) {
        float mean = 0.0f;
        for (int j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int j = 0; j < d; ++j) {
            float c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<float>(d);
        float inv = 1.0f / std::sqrt(var + kLayerNormEps);
        for (int j = 0; j < d; ++j)
            y.at(i, j) = (x.at(i, j) - mean) * inv * gamma.data[static_cast<size_t>(j)] +
                         beta.data[static_cast<size_t>(j)];
    }
    return y;
}

// tanh-approximation GELU.
inline float gelu_scalar(float x) {
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    const float a = 0.044715f;
    return 0.5f * x * (1.0f + std::tanh(c * (x + a * x * x * x)));
}

inline float gelu_grad_scalar(float x) {
    const float c = 0.7978845608028654f;
    const float a = 0.044715f;
    float u = c * (x + a * x * x * x);
    float th = std::tanh(u);
    float sech2 = 1.0f - th * th;
    return 0.5f * (1.0f + th) + 0.5f * x * sech2 * c * (1.0f + 3.0f * a * x * x);
}

inline Tensor gelu(const Tensor& a) {
    Tensor c = a;
    for (float& v : c.data) v = gelu_scalar(v);
    return c;
}

inline Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (float v : a.data) s += v;
    return Tensor::scalar(static_cast<float>(s / static_cast<double>(a.numel())));
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        s += d * d;
    }
    return Tensor::scalar(static_cast<float>(s / static_cast<double>(a.numel())));
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.numel() == 0) return b;
    if (b.numel() == 0) return a;
    require_matrix(a, "concat_rows");
    require_matrix(b, "concat_rows");
    if (a.shape[1] != b.shape[1])
        throw ShapeError("concat_rows: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor c({a.shape[0] + b.shape[0], a.shape[1]});
    std::memcpy(c.data.data(), a.data.data(), a.data.size() * sizeof(float));
    std::memcpy(c.data.data() + a.data.size(), b.data.data(), b.data.size() * sizeof(float));
    return c;
}

inline Tensor slice_rows(const Tensor& a, int start, int count) {
    require_matrix(a, "slice_rows");
    if (start < 0 || count < 0 || start + count > a.shape[0])
        throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " + a.shape_str());
    Tensor c({count, a.shape[1]});
    std::memcpy(c.data.data(), a.data.data() + static_cast<size_t>(start) * a.shape[1],
                c.data.size() * sizeof(float));
    return c;
}

inline Tensor slice_cols(const Tensor& a, int start, int count) {
    require_matrix(a, "slice_cols");
    if (start < 0 || count < 0 || start + count > a.shape[1])
        throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " + a.shape_str());
    Tensor c({a.shape[0], count});
    for (int i = 0; i < a.shape[0]; ++i)
        std::memcpy(c.data.data() + static_cast<size_t>(i) * count,
                    a.data.data() + static_cast<size_t>(i) * a.shape[1] + start,
                    static_cast<size_t>(count) * sizeof(float));
    return c;
}

// Row gather; index -1 yields a zero row (used for conv zero padding).
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    require_matrix(a, "gather_rows");
    Tensor c({static_cast<int>(idx.size()), a.shape[1]});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0) continue;
        if (idx[i] >= a.shape[0])
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of " +
                             a.shape_str());
        std::memcpy(c.data.data() + i * a.shape[1],
                    a.data.data() + static_cast<size_t>(idx[i]) * a.shape[1],
                    static_cast<size_t>(a.shape[1]) * sizeof(float));
    }
    return c;
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a.numel())
        throw ShapeError("reshape: " + a.shape_str() + " to " + Tensor::shape_str(shape));
    Tensor c = a;
    c.shape = std::move(shape);
    return c;
}

// weight + strength * sum_i (alpha_i / rank_i) * up_i * down_i.
// strength == 0 or an empty delta list returns the weight bit-identically.
inline Tensor apply_lora(const Tensor& weight, const std::vector<LoRADelta>& deltas,
                         float strength) {
    require_matrix(weight, "apply_lora");
    if (deltas.empty() || strength == 0.0f) return weight;
    Tensor w = weight;
    const int d_out = weight.shape[0], d_in = weight.shape[1];
    for (const LoRADelta& d : deltas) {
        d.check();
        if (d.up.shape[0] != d_out || d.down.shape[1] != d_in)
            throw ShapeError("apply_lora: delta " + d.target_id + " shape " + d.up.shape_str() +
                             "x" + d.down.shape_str() + " vs weight " + weight.shape_str());
        const float s = strength * d.alpha / static_cast<float>(d.rank());
        const int r = d.rank();
        for (int i = 0; i < d_out; ++i)
            for (int k = 0; k < r; ++k) {
                const float u = d.up.at(i, k) * s;
                if (u == 0.0f) continue;
                for (int j = 0; j < d_in; ++j) w.at(i, j) += u * d.down.at(k, j);
            }
    }
    return w;
}

}  // namespace ops
}  // namespace templet

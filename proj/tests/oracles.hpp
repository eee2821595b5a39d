// oracles.hpp - independent references the tests check the implementation
// against: central finite differences, double-precision full-sequence
// attention over explicit concatenation, and dense LoRA materialization.
// Nothing here calls back into the library's own attention/merge/backward
// paths.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "templet/tensor.hpp"

namespace oracles {

// ---------------------------------------------------------------------------
// Central finite differences
// ---------------------------------------------------------------------------

struct GradCheck {
    double max_rel_err = 0.0;
    int checked = 0;
};

// loss() must re-evaluate the full forward from the (mutated) parameter
// storage. rel err per component is measured against the component magnitude
// with a floor at 5% of the slice's largest gradient, which guards the
// near-zero components without masking real errors.
inline GradCheck finite_difference_check(std::vector<float*> params,
                                         const std::vector<float>& analytic,
                                         const std::function<double()>& loss,
                                         float eps = 1e-3f) {
    GradCheck result;
    double max_abs = 1e-12;
    for (float g : analytic) max_abs = std::max(max_abs, std::fabs(static_cast<double>(g)));
    for (size_t i = 0; i < params.size(); ++i) {
        float saved = *params[i];
        *params[i] = saved + eps;
        double up = loss();
        *params[i] = saved - eps;
        double down = loss();
        *params[i] = saved;
        double fd = (up - down) / (2.0 * static_cast<double>(eps));
        double an = static_cast<double>(analytic[i]);
        double denom = std::max({std::fabs(fd), std::fabs(an), 0.05 * max_abs});
        result.max_rel_err = std::max(result.max_rel_err, std::fabs(fd - an) / denom);
        ++result.checked;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Double-precision attention over the explicitly concatenated sequence
// ---------------------------------------------------------------------------

// q: (n, d), k/v: (m, d) already containing any injected tokens first.
inline std::vector<double> full_attention(const std::vector<double>& q,
                                          const std::vector<double>& k,
                                          const std::vector<double>& v, int n, int m, int d,
                                          int heads) {
    const int dh = d / heads;
    std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(static_cast<size_t>(m));
            double mx = -1e300;
            for (int j = 0; j < m; ++j) {
                double s = 0.0;
                for (int e = 0; e < dh; ++e)
                    s += q[static_cast<size_t>(i) * d + off + e] *
                         k[static_cast<size_t>(j) * d + off + e];
                s /= std::sqrt(static_cast<double>(dh));
                scores[static_cast<size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            for (int j = 0; j < m; ++j)
                for (int e = 0; e < dh; ++e)
                    out[static_cast<size_t>(i) * d + off + e] +=
                        scores[static_cast<size_t>(j)] / z *
                        v[static_cast<size_t>(j) * d + off + e];
        }
    }
    return out;
}

inline std::vector<double> widen(const templet::Tensor& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

// Attention oracle taking f32 tensors: concatenates [bank; k] / [bank; v]
// explicitly and runs the double-precision reference.
inline templet::Tensor attention_concat_oracle(const templet::Tensor& q,
                                               const templet::Tensor& k,
                                               const templet::Tensor& v,
                                               const templet::Tensor& bank_k,
                                               const templet::Tensor& bank_v, int heads) {
    const int n = q.shape[0], d = q.shape[1];
    const int nb = bank_k.numel() ? bank_k.shape[0] : 0;
    const int m = nb + k.shape[0];
    std::vector<double> kk, vv;
    kk.reserve(static_cast<size_t>(m) * d);
    vv.reserve(static_cast<size_t>(m) * d);
    for (int i = 0; i < nb; ++i)
        for (int j = 0; j < d; ++j) kk.push_back(bank_k.at(i, j));
    for (int i = 0; i < k.shape[0]; ++i)
        for (int j = 0; j < d; ++j) kk.push_back(k.at(i, j));
    for (int i = 0; i < nb; ++i)
        for (int j = 0; j < d; ++j) vv.push_back(bank_v.at(i, j));
    for (int i = 0; i < v.shape[0]; ++i)
        for (int j = 0; j < d; ++j) vv.push_back(v.at(i, j));
    std::vector<double> out = full_attention(widen(q), kk, vv, n, m, d, heads);
    templet::Tensor r({n, d});
    for (size_t i = 0; i < out.size(); ++i) r.data[i] = static_cast<float>(out[i]);
    return r;
}

// ---------------------------------------------------------------------------
// Dense LoRA materialization: W + sum_i s_i (alpha_i / r_i) up_i down_i in
// double precision.
// ---------------------------------------------------------------------------

inline templet::Tensor dense_lora_oracle(
    const templet::Tensor& weight,
    const std::vector<std::tuple<templet::Tensor, templet::Tensor, float, float>>&
        factor_up_down_alpha_strength) {
    const int d_out = weight.shape[0], d_in = weight.shape[1];
    std::vector<double> acc(widen(weight));
    for (const auto& [down, up, alpha, strength] : factor_up_down_alpha_strength) {
        const int r = down.shape[0];
        const double s = static_cast<double>(strength) * alpha / r;
        for (int i = 0; i < d_out; ++i)
            for (int j = 0; j < d_in; ++j) {
                double sum = 0.0;
                for (int e = 0; e < r; ++e)
                    sum += static_cast<double>(up.at(i, e)) * down.at(e, j);
                acc[static_cast<size_t>(i) * d_in + j] += s * sum;
            }
    }
    templet::Tensor out({d_out, d_in});
    for (size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------------

inline float max_abs_diff(const templet::Tensor& a, const templet::Tensor& b) {
    float mx = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i)
        mx = std::max(mx, std::fabs(a.data[i] - b.data[i]));
    return mx;
}

inline bool bit_identical(const templet::Tensor& a, const templet::Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i) {
        if (std::memcmp(&a.data[i], &b.data[i], sizeof(float)) != 0) return false;
    }
    return true;
}

// Unique scratch directory under the system temp root, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng{std::random_device{}()};
        path_ = (std::filesystem::temp_directory_path() /
                 ("templet_" + tag + "_" + std::to_string(rng())))
                    .string();
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

}  // namespace oracles

// autodiff.hpp - reverse-mode differentiation over tensor ops
//
// A Tape records operations in topological order; Var is a handle to a node.
// backward() seeds the scalar loss with 1 and visits each node exactly once,
// newest to oldest. Leaves are Constant (no gradient), Trainable (gradient
// accumulated), or Frozen (requesting a gradient is a hard error).
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "templet/errors.hpp"
#include "templet/tensor.hpp"

namespace templet {

enum class Leaf { Constant, Trainable, Frozen };

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily on first accumulation
        bool requires_grad = false;
        bool frozen = false;
        std::function<void(Tape&, const Tensor&)> backprop;  // pushes into parents
    };

    Var leaf(Tensor v, Leaf mode = Leaf::Constant) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = (mode == Leaf::Trainable);
        n.frozen = (mode == Leaf::Frozen);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.idx)].value; }

    // Gradient of the last backward() w.r.t. a trainable node.
    const Tensor& grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.idx)];
        if (n.frozen)
            throw FrozenParamError("gradient requested for a frozen parameter");
        if (!n.requires_grad)
            throw ShapeError("gradient requested for a non-trainable node");
        if (n.grad.numel() == 0) {
            static thread_local Tensor zeros;
            zeros = Tensor(n.value.shape);
            return zeros;
        }
        return n.grad;
    }

    bool has_grad(Var v) const {
        return nodes_[static_cast<size_t>(v.idx)].grad.numel() != 0;
    }

    void backward(Var loss) {
        Node& ln = nodes_[static_cast<size_t>(loss.idx)];
        if (ln.value.numel() != 1)
            throw ShapeError("backward: loss must be scalar, got " + ln.value.shape_str());
        accumulate(loss.idx, Tensor::scalar(1.0f));
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backprop && n.requires_grad && n.grad.numel() != 0) n.backprop(*this, n.grad);
        }
    }

    size_t size() const { return nodes_.size(); }

    bool wants_grad(Var v) const { return nodes_[static_cast<size_t>(v.idx)].requires_grad; }
    bool is_frozen(Var v) const { return nodes_[static_cast<size_t>(v.idx)].frozen; }

    // Confirms no frozen leaf ever had a gradient buffer allocated. Trainers
    // call this after backward; a hit means base parameters were wired as
    // trainable somewhere.
    void assert_frozen_clean() const {
        for (const Node& n : nodes_)
            if (n.frozen && n.grad.numel() != 0)
                throw FrozenParamError("gradient reached a frozen parameter");
    }

    void accumulate(int idx, const Tensor& g) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        if (!n.requires_grad) return;  // constants and frozen leaves
        if (n.grad.numel() == 0) {
            n.grad = g;
        } else {
            for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
        }
    }

    // ---- recorded operations; forward semantics match templet::ops ----

    Var matmul(Var a, Var b) {
        Tensor v = ops::matmul(value(a), value(b));
        return record(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
            if (t.wants_grad(a)) t.accumulate(a.idx, ops::matmul_nt(g, t.value(b)));
            if (t.wants_grad(b)) t.accumulate(b.idx, ops::matmul_tn(t.value(a), g));
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        Tensor v = ops::matmul_nt(value(a), value(b));
        return record(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
            if (t.wants_grad(a)) t.accumulate(a.idx, ops::matmul(g, t.value(b)));
            if (t.wants_grad(b)) t.accumulate(b.idx, ops::matmul_tn(g, t.value(a)));
        });
    }

    Var add(Var a, Var b) {
        Tensor v = ops::add(value(a), value(b));
        return record(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, g);
            t.accumulate(b.idx, g);
        });
    }

    Var sub(Var a, Var b) {
        Tensor v = ops::sub(value(a), value(b));
        return record(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, g);
            t.accumulate(b.idx, ops::scale(g, -1.0f));
        });
    }

    Var mul(Var a, Var b) {
        Tensor v = ops::mul(value(a), value(b));
        return record(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, ops::mul(g, t.value(b)));
            t.accumulate(b.idx, ops::mul(g, t.value(a)));
        });
    }

    Var scale(Var a, float s) {
        Tensor v = ops::scale(value(a), s);
        return record(std::move(v), {a}, [a, s](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, ops::scale(g, s));
        });
    }

    Var add_rowwise(Var a, Var bias) {
        Tensor v = ops::add_rowwise(value(a), value(bias));
        return record(std::move(v), {a, bias}, [a, bias](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, g);
            Tensor db(t.value(bias).shape);
            const int n = g.shape[0], d = g.shape[1];
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) db.data[static_cast<size_t>(j)] += g.at(i, j);
            t.accumulate(bias.idx, db);
        });
    }

    Var transpose(Var a) {
        Tensor v = ops::transpose(value(a));
        return record(std::move(v), {a}, [a](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, ops::transpose(g));
        });
    }

    Var softmax_rows(Var a) {
        Tensor y = ops::softmax_rows(value(a));
        Var out = record(std::move(y), {a}, nullptr);
        Node& node = nodes_[static_cast<size_t>(out.idx)];
        if (node.requires_grad) {
            const int oi = out.idx;
            node.backprop = [a, oi](Tape& t, const Tensor& g) {
                const Tensor& y = t.nodes_[static_cast<size_t>(oi)].value;
                Tensor dx(y.shape);
                const int n = y.shape[0], d = y.shape[1];
                for (int i = 0; i < n; ++i) {
                    float dot = 0.0f;
                    for (int j = 0; j < d; ++j) dot += g.at(i, j) * y.at(i, j);
                    for (int j = 0; j < d; ++j) dx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
                }
                t.accumulate(a.idx, dx);
            };
        }
        return out;
    }

    Var layernorm_rows(Var x, Var gamma, Var beta) {
        Tensor y = ops::layernorm_rows(value(x), value(gamma), value(beta));
        return record(std::move(y), {x, gamma, beta},
                      [x, gamma, beta](Tape& t, const Tensor& g) {
            const Tensor& xv = t.value(x);
            const Tensor& gv = t.value(gamma);
            const int n = xv.shape[0], d = xv.shape[1];
            Tensor dx(xv.shape), dgamma(gv.shape), dbeta(gv.shape);
            for (int i = 0; i < n; ++i) {
                float mean = 0.0f;
                for (int j = 0; j < d; ++j) mean += xv.at(i, j);
                mean /= static_cast<float>(d);
                float var = 0.0f;
                for (int j = 0; j < d; ++j) {
                    float c = xv.at(i, j) - mean;
                    var += c * c;
                }
                var /= static_cast<float>(d);
                float inv = 1.0f / std::sqrt(var + ops::kLayerNormEps);
                float m1 = 0.0f, m2 = 0.0f;  // mean(dxhat), mean(dxhat * xhat)
                for (int j = 0; j < d; ++j) {
                    float xhat = (xv.at(i, j) - mean) * inv;
                    float dxhat = g.at(i, j) * gv.data[static_cast<size_t>(j)];
                    dgamma.data[static_cast<size_t>(j)] += g.at(i, j) * xhat;
                    dbeta.data[static_cast<size_t>(j)] += g.at(i, j);
                    m1 += dxhat;
                    m2 += dxhat * xhat;
                }
                m1 /= static_cast<float>(d);
                m2 /= static_cast<float>(d);
                for (int j = 0; j < d; ++j) {
                    float xhat = (xv.at(i, j) - mean) * inv;
                    float dxhat = g.at(i, j) * gv.data[static_cast<size_t>(j)];
                    dx.at(i, j) = inv * (dxhat - m1 - xhat * m2);
                }
            }
            t.accumulate(x.idx, dx);
            t.accumulate(gamma.idx, dgamma);
            t.accumulate(beta.idx, dbeta);
        });
    }

    Var gelu(Var a) {
        Tensor v = ops::gelu(value(a));
        return record(std::move(v), {a}, [a](Tape& t, const Tensor& g) {
            const Tensor& xv = t.value(a);
            Tensor dx(xv.shape);
            for (size_t i = 0; i < dx.data.size(); ++i)
                dx.data[i] = g.data[i] * ops::gelu_grad_scalar(xv.data[i]);
            t.accumulate(a.idx, dx);
        });
    }

    Var mean_all(Var a) {
        Tensor v = ops::mean_all(value(a));
        return record(std::move(v), {a}, [a](Tape& t, const Tensor& g) {
            const Tensor& xv = t.value(a);
            Tensor dx(xv.shape, g.data[0] / static_cast<float>(xv.numel()));
            t.accumulate(a.idx, dx);
        });
    }

    Var mse(Var a, Var b) {
        Tensor v = ops::mse(value(a), value(b));
        return record(std::move(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
            const Tensor& av = t.value(a);
            const Tensor& bv = t.value(b);
            const float s = 2.0f * g.data[0] / static_cast<float>(av.numel());
            Tensor da(av.shape);
            for (size_t i = 0; i < da.data.size(); ++i)
                da.data[i] = s * (av.data[i] - bv.data[i]);
            t.accumulate(b.idx, ops::scale(da, -1.0f));
            t.accumulate(a.idx, std::move(da));
        });
    }

    Var concat_rows(Var a, Var b) {
        Tensor v = ops::concat_rows(value(a), value(b));
        const int na = value(a).numel() ? value(a).shape[0] : 0;
        const int nb = v.shape[0] - na;
        return record(std::move(v), {a, b}, [a, b, na, nb](Tape& t, const Tensor& g) {
            if (na > 0) t.accumulate(a.idx, ops::slice_rows(g, 0, na));
            if (nb > 0) t.accumulate(b.idx, ops::slice_rows(g, na, nb));
        });
    }

    Var slice_rows(Var a, int start, int count) {
        Tensor v = ops::slice_rows(value(a), start, count);
        return record(std::move(v), {a}, [a, start, count](Tape& t, const Tensor& g) {
            Tensor da(t.value(a).shape);
            const int d = da.shape[1];
            for (int i = 0; i < count; ++i)
                for (int j = 0; j < d; ++j) da.at(start + i, j) = g.at(i, j);
            t.accumulate(a.idx, da);
        });
    }

    Var slice_cols(Var a, int start, int count) {
        Tensor v = ops::slice_cols(value(a), start, count);
        return record(std::move(v), {a}, [a, start, count](Tape& t, const Tensor& g) {
            Tensor da(t.value(a).shape);
            const int n = da.shape[0];
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < count; ++j) da.at(i, start + j) = g.at(i, j);
            t.accumulate(a.idx, da);
        });
    }

    Var concat_cols(Var a, Var b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        ops::require_matrix(av, "concat_cols");
        ops::require_matrix(bv, "concat_cols");
        if (av.shape[0] != bv.shape[0])
            throw ShapeError("concat_cols: shape mismatch " + av.shape_str() + " vs " +
                             bv.shape_str());
        Tensor v({av.shape[0], av.shape[1] + bv.shape[1]});
        for (int i = 0; i < av.shape[0]; ++i) {
            for (int j = 0; j < av.shape[1]; ++j) v.at(i, j) = av.at(i, j);
            for (int j = 0; j < bv.shape[1]; ++j) v.at(i, av.shape[1] + j) = bv.at(i, j);
        }
        const int ca = av.shape[1], cb = bv.shape[1];
        return record(std::move(v), {a, b}, [a, b, ca, cb](Tape& t, const Tensor& g) {
            t.accumulate(a.idx, ops::slice_cols(g, 0, ca));
            t.accumulate(b.idx, ops::slice_cols(g, ca, cb));
        });
    }

    // Row gather with -1 as a zero row; backward scatter-adds.
    Var gather_rows(Var a, std::vector<int> idx) {
        Tensor v = ops::gather_rows(value(a), idx);
        return record(std::move(v), {a}, [a, idx = std::move(idx)](Tape& t, const Tensor& g) {
            Tensor da(t.value(a).shape);
            const int d = da.shape[1];
            for (size_t i = 0; i < idx.size(); ++i) {
                if (idx[i] < 0) continue;
                for (int j = 0; j < d; ++j) da.at(idx[i], j) += g.at(static_cast<int>(i), j);
            }
            t.accumulate(a.idx, da);
        });
    }

    Var reshape(Var a, std::vector<int> shape) {
        Tensor v = ops::reshape(value(a), shape);
        return record(std::move(v), {a}, [a](Tape& t, const Tensor& g) {
            Tensor da = g;
            da.shape = t.value(a).shape;
            t.accumulate(a.idx, da);
        });
    }

private:
    Var record(Tensor value, std::initializer_list<Var> parents,
               std::function<void(Tape&, const Tensor&)> backprop) {
        Node n;
        n.value = std::move(value);
        for (Var p : parents)
            if (nodes_[static_cast<size_t>(p.idx)].requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

using ParamVars = std::map<std::string, Var>;

inline ParamVars lift_params(Tape& t, const std::map<std::string, Tensor>& params, Leaf mode) {
    ParamVars pv;
    for (const auto& [name, tensor] : params) pv[name] = t.leaf(tensor, mode);
    return pv;
}

// y = x * W^T + b with W stored (d_out, d_in), matching the LoRA delta layout.
inline Var linear(Tape& t, const ParamVars& pv, const std::string& prefix, Var x) {
    return t.add_rowwise(t.matmul_nt(x, pv.at(prefix + ".w")), pv.at(prefix + ".b"));
}

// Multi-head scaled-dot-product attention with an optional injected KV bank.
// Injected tokens are prepended on the key/value side only; queries gain no
// positions and injected tokens receive no positional treatment. With an
// invalid/absent bank the plain-attention path runs, bit-identical to
// attention without injection.
inline Var attention_injected(Tape& t, Var q, Var k, Var v, Var bank_k, Var bank_v,
                              int n_heads) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    ops::require_matrix(qv, "attention");
    const int d_model = qv.shape[1];
    if (d_model % n_heads != 0)
        throw ShapeError("attention: d_model " + std::to_string(d_model) +
                         " not divisible by heads " + std::to_string(n_heads));
    const bool injected = bank_k.valid() && t.value(bank_k).numel() > 0;
    if (injected && t.value(bank_k).shape[1] != d_model)
        throw ShapeError("attention: head dimension mismatch, bank " +
                         t.value(bank_k).shape_str() + " vs sequence " + kv.shape_str());
    const int dh = d_model / n_heads;
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

    Var out;
    for (int h = 0; h < n_heads; ++h) {
        Var qh = t.slice_cols(q, h * dh, dh);
        Var kh = t.slice_cols(k, h * dh, dh);
        Var vh = t.slice_cols(v, h * dh, dh);
        if (injected) {
            kh = t.concat_rows(t.slice_cols(bank_k, h * dh, dh), kh);
            vh = t.concat_rows(t.slice_cols(bank_v, h * dh, dh), vh);
        }
        Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt_dh);
        Var oh = t.matmul(t.softmax_rows(scores), vh);
        out = h == 0 ? oh : t.concat_cols(out, oh);
    }
    return out;
}

// Untaped convenience wrapper over plain tensors.
inline Tensor attention_injected(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const KVBank& bank, int n_heads) {
    bank.check();
    Tape t;
    Var bk, bv;
    if (!bank.empty()) {
        bk = t.leaf(bank.keys);
        bv = t.leaf(bank.values);
    }
    Var out = attention_injected(t, t.leaf(q), t.leaf(k), t.leaf(v), bk, bv, n_heads);
    return t.value(out);
}

}  // namespace templet

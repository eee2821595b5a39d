#include <catch2/catch_amalgamated.hpp>

#include "templet/autodiff.hpp"
#include "templet/tensor.hpp"

#include "oracles.hpp"

using namespace templet;

TEST_CASE("matmul identity and shape errors") {
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
    Rng rng(7);
    Tensor a = Tensor::randn({3, 5}, rng);
    CHECK(oracles::bit_identical(ops::matmul(eye, a), a));

    CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
    try {
        ops::matmul(Tensor({2, 3}), Tensor({4, 5}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2,3)") != std::string::npos);
        CHECK(msg.find("(4,5)") != std::string::npos);
    }
}

TEST_CASE("softmax symmetry and mse identity") {
    Tensor z({1, 2}, {0.0f, 0.0f});
    Tensor sm = ops::softmax_rows(z);
    CHECK(sm.data[0] == Catch::Approx(0.5));
    CHECK(sm.data[1] == Catch::Approx(0.5));

    Rng rng(3);
    Tensor x = Tensor::randn({4, 4}, rng);
    CHECK(ops::mse(x, x).data[0] == 0.0f);
}

TEST_CASE("ops are deterministic") {
    Rng rng(11);
    Tensor a = Tensor::randn({8, 8}, rng);
    Tensor b = Tensor::randn({8, 8}, rng);
    CHECK(oracles::bit_identical(ops::matmul(a, b), ops::matmul(a, b)));
    CHECK(oracles::bit_identical(ops::softmax_rows(a), ops::softmax_rows(a)));
    CHECK(oracles::bit_identical(ops::gelu(a), ops::gelu(a)));
}

TEST_CASE("backward: simple analytic gradients") {
    SECTION("loss = sum(w * x), grad w = x") {
        Tape t;
        Rng rng(5);
        Tensor wv = Tensor::randn({1, 6}, rng);
        Tensor xv = Tensor::randn({1, 6}, rng);
        Var w = t.leaf(wv, Leaf::Trainable);
        Var x = t.leaf(xv);
        Var loss = t.scale(t.mean_all(t.mul(w, x)), 6.0f);  // sum
        t.backward(loss);
        const Tensor& g = t.grad(w);
        for (int i = 0; i < 6; ++i) CHECK(g.data[i] == Catch::Approx(xv.data[i]).margin(1e-6));
    }
    SECTION("loss = mse(w, 0), grad w = 2w/n") {
        Tape t;
        Rng rng(6);
        Tensor wv = Tensor::randn({1, 4}, rng);
        Var w = t.leaf(wv, Leaf::Trainable);
        Var loss = t.mse(w, t.leaf(Tensor({1, 4})));
        t.backward(loss);
        const Tensor& g = t.grad(w);
        for (int i = 0; i < 4; ++i)
            CHECK(g.data[i] == Catch::Approx(2.0f * wv.data[i] / 4.0f).margin(1e-6));
    }
    SECTION("non-scalar loss is an error") {
        Tape t;
        Var w = t.leaf(Tensor({2, 2}), Leaf::Trainable);
        CHECK_THROWS_AS(t.backward(w), ShapeError);
    }
}

TEST_CASE("backward: random 2-layer MLP matches central finite differences") {
    Rng rng(42);
    Tensor w1 = Tensor::randn({5, 4}, rng, 0.6f);
    Tensor b1 = Tensor::randn({5}, rng, 0.2f);
    Tensor w2 = Tensor::randn({2, 5}, rng, 0.6f);
    Tensor b2 = Tensor::randn({2}, rng, 0.2f);
    Tensor input = Tensor::randn({3, 4}, rng);
    Tensor target = Tensor::randn({3, 2}, rng);

    auto forward = [&](Tape& t, ParamVars& pv) {
        pv["w1"] = t.leaf(w1, Leaf::Trainable);
        pv["b1"] = t.leaf(b1, Leaf::Trainable);
        pv["w2"] = t.leaf(w2, Leaf::Trainable);
        pv["b2"] = t.leaf(b2, Leaf::Trainable);
        Var h = t.gelu(t.add_rowwise(t.matmul_nt(t.leaf(input), pv["w1"]), pv["b1"]));
        Var out = t.add_rowwise(t.matmul_nt(h, pv["w2"]), pv["b2"]);
        return t.mse(out, t.leaf(target));
    };

    Tape t;
    ParamVars pv;
    Var loss = forward(t, pv);
    t.backward(loss);

    std::vector<float*> slots;
    std::vector<float> analytic;
    for (auto* param : {&w1, &b1, &w2, &b2}) {
        for (float& v : param->data) slots.push_back(&v);
    }
    for (const char* name : {"w1", "b1", "w2", "b2"}) {
        const Tensor& g = t.grad(pv[name]);
        analytic.insert(analytic.end(), g.data.begin(), g.data.end());
    }

    auto loss_value = [&]() -> double {
        Tape t2;
        ParamVars pv2;
        Var l = forward(t2, pv2);
        return t2.value(l).data[0];
    };
    auto gc = oracles::finite_difference_check(slots, analytic, loss_value);
    INFO("max rel err " << gc.max_rel_err << " over " << gc.checked);
    CHECK(gc.max_rel_err <= 1e-3);
}

TEST_CASE("gradient correctness for each op on small random tensors") {
    Rng rng(1234);
    struct Case {
        const char* name;
        std::function<Var(Tape&, Var, Var)> op;
        std::vector<int> ashape, bshape;
    };
    std::vector<Case> cases = {
        {"matmul", [](Tape& t, Var a, Var b) { return t.matmul(a, b); }, {4, 5}, {5, 3}},
        {"matmul_nt", [](Tape& t, Var a, Var b) { return t.matmul_nt(a, b); }, {4, 5}, {3, 5}},
        {"add", [](Tape& t, Var a, Var b) { return t.add(a, b); }, {4, 4}, {4, 4}},
        {"sub", [](Tape& t, Var a, Var b) { return t.sub(a, b); }, {4, 4}, {4, 4}},
        {"mul", [](Tape& t, Var a, Var b) { return t.mul(a, b); }, {4, 4}, {4, 4}},
        {"add_rowwise", [](Tape& t, Var a, Var b) { return t.add_rowwise(a, b); },
         {4, 6}, {6}},
        {"softmax", [](Tape& t, Var a, Var b) { return t.mul(t.softmax_rows(a), b); },
         {3, 5}, {3, 5}},
        {"gelu", [](Tape& t, Var a, Var b) { return t.mul(t.gelu(a), b); }, {4, 4}, {4, 4}},
        {"transpose", [](Tape& t, Var a, Var b) { return t.matmul(t.transpose(a), b); },
         {5, 4}, {5, 3}},
        {"concat_rows", [](Tape& t, Var a, Var b) { return t.concat_rows(a, b); },
         {3, 4}, {2, 4}},
        {"concat_cols", [](Tape& t, Var a, Var b) { return t.concat_cols(a, b); },
         {3, 4}, {3, 2}},
        {"slice", [](Tape& t, Var a, Var b) {
             return t.mul(t.slice_cols(t.slice_rows(a, 1, 2), 1, 3), b); }, {4, 5}, {2, 3}},
        {"layernorm", [](Tape& t, Var a, Var b) {
             Tape* tp = &t;
             Var gamma = tp->leaf(Tensor({5}, 1.5f), Leaf::Trainable);
             Var beta = tp->leaf(Tensor({5}, 0.1f), Leaf::Trainable);
             return t.mul(t.layernorm_rows(a, gamma, beta), b); }, {3, 5}, {3, 5}},
    };
    for (const Case& c : cases) {
        DYNAMIC_SECTION(c.name) {
            Tensor av = Tensor::randn(c.ashape, rng, 0.8f);
            Tensor bv = Tensor::randn(c.bshape, rng, 0.8f);
            auto eval = [&](bool want_grads, std::vector<float>* grads_out) -> double {
                Tape t;
                Var a = t.leaf(av, Leaf::Trainable);
                Var b = t.leaf(bv, Leaf::Trainable);
                Var loss = t.mean_all(c.op(t, a, b));
                if (!want_grads) return t.value(loss).data[0];
                t.backward(loss);
                Tensor ga = t.grad(a), gb = t.grad(b);
                grads_out->insert(grads_out->end(), ga.data.begin(), ga.data.end());
                grads_out->insert(grads_out->end(), gb.data.begin(), gb.data.end());
                return t.value(loss).data[0];
            };
            std::vector<float> analytic;
            eval(true, &analytic);
            std::vector<float*> slots;
            for (float& v : av.data) slots.push_back(&v);
            for (float& v : bv.data) slots.push_back(&v);
            auto gc = oracles::finite_difference_check(
                slots, analytic, [&]() { return eval(false, nullptr); });
            INFO(c.name << ": max rel err " << gc.max_rel_err);
            CHECK(gc.max_rel_err <= 1e-3);
        }
    }
}

TEST_CASE("attention_injected: empty bank is bit-identical to plain attention") {
    Rng rng(99);
    Tensor q = Tensor::randn({5, 8}, rng);
    Tensor k = Tensor::randn({5, 8}, rng);
    Tensor v = Tensor::randn({5, 8}, rng);
    KVBank empty;
    empty.keys = Tensor({0, 8});
    empty.values = Tensor({0, 8});

    Tensor with_bank = attention_injected(q, k, v, empty, 2);
    Tensor plain = attention_injected(q, k, v, KVBank{}, 2);
    CHECK(oracles::bit_identical(with_bank, plain));
}

TEST_CASE("attention_injected: masked-out bank changes nothing within 1e-5") {
    Rng rng(100);
    Tensor q = Tensor::randn({5, 8}, rng);
    Tensor k = Tensor::randn({5, 8}, rng);
    Tensor v = Tensor::randn({5, 8}, rng);
    KVBank bank;
    bank.keys = Tensor({2, 8}, -1e9f);
    bank.values = Tensor({2, 8}, 0.0f);
    Tensor out = attention_injected(q, k, v, bank, 2);
    Tensor plain = attention_injected(q, k, v, KVBank{}, 2);
    CHECK(oracles::max_abs_diff(out, plain) <= 1e-5f);
}

TEST_CASE("attention_injected equals explicit-concatenation oracle") {
    Rng rng(101);
    for (int n_tokens : {0, 1, 3, 17}) {
        DYNAMIC_SECTION("tokens " << n_tokens) {
            Tensor q = Tensor::randn({5, 8}, rng);
            Tensor k = Tensor::randn({5, 8}, rng);
            Tensor v = Tensor::randn({5, 8}, rng);
            KVBank bank;
            bank.keys = Tensor::randn({n_tokens, 8}, rng);
            bank.values = Tensor::randn({n_tokens, 8}, rng);
            Tensor out = attention_injected(q, k, v, bank, 2);
            Tensor ref = oracles::attention_concat_oracle(q, k, v, bank.keys, bank.values, 2);
            CHECK(oracles::max_abs_diff(out, ref) <= 1e-5f);
        }
    }
}

TEST_CASE("attention_injected: head dimension mismatch is an error") {
    Rng rng(102);
    Tensor q = Tensor::randn({4, 8}, rng);
    KVBank bank;
    bank.keys = Tensor::randn({2, 6}, rng);
    bank.values = Tensor::randn({2, 6}, rng);
    CHECK_THROWS_AS(attention_injected(q, q, q, bank, 2), ShapeError);
}

TEST_CASE("apply_lora identities") {
    Rng rng(55);
    Tensor w = Tensor::randn({6, 6}, rng);

    LoRADelta zero_up;
    zero_up.target_id = "w";
    zero_up.down = Tensor::randn({2, 6}, rng);
    zero_up.up = Tensor({6, 2});
    zero_up.alpha = 2.0f;
    CHECK(oracles::max_abs_diff(ops::apply_lora(w, {zero_up}, 1.0f), w) == 0.0f);

    LoRADelta d;
    d.target_id = "w";
    d.down = Tensor::randn({2, 6}, rng);
    d.up = Tensor::randn({6, 2}, rng);
    d.alpha = 2.0f;
    CHECK(oracles::bit_identical(ops::apply_lora(w, {d}, 0.0f), w));
}

TEST_CASE("apply_lora matches the dense materialization oracle") {
    Rng rng(56);
    Tensor w = Tensor::randn({6, 5}, rng);
    LoRADelta d1, d2;
    d1.down = Tensor::randn({2, 5}, rng);
    d1.up = Tensor::randn({6, 2}, rng);
    d1.alpha = 3.0f;
    d2.down = Tensor::randn({2, 5}, rng);
    d2.up = Tensor::randn({6, 2}, rng);
    d2.alpha = 1.0f;
    Tensor applied = ops::apply_lora(w, {d1, d2}, 1.0f);
    Tensor ref = oracles::dense_lora_oracle(
        w, {{d1.down, d1.up, d1.alpha, 1.0f}, {d2.down, d2.up, d2.alpha, 1.0f}});
    CHECK(oracles::max_abs_diff(applied, ref) <= 1e-6f);
}

TEST_CASE("apply_lora is linear in strength") {
    Rng rng(57);
    Tensor w = Tensor::randn({5, 5}, rng);
    for (int i = 0; i < 10; ++i) {
        LoRADelta d;
        d.down = Tensor::randn({3, 5}, rng);
        d.up = Tensor::randn({5, 3}, rng);
        d.alpha = static_cast<float>(rng.uniform(0.5, 4.0));
        float a = static_cast<float>(rng.uniform(0.0, 2.0));
        float b = static_cast<float>(rng.uniform(0.0, 2.0));
        Tensor joint = ops::apply_lora(w, {d}, a + b);
        Tensor steps = ops::apply_lora(ops::apply_lora(w, {d}, a), {d}, b);
        CHECK(oracles::max_abs_diff(joint, steps) <= 1e-6f);
    }
}

TEST_CASE("frozen leaves: gradient request is a hard error") {
    Tape t;
    Rng rng(58);
    Var frozen = t.leaf(Tensor::randn({3, 3}, rng), Leaf::Frozen);
    Var x = t.leaf(Tensor::randn({3, 3}, rng), Leaf::Trainable);
    Var loss = t.mean_all(t.matmul(x, frozen));
    t.backward(loss);
    t.assert_frozen_clean();
    CHECK_THROWS_AS(t.grad(frozen), FrozenParamError);
    CHECK_NOTHROW(t.grad(x));
}

TEST_CASE("flow-style checked op rejects non-finite tensors") {
    Tensor bad({2, 2}, {1.0f, std::nanf(""), 0.0f, 0.0f});
    CHECK_THROWS_AS(ops::require_finite(bad, "test"), ShapeError);
}

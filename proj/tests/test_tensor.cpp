// SPDX-License-Identifier: Apache-2.0
//
// Unit tests for the dense tensor kernel: per-op contracts, brute-force
// oracles, and finite-difference gradient checks.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cktwam/rng.hpp"
#include "cktwam/tensor.hpp"
#include "test_util.hpp"

using namespace cktwam;
using Catch::Approx;
using TD = Tensor<double>;

namespace {

TD rand_t(Shape s, uint64_t seed, double std = 1.0) {
    RngStream rng(seed, 0, 0);
    return randn<double>(std::move(s), rng, std);
}

// Element-wise triple-loop product oracle.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int64_t m, int64_t k, int64_t n) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t l = 0; l < k; ++l)
                c[static_cast<size_t>(i * n + j)] += a[static_cast<size_t>(i * k + l)] * b[static_cast<size_t>(l * n + j)];
    return c;
}

AttentionParams<double> rand_attn(int64_t d, uint64_t seed) {
    RngStream rng(seed, 0, 0);
    AttentionParams<double> p;
    p.w_q = randn<double>({d, d}, rng, 0.3);
    p.b_q = randn<double>({d}, rng, 0.1);
    p.w_k = randn<double>({d, d}, rng, 0.3);
    p.b_k = randn<double>({d}, rng, 0.1);
    p.w_v = randn<double>({d, d}, rng, 0.3);
    p.b_v = randn<double>({d}, rng, 0.1);
    p.w_o = randn<double>({d, d}, rng, 0.3);
    p.b_o = randn<double>({d}, rng, 0.1);
    return p;
}

}  // namespace

TEST_CASE("matmul identity and direct arithmetic", "[tensor]") {
    TD eye = TD::from_vector({2, 2}, {1, 0, 0, 1});
    TD col = TD::from_vector({2, 1}, {3, 4});
    TD r = matmul(eye, col);
    CHECK(r.values() == std::vector<double>{3, 4});

    TD row = TD::from_vector({1, 2}, {1, 2});
    CHECK(matmul(row, col).values() == std::vector<double>{11});
}

TEST_CASE("matmul matches triple-loop oracle", "[tensor]") {
    TD a = rand_t({3, 4}, 11);
    TD b = rand_t({4, 2}, 12);
    TD c = matmul(a, b);
    auto expect = matmul_oracle(a.values(), b.values(), 3, 4, 2);
    CHECK(testutil::max_abs_diff(c.values(), expect) < 1e-12);
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes", "[tensor]") {
    TD a = rand_t({2, 3}, 1);
    TD b = rand_t({4, 2}, 2);
    CHECK_THROWS_MATCHES(matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("[2,3]") &&
                                                         Catch::Matchers::ContainsSubstring("[4,2]")));
}

TEST_CASE("matmul broadcasts batch dimensions and backprops", "[tensor]") {
    TD a = rand_t({2, 3, 4}, 21);
    TD w = rand_t({4, 2}, 22);
    TD out = matmul(a, w);
    REQUIRE(out.shape() == Shape{2, 3, 2});
    for (int64_t b = 0; b < 2; ++b) {
        std::vector<double> ab(a.values().begin() + b * 12, a.values().begin() + (b + 1) * 12);
        auto expect = matmul_oracle(ab, w.values(), 3, 4, 2);
        std::vector<double> got(out.values().begin() + b * 6, out.values().begin() + (b + 1) * 6);
        CHECK(testutil::max_abs_diff(got, expect) < 1e-12);
    }
    double err = testutil::max_grad_rel_err({&a, &w}, [&] { return sum_all(mul(matmul(a, w), matmul(a, w))); });
    CHECK(err < 1e-6);
}

TEST_CASE("softmax symmetry and direct values", "[tensor]") {
    TD x = TD::from_vector({3}, {0, 0, 0});
    auto y = softmax(x, 0);
    for (double v : y.values()) CHECK(v == Approx(1.0 / 3).epsilon(1e-14));

    TD z = TD::from_vector({2}, {std::log(2.0), 0.0});
    auto s = softmax(z, 0);
    CHECK(s.values()[0] == Approx(2.0 / 3).epsilon(1e-14));
    CHECK(s.values()[1] == Approx(1.0 / 3).epsilon(1e-14));
}

TEST_CASE("softmax gradient matches finite differences", "[tensor]") {
    TD x = rand_t({2, 5}, 31);
    TD w = rand_t({2, 5}, 32);
    double err = testutil::max_grad_rel_err({&x}, [&] { return sum_all(mul(softmax(x, -1), w)); });
    CHECK(err < 1e-6);
}

TEST_CASE("softmax rejects non-finite input", "[tensor]") {
    TD x = TD::from_vector({2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(softmax(x, 0), NumericError);
}

TEST_CASE("layer_norm constant row maps to beta", "[tensor]") {
    TD x = TD::from_vector({1, 4}, {5, 5, 5, 5});
    TD g = TD::from_vector({4}, {1, 1, 1, 1});
    TD b = TD::zeros({4});
    auto y = layer_norm(x, g, b, 1e-5);
    for (double v : y.values()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("layer_norm direct arithmetic at eps -> 0", "[tensor]") {
    TD x = TD::from_vector({1, 2}, {1, 3});
    TD g = TD::from_vector({2}, {1, 1});
    TD b = TD::zeros({2});
    auto y = layer_norm(x, g, b, 0.0);
    CHECK(y.values()[0] == Approx(-1.0).epsilon(1e-12));
    CHECK(y.values()[1] == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm gradient matches finite differences", "[tensor]") {
    TD x = rand_t({3, 6}, 41);
    TD g = rand_t({6}, 42, 0.5);
    TD b = rand_t({6}, 43, 0.5);
    TD w = rand_t({3, 6}, 44);
    double err = testutil::max_grad_rel_err({&x, &g, &b}, [&] {
        return sum_all(mul(layer_norm(x, g, b, 1e-5), w));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("gelu is zero at the origin and differentiable", "[tensor]") {
    TD x = TD::from_vector({1}, {0.0});
    CHECK(gelu(x).values()[0] == 0.0);
    TD y = rand_t({7}, 51);
    TD w = rand_t({7}, 52);
    double err = testutil::max_grad_rel_err({&y}, [&] { return sum_all(mul(gelu(y), w)); });
    CHECK(err < 1e-6);
}

TEST_CASE("softplus gradient matches finite differences", "[tensor]") {
    TD y = rand_t({5}, 53);
    double err = testutil::max_grad_rel_err({&y}, [&] { return sum_all(softplus(y)); });
    CHECK(err < 1e-6);
}

TEST_CASE("dropout identities", "[tensor]") {
    TD x = rand_t({4, 4}, 61);
    auto same_train = dropout(x, 0.0, true, RngStream(1, 2, 3));
    CHECK(same_train.values() == x.values());
    auto same_eval = dropout(x, 0.5, false, RngStream(1, 2, 3));
    CHECK(same_eval.values() == x.values());
}

TEST_CASE("dropout train mode scales survivors and is reproducible per key", "[tensor]") {
    TD x = TD::full({1000}, 1.0);
    auto a = dropout(x, 0.25, true, RngStream(9, 1, 0));
    auto b = dropout(x, 0.25, true, RngStream(9, 1, 0));
    CHECK(a.values() == b.values());
    int64_t kept = 0;
    for (double v : a.values()) {
        CHECK((v == 0.0 || v == Approx(1.0 / 0.75).epsilon(1e-12)));
        if (v != 0.0) ++kept;
    }
    CHECK(kept > 600);
    CHECK(kept < 900);
    auto c = dropout(x, 0.25, true, RngStream(9, 1, 1));
    CHECK(c.values() != a.values());
}

TEST_CASE("dropout gradient passes through the realized mask", "[tensor]") {
    TD x = rand_t({6}, 62);
    double err = testutil::max_grad_rel_err(
        {&x}, [&] { return sum_all(dropout(x, 0.5, true, RngStream(3, 3, 3))); });
    CHECK(err < 1e-8);
}

TEST_CASE("mean_pool and sums", "[tensor]") {
    TD x = TD::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(mean_pool(x, 1).values() == std::vector<double>{2, 5});
    CHECK(sum_axis(x, 0).values() == std::vector<double>{5, 7, 9});
    CHECK(sum_all(x).item() == 21);
    TD y = rand_t({3, 4}, 63);
    double err = testutil::max_grad_rel_err({&y}, [&] { return sum_all(mul(mean_pool(y, 0), mean_pool(y, 0))); });
    CHECK(err < 1e-6);
}

TEST_CASE("concat validates non-concat axes and round-trips via slice", "[tensor]") {
    TD a = rand_t({2, 3}, 71);
    TD b = rand_t({2, 2}, 72);
    TD c = concat<double>({a, b}, 1);
    REQUIRE(c.shape() == Shape{2, 5});
    CHECK(slice(c, 1, 0, 3).values() == a.values());
    CHECK(slice(c, 1, 3, 2).values() == b.values());
    TD bad = rand_t({3, 2}, 73);
    CHECK_THROWS_AS(concat<double>({a, bad}, 1), ShapeError);
    double err = testutil::max_grad_rel_err({&a, &b}, [&] {
        TD cc = concat<double>({a, b}, 1);
        return sum_all(mul(cc, cc));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("broadcast add/mul/div with gradient reduction", "[tensor]") {
    TD x = rand_t({2, 3, 4}, 81);
    TD bias = rand_t({4}, 82);
    TD rowly = rand_t({2, 1, 4}, 83);
    double err = testutil::max_grad_rel_err({&x, &bias, &rowly}, [&] {
        TD t = add(mul(x, rowly), bias);
        return sum_all(mul(t, t));
    });
    CHECK(err < 1e-6);
    TD denom = TD::from_vector({2, 1}, {2.0, 4.0});
    TD num = rand_t({2, 3}, 84);
    double err2 = testutil::max_grad_rel_err({&num, &denom}, [&] { return sum_all(div(num, denom)); });
    CHECK(err2 < 1e-6);
}

TEST_CASE("gather_cols selects and scatters gradient", "[tensor]") {
    TD x = TD::from_vector({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    std::vector<std::vector<int64_t>> idx = {{2, 0}, {1, 3}};
    auto g = gather_cols(x, idx);
    CHECK(g.values() == std::vector<double>{3, 1, 6, 8});
    double err = testutil::max_grad_rel_err({&x}, [&] {
        auto gg = gather_cols(x, idx);
        return sum_all(mul(gg, gg));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("mse_masked zero for perfect prediction and masks instances", "[tensor]") {
    TD pred = rand_t({2, 3, 2}, 91);
    TD mask = TD::full({2, 3}, 1.0);
    TD w = TD::full({2}, 1.0);
    CHECK(mse_masked(pred, pred, mask, w).item() == 0.0);

    TD target = rand_t({2, 3, 2}, 92);
    TD empty_mask = TD::from_vector({2, 3}, {1, 1, 1, 0, 0, 0});
    double full_loss = mse_masked(pred, target, empty_mask, w).item();
    double direct = 0;
    for (int l = 0; l < 3; ++l)
        for (int j = 0; j < 2; ++j) {
            double d = pred.values()[static_cast<size_t>(l * 2 + j)] -
                       target.values()[static_cast<size_t>(l * 2 + j)];
            direct += d * d;
        }
    CHECK(full_loss == Approx(direct / 2.0).epsilon(1e-12));
    double err = testutil::max_grad_rel_err({&pred}, [&] { return mse_masked(pred, target, mask, w); });
    CHECK(err < 1e-6);
}

TEST_CASE("mse_masked applies per-instance weights", "[tensor]") {
    TD pred = TD::zeros({2, 1, 1});
    TD target = TD::from_vector({2, 1, 1}, {1.0, 1.0});
    TD mask = TD::full({2, 1}, 1.0);
    TD w = TD::from_vector({2}, {2.0, 3.0});
    CHECK(mse_masked(pred, target, mask, w).item() == Approx((2.0 + 3.0) / 2.0));
}

TEST_CASE("attention over identical values returns that value", "[tensor]") {
    int64_t d = 4;
    auto p = rand_attn(d, 101);
    TD u = rand_t({1, 1, d}, 102);
    std::vector<double> urow3(u.values());
    TD kv = TD::zeros({1, 3, d});
    for (int r = 0; r < 3; ++r)
        for (int64_t j = 0; j < d; ++j) kv.mutable_values()[static_cast<size_t>(r * d + j)] = urow3[static_cast<size_t>(j)];
    TD q = rand_t({1, 2, d}, 103);
    auto out = multi_head_attention(q, kv, kv, p, 2);
    // expected: W_o (W_v u + b_v) + b_o per row
    TD vproj = linear(reshape(u, {1, 1, d}), p.w_v, p.b_v);
    TD expect = linear(vproj, p.w_o, p.b_o);
    for (int row = 0; row < 2; ++row)
        for (int64_t j = 0; j < d; ++j)
            CHECK(out.values()[static_cast<size_t>(row * d + j)] ==
                  Approx(expect.values()[static_cast<size_t>(j)]).epsilon(1e-10));
}

TEST_CASE("attention with a single key has weight exactly one", "[tensor]") {
    int64_t d = 6;
    auto p = rand_attn(d, 111);
    TD q = rand_t({2, 3, d}, 112);
    TD kv = rand_t({2, 1, d}, 113);
    Tensor<double> probs;
    const RopeTables<double>* no_rope = nullptr;
    attention_core(q, kv, kv, p, 3, no_rope, no_rope, &probs);
    for (double v : probs.values()) CHECK(v == 1.0);
}

TEST_CASE("attention matches explicit per-head loop oracle", "[tensor]") {
    int64_t d = 4;
    auto p = rand_attn(d, 121);
    TD q = rand_t({1, 2, d}, 122);
    TD k = rand_t({1, 3, d}, 123);
    TD v = rand_t({1, 3, d}, 124);
    auto out = multi_head_attention(q, k, v, p, 2);
    auto expect = testutil::mha_loop_oracle(q, k, v, p, 2);
    CHECK(testutil::max_abs_diff(out.values(), expect) < 1e-10);
}

TEST_CASE("attention rejects indivisible head count", "[tensor]") {
    int64_t d = 6;
    auto p = rand_attn(d, 131);
    TD q = rand_t({1, 2, d}, 132);
    CHECK_THROWS_AS(multi_head_attention(q, q, q, p, 4), ConfigError);
}

TEST_CASE("attention gradients match finite differences", "[tensor]") {
    int64_t d = 4;
    auto p = rand_attn(d, 141);
    TD q = rand_t({1, 2, d}, 142);
    TD k = rand_t({1, 3, d}, 143);
    TD v = rand_t({1, 3, d}, 144);
    TD w = rand_t({1, 2, d}, 145);
    double err = testutil::max_grad_rel_err(
        {&q, &k, &v, &p.w_q, &p.b_q, &p.w_k, &p.b_k, &p.w_v, &p.b_v, &p.w_o, &p.b_o},
        [&] { return sum_all(mul(multi_head_attention(q, k, v, p, 2), w)); });
    CHECK(err < 1e-5);
}

TEST_CASE("rotate_pairs preserves norms and backprops", "[tensor]") {
    int64_t L = 3, dh = 4;
    RngStream rng(5, 0, 0);
    RopeTables<double> tab;
    std::vector<double> cosv, sinv;
    for (int64_t i = 0; i < L * dh / 2; ++i) {
        double ang = rng.gaussian();
        cosv.push_back(std::cos(ang));
        sinv.push_back(std::sin(ang));
    }
    tab.cos = TD::from_vector({L, dh / 2}, cosv);
    tab.sin = TD::from_vector({L, dh / 2}, sinv);
    TD x = rand_t({2, 2, L, dh}, 151);
    auto y = rotate_pairs(x, tab);
    double nx = 0, ny = 0;
    for (double v : x.values()) nx += v * v;
    for (double v : y.values()) ny += v * v;
    CHECK(nx == Approx(ny).epsilon(1e-12));
    double err = testutil::max_grad_rel_err({&x}, [&] {
        auto r = rotate_pairs(x, tab);
        return sum_all(mul(r, r));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("tape replay produces identical gradients", "[tensor]") {
    TD x = rand_t({4, 4}, 161);
    x.set_requires_grad(true);
    TD w = rand_t({4, 4}, 162);
    Tape<double> tape;
    TD loss;
    {
        Tape<double>::Scope scope(tape);
        loss = sum_all(mul(gelu(matmul(x, w)), gelu(matmul(x, w))));
    }
    tape.backward(loss);
    auto g1 = x.grad();
    x.zero_grad();
    tape.backward(loss);
    CHECK(x.grad() == g1);
}

TEST_CASE("backward accumulates across calls without reset", "[tensor]") {
    TD x = TD::from_vector({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    TD loss;
    {
        Tape<double>::Scope scope(tape);
        loss = sum_all(mul(x, x));
    }
    tape.backward(loss);
    auto g1 = x.grad();
    tape.backward(loss);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == Approx(2 * g1[i]));
}

TEST_CASE("no gradients recorded without tape or requires_grad", "[tensor]") {
    TD x = rand_t({3, 3}, 171);
    TD y = matmul(x, x);
    CHECK_FALSE(y.requires_grad());
    x.set_requires_grad(true);
    TD z = matmul(x, x);  // no active tape
    CHECK_FALSE(z.requires_grad());
    Tape<double> tape;
    {
        Tape<double>::Scope scope(tape);
        TD w = matmul(x, x);
        CHECK(w.requires_grad());
    }
    CHECK(tape.size() == 1);
}

TEST_CASE("deterministic forward under identical seed", "[tensor]") {
    auto run = [] {
        RngStream rng(42, 7, 0);
        TD a = randn<double>({8, 8}, rng);
        TD b = randn<double>({8, 8}, rng);
        return softmax(matmul(gelu(a), b), -1).values();
    };
    CHECK(run() == run());
}

TEST_CASE("matmul multiply counter tracks work", "[tensor]") {
    matmul_mult_counter() = 0;
    TD a = rand_t({2, 3, 4}, 181);
    TD b = rand_t({4, 5}, 182);
    matmul(a, b);
    CHECK(matmul_mult_counter() == 2ull * 3 * 4 * 5);
}

TEST_CASE("zero-sized dimensions flow through ops", "[tensor]") {
    TD empty = TD::zeros({2, 0, 4});
    TD w = rand_t({4, 3}, 191);
    auto out = matmul(empty, w);
    CHECK(out.shape() == Shape{2, 0, 3});
    TD full = rand_t({2, 5, 3}, 192);
    auto cat = concat<double>({out, full}, 1);
    CHECK(cat.shape() == Shape{2, 5, 3});
    CHECK(cat.values() == full.values());
}

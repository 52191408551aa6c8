// SPDX-License-Identifier: Apache-2.0
//
// Injection tests: conditioning augmentation, per-observation caching, the
// rotary-geometry and order invariances of the wrapped student, and gradient
// confinement to the adapter bank.

#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "cktwam/injection.hpp"
#include "test_util.hpp"

using namespace cktwam;
using TD = Tensor<double>;

namespace {

TD rand_t(Shape s, uint64_t seed, double std = 1.0) {
    RngStream rng(seed, 0, 0);
    return randn<double>(std::move(s), rng, std);
}

struct Rig {
    RunConfig cfg;
    Teacher<double> teacher;
    Student<double> student;
    AdapterBank<double> bank;
    ContextCache<double> cache;

    explicit Rig(RunConfig c)
        : cfg(c), teacher(c.teacher), student(c.student), bank(c.ckt), cache(64) {}
};

Observation<double> make_obs(const RunConfig& cfg, uint64_t seed) {
    Observation<double> obs;
    obs.x_img = rand_t({1, cfg.teacher.n_img, cfg.teacher.d}, seed * 7 + 1);
    obs.x_text = rand_t({1, cfg.teacher.n_text, cfg.teacher.d}, seed * 7 + 2);
    obs.e_t = rand_t({1, cfg.student.text_len, cfg.student.d}, seed * 7 + 3);
    obs.id = observation_id_from_bytes(obs);
    return obs;
}

TD permute_rows(const TD& cond, const std::vector<int64_t>& perm) {
    int64_t B = cond.dim(0), L = cond.dim(1), d = cond.dim(2);
    TD out = TD::zeros(cond.shape());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t j = 0; j < d; ++j)
                out.mutable_values()[static_cast<size_t>((b * L + l) * d + j)] =
                    cond.values()[static_cast<size_t>((b * L + perm[static_cast<size_t>(l)]) * d + j)];
    return out;
}

}  // namespace

TEST_CASE("augment produces the documented layout and length", "[injection]") {
    int64_t d = 32, L_t = 7;
    TD e_t = rand_t({2, L_t, d}, 1);
    TD c_a = rand_t({2, 64, d}, 2);
    TD sep = rand_t({1, 1, d}, 3);
    TD out = augment(e_t, c_a, sep);
    REQUIRE(out.shape() == Shape{2, 72, d});  // 7 + 1 + 32 + 32

    CHECK(slice(out, 1, 0, L_t).values() == e_t.values());
    CHECK(slice(out, 1, L_t + 1, 64).values() == c_a.values());
    TD sep_rows = slice(out, 1, L_t, 1);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t j = 0; j < d; ++j)
            CHECK(sep_rows.values()[static_cast<size_t>(b * d + j)] == sep.values()[static_cast<size_t>(j)]);
}

TEST_CASE("augment with empty context degenerates to text plus separator", "[injection]") {
    int64_t d = 16, L_t = 5;
    TD e_t = rand_t({1, L_t, d}, 4);
    TD c_a = TD::zeros({1, 0, d});
    TD sep = rand_t({1, 1, d}, 5);
    TD out = augment(e_t, c_a, sep);
    CHECK(out.shape() == Shape{1, L_t + 1, d});
    CHECK(slice(out, 1, 0, L_t).values() == e_t.values());
}

TEST_CASE("augment rejects width mismatches", "[injection]") {
    TD e_t = rand_t({1, 3, 8}, 6);
    TD c_a = rand_t({1, 2, 10}, 7);
    TD sep = rand_t({1, 1, 8}, 8);
    CHECK_THROWS_AS(augment(e_t, c_a, sep), ShapeError);
}

TEST_CASE("double wrapping is a configuration error", "[injection]") {
    Rig rig(desk_config());
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    CHECK_THROWS_AS(wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache), ConfigError);
}

TEST_CASE("wrapping becomes inert when the cross-attention value path is zeroed", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    for (int64_t i = 0; i < cfg.student.blocks; ++i) {
        auto& blk = rig.student.block(i);
        std::fill(blk.cross_attn.w_v.mutable_values().begin(), blk.cross_attn.w_v.mutable_values().end(), 0.0);
        std::fill(blk.cross_attn.b_v.mutable_values().begin(), blk.cross_attn.b_v.mutable_values().end(), 0.0);
    }
    auto obs = make_obs(cfg, 1);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 11);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 12);
    TD sig = TD::from_vector({1}, {2.5});

    auto [v_plain, a_plain] = rig.student.denoise(nv, na, sig, obs.e_t);
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    auto res = wrapped.denoise(obs, nv, na, sig);
    CHECK(res.v_hat.values() == v_plain.values());
    CHECK(res.a_hat.values() == a_plain.values());
}

TEST_CASE("ten denoise steps of one observation run the teacher once", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    auto obs = make_obs(cfg, 2);
    rig.teacher.reset_counters();
    rig.cache.reset_counters();
    sample_trajectory(wrapped, obs, 10, 8.0, 0.05, 99);
    CHECK(rig.teacher.forward_calls() == 1);
    CHECK(rig.cache.hits() == 9);
    CHECK(rig.cache.misses() == 1);
}

TEST_CASE("a second build for the same observation id is skipped", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    auto obs = make_obs(cfg, 3);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 13);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 14);
    TD sig = TD::from_vector({1}, {1.0});
    rig.bank.reset_counters();
    auto r1 = wrapped.denoise(obs, nv, na, sig);
    auto r2 = wrapped.denoise(obs, nv, na, sig);
    CHECK(rig.bank.build_calls() == 1);
    CHECK(r1.c_a.values() == r2.c_a.values());
}

TEST_CASE("denoise output is invariant to conditioning permutations", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    auto obs = make_obs(cfg, 4);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 15);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 16);
    TD sig = TD::from_vector({1}, {3.0});
    auto base = wrapped.denoise(obs, nv, na, sig);
    int64_t L = base.cond.dim(1);
    RngStream rng(7, 0, 0);
    std::vector<int64_t> perm(static_cast<size_t>(L));
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 10; ++trial) {
        for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.next_u64() % i]);
        auto [v_p, a_p] = rig.student.denoise(nv, na, sig, permute_rows(base.cond, perm));
        CHECK(testutil::max_abs_diff_t(base.v_hat, v_p) < 1e-10);
        CHECK(testutil::max_abs_diff_t(base.a_hat, a_p) < 1e-10);
    }
}

TEST_CASE("rotary phase tables are bitwise identical with and without injection", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    auto obs = make_obs(cfg, 5);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 17);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 18);

    PhaseRecorder<double> plain_rec;
    rig.student.set_phase_recorder(&plain_rec);
    for (double s : {0.1, 0.5, 1.0, 2.0, 8.0})
        rig.student.denoise(nv, na, TD::from_vector({1}, {s}), obs.e_t);
    rig.student.set_phase_recorder(nullptr);

    PhaseRecorder<double> wrapped_rec;
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    rig.student.set_phase_recorder(&wrapped_rec);
    for (double s : {0.1, 0.5, 1.0, 2.0, 8.0})
        wrapped.denoise(obs, nv, na, TD::from_vector({1}, {s}));
    rig.student.set_phase_recorder(nullptr);

    REQUIRE(plain_rec.tables.size() == wrapped_rec.tables.size());
    for (size_t i = 0; i < plain_rec.tables.size(); ++i)
        CHECK(std::memcmp(plain_rec.tables[i].data(), wrapped_rec.tables[i].data(),
                          plain_rec.tables[i].size() * sizeof(double)) == 0);
}

TEST_CASE("denoise output responds to context perturbations", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    auto obs = make_obs(cfg, 6);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 19);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 20);
    TD sig = TD::from_vector({1}, {1.5});
    auto base = wrapped.denoise(obs, nv, na, sig);
    TD bumped = base.c_a.clone();
    for (auto& v : bumped.mutable_values()) v += 0.1;
    auto [v_p, a_p] = rig.student.denoise(nv, na, sig, augment(obs.e_t, bumped, rig.bank.separator()));
    CHECK(testutil::max_abs_diff_t(base.v_hat, v_p) > 0.0);
    CHECK(testutil::max_abs_diff_t(base.a_hat, a_p) > 0.0);
}

TEST_CASE("cross-attention cost is affine in the conditioning length", "[injection]") {
    RunConfig cfg = desk_config();
    Rig rig(cfg);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 21);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 22);
    TD sig = TD::from_vector({1}, {1.0});
    auto cost_at = [&](int64_t L) {
        TD cond = rand_t({1, L, cfg.student.d}, 100 + static_cast<uint64_t>(L));
        rig.student.attention_log().reset();
        rig.student.denoise(nv, na, sig, cond);
        return rig.student.attention_log().cross_attn_mults;
    };
    uint64_t c1 = cost_at(16), c2 = cost_at(32), c3 = cost_at(48);
    CHECK(c2 > c1);
    CHECK(c3 - c2 == c2 - c1);  // exactly affine in the conditioning length
    // and far below a quadratic blowup of the visual sequence
    uint64_t quadratic = static_cast<uint64_t>(cfg.student.seq_len() + 2 * 48) *
                         static_cast<uint64_t>(cfg.student.seq_len() + 2 * 48) *
                         static_cast<uint64_t>(cfg.student.d) * static_cast<uint64_t>(cfg.student.blocks);
    CHECK(c3 < quadratic);
}

TEST_CASE("backward through a wrapped denoise reaches only adapter parameters", "[injection]") {
    RunConfig cfg = desk_config();
    cfg.ckt.dropout = 0.0;
    Rig rig(cfg);
    // Fresh init keeps the expert up-projections at zero, which legitimately
    // kills some gradient paths; randomize so every pathway is live.
    RngStream prng(55, 0, 0);
    for (auto& [name, t] : rig.bank.named_params())
        for (auto& v : t->mutable_values()) v = prng.gaussian() * 0.2;
    auto wrapped = wrap_text_projection(rig.teacher, rig.student, rig.bank, rig.cache);
    auto obs = make_obs(cfg, 7);
    TD nv = rand_t({1, cfg.student.video_len(), cfg.student.video_dim}, 23);
    TD na = rand_t({1, cfg.student.action_len, cfg.student.action_dim}, 24);
    TD sig = TD::from_vector({1}, {2.0});
    Tape<double> tape;
    TransferredContext<double> kept;
    RoutingRecord<double> routing;
    {
        Tape<double>::Scope scope(tape);
        auto res = wrapped.denoise(obs, nv, na, sig, true, {11, 0});
        routing = res.routing;
        tape.backward(add(sum_all(mul(res.v_hat, res.v_hat)), sum_all(mul(res.a_hat, res.a_hat))));
    }
    const auto& sel = routing.selected[0];
    for (auto& [name, t] : rig.bank.named_params()) {
        bool is_expert = name.rfind("specialized.", 0) == 0;
        bool selected_expert = false;
        for (int64_t m : sel)
            if (name.rfind("specialized." + std::to_string(m) + ".", 0) == 0) selected_expert = true;
        INFO(name);
        if (is_expert && !selected_expert) {
            CHECK_FALSE(t->has_grad());
            continue;
        }
        REQUIRE(t->has_grad());
        double norm = 0;
        for (double g : t->grad()) norm += g * g;
        CHECK(norm > 0);
    }
    std::vector<const Tensor<double>*> frozen;
    rig.student.collect_params(frozen);
    rig.teacher.collect_params(frozen);
    for (const auto* p : frozen) CHECK_FALSE(p->has_grad());
}

TEST_CASE("cache evicts least recently used entries at capacity", "[injection]") {
    ContextCache<double> cache(2);
    cache.insert(1);
    cache.insert(2);
    CHECK(cache.find(1) != nullptr);
    cache.insert(3);  // evicts 2 (1 was just touched)
    CHECK(cache.find(2) == nullptr);
    CHECK(cache.find(1) != nullptr);
    CHECK(cache.find(3) != nullptr);
    CHECK(cache.size() == 2);
}

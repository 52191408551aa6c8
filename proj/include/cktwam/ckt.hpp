// SPDX-License-Identifier: Apache-2.0
//
// The trainable transfer module: a shared bottleneck trunk projects teacher
// hidden states into the student width, learnable-query cross-attention
// compresses them to fixed-length generalized/specialized contexts, an
// always-on residual adapter refines the generalized branch, and a router
// sparsely mixes top-k residual experts on the specialized branch. These are
// the only trainable tensors in the whole system.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cktwam/config.hpp"
#include "cktwam/tensor.hpp"

namespace cktwam {

/// Keys the per-call random streams of one training step.
struct StepKey {
    uint64_t seed = 0;
    uint64_t step = 0;
};

namespace rng_op {
constexpr uint64_t kTrunkDropout = 1;
constexpr uint64_t kRouterNoise = 2;
constexpr uint64_t kSigma = 3;
constexpr uint64_t kVideoNoise = 4;
constexpr uint64_t kActionNoise = 5;
constexpr uint64_t kBatchSample = 6;
}  // namespace rng_op

template <typename T>
struct RoutingRecord {
    Tensor<T> probs;                              // [B, M], rows sum to 1
    std::vector<std::vector<int64_t>> selected;   // per-instance top-k, ties -> lowest index
    Tensor<T> renorm_weights;                     // [B, k], rows sum to 1 over the selection
    Tensor<T> pooled;                             // [B, d_tea]
};

template <typename T>
struct TransferredContext {
    Tensor<T> c_g;  // [B, K_g, d_stu]
    Tensor<T> c_s;  // [B, K_s, d_stu]
    Tensor<T> c_a;  // [B, K_g + K_s, d_stu]
    RoutingRecord<T> routing;
    std::vector<int64_t> executed_per_instance;
};

template <typename T>
class AdapterBank {
public:
    explicit AdapterBank(const CktConfig& cfg) : cfg_(cfg), expert_exec_counts_(cfg.m, 0) {
        RngStream rng(cfg.seed, 0xcc7, 0);
        auto gauss = [&](Shape s) { return randn<T>(std::move(s), rng, T(0.02), true); };
        auto zero = [&](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
        w_down_ = gauss({cfg.d_tea, cfg.d_b});
        b_down_ = zero({cfg.d_b});
        w_up_ = gauss({cfg.d_b, cfg.d_stu});
        b_up_ = zero({cfg.d_stu});
        ln_g_ = Tensor<T>::full({cfg.d_stu}, T(1)).set_requires_grad(true);
        ln_b_ = zero({cfg.d_stu});
        q_g_ = gauss({1, cfg.k_g, cfg.d_stu});
        q_s_ = gauss({1, cfg.k_s, cfg.d_stu});
        kv_w_k_ = gauss({cfg.d_stu, cfg.d_stu});
        kv_w_v_ = gauss({cfg.d_stu, cfg.d_stu});
        mhca_ = {gauss({cfg.d_stu, cfg.d_stu}), zero({cfg.d_stu}), gauss({cfg.d_stu, cfg.d_stu}),
                 zero({cfg.d_stu}),             gauss({cfg.d_stu, cfg.d_stu}), zero({cfg.d_stu}),
                 gauss({cfg.d_stu, cfg.d_stu}), zero({cfg.d_stu})};
        post_ln_g_ = Tensor<T>::full({cfg.d_stu}, T(1)).set_requires_grad(true);
        post_ln_b_ = zero({cfg.d_stu});
        gen_down_ = gauss({cfg.d_stu, cfg.r_g});
        gen_up_ = zero({cfg.r_g, cfg.d_stu});  // starts as identity over the compressed context
        experts_.reserve(static_cast<size_t>(cfg.m));
        for (int64_t m = 0; m < cfg.m; ++m)
            experts_.push_back({gauss({cfg.d_stu, cfg.r_s}), zero({cfg.r_s, cfg.d_stu})});
        // fan-in scaling keeps the two-layer gate out of the vanishing-signal
        // regime that a flat 0.02 init would put it in
        router_w1_ = randn<T>({cfg.d_tea, cfg.d_gate}, rng,
                              static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_tea))), true);
        router_b1_ = zero({cfg.d_gate});
        router_w2_ = randn<T>({cfg.d_gate, cfg.m}, rng,
                              static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_gate))), true);
        router_b2_ = zero({cfg.m});
        // softplus(-0.87) ~= 0.35: moderate logit noise at initialization
        noise_scale_ = Tensor<T>::from_vector({1}, {T(-0.87)}, true);
        sep_ = gauss({1, 1, cfg.d_stu});
    }

    const CktConfig& config() const { return cfg_; }
    const Tensor<T>& separator() const { return sep_; }
    Tensor<T>& separator() { return sep_; }
    Tensor<T>& router_output_weight() { return router_w2_; }
    Tensor<T>& router_output_bias() { return router_b2_; }
    Tensor<T>& noise_scale() { return noise_scale_; }
    std::pair<Tensor<T>&, Tensor<T>&> expert(int64_t m) {
        return {experts_[static_cast<size_t>(m)].first, experts_[static_cast<size_t>(m)].second};
    }
    Tensor<T>& generalized_up() { return gen_up_; }

    /// Teacher states -> student width through the shared bottleneck trunk.
    Tensor<T> shared_project(const Tensor<T>& h_t, bool train_mode, StepKey key) const {
        if (h_t.rank() != 3 || h_t.dim(2) != cfg_.d_tea)
            throw ConfigError("shared_project: expected [B,N," + std::to_string(cfg_.d_tea) +
                              "], got " + shape_str(h_t.shape()));
        ++shared_project_calls_;
        Tensor<T> mid = matmul(gelu(linear(h_t, w_down_, b_down_)), w_up_);
        Tensor<T> normed = layer_norm(add(mid, b_up_), ln_g_, ln_b_, T(1e-5));
        return dropout(normed, cfg_.dropout, train_mode,
                       RngStream(key.seed, rng_op::kTrunkDropout, key.step));
    }

    enum class Branch { generalized, specialized };

    /// Fixed-size learnable-query compression of the projected sequence. Both
    /// branches share the key/value projections and attention weights; only
    /// the query bank differs.
    Tensor<T> compress(const Tensor<T>& z, Branch branch) const {
        int64_t B = z.dim(0);
        const Tensor<T>& bank = branch == Branch::generalized ? q_g_ : q_s_;
        (branch == Branch::generalized ? compress_calls_g_ : compress_calls_s_)++;
        Tensor<T> queries = broadcast_to(bank, {B, bank.dim(1), cfg_.d_stu});
        Tensor<T> keys = matmul(z, kv_w_k_);
        Tensor<T> vals = matmul(z, kv_w_v_);
        Tensor<T> attended = multi_head_attention(queries, keys, vals, mhca_, cfg_.heads);
        return layer_norm(add(attended, queries), post_ln_g_, post_ln_b_, T(1e-5));
    }

    /// Always-on residual bottleneck over the generalized context.
    Tensor<T> generalized_adapter(const Tensor<T>& c_g0) const {
        ++generalized_exec_count_;
        return add(c_g0, matmul(gelu(matmul(c_g0, gen_down_)), gen_up_));
    }

    /// Mean-pools the raw teacher states, scores all experts, keeps the top-k
    /// per instance (ties break to the lowest index) and renormalizes their
    /// probabilities. Train mode adds learnable-scale Gaussian noise to the
    /// logits before the softmax.
    RoutingRecord<T> route(const Tensor<T>& h_t, bool train_mode, StepKey key) const {
        int64_t B = h_t.dim(0);
        RoutingRecord<T> rec;
        rec.pooled = mean_pool(h_t, 1);
        Tensor<T> logits = linear(gelu(linear(rec.pooled, router_w1_, router_b1_)), router_w2_,
                                  router_b2_);
        if (train_mode) {
            RngStream noise_rng(key.seed, rng_op::kRouterNoise, key.step);
            Tensor<T> eps = randn<T>({B, cfg_.m}, noise_rng);
            logits = add(logits, mul(eps, softplus(noise_scale_)));
        }
        rec.probs = softmax(logits, -1);
        rec.selected.resize(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) {
            std::vector<int64_t> order(static_cast<size_t>(cfg_.m));
            std::iota(order.begin(), order.end(), 0);
            const T* row = rec.probs.data() + b * cfg_.m;
            std::stable_sort(order.begin(), order.end(),
                             [row](int64_t a, int64_t c) { return row[a] > row[c]; });
            order.resize(static_cast<size_t>(cfg_.k));
            rec.selected[static_cast<size_t>(b)] = std::move(order);
        }
        Tensor<T> gathered = gather_cols(rec.probs, rec.selected);
        Tensor<T> denom = sum_axis(gathered, -1, true);
        rec.renorm_weights = div(gathered, denom);
        return rec;
    }

    /// Weighted sparse mixture of the selected residual experts. Experts
    /// outside every selection set are never evaluated.
    Tensor<T> specialized_mix(const Tensor<T>& c_s0, const RoutingRecord<T>& routing) const {
        int64_t B = c_s0.dim(0);
        std::vector<Tensor<T>> rows;
        rows.reserve(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) {
            Tensor<T> x_b = slice(c_s0, 0, b, 1);
            Tensor<T> acc;
            const auto& sel = routing.selected[static_cast<size_t>(b)];
            for (size_t j = 0; j < sel.size(); ++j) {
                int64_t m = sel[j];
                const auto& [w_down, w_up] = experts_[static_cast<size_t>(m)];
                ++expert_exec_counts_[static_cast<size_t>(m)];
                Tensor<T> e_out = add(x_b, matmul(gelu(matmul(x_b, w_down)), w_up));
                Tensor<T> weight = reshape(
                    slice(slice(routing.renorm_weights, 0, b, 1), 1, static_cast<int64_t>(j), 1), {1});
                Tensor<T> contrib = mul(e_out, weight);
                acc = acc.defined() ? add(acc, contrib) : contrib;
            }
            rows.push_back(acc);
        }
        return concat(rows, 0);
    }

    /// Full pipeline: project once, compress both branches from the same
    /// projection, refine, route, mix, concatenate.
    TransferredContext<T> build_context(const Tensor<T>& h_t, bool train_mode, StepKey key) const {
        ++build_calls_;
        Tensor<T> z = shared_project(h_t, train_mode, key);
        Tensor<T> c_g0 = compress(z, Branch::generalized);
        Tensor<T> c_s0 = compress(z, Branch::specialized);
        TransferredContext<T> out;
        out.c_g = generalized_adapter(c_g0);
        out.routing = route(h_t, train_mode, key);
        out.c_s = specialized_mix(c_s0, out.routing);
        out.c_a = concat<T>({out.c_g, out.c_s}, 1);
        out.executed_per_instance.assign(out.routing.selected.size(), 0);
        for (size_t b = 0; b < out.routing.selected.size(); ++b)
            out.executed_per_instance[b] = static_cast<int64_t>(out.routing.selected[b].size());
        return out;
    }

    /// Canonical (name, tensor) listing of every trainable parameter.
    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out = {
            {"trunk.w_down", &w_down_},
            {"trunk.b_down", &b_down_},
            {"trunk.w_up", &w_up_},
            {"trunk.b_up", &b_up_},
            {"trunk.ln_g", &ln_g_},
            {"trunk.ln_b", &ln_b_},
            {"queries.generalized", &q_g_},
            {"queries.specialized", &q_s_},
            {"compressor.w_k", &kv_w_k_},
            {"compressor.w_v", &kv_w_v_},
            {"compressor.attn.w_q", &mhca_.w_q},
            {"compressor.attn.b_q", &mhca_.b_q},
            {"compressor.attn.w_k", &mhca_.w_k},
            {"compressor.attn.b_k", &mhca_.b_k},
            {"compressor.attn.w_v", &mhca_.w_v},
            {"compressor.attn.b_v", &mhca_.b_v},
            {"compressor.attn.w_o", &mhca_.w_o},
            {"compressor.attn.b_o", &mhca_.b_o},
            {"compressor.post_ln_g", &post_ln_g_},
            {"compressor.post_ln_b", &post_ln_b_},
            {"generalized.w_down", &gen_down_},
            {"generalized.w_up", &gen_up_},
        };
        for (size_t m = 0; m < experts_.size(); ++m) {
            out.emplace_back("specialized." + std::to_string(m) + ".w_down", &experts_[m].first);
            out.emplace_back("specialized." + std::to_string(m) + ".w_up", &experts_[m].second);
        }
        out.emplace_back("router.w1", &router_w1_);
        out.emplace_back("router.b1", &router_b1_);
        out.emplace_back("router.w2", &router_w2_);
        out.emplace_back("router.b2", &router_b2_);
        out.emplace_back("router.noise_scale", &noise_scale_);
        out.emplace_back("sep", &sep_);
        return out;
    }

    std::vector<std::pair<std::string, const Tensor<T>*>> named_params() const {
        auto mut = const_cast<AdapterBank*>(this)->named_params();
        std::vector<std::pair<std::string, const Tensor<T>*>> out;
        out.reserve(mut.size());
        for (auto& [n, t] : mut) out.emplace_back(n, t);
        return out;
    }

    // Execution counters (cumulative; reset explicitly in tests).
    uint64_t shared_project_calls() const { return shared_project_calls_; }
    uint64_t compress_calls_generalized() const { return compress_calls_g_; }
    uint64_t compress_calls_specialized() const { return compress_calls_s_; }
    uint64_t generalized_exec_count() const { return generalized_exec_count_; }
    const std::vector<uint64_t>& expert_exec_counts() const { return expert_exec_counts_; }
    uint64_t build_calls() const { return build_calls_; }
    void reset_counters() const {
        shared_project_calls_ = compress_calls_g_ = compress_calls_s_ = 0;
        generalized_exec_count_ = build_calls_ = 0;
        std::fill(expert_exec_counts_.begin(), expert_exec_counts_.end(), 0);
    }

private:
    CktConfig cfg_;
    Tensor<T> w_down_, b_down_, w_up_, b_up_, ln_g_, ln_b_;
    Tensor<T> q_g_, q_s_;
    Tensor<T> kv_w_k_, kv_w_v_;
    AttentionParams<T> mhca_;
    Tensor<T> post_ln_g_, post_ln_b_;
    Tensor<T> gen_down_, gen_up_;
    std::vector<std::pair<Tensor<T>, Tensor<T>>> experts_;  // (w_down, w_up) per expert
    Tensor<T> router_w1_, router_b1_, router_w2_, router_b2_, noise_scale_;
    Tensor<T> sep_;

    mutable uint64_t shared_project_calls_ = 0;
    mutable uint64_t compress_calls_g_ = 0;
    mutable uint64_t compress_calls_s_ = 0;
    mutable uint64_t generalized_exec_count_ = 0;
    mutable std::vector<uint64_t> expert_exec_counts_;
    mutable uint64_t build_calls_ = 0;
};

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

/// Two accounting conventions. `paper_table` replicates the published budget
/// breakdown, where each of the M+1 branches is billed for its own copy of
/// the trunk + query bank + compressor bundle and the low-rank refinements
/// are left out. `structural` counts the tensors this implementation actually
/// instantiates (shared trunk and compressor, per-expert low-rank weights,
/// separator token).
enum class CountMode { paper_table, structural };

struct ParamCountReport {
    std::vector<std::pair<std::string, int64_t>> components;
    int64_t per_branch = 0;  // paper_table mode: one branch bundle
    int64_t generalized = 0;
    int64_t specialized_total = 0;
    int64_t router = 0;
    int64_t bank_total = 0;
    int64_t p_train = 0;
    int64_t p_active = 0;
};

inline ParamCountReport count_params(const CktConfig& cfg, CountMode mode) {
    ParamCountReport r;
    int64_t trunk_down = cfg.d_tea * cfg.d_b + cfg.d_b;
    int64_t trunk_up = cfg.d_b * cfg.d_stu + cfg.d_stu;
    int64_t trunk_ln = 2 * cfg.d_stu;
    int64_t attn = 4 * (cfg.d_stu * cfg.d_stu + cfg.d_stu);
    int64_t post_ln = 2 * cfg.d_stu;
    int64_t router = (cfg.d_tea * cfg.d_gate + cfg.d_gate) + (cfg.d_gate * cfg.m + cfg.m) + 1;
    r.router = router;
    if (mode == CountMode::paper_table) {
        auto branch = [&](int64_t k_tokens) {
            return trunk_down + trunk_up + trunk_ln + k_tokens * cfg.d_stu + attn + post_ln;
        };
        int64_t branch_g = branch(cfg.k_g);
        int64_t branch_s = branch(cfg.k_s);
        r.per_branch = branch_s;
        r.components = {{"down_proj", trunk_down},      {"up_proj", trunk_up},
                        {"layer_norm", trunk_ln},       {"query_tokens", cfg.k_s * cfg.d_stu},
                        {"cross_attn", attn},           {"post_attn_norm", post_ln}};
        r.generalized = branch_g;
        r.specialized_total = cfg.m * branch_s;
        r.bank_total = r.generalized + r.specialized_total + router;
        r.p_train = r.bank_total;
        r.p_active = branch_g + cfg.k * branch_s + router;
    } else {
        int64_t trunk = trunk_down + trunk_up + trunk_ln;
        int64_t queries = (cfg.k_g + cfg.k_s) * cfg.d_stu;
        int64_t kv_pre = 2 * cfg.d_stu * cfg.d_stu;
        int64_t gen = 2 * cfg.d_stu * cfg.r_g;
        int64_t spec_each = 2 * cfg.d_stu * cfg.r_s;
        int64_t sep = cfg.d_stu;
        r.components = {{"trunk", trunk},
                        {"query_banks", queries},
                        {"compressor_kv", kv_pre},
                        {"compressor_attn", attn},
                        {"post_attn_norm", post_ln},
                        {"generalized_adapter", gen},
                        {"specialized_adapters", cfg.m * spec_each},
                        {"router", router},
                        {"separator", sep}};
        r.generalized = gen;
        r.specialized_total = cfg.m * spec_each;
        r.bank_total = trunk + queries + kv_pre + attn + post_ln + gen + cfg.m * spec_each +
                       router + sep;
        r.p_train = r.bank_total;
        r.p_active = r.bank_total - (cfg.m - cfg.k) * spec_each;
    }
    return r;
}

}  // namespace cktwam

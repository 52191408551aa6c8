// SPDX-License-Identifier: Apache-2.0
//
// Runnable validation suites: the geometry/caching/flow invariant checks and
// a finite-difference sweep of the full training objective over every
// trainable tensor. Both are consumed by the CLI and the acceptance tests.
#pragma once

#include <cstring>
#include <numeric>
#include <sstream>

#include "cktwam/training.hpp"

namespace cktwam {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

template <typename T>
Tensor<T> permute_token_rows(const Tensor<T>& x, const std::vector<int64_t>& perm) {
    int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t j = 0; j < d; ++j)
                out.mutable_values()[static_cast<size_t>((b * L + l) * d + j)] =
                    x.values()[static_cast<size_t>((b * L + perm[static_cast<size_t>(l)]) * d + j)];
    return out;
}

}  // namespace detail

/// Runs the invariance suite on a small randomized model built from `cfg`
/// (always in 64-bit): rotary-table equality under injection, conditioning
/// order invariance, one-directional conditioning flow, single-pass teacher
/// amortization, and the frozen-parameter hash across a short training run.
inline std::vector<CheckResult> run_invariant_suite(const RunConfig& cfg_in, int64_t permutations = 20) {
    using T = double;
    RunConfig cfg = cfg_in;
    cfg.precision = "f64";
    std::vector<CheckResult> results;

    Teacher<T> teacher(cfg.teacher);
    Student<T> student(cfg.student);
    AdapterBank<T> bank(cfg.ckt);
    ContextCache<T> cache;
    auto wrapped = wrap_text_projection(teacher, student, bank, cache);

    RngStream rng(cfg.seed, 0xd1a9, 0);
    Observation<T> obs;
    obs.x_img = randn<T>({1, cfg.teacher.n_img, cfg.teacher.d}, rng);
    obs.x_text = randn<T>({1, cfg.teacher.n_text, cfg.teacher.d}, rng);
    obs.e_t = randn<T>({1, cfg.student.text_len, cfg.student.d}, rng);
    obs.id = observation_id_from_bytes(obs);
    Tensor<T> nv = randn<T>({1, cfg.student.video_len(), cfg.student.video_dim}, rng);
    Tensor<T> na = randn<T>({1, cfg.student.action_len, cfg.student.action_dim}, rng);
    const std::vector<double> timesteps = {0.1, 0.5, 1.0, 2.0, 8.0};

    {  // rotary phase tables, with and without injected context, bitwise
        PhaseRecorder<T> plain, augmented;
        student.set_phase_recorder(&plain);
        for (double s : timesteps) student.denoise(nv, na, Tensor<T>::full({1}, s), obs.e_t);
        student.set_phase_recorder(&augmented);
        for (double s : timesteps) wrapped.denoise(obs, nv, na, Tensor<T>::full({1}, s));
        student.set_phase_recorder(nullptr);
        bool ok = plain.tables.size() == augmented.tables.size() && !plain.tables.empty();
        for (size_t i = 0; ok && i < plain.tables.size(); ++i)
            ok = plain.tables[i].size() == augmented.tables[i].size() &&
                 std::memcmp(plain.tables[i].data(), augmented.tables[i].data(),
                             plain.tables[i].size() * sizeof(T)) == 0;
        results.push_back({"rope_bitwise", ok,
                           std::to_string(plain.tables.size()) + " tables compared across " +
                               std::to_string(timesteps.size()) + " timesteps"});
    }

    {  // conditioning order invariance
        Tensor<T> sig = Tensor<T>::full({1}, T(1.7));
        auto base = wrapped.denoise(obs, nv, na, sig);
        int64_t L = base.cond.dim(1);
        std::vector<int64_t> perm(static_cast<size_t>(L));
        std::iota(perm.begin(), perm.end(), 0);
        double worst = 0;
        RngStream prng(cfg.seed, 0x9e12, 1);
        for (int64_t t = 0; t < permutations; ++t) {
            for (size_t i = perm.size(); i > 1; --i)
                std::swap(perm[i - 1], perm[prng.next_u64() % i]);
            auto [v_p, a_p] = student.denoise(nv, na, sig, detail::permute_token_rows(base.cond, perm));
            for (size_t i = 0; i < v_p.values().size(); ++i)
                worst = std::max(worst, std::abs(v_p.values()[i] - base.v_hat.values()[i]));
            for (size_t i = 0; i < a_p.values().size(); ++i)
                worst = std::max(worst, std::abs(a_p.values()[i] - base.a_hat.values()[i]));
        }
        std::ostringstream os;
        os << "max abs deviation " << worst << " over " << permutations << " permutations";
        results.push_back({"order_invariance", worst < 1e-10, os.str()});
    }

    {  // conditioning reaches attention only as keys/values
        student.attention_log().reset();
        Tensor<T> sig = Tensor<T>::full({1}, T(0.9));
        auto res = wrapped.denoise(obs, nv, na, sig);
        const auto& log = student.attention_log();
        bool ok = !log.cross_attn.empty();
        for (const auto& [q_id, kv_id] : log.cross_attn) ok = ok && q_id != res.cond.id() && kv_id == res.cond.id();
        for (const auto& [q_id, kv_id] : log.self_attn) ok = ok && q_id != res.cond.id() && kv_id != res.cond.id();
        results.push_back({"one_directional_flow", ok,
                           std::to_string(log.cross_attn.size()) + " cross-attention calls checked"});
    }

    {  // teacher runs once per observation across a denoising trajectory
        Observation<T> fresh = obs;
        fresh.id = obs.id ^ 0x517;
        teacher.reset_counters();
        cache.reset_counters();
        sample_trajectory(wrapped, fresh, 10, 8.0, 0.05, cfg.seed + 1);
        bool ok = teacher.forward_calls() == 1 && cache.hits() == 9 && cache.misses() == 1;
        std::ostringstream os;
        os << teacher.forward_calls() << " teacher forward(s), " << cache.hits() << " cache hits, "
           << cache.misses() << " miss(es) over 10 steps";
        results.push_back({"single_teacher_pass", ok, os.str()});
    }

    {  // frozen hash across a short optimization
        RunConfig small = cfg;
        small.train.steps = 5;
        small.train.batch_size = 2;
        small.train.checkpoint_interval = 5;
        small.out_dir = (std::filesystem::temp_directory_path() / "cktwam_invariant_run").string();
        TrainSession<T> session(small);
        uint64_t before = session.frozen_hash();
        auto report = session.run(nullptr);
        bool ok = report.frozen_ok && session.frozen_hash() == before;
        results.push_back({"frozen_hash", ok, "hash stable across a 5-step optimization"});
    }

    return results;
}

// ---------------------------------------------------------------------------
// Full-objective gradient check
// ---------------------------------------------------------------------------

struct GradcheckReport {
    double max_rel_err = 0;
    std::string worst_param;
    int64_t entries_checked = 0;
    bool pass = false;
};

/// Central finite differences of the total objective against the reverse-mode
/// gradient for every trainable tensor. Runs in 64-bit with dropout forced to
/// zero (the routing noise stays on: its counter-keyed draws make the loss a
/// deterministic, differentiable function of the parameters). Relative errors
/// use an absolute floor of 1e-4 so FD roundoff on near-zero entries is not
/// misread as a mismatch.
inline GradcheckReport run_gradcheck(const RunConfig& cfg_in, double h = 1e-5, double tol = 1e-4,
                                     bool inject_gelu_fault = false) {
    using T = double;
    RunConfig cfg = cfg_in;
    cfg.precision = "f64";
    cfg.ckt.dropout = 0.0;
    cfg.train.batch_size = std::min<int64_t>(cfg.train.batch_size, 2);

    Teacher<T> teacher(cfg.teacher);
    Student<T> student(cfg.student);
    AdapterBank<T> bank(cfg.ckt);
    // Randomize so the zero-initialized up-projections do not hide paths.
    RngStream prng(cfg.seed, 0x96ad, 0);
    for (auto& [name, t] : bank.named_params())
        for (auto& v : t->mutable_values()) v = prng.gaussian() * 0.2;
    ContextCache<T> cache;
    auto wrapped = wrap_text_projection(teacher, student, bank, cache);
    StagedTask<T> task(cfg, student);
    Batch<T> batch = task.make_batch(0);
    NoiseSchedule<T> sched;
    sched.p_mean = cfg.train.p_mean;
    sched.p_std = cfg.train.p_std;
    StepKey key{cfg.seed, 0};

    auto loss_value = [&] {
        return static_cast<double>(
            step_losses(batch, wrapped, sched, cfg.train.lambda_vid, cfg.train.lambda_bal, true, key)
                .total.item());
    };

    for (auto& [name, t] : bank.named_params()) t->clear_grad();
    Tape<T> tape;
    {
        typename Tape<T>::Scope scope(tape);
        auto losses = step_losses(batch, wrapped, sched, cfg.train.lambda_vid, cfg.train.lambda_bal,
                                  true, key);
        if (inject_gelu_fault) debug::gelu_backward_fault() = true;
        tape.backward(losses.total);
        debug::gelu_backward_fault() = false;
    }

    GradcheckReport report;
    for (auto& [name, t] : bank.named_params()) {
        for (size_t i = 0; i < t->values().size(); ++i) {
            double analytic = t->has_grad() ? static_cast<double>(t->grad()[i]) : 0.0;
            auto& vals = t->mutable_values();
            double orig = vals[i];
            vals[i] = orig + h;
            double fp = loss_value();
            vals[i] = orig - h;
            double fm = loss_value();
            vals[i] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            ++report.entries_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace cktwam

// SPDX-License-Identifier: Apache-2.0
//
// Student-side context injection: the transferred context is appended to the
// textual conditioning behind a separator token and reaches the frozen
// student only through cross-attention keys/values. A per-observation cache
// amortizes the teacher pass and context construction across denoising steps.
#pragma once

#include <list>
#include <unordered_map>
#include <utility>

#include "cktwam/backbones.hpp"
#include "cktwam/ckt.hpp"

namespace cktwam {

/// One environment observation: teacher-side tokens plus the student's
/// textual embedding. `id` keys the context cache (callers hash raw
/// observation bytes; see observation_id_from_bytes).
template <typename T>
struct Observation {
    uint64_t id = 0;
    Tensor<T> x_img;   // [1, N_img, d_tea]
    Tensor<T> x_text;  // [1, N_text, d_tea]
    Tensor<T> e_t;     // [1, L_t, d_stu]
};

template <typename T>
uint64_t observation_id_from_bytes(const Observation<T>& obs) {
    uint64_t h = fnv1a64(obs.x_img.data(), obs.x_img.values().size() * sizeof(T));
    h = fnv1a64(obs.x_text.data(), obs.x_text.values().size() * sizeof(T), h);
    h = fnv1a64(obs.e_t.data(), obs.e_t.values().size() * sizeof(T), h);
    return h;
}

/// Appends [separator ; context] to the textual embeddings. No positional
/// encoding is applied; the fixed ordering is kept for deterministic layout.
template <typename T>
Tensor<T> augment(const Tensor<T>& e_t, const Tensor<T>& c_a, const Tensor<T>& sep) {
    if (e_t.dim(-1) != c_a.dim(-1) || e_t.dim(-1) != sep.dim(-1))
        throw ShapeError("augment: width mismatch between embeddings " + shape_str(e_t.shape()) +
                         ", context " + shape_str(c_a.shape()) + " and separator " +
                         shape_str(sep.shape()));
    int64_t B = e_t.dim(0);
    Tensor<T> sep_b = broadcast_to(sep, {B, 1, e_t.dim(-1)});
    return concat<T>({e_t, sep_b, c_a}, 1);
}

/// LRU cache of per-observation teacher states and transferred contexts.
/// The teacher entry lives for the whole run (the teacher never changes);
/// transferred contexts are dropped whenever the adapter parameters move.
template <typename T>
class ContextCache {
public:
    explicit ContextCache(size_t capacity = 64) : capacity_(capacity) {}

    struct Entry {
        TeacherContext<T> teacher;
        bool has_context = false;
        TransferredContext<T> context;
    };

    Entry* find(uint64_t id) {
        auto it = index_.find(id);
        if (it == index_.end()) return nullptr;
        lru_.splice(lru_.begin(), lru_, it->second);
        return &it->second->second;
    }

    Entry& insert(uint64_t id) {
        auto it = index_.find(id);
        if (it != index_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second);
            return it->second->second;
        }
        lru_.emplace_front(id, Entry{});
        index_[id] = lru_.begin();
        if (index_.size() > capacity_) {
            index_.erase(lru_.back().first);
            lru_.pop_back();
        }
        return lru_.front().second;
    }

    /// Drops cached contexts (not teacher states); call after optimizer steps.
    void invalidate_contexts() {
        for (auto& [id, entry] : lru_) entry.has_context = false;
    }

    uint64_t hits() const { return hits_; }
    uint64_t misses() const { return misses_; }
    void count_hit() { ++hits_; }
    void count_miss() { ++misses_; }
    void reset_counters() { hits_ = misses_ = 0; }
    size_t size() const { return index_.size(); }

private:
    size_t capacity_;
    std::list<std::pair<uint64_t, Entry>> lru_;
    std::unordered_map<uint64_t, typename std::list<std::pair<uint64_t, Entry>>::iterator> index_;
    uint64_t hits_ = 0;
    uint64_t misses_ = 0;
};

/// A student whose conditioning producer has been replaced by the augmented
/// version. The student's block code is untouched; this wrapper only swaps
/// what flows into the cross-attention K/V argument.
template <typename T>
class WrappedStudent {
public:
    struct DenoiseResult {
        Tensor<T> v_hat;
        Tensor<T> a_hat;
        Tensor<T> cond;  // the augmented conditioning actually used
        RoutingRecord<T> routing;
        Tensor<T> c_a;
    };

    WrappedStudent(const Teacher<T>& teacher, const Student<T>& student, const AdapterBank<T>& bank,
                   ContextCache<T>& cache)
        : teacher_(teacher), student_(student), bank_(bank), cache_(cache) {
        if (wrap_claims()[&student]) throw ConfigError("student conditioning is already wrapped");
        wrap_claims()[&student] = true;
    }
    ~WrappedStudent() { wrap_claims()[&student_] = false; }
    WrappedStudent(const WrappedStudent&) = delete;
    WrappedStudent& operator=(const WrappedStudent&) = delete;

    const Student<T>& student() const { return student_; }
    const AdapterBank<T>& bank() const { return bank_; }
    ContextCache<T>& cache() { return cache_; }

    /// Fetches or builds the cached context for one observation and denoises
    /// under the augmented conditioning. In train mode the context is rebuilt
    /// on the active tape (the cached teacher states are still reused); in
    /// eval mode both stages are cached.
    DenoiseResult denoise(const Observation<T>& obs, const Tensor<T>& noisy_video,
                          const Tensor<T>& noisy_action, const Tensor<T>& sigma,
                          bool train_mode = false, StepKey key = {}) const {
        auto& entry = cache_.insert(obs.id);
        if (!entry.teacher.hidden.defined())
            entry.teacher = teacher_.forward_extract(obs.x_img, obs.x_text,
                                                     teacher_.config().extract_layer, obs.id);
        TransferredContext<T> ctx;
        if (train_mode) {
            ctx = bank_.build_context(entry.teacher.hidden, true, key);
        } else if (entry.has_context) {
            cache_.count_hit();
            ctx = entry.context;
        } else {
            cache_.count_miss();
            ctx = bank_.build_context(entry.teacher.hidden, false, key);
            entry.context = ctx;
            entry.has_context = true;
        }
        DenoiseResult r;
        r.cond = augment(obs.e_t, ctx.c_a, bank_.separator());
        auto [v_hat, a_hat] = student_.denoise(noisy_video, noisy_action, sigma, r.cond);
        r.v_hat = v_hat;
        r.a_hat = a_hat;
        r.routing = ctx.routing;
        r.c_a = ctx.c_a;
        return r;
    }

    /// Batched variant for training: teacher states are fetched per
    /// observation (cached), stacked, and the context is built once for the
    /// whole batch on the active tape.
    DenoiseResult denoise_batch(const std::vector<Observation<T>>& observations,
                                const Tensor<T>& noisy_video, const Tensor<T>& noisy_action,
                                const Tensor<T>& sigma, bool train_mode, StepKey key) const {
        std::vector<Tensor<T>> hiddens, texts;
        hiddens.reserve(observations.size());
        texts.reserve(observations.size());
        for (const auto& obs : observations) {
            auto& entry = cache_.insert(obs.id);
            if (!entry.teacher.hidden.defined())
                entry.teacher = teacher_.forward_extract(obs.x_img, obs.x_text,
                                                         teacher_.config().extract_layer, obs.id);
            hiddens.push_back(entry.teacher.hidden);
            texts.push_back(obs.e_t);
        }
        Tensor<T> h_t = concat(hiddens, 0);
        TransferredContext<T> ctx = bank_.build_context(h_t, train_mode, key);
        DenoiseResult r;
        r.cond = augment(concat(texts, 0), ctx.c_a, bank_.separator());
        auto [v_hat, a_hat] = student_.denoise(noisy_video, noisy_action, sigma, r.cond);
        r.v_hat = v_hat;
        r.a_hat = a_hat;
        r.routing = ctx.routing;
        r.c_a = ctx.c_a;
        return r;
    }

private:
    // One wrap per student instance; a second claim is a configuration error.
    static std::unordered_map<const Student<T>*, bool>& wrap_claims() {
        thread_local std::unordered_map<const Student<T>*, bool> claims;
        return claims;
    }

    const Teacher<T>& teacher_;
    const Student<T>& student_;
    const AdapterBank<T>& bank_;
    ContextCache<T>& cache_;
};

/// Factory matching the wrapping contract; the student itself is untouched.
template <typename T>
WrappedStudent<T> wrap_text_projection(const Teacher<T>& teacher, const Student<T>& student,
                                       const AdapterBank<T>& bank, ContextCache<T>& cache) {
    return WrappedStudent<T>(teacher, student, bank, cache);
}

/// Simple first-order denoising trajectory over a geometric sigma ladder.
/// Exists to exercise the per-observation amortization contract; every step
/// re-reads the cached context.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> sample_trajectory(const WrappedStudent<T>& wrapped,
                                                  const Observation<T>& obs, int64_t steps,
                                                  double sigma_max, double sigma_min,
                                                  uint64_t seed) {
    const StudentConfig& cfg = wrapped.student().config();
    RngStream rng(seed, 0x5a117, 0);
    Tensor<T> v = randn<T>({1, cfg.video_len(), cfg.video_dim}, rng, static_cast<T>(sigma_max));
    Tensor<T> a = randn<T>({1, cfg.action_len, cfg.action_dim}, rng, static_cast<T>(sigma_max));
    for (int64_t i = 0; i < steps; ++i) {
        double s_cur = sigma_max * std::pow(sigma_min / sigma_max,
                                            static_cast<double>(i) / std::max<int64_t>(1, steps - 1));
        double s_next = i + 1 < steps
                            ? sigma_max * std::pow(sigma_min / sigma_max,
                                                   static_cast<double>(i + 1) /
                                                       std::max<int64_t>(1, steps - 1))
                            : 0.0;
        Tensor<T> sig = Tensor<T>::full({1}, static_cast<T>(s_cur));
        auto res = wrapped.denoise(obs, v, a, sig);
        double blend = s_cur == 0.0 ? 0.0 : s_next / s_cur;
        auto step_to = [&](const Tensor<T>& x, const Tensor<T>& x0) {
            return add(x0, scale(sub(x, x0), static_cast<T>(blend)));
        };
        v = step_to(v, res.v_hat);
        a = step_to(a, res.a_hat);
    }
    return {v, a};
}

}  // namespace cktwam

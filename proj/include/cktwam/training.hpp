// SPDX-License-Identifier: Apache-2.0
//
// Training objective and loop: log-normal noise sampling, noisy-latent
// construction, masked clean-target losses over both streams, the
// load-balancing regularizer, AdamW over the adapter bank, and a synthetic
// staged manipulation task whose clean targets depend on stage-specific maps
// of the teacher inputs (so routing has something to specialize on).
#pragma once

#include <functional>
#include <ostream>

#include "cktwam/checkpoint.hpp"
#include "cktwam/injection.hpp"

namespace cktwam {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// ln(sigma) ~ N(p_mean, p_std^2), one shared draw per instance. weight_fn is
/// the noise-dependent loss weight; the default is constant 1.
template <typename T>
struct NoiseSchedule {
    double p_mean = 1.39;
    double p_std = 1.2;
    std::function<T(T)> weight_fn = [](T) { return T(1); };
};

template <typename T>
Tensor<T> sample_sigma(const NoiseSchedule<T>& sched, int64_t batch, RngStream rng) {
    Tensor<T> out = Tensor<T>::zeros({batch});
    for (int64_t b = 0; b < batch; ++b)
        out.mutable_values()[static_cast<size_t>(b)] =
            static_cast<T>(std::exp(sched.p_mean + sched.p_std * rng.gaussian()));
    return out;
}

/// noisy = clean + sigma_b * eps with eps ~ N(0, I). Returns (noisy, eps);
/// both are data, not graph nodes.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_noisy(const Tensor<T>& clean, const Tensor<T>& sigma,
                                           RngStream rng) {
    int64_t B = clean.dim(0);
    if (sigma.size() != B) throw ShapeError("make_noisy: sigma must be [B]");
    Tensor<T> eps = Tensor<T>::zeros(clean.shape());
    for (auto& v : eps.mutable_values()) v = static_cast<T>(rng.gaussian());
    int64_t per = clean.size() / std::max<int64_t>(B, 1);
    Tensor<T> noisy = Tensor<T>::zeros(clean.shape());
    for (int64_t b = 0; b < B; ++b) {
        T s = sigma.values()[static_cast<size_t>(b)];
        for (int64_t i = 0; i < per; ++i) {
            size_t off = static_cast<size_t>(b * per + i);
            noisy.mutable_values()[off] = clean.values()[off] + s * eps.values()[off];
        }
    }
    return {noisy, eps};
}

// ---------------------------------------------------------------------------
// Load-balancing loss
// ---------------------------------------------------------------------------

template <typename T>
std::vector<int64_t> top_k_indices(const T* row, int64_t m, int64_t k) {
    std::vector<int64_t> order(static_cast<size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [row](int64_t a, int64_t b) { return row[a] > row[b]; });
    order.resize(static_cast<size_t>(k));
    return order;
}

/// Value-level computation from explicit probability rows; the oracle entry
/// point for forced routing patterns.
inline double balance_loss_value(const std::vector<std::vector<double>>& probs, int64_t k) {
    if (probs.empty()) return 0.0;
    int64_t B = static_cast<int64_t>(probs.size());
    int64_t M = static_cast<int64_t>(probs[0].size());
    std::vector<double> pm(static_cast<size_t>(M), 0.0), fm(static_cast<size_t>(M), 0.0);
    for (const auto& row : probs) {
        for (int64_t m = 0; m < M; ++m) pm[static_cast<size_t>(m)] += row[static_cast<size_t>(m)];
        for (int64_t m : top_k_indices(row.data(), M, k)) fm[static_cast<size_t>(m)] += 1.0;
    }
    double acc = 0;
    for (int64_t m = 0; m < M; ++m)
        acc += (fm[static_cast<size_t>(m)] / static_cast<double>(k * B)) *
               (pm[static_cast<size_t>(m)] / static_cast<double>(B));
    return static_cast<double>(M) * acc;
}

/// In-graph balancing term from a routing record. Selection frequencies are
/// non-differentiable indicators; gradient flows through the batch-mean
/// routing mass only.
template <typename T>
Tensor<T> balance_loss(const RoutingRecord<T>& routing, int64_t m, int64_t k) {
    int64_t B = routing.probs.dim(0);
    std::vector<T> fm(static_cast<size_t>(m), T(0));
    for (const auto& sel : routing.selected)
        for (int64_t idx : sel) fm[static_cast<size_t>(idx)] += T(1);
    for (auto& v : fm) v /= static_cast<T>(k * B);
    Tensor<T> f_const = Tensor<T>::from_vector({m}, std::move(fm));
    Tensor<T> pm = mean_pool(routing.probs, 0);  // [M]
    return scale(sum_all(mul(pm, f_const)), static_cast<T>(m));
}

// ---------------------------------------------------------------------------
// Synthetic staged task
// ---------------------------------------------------------------------------

template <typename T>
struct Batch {
    std::vector<Observation<T>> observations;
    Tensor<T> v0, a0;          // clean targets
    Tensor<T> mask_v, mask_a;  // binary validity masks (trailing padding off)
    std::vector<int64_t> stages;
};

/// Episodes of consecutive stages. Teacher image tokens mix a strong
/// stage-specific pattern with an episode identity. Each stage owns a
/// low-rank linear map of the pooled teacher image tokens into the context
/// token block; the clean targets are the frozen student's outputs under that
/// reference context at a fixed operating point. Actions therefore depend on
/// the teacher inputs through stage-specific linear maps, the targets lie on
/// the conditioning pathway's reachable output manifold, and each stage map
/// fits inside a single routed expert, so specialization is learnable.
template <typename T>
class StagedTask {
public:
    StagedTask(const RunConfig& cfg, const Student<T>& student) : cfg_(cfg) {
        const auto& tr = cfg.train;
        RngStream rng(tr.data_seed, 0xda7a, 0);
        int64_t d_tea = cfg.teacher.d;
        int64_t ta = cfg.student.action_len, da = cfg.student.action_dim;
        int64_t tv = cfg.student.video_len(), dv = cfg.student.video_dim;
        int64_t d_stu = cfg.student.d;
        int64_t k_ctx = cfg.ckt.context_len();

        // Per-stage rank-limited maps: g -> (U_s^T g) -> context block. The
        // rank stays within one expert's bottleneck so a single routed
        // adapter can realize a whole stage.
        const int64_t map_rank = std::max<int64_t>(1, cfg.ckt.r_s);
        const T ctx_scale = T(18);
        // pooled image tokens have per-dim std near
        // sqrt(1.4^2 + 0.45^2 + 0.1^2) / sqrt(n_img)
        double g_std = std::sqrt(2.1725 / static_cast<double>(cfg.teacher.n_img));
        T u_norm = static_cast<T>(1.0 / (g_std * std::sqrt(static_cast<double>(d_tea))));
        T v_std = static_cast<T>(static_cast<double>(ctx_scale) /
                                 std::sqrt(static_cast<double>(map_rank)));
        std::vector<Tensor<T>> stage_patterns, stage_u;
        std::vector<std::vector<Tensor<T>>> stage_v(static_cast<size_t>(tr.stages));
        for (int64_t s = 0; s < tr.stages; ++s) {
            stage_patterns.push_back(randn<T>({1, cfg.teacher.n_img, d_tea}, rng));
            stage_u.push_back(randn<T>({d_tea, map_rank}, rng, u_norm));
            for (int64_t r = 0; r < map_rank; ++r)
                stage_v[static_cast<size_t>(s)].push_back(
                    broadcast_to(randn<T>({1, 1, d_stu}, rng, v_std), {1, k_ctx, d_stu}));
        }

        Tensor<T> zero_sep = Tensor<T>::zeros({1, 1, d_stu});
        Tensor<T> fix_v = Tensor<T>::zeros({1, tv, dv});
        Tensor<T> fix_a = Tensor<T>::zeros({1, ta, da});
        Tensor<T> sig_ref = Tensor<T>::full({1}, T(1));

        pool_.reserve(static_cast<size_t>(tr.episodes * tr.stages));
        for (int64_t e = 0; e < tr.episodes; ++e) {
            Tensor<T> episode_img = randn<T>({1, cfg.teacher.n_img, d_tea}, rng);
            Tensor<T> episode_text = randn<T>({1, cfg.teacher.n_text, d_tea}, rng);
            Tensor<T> episode_inst = randn<T>({1, cfg.student.text_len, d_stu}, rng);
            for (int64_t s = 0; s < tr.stages; ++s) {
                Item item;
                item.stage = s;
                Tensor<T> jitter = randn<T>({1, cfg.teacher.n_img, d_tea}, rng, T(0.1));
                item.obs.x_img = add(add(scale(stage_patterns[static_cast<size_t>(s)], T(1.4)),
                                         scale(episode_img, T(0.45))),
                                     jitter);
                item.obs.x_text = episode_text;
                item.obs.e_t = episode_inst;
                item.obs.id = observation_id_from_bytes(item.obs);
                Tensor<T> g = mean_pool(item.obs.x_img, 1);  // [1, d_tea]
                Tensor<T> coeffs = matmul(g, stage_u[static_cast<size_t>(s)]);  // [1, map_rank]
                Tensor<T> ctx_ref = Tensor<T>::zeros({1, k_ctx, d_stu});
                for (int64_t r = 0; r < map_rank; ++r)
                    ctx_ref = add(ctx_ref,
                                  scale(stage_v[static_cast<size_t>(s)][static_cast<size_t>(r)],
                                        coeffs.values()[static_cast<size_t>(r)]));
                auto [v_ref, a_ref] =
                    student.denoise(fix_v, fix_a, sig_ref, augment(episode_inst, ctx_ref, zero_sep));
                item.v0 = v_ref;
                item.a0 = a_ref;
                // trailing padding: drop the last action slot on odd items
                item.mask_a = Tensor<T>::full({1, ta}, T(1));
                if ((e + s) % 2 == 1 && ta > 1)
                    item.mask_a.mutable_values()[static_cast<size_t>(ta - 1)] = T(0);
                item.mask_v = Tensor<T>::full({1, tv}, T(1));
                if ((e + s) % 3 == 2 && tv > 1)
                    item.mask_v.mutable_values()[static_cast<size_t>(tv - 1)] = T(0);
                pool_.push_back(std::move(item));
            }
        }
    }

    int64_t pool_size() const { return static_cast<int64_t>(pool_.size()); }
    int64_t stage_count() const { return cfg_.train.stages; }
    bool labeled() const { return cfg_.train.stage_labels; }
    const Observation<T>& observation(int64_t index) const {
        return pool_[static_cast<size_t>(index)].obs;
    }
    int64_t stage_of(int64_t index) const { return pool_[static_cast<size_t>(index)].stage; }

    Batch<T> make_batch(int64_t step) const {
        RngStream rng(cfg_.train.data_seed, rng_op::kBatchSample, static_cast<uint64_t>(step));
        int64_t B = cfg_.train.batch_size;
        Batch<T> batch;
        std::vector<Tensor<T>> v0s, a0s, mvs, mas;
        for (int64_t b = 0; b < B; ++b) {
            const Item& item = pool_[static_cast<size_t>(rng.next_u64() % pool_.size())];
            batch.observations.push_back(item.obs);
            if (labeled()) batch.stages.push_back(item.stage);
            v0s.push_back(item.v0);
            a0s.push_back(item.a0);
            mvs.push_back(item.mask_v);
            mas.push_back(item.mask_a);
        }
        batch.v0 = concat(v0s, 0);
        batch.a0 = concat(a0s, 0);
        batch.mask_v = concat(mvs, 0);
        batch.mask_a = concat(mas, 0);
        return batch;
    }

private:
    struct Item {
        Observation<T> obs;
        Tensor<T> v0, a0, mask_v, mask_a;
        int64_t stage = 0;
    };
    RunConfig cfg_;
    std::vector<Item> pool_;
};

// ---------------------------------------------------------------------------
// Step losses
// ---------------------------------------------------------------------------

template <typename T>
struct StepLosses {
    Tensor<T> total, act, vid, bal;  // graph tensors
    RoutingRecord<T> routing;
    Tensor<T> sigma;
    double act_min_sigma = 0;  // action loss of the lowest-noise instance
};

/// Shared sigma per instance, modality-specific noise, masked clean-target
/// losses, and the weighted balancing term:
/// total = act + lambda_vid * vid + lambda_bal * bal.
template <typename T>
StepLosses<T> step_losses(const Batch<T>& batch, const WrappedStudent<T>& wrapped,
                          const NoiseSchedule<T>& sched, double lambda_vid, double lambda_bal,
                          bool train_mode, StepKey key) {
    int64_t B = static_cast<int64_t>(batch.observations.size());
    StepLosses<T> out;
    out.sigma = sample_sigma(sched, B, RngStream(key.seed, rng_op::kSigma, key.step));
    auto [noisy_v, eps_v] = make_noisy(batch.v0, out.sigma, RngStream(key.seed, rng_op::kVideoNoise, key.step));
    auto [noisy_a, eps_a] = make_noisy(batch.a0, out.sigma, RngStream(key.seed, rng_op::kActionNoise, key.step));
    auto res = wrapped.denoise_batch(batch.observations, noisy_v, noisy_a, out.sigma, train_mode, key);
    out.routing = res.routing;

    Tensor<T> weights = Tensor<T>::zeros({B});
    for (int64_t b = 0; b < B; ++b)
        weights.mutable_values()[static_cast<size_t>(b)] =
            sched.weight_fn(out.sigma.values()[static_cast<size_t>(b)]);
    out.act = mse_masked(res.a_hat, batch.a0, batch.mask_a, weights);
    out.vid = mse_masked(res.v_hat, batch.v0, batch.mask_v, weights);
    const CktConfig& ckt = wrapped.bank().config();
    out.bal = balance_loss(out.routing, ckt.m, ckt.k);
    out.total = add(out.act, add(scale(out.vid, static_cast<T>(lambda_vid)),
                                 scale(out.bal, static_cast<T>(lambda_bal))));

    // low-noise diagnostic: per-instance action loss of the min-sigma draw
    int64_t b_min = 0;
    for (int64_t b = 1; b < B; ++b)
        if (out.sigma.values()[static_cast<size_t>(b)] < out.sigma.values()[static_cast<size_t>(b_min)])
            b_min = b;
    {
        int64_t ta = batch.a0.dim(1), da = batch.a0.dim(2);
        double acc = 0;
        for (int64_t t = 0; t < ta; ++t) {
            double mw = static_cast<double>(batch.mask_a.values()[static_cast<size_t>(b_min * ta + t)]) *
                        static_cast<double>(weights.values()[static_cast<size_t>(b_min)]);
            if (mw == 0) continue;
            for (int64_t j = 0; j < da; ++j) {
                size_t off = static_cast<size_t>((b_min * ta + t) * da + j);
                double d = static_cast<double>(res.a_hat.values()[off]) -
                           static_cast<double>(batch.a0.values()[off]);
                acc += mw * d * d;
            }
        }
        out.act_min_sigma = acc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay adaptive optimizer with bias correction and a
/// linear-warmup + cosine-decay learning-rate schedule. State exists only for
/// the adapter-bank tensors handed in at construction.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor<T>*>> params, const TrainConfig& tc,
          int64_t total_steps)
        : params_(std::move(params)), tc_(tc), total_steps_(total_steps) {
        for (auto& [name, t] : params_)
            slots_.push_back({std::vector<T>(t->values().size(), T(0)),
                              std::vector<T>(t->values().size(), T(0))});
    }

    double lr_at(int64_t step) const {
        if (tc_.warmup_steps > 0 && step < tc_.warmup_steps)
            return tc_.lr * static_cast<double>(step) / static_cast<double>(tc_.warmup_steps);
        int64_t span = std::max<int64_t>(1, total_steps_ - tc_.warmup_steps);
        double progress = std::min(1.0, static_cast<double>(step - tc_.warmup_steps) /
                                            static_cast<double>(span));
        return tc_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    }

    int64_t step_count() const { return step_count_; }

    void zero_grad() {
        for (auto& [name, t] : params_) t->zero_grad();
    }

    /// One update over every managed tensor. Requires populated gradients;
    /// an absent gradient buffer signals a broken step protocol.
    void step() {
        double lr = lr_at(step_count_);
        ++step_count_;
        double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(step_count_));
        double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(step_count_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& [name, t] = params_[pi];
            if (!t->has_grad())
                throw IntegrityError("optimizer step without gradient for " + name +
                                     " (was backward run after zero_grad?)");
            auto& m = slots_[pi].m;
            auto& v = slots_[pi].v;
            auto& val = t->mutable_values();
            const auto& g = t->grad();
            for (size_t i = 0; i < val.size(); ++i) {
                double gi = static_cast<double>(g[i]);
                double mi = tc_.beta1 * static_cast<double>(m[i]) + (1.0 - tc_.beta1) * gi;
                double vi = tc_.beta2 * static_cast<double>(v[i]) + (1.0 - tc_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + 1e-8) +
                                tc_.weight_decay * static_cast<double>(val[i]);
                val[i] = static_cast<T>(static_cast<double>(val[i]) - lr * update);
            }
        }
    }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    std::vector<std::pair<std::string, Tensor<T>*>> params_;
    TrainConfig tc_;
    int64_t total_steps_;
    int64_t step_count_ = 0;
    std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------
// Training session
// ---------------------------------------------------------------------------

struct MetricsRow {
    int64_t step = 0;
    double total = 0, act_avg = 0, act_last = 0, vid = 0, bal = 0, lr = 0;
    std::vector<uint64_t> selected_counts;

    json to_json() const {
        return json{{"step", step},
                    {"L_total", total},
                    {"L_act_avg", act_avg},
                    {"L_act_last", act_last},
                    {"L_vid", vid},
                    {"L_bal", bal},
                    {"lr", lr},
                    {"selected_counts", selected_counts}};
    }
};

struct RunReport {
    int64_t steps = 0;
    std::vector<MetricsRow> metrics;
    uint64_t frozen_hash_initial = 0;
    uint64_t frozen_hash_final = 0;
    bool frozen_ok = false;
    std::string checkpoint_path;
    uint64_t cache_hits = 0, cache_misses = 0;
};

inline double smoothed_at(const std::vector<MetricsRow>& rows, int64_t step, int64_t window,
                          double MetricsRow::*field) {
    double acc = 0;
    int64_t n = 0;
    for (const auto& r : rows)
        if (r.step >= step - window && r.step < step) {
            acc += r.*field;
            ++n;
        }
    return n ? acc / static_cast<double>(n) : 0.0;
}

template <typename T>
class TrainSession {
public:
    explicit TrainSession(const RunConfig& cfg)
        : cfg_(cfg),
          teacher_(cfg.teacher),
          student_(cfg.student),
          bank_(cfg.ckt),
          cache_(static_cast<size_t>(std::max<int64_t>(64, cfg.train.episodes * cfg.train.stages))),
          task_(cfg, student_),
          wrapped_(teacher_, student_, bank_, cache_),
          opt_(bank_.named_params(), cfg.train, cfg.train.steps) {
        sched_.p_mean = cfg.train.p_mean;
        sched_.p_std = cfg.train.p_std;
        if (cfg.train.omega == "inv_var")
            sched_.weight_fn = [](T s) { return T(1) / (T(1) + s * s); };
    }

    const RunConfig& config() const { return cfg_; }
    AdapterBank<T>& bank() { return bank_; }
    const Teacher<T>& teacher() const { return teacher_; }
    const Student<T>& student() const { return student_; }
    StagedTask<T>& task() { return task_; }
    AdamW<T>& optimizer() { return opt_; }
    ContextCache<T>& cache() { return cache_; }

    uint64_t frozen_hash() const { return teacher_.param_hash() ^ student_.param_hash(); }

    MetricsRow step_once(int64_t step) {
        Batch<T> batch = task_.make_batch(step);
        opt_.zero_grad();
        Tape<T> tape;
        StepLosses<T> losses;
        {
            typename Tape<T>::Scope scope(tape);
            losses = step_losses(batch, wrapped_, sched_, cfg_.train.lambda_vid,
                                 cfg_.train.lambda_bal, true, StepKey{cfg_.seed, static_cast<uint64_t>(step)});
            double total = static_cast<double>(losses.total.item());
            if (!std::isfinite(total))
                throw NumericError("non-finite loss at step " + std::to_string(step) +
                                   " (L_act=" + std::to_string(static_cast<double>(losses.act.item())) +
                                   ", L_vid=" + std::to_string(static_cast<double>(losses.vid.item())) +
                                   ", L_bal=" + std::to_string(static_cast<double>(losses.bal.item())) + ")");
            tape.backward(losses.total);
        }
        MetricsRow row;
        row.step = step;
        row.lr = opt_.lr_at(step);
        opt_.step();
        cache_.invalidate_contexts();
        row.total = static_cast<double>(losses.total.item());
        row.act_avg = static_cast<double>(losses.act.item());
        row.act_last = losses.act_min_sigma;
        row.vid = static_cast<double>(losses.vid.item());
        row.bal = static_cast<double>(losses.bal.item());
        row.selected_counts.assign(static_cast<size_t>(cfg_.ckt.m), 0);
        for (const auto& sel : losses.routing.selected)
            for (int64_t mIdx : sel) row.selected_counts[static_cast<size_t>(mIdx)]++;
        return row;
    }

    /// Runs the configured number of steps, streaming one JSON line per step.
    /// Verifies the frozen-backbone hash at every checkpoint interval and at
    /// the end; writes interval checkpoints plus a final one.
    RunReport run(std::ostream* metrics_stream = nullptr) {
        RunReport report;
        report.frozen_hash_initial = frozen_hash();
        std::filesystem::path out_dir(cfg_.out_dir);
        std::filesystem::create_directories(out_dir);
        for (int64_t step = 0; step < cfg_.train.steps; ++step) {
            MetricsRow row = step_once(step);
            if (metrics_stream) (*metrics_stream) << row.to_json().dump() << "\n";
            report.metrics.push_back(std::move(row));
            if ((step + 1) % cfg_.train.checkpoint_interval == 0) {
                if (frozen_hash() != report.frozen_hash_initial)
                    throw IntegrityError("frozen backbone hash changed at step " + std::to_string(step + 1));
                checkpoint::save((out_dir / ("ckpt_" + std::to_string(step + 1) + ".ckpt")).string(),
                                 cfg_, step + 1, bank_);
            }
        }
        report.steps = cfg_.train.steps;
        report.frozen_hash_final = frozen_hash();
        report.frozen_ok = report.frozen_hash_final == report.frozen_hash_initial;
        if (!report.frozen_ok) throw IntegrityError("frozen backbone hash changed during training");
        report.checkpoint_path = (out_dir / "checkpoint_final.ckpt").string();
        checkpoint::save(report.checkpoint_path, cfg_, cfg_.train.steps, bank_);
        report.cache_hits = cache_.hits();
        report.cache_misses = cache_.misses();
        return report;
    }

private:
    RunConfig cfg_;
    Teacher<T> teacher_;
    Student<T> student_;
    AdapterBank<T> bank_;
    ContextCache<T> cache_;
    StagedTask<T> task_;
    WrappedStudent<T> wrapped_;
    AdamW<T> opt_;
    NoiseSchedule<T> sched_;
};

/// Average eval-mode routing probabilities per stage over the task pool.
template <typename T>
std::vector<std::vector<double>> stage_routing_probs(const StagedTask<T>& task,
                                                     const Teacher<T>& teacher,
                                                     const AdapterBank<T>& bank) {
    if (!task.labeled()) throw ConfigError("route statistics require stage labels on the dataset");
    int64_t stages = task.stage_count();
    int64_t m = bank.config().m;
    std::vector<std::vector<double>> table(static_cast<size_t>(stages),
                                           std::vector<double>(static_cast<size_t>(m), 0.0));
    std::vector<int64_t> counts(static_cast<size_t>(stages), 0);
    for (int64_t i = 0; i < task.pool_size(); ++i) {
        const auto& obs = task.observation(i);
        auto ctx = teacher.forward_extract(obs.x_img, obs.x_text, teacher.config().extract_layer, obs.id);
        auto rec = bank.route(ctx.hidden, false, {});
        int64_t s = task.stage_of(i);
        for (int64_t j = 0; j < m; ++j)
            table[static_cast<size_t>(s)][static_cast<size_t>(j)] +=
                static_cast<double>(rec.probs.values()[static_cast<size_t>(j)]);
        counts[static_cast<size_t>(s)]++;
    }
    for (int64_t s = 0; s < stages; ++s)
        for (auto& v : table[static_cast<size_t>(s)]) v /= static_cast<double>(counts[static_cast<size_t>(s)]);
    return table;
}

}  // namespace cktwam

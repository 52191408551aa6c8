// SPDX-License-Identifier: Apache-2.0
//
// Frozen synthetic teacher / student backbones. Weights are seeded Gaussian
// draws and never receive gradients; what matters is the interface they
// expose to the transfer module and the invariants they keep (frozen bytes,
// geometry-bound rotary phases, conditioning consumed through cross-attention
// keys/values only).
#pragma once

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cktwam/config.hpp"
#include "cktwam/tensor.hpp"

namespace cktwam {

// ---------------------------------------------------------------------------
// Rotary phases
// ---------------------------------------------------------------------------

/// Head-dimension split between the temporal/height/width rotation slices:
/// each axis owns a disjoint, even-sized slice of the head dim.
struct RopeSliceSizes {
    int64_t temporal;
    int64_t height;
    int64_t width;
};

inline RopeSliceSizes rope_slice_sizes(int64_t head_dim) {
    int64_t pairs = head_dim / 2;
    int64_t hw_pairs = pairs / 4;
    int64_t t_pairs = pairs - 2 * hw_pairs;
    return {2 * t_pairs, 2 * hw_pairs, 2 * hw_pairs};
}

/// Per-patch rotation phases, factorized over (temporal, height, width).
/// Entries come in equal-angle pairs; pair p rotates dims (2p, 2p+1).
struct RotaryPhases {
    std::vector<double> phases;  // length head_dim
    RopeSliceSizes slices;
};

/// Phases depend only on the patch index and the student geometry, never on
/// batch content or conditioning length. Temporal indices beyond the video
/// grid address the trailing action slots.
inline RotaryPhases rope_phases(const StudentConfig& cfg, int64_t t, int64_t h_p, int64_t w_p) {
    if (t < 0 || t >= cfg.temporal_slots() || h_p < 0 || h_p >= cfg.h || w_p < 0 || w_p >= cfg.w)
        throw std::out_of_range("rope_phases: patch index (" + std::to_string(t) + "," +
                                std::to_string(h_p) + "," + std::to_string(w_p) + ") outside grid");
    int64_t dh = cfg.head_dim();
    RopeSliceSizes sl = rope_slice_sizes(dh);
    RotaryPhases out;
    out.slices = sl;
    out.phases.assign(static_cast<size_t>(dh), 0.0);
    size_t off = 0;
    auto fill_axis = [&](int64_t axis_dims, int64_t index) {
        int64_t pairs = axis_dims / 2;
        for (int64_t j = 0; j < pairs; ++j) {
            // standard inverse-frequency geometric spacing per axis slice
            double theta = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(pairs));
            double ang = static_cast<double>(index) * theta;
            out.phases[off + 2 * static_cast<size_t>(j)] = ang;
            out.phases[off + 2 * static_cast<size_t>(j) + 1] = ang;
        }
        off += static_cast<size_t>(axis_dims);
    };
    fill_axis(sl.temporal, t);
    fill_axis(sl.height, h_p);
    fill_axis(sl.width, w_p);
    return out;
}

/// Maps a student sequence position to its patch index. Video tokens
/// enumerate the (t,h,w) grid row-major; action token j sits at temporal
/// slot t+j with h=w=0.
inline void seq_pos_to_patch(const StudentConfig& cfg, int64_t pos, int64_t& t, int64_t& h_p,
                             int64_t& w_p) {
    if (pos < cfg.video_len()) {
        t = pos / (cfg.h * cfg.w);
        h_p = (pos / cfg.w) % cfg.h;
        w_p = pos % cfg.w;
    } else {
        t = cfg.t + (pos - cfg.video_len());
        h_p = 0;
        w_p = 0;
    }
}

namespace detail {

template <typename T>
uint64_t hash_tensor_bytes(const std::vector<const Tensor<T>*>& tensors) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto* t : tensors)
        h = fnv1a64(t->data(), t->values().size() * sizeof(T), h);
    return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// Intermediate teacher hidden states for one observation, extracted once at
/// the clean endpoint (timestep 0) and reused for every student denoise step.
template <typename T>
struct TeacherContext {
    Tensor<T> hidden;  // [B, N, d_tea], never requires grad
    int64_t source_layer = 0;
    int64_t timestep_used = 0;
    uint64_t observation_id = 0;
};

template <typename T>
struct TeacherBlockParams {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionParams<T> attn;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Frozen observation encoder: pre-norm transformer blocks over the
/// concatenated image/text tokens. Only the first `extract_layer` blocks ever
/// run.
template <typename T>
class Teacher {
public:
    explicit Teacher(const TeacherConfig& cfg) : cfg_(cfg) {
        RngStream rng(cfg.seed, 0x7ea, 0);
        auto mat = [&](int64_t r, int64_t c) { return randn<T>({r, c}, rng, T(0.02)); };
        auto vec0 = [&](int64_t n) { return Tensor<T>::zeros({n}); };
        int64_t d = cfg.d;
        blocks_.reserve(static_cast<size_t>(cfg.layers));
        for (int64_t i = 0; i < cfg.layers; ++i) {
            TeacherBlockParams<T> b;
            b.ln1_g = Tensor<T>::full({d}, T(1));
            b.ln1_b = vec0(d);
            b.ln2_g = Tensor<T>::full({d}, T(1));
            b.ln2_b = vec0(d);
            b.attn = {mat(d, d), vec0(d), mat(d, d), vec0(d), mat(d, d), vec0(d), mat(d, d), vec0(d)};
            b.ffn_w1 = mat(d, cfg.ffn);
            b.ffn_b1 = vec0(cfg.ffn);
            b.ffn_w2 = mat(cfg.ffn, d);
            b.ffn_b2 = vec0(d);
            blocks_.push_back(std::move(b));
        }
    }

    const TeacherConfig& config() const { return cfg_; }

    /// Single forward pass through exactly `layer` blocks; returns the hidden
    /// states after that block. Inputs are already embedded to d_tea.
    TeacherContext<T> forward_extract(const Tensor<T>& x_img, const Tensor<T>& x_text,
                                      int64_t layer, uint64_t observation_id = 0) const {
        if (layer < 0 || layer > cfg_.layers)
            throw ConfigError("teacher extract layer " + std::to_string(layer) + " out of range [0," +
                              std::to_string(cfg_.layers) + "]");
        if (x_img.dim(-1) != cfg_.d || x_text.dim(-1) != cfg_.d)
            throw ShapeError("teacher inputs must be tokenized to width " + std::to_string(cfg_.d));
        ++forward_calls_;
        Tensor<T> x = concat<T>({x_img, x_text}, 1);
        for (int64_t i = 0; i < layer; ++i) {
            const auto& b = blocks_[static_cast<size_t>(i)];
            Tensor<T> n1 = layer_norm(x, b.ln1_g, b.ln1_b, T(1e-5));
            x = add(x, multi_head_attention(n1, n1, n1, b.attn, cfg_.heads));
            Tensor<T> n2 = layer_norm(x, b.ln2_g, b.ln2_b, T(1e-5));
            x = add(x, linear(gelu(linear(n2, b.ffn_w1, b.ffn_b1)), b.ffn_w2, b.ffn_b2));
            ++blocks_executed_;
        }
        TeacherContext<T> ctx;
        ctx.hidden = x;
        ctx.source_layer = layer;
        ctx.timestep_used = 0;
        ctx.observation_id = observation_id;
        return ctx;
    }

    uint64_t forward_calls() const { return forward_calls_; }
    uint64_t blocks_executed() const { return blocks_executed_; }
    void reset_counters() const { forward_calls_ = blocks_executed_ = 0; }

    uint64_t param_hash() const {
        std::vector<const Tensor<T>*> ts;
        collect_params(ts);
        return detail::hash_tensor_bytes(ts);
    }

    void collect_params(std::vector<const Tensor<T>*>& out) const {
        for (const auto& b : blocks_) {
            out.push_back(&b.ln1_g);
            out.push_back(&b.ln1_b);
            out.push_back(&b.ln2_g);
            out.push_back(&b.ln2_b);
            out.push_back(&b.attn.w_q);
            out.push_back(&b.attn.b_q);
            out.push_back(&b.attn.w_k);
            out.push_back(&b.attn.b_k);
            out.push_back(&b.attn.w_v);
            out.push_back(&b.attn.b_v);
            out.push_back(&b.attn.w_o);
            out.push_back(&b.attn.b_o);
            out.push_back(&b.ffn_w1);
            out.push_back(&b.ffn_b1);
            out.push_back(&b.ffn_w2);
            out.push_back(&b.ffn_b2);
        }
    }

private:
    TeacherConfig cfg_;
    std::vector<TeacherBlockParams<T>> blocks_;
    mutable uint64_t forward_calls_ = 0;
    mutable uint64_t blocks_executed_ = 0;
};

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

template <typename T>
struct StudentBlockParams {
    AttentionParams<T> self_attn, cross_attn;
    Tensor<T> adaln1_w, adaln1_b;  // d -> 2d scale/shift for self-attention input
    Tensor<T> adaln2_w, adaln2_b;  // for the FFN input
    Tensor<T> adaln3_w, adaln3_b;  // for the cross-attention query
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Records the rotary tables actually used by each self-attention call.
template <typename T>
struct PhaseRecorder {
    std::vector<std::vector<T>> tables;  // one entry per (denoise, block): cos ++ sin
};

/// Attention wiring observed during forward passes: which node fed the query
/// projection and which fed keys/values.
struct AttentionSourceLog {
    std::vector<std::pair<uint64_t, uint64_t>> self_attn;   // (q id, kv id)
    std::vector<std::pair<uint64_t, uint64_t>> cross_attn;  // (q id, kv id)
    uint64_t cross_attn_mults = 0;
    void reset() {
        self_attn.clear();
        cross_attn.clear();
        cross_attn_mults = 0;
    }
};

/// Frozen denoising backbone: joint video+action token sequence, per-block
/// self-attention (3D rotary on q/k) -> cross-attention over the conditioning
/// sequence (no positional encoding) -> FFN, all modulated by a
/// timestep-conditioned scale/shift.
template <typename T>
class Student {
public:
    explicit Student(const StudentConfig& cfg) : cfg_(cfg) {
        RngStream rng(cfg.seed, 0x57d, 0);
        auto mat = [&](int64_t r, int64_t c) { return randn<T>({r, c}, rng, T(0.02)); };
        auto vec0 = [&](int64_t n) { return Tensor<T>::zeros({n}); };
        int64_t d = cfg.d;
        video_embed_w_ = mat(cfg.video_dim, d);
        video_embed_b_ = vec0(d);
        action_embed_w_ = mat(cfg.action_dim, d);
        action_embed_b_ = vec0(d);
        time_w1_ = mat(d, d);
        time_b1_ = vec0(d);
        time_w2_ = mat(d, d);
        time_b2_ = vec0(d);
        blocks_.reserve(static_cast<size_t>(cfg.blocks));
        for (int64_t i = 0; i < cfg.blocks; ++i) {
            StudentBlockParams<T> b;
            b.self_attn = {mat(d, d), vec0(d), mat(d, d), vec0(d), mat(d, d), vec0(d), mat(d, d), vec0(d)};
            b.cross_attn = {mat(d, d), vec0(d), mat(d, d), vec0(d), mat(d, d), vec0(d), mat(d, d), vec0(d)};
            b.adaln1_w = mat(d, 2 * d);
            b.adaln1_b = vec0(2 * d);
            b.adaln2_w = mat(d, 2 * d);
            b.adaln2_b = vec0(2 * d);
            b.adaln3_w = mat(d, 2 * d);
            b.adaln3_b = vec0(2 * d);
            b.ffn_w1 = mat(d, 4 * d);
            b.ffn_b1 = vec0(4 * d);
            b.ffn_w2 = mat(4 * d, d);
            b.ffn_b2 = vec0(d);
            blocks_.push_back(std::move(b));
        }
        head_video_w_ = mat(d, cfg.video_dim);
        head_video_b_ = vec0(cfg.video_dim);
        head_action_w_ = mat(d, cfg.action_dim);
        head_action_b_ = vec0(cfg.action_dim);
        ln_ones_ = Tensor<T>::full({d}, T(1));
        ln_zeros_ = vec0(d);
        build_rope_tables();
    }

    const StudentConfig& config() const { return cfg_; }
    StudentBlockParams<T>& block(int64_t i) { return blocks_[static_cast<size_t>(i)]; }
    const RopeTables<T>& rope_tables() const { return rope_; }

    /// One transformer block. `cond` is the conditioning sequence consumed
    /// exclusively as cross-attention keys/values.
    Tensor<T> block_forward(int64_t bi, const Tensor<T>& z, const Tensor<T>& cond,
                            const Tensor<T>& time_embed) const {
        if (cond.dim(-1) != cfg_.d)
            throw ShapeError("conditioning width " + std::to_string(cond.dim(-1)) +
                             " must equal student width " + std::to_string(cfg_.d));
        const auto& b = blocks_[static_cast<size_t>(bi)];
        if (recorder_) {
            std::vector<T> tab = rope_.cos.values();
            tab.insert(tab.end(), rope_.sin.values().begin(), rope_.sin.values().end());
            recorder_->tables.push_back(std::move(tab));
        }
        Tensor<T> h1 = modulate(z, b.adaln1_w, b.adaln1_b, time_embed);
        log_.self_attn.emplace_back(h1.id(), h1.id());
        Tensor<T> z1 = add(z, attention_core(h1, h1, h1, b.self_attn, cfg_.heads, &rope_, &rope_));

        Tensor<T> h3 = modulate(z1, b.adaln3_w, b.adaln3_b, time_embed);
        log_.cross_attn.emplace_back(h3.id(), cond.id());
        uint64_t mults_before = matmul_mult_counter();
        Tensor<T> ca;
        if (cfg_.debug_rope_cross_attn) {
            RopeTables<T> bad = debug_cond_tables(cond.dim(1));
            ca = attention_core(h3, cond, cond, b.cross_attn, cfg_.heads,
                                static_cast<const RopeTables<T>*>(nullptr), &bad);
        } else {
            ca = attention_core(h3, cond, cond, b.cross_attn, cfg_.heads);
        }
        log_.cross_attn_mults += matmul_mult_counter() - mults_before;
        Tensor<T> z2 = add(z1, ca);

        Tensor<T> h2 = modulate(z2, b.adaln2_w, b.adaln2_b, time_embed);
        Tensor<T> ff = linear(gelu(linear(h2, b.ffn_w1, b.ffn_b1)), b.ffn_w2, b.ffn_b2);
        return add(z2, ff);
    }

    /// Denoises both streams jointly: embeds them into the shared token
    /// sequence, runs every block, projects back through the frozen heads.
    std::pair<Tensor<T>, Tensor<T>> denoise(const Tensor<T>& noisy_video,
                                            const Tensor<T>& noisy_action, const Tensor<T>& sigma,
                                            const Tensor<T>& cond) const {
        int64_t B = noisy_video.dim(0);
        if (noisy_video.rank() != 3 || noisy_video.dim(1) != cfg_.video_len() ||
            noisy_video.dim(2) != cfg_.video_dim)
            throw ShapeError("noisy_video must be [B," + std::to_string(cfg_.video_len()) + "," +
                             std::to_string(cfg_.video_dim) + "]");
        if (noisy_action.rank() != 3 || noisy_action.dim(0) != B ||
            noisy_action.dim(1) != cfg_.action_len || noisy_action.dim(2) != cfg_.action_dim)
            throw ShapeError("noisy_action must be [B," + std::to_string(cfg_.action_len) + "," +
                             std::to_string(cfg_.action_dim) + "]");
        if (sigma.size() != B) throw ShapeError("sigma must be [B]");
        Tensor<T> v_emb = linear(noisy_video, video_embed_w_, video_embed_b_);
        Tensor<T> a_emb = linear(noisy_action, action_embed_w_, action_embed_b_);
        Tensor<T> z = concat<T>({v_emb, a_emb}, 1);
        Tensor<T> e = timestep_embed(sigma);
        for (int64_t i = 0; i < cfg_.blocks; ++i) z = block_forward(i, z, cond, e);
        Tensor<T> v_hat = linear(slice(z, 1, 0, cfg_.video_len()), head_video_w_, head_video_b_);
        Tensor<T> a_hat = linear(slice(z, 1, cfg_.video_len(), cfg_.action_len), head_action_w_,
                                 head_action_b_);
        return {v_hat, a_hat};
    }

    uint64_t param_hash() const {
        std::vector<const Tensor<T>*> ts;
        collect_params(ts);
        return detail::hash_tensor_bytes(ts);
    }

    void collect_params(std::vector<const Tensor<T>*>& out) const {
        auto push_attn = [&](const AttentionParams<T>& a) {
            out.push_back(&a.w_q);
            out.push_back(&a.b_q);
            out.push_back(&a.w_k);
            out.push_back(&a.b_k);
            out.push_back(&a.w_v);
            out.push_back(&a.b_v);
            out.push_back(&a.w_o);
            out.push_back(&a.b_o);
        };
        out.push_back(&video_embed_w_);
        out.push_back(&video_embed_b_);
        out.push_back(&action_embed_w_);
        out.push_back(&action_embed_b_);
        out.push_back(&time_w1_);
        out.push_back(&time_b1_);
        out.push_back(&time_w2_);
        out.push_back(&time_b2_);
        for (const auto& b : blocks_) {
            push_attn(b.self_attn);
            push_attn(b.cross_attn);
            out.push_back(&b.adaln1_w);
            out.push_back(&b.adaln1_b);
            out.push_back(&b.adaln2_w);
            out.push_back(&b.adaln2_b);
            out.push_back(&b.adaln3_w);
            out.push_back(&b.adaln3_b);
            out.push_back(&b.ffn_w1);
            out.push_back(&b.ffn_b1);
            out.push_back(&b.ffn_w2);
            out.push_back(&b.ffn_b2);
        }
        out.push_back(&head_video_w_);
        out.push_back(&head_video_b_);
        out.push_back(&head_action_w_);
        out.push_back(&head_action_b_);
    }

    AttentionSourceLog& attention_log() const { return log_; }
    void set_phase_recorder(PhaseRecorder<T>* rec) const { recorder_ = rec; }

private:
    void build_rope_tables() {
        int64_t L = cfg_.seq_len();
        int64_t dh = cfg_.head_dim();
        int64_t np = dh / 2;
        std::vector<T> cosv(static_cast<size_t>(L * np)), sinv(static_cast<size_t>(L * np));
        for (int64_t pos = 0; pos < L; ++pos) {
            int64_t t, hp, wp;
            seq_pos_to_patch(cfg_, pos, t, hp, wp);
            RotaryPhases ph = rope_phases(cfg_, t, hp, wp);
            for (int64_t p = 0; p < np; ++p) {
                double ang = ph.phases[static_cast<size_t>(2 * p)];
                cosv[static_cast<size_t>(pos * np + p)] = static_cast<T>(std::cos(ang));
                sinv[static_cast<size_t>(pos * np + p)] = static_cast<T>(std::sin(ang));
            }
        }
        rope_.cos = Tensor<T>::from_vector({L, np}, std::move(cosv));
        rope_.sin = Tensor<T>::from_vector({L, np}, std::move(sinv));
    }

    RopeTables<T> debug_cond_tables(int64_t len) const {
        int64_t np = cfg_.head_dim() / 2;
        std::vector<T> cosv(static_cast<size_t>(len * np)), sinv(static_cast<size_t>(len * np));
        for (int64_t pos = 0; pos < len; ++pos)
            for (int64_t p = 0; p < np; ++p) {
                double ang = static_cast<double>(pos) *
                             std::pow(10000.0, -static_cast<double>(p) / static_cast<double>(np));
                cosv[static_cast<size_t>(pos * np + p)] = static_cast<T>(std::cos(ang));
                sinv[static_cast<size_t>(pos * np + p)] = static_cast<T>(std::sin(ang));
            }
        RopeTables<T> t;
        t.cos = Tensor<T>::from_vector({len, np}, std::move(cosv));
        t.sin = Tensor<T>::from_vector({len, np}, std::move(sinv));
        return t;
    }

    /// Timestep-conditioned scale/shift over a parameter-free layer norm.
    Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                       const Tensor<T>& time_embed) const {
        int64_t B = x.dim(0), d = cfg_.d;
        Tensor<T> ss = linear(time_embed, w, bias);  // [B, 2d]
        Tensor<T> sc = reshape(slice(ss, 1, 0, d), {B, 1, d});
        Tensor<T> sh = reshape(slice(ss, 1, d, d), {B, 1, d});
        Tensor<T> xn = layer_norm(x, ln_ones_, ln_zeros_, T(1e-5));
        return add(mul(xn, affine_const(sc, T(1), T(1))), sh);
    }

    /// Sinusoidal features of ln(sigma) through a small frozen MLP.
    Tensor<T> timestep_embed(const Tensor<T>& sigma) const {
        int64_t B = sigma.size(), d = cfg_.d, half = d / 2;
        std::vector<T> feats(static_cast<size_t>(B * d));
        for (int64_t b = 0; b < B; ++b) {
            double c = std::log(static_cast<double>(sigma.values()[static_cast<size_t>(b)]));
            for (int64_t i = 0; i < half; ++i) {
                double f = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                    static_cast<double>(half));
                feats[static_cast<size_t>(b * d + i)] = static_cast<T>(std::sin(c * f));
                feats[static_cast<size_t>(b * d + half + i)] = static_cast<T>(std::cos(c * f));
            }
        }
        Tensor<T> ft = Tensor<T>::from_vector({B, d}, std::move(feats));
        return linear(gelu(linear(ft, time_w1_, time_b1_)), time_w2_, time_b2_);
    }

    StudentConfig cfg_;
    Tensor<T> video_embed_w_, video_embed_b_, action_embed_w_, action_embed_b_;
    Tensor<T> time_w1_, time_b1_, time_w2_, time_b2_;
    std::vector<StudentBlockParams<T>> blocks_;
    Tensor<T> head_video_w_, head_video_b_, head_action_w_, head_action_b_;
    Tensor<T> ln_ones_, ln_zeros_;
    RopeTables<T> rope_;
    mutable AttentionSourceLog log_;
    mutable PhaseRecorder<T>* recorder_ = nullptr;
};

}  // namespace cktwam

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cktwam/common.hpp"

namespace cktwam {

using json = nlohmann::json;

struct TeacherConfig {
    int64_t layers = 6;
    int64_t d = 48;
    int64_t heads = 4;
    int64_t ffn = 96;
    int64_t n_img = 20;
    int64_t n_text = 6;
    int64_t extract_layer = 3;
    uint64_t seed = 1;

    int64_t n_tokens() const { return n_img + n_text; }
};

struct StudentConfig {
    int64_t blocks = 4;
    int64_t d = 32;
    int64_t heads = 4;
    int64_t t = 3, h = 4, w = 4;  // patch grid
    int64_t text_len = 7;
    int64_t action_len = 4;
    int64_t action_dim = 4;
    int64_t video_dim = 4;
    uint64_t seed = 2;
    // Applies a position-dependent rotation to cross-attention keys. Exists
    // only to demonstrate that the order-invariance check catches it.
    bool debug_rope_cross_attn = false;

    int64_t video_len() const { return t * h * w; }
    int64_t head_dim() const { return d / heads; }
    // Action tokens occupy trailing temporal slots after the video patches.
    int64_t seq_len() const { return video_len() + action_len; }
    int64_t temporal_slots() const { return t + action_len; }
};

struct CktConfig {
    int64_t d_tea = 48;
    int64_t d_stu = 32;
    int64_t d_b = 16;
    int64_t k_g = 8;
    int64_t k_s = 8;
    int64_t heads = 4;
    double dropout = 0.1;
    int64_t r_g = 4;
    int64_t r_s = 8;
    int64_t m = 8;
    int64_t k = 2;
    int64_t d_gate = 16;
    uint64_t seed = 3;

    int64_t context_len() const { return k_g + k_s; }
};

struct TrainConfig {
    int64_t steps = 2000;
    int64_t batch_size = 4;
    double lr = 5e-4;
    int64_t warmup_steps = 100;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double p_mean = 1.39;
    double p_std = 1.2;
    double lambda_vid = 1.0;
    double lambda_bal = 0.01;
    int64_t checkpoint_interval = 500;
    std::string omega = "constant";  // noise-dependent loss weight: constant | inv_var
    int64_t stages = 4;
    int64_t episodes = 16;
    uint64_t data_seed = 7;
    bool stage_labels = true;
};

struct RunConfig {
    uint64_t seed = 0;
    std::string precision = "f32";
    std::string out_dir = "runs/desk";
    TeacherConfig teacher;
    StudentConfig student;
    CktConfig ckt;
    TrainConfig train;
};

// --- JSON (de)serialization -------------------------------------------------

inline json to_json(const RunConfig& c) {
    return json{
        {"seed", c.seed},
        {"precision", c.precision},
        {"out_dir", c.out_dir},
        {"teacher",
         {{"layers", c.teacher.layers},
          {"d", c.teacher.d},
          {"heads", c.teacher.heads},
          {"ffn", c.teacher.ffn},
          {"n_img", c.teacher.n_img},
          {"n_text", c.teacher.n_text},
          {"extract_layer", c.teacher.extract_layer},
          {"seed", c.teacher.seed}}},
        {"student",
         {{"blocks", c.student.blocks},
          {"d", c.student.d},
          {"heads", c.student.heads},
          {"t", c.student.t},
          {"h", c.student.h},
          {"w", c.student.w},
          {"text_len", c.student.text_len},
          {"action_len", c.student.action_len},
          {"action_dim", c.student.action_dim},
          {"video_dim", c.student.video_dim},
          {"seed", c.student.seed},
          {"debug_rope_cross_attn", c.student.debug_rope_cross_attn}}},
        {"ckt",
         {{"d_tea", c.ckt.d_tea},
          {"d_stu", c.ckt.d_stu},
          {"d_b", c.ckt.d_b},
          {"k_g", c.ckt.k_g},
          {"k_s", c.ckt.k_s},
          {"heads", c.ckt.heads},
          {"dropout", c.ckt.dropout},
          {"r_g", c.ckt.r_g},
          {"r_s", c.ckt.r_s},
          {"m", c.ckt.m},
          {"k", c.ckt.k},
          {"d_gate", c.ckt.d_gate},
          {"seed", c.ckt.seed}}},
        {"train",
         {{"steps", c.train.steps},
          {"batch_size", c.train.batch_size},
          {"lr", c.train.lr},
          {"warmup_steps", c.train.warmup_steps},
          {"beta1", c.train.beta1},
          {"beta2", c.train.beta2},
          {"weight_decay", c.train.weight_decay},
          {"p_mean", c.train.p_mean},
          {"p_std", c.train.p_std},
          {"lambda_vid", c.train.lambda_vid},
          {"lambda_bal", c.train.lambda_bal},
          {"checkpoint_interval", c.train.checkpoint_interval},
          {"omega", c.train.omega},
          {"stages", c.train.stages},
          {"episodes", c.train.episodes},
          {"data_seed", c.train.data_seed},
          {"stage_labels", c.train.stage_labels}}}};
}

namespace detail {
template <typename V>
void get_field(const json& j, const char* key, V& out, const std::string& scope) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("config field " + scope + key + " has the wrong type");
    }
}
}  // namespace detail

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    detail::get_field(j, "seed", c.seed, "");
    detail::get_field(j, "precision", c.precision, "");
    detail::get_field(j, "out_dir", c.out_dir, "");
    if (j.contains("teacher")) {
        const json& t = j.at("teacher");
        detail::get_field(t, "layers", c.teacher.layers, "teacher.");
        detail::get_field(t, "d", c.teacher.d, "teacher.");
        detail::get_field(t, "heads", c.teacher.heads, "teacher.");
        detail::get_field(t, "ffn", c.teacher.ffn, "teacher.");
        detail::get_field(t, "n_img", c.teacher.n_img, "teacher.");
        detail::get_field(t, "n_text", c.teacher.n_text, "teacher.");
        detail::get_field(t, "extract_layer", c.teacher.extract_layer, "teacher.");
        detail::get_field(t, "seed", c.teacher.seed, "teacher.");
    }
    if (j.contains("student")) {
        const json& s = j.at("student");
        detail::get_field(s, "blocks", c.student.blocks, "student.");
        detail::get_field(s, "d", c.student.d, "student.");
        detail::get_field(s, "heads", c.student.heads, "student.");
        detail::get_field(s, "t", c.student.t, "student.");
        detail::get_field(s, "h", c.student.h, "student.");
        detail::get_field(s, "w", c.student.w, "student.");
        detail::get_field(s, "text_len", c.student.text_len, "student.");
        detail::get_field(s, "action_len", c.student.action_len, "student.");
        detail::get_field(s, "action_dim", c.student.action_dim, "student.");
        detail::get_field(s, "video_dim", c.student.video_dim, "student.");
        detail::get_field(s, "seed", c.student.seed, "student.");
        detail::get_field(s, "debug_rope_cross_attn", c.student.debug_rope_cross_attn, "student.");
    }
    if (j.contains("ckt")) {
        const json& k = j.at("ckt");
        detail::get_field(k, "d_tea", c.ckt.d_tea, "ckt.");
        detail::get_field(k, "d_stu", c.ckt.d_stu, "ckt.");
        detail::get_field(k, "d_b", c.ckt.d_b, "ckt.");
        detail::get_field(k, "k_g", c.ckt.k_g, "ckt.");
        detail::get_field(k, "k_s", c.ckt.k_s, "ckt.");
        detail::get_field(k, "heads", c.ckt.heads, "ckt.");
        detail::get_field(k, "dropout", c.ckt.dropout, "ckt.");
        detail::get_field(k, "r_g", c.ckt.r_g, "ckt.");
        detail::get_field(k, "r_s", c.ckt.r_s, "ckt.");
        detail::get_field(k, "m", c.ckt.m, "ckt.");
        detail::get_field(k, "k", c.ckt.k, "ckt.");
        detail::get_field(k, "d_gate", c.ckt.d_gate, "ckt.");
        detail::get_field(k, "seed", c.ckt.seed, "ckt.");
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        detail::get_field(t, "steps", c.train.steps, "train.");
        detail::get_field(t, "batch_size", c.train.batch_size, "train.");
        detail::get_field(t, "lr", c.train.lr, "train.");
        detail::get_field(t, "warmup_steps", c.train.warmup_steps, "train.");
        detail::get_field(t, "beta1", c.train.beta1, "train.");
        detail::get_field(t, "beta2", c.train.beta2, "train.");
        detail::get_field(t, "weight_decay", c.train.weight_decay, "train.");
        detail::get_field(t, "p_mean", c.train.p_mean, "train.");
        detail::get_field(t, "p_std", c.train.p_std, "train.");
        detail::get_field(t, "lambda_vid", c.train.lambda_vid, "train.");
        detail::get_field(t, "lambda_bal", c.train.lambda_bal, "train.");
        detail::get_field(t, "checkpoint_interval", c.train.checkpoint_interval, "train.");
        detail::get_field(t, "omega", c.train.omega, "train.");
        detail::get_field(t, "stages", c.train.stages, "train.");
        detail::get_field(t, "episodes", c.train.episodes, "train.");
        detail::get_field(t, "data_seed", c.train.data_seed, "train.");
        detail::get_field(t, "stage_labels", c.train.stage_labels, "train.");
    }
    return c;
}

/// Cross-field validation. Throws ConfigError naming the offending field.
inline void validate(const RunConfig& c) {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("invalid config: " + msg);
    };
    require(c.precision == "f32" || c.precision == "f64", "precision must be \"f32\" or \"f64\"");

    require(c.teacher.layers >= 1, "teacher.layers must be >= 1");
    require(c.teacher.d >= 1, "teacher.d must be >= 1");
    require(c.teacher.heads >= 1 && c.teacher.d % c.teacher.heads == 0,
            "teacher.d must be divisible by teacher.heads");
    require(c.teacher.ffn >= 1, "teacher.ffn must be >= 1");
    require(c.teacher.n_img >= 1, "teacher.n_img must be >= 1");
    require(c.teacher.n_text >= 0, "teacher.n_text must be >= 0");
    require(c.teacher.extract_layer >= 0 && c.teacher.extract_layer <= c.teacher.layers,
            "teacher.extract_layer must satisfy 0 <= extract_layer <= teacher.layers");

    require(c.student.blocks >= 1, "student.blocks must be >= 1");
    require(c.student.d >= 1, "student.d must be >= 1");
    require(c.student.heads >= 1 && c.student.d % c.student.heads == 0,
            "student.d must be divisible by student.heads");
    require(c.student.head_dim() % 2 == 0, "student head dim (d/heads) must be even");
    require(c.student.t >= 1 && c.student.h >= 1 && c.student.w >= 1,
            "student patch grid dims must be >= 1");
    require(c.student.text_len >= 1, "student.text_len must be >= 1");
    require(c.student.action_len >= 1, "student.action_len must be >= 1");
    require(c.student.action_dim >= 1 && c.student.video_dim >= 1,
            "student stream dims must be >= 1");

    require(c.ckt.d_tea == c.teacher.d, "ckt.d_tea must equal teacher.d");
    require(c.ckt.d_stu == c.student.d, "ckt.d_stu must equal student.d");
    require(c.ckt.d_b >= 1, "ckt.d_b must be >= 1");
    require(c.ckt.k_g >= 0 && c.ckt.k_s >= 0, "ckt.k_g and ckt.k_s must be >= 0");
    require(c.ckt.heads >= 1 && c.ckt.d_stu % c.ckt.heads == 0,
            "ckt.d_stu must be divisible by ckt.heads");
    require(c.ckt.dropout >= 0.0 && c.ckt.dropout < 1.0, "ckt.dropout must be in [0,1)");
    require(c.ckt.r_g >= 1 && c.ckt.r_s >= 1, "ckt.r_g and ckt.r_s must be >= 1");
    require(c.ckt.m >= 1, "ckt.m must be >= 1");
    require(c.ckt.k >= 1 && c.ckt.k <= c.ckt.m, "ckt.k must satisfy 1 <= k <= m (top-k <= adapter count)");
    require(c.ckt.d_gate >= 1, "ckt.d_gate must be >= 1");

    require(c.train.steps >= 0, "train.steps must be >= 0");
    require(c.train.batch_size >= 1, "train.batch_size must be >= 1");
    require(c.train.lr > 0, "train.lr must be > 0");
    require(c.train.warmup_steps >= 0, "train.warmup_steps must be >= 0");
    require(c.train.beta1 > 0 && c.train.beta1 < 1, "train.beta1 must be in (0,1)");
    require(c.train.beta2 > 0 && c.train.beta2 < 1, "train.beta2 must be in (0,1)");
    require(c.train.weight_decay >= 0, "train.weight_decay must be >= 0");
    require(c.train.p_std > 0, "train.p_std must be > 0");
    require(c.train.lambda_vid >= 0 && c.train.lambda_bal >= 0,
            "train loss weights must be >= 0");
    require(c.train.checkpoint_interval >= 1, "train.checkpoint_interval must be >= 1");
    require(c.train.omega == "constant" || c.train.omega == "inv_var",
            "train.omega must be \"constant\" or \"inv_var\"");
    require(c.train.stages >= 1, "train.stages must be >= 1");
    require(c.train.episodes >= 1, "train.episodes must be >= 1");
}

/// Applies one dotted-path override ("ckt.k=9") onto a config JSON document.
/// The path must name an existing field.
inline void apply_override(json& doc, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like path.to.key=value: " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    json* cur = &doc;
    size_t pos = 0;
    std::string walked;
    while (true) {
        size_t dot = path.find('.', pos);
        std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        walked += (walked.empty() ? "" : ".") + key;
        if (!cur->contains(key)) throw ConfigError("unknown config key in override: " + walked);
        cur = &(*cur)[key];
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = json(value);  // plain strings need no quotes
    *cur = parsed;
}

inline RunConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    // Merge onto defaults so overrides can address every known key.
    json doc = to_json(RunConfig{});
    doc.merge_patch(j);
    for (const auto& o : overrides) apply_override(doc, o);
    RunConfig c = config_from_json(doc);
    validate(c);
    return c;
}

/// Desk-scale defaults small enough for exhaustive oracles on one CPU core.
/// Inverse-variance loss weighting keeps the per-step objective from being
/// dominated by rare huge-sigma draws at desk batch sizes.
inline RunConfig desk_config() {
    RunConfig c;
    c.train.omega = "inv_var";
    return c;
}

/// Miniature dimensions for finite-difference sweeps over every parameter.
inline RunConfig tiny_config() {
    RunConfig c;
    c.precision = "f64";
    c.teacher = {3, 12, 2, 16, 4, 2, 2, 1};
    c.student.blocks = 2;
    c.student.d = 8;
    c.student.heads = 2;
    c.student.t = 2;
    c.student.h = 2;
    c.student.w = 2;
    c.student.text_len = 3;
    c.student.action_len = 2;
    c.student.action_dim = 3;
    c.student.video_dim = 3;
    c.ckt.d_tea = 12;
    c.ckt.d_stu = 8;
    c.ckt.d_b = 4;
    c.ckt.k_g = 2;
    c.ckt.k_s = 2;
    c.ckt.heads = 2;
    c.ckt.r_g = 2;
    c.ckt.r_s = 2;
    c.ckt.m = 3;
    c.ckt.k = 2;
    c.ckt.d_gate = 4;
    c.train.batch_size = 2;
    return c;
}

/// Reference dimensions used only for analytic parameter accounting.
inline RunConfig paper_config() {
    RunConfig c;
    c.teacher = {40, 5120, 40, 20480, 256, 64, 20, 1};
    c.student.blocks = 28;
    c.student.d = 2048;
    c.student.heads = 16;
    c.student.t = 4;
    c.student.h = 8;
    c.student.w = 8;
    c.student.text_len = 512;
    c.student.action_len = 16;
    c.student.action_dim = 32;
    c.student.video_dim = 64;
    c.ckt.d_tea = 5120;
    c.ckt.d_stu = 2048;
    c.ckt.d_b = 512;
    c.ckt.k_g = 32;
    c.ckt.k_s = 32;
    c.ckt.heads = 16;
    c.ckt.r_g = 64;
    c.ckt.r_s = 64;
    c.ckt.m = 8;
    c.ckt.k = 2;
    c.ckt.d_gate = 512;
    return c;
}

}  // namespace cktwam

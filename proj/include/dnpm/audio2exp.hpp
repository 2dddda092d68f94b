#pragma once

// Speech-to-expression regression: an autoregressive transformer decoder that
// maps aligned audio features to 52-channel blendshape frames via causal
// self-attention over past motions and alignment-masked cross-attention over
// the audio, plus the animation driver that feeds the detailed face model.

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnpm/audio.hpp"
#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/encoder.hpp"
#include "dnpm/geometry.hpp"
#include "dnpm/mesh.hpp"
#include "dnpm/nn.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

// ---------------------------------------------------------------------------
// Expression tracks (ARKit-style blendshape channels)
// ---------------------------------------------------------------------------

constexpr int kNumArkitChannels = 52;

// Canonical blendshape channel order (left eye, right eye, mouth and jaw,
// brows/cheeks/nose, tongue); CSV files carry this exact header.
inline const std::array<std::string, kNumArkitChannels>& arkit_channel_names() {
    static const std::array<std::string, kNumArkitChannels> names = {
        "eyeBlinkLeft",      "eyeLookDownLeft",   "eyeLookInLeft",     "eyeLookOutLeft",
        "eyeLookUpLeft",     "eyeSquintLeft",     "eyeWideLeft",       "eyeBlinkRight",
        "eyeLookDownRight",  "eyeLookInRight",    "eyeLookOutRight",   "eyeLookUpRight",
        "eyeSquintRight",    "eyeWideRight",      "jawForward",        "jawLeft",
        "jawRight",          "jawOpen",           "mouthClose",        "mouthFunnel",
        "mouthPucker",       "mouthLeft",         "mouthRight",        "mouthSmileLeft",
        "mouthSmileRight",   "mouthFrownLeft",    "mouthFrownRight",   "mouthDimpleLeft",
        "mouthDimpleRight",  "mouthStretchLeft",  "mouthStretchRight", "mouthRollLower",
        "mouthRollUpper",    "mouthShrugLower",   "mouthShrugUpper",   "mouthPressLeft",
        "mouthPressRight",   "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft",
        "mouthUpperUpRight", "browDownLeft",      "browDownRight",     "browInnerUp",
        "browOuterUpLeft",   "browOuterUpRight",  "cheekPuff",         "cheekSquintLeft",
        "cheekSquintRight",  "noseSneerLeft",     "noseSneerRight",    "tongueOut"};
    return names;
}

// [T, 52] rows of blendshape weights in [0, 1].
using ExpressionSeq = Tensor;

inline void check_expression_seq(const ExpressionSeq& seq, bool allow_empty = false) {
    require(seq.rank() == 2 && seq.dim(1) == kNumArkitChannels,
            "expression sequence must be [T, 52]");
    require(allow_empty || seq.dim(0) >= 1, "expression sequence must have at least one frame");
    for (std::int64_t i = 0; i < seq.numel(); ++i)
        require(std::isfinite(seq[i]) && 0.0 <= seq[i] && seq[i] <= 1.0,
                "expression sequence entries must be finite and in [0, 1]");
}

inline void save_arkit_csv(const std::filesystem::path& path, const ExpressionSeq& seq) {
    check_expression_seq(seq);
    std::string out;
    const auto& names = arkit_channel_names();
    for (int c = 0; c < kNumArkitChannels; ++c) {
        if (c) out += ",";
        out += names[static_cast<std::size_t>(c)];
    }
    out += "\n";
    for (int t = 0; t < seq.dim(0); ++t) {
        for (int c = 0; c < kNumArkitChannels; ++c) {
            if (c) out += ",";
            out += format_metric(seq[static_cast<std::int64_t>(t) * kNumArkitChannels + c], 12);
        }
        out += "\n";
    }
    write_text_file(path, out);
}

inline ExpressionSeq load_arkit_csv(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "arkit csv: empty file: " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto& names = arkit_channel_names();
    std::istringstream hs(line);
    std::string field;
    for (int c = 0; c < kNumArkitChannels; ++c) {
        require(static_cast<bool>(std::getline(hs, field, ',')),
                "arkit csv: header has fewer than 52 channels");
        require(field == names[static_cast<std::size_t>(c)],
                "arkit csv: header channel " + std::to_string(c) + " is '" + field +
                    "', expected '" + names[static_cast<std::size_t>(c)] + "'");
    }
    require(!std::getline(hs, field, ','), "arkit csv: header has more than 52 channels");
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        for (int c = 0; c < kNumArkitChannels; ++c) {
            require(static_cast<bool>(std::getline(ls, field, ',')),
                    "arkit csv: row has fewer than 52 columns");
            values.push_back(std::stod(field));
        }
        require(!std::getline(ls, field, ','), "arkit csv: row has more than 52 columns");
    }
    require(!values.empty(), "arkit csv: no data rows: " + path.string());
    const int rows = static_cast<int>(values.size()) / kNumArkitChannels;
    ExpressionSeq seq({rows, kNumArkitChannels}, std::move(values));
    check_expression_seq(seq);
    return seq;
}

// ---------------------------------------------------------------------------
// Decoder configuration and parameters
// ---------------------------------------------------------------------------

struct Audio2ExpConfig {
    int audio_dim = 26;    // d_a of the bound feature provider
    int width = 32;        // model width
    int num_layers = 2;    // decoder blocks
    double fps_out = 30.0; // output expression frame rate

    void check() const {
        require(audio_dim >= 1 && width >= 1 && num_layers >= 1,
                "audio2exp: dimensions must be positive");
        require(fps_out > 0.0, "audio2exp: fps_out must be positive");
    }
};

inline void to_json(nlohmann::json& j, const Audio2ExpConfig& c) {
    j = {{"audio_dim", c.audio_dim},
         {"width", c.width},
         {"num_layers", c.num_layers},
         {"fps_out", c.fps_out}};
}

inline void from_json(const nlohmann::json& j, Audio2ExpConfig& c) {
    c.audio_dim = j.value("audio_dim", c.audio_dim);
    c.width = j.value("width", c.width);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.fps_out = j.value("fps_out", c.fps_out);
}

inline ParamStore init_audio2exp_params(const Audio2ExpConfig& cfg, Rng& rng) {
    cfg.check();
    ParamStore p;
    const int w = cfg.width;
    auto lin = [&](const std::string& name, int cin, int cout) {
        p.create(name + ".w", Tensor::randn({cin, cout}, rng, 1.0 / std::sqrt(cin)));
        p.create(name + ".b", Tensor::zeros({1, cout}));
    };
    auto ln = [&](const std::string& name) {
        p.create(name + ".g", Tensor::full({1, w}, 1.0));
        p.create(name + ".b", Tensor::zeros({1, w}));
    };
    p.create("a2e.start", Tensor::randn({1, w}, rng, 1.0 / std::sqrt(w)));
    lin("a2e.embed", kNumArkitChannels, w);
    lin("a2e.audio", cfg.audio_dim, w);
    for (int k = 0; k < cfg.num_layers; ++k) {
        std::string base = "a2e.l" + std::to_string(k);
        ln(base + ".ln1");
        for (const char* proj : {"wq", "wk", "wv", "wo"})
            p.create(base + ".self." + proj, Tensor::randn({w, w}, rng, 1.0 / std::sqrt(w)));
        ln(base + ".ln2");
        for (const char* proj : {"wq", "wk", "wv", "wo"})
            p.create(base + ".cross." + proj, Tensor::randn({w, w}, rng, 1.0 / std::sqrt(w)));
        ln(base + ".ln3");
        lin(base + ".ffn.1", w, 4 * w);
        lin(base + ".ffn.2", 4 * w, w);
    }
    ln("a2e.ln_out");
    lin("a2e.head", w, kNumArkitChannels);
    return p;
}

// ---------------------------------------------------------------------------
// Audio/output frame alignment
// ---------------------------------------------------------------------------

// Number of audio feature frames whose start time precedes the end of output
// frame t (always at least one, clamped to the clip length): output frame t
// may attend exactly to audio frames [0, visible).
inline int visible_audio_frames(int t, double fps_audio, double fps_out, int num_audio_frames) {
    require(t >= 0 && num_audio_frames >= 1 && fps_audio > 0.0 && fps_out > 0.0,
            "visible_audio_frames: bad arguments");
    int count = static_cast<int>(std::ceil((t + 1) * fps_audio / fps_out - 1e-9));
    return std::min(num_audio_frames, std::max(1, count));
}

// Output frames for a clip of num_audio_frames features (at least one).
inline int rollout_length(int num_audio_frames, double fps_audio, double fps_out) {
    require(num_audio_frames >= 1 && fps_audio > 0.0 && fps_out > 0.0,
            "rollout_length: bad arguments");
    return std::max(1, static_cast<int>(std::llround(num_audio_frames * fps_out / fps_audio)));
}

namespace a2e {

inline Tensor positional_encoding(int length, int width) {
    Tensor pe = Tensor::zeros({length, width});
    for (int i = 0; i < length; ++i)
        for (int k = 0; k < width; ++k) {
            double angle = i / std::pow(10000.0, 2.0 * (k / 2) / width);
            pe[static_cast<std::int64_t>(i) * width + k] = (k % 2 == 0) ? std::sin(angle)
                                                                        : std::cos(angle);
        }
    return pe;
}

inline Tensor causal_mask(int length) {
    Tensor m = Tensor::zeros({length, length});
    for (int i = 0; i < length; ++i)
        for (int j = i + 1; j < length; ++j) m[static_cast<std::int64_t>(i) * length + j] = -1e30;
    return m;
}

inline Tensor alignment_mask(int length, int num_audio_frames, double fps_audio, double fps_out) {
    Tensor m = Tensor::zeros({length, num_audio_frames});
    for (int i = 0; i < length; ++i) {
        int visible = visible_audio_frames(i, fps_audio, fps_out, num_audio_frames);
        for (int j = visible; j < num_audio_frames; ++j)
            m[static_cast<std::int64_t>(i) * num_audio_frames + j] = -1e30;
    }
    return m;
}

// Single-head scaled dot-product attention; masked scores sit at ~-1e30, so
// their softmax weights underflow to exactly zero and masked positions cannot
// leak one bit into the output.
inline ad::Var attention(ad::Tape& t, ad::Var queries, ad::Var keys_values, ad::Var wq, ad::Var wk,
                         ad::Var wv, ad::Var wo, const Tensor& mask) {
    const int w = t.val(wq).dim(1);
    ad::Var scores = t.scale(t.matmul(t.matmul(queries, wq), t.transpose(t.matmul(keys_values, wk))),
                             1.0 / std::sqrt(static_cast<double>(w)));
    ad::Var weights = ad::softmax_rows(t, t.add(scores, t.constant(mask)));
    return t.matmul(t.matmul(weights, t.matmul(keys_values, wv)), wo);
}

// Predictions for output frames 0..T-1, where T = prev frames + 1. Position 0
// is the learned start token; position i > 0 embeds prev row i-1. `prev` may
// have zero rows (empty prefix).
inline ad::Var decoder_graph(ad::Tape& t, const Audio2ExpConfig& cfg,
                             const std::map<std::string, ad::Var>& p, const Tensor& prev,
                             const AudioFeatureSeq& audio) {
    cfg.check();
    audio.check();
    require(audio.dim() == cfg.audio_dim, "audio2exp: audio feature dim " +
                                              std::to_string(audio.dim()) + " != configured " +
                                              std::to_string(cfg.audio_dim));
    require(prev.rank() == 2 && prev.dim(1) == kNumArkitChannels,
            "audio2exp: prefix must be [t, 52]");
    const int T = prev.dim(0) + 1;
    const int Ta = audio.num_frames();

    ad::Var x = p.at("a2e.start");
    if (prev.dim(0) > 0) {
        ad::Var emb = ad::linear(t, t.constant(prev), p.at("a2e.embed.w"), p.at("a2e.embed.b"));
        x = t.concat_rows({x, emb});
    }
    x = t.add(x, t.constant(positional_encoding(T, cfg.width)));
    ad::Var audio_h =
        ad::linear(t, t.constant(audio.features), p.at("a2e.audio.w"), p.at("a2e.audio.b"));
    const Tensor cmask = causal_mask(T);
    const Tensor amask = alignment_mask(T, Ta, audio.fps, cfg.fps_out);

    for (int k = 0; k < cfg.num_layers; ++k) {
        std::string base = "a2e.l" + std::to_string(k);
        ad::Var h = ad::layernorm_rows(t, x, p.at(base + ".ln1.g"), p.at(base + ".ln1.b"));
        x = t.add(x, attention(t, h, h, p.at(base + ".self.wq"), p.at(base + ".self.wk"),
                               p.at(base + ".self.wv"), p.at(base + ".self.wo"), cmask));
        h = ad::layernorm_rows(t, x, p.at(base + ".ln2.g"), p.at(base + ".ln2.b"));
        x = t.add(x, attention(t, h, audio_h, p.at(base + ".cross.wq"), p.at(base + ".cross.wk"),
                               p.at(base + ".cross.wv"), p.at(base + ".cross.wo"), amask));
        h = ad::layernorm_rows(t, x, p.at(base + ".ln3.g"), p.at(base + ".ln3.b"));
        ad::Var inner = t.relu(ad::linear(t, h, p.at(base + ".ffn.1.w"), p.at(base + ".ffn.1.b")));
        x = t.add(x, ad::linear(t, inner, p.at(base + ".ffn.2.w"), p.at(base + ".ffn.2.b")));
    }
    ad::Var h = ad::layernorm_rows(t, x, p.at("a2e.ln_out.g"), p.at("a2e.ln_out.b"));
    return t.sigmoid(ad::linear(t, h, p.at("a2e.head.w"), p.at("a2e.head.b")));
}

}  // namespace a2e

// Next-frame expression from a (possibly empty) prefix of past frames.
inline Tensor decoder_step(const Audio2ExpConfig& cfg, const ParamStore& params,
                           const ExpressionSeq& past, const AudioFeatureSeq& audio) {
    check_expression_seq(past, /*allow_empty=*/true);
    ad::Tape t;
    auto p = make_constants(t, params);
    ad::Var preds = a2e::decoder_graph(t, cfg, p, past, audio);
    const int T = t.val(preds).dim(0);
    return t.val(t.slice_rows(preds, T - 1, T));  // [1, 52]
}

// Autoregressive generation: T = rollout_length frames of repeated
// decoder_step calls, each feeding back all previous predictions.
inline ExpressionSeq rollout(const Audio2ExpConfig& cfg, const ParamStore& params,
                             const AudioFeatureSeq& audio) {
    audio.check();
    const int T = rollout_length(audio.num_frames(), audio.fps, cfg.fps_out);
    ExpressionSeq out({T, kNumArkitChannels});
    for (int t = 0; t < T; ++t) {
        ExpressionSeq past({t, kNumArkitChannels},
                           std::vector<double>(out.vec().begin(),
                                               out.vec().begin() + static_cast<std::int64_t>(t) *
                                                                       kNumArkitChannels));
        Tensor next = decoder_step(cfg, params, past, audio);
        for (int c = 0; c < kNumArkitChannels; ++c)
            out[static_cast<std::int64_t>(t) * kNumArkitChannels + c] = next[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct AudioExpClip {
    AudioFeatureSeq audio;
    ExpressionSeq gt{std::vector<int>{1, kNumArkitChannels}};
};

struct Audio2ExpHyper {
    int steps = 2000;
    int batch_size = 1;  // clips per step
    double lr = 1e-3;    // cosine-decayed to zero over `steps`
    double lambda_exp = 10.0;
    int log_interval = 20;
    int checkpoint_interval = 500;
    std::uint64_t seed = 1;

    void check() const {
        require(steps >= 0 && batch_size >= 1, "audio2exp hyper: invalid steps/batch");
        require(lr > 0.0 && lambda_exp >= 0.0, "audio2exp hyper: invalid lr/lambda");
        require(log_interval >= 1 && checkpoint_interval >= 1,
                "audio2exp hyper: intervals must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const Audio2ExpHyper& h) {
    j = {{"steps", h.steps},
         {"batch_size", h.batch_size},
         {"lr", h.lr},
         {"lambda_exp", h.lambda_exp},
         {"log_interval", h.log_interval},
         {"checkpoint_interval", h.checkpoint_interval},
         {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, Audio2ExpHyper& h) {
    h.steps = j.value("steps", h.steps);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.lr = j.value("lr", h.lr);
    h.lambda_exp = j.value("lambda_exp", h.lambda_exp);
    h.log_interval = j.value("log_interval", h.log_interval);
    h.checkpoint_interval = j.value("checkpoint_interval", h.checkpoint_interval);
    h.seed = j.value("seed", h.seed);
}

// Identity-weighted expression basis: row b is sum_a w_id[a] * core[a, b, :],
// so proxy vertices are expressions @ basis.
inline Tensor expression_vertex_basis(const CoreTensor& core, const std::vector<double>& w_id) {
    require(static_cast<int>(w_id.size()) == core.n_id(),
            "expression_vertex_basis: w_id size must match core");
    const int n_exp = core.n_exp(), cols = 3 * core.n_vert();
    Tensor basis = Tensor::zeros({n_exp, cols});
    for (int a = 0; a < core.n_id(); ++a) {
        const double w = w_id[static_cast<std::size_t>(a)];
        for (int b = 0; b < n_exp; ++b)
            for (int c = 0; c < cols; ++c)
                basis[static_cast<std::int64_t>(b) * cols + c] +=
                    w * core.data[(static_cast<std::int64_t>(a) * n_exp + b) * cols + c];
    }
    return basis;
}

struct Audio2ExpLosses {
    double l_vertex = 0.0;  // sum over frames of the per-frame mean |dV|
    double l_exp = 0.0;     // sum over frames of the per-frame mean |dw|
};

// Reduction convention for both terms: mean over dimensions within a frame,
// summed over frames.
inline Audio2ExpLosses audio2exp_losses(const CoreTensor& core, const std::vector<double>& w_id,
                                        const ExpressionSeq& pred, const ExpressionSeq& gt) {
    require(pred.shape() == gt.shape(), "audio2exp_losses: shape mismatch");
    require(pred.rank() == 2 && pred.dim(1) == kNumArkitChannels,
            "audio2exp_losses: sequences must be [T, 52]");
    require(core.n_exp() == kNumArkitChannels, "audio2exp_losses: core must have 52 expressions");
    const int T = pred.dim(0);
    Tensor basis = expression_vertex_basis(core, w_id);
    const int cols = basis.dim(1);
    Audio2ExpLosses out;
    for (int t = 0; t < T; ++t) {
        double de = 0.0;
        for (int c = 0; c < kNumArkitChannels; ++c)
            de += std::fabs(pred[static_cast<std::int64_t>(t) * kNumArkitChannels + c] -
                            gt[static_cast<std::int64_t>(t) * kNumArkitChannels + c]);
        out.l_exp += de / kNumArkitChannels;
        double dv = 0.0;
        for (int c = 0; c < cols; ++c) {
            double vp = 0.0, vg = 0.0;
            for (int b = 0; b < kNumArkitChannels; ++b) {
                vp += pred[static_cast<std::int64_t>(t) * kNumArkitChannels + b] *
                      basis[static_cast<std::int64_t>(b) * cols + c];
                vg += gt[static_cast<std::int64_t>(t) * kNumArkitChannels + b] *
                      basis[static_cast<std::int64_t>(b) * cols + c];
            }
            dv += std::fabs(vp - vg);
        }
        out.l_vertex += dv / cols;
    }
    return out;
}

struct TrainAudio2ExpResult {
    ParamStore params;
    double final_l_vertex = 0.0;
    double final_l_exp = 0.0;
    long steps_run = 0;
};

// Teacher-forced training of L_vertex + lambda_exp * L_exp. `w_id_train`
// holds one identity vector per clip, or a single shared vector. Writes
// a2e.ckpt and metrics.csv (step, l_vertex, l_exp, lr) under out_dir.
inline TrainAudio2ExpResult train_audio2exp(const std::vector<AudioExpClip>& clips,
                                            const CoreTensor& core,
                                            const std::vector<std::vector<double>>& w_id_train,
                                            const Audio2ExpConfig& cfg,
                                            const Audio2ExpHyper& hyper,
                                            const std::filesystem::path& out_dir) {
    cfg.check();
    hyper.check();
    require(!clips.empty(), "train_audio2exp: dataset must be non-empty");
    require(core.n_exp() == kNumArkitChannels, "train_audio2exp: core must have 52 expressions");
    require(w_id_train.size() == 1 || w_id_train.size() == clips.size(),
            "train_audio2exp: need one w_id per clip or a single shared one");
    for (const auto& clip : clips) {
        clip.audio.check();
        require(clip.audio.dim() == cfg.audio_dim,
                "train_audio2exp: clip audio dim does not match config");
        require(clip.gt.rank() == 2 && clip.gt.dim(0) >= 1 &&
                    clip.gt.dim(1) == kNumArkitChannels,
                "train_audio2exp: ground truth must be [T, 52]");
    }
    std::filesystem::create_directories(out_dir);

    std::vector<Tensor> bases;
    for (std::size_t i = 0; i < clips.size(); ++i)
        bases.push_back(expression_vertex_basis(
            core, w_id_train[w_id_train.size() == 1 ? 0 : i]));

    Rng rng(hyper.seed);
    TrainAudio2ExpResult result;
    result.params = init_audio2exp_params(cfg, rng);

    AdamConfig acfg;
    acfg.lr = hyper.lr;
    Adam opt(acfg);

    std::string csv = "step,l_vertex,l_exp,lr\n";
    auto save = [&](const std::filesystem::path& dir, long step) {
        CheckpointMeta meta;
        meta.config =
            nlohmann::json{{"audio2exp", nlohmann::json(cfg)}, {"hyper", nlohmann::json(hyper)}};
        meta.step = step;
        meta.seed = hyper.seed;
        save_checkpoint(dir / "a2e.ckpt", result.params, meta);
    };

    for (long step = 0; step < hyper.steps; ++step) {
        const double lr_scale = cosine_lr_scale(step, hyper.steps);
        std::map<std::string, Tensor> grads;
        double vertex_sum = 0.0, exp_sum = 0.0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(clips.size())));
            const AudioExpClip& clip = clips[idx];
            const int T = clip.gt.dim(0);
            Tensor prev({T - 1, kNumArkitChannels},
                        std::vector<double>(clip.gt.vec().begin(),
                                            clip.gt.vec().begin() +
                                                static_cast<std::int64_t>(T - 1) *
                                                    kNumArkitChannels));
            ad::Tape t;
            auto p = make_leaves(t, result.params);
            ad::Var pred = a2e::decoder_graph(t, cfg, p, prev, clip.audio);
            ad::Var gt = t.constant(clip.gt);
            ad::Var basis = t.constant(bases[idx]);
            ad::Var l_exp = t.scale(ad::l1_mean(t, pred, gt), static_cast<double>(T));
            ad::Var l_vertex = t.scale(
                ad::l1_mean(t, t.matmul(pred, basis), t.matmul(gt, basis)), static_cast<double>(T));
            ad::Var loss = t.add(l_vertex, t.scale(l_exp, hyper.lambda_exp));
            vertex_sum += t.val(l_vertex)[0];
            exp_sum += t.val(l_exp)[0];

            std::vector<std::string> names = result.params.names();
            std::vector<ad::Var> wrt;
            for (const auto& n : names) wrt.push_back(p.at(n));
            std::vector<ad::Var> gs = t.gradients(loss, wrt);
            for (std::size_t i = 0; i < names.size(); ++i)
                accumulate_grad(grads, names[i], t.val(gs[i]));
        }
        for (auto& [name, g] : grads)
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= hyper.batch_size;
        const double l_vertex = vertex_sum / hyper.batch_size;
        const double l_exp = exp_sum / hyper.batch_size;
        opt.step(result.params, grads, lr_scale);

        if (!std::isfinite(l_vertex) || !std::isfinite(l_exp) || !result.params.all_finite()) {
            std::filesystem::path diag = out_dir / "diagnostic";
            std::filesystem::create_directories(diag);
            save(diag, step);
            write_text_file(out_dir / "metrics.csv", csv);
            throw NumericError("train_audio2exp: non-finite loss at step " +
                               std::to_string(step) + "; diagnostic checkpoint written to " +
                               diag.string());
        }
        result.final_l_vertex = l_vertex;
        result.final_l_exp = l_exp;
        if (step % hyper.log_interval == 0 || step == hyper.steps - 1) {
            csv += std::to_string(step) + "," + format_metric(l_vertex, 9) + "," +
                   format_metric(l_exp, 9) + "," + format_metric(hyper.lr * lr_scale, 9) + "\n";
        }
        if ((step + 1) % hyper.checkpoint_interval == 0) save(out_dir, step + 1);
        result.steps_run = step + 1;
    }

    save(out_dir, result.steps_run);
    write_text_file(out_dir / "metrics.csv", csv);
    return result;
}

// ---------------------------------------------------------------------------
// Animation driver
// ---------------------------------------------------------------------------

// Everything needed to turn (w_id, w_exp) into a detailed mesh.
struct Detailed3dmmBundle {
    BilinearModel model;
    EncoderConfig ecfg;
    ParamStore enc_params;
    GeneratorConfig gcfg;
    ParamStore gen_params;
    LatentWPlus wbar;
    double s = 1.0;
    int subdiv_levels = 0;
    double d_max = 0.002;
};

struct AnimationResult {
    ExpressionSeq expressions{std::vector<int>{1, kNumArkitChannels}};
    std::vector<Mesh> frames;
};

// Rolls expressions out of the audio and renders one detailed mesh per frame
// with the fixed identity vector.
inline AnimationResult animate(const Audio2ExpConfig& cfg, const ParamStore& params,
                               const AudioFeatureSeq& audio, const std::vector<double>& w_id,
                               const Detailed3dmmBundle& bundle) {
    require(bundle.ecfg.exp_dim == kNumArkitChannels,
            "animate: encoder must take 52-channel expressions");
    AnimationResult out;
    out.expressions = rollout(cfg, params, audio);
    const int T = out.expressions.dim(0);
    for (int t = 0; t < T; ++t) {
        std::vector<double> w_exp(static_cast<std::size_t>(kNumArkitChannels));
        for (int c = 0; c < kNumArkitChannels; ++c)
            w_exp[static_cast<std::size_t>(c)] =
                out.expressions[static_cast<std::int64_t>(t) * kNumArkitChannels + c];
        out.frames.push_back(detailed3dmm_generate(bundle.model, w_id, w_exp, bundle.ecfg,
                                                   bundle.enc_params, bundle.gcfg,
                                                   bundle.gen_params, bundle.wbar, bundle.s,
                                                   bundle.subdiv_levels, bundle.d_max));
    }
    return out;
}

// Numbered OBJ frames (frame_000000.obj, ...) plus manifest.json carrying the
// frame rate, frame count, and identity vector.
inline void write_animation(const std::filesystem::path& dir, const AnimationResult& result,
                            double fps, const std::vector<double>& w_id) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < result.frames.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%06zu.obj", t);
        write_obj(result.frames[t], dir / name);
    }
    nlohmann::json manifest = {{"fps", fps},
                               {"frame_count", result.frames.size()},
                               {"w_id", w_id}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace dnpm

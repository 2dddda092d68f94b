#pragma once

// Style-based displacement-map generator: a latent mapping network (z -> w)
// and a modulated-convolution synthesis network driven by one style vector
// per layer (w+ = L x d). Two style layers per resolution level, starting
// from a learned 4x4 constant; a final unmodulated 1x1 conv + tanh produces
// the single-channel map, stored on the unit scale as (tanh + 1) / 2.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/image.hpp"
#include "dnpm/nn.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

inline int log2_exact(int v) {
    int l = 0, x = v;
    while (x > 1) {
        require(x % 2 == 0, "value must be a power of two, got " + std::to_string(v));
        x /= 2;
        ++l;
    }
    return l;
}

struct GeneratorConfig {
    int out_resolution = 64;  // power of two >= 8
    int latent_dim = 64;      // d
    int mapping_layers = 8;
    double mapping_slope = 0.2;  // lrelu slope in the mapping network
    std::vector<int> channels;   // per level (4x4 first); derived when empty

    // Resolution levels 4, 8, ..., out_resolution.
    int num_levels() const { return log2_exact(out_resolution) - 1; }
    // Two style layers per level.
    int num_style_layers() const { return 2 * num_levels(); }
    int level_resolution(int level) const { return 4 << level; }

    std::vector<int> channel_schedule() const {
        if (!channels.empty()) return channels;
        std::vector<int> sched(static_cast<std::size_t>(num_levels()));
        for (int l = 0; l < num_levels(); ++l)
            sched[l] = std::max(8, 48 >> std::max(0, l - 1));  // 48,48,24,12,8,...
        return sched;
    }

    void check() const {
        require(out_resolution >= 8, "out_resolution must be >= 8");
        log2_exact(out_resolution);
        require(latent_dim > 0, "latent_dim must be positive");
        require(mapping_layers >= 1, "mapping_layers must be >= 1");
        std::vector<int> sched = channel_schedule();
        require(static_cast<int>(sched.size()) == num_levels(),
                "channel schedule must have one entry per resolution level");
        for (std::size_t i = 1; i < sched.size(); ++i)
            require(sched[i] <= sched[i - 1], "channel schedule must be non-increasing");
        for (int c : sched) require(c > 0, "channel counts must be positive");
    }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"out_resolution", c.out_resolution},
         {"latent_dim", c.latent_dim},
         {"mapping_layers", c.mapping_layers},
         {"mapping_slope", c.mapping_slope},
         {"channels", c.channels}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c.out_resolution = j.value("out_resolution", c.out_resolution);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
    c.mapping_slope = j.value("mapping_slope", c.mapping_slope);
    c.channels = j.value("channels", c.channels);
}

using LatentW = Tensor;      // [1, d]
using LatentWPlus = Tensor;  // [L, d]

inline LatentWPlus broadcast_w_to_wplus(const LatentW& w, int L) {
    require(w.rank() == 2 && w.dim(0) == 1, "broadcast_w_to_wplus: w must be [1,d]");
    require(L >= 1, "broadcast_w_to_wplus: L must be >= 1");
    Tensor out({L, w.dim(1)});
    for (int i = 0; i < L; ++i)
        for (int c = 0; c < w.dim(1); ++c) out[static_cast<std::int64_t>(i) * w.dim(1) + c] = w[c];
    return out;
}

// Parameter names:
//   map.fc<k>.w [d,d], map.fc<k>.b [1,d]
//   syn.const [C0,4,4]
//   syn.l<level>.c<j>.affine.w [d,Cin], .affine.b [1,Cin]   (style -> scales)
//   syn.l<level>.c<j>.conv.w [Cout, Cin*9], .conv.b [Cout,1]
//   syn.l<level>.c<j>.noise [1,1]                            (learned scale)
//   syn.out.w [1, Clast], syn.out.b [1,1]
inline ParamStore init_generator_params(const GeneratorConfig& cfg, Rng& rng) {
    cfg.check();
    ParamStore p;
    int d = cfg.latent_dim;
    for (int k = 0; k < cfg.mapping_layers; ++k) {
        p.create("map.fc" + std::to_string(k) + ".w",
                 Tensor::randn({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
        p.create("map.fc" + std::to_string(k) + ".b", Tensor::zeros({1, d}));
    }
    std::vector<int> ch = cfg.channel_schedule();
    p.create("syn.const", Tensor::randn({ch[0], 4, 4}, rng));
    for (int level = 0; level < cfg.num_levels(); ++level) {
        for (int j = 0; j < 2; ++j) {
            int cin = (level == 0 && j == 0) ? ch[0] : (j == 0 ? ch[level - 1] : ch[level]);
            int cout = ch[level];
            std::string base = "syn.l" + std::to_string(level) + ".c" + std::to_string(j);
            p.create(base + ".affine.w",
                     Tensor::randn({d, cin}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
            p.create(base + ".affine.b", Tensor::zeros({1, cin}));  // scales = affine + 1
            p.create(base + ".conv.w", Tensor::randn({cout, cin * 9}, rng,
                                                     1.0 / std::sqrt(static_cast<double>(cin) * 9)));
            p.create(base + ".conv.b", Tensor::zeros({cout, 1}));
            p.create(base + ".noise", Tensor::zeros({1, 1}));
        }
    }
    int clast = ch.back();
    p.create("syn.out.w",
             Tensor::randn({1, clast}, rng, 1.0 / std::sqrt(static_cast<double>(clast))));
    p.create("syn.out.b", Tensor::zeros({1, 1}));
    return p;
}

namespace gen {

// z [1,d] -> w [1,d]: pixel norm then `mapping_layers` fc + lrelu(0.2).
inline ad::Var mapping_graph(ad::Tape& t, const GeneratorConfig& cfg,
                             const std::map<std::string, ad::Var>& p, ad::Var z) {
    int d = cfg.latent_dim;
    require(t.shape(z) == std::vector<int>({1, d}), "mapping: z must be [1,d]");
    // x / sqrt(mean(x^2) + eps)
    ad::Var ms = t.scale(t.sum_all(t.mul(z, z)), 1.0 / d);
    ad::Var inv = t.powc(t.add_const(ms, 1e-8), -0.5);
    ad::Var x = t.mul(z, t.broadcast_scalar(inv, {1, d}));
    for (int k = 0; k < cfg.mapping_layers; ++k) {
        std::string base = "map.fc" + std::to_string(k);
        x = t.lrelu(ad::linear(t, x, p.at(base + ".w"), p.at(base + ".b")), cfg.mapping_slope);
    }
    return x;
}

// One modulated 3x3 convolution: style row w_i [1,d] -> per-input-channel
// scales; weights demodulated per output channel (StyleGAN2-style).
inline ad::Var modulated_conv(ad::Tape& t, const std::map<std::string, ad::Var>& p,
                              const std::string& base, ad::Var x, ad::Var w_row, ad::Var noise,
                              bool use_noise) {
    const auto xs = t.shape(x);
    int cin = xs[0];
    ad::Var s = t.add_const(ad::linear(t, w_row, p.at(base + ".affine.w"), p.at(base + ".affine.b")),
                            1.0);                       // [1,cin]
    ad::Var s_col = t.reshape(s, {cin, 1});             // [cin,1]
    ad::Var s_rep = t.reshape(t.rep_cols(s_col, 9), {1, cin * 9});  // repeat per kernel tap
    ad::Var wmat = p.at(base + ".conv.w");              // [cout, cin*9]
    int cout = t.shape(wmat)[0];
    ad::Var wmod = t.mul(wmat, t.rep_rows(s_rep, cout));
    // Demodulate: each output row scaled to unit L2 norm.
    ad::Var sigma = t.powc(t.add_const(t.rowsum(t.mul(wmod, wmod)), 1e-8), -0.5);  // [cout,1]
    ad::Var wdem = t.mul(wmod, t.rep_cols(sigma, cin * 9));
    ad::Var y = ad::conv2d(t, x, wdem, p.at(base + ".conv.b"), 3, 3, 1, 1);
    if (use_noise) {
        const auto ys = t.shape(y);
        y = t.add(y, t.mul(t.broadcast_scalar(p.at(base + ".noise"), ys), noise));
    }
    return t.lrelu(y, 0.2);
}

struct SynthesisTaps {
    std::vector<ad::Var> layer_activations;  // after each style layer
};

// wplus [L,d] -> map activations graph; output [1,res,res] in [-1,1] (tanh).
inline ad::Var synthesis_graph(ad::Tape& t, const GeneratorConfig& cfg,
                               const std::map<std::string, ad::Var>& p, ad::Var wplus,
                               const std::vector<Tensor>& noise_maps, SynthesisTaps* taps = nullptr) {
    int L = cfg.num_style_layers();
    require(t.shape(wplus) == std::vector<int>({L, cfg.latent_dim}),
            "synthesis: wplus must be [" + std::to_string(L) + "," +
                std::to_string(cfg.latent_dim) + "]");
    bool use_noise = !noise_maps.empty();
    if (use_noise)
        require(static_cast<int>(noise_maps.size()) == L, "synthesis: need one noise map per layer");
    ad::Var x = p.at("syn.const");
    int li = 0;
    for (int level = 0; level < cfg.num_levels(); ++level) {
        if (level > 0) x = t.upsample2(x);
        for (int j = 0; j < 2; ++j, ++li) {
            std::string base = "syn.l" + std::to_string(level) + ".c" + std::to_string(j);
            ad::Var w_row = t.slice_rows(wplus, li, li + 1);
            ad::Var noise = use_noise ? t.constant(noise_maps[li]) : ad::Var{};
            x = modulated_conv(t, p, base, x, w_row, noise, use_noise);
            if (taps) taps->layer_activations.push_back(x);
        }
    }
    ad::Var y = ad::conv2d(t, x, p.at("syn.out.w"), p.at("syn.out.b"), 1, 1, 1, 0);
    return t.tanh(y);
}

}  // namespace gen

enum class NoiseMode { deterministic_zero, seeded };

// Draws per-layer standard-normal noise images (seeded mode).
inline std::vector<Tensor> draw_noise_maps(const GeneratorConfig& cfg, Rng& rng) {
    std::vector<Tensor> maps;
    for (int level = 0; level < cfg.num_levels(); ++level) {
        int res = cfg.level_resolution(level);
        int c = cfg.channel_schedule()[level];
        for (int j = 0; j < 2; ++j) maps.push_back(Tensor::randn({c, res, res}, rng));
    }
    return maps;
}

inline LatentW mapping_forward(const GeneratorConfig& cfg, const ParamStore& params,
                               const Tensor& z) {
    require(z.all_finite(), "mapping_forward: z must be finite");
    ad::Tape t;
    auto p = make_leaves(t, params);
    ad::Var w = gen::mapping_graph(t, cfg, p, t.constant(z));
    return t.val(w);
}

// w+ -> unit-scale displacement map.
inline DisplacementMap synthesis_forward(const GeneratorConfig& cfg, const ParamStore& params,
                                         const LatentWPlus& wplus,
                                         NoiseMode mode = NoiseMode::deterministic_zero,
                                         std::uint64_t noise_seed = 0) {
    ad::Tape t;
    auto p = make_leaves(t, params);
    std::vector<Tensor> noise;
    if (mode == NoiseMode::seeded) {
        Rng rng(noise_seed);
        noise = draw_noise_maps(cfg, rng);
    }
    ad::Var y = gen::synthesis_graph(t, cfg, p, t.constant(wplus), noise);
    const Tensor& out = t.val(y);  // [1,res,res] in [-1,1]
    Tensor unit = Tensor({cfg.out_resolution, cfg.out_resolution});
    for (std::int64_t i = 0; i < unit.numel(); ++i) unit[i] = 0.5 * (out[i] + 1.0);
    return map_from_tensor(unit);
}

// Mean mapping output over standard-normal draws, broadcast to w+.
inline LatentWPlus average_latent(const GeneratorConfig& cfg, const ParamStore& params,
                                  int n_samples, std::uint64_t seed) {
    require(n_samples >= 1, "average_latent: n_samples must be >= 1");
    Rng rng(seed);
    Tensor mean = Tensor::zeros({1, cfg.latent_dim});
    for (int s = 0; s < n_samples; ++s) {
        Tensor z = Tensor::randn({1, cfg.latent_dim}, rng);
        Tensor w = mapping_forward(cfg, params, z);
        for (int c = 0; c < cfg.latent_dim; ++c) mean[c] += w[c];
    }
    for (int c = 0; c < cfg.latent_dim; ++c) mean[c] /= n_samples;
    return broadcast_w_to_wplus(mean, cfg.num_style_layers());
}

}  // namespace dnpm

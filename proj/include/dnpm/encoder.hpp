#pragma once

// MLP encoder from identity/expression coefficients to w+ offsets around the
// average latent, its supervised training through a frozen generator, and the
// full coefficients -> detailed mesh composition.
//
// Architecture: five fully connected ReLU layers over concat(w_id, w_exp),
// with w_exp re-concatenated onto the first layer's activations; style heads
// read layers 3, 4, and 5 and emit n3/n4/n5 offset rows (layer-3 block
// first), where (n3, n4, n5) = style_allocation(L).

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/generator.hpp"
#include "dnpm/geometry.hpp"
#include "dnpm/image.hpp"
#include "dnpm/nn.hpp"
#include "dnpm/perceptual.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

struct StyleAllocation {
    int n3 = 0, n4 = 0, n5 = 0;
    bool operator==(const StyleAllocation&) const = default;
};

// Splits L style rows across the three head layers: the earliest head takes
// ceil(L/2), the deepest floor(half of the rest), the middle the remainder.
inline StyleAllocation style_allocation(int L) {
    require(L >= 3, "style_allocation: L must be >= 3");
    StyleAllocation a;
    a.n3 = (L + 1) / 2;
    a.n5 = (L - a.n3) / 2;
    a.n4 = L - a.n3 - a.n5;
    return a;
}

struct EncoderConfig {
    int id_dim = 16;
    int exp_dim = 16;
    int latent_dim = 64;       // d of the bound generator
    int num_style_layers = 10;  // L of the bound generator
    std::vector<int> widths;    // 5 hidden widths; defaults to latent_dim each

    std::vector<int> layer_widths() const {
        if (!widths.empty()) return widths;
        return std::vector<int>(5, latent_dim);
    }

    StyleAllocation allocation() const { return style_allocation(num_style_layers); }

    void check() const {
        require(id_dim > 0 && exp_dim > 0, "encoder: coefficient dims must be positive");
        require(latent_dim > 0, "encoder: latent_dim must be positive");
        require(num_style_layers >= 3, "encoder: num_style_layers must be >= 3");
        std::vector<int> w = layer_widths();
        require(w.size() == 5, "encoder: exactly 5 layer widths required");
        for (int x : w) require(x > 0, "encoder: layer widths must be positive");
    }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"id_dim", c.id_dim},
         {"exp_dim", c.exp_dim},
         {"latent_dim", c.latent_dim},
         {"num_style_layers", c.num_style_layers},
         {"widths", c.widths}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    c.id_dim = j.value("id_dim", c.id_dim);
    c.exp_dim = j.value("exp_dim", c.exp_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.num_style_layers = j.value("num_style_layers", c.num_style_layers);
    c.widths = j.value("widths", c.widths);
}

// Parameter names: enc.fc<k>.w/.b (k = 1..5) and enc.head<j>.w/.b
// (j = 3,4,5; output n_j * d, reshaped to n_j rows). Heads start at zero so
// the initial offset is exactly zero (the composition starts at G(w_bar)).
inline ParamStore init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
    cfg.check();
    ParamStore p;
    std::vector<int> w = cfg.layer_widths();
    StyleAllocation alloc = cfg.allocation();
    int in_dim = cfg.id_dim + cfg.exp_dim;
    for (int k = 1; k <= 5; ++k) {
        int cin = (k == 1) ? in_dim : (k == 2 ? w[0] + cfg.exp_dim : w[static_cast<std::size_t>(k - 2)]);
        int cout = w[static_cast<std::size_t>(k - 1)];
        p.create("enc.fc" + std::to_string(k) + ".w",
                 Tensor::randn({cin, cout}, rng, std::sqrt(2.0 / cin)));
        p.create("enc.fc" + std::to_string(k) + ".b", Tensor::zeros({1, cout}));
    }
    const int heads[3] = {alloc.n3, alloc.n4, alloc.n5};
    for (int j = 0; j < 3; ++j) {
        int rows = heads[j];
        if (rows == 0) continue;
        int cin = w[static_cast<std::size_t>(j + 2)];
        p.create("enc.head" + std::to_string(j + 3) + ".w",
                 Tensor::zeros({cin, rows * cfg.latent_dim}));
        p.create("enc.head" + std::to_string(j + 3) + ".b",
                 Tensor::zeros({1, rows * cfg.latent_dim}));
    }
    return p;
}

namespace enc {

// Concatenates two row vectors [1,na], [1,nb] -> [1,na+nb].
inline ad::Var concat_cols(ad::Tape& t, ad::Var a, ad::Var b) {
    int na = t.shape(a)[1], nb = t.shape(b)[1];
    ad::Var stacked =
        t.concat_rows({t.reshape(a, {na, 1}), t.reshape(b, {nb, 1})});
    return t.reshape(stacked, {1, na + nb});
}

// (w_id [1,id], w_exp [1,exp]) -> offset [L,d].
inline ad::Var encoder_graph(ad::Tape& t, const EncoderConfig& cfg,
                             const std::map<std::string, ad::Var>& p, ad::Var w_id,
                             ad::Var w_exp) {
    require(t.shape(w_id) == std::vector<int>({1, cfg.id_dim}), "encoder: w_id must be [1,id_dim]");
    require(t.shape(w_exp) == std::vector<int>({1, cfg.exp_dim}),
            "encoder: w_exp must be [1,exp_dim]");
    StyleAllocation alloc = cfg.allocation();
    auto fc = [&](ad::Var x, int k) {
        std::string base = "enc.fc" + std::to_string(k);
        return t.relu(ad::linear(t, x, p.at(base + ".w"), p.at(base + ".b")));
    };
    ad::Var a1 = fc(concat_cols(t, w_id, w_exp), 1);
    ad::Var a2 = fc(concat_cols(t, a1, w_exp), 2);  // expression skip connection
    ad::Var a3 = fc(a2, 3);
    ad::Var a4 = fc(a3, 4);
    ad::Var a5 = fc(a4, 5);
    const ad::Var acts[3] = {a3, a4, a5};
    const int rows[3] = {alloc.n3, alloc.n4, alloc.n5};
    std::vector<ad::Var> blocks;
    for (int j = 0; j < 3; ++j) {
        if (rows[j] == 0) continue;
        std::string base = "enc.head" + std::to_string(j + 3);
        ad::Var flat = ad::linear(t, acts[j], p.at(base + ".w"), p.at(base + ".b"));
        blocks.push_back(t.reshape(flat, {rows[j], cfg.latent_dim}));
    }
    return blocks.size() == 1 ? blocks[0] : t.concat_rows(blocks);
}

}  // namespace enc

inline LatentWPlus encoder_forward(const EncoderConfig& cfg, const ParamStore& params,
                                   const Tensor& w_id, const Tensor& w_exp) {
    ad::Tape t;
    auto p = make_constants(t, params);
    return t.val(enc::encoder_graph(t, cfg, p, t.constant(w_id), t.constant(w_exp)));
}

struct EncoderSample {
    Tensor w_id;   // [1, id_dim]
    Tensor w_exp;  // [1, exp_dim]
    DisplacementMap target;
};

struct EncoderHyper {
    int steps = 2000;
    int batch_size = 8;
    double lr = 5e-4;  // cosine-decayed to zero over `steps`
    double lambda_lpips = 0.8;
    int log_interval = 20;
    int checkpoint_interval = 500;
    std::uint64_t seed = 1;

    void check() const {
        require(steps >= 0, "encoder hyper: steps must be >= 0");
        require(batch_size >= 1, "encoder hyper: batch_size must be >= 1");
        require(lr > 0.0, "encoder hyper: lr must be positive");
        require(lambda_lpips >= 0.0, "encoder hyper: lambda_lpips must be >= 0");
        require(log_interval >= 1 && checkpoint_interval >= 1,
                "encoder hyper: intervals must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const EncoderHyper& h) {
    j = {{"steps", h.steps},         {"batch_size", h.batch_size},
         {"lr", h.lr},               {"lambda_lpips", h.lambda_lpips},
         {"log_interval", h.log_interval}, {"checkpoint_interval", h.checkpoint_interval},
         {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, EncoderHyper& h) {
    h.steps = j.value("steps", h.steps);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.lr = j.value("lr", h.lr);
    h.lambda_lpips = j.value("lambda_lpips", h.lambda_lpips);
    h.log_interval = j.value("log_interval", h.log_interval);
    h.checkpoint_interval = j.value("checkpoint_interval", h.checkpoint_interval);
    h.seed = j.value("seed", h.seed);
}

struct TrainEncoderResult {
    ParamStore params;
    double final_l_pixel = 0.0;  // mean over the last logged batch
    long steps_run = 0;
};

// Supervised training through the frozen generator: minimizes
// L_pixel + lambda * L_lpips between G(E(w_id, w_exp) + w_bar) and the target
// map. Writes enc.ckpt and metrics.csv (step, l_pixel, l_lpips, lr) under
// out_dir. Aborts with NumericError after a diagnostic checkpoint on
// non-finite loss. steps == 0 returns the seeded initialization.
inline TrainEncoderResult train_encoder(const std::vector<EncoderSample>& dataset,
                                        const GeneratorConfig& gcfg, const ParamStore& gen_params,
                                        const LatentWPlus& wbar, const EncoderConfig& cfg,
                                        const EncoderHyper& hyper,
                                        const PerceptualExtractor& extractor,
                                        const std::filesystem::path& out_dir) {
    cfg.check();
    hyper.check();
    require(!dataset.empty(), "train_encoder: dataset must be non-empty");
    require(cfg.latent_dim == gcfg.latent_dim && cfg.num_style_layers == gcfg.num_style_layers(),
            "train_encoder: encoder and generator dimensions must match");
    require(wbar.shape() == std::vector<int>({gcfg.num_style_layers(), gcfg.latent_dim}),
            "train_encoder: wbar must be [L,d]");
    for (const auto& s : dataset)
        require(s.target.width == gcfg.out_resolution && s.target.height == gcfg.out_resolution,
                "train_encoder: target maps must match generator resolution");
    std::filesystem::create_directories(out_dir);

    Rng rng(hyper.seed);
    TrainEncoderResult result;
    result.params = init_encoder_params(cfg, rng);

    AdamConfig acfg;
    acfg.lr = hyper.lr;
    Adam opt(acfg);

    std::string csv = "step,l_pixel,l_lpips,lr\n";
    auto save = [&](const std::filesystem::path& dir, long step) {
        CheckpointMeta meta;
        meta.config = nlohmann::json{{"encoder", nlohmann::json(cfg)},
                                     {"generator", nlohmann::json(gcfg)},
                                     {"hyper", nlohmann::json(hyper)}};
        meta.step = step;
        meta.seed = hyper.seed;
        save_checkpoint(dir / "enc.ckpt", result.params, meta);
    };

    for (long step = 0; step < hyper.steps; ++step) {
        const double lr_scale = cosine_lr_scale(step, hyper.steps);
        std::map<std::string, Tensor> grads;
        double pixel_sum = 0.0, lpips_sum = 0.0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            const EncoderSample& sample = dataset[static_cast<std::size_t>(
                rng.below(static_cast<std::uint64_t>(dataset.size())))];
            ad::Tape t;
            auto pe = make_leaves(t, result.params);
            auto pg = make_constants(t, gen_params);
            ad::Var offset = enc::encoder_graph(t, cfg, pe, t.constant(sample.w_id),
                                                t.constant(sample.w_exp));
            ad::Var wplus = t.add(offset, t.constant(wbar));
            ad::Var y = gen::synthesis_graph(t, gcfg, pg, wplus, {});
            ad::Var unit = t.scale(t.add_const(y, 1.0), 0.5);
            Tensor target({1, gcfg.out_resolution, gcfg.out_resolution},
                          to_tensor(sample.target).vec());
            ad::Var l_pixel = perc::loss_pixel_graph(t, unit, t.constant(target));
            pixel_sum += t.val(l_pixel)[0];
            ad::Var loss = t.reshape(l_pixel, {1});
            if (hyper.lambda_lpips > 0.0) {
                ad::Var l_lpips = perc::loss_lpips_graph(t, unit, t.constant(target), extractor);
                lpips_sum += t.val(l_lpips)[0];
                loss = t.add(loss, t.scale(t.reshape(l_lpips, {1}), hyper.lambda_lpips));
            }

            std::vector<std::string> names = result.params.names();
            std::vector<ad::Var> wrt;
            for (const auto& n : names) wrt.push_back(pe.at(n));
            std::vector<ad::Var> gs = t.gradients(loss, wrt);
            for (std::size_t i = 0; i < names.size(); ++i)
                accumulate_grad(grads, names[i], t.val(gs[i]));
        }
        for (auto& [name, g] : grads)
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= hyper.batch_size;
        const double l_pixel = pixel_sum / hyper.batch_size;
        const double l_lpips = lpips_sum / hyper.batch_size;
        opt.step(result.params, grads, lr_scale);

        if (!std::isfinite(l_pixel) || !std::isfinite(l_lpips) || !result.params.all_finite()) {
            std::filesystem::path diag = out_dir / "diagnostic";
            std::filesystem::create_directories(diag);
            save(diag, step);
            write_text_file(out_dir / "metrics.csv", csv);
            throw NumericError("train_encoder: non-finite loss at step " + std::to_string(step) +
                               "; diagnostic checkpoint written to " + diag.string());
        }
        result.final_l_pixel = l_pixel;
        if (step % hyper.log_interval == 0 || step == hyper.steps - 1) {
            csv += std::to_string(step) + "," + format_metric(l_pixel, 9) + "," +
                   format_metric(l_lpips, 9) + "," + format_metric(hyper.lr * lr_scale, 9) + "\n";
        }
        if ((step + 1) % hyper.checkpoint_interval == 0) save(out_dir, step + 1);
        result.steps_run = step + 1;
    }

    save(out_dir, result.steps_run);
    write_text_file(out_dir / "metrics.csv", csv);
    return result;
}

// Full parametric pipeline: coefficients -> proxy mesh + generated detail map
// -> displaced detailed mesh.
inline Mesh detailed3dmm_generate(const BilinearModel& model, const std::vector<double>& w_id,
                                  const std::vector<double>& w_exp, const EncoderConfig& ecfg,
                                  const ParamStore& enc_params, const GeneratorConfig& gcfg,
                                  const ParamStore& gen_params, const LatentWPlus& wbar, double s,
                                  int subdiv_levels, double d_max = 0.002) {
    require(static_cast<int>(w_id.size()) == ecfg.id_dim &&
                static_cast<int>(w_exp.size()) == ecfg.exp_dim,
            "detailed3dmm_generate: coefficient sizes must match the encoder config");
    Tensor id_t({1, ecfg.id_dim}, w_id);
    Tensor exp_t({1, ecfg.exp_dim}, w_exp);
    LatentWPlus offset = encoder_forward(ecfg, enc_params, id_t, exp_t);
    LatentWPlus wplus(offset.shape());
    for (std::int64_t i = 0; i < wplus.numel(); ++i) wplus[i] = offset[i] + wbar[i];
    DisplacementMap map = synthesis_forward(gcfg, gen_params, wplus);
    Mesh proxy = bilinear_proxy(model, w_id, w_exp);
    return apply_displacement(proxy, map, s, subdiv_levels, d_max);
}

}  // namespace dnpm

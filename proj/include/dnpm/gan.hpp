#pragma once

// Convolutional discriminator and the adversarial training loop for the
// displacement-map generator: non-saturating logistic losses with a lazy R1
// gradient penalty on real samples.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/generator.hpp"
#include "dnpm/image.hpp"
#include "dnpm/nn.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

// Parameter names (levels counted as in GeneratorConfig, level 0 = 4x4):
//   disc.from.w [Ctop, 1], disc.from.b [Ctop, 1]        1x1 conv from 1 channel
//   disc.d<level>.conv.w [Cbelow, Ccur*9], .b [Cbelow,1] 3x3 conv then 2x avg-pool
//   disc.final.conv.w [C0, C0*9], .b [C0, 1]             3x3 conv at 4x4
//   disc.final.fc.w [C0*16, C0], .b [1, C0]
//   disc.final.out.w [C0, 1], .b [1, 1]
inline ParamStore init_discriminator_params(const GeneratorConfig& cfg, Rng& rng) {
    cfg.check();
    ParamStore p;
    std::vector<int> ch = cfg.channel_schedule();
    int top = cfg.num_levels() - 1;
    p.create("disc.from.w", Tensor::randn({ch[top], 1}, rng));
    p.create("disc.from.b", Tensor::zeros({ch[top], 1}));
    for (int level = top; level >= 1; --level) {
        std::string base = "disc.d" + std::to_string(level);
        int cin = ch[level], cout = ch[level - 1];
        p.create(base + ".conv.w",
                 Tensor::randn({cout, cin * 9}, rng, 1.0 / std::sqrt(static_cast<double>(cin) * 9)));
        p.create(base + ".conv.b", Tensor::zeros({cout, 1}));
    }
    int c0 = ch[0];
    p.create("disc.final.conv.w",
             Tensor::randn({c0, c0 * 9}, rng, 1.0 / std::sqrt(static_cast<double>(c0) * 9)));
    p.create("disc.final.conv.b", Tensor::zeros({c0, 1}));
    p.create("disc.final.fc.w",
             Tensor::randn({c0 * 16, c0}, rng, 1.0 / std::sqrt(static_cast<double>(c0) * 16)));
    p.create("disc.final.fc.b", Tensor::zeros({1, c0}));
    p.create("disc.final.out.w", Tensor::randn({c0, 1}, rng, 1.0 / std::sqrt(static_cast<double>(c0))));
    p.create("disc.final.out.b", Tensor::zeros({1, 1}));
    return p;
}

namespace gan {

// x [1,res,res] unit-scale map -> scalar logit [1,1].
inline ad::Var discriminator_graph(ad::Tape& t, const GeneratorConfig& cfg,
                                   const std::map<std::string, ad::Var>& p, ad::Var x) {
    require(t.shape(x) == std::vector<int>({1, cfg.out_resolution, cfg.out_resolution}),
            "discriminator: input must be [1,res,res]");
    ad::Var h = t.lrelu(ad::conv2d(t, x, p.at("disc.from.w"), p.at("disc.from.b"), 1, 1, 1, 0), 0.2);
    for (int level = cfg.num_levels() - 1; level >= 1; --level) {
        std::string base = "disc.d" + std::to_string(level);
        h = t.lrelu(ad::conv2d(t, h, p.at(base + ".conv.w"), p.at(base + ".conv.b"), 3, 3, 1, 1),
                    0.2);
        h = t.scale(t.sumpool2(h), 0.25);  // 2x average pool
    }
    h = t.lrelu(
        ad::conv2d(t, h, p.at("disc.final.conv.w"), p.at("disc.final.conv.b"), 3, 3, 1, 1), 0.2);
    int c0 = t.shape(h)[0];
    h = t.reshape(h, {1, c0 * 16});
    h = t.lrelu(ad::linear(t, h, p.at("disc.final.fc.w"), p.at("disc.final.fc.b")), 0.2);
    return ad::linear(t, h, p.at("disc.final.out.w"), p.at("disc.final.out.b"));
}

}  // namespace gan

inline double discriminator_forward(const GeneratorConfig& cfg, const ParamStore& params,
                                    const DisplacementMap& map) {
    require(map.width == cfg.out_resolution && map.height == cfg.out_resolution,
            "discriminator_forward: map resolution mismatch");
    ad::Tape t;
    auto p = make_constants(t, params);
    Tensor x = to_tensor(map);
    ad::Var logit =
        gan::discriminator_graph(t, cfg, p, t.constant(Tensor({1, map.height, map.width}, x.vec())));
    return t.val(logit)[0];
}

struct GanHyper {
    int steps = 2000;
    int batch_size = 8;
    double lr = 1e-3;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double r1_gamma = 1.0;
    int r1_interval = 16;
    int checkpoint_interval = 500;
    int log_interval = 10;
    std::uint64_t seed = 1;

    void check() const {
        require(steps >= 0, "gan: steps must be >= 0");
        require(batch_size >= 1, "gan: batch_size must be >= 1");
        require(lr > 0.0, "gan: lr must be positive");
        require(r1_gamma >= 0.0, "gan: r1_gamma must be >= 0");
        require(r1_interval >= 1, "gan: r1_interval must be >= 1");
        require(checkpoint_interval >= 1, "gan: checkpoint_interval must be >= 1");
        require(log_interval >= 1, "gan: log_interval must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const GanHyper& h) {
    j = {{"steps", h.steps},
         {"batch_size", h.batch_size},
         {"lr", h.lr},
         {"beta1", h.beta1},
         {"beta2", h.beta2},
         {"r1_gamma", h.r1_gamma},
         {"r1_interval", h.r1_interval},
         {"checkpoint_interval", h.checkpoint_interval},
         {"log_interval", h.log_interval},
         {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, GanHyper& h) {
    h.steps = j.value("steps", h.steps);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.lr = j.value("lr", h.lr);
    h.beta1 = j.value("beta1", h.beta1);
    h.beta2 = j.value("beta2", h.beta2);
    h.r1_gamma = j.value("r1_gamma", h.r1_gamma);
    h.r1_interval = j.value("r1_interval", h.r1_interval);
    h.checkpoint_interval = j.value("checkpoint_interval", h.checkpoint_interval);
    h.log_interval = j.value("log_interval", h.log_interval);
    h.seed = j.value("seed", h.seed);
}

struct TrainDnpmResult {
    ParamStore gen_params;
    ParamStore disc_params;
    double final_d_accuracy = 0.0;  // moving average over the last window
    long steps_run = 0;
};

namespace gan {

// Draws z, maps it through the generator (values only), and returns the
// unit-scale fake map tensor [1,res,res] plus the w+ used.
inline Tensor sample_fake(const GeneratorConfig& cfg, const ParamStore& gen_params, Rng& rng,
                          LatentWPlus* wplus_out = nullptr) {
    Tensor z = Tensor::randn({1, cfg.latent_dim}, rng);
    std::vector<Tensor> noise = draw_noise_maps(cfg, rng);
    ad::Tape t;
    auto p = make_constants(t, gen_params);
    Tensor w = t.val(gen::mapping_graph(t, cfg, p, t.constant(z)));
    LatentWPlus wp = broadcast_w_to_wplus(w, cfg.num_style_layers());
    ad::Var y = gen::synthesis_graph(t, cfg, p, t.constant(wp), noise);
    const Tensor& out = t.val(y);
    Tensor unit({1, cfg.out_resolution, cfg.out_resolution});
    for (std::int64_t i = 0; i < unit.numel(); ++i) unit[i] = 0.5 * (out[i] + 1.0);
    if (wplus_out) *wplus_out = wp;
    return unit;
}

}  // namespace gan

// Adversarial training. Writes gen.ckpt / disc.ckpt / loss.csv under out_dir;
// aborts with NumericError (after saving diagnostic checkpoints) if a loss
// goes non-finite. steps == 0 returns the seeded initialization unchanged.
inline TrainDnpmResult train_dnpm(const std::vector<DisplacementMap>& dataset,
                                  const GeneratorConfig& cfg, const GanHyper& hyper,
                                  const std::filesystem::path& out_dir) {
    cfg.check();
    hyper.check();
    require(!dataset.empty(), "train_dnpm: dataset must be non-empty");
    for (const auto& m : dataset)
        require(m.width == cfg.out_resolution && m.height == cfg.out_resolution,
                "train_dnpm: all maps must match the configured resolution");
    std::filesystem::create_directories(out_dir);

    Rng rng(hyper.seed);
    TrainDnpmResult result;
    result.gen_params = init_generator_params(cfg, rng);
    result.disc_params = init_discriminator_params(cfg, rng);

    AdamConfig acfg;
    acfg.lr = hyper.lr;
    acfg.beta1 = hyper.beta1;
    acfg.beta2 = hyper.beta2;
    Adam opt_g(acfg), opt_d(acfg);

    std::string csv = "step,g_loss,d_loss,r1\n";
    const int res = cfg.out_resolution;
    const int L = cfg.num_style_layers();
    double last_r1 = 0.0;
    std::vector<double> acc_window;  // per-step discriminator accuracy
    const std::size_t window = 100;

    auto save_all = [&](const std::filesystem::path& dir, long step) {
        CheckpointMeta meta;
        meta.config = nlohmann::json(cfg);
        meta.step = step;
        meta.seed = hyper.seed;
        save_checkpoint(dir / "gen.ckpt", result.gen_params, meta);
        meta.config = nlohmann::json{{"generator", nlohmann::json(cfg)}, {"hyper", nlohmann::json(hyper)}};
        save_checkpoint(dir / "disc.ckpt", result.disc_params, meta);
    };

    for (long step = 0; step < hyper.steps; ++step) {
        const bool r1_step = hyper.r1_gamma > 0.0 && (step % hyper.r1_interval == 0);

        // ---- discriminator update -----------------------------------------
        std::map<std::string, Tensor> grads_d;
        double d_loss_sum = 0.0, r1_sum = 0.0;
        int correct = 0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            const DisplacementMap& real = dataset[static_cast<std::size_t>(
                rng.below(static_cast<std::uint64_t>(dataset.size())))];
            Tensor real_x({1, res, res}, to_tensor(real).vec());
            Tensor fake_x = gan::sample_fake(cfg, result.gen_params, rng);

            ad::Tape t;
            auto p = make_leaves(t, result.disc_params);
            ad::Var xr = t.leaf(real_x, true);
            ad::Var logit_r = gan::discriminator_graph(t, cfg, p, xr);
            ad::Var logit_f = gan::discriminator_graph(t, cfg, p, t.constant(fake_x));
            ad::Var adv = t.add(t.softplus(t.neg(logit_r)), t.softplus(logit_f));
            ad::Var loss = adv;
            if (r1_step) {
                ad::Var gx = t.gradient(logit_r, xr);
                ad::Var pen = t.sum_all(t.mul(gx, gx));
                r1_sum += t.val(pen)[0];
                // Lazy evaluation: scale by the interval to keep the effective
                // penalty strength independent of how often it is applied.
                loss = t.add(t.reshape(adv, {1}),
                             t.scale(pen, 0.5 * hyper.r1_gamma * hyper.r1_interval));
            }
            d_loss_sum += t.val(adv)[0];
            if (t.val(logit_r)[0] > 0.0) ++correct;
            if (t.val(logit_f)[0] < 0.0) ++correct;

            std::vector<std::string> names = result.disc_params.names();
            std::vector<ad::Var> wrt;
            for (const auto& n : names) wrt.push_back(p.at(n));
            std::vector<ad::Var> gs = t.gradients(loss, wrt);
            for (std::size_t i = 0; i < names.size(); ++i)
                accumulate_grad(grads_d, names[i], t.val(gs[i]));
        }
        for (auto& [name, g] : grads_d)
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= hyper.batch_size;
        double d_loss = d_loss_sum / hyper.batch_size;
        if (r1_step) last_r1 = r1_sum / hyper.batch_size;
        acc_window.push_back(static_cast<double>(correct) / (2.0 * hyper.batch_size));
        if (acc_window.size() > window) acc_window.erase(acc_window.begin());
        opt_d.step(result.disc_params, grads_d);

        // ---- generator update ----------------------------------------------
        std::map<std::string, Tensor> grads_g;
        double g_loss_sum = 0.0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            Tensor z = Tensor::randn({1, cfg.latent_dim}, rng);
            std::vector<Tensor> noise = draw_noise_maps(cfg, rng);
            ad::Tape t;
            auto pg = make_leaves(t, result.gen_params);
            auto pd = make_constants(t, result.disc_params);
            ad::Var w = gen::mapping_graph(t, cfg, pg, t.constant(z));
            ad::Var wplus = t.rep_rows(w, L);
            ad::Var y = gen::synthesis_graph(t, cfg, pg, wplus, noise);
            ad::Var unit = t.scale(t.add_const(y, 1.0), 0.5);
            ad::Var logit = gan::discriminator_graph(t, cfg, pd, unit);
            ad::Var loss = t.softplus(t.neg(logit));
            g_loss_sum += t.val(loss)[0];

            std::vector<std::string> names = result.gen_params.names();
            std::vector<ad::Var> wrt;
            for (const auto& n : names) wrt.push_back(pg.at(n));
            std::vector<ad::Var> gs = t.gradients(loss, wrt);
            for (std::size_t i = 0; i < names.size(); ++i)
                accumulate_grad(grads_g, names[i], t.val(gs[i]));
        }
        for (auto& [name, g] : grads_g)
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= hyper.batch_size;
        double g_loss = g_loss_sum / hyper.batch_size;
        opt_g.step(result.gen_params, grads_g);

        if (!std::isfinite(g_loss) || !std::isfinite(d_loss) || !std::isfinite(last_r1) ||
            !result.gen_params.all_finite() || !result.disc_params.all_finite()) {
            std::filesystem::path diag = out_dir / "diagnostic";
            std::filesystem::create_directories(diag);
            save_all(diag, step);
            write_text_file(out_dir / "loss.csv", csv);
            throw NumericError("train_dnpm: non-finite loss at step " + std::to_string(step) +
                               "; diagnostic checkpoint written to " + diag.string());
        }

        if (step % hyper.log_interval == 0 || step == hyper.steps - 1) {
            csv += std::to_string(step) + "," + format_metric(g_loss, 9) + "," +
                   format_metric(d_loss, 9) + "," + format_metric(last_r1, 9) + "\n";
        }
        if ((step + 1) % hyper.checkpoint_interval == 0) save_all(out_dir, step + 1);
        result.steps_run = step + 1;
    }

    if (!acc_window.empty()) {
        double s = 0.0;
        for (double a : acc_window) s += a;
        result.final_d_accuracy = s / static_cast<double>(acc_window.size());
    }
    save_all(out_dir, result.steps_run);
    write_text_file(out_dir / "loss.csv", csv);
    return result;
}

}  // namespace dnpm

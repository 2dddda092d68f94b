#pragma once

// Displacement-map restoration: deterministic degradation operators, a
// convolutional encoder from degraded maps into w+ offsets, its training
// through the frozen generator, and the full degraded-image -> detailed-mesh
// pipeline with pluggable landmark-detection and map-regression stages.

#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/fitting.hpp"
#include "dnpm/generator.hpp"
#include "dnpm/geometry.hpp"
#include "dnpm/image.hpp"
#include "dnpm/nn.hpp"
#include "dnpm/perceptual.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

// ---------------------------------------------------------------------------
// Degradation
// ---------------------------------------------------------------------------

struct DegradationSpec {
    enum class Mode { downsample_factor, lowres_blur };
    Mode mode = Mode::downsample_factor;
    int factor = 4;              // mode 1: area-average reduction factor
    int target_resolution = 64;  // mode 2: intermediate resolution before blur
    double gaussian_sigma = 1.5;

    void check() const {
        require(factor == 4 || factor == 8, "degradation: factor must be 4 or 8");
        require(target_resolution >= 1, "degradation: target_resolution must be positive");
        require(gaussian_sigma > 0.0, "degradation: sigma must be positive");
    }

    // Side length of the degraded output for a square source.
    int output_resolution(int source_resolution) const {
        if (mode == Mode::downsample_factor) {
            require(source_resolution % factor == 0,
                    "degradation: factor must divide the source resolution");
            return source_resolution / factor;
        }
        return target_resolution;
    }
};

inline void to_json(nlohmann::json& j, const DegradationSpec& s) {
    j = {{"mode", s.mode == DegradationSpec::Mode::downsample_factor ? "downsample-factor"
                                                                     : "lowres-blur"},
         {"factor", s.factor},
         {"target_resolution", s.target_resolution},
         {"gaussian_sigma", s.gaussian_sigma}};
}

inline void from_json(const nlohmann::json& j, DegradationSpec& s) {
    std::string mode = j.value("mode", std::string("downsample-factor"));
    if (mode == "downsample-factor") {
        s.mode = DegradationSpec::Mode::downsample_factor;
    } else if (mode == "lowres-blur") {
        s.mode = DegradationSpec::Mode::lowres_blur;
    } else {
        throw ConfigError("degradation: unknown mode '" + mode + "'");
    }
    s.factor = j.value("factor", s.factor);
    s.target_resolution = j.value("target_resolution", s.target_resolution);
    s.gaussian_sigma = j.value("gaussian_sigma", s.gaussian_sigma);
}

inline DisplacementMap degrade(const DisplacementMap& high, const DegradationSpec& spec) {
    spec.check();
    if (spec.mode == DegradationSpec::Mode::downsample_factor)
        return area_downsample(high, spec.factor);
    return gaussian_blur(resize_area(high, spec.target_resolution, spec.target_resolution),
                         spec.gaussian_sigma);
}

// ---------------------------------------------------------------------------
// Restorer network
// ---------------------------------------------------------------------------

struct RestorerConfig {
    int input_resolution = 16;  // power of two >= 4
    int latent_dim = 64;        // d of the bound generator
    int num_style_layers = 10;  // L of the bound generator
    int channels = 16;

    // Stride-2 stages from input_resolution down to 4.
    int num_stages() const { return log2_exact(input_resolution) - 2; }

    void check() const {
        require(input_resolution >= 4, "restorer: input_resolution must be >= 4");
        log2_exact(input_resolution);
        require(latent_dim > 0 && num_style_layers >= 1 && channels > 0,
                "restorer: dimensions must be positive");
    }
};

inline void to_json(nlohmann::json& j, const RestorerConfig& c) {
    j = {{"input_resolution", c.input_resolution},
         {"latent_dim", c.latent_dim},
         {"num_style_layers", c.num_style_layers},
         {"channels", c.channels}};
}

inline void from_json(const nlohmann::json& j, RestorerConfig& c) {
    c.input_resolution = j.value("input_resolution", c.input_resolution);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.num_style_layers = j.value("num_style_layers", c.num_style_layers);
    c.channels = j.value("channels", c.channels);
}

// Parameter names: rest.conv0.w/.b (stride-1 lift to `channels`),
// rest.s<k>.w/.b (stride-2 stages), rest.head<j>.w/.b (j = 0..L-1, one d-dim
// row each from the pooled features). Heads start at zero so the initial
// offset is exactly zero.
inline ParamStore init_restorer_params(const RestorerConfig& cfg, Rng& rng) {
    cfg.check();
    ParamStore p;
    int c = cfg.channels;
    p.create("rest.conv0.w", Tensor::randn({c, 9}, rng, 1.0 / 3.0));
    p.create("rest.conv0.b", Tensor::zeros({c, 1}));
    for (int k = 0; k < cfg.num_stages(); ++k) {
        p.create("rest.s" + std::to_string(k) + ".w",
                 Tensor::randn({c, c * 9}, rng, 1.0 / std::sqrt(static_cast<double>(c) * 9)));
        p.create("rest.s" + std::to_string(k) + ".b", Tensor::zeros({c, 1}));
    }
    for (int j = 0; j < cfg.num_style_layers; ++j) {
        p.create("rest.head" + std::to_string(j) + ".w", Tensor::zeros({c, cfg.latent_dim}));
        p.create("rest.head" + std::to_string(j) + ".b", Tensor::zeros({1, cfg.latent_dim}));
    }
    return p;
}

namespace rest {

// I_low [1,res,res] -> offset [L,d].
inline ad::Var restorer_graph(ad::Tape& t, const RestorerConfig& cfg,
                              const std::map<std::string, ad::Var>& p, ad::Var x) {
    require(t.shape(x) == std::vector<int>({1, cfg.input_resolution, cfg.input_resolution}),
            "restorer: input must be [1," + std::to_string(cfg.input_resolution) + "," +
                std::to_string(cfg.input_resolution) + "]");
    ad::Var h = t.relu(ad::conv2d(t, x, p.at("rest.conv0.w"), p.at("rest.conv0.b"), 3, 3, 1, 1));
    for (int k = 0; k < cfg.num_stages(); ++k) {
        std::string base = "rest.s" + std::to_string(k);
        h = t.relu(ad::conv2d(t, h, p.at(base + ".w"), p.at(base + ".b"), 3, 3, 2, 1));
    }
    const auto hs = t.shape(h);
    ad::Var pooled = t.scale(t.rowsum(t.reshape(h, {hs[0], hs[1] * hs[2]})), 1.0 / (hs[1] * hs[2]));
    ad::Var feat = t.reshape(pooled, {1, hs[0]});  // [1,C]
    std::vector<ad::Var> rows;
    for (int j = 0; j < cfg.num_style_layers; ++j) {
        std::string base = "rest.head" + std::to_string(j);
        rows.push_back(ad::linear(t, feat, p.at(base + ".w"), p.at(base + ".b")));
    }
    return rows.size() == 1 ? rows[0] : t.concat_rows(rows);
}

}  // namespace rest

inline LatentWPlus restorer_forward(const RestorerConfig& cfg, const ParamStore& params,
                                    const DisplacementMap& low) {
    require(low.width == cfg.input_resolution && low.height == cfg.input_resolution,
            "restorer_forward: input resolution mismatch");
    ad::Tape t;
    auto p = make_constants(t, params);
    Tensor x({1, low.height, low.width}, to_tensor(low).vec());
    return t.val(rest::restorer_graph(t, cfg, p, t.constant(x)));
}

inline DisplacementMap restore(const RestorerConfig& rcfg, const ParamStore& rparams,
                               const GeneratorConfig& gcfg, const ParamStore& gparams,
                               const LatentWPlus& wbar, const DisplacementMap& low) {
    LatentWPlus offset = restorer_forward(rcfg, rparams, low);
    require(offset.shape() == wbar.shape(), "restore: restorer/generator dimension mismatch");
    LatentWPlus wplus(wbar.shape());
    for (std::int64_t i = 0; i < wplus.numel(); ++i) wplus[i] = wbar[i] + offset[i];
    return synthesis_forward(gcfg, gparams, wplus);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct RestorationPair {
    DisplacementMap low;
    DisplacementMap high;
};

struct RestorerHyper {
    int steps = 2000;
    int batch_size = 8;
    double lr = 5e-4;  // cosine-decayed to zero over `steps`
    double lambda_lpips = 0.8;
    double lambda_id = 0.1;
    bool use_pixel = true;  // ablation switches
    bool use_lpips = true;
    bool use_id = true;
    int log_interval = 20;
    int checkpoint_interval = 500;
    std::uint64_t seed = 1;

    void check() const {
        require(steps >= 0 && batch_size >= 1, "restorer hyper: invalid steps/batch");
        require(lr > 0.0, "restorer hyper: lr must be positive");
        require(lambda_lpips >= 0.0 && lambda_id >= 0.0, "restorer hyper: weights must be >= 0");
        require(use_pixel || use_lpips || use_id, "restorer hyper: all losses disabled");
        require(log_interval >= 1 && checkpoint_interval >= 1,
                "restorer hyper: intervals must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const RestorerHyper& h) {
    j = {{"steps", h.steps},
         {"batch_size", h.batch_size},
         {"lr", h.lr},
         {"lambda_lpips", h.lambda_lpips},
         {"lambda_id", h.lambda_id},
         {"use_pixel", h.use_pixel},
         {"use_lpips", h.use_lpips},
         {"use_id", h.use_id},
         {"log_interval", h.log_interval},
         {"checkpoint_interval", h.checkpoint_interval},
         {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, RestorerHyper& h) {
    h.steps = j.value("steps", h.steps);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.lr = j.value("lr", h.lr);
    h.lambda_lpips = j.value("lambda_lpips", h.lambda_lpips);
    h.lambda_id = j.value("lambda_id", h.lambda_id);
    h.use_pixel = j.value("use_pixel", h.use_pixel);
    h.use_lpips = j.value("use_lpips", h.use_lpips);
    h.use_id = j.value("use_id", h.use_id);
    h.log_interval = j.value("log_interval", h.log_interval);
    h.checkpoint_interval = j.value("checkpoint_interval", h.checkpoint_interval);
    h.seed = j.value("seed", h.seed);
}

struct TrainRestorerResult {
    ParamStore params;
    double final_l_pixel = 0.0;
    long steps_run = 0;
};

// Minimizes use_pixel*L1 + use_lpips*lambda_lpips*LPIPS + use_id*lambda_id*Lid
// between restore(I_low) and I_high through the frozen generator. Writes
// rest.ckpt and metrics.csv (step, l_pixel, l_lpips, l_id, lr) under out_dir.
inline TrainRestorerResult train_restorer(const std::vector<RestorationPair>& pairs,
                                          const GeneratorConfig& gcfg,
                                          const ParamStore& gen_params, const LatentWPlus& wbar,
                                          const RestorerConfig& cfg, const RestorerHyper& hyper,
                                          const PerceptualExtractor& perceptual,
                                          const IdentityFeatureExtractor& identity,
                                          const std::filesystem::path& out_dir) {
    cfg.check();
    hyper.check();
    require(!pairs.empty(), "train_restorer: dataset must be non-empty");
    require(cfg.latent_dim == gcfg.latent_dim && cfg.num_style_layers == gcfg.num_style_layers(),
            "train_restorer: restorer and generator dimensions must match");
    for (const auto& pr : pairs) {
        require(pr.low.width == cfg.input_resolution && pr.low.height == cfg.input_resolution,
                "train_restorer: low maps must match restorer input resolution");
        require(pr.high.width == gcfg.out_resolution && pr.high.height == gcfg.out_resolution,
                "train_restorer: high maps must match generator resolution");
    }
    std::filesystem::create_directories(out_dir);

    Rng rng(hyper.seed);
    TrainRestorerResult result;
    result.params = init_restorer_params(cfg, rng);

    AdamConfig acfg;
    acfg.lr = hyper.lr;
    Adam opt(acfg);

    std::string csv = "step,l_pixel,l_lpips,l_id,lr\n";
    auto save = [&](const std::filesystem::path& dir, long step) {
        CheckpointMeta meta;
        meta.config = nlohmann::json{{"restorer", nlohmann::json(cfg)},
                                     {"generator", nlohmann::json(gcfg)},
                                     {"hyper", nlohmann::json(hyper)}};
        meta.step = step;
        meta.seed = hyper.seed;
        save_checkpoint(dir / "rest.ckpt", result.params, meta);
    };

    for (long step = 0; step < hyper.steps; ++step) {
        const double lr_scale = cosine_lr_scale(step, hyper.steps);
        std::map<std::string, Tensor> grads;
        double pixel_sum = 0.0, lpips_sum = 0.0, id_sum = 0.0;
        for (int b = 0; b < hyper.batch_size; ++b) {
            const RestorationPair& pr = pairs[static_cast<std::size_t>(
                rng.below(static_cast<std::uint64_t>(pairs.size())))];
            ad::Tape t;
            auto pe = make_leaves(t, result.params);
            auto pg = make_constants(t, gen_params);
            Tensor low({1, cfg.input_resolution, cfg.input_resolution}, to_tensor(pr.low).vec());
            ad::Var offset = rest::restorer_graph(t, cfg, pe, t.constant(low));
            ad::Var wplus = t.add(offset, t.constant(wbar));
            ad::Var unit =
                t.scale(t.add_const(gen::synthesis_graph(t, gcfg, pg, wplus, {}), 1.0), 0.5);
            Tensor high({1, gcfg.out_resolution, gcfg.out_resolution}, to_tensor(pr.high).vec());
            ad::Var target = t.constant(high);

            ad::Var loss = t.scalar_const(0.0);
            ad::Var l_pixel = perc::loss_pixel_graph(t, unit, target);
            pixel_sum += t.val(l_pixel)[0];
            if (hyper.use_pixel) loss = t.add(loss, t.reshape(l_pixel, {1}));
            if (hyper.use_lpips && hyper.lambda_lpips > 0.0) {
                ad::Var l_lpips = perc::loss_lpips_graph(t, unit, target, perceptual);
                lpips_sum += t.val(l_lpips)[0];
                loss = t.add(loss, t.scale(t.reshape(l_lpips, {1}), hyper.lambda_lpips));
            }
            if (hyper.use_id && hyper.lambda_id > 0.0) {
                ad::Var l_id = perc::loss_id_graph(t, unit, target, identity);
                id_sum += t.val(l_id)[0];
                loss = t.add(loss, t.scale(t.reshape(l_id, {1}), hyper.lambda_id));
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
        const double l_id = id_sum / hyper.batch_size;
        opt.step(result.params, grads, lr_scale);

        if (!std::isfinite(l_pixel) || !std::isfinite(l_lpips) || !std::isfinite(l_id) ||
            !result.params.all_finite()) {
            std::filesystem::path diag = out_dir / "diagnostic";
            std::filesystem::create_directories(diag);
            save(diag, step);
            write_text_file(out_dir / "metrics.csv", csv);
            throw NumericError("train_restorer: non-finite loss at step " + std::to_string(step) +
                               "; diagnostic checkpoint written to " + diag.string());
        }
        result.final_l_pixel = l_pixel;
        if (step % hyper.log_interval == 0 || step == hyper.steps - 1) {
            csv += std::to_string(step) + "," + format_metric(l_pixel, 9) + "," +
                   format_metric(l_lpips, 9) + "," + format_metric(l_id, 9) + "," +
                   format_metric(hyper.lr * lr_scale, 9) + "\n";
        }
        if ((step + 1) % hyper.checkpoint_interval == 0) save(out_dir, step + 1);
        result.steps_run = step + 1;
    }

    save(out_dir, result.steps_run);
    write_text_file(out_dir / "metrics.csv", csv);
    return result;
}

// ---------------------------------------------------------------------------
// Degraded-image -> detailed-mesh pipeline
// ---------------------------------------------------------------------------

// Finds 2D landmark positions in an observed image.
class LandmarkDetector {
  public:
    virtual ~LandmarkDetector() = default;
    virtual std::vector<Vec2> detect(const DisplacementMap& image) const = 0;
};

// Maps an observed image to a (degraded) displacement map.
class DisplacementRegressor {
  public:
    virtual ~DisplacementRegressor() = default;
    virtual DisplacementMap regress(const DisplacementMap& image) const = 0;
};

// Ground-truth passthroughs for closed-loop fixtures.
class FixedLandmarkDetector final : public LandmarkDetector {
  public:
    explicit FixedLandmarkDetector(std::vector<Vec2> landmarks) : landmarks_(std::move(landmarks)) {}
    std::vector<Vec2> detect(const DisplacementMap&) const override { return landmarks_; }

  private:
    std::vector<Vec2> landmarks_;
};

class PassthroughRegressor final : public DisplacementRegressor {
  public:
    explicit PassthroughRegressor(DisplacementMap low) : low_(std::move(low)) {}
    DisplacementMap regress(const DisplacementMap&) const override { return low_; }

  private:
    DisplacementMap low_;
};

// Adapter for an external tool: reads the map it produced from a 16-bit PNG.
class PngFileRegressor final : public DisplacementRegressor {
  public:
    explicit PngFileRegressor(std::filesystem::path path) : path_(std::move(path)) {}
    DisplacementMap regress(const DisplacementMap&) const override { return load_png16(path_); }

  private:
    std::filesystem::path path_;
};

struct ReconstructionConfig {
    std::vector<int> landmark_ids;  // template vertex indices observed as landmarks
    FitConfig fit;
    // Default to canonical unit coefficients (1, 0, ...): the bilinear form
    // has a zero Jacobian at the all-zero point, which would stall the fit.
    std::vector<double> init_w_id, init_w_exp;
    Camera init_camera;
    double s = 1.0;
    int subdiv_levels = 0;
    double d_max = 0.002;
};

struct ReconstructionResult {
    Mesh mesh;
    FitResult fit;
    DisplacementMap restored;
};

inline ReconstructionResult reconstruct_from_degraded_image(
    const DisplacementMap& image, const BilinearModel& model, const LandmarkDetector* detector,
    const DisplacementRegressor* regressor, const RestorerConfig& rcfg, const ParamStore& rparams,
    const GeneratorConfig& gcfg, const ParamStore& gparams, const LatentWPlus& wbar,
    const ReconstructionConfig& cfg) {
    require(detector != nullptr, "reconstruct: landmark detector is not bound");
    require(regressor != nullptr, "reconstruct: displacement regressor is not bound");
    std::vector<Vec2> observed = detector->detect(image);
    auto canonical = [](int n) {
        std::vector<double> w(static_cast<std::size_t>(n), 0.0);
        w[0] = 1.0;
        return w;
    };
    std::vector<double> w_id0 = cfg.init_w_id.empty() ? canonical(model.core.n_id()) : cfg.init_w_id;
    std::vector<double> w_exp0 =
        cfg.init_w_exp.empty() ? canonical(model.core.n_exp()) : cfg.init_w_exp;
    ReconstructionResult out;
    out.fit = fit_landmarks(model.core, cfg.landmark_ids, observed, w_id0, w_exp0,
                            cfg.init_camera, cfg.fit);
    Mesh proxy = bilinear_proxy(model, out.fit.w_id, out.fit.w_exp);
    DisplacementMap low = regressor->regress(image);
    out.restored = restore(rcfg, rparams, gcfg, gparams, wbar, low);
    out.mesh = apply_displacement(proxy, out.restored, cfg.s, cfg.subdiv_levels, cfg.d_max);
    return out;
}

}  // namespace dnpm

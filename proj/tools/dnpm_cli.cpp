// Command-line front end wiring the synthesis, training, and evaluation
// pipelines together. Exit codes: 0 success, 2 configuration error (bad
// flags, bad config JSON, invalid parameter combinations), 3 runtime failure
// (I/O, numeric aborts).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "dnpm/audio.hpp"
#include "dnpm/audio2exp.hpp"
#include "dnpm/encoder.hpp"
#include "dnpm/fitting.hpp"
#include "dnpm/gan.hpp"
#include "dnpm/generator.hpp"
#include "dnpm/geometry.hpp"
#include "dnpm/metrics.hpp"
#include "dnpm/perceptual.hpp"
#include "dnpm/restoration.hpp"
#include "dnpm/synth.hpp"

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration plumbing
// ---------------------------------------------------------------------------

json read_config(const std::string& path) {
    if (path.empty()) return json::object();
    json j;
    try {
        j = json::parse(dnpm::read_text_file(path));
    } catch (const std::exception& e) {
        throw dnpm::ConfigError(std::string("cannot read config: ") + e.what());
    }
    if (!j.is_object()) throw dnpm::ConfigError("config must be a JSON object");
    return j;
}

// Reads one typed section, treating malformed content as a config error.
template <typename T>
T section(const json& j, const char* key) {
    try {
        return j.value(key, T{});
    } catch (const json::exception& e) {
        throw dnpm::ConfigError(std::string("bad config section '") + key + "': " + e.what());
    }
}

// Runs the configuration phase of a subcommand: any validation failure in
// here is a usage problem, not a runtime one.
template <typename F>
auto configure(F&& f) {
    try {
        return f();
    } catch (const dnpm::ConfigError&) {
        throw;
    } catch (const json::exception& e) {
        throw dnpm::ConfigError(e.what());
    } catch (const dnpm::Error& e) {
        throw dnpm::ConfigError(e.what());
    }
}

std::vector<double> parse_coeffs(const std::string& text, const char* what) {
    return configure([&] {
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception&) {
            throw dnpm::ConfigError(std::string(what) + " must be a JSON array of numbers");
        }
        if (!j.is_array() || j.empty())
            throw dnpm::ConfigError(std::string(what) + " must be a non-empty JSON array");
        return j.get<std::vector<double>>();
    });
}

// ---------------------------------------------------------------------------
// Parameter sources: a checkpoint when given, a seeded init otherwise. When a
// checkpoint embeds its architecture section, that config wins so the loaded
// tensors always match.
// ---------------------------------------------------------------------------

template <typename Config>
dnpm::ParamStore load_or_init(const std::string& ckpt, const char* meta_key, Config& cfg,
                              std::uint64_t init_seed,
                              dnpm::ParamStore (*init)(const Config&, dnpm::Rng&)) {
    if (!ckpt.empty()) {
        auto [params, meta] = dnpm::load_checkpoint(ckpt);
        if (meta.config.contains(meta_key))
            cfg = meta.config.at(meta_key).get<Config>();
        else if (meta.config.is_object())
            cfg = meta.config.get<Config>();  // single-model checkpoints store it flat
        return params;
    }
    dnpm::Rng rng(init_seed);
    return init(cfg, rng);
}

struct PipelineOptions {
    double s = 1.0;
    int subdiv_levels = 1;
    double d_max = 0.002;
    int wbar_samples = 64;
    std::uint64_t wbar_seed = 97;
};

PipelineOptions pipeline_options(const json& cfg) {
    const json p = cfg.value("pipeline", json::object());
    PipelineOptions o;
    o.s = p.value("s", o.s);
    o.subdiv_levels = p.value("subdiv_levels", o.subdiv_levels);
    o.d_max = p.value("d_max", o.d_max);
    o.wbar_samples = p.value("wbar_samples", o.wbar_samples);
    o.wbar_seed = p.value("wbar_seed", o.wbar_seed);
    return o;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int run_synth_data(const json& cfg, std::optional<std::uint64_t> seed, const std::string& out) {
    dnpm::SynthConfig scfg = configure([&] {
        dnpm::SynthConfig c = section<dnpm::SynthConfig>(cfg, "synth");
        if (seed) c.seed = *seed;
        c.check();
        return c;
    });
    dnpm::SynthDataset ds = dnpm::synth_dataset(scfg);
    std::vector<dnpm::SynthAudioClip> clips = dnpm::synth_audio_clips(scfg);
    dnpm::write_synth_dataset(ds, out, clips);
    std::cout << "wrote " << ds.train.size() << " train + " << ds.test.size() << " test maps, "
              << clips.size() << " clips to " << out << "\n";
    std::cout << "directory hash " << dnpm::hash_directory(out) << "\n";
    return 0;
}

int run_train_dnpm(const json& cfg, std::optional<std::uint64_t> seed, const std::string& data,
                   const std::string& out) {
    dnpm::SynthDataset ds = dnpm::load_synth_dataset(data);
    auto [gcfg, hyper] = configure([&] {
        dnpm::GeneratorConfig g = section<dnpm::GeneratorConfig>(cfg, "generator");
        if (!cfg.contains("generator")) g.out_resolution = ds.config.resolution;
        dnpm::GanHyper h = section<dnpm::GanHyper>(cfg, "gan");
        if (seed) h.seed = *seed;
        g.check();
        h.check();
        return std::pair(g, h);
    });
    std::vector<dnpm::DisplacementMap> maps;
    for (const auto& s : ds.train) maps.push_back(s.map);
    dnpm::TrainDnpmResult r = dnpm::train_dnpm(maps, gcfg, hyper, out);
    std::cout << "trained generator for " << r.steps_run << " steps (final D accuracy "
              << dnpm::format_metric(r.final_d_accuracy) << "); checkpoints in " << out << "\n";
    return 0;
}

int run_train_encoder(const json& cfg, std::optional<std::uint64_t> seed, const std::string& data,
                      const std::string& out, const std::string& gen_ckpt) {
    dnpm::SynthDataset ds = dnpm::load_synth_dataset(data);
    dnpm::GeneratorConfig gcfg = section<dnpm::GeneratorConfig>(cfg, "generator");
    if (!cfg.contains("generator")) gcfg.out_resolution = ds.config.resolution;
    dnpm::ParamStore gen_params =
        load_or_init(gen_ckpt, "generator", gcfg, seed.value_or(1) ^ 0x67eULL, &dnpm::init_generator_params);
    auto [ecfg, hyper, opts] = configure([&] {
        dnpm::EncoderConfig e = section<dnpm::EncoderConfig>(cfg, "encoder");
        e.id_dim = ds.config.n_id;
        e.exp_dim = ds.config.n_exp;
        e.latent_dim = gcfg.latent_dim;
        e.num_style_layers = gcfg.num_style_layers();
        dnpm::EncoderHyper h = section<dnpm::EncoderHyper>(cfg, "encoder_hyper");
        if (seed) h.seed = *seed;
        gcfg.check();
        e.check();
        h.check();
        dnpm::require(gcfg.out_resolution == ds.config.resolution,
                "generator resolution does not match the dataset maps");
        return std::tuple(e, h, pipeline_options(cfg));
    });
    dnpm::LatentWPlus wbar =
        dnpm::average_latent(gcfg, gen_params, opts.wbar_samples, opts.wbar_seed);
    std::vector<dnpm::EncoderSample> samples;
    for (const auto& s : ds.train)
        samples.push_back({dnpm::Tensor({1, ecfg.id_dim}, s.w_id),
                           dnpm::Tensor({1, ecfg.exp_dim}, s.w_exp), s.map});
    dnpm::RandomConvPyramid perceptual(gcfg.out_resolution, 3, 8, 4242);
    dnpm::TrainEncoderResult r =
        dnpm::train_encoder(samples, gcfg, gen_params, wbar, ecfg, hyper, perceptual, out);
    std::cout << "trained encoder for " << r.steps_run << " steps (final L_pixel "
              << dnpm::format_metric(r.final_l_pixel) << "); checkpoint in " << out << "\n";
    return 0;
}

int run_train_restorer(const json& cfg, std::optional<std::uint64_t> seed, const std::string& data,
                       const std::string& out, const std::string& gen_ckpt) {
    dnpm::SynthDataset ds = dnpm::load_synth_dataset(data);
    dnpm::GeneratorConfig gcfg = section<dnpm::GeneratorConfig>(cfg, "generator");
    if (!cfg.contains("generator")) gcfg.out_resolution = ds.config.resolution;
    dnpm::ParamStore gen_params =
        load_or_init(gen_ckpt, "generator", gcfg, seed.value_or(1) ^ 0x67eULL, &dnpm::init_generator_params);
    auto [spec, rcfg, hyper, opts] = configure([&] {
        dnpm::DegradationSpec d = section<dnpm::DegradationSpec>(cfg, "degradation");
        dnpm::RestorerConfig r = section<dnpm::RestorerConfig>(cfg, "restorer");
        r.input_resolution = d.output_resolution(gcfg.out_resolution);
        r.latent_dim = gcfg.latent_dim;
        r.num_style_layers = gcfg.num_style_layers();
        dnpm::RestorerHyper h = section<dnpm::RestorerHyper>(cfg, "restorer_hyper");
        if (seed) h.seed = *seed;
        gcfg.check();
        d.check();
        r.check();
        h.check();
        dnpm::require(gcfg.out_resolution == ds.config.resolution,
                "generator resolution does not match the dataset maps");
        return std::tuple(d, r, h, pipeline_options(cfg));
    });
    dnpm::LatentWPlus wbar =
        dnpm::average_latent(gcfg, gen_params, opts.wbar_samples, opts.wbar_seed);
    std::vector<dnpm::RestorationPair> pairs;
    for (const auto& s : ds.train) pairs.push_back({dnpm::degrade(s.map, spec), s.map});
    dnpm::RandomConvPyramid perceptual(gcfg.out_resolution, 3, 8, 4242);
    dnpm::RandomIdentityPyramid identity(gcfg.out_resolution, 8, 4321);
    dnpm::TrainRestorerResult r = dnpm::train_restorer(pairs, gcfg, gen_params, wbar, rcfg, hyper,
                                                       perceptual, identity, out);
    std::cout << "trained restorer for " << r.steps_run << " steps (final L_pixel "
              << dnpm::format_metric(r.final_l_pixel) << "); checkpoint in " << out << "\n";
    return 0;
}

int run_train_audio2exp(const json& cfg, std::optional<std::uint64_t> seed,
                        const std::string& data, const std::string& out) {
    dnpm::SynthDataset ds = dnpm::load_synth_dataset(data);
    std::vector<dnpm::SynthAudioClip> raw = dnpm::load_synth_audio(data);
    auto [fb, acfg, hyper] = configure([&] {
        dnpm::FilterbankConfig f = section<dnpm::FilterbankConfig>(cfg, "filterbank");
        dnpm::Audio2ExpConfig a = section<dnpm::Audio2ExpConfig>(cfg, "audio2exp");
        a.audio_dim = f.n_mels;
        dnpm::Audio2ExpHyper h = section<dnpm::Audio2ExpHyper>(cfg, "audio2exp_hyper");
        if (seed) h.seed = *seed;
        f.check();
        a.check();
        h.check();
        return std::tuple(f, a, h);
    });
    dnpm::LogMelProvider provider(fb);
    std::vector<dnpm::AudioExpClip> clips;
    for (const auto& c : raw) clips.push_back({provider.features(c.audio), c.gt});
    dnpm::BilinearModel model = dnpm::animation_model(ds);
    std::vector<double> w_id(static_cast<std::size_t>(ds.config.n_id), 0.0);
    w_id[0] = 1.0;
    dnpm::TrainAudio2ExpResult r =
        dnpm::train_audio2exp(clips, model.core, {w_id}, acfg, hyper, out);
    std::cout << "trained audio decoder for " << r.steps_run << " steps (final L_exp "
              << dnpm::format_metric(r.final_l_exp) << "); checkpoint in " << out << "\n";
    return 0;
}

int run_generate(const json& cfg, std::optional<std::uint64_t> seed, const std::string& data,
                 const std::string& out, const std::string& gen_ckpt, const std::string& enc_ckpt,
                 const std::string& id_text, const std::string& exp_text) {
    std::vector<double> w_id = parse_coeffs(id_text, "--id");
    std::vector<double> w_exp = parse_coeffs(exp_text, "--exp");
    dnpm::SynthDataset ds = dnpm::load_synth_dataset(data);
    dnpm::GeneratorConfig gcfg = section<dnpm::GeneratorConfig>(cfg, "generator");
    if (!cfg.contains("generator")) gcfg.out_resolution = ds.config.resolution;
    dnpm::ParamStore gen_params =
        load_or_init(gen_ckpt, "generator", gcfg, seed.value_or(1) ^ 0x67eULL, &dnpm::init_generator_params);
    dnpm::EncoderConfig ecfg = section<dnpm::EncoderConfig>(cfg, "encoder");
    ecfg.id_dim = ds.config.n_id;
    ecfg.exp_dim = ds.config.n_exp;
    ecfg.latent_dim = gcfg.latent_dim;
    ecfg.num_style_layers = gcfg.num_style_layers();
    dnpm::ParamStore enc_params =
        load_or_init(enc_ckpt, "encoder", ecfg, seed.value_or(1) ^ 0x3c0dULL, &dnpm::init_encoder_params);
    PipelineOptions opts = configure([&] {
        gcfg.check();
        ecfg.check();
        dnpm::require(static_cast<int>(w_id.size()) == ecfg.id_dim,
                "--id needs " + std::to_string(ecfg.id_dim) + " entries");
        dnpm::require(static_cast<int>(w_exp.size()) == ecfg.exp_dim,
                "--exp needs " + std::to_string(ecfg.exp_dim) + " entries");
        return pipeline_options(cfg);
    });
    dnpm::LatentWPlus wbar =
        dnpm::average_latent(gcfg, gen_params, opts.wbar_samples, opts.wbar_seed);

    dnpm::Tensor id_t({1, ecfg.id_dim}, w_id);
    dnpm::Tensor exp_t({1, ecfg.exp_dim}, w_exp);
    dnpm::LatentWPlus offset = dnpm::encoder_forward(ecfg, enc_params, id_t, exp_t);
    dnpm::LatentWPlus wplus(wbar.shape());
    for (std::int64_t i = 0; i < wplus.numel(); ++i) wplus[i] = wbar[i] + offset[i];
    dnpm::DisplacementMap map = dnpm::synthesis_forward(gcfg, gen_params, wplus);
    dnpm::Mesh proxy = dnpm::bilinear_proxy(ds.model, w_id, w_exp);
    dnpm::Mesh mesh = dnpm::apply_displacement(proxy, map, opts.s, opts.subdiv_levels, opts.d_max);

    std::filesystem::create_directories(out);
    dnpm::write_obj(mesh, std::filesystem::path(out) / "mesh.obj");
    dnpm::save_png16(map, std::filesystem::path(out) / "map.png");
    std::cout << "wrote mesh.obj (" << mesh.n_vertices() << " vertices) and map.png ("
              << map.width << "x" << map.height << ") to " << out << "\n";
    return 0;
}

int run_restore(const json& cfg, std::optional<std::uint64_t> seed, const std::string& input,
                const std::string& out, const std::string& gen_ckpt, const std::string& rest_ckpt,
                const std::string& truth) {
    dnpm::GeneratorConfig gcfg = section<dnpm::GeneratorConfig>(cfg, "generator");
    dnpm::ParamStore gen_params =
        load_or_init(gen_ckpt, "generator", gcfg, seed.value_or(1) ^ 0x67eULL, &dnpm::init_generator_params);
    dnpm::RestorerConfig rcfg = section<dnpm::RestorerConfig>(cfg, "restorer");
    rcfg.latent_dim = gcfg.latent_dim;
    rcfg.num_style_layers = gcfg.num_style_layers();
    dnpm::ParamStore rest_params =
        load_or_init(rest_ckpt, "restorer", rcfg, seed.value_or(1) ^ 0x4e57ULL, &dnpm::init_restorer_params);
    PipelineOptions opts = configure([&] {
        gcfg.check();
        rcfg.check();
        return pipeline_options(cfg);
    });
    dnpm::LatentWPlus wbar =
        dnpm::average_latent(gcfg, gen_params, opts.wbar_samples, opts.wbar_seed);

    dnpm::DisplacementMap low = dnpm::load_png16(input);
    dnpm::require(low.width == rcfg.input_resolution && low.height == rcfg.input_resolution,
                  "input resolution " + std::to_string(low.width) + " does not match restorer (" +
                      std::to_string(rcfg.input_resolution) + ")");
    dnpm::DisplacementMap restored = dnpm::restore(rcfg, rest_params, gcfg, gen_params, wbar, low);
    std::filesystem::create_directories(out);
    dnpm::save_png16(restored, std::filesystem::path(out) / "restored.png");
    std::cout << "wrote restored.png (" << restored.width << "x" << restored.height << ") to "
              << out << "\n";

    if (!truth.empty()) {
        dnpm::DisplacementMap high = dnpm::load_png16(truth);
        dnpm::DisplacementMap baseline = dnpm::bicubic_resize(low, high.width, high.height);
        std::vector<dnpm::EvalRow> rows = {
            {"restored", "vs-truth", dnpm::psnr(restored, high), dnpm::ssim(restored, high)},
            {"bicubic", "vs-truth", dnpm::psnr(baseline, high), dnpm::ssim(baseline, high)}};
        std::cout << dnpm::format_eval_table(rows);
        dnpm::write_eval_table(rows, std::filesystem::path(out) / "eval.csv");
    }
    return 0;
}

int run_animate(const json& cfg, std::optional<std::uint64_t> seed, const std::string& data,
                const std::string& audio_path, const std::string& out, const std::string& gen_ckpt,
                const std::string& enc_ckpt, const std::string& a2e_ckpt,
                const std::string& id_text) {
    dnpm::SynthDataset ds = dnpm::load_synth_dataset(data);
    dnpm::GeneratorConfig gcfg = section<dnpm::GeneratorConfig>(cfg, "generator");
    if (!cfg.contains("generator")) gcfg.out_resolution = ds.config.resolution;
    dnpm::ParamStore gen_params =
        load_or_init(gen_ckpt, "generator", gcfg, seed.value_or(1) ^ 0x67eULL, &dnpm::init_generator_params);
    dnpm::EncoderConfig ecfg = section<dnpm::EncoderConfig>(cfg, "encoder");
    ecfg.id_dim = ds.config.n_id;
    ecfg.exp_dim = dnpm::kNumArkitChannels;
    ecfg.latent_dim = gcfg.latent_dim;
    ecfg.num_style_layers = gcfg.num_style_layers();
    dnpm::ParamStore enc_params =
        load_or_init(enc_ckpt, "encoder", ecfg, seed.value_or(1) ^ 0x3c0dULL, &dnpm::init_encoder_params);
    auto [fb, acfg, opts, w_id] = configure([&] {
        dnpm::FilterbankConfig f = section<dnpm::FilterbankConfig>(cfg, "filterbank");
        dnpm::Audio2ExpConfig a = section<dnpm::Audio2ExpConfig>(cfg, "audio2exp");
        a.audio_dim = f.n_mels;
        f.check();
        gcfg.check();
        ecfg.check();
        std::vector<double> id(static_cast<std::size_t>(ds.config.n_id), 0.0);
        id[0] = 1.0;
        if (!id_text.empty()) id = parse_coeffs(id_text, "--id");
        dnpm::require(static_cast<int>(id.size()) == ds.config.n_id,
                "--id needs " + std::to_string(ds.config.n_id) + " entries");
        return std::tuple(f, a, pipeline_options(cfg), id);
    });
    dnpm::Audio2ExpConfig a2e_cfg = acfg;
    dnpm::ParamStore a2e_params =
        load_or_init(a2e_ckpt, "audio2exp", a2e_cfg, seed.value_or(1) ^ 0xa2eULL,
                     &dnpm::init_audio2exp_params);
    configure([&] {
        a2e_cfg.check();
        dnpm::require(a2e_cfg.audio_dim == fb.n_mels,
                "audio decoder expects " + std::to_string(a2e_cfg.audio_dim) +
                    "-dim features but the filterbank yields " + std::to_string(fb.n_mels));
        return 0;
    });

    dnpm::Detailed3dmmBundle bundle;
    bundle.model = dnpm::animation_model(ds);
    bundle.ecfg = ecfg;
    bundle.enc_params = enc_params;
    bundle.gcfg = gcfg;
    bundle.gen_params = gen_params;
    bundle.wbar = dnpm::average_latent(gcfg, gen_params, opts.wbar_samples, opts.wbar_seed);
    bundle.s = opts.s;
    bundle.subdiv_levels = opts.subdiv_levels;
    bundle.d_max = opts.d_max;

    dnpm::AudioClip clip = dnpm::load_wav(audio_path);
    dnpm::LogMelProvider provider(fb);
    dnpm::AudioFeatureSeq features = provider.features(clip);
    dnpm::AnimationResult result = dnpm::animate(a2e_cfg, a2e_params, features, w_id, bundle);
    dnpm::write_animation(out, result, a2e_cfg.fps_out, w_id);
    dnpm::save_arkit_csv(std::filesystem::path(out) / "arkit.csv", result.expressions);
    std::cout << "wrote " << result.frames.size() << " frames and arkit.csv to " << out << "\n";
    return 0;
}

int run_eval(const std::string& a_path, const std::string& b_path, const std::string& method,
             const std::string& protocol, const std::string& out) {
    dnpm::DisplacementMap a = dnpm::load_png16(a_path);
    dnpm::DisplacementMap b = dnpm::load_png16(b_path);
    std::vector<dnpm::EvalRow> rows = {{method, protocol, dnpm::psnr(a, b), dnpm::ssim(a, b)}};
    std::cout << dnpm::format_eval_table(rows);
    if (!out.empty()) dnpm::write_eval_table(rows, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Detail-layer parametric face model pipelines"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "JSON configuration file")->expected(1);
    app.add_option("--seed", seed, "Seed override for the invoked pipeline")->expected(1);

    // Shared flag storage; only the chosen subcommand reads its subset.
    std::string data, out, input, truth, audio_path;
    std::string gen_ckpt, enc_ckpt, rest_ckpt, a2e_ckpt;
    std::string id_text, exp_text;
    std::string eval_a, eval_b, method = "ours", protocol = "direct", eval_out;

    // --config/--seed live on the parent so they work for every subcommand;
    // fallthrough lets them appear after the subcommand name too.
    auto add_subcommand = [&app](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->fallthrough();
        return sub;
    };

    CLI::App* synth = add_subcommand("synth-data", "Generate the procedural dataset");
    synth->add_option("--out", out, "Output directory")->required();

    CLI::App* tdnpm = add_subcommand("train-dnpm", "Adversarially train the map generator");
    tdnpm->add_option("--data", data, "Dataset directory")->required();
    tdnpm->add_option("--out", out, "Output directory")->required();

    CLI::App* tenc = add_subcommand("train-encoder", "Train the coefficient-to-latent encoder");
    tenc->add_option("--data", data, "Dataset directory")->required();
    tenc->add_option("--out", out, "Output directory")->required();
    tenc->add_option("--gen", gen_ckpt, "Generator checkpoint (seeded init when omitted)");

    CLI::App* trest = add_subcommand("train-restorer", "Train the degraded-map encoder");
    trest->add_option("--data", data, "Dataset directory")->required();
    trest->add_option("--out", out, "Output directory")->required();
    trest->add_option("--gen", gen_ckpt, "Generator checkpoint (seeded init when omitted)");

    CLI::App* ta2e = add_subcommand("train-audio2exp", "Train the audio-to-expression decoder");
    ta2e->add_option("--data", data, "Dataset directory")->required();
    ta2e->add_option("--out", out, "Output directory")->required();

    CLI::App* gen = add_subcommand("generate", "Render a detailed mesh from coefficients");
    gen->add_option("--data", data, "Dataset directory")->required();
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--id", id_text, "Identity coefficients as a JSON array")->required();
    gen->add_option("--exp", exp_text, "Expression coefficients as a JSON array")->required();
    gen->add_option("--gen", gen_ckpt, "Generator checkpoint");
    gen->add_option("--enc", enc_ckpt, "Encoder checkpoint");

    CLI::App* rest = add_subcommand("restore", "Restore a degraded displacement map");
    rest->add_option("--input", input, "Low-quality 16-bit PNG")->required();
    rest->add_option("--out", out, "Output directory")->required();
    rest->add_option("--gen", gen_ckpt, "Generator checkpoint");
    rest->add_option("--rest", rest_ckpt, "Restorer checkpoint");
    rest->add_option("--truth", truth, "Ground-truth PNG for evaluation");

    CLI::App* anim = add_subcommand("animate", "Drive the detailed model from speech");
    anim->add_option("--data", data, "Dataset directory")->required();
    anim->add_option("--audio", audio_path, "16 kHz mono PCM16 WAV")->required();
    anim->add_option("--out", out, "Output directory")->required();
    anim->add_option("--id", id_text, "Identity coefficients as a JSON array");
    anim->add_option("--gen", gen_ckpt, "Generator checkpoint");
    anim->add_option("--enc", enc_ckpt, "Encoder checkpoint");
    anim->add_option("--a2e", a2e_ckpt, "Audio decoder checkpoint");

    CLI::App* ev = add_subcommand("eval", "PSNR/SSIM between two 16-bit PNGs");
    ev->add_option("--a", eval_a, "First map")->required();
    ev->add_option("--b", eval_b, "Second map")->required();
    ev->add_option("--method", method, "Method label for the table");
    ev->add_option("--protocol", protocol, "Protocol label for the table");
    ev->add_option("--out", eval_out, "Also write the table to this CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    }

    try {
        const json cfg = read_config(config_path);
        if (synth->parsed()) return run_synth_data(cfg, seed, out);
        if (tdnpm->parsed()) return run_train_dnpm(cfg, seed, data, out);
        if (tenc->parsed()) return run_train_encoder(cfg, seed, data, out, gen_ckpt);
        if (trest->parsed()) return run_train_restorer(cfg, seed, data, out, gen_ckpt);
        if (ta2e->parsed()) return run_train_audio2exp(cfg, seed, data, out);
        if (gen->parsed())
            return run_generate(cfg, seed, data, out, gen_ckpt, enc_ckpt, id_text, exp_text);
        if (rest->parsed()) return run_restore(cfg, seed, input, out, gen_ckpt, rest_ckpt, truth);
        if (anim->parsed())
            return run_animate(cfg, seed, data, audio_path, out, gen_ckpt, enc_ckpt, a2e_ckpt,
                               id_text);
        if (ev->parsed()) return run_eval(eval_a, eval_b, method, protocol, eval_out);
        std::cerr << app.help() << std::flush;
        return 2;
    } catch (const dnpm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

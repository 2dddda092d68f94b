#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "dnpm/audio2exp.hpp"
#include "test_util.hpp"

using namespace dnpm;
namespace fs = std::filesystem;

namespace {

Audio2ExpConfig toy_cfg() {
    Audio2ExpConfig cfg;
    cfg.audio_dim = 5;
    cfg.width = 8;
    cfg.num_layers = 1;
    cfg.fps_out = 30.0;
    return cfg;
}

AudioFeatureSeq toy_audio(int frames, double fps, std::uint64_t seed) {
    Rng rng(seed);
    AudioFeatureSeq audio;
    audio.features = Tensor::randn({frames, 5}, rng);
    audio.fps = fps;
    return audio;
}

ExpressionSeq random_expressions(int frames, std::uint64_t seed) {
    Rng rng(seed);
    ExpressionSeq seq({frames, kNumArkitChannels});
    for (std::int64_t i = 0; i < seq.numel(); ++i) seq[i] = 0.1 + 0.8 * rng.uniform();
    return seq;
}

}  // namespace

TEST_CASE("arkit channels") {
    const auto& names = arkit_channel_names();
    REQUIRE(names.size() == 52);
    std::set<std::string> unique(names.begin(), names.end());
    CHECK(unique.size() == 52);
    CHECK(names[0] == "eyeBlinkLeft");
    CHECK(names[17] == "jawOpen");
    CHECK(names[51] == "tongueOut");
}

TEST_CASE("arkit csv") {
    fs::path dir = fs::temp_directory_path();
    SECTION("round trip") {
        ExpressionSeq seq = random_expressions(7, 11);
        fs::path p = dir / "dnpm_arkit.csv";
        save_arkit_csv(p, seq);
        ExpressionSeq back = load_arkit_csv(p);
        REQUIRE(back.shape() == seq.shape());
        CHECK(test::max_abs_diff(back, seq) < 1e-9);
        std::istringstream in(read_text_file(p));
        std::string header;
        std::getline(in, header);
        CHECK(header.rfind("eyeBlinkLeft,", 0) == 0);
        CHECK(header.find("tongueOut") != std::string::npos);
    }
    SECTION("header and shape validation") {
        ExpressionSeq seq = random_expressions(2, 12);
        fs::path p = dir / "dnpm_arkit_bad.csv";
        save_arkit_csv(p, seq);
        std::string raw = read_text_file(p);

        std::string renamed = raw;
        renamed.replace(renamed.find("eyeBlinkLeft"), 12, "eyeBlinkLight");
        write_text_file(p, renamed);
        CHECK_THROWS_AS(load_arkit_csv(p), Error);

        // Drop the last column of the final row so it has 51 values.
        std::string truncated = raw.substr(0, raw.size() - 1);  // trailing newline
        truncated = truncated.substr(0, truncated.rfind(','));
        write_text_file(p, truncated + "\n");
        CHECK_THROWS_AS(load_arkit_csv(p), Error);

        write_text_file(p, raw.substr(0, raw.find('\n') + 1));  // header only
        CHECK_THROWS_AS(load_arkit_csv(p), Error);
    }
    SECTION("range validation") {
        ExpressionSeq seq = random_expressions(2, 13);
        seq[5] = 1.5;
        CHECK_THROWS_AS(save_arkit_csv(dir / "dnpm_arkit_rng.csv", seq), Error);
    }
}

TEST_CASE("audio frame alignment") {
    SECTION("rollout length") {
        CHECK(rollout_length(12, 100.0, 30.0) == 4);
        CHECK(rollout_length(100, 100.0, 30.0) == 30);
        CHECK(rollout_length(1, 100.0, 30.0) == 1);  // never below one frame
        CHECK(rollout_length(10, 30.0, 30.0) == 10);
    }
    SECTION("visible audio frames") {
        CHECK(visible_audio_frames(0, 100.0, 30.0, 100) == 4);
        CHECK(visible_audio_frames(2, 100.0, 30.0, 100) == 10);
        for (int t = 0; t < 30; ++t) {
            int v = visible_audio_frames(t, 100.0, 30.0, 100);
            CHECK(v >= 1);
            CHECK(v <= 100);
            if (t > 0) CHECK(v >= visible_audio_frames(t - 1, 100.0, 30.0, 100));
        }
        // Equal rates: exactly one new audio frame per output frame.
        for (int t = 0; t < 10; ++t) CHECK(visible_audio_frames(t, 30.0, 30.0, 100) == t + 1);
    }
}

TEST_CASE("decoder_step") {
    Audio2ExpConfig cfg = toy_cfg();
    Rng rng(21);
    ParamStore params = init_audio2exp_params(cfg, rng);
    AudioFeatureSeq audio = toy_audio(20, 100.0, 22);
    ExpressionSeq empty({0, kNumArkitChannels});

    SECTION("empty prefix uses the start token deterministically") {
        Tensor a = decoder_step(cfg, params, empty, audio);
        Tensor b = decoder_step(cfg, params, empty, audio);
        REQUIRE(a.shape() == std::vector<int>{1, kNumArkitChannels});
        CHECK(a.vec() == b.vec());
        ParamStore other = params;
        other.at("a2e.start") = Tensor::randn({1, cfg.width}, rng);
        Tensor c = decoder_step(cfg, other, empty, audio);
        CHECK(test::max_abs_diff(a, c) > 0.0);
    }
    SECTION("outputs stay in the unit interval") {
        ExpressionSeq past = random_expressions(5, 23);
        Tensor out = decoder_step(cfg, params, past, audio);
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out[i] > 0.0);
            CHECK(out[i] < 1.0);
        }
    }
    SECTION("dimension mismatches are rejected") {
        AudioFeatureSeq wrong = toy_audio(20, 100.0, 24);
        wrong.features = Tensor::randn({20, 4}, rng);
        CHECK_THROWS_AS(decoder_step(cfg, params, empty, wrong), Error);
        Tensor bad_past = Tensor::zeros({3, 51});
        CHECK_THROWS_AS(decoder_step(cfg, params, bad_past, audio), Error);
        ExpressionSeq out_of_range = random_expressions(3, 25);
        out_of_range[0] = 1.5;
        CHECK_THROWS_AS(decoder_step(cfg, params, out_of_range, audio), Error);
    }
    SECTION("future audio cannot change the present output") {
        // Output frame t sees audio frames [0, visible(t)); everything later
        // is masked to exact zero attention weight.
        for (int t : {0, 2, 4}) {
            ExpressionSeq past = random_expressions(t, 26 + static_cast<std::uint64_t>(t));
            Tensor base = decoder_step(cfg, params, past, audio);
            int visible = visible_audio_frames(t, audio.fps, cfg.fps_out, audio.num_frames());
            REQUIRE(visible < audio.num_frames());
            AudioFeatureSeq perturbed = audio;
            for (int j = visible; j < audio.num_frames(); ++j)
                for (int d = 0; d < cfg.audio_dim; ++d)
                    perturbed.features[static_cast<std::int64_t>(j) * cfg.audio_dim + d] +=
                        1000.0 * (j + 1);
            Tensor shifted = decoder_step(cfg, params, past, perturbed);
            INFO("prefix length " << t << ", visible " << visible);
            REQUIRE(base.vec() == shifted.vec());
        }
        // Sanity: perturbing a visible frame does change the output.
        Tensor base = decoder_step(cfg, params, empty, audio);
        AudioFeatureSeq visible_change = audio;
        visible_change.features[0] += 1.0;
        Tensor moved = decoder_step(cfg, params, empty, visible_change);
        CHECK(test::max_abs_diff(base, moved) > 0.0);
    }
}

TEST_CASE("rollout") {
    Audio2ExpConfig cfg = toy_cfg();
    Rng rng(31);
    ParamStore params = init_audio2exp_params(cfg, rng);
    AudioFeatureSeq audio = toy_audio(20, 100.0, 32);

    SECTION("equals the manual step-by-step loop") {
        ExpressionSeq seq = rollout(cfg, params, audio);
        int T = rollout_length(audio.num_frames(), audio.fps, cfg.fps_out);
        REQUIRE(seq.dim(0) == T);
        ExpressionSeq manual({T, kNumArkitChannels});
        for (int t = 0; t < T; ++t) {
            ExpressionSeq past({t, kNumArkitChannels},
                               std::vector<double>(manual.vec().begin(),
                                                   manual.vec().begin() +
                                                       static_cast<std::int64_t>(t) *
                                                           kNumArkitChannels));
            Tensor next = decoder_step(cfg, params, past, audio);
            for (int c = 0; c < kNumArkitChannels; ++c)
                manual[static_cast<std::int64_t>(t) * kNumArkitChannels + c] = next[c];
        }
        CHECK(seq.vec() == manual.vec());
    }
    SECTION("range invariant and repeatability") {
        ExpressionSeq a = rollout(cfg, params, audio);
        ExpressionSeq b = rollout(cfg, params, audio);
        CHECK(a.vec() == b.vec());
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            CHECK(a[i] >= 0.0);
            CHECK(a[i] <= 1.0);
        }
    }
    SECTION("single audio frame gives a single expression frame") {
        AudioFeatureSeq one = toy_audio(1, 100.0, 33);
        ExpressionSeq seq = rollout(cfg, params, one);
        CHECK(seq.dim(0) == 1);
    }
    SECTION("perturbing the last audio frame leaves earlier frames untouched") {
        ExpressionSeq base = rollout(cfg, params, audio);
        AudioFeatureSeq perturbed = audio;
        int last = audio.num_frames() - 1;
        for (int d = 0; d < cfg.audio_dim; ++d)
            perturbed.features[static_cast<std::int64_t>(last) * cfg.audio_dim + d] += 500.0;
        ExpressionSeq shifted = rollout(cfg, params, perturbed);
        int T = base.dim(0);
        int first_affected = T;
        for (int t = 0; t < T; ++t)
            if (visible_audio_frames(t, audio.fps, cfg.fps_out, audio.num_frames()) > last) {
                first_affected = t;
                break;
            }
        REQUIRE(first_affected > 0);
        for (int t = 0; t < first_affected; ++t)
            for (int c = 0; c < kNumArkitChannels; ++c)
                REQUIRE(base[static_cast<std::int64_t>(t) * kNumArkitChannels + c] ==
                        shifted[static_cast<std::int64_t>(t) * kNumArkitChannels + c]);
    }
}

TEST_CASE("audio2exp losses") {
    Rng rng(41);
    CoreTensor core(Tensor::randn({2, kNumArkitChannels, 12}, rng, 0.1));
    std::vector<double> w_id = {0.8, -0.3};

    SECTION("expression basis matches one-hot bilinear vertices") {
        Tensor basis = expression_vertex_basis(core, w_id);
        REQUIRE(basis.shape() == std::vector<int>{52, 12});
        for (int b : {0, 17, 51}) {
            std::vector<double> onehot(52, 0.0);
            onehot[static_cast<std::size_t>(b)] = 1.0;
            std::vector<Vec3> verts = bilinear_vertices(core, w_id, onehot);
            for (int v = 0; v < 4; ++v)
                for (int c = 0; c < 3; ++c)
                    CHECK(std::fabs(basis[static_cast<std::int64_t>(b) * 12 + 3 * v + c] -
                                    verts[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)]) <
                          1e-12);
        }
    }
    SECTION("ground-truth fixed point gives exactly zero") {
        ExpressionSeq gt = random_expressions(6, 42);
        Audio2ExpLosses l = audio2exp_losses(core, w_id, gt, gt);
        CHECK(l.l_vertex == 0.0);
        CHECK(l.l_exp == 0.0);
    }
    SECTION("constant offset has the closed-form expression loss") {
        int T = 9;
        ExpressionSeq gt = random_expressions(T, 43);
        ExpressionSeq pred = gt;
        for (std::int64_t i = 0; i < pred.numel(); ++i) pred[i] += 0.1;
        Audio2ExpLosses l = audio2exp_losses(core, w_id, pred, gt);
        CHECK(std::fabs(l.l_exp - 0.1 * T) < 1e-12);
    }
    SECTION("vertex term matches the per-frame bilinear oracle") {
        int T = 5;
        ExpressionSeq gt = random_expressions(T, 44);
        ExpressionSeq pred = random_expressions(T, 45);
        Audio2ExpLosses l = audio2exp_losses(core, w_id, pred, gt);
        double want = 0.0;
        for (int t = 0; t < T; ++t) {
            std::vector<double> ep(52), eg(52);
            for (int c = 0; c < 52; ++c) {
                ep[static_cast<std::size_t>(c)] = pred[static_cast<std::int64_t>(t) * 52 + c];
                eg[static_cast<std::size_t>(c)] = gt[static_cast<std::int64_t>(t) * 52 + c];
            }
            std::vector<Vec3> vp = bilinear_vertices(core, w_id, ep);
            std::vector<Vec3> vg = bilinear_vertices(core, w_id, eg);
            double acc = 0.0;
            for (int v = 0; v < 4; ++v)
                for (int c = 0; c < 3; ++c)
                    acc += std::fabs(vp[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)] -
                                     vg[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)]);
            want += acc / 12.0;
        }
        CHECK(std::fabs(l.l_vertex - want) < 1e-9);
    }
}

TEST_CASE("audio2exp gradient check") {
    Audio2ExpConfig cfg = toy_cfg();
    Rng rng(51);
    ParamStore params = init_audio2exp_params(cfg, rng);
    AudioFeatureSeq audio = toy_audio(6, 60.0, 52);
    ExpressionSeq gt = random_expressions(3, 53);
    CoreTensor core(Tensor::randn({2, kNumArkitChannels, 12}, rng, 0.1));
    Tensor basis = expression_vertex_basis(core, {0.8, -0.3});
    const int T = gt.dim(0);
    Tensor prev({T - 1, kNumArkitChannels},
                std::vector<double>(gt.vec().begin(),
                                    gt.vec().begin() + static_cast<std::int64_t>(T - 1) * 52));

    auto loss_value = [&](const ParamStore& p) {
        ad::Tape t;
        auto vars = make_constants(t, p);
        ad::Var pred = a2e::decoder_graph(t, cfg, vars, prev, audio);
        ad::Var l_exp = t.scale(ad::l1_mean(t, pred, t.constant(gt)), static_cast<double>(T));
        ad::Var l_vertex =
            t.scale(ad::l1_mean(t, t.matmul(pred, t.constant(basis)),
                                t.matmul(t.constant(gt), t.constant(basis))),
                    static_cast<double>(T));
        return t.val(t.add(l_vertex, t.scale(l_exp, 10.0)))[0];
    };

    for (const std::string& name :
         {std::string("a2e.start"), std::string("a2e.embed.w"), std::string("a2e.l0.self.wq"),
          std::string("a2e.l0.cross.wk"), std::string("a2e.l0.ffn.1.w"),
          std::string("a2e.ln_out.g"), std::string("a2e.head.b")}) {
        ad::Tape t;
        auto vars = make_leaves(t, params);
        ad::Var pred = a2e::decoder_graph(t, cfg, vars, prev, audio);
        ad::Var l_exp = t.scale(ad::l1_mean(t, pred, t.constant(gt)), static_cast<double>(T));
        ad::Var l_vertex =
            t.scale(ad::l1_mean(t, t.matmul(pred, t.constant(basis)),
                                t.matmul(t.constant(gt), t.constant(basis))),
                    static_cast<double>(T));
        ad::Var loss = t.add(l_vertex, t.scale(l_exp, 10.0));
        Tensor analytic = t.val(t.gradient(loss, vars.at(name)));

        Tensor numeric = test::numeric_gradient(
            [&](const Tensor& x) {
                ParamStore shifted = params;
                shifted.at(name) = x;
                return loss_value(shifted);
            },
            params.at(name), 1e-5);
        INFO("param " << name);
        CHECK(test::max_rel_error(analytic, numeric, 1e-4) < 1e-4);
    }
}

TEST_CASE("train_audio2exp") {
    Audio2ExpConfig cfg = toy_cfg();
    Rng rng(61);
    CoreTensor core(Tensor::randn({2, kNumArkitChannels, 12}, rng, 0.1));
    std::vector<std::vector<double>> w_ids = {{0.8, -0.3}};
    std::vector<AudioExpClip> clips;
    for (int i = 0; i < 3; ++i) {
        AudioExpClip clip;
        clip.audio = toy_audio(8, 60.0, 62 + static_cast<std::uint64_t>(i));
        clip.gt = random_expressions(4, 65 + static_cast<std::uint64_t>(i));
        clips.push_back(std::move(clip));
    }

    SECTION("zero steps leave the seeded initialization untouched") {
        Audio2ExpHyper hyper;
        hyper.steps = 0;
        hyper.seed = 66;
        fs::path dir = fs::temp_directory_path() / "dnpm_a2e_zero";
        fs::remove_all(dir);
        TrainAudio2ExpResult r = train_audio2exp(clips, core, w_ids, cfg, hyper, dir);
        Rng r2(66);
        ParamStore expect = init_audio2exp_params(cfg, r2);
        for (const auto& n : expect.names()) REQUIRE(r.params.at(n).vec() == expect.at(n).vec());
        CHECK(read_text_file(dir / "metrics.csv") == "step,l_vertex,l_exp,lr\n");
        CHECK(fs::exists(dir / "a2e.ckpt"));
    }
    SECTION("input validation") {
        Audio2ExpHyper hyper;
        hyper.steps = 1;
        fs::path dir = fs::temp_directory_path() / "dnpm_a2e_bad";
        CHECK_THROWS_AS(train_audio2exp({}, core, w_ids, cfg, hyper, dir), Error);
        CHECK_THROWS_AS(train_audio2exp(clips, core, {{0.8, -0.3}, {0.1, 0.2}}, cfg, hyper, dir),
                        Error);
        CoreTensor small(Tensor::randn({2, 10, 12}, rng, 0.1));
        CHECK_THROWS_AS(train_audio2exp(clips, small, w_ids, cfg, hyper, dir), Error);
        auto bad = clips;
        bad[0].audio.features = Tensor::randn({8, 4}, rng);
        CHECK_THROWS_AS(train_audio2exp(bad, core, w_ids, cfg, hyper, dir), Error);
    }
    SECTION("loss decreases and the run is deterministic") {
        Audio2ExpHyper hyper;
        hyper.steps = 40;
        hyper.batch_size = 1;
        hyper.lr = 2e-3;
        hyper.log_interval = 5;
        hyper.checkpoint_interval = 40;
        hyper.seed = 67;
        fs::path dir1 = fs::temp_directory_path() / "dnpm_a2e_run1";
        fs::path dir2 = fs::temp_directory_path() / "dnpm_a2e_run2";
        fs::remove_all(dir1);
        fs::remove_all(dir2);
        TrainAudio2ExpResult r1 = train_audio2exp(clips, core, w_ids, cfg, hyper, dir1);
        CHECK(r1.steps_run == 40);
        CHECK(r1.params.all_finite());

        std::string csv = read_text_file(dir1 / "metrics.csv");
        std::istringstream in(csv);
        std::string line;
        std::getline(in, line);
        REQUIRE(line == "step,l_vertex,l_exp,lr");
        double first = -1.0, last = -1.0;
        while (std::getline(in, line)) {
            std::size_t c1 = line.find(',');
            std::size_t c2 = line.find(',', c1 + 1);
            double v = std::stod(line.substr(c2 + 1));
            if (first < 0) first = v;
            last = v;
        }
        CHECK(first > 0.0);
        CHECK(last < first);

        auto [loaded, meta] = load_checkpoint(dir1 / "a2e.ckpt");
        CHECK(meta.step == 40);
        Audio2ExpConfig round = meta.config.at("audio2exp").get<Audio2ExpConfig>();
        CHECK(round.width == cfg.width);
        for (const auto& n : r1.params.names()) REQUIRE(loaded.at(n).vec() == r1.params.at(n).vec());

        TrainAudio2ExpResult r2 = train_audio2exp(clips, core, w_ids, cfg, hyper, dir2);
        CHECK(hash_file(dir1 / "a2e.ckpt") == hash_file(dir2 / "a2e.ckpt"));
        CHECK(read_text_file(dir2 / "metrics.csv") == csv);
    }
    SECTION("non-finite ground truth aborts with a diagnostic checkpoint") {
        auto bad = clips;
        bad[0].gt[7] = std::nan("");
        bad[1].gt[7] = std::nan("");
        bad[2].gt[7] = std::nan("");
        Audio2ExpHyper hyper;
        hyper.steps = 2;
        fs::path dir = fs::temp_directory_path() / "dnpm_a2e_nan";
        fs::remove_all(dir);
        CHECK_THROWS_AS(train_audio2exp(bad, core, w_ids, cfg, hyper, dir), NumericError);
        CHECK(fs::exists(dir / "diagnostic" / "a2e.ckpt"));
    }
}

TEST_CASE("animate") {
    // Two-triangle quad template with full-square UVs.
    Mesh tmpl;
    tmpl.vertices = {{-0.5, -0.5, 0.0}, {0.5, -0.5, 0.1}, {0.5, 0.5, 0.0}, {-0.5, 0.5, 0.1}};
    tmpl.uvs = {{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}};
    tmpl.faces = {{0, 1, 2}, {0, 2, 3}};
    Rng rng(71);
    Detailed3dmmBundle bundle;
    bundle.model = BilinearModel{CoreTensor(Tensor::randn({3, kNumArkitChannels, 12}, rng, 0.05)),
                                 tmpl};
    bundle.ecfg.id_dim = 3;
    bundle.ecfg.exp_dim = kNumArkitChannels;
    bundle.ecfg.latent_dim = 8;
    bundle.ecfg.num_style_layers = 4;
    bundle.ecfg.widths = {8, 8, 8, 8, 8};
    bundle.enc_params = init_encoder_params(bundle.ecfg, rng);
    for (const auto& n : bundle.enc_params.names())
        if (n.find("head") != std::string::npos)
            bundle.enc_params.at(n) = Tensor::randn(bundle.enc_params.at(n).shape(), rng, 0.1);
    bundle.gcfg.out_resolution = 8;
    bundle.gcfg.latent_dim = 8;
    bundle.gcfg.mapping_layers = 2;
    bundle.gcfg.channels = {6, 4};
    bundle.gen_params = init_generator_params(bundle.gcfg, rng);
    bundle.wbar = average_latent(bundle.gcfg, bundle.gen_params, 16, 72);
    bundle.s = 1.0;
    bundle.subdiv_levels = 1;

    Audio2ExpConfig cfg = toy_cfg();
    ParamStore params = init_audio2exp_params(cfg, rng);
    AudioFeatureSeq audio = toy_audio(12, 100.0, 73);
    std::vector<double> w_id = {0.9, 0.2, -0.1};

    SECTION("one mesh per rolled-out frame, matching the direct pipeline") {
        AnimationResult result = animate(cfg, params, audio, w_id, bundle);
        ExpressionSeq seq = rollout(cfg, params, audio);
        REQUIRE(result.expressions.vec() == seq.vec());
        REQUIRE(static_cast<int>(result.frames.size()) == seq.dim(0));
        for (int t = 0; t < seq.dim(0); ++t) {
            std::vector<double> w_exp(52);
            for (int c = 0; c < 52; ++c)
                w_exp[static_cast<std::size_t>(c)] = seq[static_cast<std::int64_t>(t) * 52 + c];
            Mesh want = detailed3dmm_generate(bundle.model, w_id, w_exp, bundle.ecfg,
                                              bundle.enc_params, bundle.gcfg, bundle.gen_params,
                                              bundle.wbar, bundle.s, bundle.subdiv_levels,
                                              bundle.d_max);
            REQUIRE(result.frames[static_cast<std::size_t>(t)].n_vertices() == want.n_vertices());
            for (int v = 0; v < want.n_vertices(); ++v)
                for (int c = 0; c < 3; ++c)
                    REQUIRE(result.frames[static_cast<std::size_t>(t)]
                                .vertices[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)] ==
                            want.vertices[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)]);
        }
    }
    SECTION("constant expressions give identical meshes") {
        ParamStore flat = params;
        flat.at("a2e.head.w") = Tensor::zeros({cfg.width, 52});
        flat.at("a2e.head.b") = Tensor::zeros({1, 52});
        AnimationResult result = animate(cfg, flat, audio, w_id, bundle);
        REQUIRE(result.frames.size() >= 2);
        for (std::int64_t i = 0; i < result.expressions.numel(); ++i)
            REQUIRE(result.expressions[i] == 0.5);
        const Mesh& first = result.frames[0];
        for (const Mesh& m : result.frames)
            for (int v = 0; v < first.n_vertices(); ++v)
                for (int c = 0; c < 3; ++c)
                    REQUIRE(m.vertices[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)] ==
                            first.vertices[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)]);
    }
    SECTION("written animation has numbered frames and a manifest") {
        AnimationResult result = animate(cfg, params, audio, w_id, bundle);
        fs::path dir = fs::temp_directory_path() / "dnpm_anim";
        fs::remove_all(dir);
        write_animation(dir, result, cfg.fps_out, w_id);
        for (std::size_t t = 0; t < result.frames.size(); ++t) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%06zu.obj", t);
            REQUIRE(fs::exists(dir / name));
        }
        Mesh back = read_obj(dir / "frame_000000.obj");
        CHECK(back.n_vertices() == result.frames[0].n_vertices());
        nlohmann::json manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
        CHECK(manifest.at("fps").get<double>() == cfg.fps_out);
        CHECK(manifest.at("frame_count").get<int>() == static_cast<int>(result.frames.size()));
        CHECK(manifest.at("w_id").get<std::vector<double>>() == w_id);
    }
    SECTION("encoder dimension mismatch is rejected") {
        Detailed3dmmBundle wrong = bundle;
        wrong.ecfg.exp_dim = 10;
        CHECK_THROWS_AS(animate(cfg, params, audio, w_id, wrong), Error);
    }
}

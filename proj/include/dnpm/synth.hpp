#pragma once

// Procedural synthetic dataset: a UV-sphere bilinear shape model plus
// deterministic wrinkle-style displacement maps driven by (w_id, w_exp).
// Everything here is a pure function of SynthConfig, so a fixed seed yields
// byte-identical artifacts.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dnpm/audio.hpp"
#include "dnpm/audio2exp.hpp"
#include "dnpm/common.hpp"
#include "dnpm/geometry.hpp"
#include "dnpm/image.hpp"
#include "dnpm/mesh.hpp"
#include "dnpm/nn.hpp"

namespace dnpm {

struct SynthConfig {
    int n_id = 8;              // identity basis size (sampled w_id[0] is pinned to 1)
    int n_exp = 8;             // expression basis size (sampled w_exp[0] is pinned to 1)
    int resolution = 32;       // displacement-map side in texels
    int sphere_rings = 12;     // latitude bands of the template sphere
    int sphere_segments = 16;  // longitude slices (the seam column is duplicated)
    int n_train = 200;
    int n_test = 20;
    int ridges_min = 3;        // wrinkle ridges per map
    int ridges_max = 6;
    double freq_min = 2.0;     // ridge frequency, cycles per UV unit
    double freq_max = 6.0;
    double amp_min = 0.08;     // total wrinkle amplitude bounds, decoded units
    double amp_max = 0.35;
    int n_clips = 8;           // audio clips
    double clip_seconds = 2.0;
    int sample_rate = 16000;
    double fps_out = 30.0;     // expression frame rate of the clip ground truth
    std::uint64_t seed = 1;

    void check() const {
        require(n_id >= 2 && n_exp >= 2, "synth: basis sizes must be >= 2");
        require(resolution >= 4, "synth: resolution must be >= 4");
        require(sphere_rings >= 2 && sphere_segments >= 3, "synth: sphere too coarse");
        require(n_train >= 1 && n_test >= 0, "synth: split sizes invalid");
        require(ridges_min >= 1 && ridges_max >= ridges_min, "synth: ridge count range invalid");
        require(freq_min > 0.0 && freq_max >= freq_min, "synth: frequency range invalid");
        require(amp_min > 0.0 && amp_max >= amp_min && amp_max <= 0.45,
                "synth: amplitude range must satisfy 0 < min <= max <= 0.45");
        require(n_clips >= 0 && clip_seconds > 0.0 && sample_rate > 0 && fps_out > 0.0,
                "synth: clip parameters invalid");
    }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"n_id", c.n_id},
         {"n_exp", c.n_exp},
         {"resolution", c.resolution},
         {"sphere_rings", c.sphere_rings},
         {"sphere_segments", c.sphere_segments},
         {"n_train", c.n_train},
         {"n_test", c.n_test},
         {"ridges_min", c.ridges_min},
         {"ridges_max", c.ridges_max},
         {"freq_min", c.freq_min},
         {"freq_max", c.freq_max},
         {"amp_min", c.amp_min},
         {"amp_max", c.amp_max},
         {"n_clips", c.n_clips},
         {"clip_seconds", c.clip_seconds},
         {"sample_rate", c.sample_rate},
         {"fps_out", c.fps_out},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
    c.n_id = j.value("n_id", c.n_id);
    c.n_exp = j.value("n_exp", c.n_exp);
    c.resolution = j.value("resolution", c.resolution);
    c.sphere_rings = j.value("sphere_rings", c.sphere_rings);
    c.sphere_segments = j.value("sphere_segments", c.sphere_segments);
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.ridges_min = j.value("ridges_min", c.ridges_min);
    c.ridges_max = j.value("ridges_max", c.ridges_max);
    c.freq_min = j.value("freq_min", c.freq_min);
    c.freq_max = j.value("freq_max", c.freq_max);
    c.amp_min = j.value("amp_min", c.amp_min);
    c.amp_max = j.value("amp_max", c.amp_max);
    c.n_clips = j.value("n_clips", c.n_clips);
    c.clip_seconds = j.value("clip_seconds", c.clip_seconds);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.fps_out = j.value("fps_out", c.fps_out);
    c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Template geometry
// ---------------------------------------------------------------------------

// Open UV-sphere zone: (rings + 1) latitude rows by (segments + 1) longitude
// columns on the unit sphere. The seam column is duplicated (u = 0 and u = 1
// share positions) so the chart covers [0,1]^2 without wraparound, and the
// polar caps are left open so every vertex has a well-defined chart
// coordinate. v runs from the north band (v = 0) to the south band (v = 1).
inline Mesh make_uv_sphere(int rings, int segments) {
    require(rings >= 2 && segments >= 3, "make_uv_sphere: need rings >= 2, segments >= 3");
    Mesh m;
    const double pi = 3.14159265358979323846;
    for (int i = 0; i <= rings; ++i) {
        // Latitude stays clear of the exact poles so radial normals are unique.
        double theta = pi * (i + 0.5) / (rings + 1);
        for (int j = 0; j <= segments; ++j) {
            double phi = 2.0 * pi * j / segments;
            m.vertices.push_back({std::sin(theta) * std::cos(phi),
                                  std::sin(theta) * std::sin(phi), std::cos(theta)});
            m.uvs.push_back({static_cast<double>(j) / segments, static_cast<double>(i) / rings});
        }
    }
    const int cols = segments + 1;
    for (int i = 0; i < rings; ++i)
        for (int j = 0; j < segments; ++j) {
            int a = i * cols + j;
            int b = a + 1;
            int c = a + cols;
            int d = c + 1;
            m.faces.push_back({a, c, b});
            m.faces.push_back({b, c, d});
        }
    return compute_vertex_normals(m);
}

// ---------------------------------------------------------------------------
// Random smooth core tensor
// ---------------------------------------------------------------------------

namespace synth_detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "synth: projection length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline std::vector<double> random_vector(Rng& rng, int n, double stddev) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = stddev * rng.gaussian();
    return v;
}

// Unit direction drawn uniformly on the sphere.
inline Vec3 random_unit(Rng& rng) {
    while (true) {
        Vec3 v = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        double n = norm3(v);
        if (n > 1e-3 && n <= 1.0) return scale3(v, 1.0 / n);
    }
}

}  // namespace synth_detail

// Core tensor over the template: slice (0,0) is the template itself,
// slices (a,0) carry low-frequency per-identity radial fields, slices (0,b)
// carry localized per-expression radial bumps, and the remaining slices hold
// small smooth cross terms so the form is genuinely bilinear. All offsets act
// along the sphere's radial direction (the unit vertex position).
inline CoreTensor synth_core(const SynthConfig& cfg, Rng& rng) {
    Mesh sphere = make_uv_sphere(cfg.sphere_rings, cfg.sphere_segments);
    const int nv = sphere.n_vertices();
    Tensor data = Tensor::zeros({cfg.n_id, cfg.n_exp, 3 * nv});
    auto slice = [&](int a, int b) {
        return data.data() + (static_cast<std::int64_t>(a) * cfg.n_exp + b) * 3 * nv;
    };

    double* base = slice(0, 0);
    for (int v = 0; v < nv; ++v)
        for (int c = 0; c < 3; ++c)
            base[3 * v + c] = sphere.vertices[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)];

    // Chart angles for the low-frequency identity fields.
    std::vector<double> theta(static_cast<std::size_t>(nv)), phi(static_cast<std::size_t>(nv));
    const double pi = 3.14159265358979323846;
    for (int v = 0; v < nv; ++v) {
        const Vec3& x = sphere.vertices[static_cast<std::size_t>(v)];
        theta[static_cast<std::size_t>(v)] = std::acos(std::clamp(x[2], -1.0, 1.0));
        phi[static_cast<std::size_t>(v)] = std::atan2(x[1], x[0]);
    }
    auto radial_field = [&](double* out, auto&& amplitude_at) {
        for (int v = 0; v < nv; ++v) {
            double amp = amplitude_at(v);
            const Vec3& x = sphere.vertices[static_cast<std::size_t>(v)];
            for (int c = 0; c < 3; ++c) out[3 * v + c] = amp * x[static_cast<std::size_t>(c)];
        }
    };

    const int harmonics = 3;
    const double id_amp = 0.3 / cfg.n_id;
    for (int a = 1; a < cfg.n_id; ++a) {
        std::vector<double> coef(harmonics), m(harmonics), s(harmonics), rho(harmonics);
        for (int k = 0; k < harmonics; ++k) {
            coef[static_cast<std::size_t>(k)] = id_amp * rng.gaussian();
            m[static_cast<std::size_t>(k)] = static_cast<double>(rng.below(3));
            s[static_cast<std::size_t>(k)] = static_cast<double>(rng.below(3));
            rho[static_cast<std::size_t>(k)] = rng.uniform(0.0, 2.0 * pi);
        }
        radial_field(slice(a, 0), [&](int v) {
            double amp = 0.0;
            for (int k = 0; k < harmonics; ++k)
                amp += coef[static_cast<std::size_t>(k)] *
                       std::cos(m[static_cast<std::size_t>(k)] * phi[static_cast<std::size_t>(v)] +
                                s[static_cast<std::size_t>(k)] * theta[static_cast<std::size_t>(v)] +
                                rho[static_cast<std::size_t>(k)]);
            return amp;
        });
    }

    const double exp_amp = 0.4 / cfg.n_exp;
    auto bump_field = [&](double* out, double strength) {
        Vec3 center = synth_detail::random_unit(rng);
        double sigma = rng.uniform(0.25, 0.6);
        radial_field(out, [&](int v) {
            Vec3 d = sub3(sphere.vertices[static_cast<std::size_t>(v)], center);
            return strength * std::exp(-dot3(d, d) / (2.0 * sigma * sigma));
        });
    };
    for (int b = 1; b < cfg.n_exp; ++b)
        bump_field(slice(0, b), exp_amp * (rng.uniform() < 0.5 ? -1.0 : 1.0) *
                                    rng.uniform(0.5, 1.0));
    for (int a = 1; a < cfg.n_id; ++a)
        for (int b = 1; b < cfg.n_exp; ++b) bump_field(slice(a, b), 0.02 * rng.gaussian());

    return CoreTensor(std::move(data));
}

// ---------------------------------------------------------------------------
// Wrinkle fields
// ---------------------------------------------------------------------------

// Fixed random projections drawn once per dataset. They turn (w_id, w_exp)
// into ridge orientation, frequency, center, and amplitude smoothly:
//
//   theta_r  = pi * sigmoid(orient_proj . w_id)
//   f_r      = freq_min + (freq_max - freq_min) * sigmoid(freq_proj . w_id)
//   c_r      = (sigmoid(center_u_proj . w_id), sigmoid(center_v_proj . w_id))
//   A_r      = base_amp * tanh(sum_b amp_gates[b] * w_exp[b]^2)
//
// and the map value at texel center (u, v) is
//
//   I(u, v) = clamp(0.5 + sum_r A_r * exp(-d_r^2 / (2 sigma_r^2))
//                             * cos(2 pi f_r t_r + phase_r), 0, 1)
//
// where (t_r, d_r) are the coordinates of (u, v) - c_r rotated by theta_r.
// The gates are nonnegative, so w_exp = 0 zeroes every amplitude exactly:
// expressions drive the wrinkles. base_amp sums to at most amp_max across
// ridges, keeping the map inside [0.05, 0.95] before the clamp.
struct Ridge {
    std::vector<double> orient_proj;    // length n_id
    std::vector<double> freq_proj;      // length n_id
    std::vector<double> center_u_proj;  // length n_id
    std::vector<double> center_v_proj;  // length n_id
    std::vector<double> amp_gates;      // length n_exp, nonnegative
    double base_amp = 0.0;
    double sigma = 0.2;  // Gaussian envelope width in UV units
    double phase = 0.0;
};

struct RidgeBank {
    std::vector<Ridge> ridges;
};

inline void to_json(nlohmann::json& j, const Ridge& r) {
    j = {{"orient_proj", r.orient_proj}, {"freq_proj", r.freq_proj},
         {"center_u_proj", r.center_u_proj}, {"center_v_proj", r.center_v_proj},
         {"amp_gates", r.amp_gates},         {"base_amp", r.base_amp},
         {"sigma", r.sigma},                 {"phase", r.phase}};
}

inline void from_json(const nlohmann::json& j, Ridge& r) {
    j.at("orient_proj").get_to(r.orient_proj);
    j.at("freq_proj").get_to(r.freq_proj);
    j.at("center_u_proj").get_to(r.center_u_proj);
    j.at("center_v_proj").get_to(r.center_v_proj);
    j.at("amp_gates").get_to(r.amp_gates);
    j.at("base_amp").get_to(r.base_amp);
    j.at("sigma").get_to(r.sigma);
    j.at("phase").get_to(r.phase);
}

inline void to_json(nlohmann::json& j, const RidgeBank& b) { j = {{"ridges", b.ridges}}; }
inline void from_json(const nlohmann::json& j, RidgeBank& b) { j.at("ridges").get_to(b.ridges); }

inline RidgeBank make_ridge_bank(const SynthConfig& cfg, Rng& rng) {
    const double pi = 3.14159265358979323846;
    int count = cfg.ridges_min +
                static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.ridges_max -
                                                                      cfg.ridges_min + 1)));
    RidgeBank bank;
    for (int r = 0; r < count; ++r) {
        Ridge ridge;
        ridge.orient_proj = synth_detail::random_vector(rng, cfg.n_id, 1.0);
        ridge.freq_proj = synth_detail::random_vector(rng, cfg.n_id, 1.0);
        ridge.center_u_proj = synth_detail::random_vector(rng, cfg.n_id, 1.0);
        ridge.center_v_proj = synth_detail::random_vector(rng, cfg.n_id, 1.0);
        ridge.amp_gates.resize(static_cast<std::size_t>(cfg.n_exp));
        for (double& g : ridge.amp_gates) g = rng.uniform(0.2, 1.0);
        ridge.base_amp = rng.uniform(cfg.amp_min, cfg.amp_max) / count;
        ridge.sigma = rng.uniform(0.12, 0.3);
        ridge.phase = rng.uniform(0.0, 2.0 * pi);
        bank.ridges.push_back(std::move(ridge));
    }
    return bank;
}

// Evaluates the closed-form field documented above at every texel center.
inline DisplacementMap render_wrinkle_map(const SynthConfig& cfg, const RidgeBank& bank,
                                          const std::vector<double>& w_id,
                                          const std::vector<double>& w_exp) {
    require(static_cast<int>(w_id.size()) == cfg.n_id &&
                static_cast<int>(w_exp.size()) == cfg.n_exp,
            "render_wrinkle_map: coefficient sizes do not match config");
    const double pi = 3.14159265358979323846;
    struct Active {
        double theta, freq, cu, cv, amp, sigma, phase;
    };
    std::vector<Active> active;
    for (const Ridge& r : bank.ridges) {
        Active a;
        a.theta = pi * synth_detail::sigmoid(synth_detail::dot(r.orient_proj, w_id));
        a.freq = cfg.freq_min +
                 (cfg.freq_max - cfg.freq_min) *
                     synth_detail::sigmoid(synth_detail::dot(r.freq_proj, w_id));
        a.cu = synth_detail::sigmoid(synth_detail::dot(r.center_u_proj, w_id));
        a.cv = synth_detail::sigmoid(synth_detail::dot(r.center_v_proj, w_id));
        double gate = 0.0;
        for (std::size_t b = 0; b < r.amp_gates.size(); ++b)
            gate += r.amp_gates[b] * w_exp[b] * w_exp[b];
        a.amp = r.base_amp * std::tanh(gate);
        a.sigma = r.sigma;
        a.phase = r.phase;
        active.push_back(a);
    }
    DisplacementMap map(cfg.resolution, cfg.resolution, 0.5);
    for (int y = 0; y < cfg.resolution; ++y)
        for (int x = 0; x < cfg.resolution; ++x) {
            double u = (x + 0.5) / cfg.resolution;
            double v = (y + 0.5) / cfg.resolution;
            double value = 0.5;
            for (const Active& a : active) {
                double du = u - a.cu;
                double dv = v - a.cv;
                double t = std::cos(a.theta) * du + std::sin(a.theta) * dv;
                double d = -std::sin(a.theta) * du + std::cos(a.theta) * dv;
                value += a.amp * std::exp(-d * d / (2.0 * a.sigma * a.sigma)) *
                         std::cos(2.0 * pi * a.freq * t + a.phase);
            }
            map.at(x, y) = std::clamp(value, 0.0, 1.0);
        }
    return map;
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

struct SynthSample {
    std::vector<double> w_id;
    std::vector<double> w_exp;
    DisplacementMap map;
};

struct SynthDataset {
    SynthConfig config;
    BilinearModel model;
    RidgeBank bank;
    std::vector<SynthSample> train;
    std::vector<SynthSample> test;
};

// Snaps every texel onto the 16-bit grid so the in-memory map equals its PNG
// round trip bit for bit.
inline DisplacementMap quantize_map(DisplacementMap m) {
    for (double& v : m.values) v = dequantize_unit16(quantize_unit16(v));
    return m;
}

inline SynthDataset synth_dataset(const SynthConfig& cfg) {
    cfg.check();
    Rng rng(cfg.seed);
    SynthDataset ds;
    ds.config = cfg;
    ds.model.template_mesh = make_uv_sphere(cfg.sphere_rings, cfg.sphere_segments);
    ds.model.core = synth_core(cfg, rng);
    ds.model.check();
    ds.bank = make_ridge_bank(cfg, rng);

    auto draw_sample = [&]() {
        SynthSample s;
        s.w_id.assign(static_cast<std::size_t>(cfg.n_id), 0.0);
        s.w_id[0] = 1.0;
        for (int a = 1; a < cfg.n_id; ++a)
            s.w_id[static_cast<std::size_t>(a)] = rng.uniform(-1.0, 1.0);
        s.w_exp.assign(static_cast<std::size_t>(cfg.n_exp), 0.0);
        s.w_exp[0] = 1.0;
        for (int b = 1; b < cfg.n_exp; ++b)
            s.w_exp[static_cast<std::size_t>(b)] = rng.uniform(0.0, 1.0);
        s.map = quantize_map(render_wrinkle_map(cfg, ds.bank, s.w_id, s.w_exp));
        return s;
    };
    for (int i = 0; i < cfg.n_train; ++i) ds.train.push_back(draw_sample());
    for (int i = 0; i < cfg.n_test; ++i) ds.test.push_back(draw_sample());
    return ds;
}

// Bilinear model whose expression axis matches the 52 animation channels.
// When the dataset was synthesized with n_exp == 52 its own core is reused;
// otherwise a 52-expression core is derived deterministically from the same
// config and seed, over the same template.
inline BilinearModel animation_model(const SynthDataset& ds) {
    if (ds.config.n_exp == kNumArkitChannels) return ds.model;
    SynthConfig acfg = ds.config;
    acfg.n_exp = kNumArkitChannels;
    Rng rng(acfg.seed);
    BilinearModel model;
    model.template_mesh = ds.model.template_mesh;
    model.core = synth_core(acfg, rng);
    model.check();
    return model;
}

// ---------------------------------------------------------------------------
// Audio-expression clips
// ---------------------------------------------------------------------------

struct SynthAudioClip {
    AudioClip audio;
    ExpressionSeq gt{std::vector<int>{1, kNumArkitChannels}};
};

// Sinusoid-driven clips: each is a two-tone carrier under a slow raised-cosine
// energy envelope, and the ground-truth channels oscillate with that same
// envelope, so the expressions are a deterministic function of audio energy.
// Samples are snapped onto the PCM16 grid so the in-memory clip equals its
// WAV round trip exactly.
inline std::vector<SynthAudioClip> synth_audio_clips(const SynthConfig& cfg) {
    cfg.check();
    const double pi = 3.14159265358979323846;
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<SynthAudioClip> clips;
    for (int i = 0; i < cfg.n_clips; ++i) {
        double f1 = rng.uniform(220.0, 1200.0);
        double f2 = rng.uniform(220.0, 1200.0);
        double f_env = rng.uniform(0.5, 2.0);
        double env_phase = rng.uniform(0.0, 2.0 * pi);
        auto envelope = [&](double t) {
            return 0.5 * (1.0 - std::cos(2.0 * pi * f_env * t + env_phase));
        };

        SynthAudioClip clip;
        clip.audio.sample_rate = cfg.sample_rate;
        int n = static_cast<int>(std::llround(cfg.clip_seconds * cfg.sample_rate));
        clip.audio.samples.resize(static_cast<std::size_t>(n));
        for (int k = 0; k < n; ++k) {
            double t = static_cast<double>(k) / cfg.sample_rate;
            double s = 0.45 * envelope(t) *
                       (0.6 * std::sin(2.0 * pi * f1 * t) + 0.4 * std::sin(2.0 * pi * f2 * t));
            clip.audio.samples[static_cast<std::size_t>(k)] =
                std::clamp(std::llround(s * 32768.0), -32768ll, 32767ll) / 32768.0;
        }

        int T = std::max(1, static_cast<int>(std::llround(cfg.clip_seconds * cfg.fps_out)));
        clip.gt = ExpressionSeq({T, kNumArkitChannels});
        std::vector<double> omega(static_cast<std::size_t>(kNumArkitChannels));
        std::vector<double> chi(static_cast<std::size_t>(kNumArkitChannels));
        for (int c = 0; c < kNumArkitChannels; ++c) {
            omega[static_cast<std::size_t>(c)] = rng.uniform(0.5, 3.0);
            chi[static_cast<std::size_t>(c)] = rng.uniform(0.0, 2.0 * pi);
        }
        for (int t = 0; t < T; ++t) {
            double sec = static_cast<double>(t) / cfg.fps_out;
            for (int c = 0; c < kNumArkitChannels; ++c)
                clip.gt[static_cast<std::int64_t>(t) * kNumArkitChannels + c] =
                    0.5 + 0.4 * envelope(sec) *
                              std::sin(2.0 * pi * omega[static_cast<std::size_t>(c)] * sec +
                                       chi[static_cast<std::size_t>(c)]);
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

// ---------------------------------------------------------------------------
// Directory layout
// ---------------------------------------------------------------------------
//
//   <dir>/manifest.json            config echo, split sizes, clip count
//   <dir>/template.obj             UV-sphere template
//   <dir>/core.ckpt (+.json)       core tensor as a one-entry parameter blob
//   <dir>/ridges.json              wrinkle-field projections
//   <dir>/{train,test}/coeffs.json per-sample (w_id, w_exp)
//   <dir>/{train,test}/map_%06d.png
//   <dir>/audio/clip_%03d/{audio.wav, arkit.csv}

namespace synth_detail {

inline std::string map_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "map_%06d.png", index);
    return buf;
}

inline std::string clip_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%03d", index);
    return buf;
}

inline void write_split(const std::filesystem::path& dir, const std::vector<SynthSample>& split) {
    std::filesystem::create_directories(dir);
    nlohmann::json coeffs = nlohmann::json::array();
    for (std::size_t i = 0; i < split.size(); ++i) {
        coeffs.push_back({{"w_id", split[i].w_id}, {"w_exp", split[i].w_exp}});
        save_png16(split[i].map, dir / map_name(static_cast<int>(i)));
    }
    write_text_file(dir / "coeffs.json", coeffs.dump(2) + "\n");
}

inline std::vector<SynthSample> load_split(const std::filesystem::path& dir) {
    nlohmann::json coeffs;
    try {
        coeffs = nlohmann::json::parse(read_text_file(dir / "coeffs.json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad coefficient file in " + dir.string() + ": " + e.what());
    }
    std::vector<SynthSample> split;
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
        SynthSample s;
        coeffs[i].at("w_id").get_to(s.w_id);
        coeffs[i].at("w_exp").get_to(s.w_exp);
        s.map = load_png16(dir / map_name(static_cast<int>(i)));
        split.push_back(std::move(s));
    }
    return split;
}

}  // namespace synth_detail

inline void write_synth_dataset(const SynthDataset& ds, const std::filesystem::path& dir,
                                const std::vector<SynthAudioClip>& clips = {}) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {{"format", "dnpm-synth-dataset"},
                               {"config", ds.config},
                               {"n_train", ds.train.size()},
                               {"n_test", ds.test.size()},
                               {"n_clips", clips.size()}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    write_obj(ds.model.template_mesh, dir / "template.obj");
    ParamStore core_store;
    core_store.create("core", ds.model.core.data);
    CheckpointMeta meta;
    meta.config = {{"synth", nlohmann::json(ds.config)}};
    meta.seed = ds.config.seed;
    save_checkpoint(dir / "core.ckpt", core_store, meta);
    write_text_file(dir / "ridges.json", nlohmann::json(ds.bank).dump(2) + "\n");
    synth_detail::write_split(dir / "train", ds.train);
    synth_detail::write_split(dir / "test", ds.test);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        std::filesystem::path cdir = dir / "audio" / synth_detail::clip_name(static_cast<int>(i));
        std::filesystem::create_directories(cdir);
        save_wav(clips[i].audio, cdir / "audio.wav");
        save_arkit_csv(cdir / "arkit.csv", clips[i].gt);
    }
}

inline SynthDataset load_synth_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad dataset manifest in " + dir.string() + ": " + e.what());
    }
    require(manifest.value("format", std::string()) == "dnpm-synth-dataset",
            "not a synthetic dataset directory: " + dir.string());
    SynthDataset ds;
    ds.config = manifest.at("config").get<SynthConfig>();
    ds.model.template_mesh = read_obj(dir / "template.obj");
    auto [core_store, meta] = load_checkpoint(dir / "core.ckpt");
    ds.model.core = CoreTensor(core_store.at("core"));
    ds.model.check();
    try {
        ds.bank = nlohmann::json::parse(read_text_file(dir / "ridges.json")).get<RidgeBank>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad ridge file in " + dir.string() + ": " + e.what());
    }
    ds.train = synth_detail::load_split(dir / "train");
    ds.test = synth_detail::load_split(dir / "test");
    return ds;
}

inline std::vector<SynthAudioClip> load_synth_audio(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad dataset manifest in " + dir.string() + ": " + e.what());
    }
    const int n = manifest.value("n_clips", 0);
    std::vector<SynthAudioClip> clips;
    for (int i = 0; i < n; ++i) {
        std::filesystem::path cdir = dir / "audio" / synth_detail::clip_name(i);
        SynthAudioClip clip;
        clip.audio = load_wav(cdir / "audio.wav");
        clip.gt = load_arkit_csv(cdir / "arkit.csv");
        clips.push_back(std::move(clip));
    }
    return clips;
}

// Order-stable digest of every regular file under a directory; two directory
// trees with identical contents hash identically.
inline std::string hash_directory(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
        if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) {
        acc += std::filesystem::relative(f, dir).generic_string();
        acc += '\0';
        acc += hash_file(f);
        acc += '\0';
    }
    return hex64(fnv1a(acc.data(), acc.size()));
}

}  // namespace dnpm

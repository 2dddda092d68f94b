#pragma once

// Audio I/O and speech features: 16-bit PCM mono WAV reading/writing and a
// desk-scale log-mel filterbank extractor behind a pluggable provider
// interface.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnpm/common.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

// ---------------------------------------------------------------------------
// WAV (RIFF, PCM16, mono)
// ---------------------------------------------------------------------------

struct AudioClip {
    int sample_rate = 16000;
    std::vector<double> samples;  // mono, nominal range [-1, 1]

    double duration() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline std::uint16_t get_u16(const std::string& in, std::size_t& pos) {
    require(pos + 2 <= in.size(), "wav: truncated file");
    std::uint16_t v = static_cast<std::uint16_t>(static_cast<unsigned char>(in[pos])) |
                      static_cast<std::uint16_t>(static_cast<unsigned char>(in[pos + 1])) << 8;
    pos += 2;
    return v;
}

}  // namespace detail

// Samples are stored as s[i]/32768, so any PCM16 stream survives a
// load/save round trip bit-for-bit.
inline void save_wav(const AudioClip& clip, const std::filesystem::path& path) {
    require(clip.sample_rate > 0, "wav: sample rate must be positive");
    require(!clip.samples.empty(), "wav: no samples");
    std::string data;
    data.reserve(clip.samples.size() * 2);
    for (double s : clip.samples) {
        require(std::isfinite(s), "wav: non-finite sample");
        long v = std::lround(s * 32768.0);
        if (v > 32767) v = 32767;
        if (v < -32768) v = -32768;
        detail::put_u16(data, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }
    std::string out = "RIFF";
    detail::put_u32(out, static_cast<std::uint32_t>(36 + data.size()));
    out += "WAVEfmt ";
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);  // PCM
    detail::put_u16(out, 1);  // mono
    detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
    detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate * 2));
    detail::put_u16(out, 2);   // block align
    detail::put_u16(out, 16);  // bits per sample
    out += "data";
    detail::put_u32(out, static_cast<std::uint32_t>(data.size()));
    out += data;
    write_text_file(path, out);
}

inline AudioClip load_wav(const std::filesystem::path& path) {
    std::string in = read_text_file(path);
    require(in.size() >= 12 && in.compare(0, 4, "RIFF") == 0 && in.compare(8, 4, "WAVE") == 0,
            "wav: not a RIFF/WAVE file: " + path.string());
    std::size_t pos = 12;
    AudioClip clip;
    bool have_fmt = false, have_data = false;
    while (pos + 8 <= in.size()) {
        std::string id = in.substr(pos, 4);
        pos += 4;
        std::uint32_t size = detail::get_u32(in, pos);
        require(pos + size <= in.size(), "wav: truncated chunk '" + id + "'");
        if (id == "fmt ") {
            std::size_t p = pos;
            std::uint16_t format = detail::get_u16(in, p);
            std::uint16_t channels = detail::get_u16(in, p);
            std::uint32_t rate = detail::get_u32(in, p);
            p += 6;  // byte rate + block align
            std::uint16_t bits = detail::get_u16(in, p);
            require(format == 1, "wav: only PCM is supported");
            require(channels == 1, "wav: only mono is supported");
            require(bits == 16, "wav: only 16-bit samples are supported");
            require(rate > 0, "wav: bad sample rate");
            clip.sample_rate = static_cast<int>(rate);
            have_fmt = true;
        } else if (id == "data") {
            require(have_fmt, "wav: data chunk before fmt chunk");
            require(size % 2 == 0, "wav: odd data size");
            std::size_t p = pos;
            clip.samples.resize(size / 2);
            for (double& s : clip.samples)
                s = static_cast<std::int16_t>(detail::get_u16(in, p)) / 32768.0;
            have_data = true;
        }
        pos += size + (size % 2);  // chunks are word-aligned
    }
    require(have_fmt && have_data, "wav: missing fmt or data chunk: " + path.string());
    require(!clip.samples.empty(), "wav: empty data chunk");
    return clip;
}

// ---------------------------------------------------------------------------
// Log-mel filterbank features
// ---------------------------------------------------------------------------

struct AudioFeatureSeq {
    Tensor features{std::vector<int>{1, 1}};  // [T_a, d_a]
    double fps = 100.0;                       // feature frames per second

    int num_frames() const { return features.dim(0); }
    int dim() const { return features.dim(1); }

    void check() const {
        require(features.rank() == 2 && features.dim(0) >= 1 && features.dim(1) >= 1,
                "audio features: need a [T_a, d_a] matrix");
        require(fps > 0.0, "audio features: fps must be positive");
        for (std::int64_t i = 0; i < features.numel(); ++i)
            require(std::isfinite(features[i]), "audio features: non-finite entry");
    }
};

struct FilterbankConfig {
    int sample_rate = 16000;
    int frame_length = 400;  // 25 ms at 16 kHz
    int hop = 160;           // 10 ms -> 100 feature frames per second
    int n_mels = 26;
    double f_min = 0.0;
    double f_max = 8000.0;
    double log_floor = 1e-10;

    double fps() const { return static_cast<double>(sample_rate) / hop; }

    void check() const {
        require(sample_rate > 0, "filterbank: sample_rate must be positive");
        require(frame_length >= 2 && hop >= 1, "filterbank: bad frame geometry");
        require(n_mels >= 1, "filterbank: n_mels must be >= 1");
        require(0.0 <= f_min && f_min < f_max && f_max <= sample_rate / 2.0,
                "filterbank: need 0 <= f_min < f_max <= Nyquist");
        require(log_floor > 0.0, "filterbank: log_floor must be positive");
    }
};

inline void to_json(nlohmann::json& j, const FilterbankConfig& c) {
    j = {{"sample_rate", c.sample_rate}, {"frame_length", c.frame_length}, {"hop", c.hop},
         {"n_mels", c.n_mels},           {"f_min", c.f_min},               {"f_max", c.f_max},
         {"log_floor", c.log_floor}};
}

inline void from_json(const nlohmann::json& j, FilterbankConfig& c) {
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.frame_length = j.value("frame_length", c.frame_length);
    c.hop = j.value("hop", c.hop);
    c.n_mels = j.value("n_mels", c.n_mels);
    c.f_min = j.value("f_min", c.f_min);
    c.f_max = j.value("f_max", c.f_max);
    c.log_floor = j.value("log_floor", c.log_floor);
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Power spectrum of one Hann-windowed frame via a direct DFT
// (frame_length/2 + 1 bins).
inline std::vector<double> power_spectrum(const std::vector<double>& frame) {
    int n = static_cast<int>(frame.size());
    require(n >= 2, "power_spectrum: frame too short");
    std::vector<double> windowed(frame.size());
    for (int i = 0; i < n; ++i)
        windowed[static_cast<std::size_t>(i)] =
            frame[static_cast<std::size_t>(i)] * (0.5 - 0.5 * std::cos(2.0 * M_PI * i / (n - 1)));
    std::vector<double> power(static_cast<std::size_t>(n / 2 + 1));
    for (int k = 0; k <= n / 2; ++k) {
        double re = 0.0, im = 0.0;
        for (int i = 0; i < n; ++i) {
            double phase = -2.0 * M_PI * k * i / n;
            re += windowed[static_cast<std::size_t>(i)] * std::cos(phase);
            im += windowed[static_cast<std::size_t>(i)] * std::sin(phase);
        }
        power[static_cast<std::size_t>(k)] = re * re + im * im;
    }
    return power;
}

// Triangular mel filters as an [n_mels, n_bins] matrix over the DFT bins.
inline Tensor mel_filterbank(const FilterbankConfig& cfg) {
    cfg.check();
    int n_bins = cfg.frame_length / 2 + 1;
    double mel_lo = hz_to_mel(cfg.f_min), mel_hi = hz_to_mel(cfg.f_max);
    std::vector<double> hz_points(static_cast<std::size_t>(cfg.n_mels + 2));
    for (int m = 0; m < cfg.n_mels + 2; ++m)
        hz_points[static_cast<std::size_t>(m)] =
            mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (cfg.n_mels + 1));
    Tensor fb = Tensor::zeros({cfg.n_mels, n_bins});
    for (int m = 0; m < cfg.n_mels; ++m) {
        double lo = hz_points[static_cast<std::size_t>(m)];
        double mid = hz_points[static_cast<std::size_t>(m + 1)];
        double hi = hz_points[static_cast<std::size_t>(m + 2)];
        for (int k = 0; k < n_bins; ++k) {
            double f = static_cast<double>(k) * cfg.sample_rate / cfg.frame_length;
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f == mid)
                w = 1.0;
            else if (f > mid && f < hi)
                w = (hi - f) / (hi - mid);
            fb[static_cast<std::int64_t>(m) * n_bins + k] = w;
        }
    }
    return fb;
}

// Frames the clip (zero-padding anything shorter than one frame), applies the
// Hann window + DFT power spectrum, and reduces through the mel filterbank to
// log energies. T_a = 1 + floor((N - frame_length)/hop) for N >= frame_length.
inline AudioFeatureSeq log_mel_features(const AudioClip& clip, const FilterbankConfig& cfg) {
    cfg.check();
    require(clip.sample_rate == cfg.sample_rate,
            "log_mel_features: clip rate " + std::to_string(clip.sample_rate) +
                " does not match filterbank rate " + std::to_string(cfg.sample_rate));
    require(!clip.samples.empty(), "log_mel_features: empty clip");
    int n = static_cast<int>(clip.samples.size());
    int frames = n < cfg.frame_length ? 1 : 1 + (n - cfg.frame_length) / cfg.hop;
    Tensor fb = mel_filterbank(cfg);
    int n_bins = fb.dim(1);
    AudioFeatureSeq out;
    out.features = Tensor::zeros({frames, cfg.n_mels});
    out.fps = cfg.fps();
    std::vector<double> frame(static_cast<std::size_t>(cfg.frame_length));
    for (int t = 0; t < frames; ++t) {
        for (int i = 0; i < cfg.frame_length; ++i) {
            int idx = t * cfg.hop + i;
            frame[static_cast<std::size_t>(i)] =
                idx < n ? clip.samples[static_cast<std::size_t>(idx)] : 0.0;
        }
        std::vector<double> power = power_spectrum(frame);
        for (int m = 0; m < cfg.n_mels; ++m) {
            double e = 0.0;
            for (int k = 0; k < n_bins; ++k)
                e += fb[static_cast<std::int64_t>(m) * n_bins + k] *
                     power[static_cast<std::size_t>(k)];
            out.features[static_cast<std::int64_t>(t) * cfg.n_mels + m] =
                std::log(cfg.log_floor + e);
        }
    }
    out.check();
    return out;
}

// Pluggable speech-feature source; the bundled provider computes log-mel
// features directly from the waveform.
class AudioFeatureProvider {
  public:
    virtual ~AudioFeatureProvider() = default;
    virtual AudioFeatureSeq features(const AudioClip& clip) const = 0;
    virtual int dim() const = 0;
};

class LogMelProvider final : public AudioFeatureProvider {
  public:
    explicit LogMelProvider(FilterbankConfig cfg = {}) : cfg_(cfg) { cfg_.check(); }
    AudioFeatureSeq features(const AudioClip& clip) const override {
        return log_mel_features(clip, cfg_);
    }
    int dim() const override { return cfg_.n_mels; }
    const FilterbankConfig& config() const { return cfg_; }

  private:
    FilterbankConfig cfg_;
};

}  // namespace dnpm

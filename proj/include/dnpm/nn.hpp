#pragma once

// Training infrastructure shared by all networks: a named parameter store,
// Adam with optional cosine learning-rate decay, and checkpoint I/O
// (binary parameter blob + versioned JSON sidecar with a content hash).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

// Named tensors with deterministic (insertion-order) iteration.
class ParamStore {
  public:
    Tensor& create(const std::string& name, Tensor init) {
        require(values_.find(name) == values_.end(), "parameter already exists: " + name);
        require(init.all_finite(), "parameter init must be finite: " + name);
        names_.push_back(name);
        return values_.emplace(name, std::move(init)).first->second;
    }

    bool has(const std::string& name) const { return values_.find(name) != values_.end(); }

    Tensor& at(const std::string& name) {
        auto it = values_.find(name);
        require(it != values_.end(), "unknown parameter: " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = values_.find(name);
        require(it != values_.end(), "unknown parameter: " + name);
        return it->second;
    }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& name : names_) n += at(name).numel();
        return n;
    }

    bool all_finite() const {
        for (const auto& name : names_)
            if (!at(name).all_finite()) return false;
        return true;
    }

  private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, Tensor> values_;
};

// Registers every parameter as a tape leaf; returns name -> Var.
inline std::map<std::string, ad::Var> make_leaves(ad::Tape& tape, const ParamStore& params) {
    std::map<std::string, ad::Var> vars;
    for (const auto& name : params.names()) vars[name] = tape.leaf(params.at(name));
    return vars;
}

// Same mapping but as constants: the graph treats these parameters as frozen.
inline std::map<std::string, ad::Var> make_constants(ad::Tape& tape, const ParamStore& params) {
    std::map<std::string, ad::Var> vars;
    for (const auto& name : params.names()) vars[name] = tape.constant(params.at(name));
    return vars;
}

// Adds g into the named slot of a gradient accumulator (creates it on first use).
inline void accumulate_grad(std::map<std::string, Tensor>& into, const std::string& name,
                            const Tensor& g) {
    auto it = into.find(name);
    if (it == into.end()) {
        into.emplace(name, g);
    } else {
        Tensor& acc = it->second;
        require(acc.numel() == g.numel(), "accumulate_grad: shape mismatch for " + name);
        for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
    }
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update; grads maps parameter name -> gradient tensor.
    // lr_scale multiplies the base rate (used for schedules).
    void step(ParamStore& params, const std::map<std::string, Tensor>& grads,
              double lr_scale = 1.0) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        double lr = cfg_.lr * lr_scale;
        for (const auto& [name, g] : grads) {
            Tensor& p = params.at(name);
            require(p.numel() == g.numel(), "adam: gradient shape mismatch for " + name);
            Tensor& m = state(m_, name, p);
            Tensor& v = state(v_, name, p);
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    long steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    Tensor& state(std::unordered_map<std::string, Tensor>& slot, const std::string& name,
                  const Tensor& like) {
        auto it = slot.find(name);
        if (it == slot.end()) it = slot.emplace(name, Tensor::zeros(like.shape())).first;
        return it->second;
    }

    AdamConfig cfg_;
    std::unordered_map<std::string, Tensor> m_, v_;
    long t_ = 0;
};

// Cosine decay from full rate at step 0 to zero at total_steps.
inline double cosine_lr_scale(long step, long total_steps) {
    require(total_steps > 0, "cosine_lr_scale: total_steps must be positive");
    if (step >= total_steps) return 0.0;
    return 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary blob (<path>) + JSON sidecar
// (<path>.json) carrying version, config, step, seed, and the blob's hash.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    int version = 1;
    nlohmann::json config = nlohmann::json::object();
    long step = 0;
    std::uint64_t seed = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                            const CheckpointMeta& meta) {
    std::string blob = "DNPMCKPT";
    detail::put_u32(blob, 1);  // blob format version
    detail::put_u32(blob, static_cast<std::uint32_t>(params.size()));
    for (const auto& name : params.names()) {
        const Tensor& t = params.at(name);
        detail::put_u32(blob, static_cast<std::uint32_t>(name.size()));
        blob += name;
        detail::put_u32(blob, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) detail::put_u32(blob, static_cast<std::uint32_t>(d));
        const char* raw = reinterpret_cast<const char*>(t.data());
        blob.append(raw, raw + t.numel() * sizeof(double));
    }
    write_text_file(path, blob);

    nlohmann::json side = {{"format", "dnpm-checkpoint"},
                           {"version", meta.version},
                           {"config", meta.config},
                           {"step", meta.step},
                           {"seed", meta.seed},
                           {"content_hash", hex64(fnv1a(blob.data(), blob.size()))}};
    write_text_file(path.string() + ".json", side.dump(2) + "\n");
}

inline std::pair<ParamStore, CheckpointMeta> load_checkpoint(const std::filesystem::path& path) {
    std::string blob = read_text_file(path);
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(read_text_file(path.string() + ".json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint sidecar for " + path.string() + ": " + e.what());
    }
    std::string expect = side.value("content_hash", std::string());
    if (expect != hex64(fnv1a(blob.data(), blob.size())))
        throw IoError("checkpoint content hash mismatch: " + path.string());

    std::size_t pos = 0;
    require(blob.size() >= 8 && blob.compare(0, 8, "DNPMCKPT") == 0,
            "not a checkpoint file: " + path.string());
    pos = 8;
    std::uint32_t fmt = detail::get_u32(blob, pos);
    require(fmt == 1, "unsupported checkpoint format version");
    std::uint32_t count = detail::get_u32(blob, pos);
    ParamStore params;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = detail::get_u32(blob, pos);
        require(pos + name_len <= blob.size(), "checkpoint truncated");
        std::string name = blob.substr(pos, name_len);
        pos += name_len;
        std::uint32_t rank = detail::get_u32(blob, pos);
        std::vector<int> shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r)
            shape[r] = static_cast<int>(detail::get_u32(blob, pos));
        Tensor t(shape);
        std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(double);
        require(pos + bytes <= blob.size(), "checkpoint truncated");
        std::memcpy(t.data(), blob.data() + pos, bytes);
        pos += bytes;
        params.create(name, std::move(t));
    }
    require(pos == blob.size(), "trailing bytes in checkpoint");

    CheckpointMeta meta;
    meta.version = side.value("version", 1);
    meta.config = side.value("config", nlohmann::json::object());
    meta.step = side.value("step", 0L);
    meta.seed = side.value("seed", static_cast<std::uint64_t>(0));
    return {std::move(params), std::move(meta)};
}

}  // namespace dnpm

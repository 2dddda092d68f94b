#pragma once

// Feature extractors and the reconstruction losses built on them:
//   loss_pixel  - mean absolute difference on the unit texel scale
//   loss_lpips  - L2 distance between stacked extractor features
//   loss_id     - sum over five taps of (1 - cosine similarity)
//
// Both extractor kinds are interfaces; the shipped implementations are
// fixed-seed random convolutional pyramids (weights frozen at construction),
// which serve as the desk-scale stand-ins for pretrained backbones.

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dnpm/autodiff.hpp"
#include "dnpm/common.hpp"
#include "dnpm/image.hpp"
#include "dnpm/nn.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

// Produces a stack of flattened feature vectors for an image var [1,H,W].
// Implementations must be pure: same image -> bitwise-same features.
class PerceptualExtractor {
  public:
    virtual ~PerceptualExtractor() = default;
    virtual std::vector<ad::Var> features(ad::Tape& t, ad::Var image) const = 0;
    virtual int input_resolution() const = 0;
};

// Produces exactly five feature vectors ("taps") of increasing receptive
// field; each is compared by cosine similarity in loss_id.
class IdentityFeatureExtractor {
  public:
    static constexpr int kTaps = 5;
    virtual ~IdentityFeatureExtractor() = default;
    virtual std::vector<ad::Var> taps(ad::Tape& t, ad::Var image) const = 0;
    virtual int input_resolution() const = 0;
};

namespace detail {

inline void check_image_var(ad::Tape& t, ad::Var image, int res, const char* who) {
    require(t.shape(image) == std::vector<int>({1, res, res}),
            std::string(who) + ": image must be [1," + std::to_string(res) + "," +
                std::to_string(res) + "]");
}

}  // namespace detail

// Random conv pyramid: `scales` stages of (3x3 conv, lrelu), each followed by
// 2x average pooling; every stage's activation map is one feature vector.
class RandomConvPyramid final : public PerceptualExtractor {
  public:
    RandomConvPyramid(int input_resolution, int scales = 3, int channels = 8,
                      std::uint64_t seed = 1234)
        : res_(input_resolution), scales_(scales), channels_(channels) {
        require(scales_ >= 1, "RandomConvPyramid: scales must be >= 1");
        require(input_resolution >> scales_ >= 1, "RandomConvPyramid: too many scales");
        Rng rng(seed);
        int cin = 1;
        for (int s = 0; s < scales_; ++s) {
            std::string base = "perc.s" + std::to_string(s);
            weights_.create(base + ".w",
                            Tensor::randn({channels_, cin * 9}, rng,
                                          1.0 / std::sqrt(static_cast<double>(cin) * 9)));
            weights_.create(base + ".b", Tensor::zeros({channels_, 1}));
            cin = channels_;
        }
    }

    std::vector<ad::Var> features(ad::Tape& t, ad::Var image) const override {
        detail::check_image_var(t, image, res_, "RandomConvPyramid");
        std::vector<ad::Var> out;
        ad::Var x = image;
        for (int s = 0; s < scales_; ++s) {
            std::string base = "perc.s" + std::to_string(s);
            ad::Var h = t.lrelu(ad::conv2d(t, x, t.constant(weights_.at(base + ".w")),
                                           t.constant(weights_.at(base + ".b")), 3, 3, 1, 1),
                                0.2);
            const auto hs = t.shape(h);
            out.push_back(t.reshape(h, {1, hs[0] * hs[1] * hs[2]}));
            x = t.scale(t.sumpool2(h), 0.25);
        }
        return out;
    }

    int input_resolution() const override { return res_; }
    const ParamStore& weights() const { return weights_; }

  private:
    int res_, scales_, channels_;
    ParamStore weights_;
};

// Same pyramid family with five stages; each tap is the stage activation
// reduced by global average pooling to a per-channel vector.
class RandomIdentityPyramid final : public IdentityFeatureExtractor {
  public:
    explicit RandomIdentityPyramid(int input_resolution, int channels = 8,
                                   std::uint64_t seed = 4321)
        : res_(input_resolution), channels_(channels) {
        require(input_resolution >> (kTaps - 1) >= 1, "RandomIdentityPyramid: input too small");
        Rng rng(seed);
        int cin = 1;
        for (int s = 0; s < kTaps; ++s) {
            std::string base = "ident.s" + std::to_string(s);
            weights_.create(base + ".w",
                            Tensor::randn({channels_, cin * 9}, rng,
                                          1.0 / std::sqrt(static_cast<double>(cin) * 9)));
            weights_.create(base + ".b", Tensor::zeros({channels_, 1}));
            cin = channels_;
        }
    }

    std::vector<ad::Var> taps(ad::Tape& t, ad::Var image) const override {
        detail::check_image_var(t, image, res_, "RandomIdentityPyramid");
        std::vector<ad::Var> out;
        ad::Var x = image;
        for (int s = 0; s < kTaps; ++s) {
            std::string base = "ident.s" + std::to_string(s);
            ad::Var h = t.lrelu(ad::conv2d(t, x, t.constant(weights_.at(base + ".w")),
                                           t.constant(weights_.at(base + ".b")), 3, 3, 1, 1),
                                0.2);
            const auto hs = t.shape(h);
            // Global average pool: [C,H,W] -> [1,C].
            ad::Var flat = t.reshape(h, {hs[0], hs[1] * hs[2]});
            ad::Var pooled = t.scale(t.rowsum(flat), 1.0 / (hs[1] * hs[2]));
            out.push_back(t.reshape(pooled, {1, hs[0]}));
            if (s + 1 < kTaps) x = t.scale(t.sumpool2(h), 0.25);
        }
        return out;
    }

    int input_resolution() const override { return res_; }

  private:
    int res_, channels_;
    ParamStore weights_;
};

// Features are the raw pixels; reduces loss_lpips to plain L2 distance.
class IdentityPixelExtractor final : public PerceptualExtractor {
  public:
    explicit IdentityPixelExtractor(int input_resolution) : res_(input_resolution) {}
    std::vector<ad::Var> features(ad::Tape& t, ad::Var image) const override {
        detail::check_image_var(t, image, res_, "IdentityPixelExtractor");
        return {t.reshape(image, {1, res_ * res_})};
    }
    int input_resolution() const override { return res_; }

  private:
    int res_;
};

namespace perc {

// Graph-mode losses (image vars are [1,H,W] on the unit texel scale).

inline ad::Var loss_pixel_graph(ad::Tape& t, ad::Var pred, ad::Var gt) {
    require(t.shape(pred) == t.shape(gt), "loss_pixel: shape mismatch");
    return ad::l1_mean(t, pred, gt);
}

inline ad::Var loss_lpips_graph(ad::Tape& t, ad::Var pred, ad::Var gt,
                                const PerceptualExtractor& extractor) {
    std::vector<ad::Var> fp = extractor.features(t, pred);
    std::vector<ad::Var> fg = extractor.features(t, gt);
    require(fp.size() == fg.size(), "loss_lpips: feature stack size mismatch");
    ad::Var ss;
    for (std::size_t i = 0; i < fp.size(); ++i) {
        ad::Var d = t.sub(fp[i], fg[i]);
        ad::Var s = t.sum_all(t.mul(d, d));
        ss = ss.valid() ? t.add(ss, s) : s;
    }
    if (t.val(ss)[0] == 0.0) return t.scalar_const(0.0);
    return t.powc(ss, 0.5);
}

struct IdLossDiagnostics {
    std::array<bool, IdentityFeatureExtractor::kTaps> zero_norm_tap{};
    bool any_zero_norm() const {
        for (bool b : zero_norm_tap)
            if (b) return true;
        return false;
    }
};

inline ad::Var loss_id_graph(ad::Tape& t, ad::Var gen, ad::Var high,
                             const IdentityFeatureExtractor& extractor,
                             IdLossDiagnostics* diag = nullptr) {
    std::vector<ad::Var> fa = extractor.taps(t, gen);
    std::vector<ad::Var> fb = extractor.taps(t, high);
    require(fa.size() == IdentityFeatureExtractor::kTaps &&
                fb.size() == IdentityFeatureExtractor::kTaps,
            "loss_id: extractor must produce exactly 5 taps");
    ad::Var total = t.scalar_const(0.0);
    for (int i = 0; i < IdentityFeatureExtractor::kTaps; ++i) {
        ad::Var na2 = t.sum_all(t.mul(fa[i], fa[i]));
        ad::Var nb2 = t.sum_all(t.mul(fb[i], fb[i]));
        if (t.val(na2)[0] == 0.0 || t.val(nb2)[0] == 0.0) {
            // Degenerate tap: cosine defined as 0 and reported to the caller.
            if (diag) diag->zero_norm_tap[static_cast<std::size_t>(i)] = true;
            total = t.add_const(total, 1.0);
            continue;
        }
        ad::Var dot = t.sum_all(t.mul(fa[i], fb[i]));
        ad::Var cosv = t.mul(dot, t.powc(t.mul(na2, nb2), -0.5));
        total = t.add(total, t.sub(t.scalar_const(1.0), cosv));
    }
    return total;
}

}  // namespace perc

// Value-level convenience wrappers over DisplacementMaps.

namespace detail {

inline Tensor image_tensor(const DisplacementMap& m) {
    return Tensor({1, m.height, m.width}, to_tensor(m).vec());
}

}  // namespace detail

inline double loss_pixel(const DisplacementMap& pred, const DisplacementMap& gt) {
    require(pred.width == gt.width && pred.height == gt.height, "loss_pixel: shape mismatch");
    ad::Tape t;
    return t.val(perc::loss_pixel_graph(t, t.constant(detail::image_tensor(pred)),
                                        t.constant(detail::image_tensor(gt))))[0];
}

inline double loss_lpips(const DisplacementMap& pred, const DisplacementMap& gt,
                         const PerceptualExtractor& extractor) {
    require(pred.width == gt.width && pred.height == gt.height, "loss_lpips: shape mismatch");
    ad::Tape t;
    return t.val(perc::loss_lpips_graph(t, t.constant(detail::image_tensor(pred)),
                                        t.constant(detail::image_tensor(gt)), extractor))[0];
}

inline double loss_id(const DisplacementMap& gen, const DisplacementMap& high,
                      const IdentityFeatureExtractor& extractor,
                      perc::IdLossDiagnostics* diag = nullptr) {
    require(gen.width == high.width && gen.height == high.height, "loss_id: shape mismatch");
    ad::Tape t;
    return t.val(perc::loss_id_graph(t, t.constant(detail::image_tensor(gen)),
                                     t.constant(detail::image_tensor(high)), extractor, diag))[0];
}

}  // namespace dnpm

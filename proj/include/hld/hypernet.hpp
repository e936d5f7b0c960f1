#pragma once

// Hypernetwork: exemplar image -> LoRA factors for the denoiser's cross-attention.
// A two-layer MLP encoder produces a feature vector, a shared two-layer MLP trunk
// refines it (optionally iterated), and one linear head per target emits that
// target's (B | A) factors.

#include "hld/common.hpp"
#include "hld/lora.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace hld {

struct HypernetConfig {
    int image_dim = 256;
    int feature = 64;
    int rank = 3;
    int iterations = 1;
    // Standard deviation for the A-part of each head at initialization; the B-part starts
    // at zero so the predicted update B*A is zero before training.
    double a_init_std = 0.125;
    std::vector<TargetShape> targets;
};

struct HypernetParams {
    HypernetConfig config;

    Mat enc_W1, enc_b1; // feature x image_dim
    Mat enc_W2, enc_b2; // feature x feature
    Mat dec_W1, dec_b1;
    Mat dec_W2, dec_b2;
    std::vector<Mat> head_W; // one per target: r*(d_in+d_out) x feature
    std::vector<Mat> head_b;

    template <class Self, class F> static void visit(Self &self, F &&f) {
        f(std::string("enc_W1"), self.enc_W1);
        f(std::string("enc_b1"), self.enc_b1);
        f(std::string("enc_W2"), self.enc_W2);
        f(std::string("enc_b2"), self.enc_b2);
        f(std::string("dec_W1"), self.dec_W1);
        f(std::string("dec_b1"), self.dec_b1);
        f(std::string("dec_W2"), self.dec_W2);
        f(std::string("dec_b2"), self.dec_b2);
        for (std::size_t i = 0; i < self.head_W.size(); ++i) {
            const std::string name(target_name(self.config.targets[i].target));
            f("head_W." + name, self.head_W[i]);
            f("head_b." + name, self.head_b[i]);
        }
    }
    template <class F> void for_each(F &&f) { visit(*this, std::forward<F>(f)); }
    template <class F> void for_each(F &&f) const { visit(*this, std::forward<F>(f)); }

    HypernetParams zeros_like() const;
    std::size_t output_size() const;
};

HypernetParams init_hypernet(const HypernetConfig &cfg, std::uint64_t seed);

// Column-wise feature extraction: images is image_dim x N.
Mat encode_image(const Mat &images, const HypernetParams &params);
Vec encode_image(const Vec &image, const HypernetParams &params);

LoraAdapterSet decode_weights(const Vec &feature, const HypernetParams &params);

// Mean of per-image predictions, taken in factor space.
LoraAdapterSet predict(std::span<const Vec> images, const HypernetParams &params);

// Rebuilds an adapter set from a flat vector laid out like LoraAdapterSet::flatten().
LoraAdapterSet unflatten_adapters(const Vec &flat, std::span<const TargetShape> targets, int rank);

struct HypernetTape {
    Mat x, enc_pre1, enc_h1, feature;
    std::vector<Mat> trunk_in, trunk_pre1, trunk_h1, trunk_pre2;
    Mat z;
};

// Per-image adapter sets for images (image_dim x N).
std::vector<LoraAdapterSet> hypernet_forward(const HypernetParams &params, const Mat &images,
                                             HypernetTape *tape = nullptr);

// d_outputs holds dL/d(factors) for each image column; accumulates into grads.
void hypernet_backward(const HypernetParams &params, const HypernetTape &tape,
                       std::span<const LoraAdapterSet> d_outputs, HypernetParams &grads);

} // namespace hld

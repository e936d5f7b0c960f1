#pragma once

// Conditional epsilon-predictor: input projection plus timestep embedding, one
// cross-attention block over prompt token embeddings (W_Q/W_K/W_V are the LoRA
// targets), two residual MLP blocks, and an output projection with a per-step skip gain.

#include "hld/common.hpp"
#include "hld/lora.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

namespace hld {

inline constexpr int kNullToken = 0;
inline constexpr int kSubjectToken = 1;
inline constexpr int kFirstClassToken = 2;

struct PromptSpec {
    std::vector<int> tokens;

    bool is_subject() const;
    // The empty prompt is the single [NULL] token.
    static PromptSpec null_prompt() { return PromptSpec{{kNullToken}}; }

    friend bool operator==(const PromptSpec &, const PromptSpec &) = default;
};

struct DenoiserConfig {
    int data_dim = 256;
    int hidden = 64;
    int mlp_hidden = 128;
    int vocab = 16;
    int T = 1000;
};

struct DenoiserParams {
    DenoiserConfig config;

    Mat W_in, b_in;   // hidden x data_dim, hidden x 1
    Mat t_embed;      // hidden x (T + 1)
    Mat tok_embed;    // hidden x vocab; column k embeds token k
    Mat W_Q, W_K, W_V, W_O;
    Mat W_1, b_1;     // mlp_hidden x hidden
    Mat W_2, b_2;     // hidden x mlp_hidden
    Mat W_3, b_3;     // second residual block, same shapes as W_1/W_2
    Mat W_4, b_4;
    Mat W_out, b_out; // data_dim x hidden
    Mat skip;         // 1 x (T + 1)

    template <class Self, class F> static void visit(Self &self, F &&f) {
        f("W_in", self.W_in);
        f("b_in", self.b_in);
        f("t_embed", self.t_embed);
        f("tok_embed", self.tok_embed);
        f("W_Q", self.W_Q);
        f("W_K", self.W_K);
        f("W_V", self.W_V);
        f("W_O", self.W_O);
        f("W_1", self.W_1);
        f("b_1", self.b_1);
        f("W_2", self.W_2);
        f("b_2", self.b_2);
        f("W_3", self.W_3);
        f("b_3", self.b_3);
        f("W_4", self.W_4);
        f("b_4", self.b_4);
        f("W_out", self.W_out);
        f("b_out", self.b_out);
        f("skip", self.skip);
    }
    template <class F> void for_each(F &&f) { visit(*this, std::forward<F>(f)); }
    template <class F> void for_each(F &&f) const { visit(*this, std::forward<F>(f)); }

    const Mat &target(Target t) const;
    Mat &target(Target t);
    // Shapes of the three LoRA targets, for new_adapter_set.
    std::vector<TargetShape> target_shapes() const;

    DenoiserParams zeros_like() const;
};

DenoiserParams init_denoiser(const DenoiserConfig &cfg, std::uint64_t seed);

// Throws if the adapter set does not fit this denoiser's targets.
void check_adapters(const DenoiserParams &params, const LoraAdapterSet &adapters);

Mat encode_prompt(const PromptSpec &prompt, const DenoiserParams &params);

// Per-column conditioning for a batch of noisy inputs.
struct DenoiseBatch {
    Mat x;                                       // data_dim x B
    std::vector<int> t;                          // B step indices in [1, T]
    std::vector<PromptSpec> prompts;             // B prompts
    std::vector<const LoraAdapterSet *> adapters; // empty, or B entries (nullptr = none)
};

// Activations kept for the backward pass.
struct DenoiserTape {
    Mat h0, q, c, h1, u, h2, u2, h3;
    std::vector<Mat> keys, values, embeds;
    std::vector<Vec> attn;
};

Mat denoiser_forward(const DenoiserParams &params, const DenoiseBatch &batch, DenoiserTape *tape = nullptr);

// Gradients with respect to adapter factors, keyed by the adapter set they belong to.
using AdapterGrads = std::map<const LoraAdapterSet *, LoraAdapterSet>;

// Backpropagates dL/dY. `d_params` (may be null) accumulates base-parameter gradients;
// `d_adapters` (may be null) accumulates factor gradients for every adapter in the batch.
void denoiser_backward(const DenoiserParams &params, const DenoiseBatch &batch, const DenoiserTape &tape,
                       const Mat &dY, DenoiserParams *d_params, AdapterGrads *d_adapters);

// Single-condition convenience: every column of x_t shares t, prompt, and adapters.
Mat denoise(const Mat &x_t, int t, const PromptSpec &prompt, const DenoiserParams &params,
            const LoraAdapterSet *adapters = nullptr);

DenoiserParams merge_adapters(const DenoiserParams &params, const LoraAdapterSet &adapters);

// Anything that predicts epsilon for a batch of noisy columns sharing one step and prompt.
// Implementations must be safe to call concurrently.
class EpsModel {
public:
    virtual ~EpsModel() = default;
    virtual Mat predict(const Mat &x_t, int t, const PromptSpec &prompt) const = 0;
};

// The denoiser with optional injected adapters. Holds references; both must outlive it.
class DenoiserModel final : public EpsModel {
public:
    explicit DenoiserModel(const DenoiserParams &params, const LoraAdapterSet *adapters = nullptr);
    Mat predict(const Mat &x_t, int t, const PromptSpec &prompt) const override;

private:
    const DenoiserParams &params_;
    const LoraAdapterSet *adapters_;
};

} // namespace hld

#pragma once

// Diffusion objectives, the hypernetwork objective with its output-norm penalty, the
// base-model pretraining loop, and per-subject LoRA finetuning.

#include "hld/common.hpp"
#include "hld/core_math.hpp"
#include "hld/denoiser.hpp"
#include "hld/hypernet.hpp"
#include "hld/lora.hpp"
#include "hld/toy_data.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace hld {

enum class OptimizerKind { sgd, adam };

struct OptimizerSpec {
    OptimizerKind kind = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Decoupled (AdamW-style) decay on the trained parameters.
    double weight_decay = 1e-4;
};

struct TrainConfig {
    double gamma = 1.0;
    double lambda = 0.0;
    double lr = 1e-3;
    int batch_size = 16;
    int steps = 2000;
    std::uint64_t seed = 0;
    double prompt_dropout = 0.1;
    // Pretraining only: share of generic prompts that carry the rare [V] token.
    double subject_token_rate = 0.05;
    // Exemplar images per subject fed to the hypernetwork (predictions are averaged).
    int exemplars = 1;
    // Evaluate the class-prior term on the base model instead of the adapted one.
    bool reg_on_base = false;
    ScheduleSpec schedule;
    OptimizerSpec optimizer;

    void validate() const;
};

// One (x0, prompt, t, eps) draw. `adapter` indexes the caller's adapter table (-1 = none).
struct DiffusionItem {
    Vec x0;
    PromptSpec prompt;
    int t = 1;
    Vec eps;
    int adapter = -1;
};

// Subject pairs (x, c_S) and class-prior pairs (x_hat, c_G) with their stored draws.
struct Batch {
    std::vector<DiffusionItem> subject;
    std::vector<DiffusionItem> reg;
};

struct DiffusionGrads {
    DenoiserParams *params = nullptr;       // base-parameter gradient accumulator (optional)
    std::vector<LoraAdapterSet> *adapters = nullptr; // one per adapter-table entry (optional)
    double weight = 1.0;                            // gradients are scaled by this factor
};

// (1/N) sum ||eps_hat(x_t, c, t) - eps||^2 with x_t = forward_diffuse(x0, t, eps).
double diffusion_loss(std::span<const DiffusionItem> items, const DenoiserParams &params,
                      std::span<const LoraAdapterSet> adapter_table, const NoiseSchedule &sched,
                      DiffusionGrads grads = {});

double loss_ft(std::span<const DiffusionItem> subject_items, const DenoiserParams &params,
               std::span<const LoraAdapterSet> adapter_table, const NoiseSchedule &sched,
               DiffusionGrads grads = {});
double loss_reg(std::span<const DiffusionItem> reg_items, const DenoiserParams &params,
                std::span<const LoraAdapterSet> adapter_table, const NoiseSchedule &sched,
                DiffusionGrads grads = {});

struct HypernetBatch {
    std::vector<Mat> exemplars; // per subject: pixel images, image_dim x k
    Batch items;                // item.adapter indexes exemplars
};

struct LossTerms {
    double loss_ft = 0.0;
    double loss_reg = 0.0;
    double sq_norm = 0.0; // mean over subjects of ||h(x)||^2
    double total = 0.0;
};

// loss_ft + gamma loss_reg + lambda ||h(x)||^2 with adapters predicted from the exemplars.
// The denoiser is frozen; when `grads` is given, dTotal/dphi is accumulated into it.
LossTerms hypernet_loss(const HypernetBatch &batch, const HypernetParams &hyper, const DenoiserParams &denoiser,
                        const TrainConfig &cfg, const NoiseSchedule &sched, HypernetParams *grads = nullptr);

// Plain SGD or Adam(W) over any parameter struct with for_each().
class Optimizer {
public:
    Optimizer(OptimizerSpec spec, double lr) : spec_(spec), lr_(lr) {}

    template <class P> void step(P &params, const P &grads) {
        std::vector<Mat *> ps;
        std::vector<const Mat *> gs;
        params.for_each([&](const auto &, Mat &m) { ps.push_back(&m); });
        grads.for_each([&](const auto &, const Mat &m) { gs.push_back(&m); });
        update(ps, gs);
    }

    void update(const std::vector<Mat *> &params, const std::vector<const Mat *> &grads);
    long long iterations() const { return t_; }

private:
    OptimizerSpec spec_;
    double lr_;
    long long t_ = 0;
    std::vector<Mat> m_, v_;
};

struct TrainLogRecord {
    int step = 0;
    LossTerms terms;
};

std::string to_jsonl(std::span<const TrainLogRecord> log);

using LogSink = std::function<void(const TrainLogRecord &)>;

// Samples a hypernet training batch at `step` (fully determined by cfg.seed and step).
HypernetBatch sample_hypernet_batch(const Corpus &corpus, const TrainConfig &cfg, const NoiseSchedule &sched,
                                    int step);

struct HypernetTrainResult {
    HypernetParams params;
    std::vector<TrainLogRecord> log;
};

HypernetTrainResult train_hypernet(const Corpus &corpus, const DenoiserParams &denoiser, HypernetParams init,
                                   const TrainConfig &cfg, const LogSink &sink = {});

struct PretrainResult {
    DenoiserParams params;
    std::vector<TrainLogRecord> log;
};

// Trains the base denoiser on generic class images with prompt dropout.
PretrainResult pretrain_denoiser(int num_classes, DenoiserParams init, const TrainConfig &cfg,
                                 const LogSink &sink = {});

struct AdapterSnapshot {
    int step = 0;
    LoraAdapterSet adapters;
};

// Gradient descent on LoRA factors only (base frozen) for one subject, with the class-prior
// term weighted by cfg.gamma. Returns a snapshot at every requested mark (0 = initialization).
std::vector<AdapterSnapshot> finetune_subject(const Mat &subject_images, int class_id,
                                              const DenoiserParams &denoiser, int steps, std::vector<int> marks,
                                              const TrainConfig &cfg, int rank = 3, const LogSink &sink = {});

struct DifferentiableFn {
    std::function<double(const Vec &)> value;
    std::function<Vec(const Vec &)> gradient;
};

// Central differences per coordinate against the analytic gradient; returns
// max_i |g_i - g_fd_i| / max(|g_i|, |g_fd_i|, 1e-8).
double grad_check(const DifferentiableFn &fn, const Vec &params, double h);

template <class P> Vec flatten_params(const P &params) {
    Eigen::Index n = 0;
    params.for_each([&](const auto &, const Mat &m) { n += m.size(); });
    Vec out(n);
    Eigen::Index k = 0;
    params.for_each([&](const auto &, const Mat &m) {
        out.segment(k, m.size()) = m.reshaped();
        k += m.size();
    });
    return out;
}

template <class P> void assign_params(P &params, const Vec &flat) {
    Eigen::Index k = 0;
    params.for_each([&](const auto &, Mat &m) {
        require(k + m.size() <= flat.size(), "assign_params: vector too short");
        m.reshaped() = flat.segment(k, m.size());
        k += m.size();
    });
    require(k == flat.size(), "assign_params: vector length mismatch");
}

} // namespace hld

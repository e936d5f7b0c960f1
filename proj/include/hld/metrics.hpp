#pragma once

// Toy fidelity metrics. Subject fidelity compares frozen random-projection features
// against a reference centroid; prompt fidelity is the confidence of a small frozen
// probe classifier trained on class-prior images. All image inputs are pixel-space
// columns in [0, 1].

#include "hld/common.hpp"
#include "hld/core_math.hpp"
#include "hld/denoiser.hpp"
#include "hld/guidance.hpp"
#include "hld/lora.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hld {

struct FeatureProjection {
    Mat P;      // features x image_dim
    Vec center; // subtracted before projecting
};

FeatureProjection make_feature_projection(int image_dim, int features, std::uint64_t seed, const Vec &center);

Mat project_features(const Mat &images, const FeatureProjection &proj);

// Cosine of each generated image's features with the reference feature centroid.
std::vector<double> subject_fidelity_per_sample(const Mat &generated, const Mat &reference,
                                                const FeatureProjection &proj);
double subject_fidelity(const Mat &generated, const Mat &reference, const FeatureProjection &proj);

struct ProbeConfig {
    int hidden = 64;
    int steps = 1500;
    int batch = 64;
    double lr = 3e-3;
    int val_per_class = 128;
    // Share of each batch replaced by uniform-noise images with a uniform target.
    double noise_share = 0.15;
    std::uint64_t seed = 0;
};

struct Probe {
    int num_classes = 0;
    Mat W1, b1, W2, b2;
    double val_accuracy = 0.0;

    template <class Self, class F> static void visit(Self &self, F &&f) {
        f("W1", self.W1);
        f("b1", self.b1);
        f("W2", self.W2);
        f("b2", self.b2);
    }
    template <class F> void for_each(F &&f) { visit(*this, std::forward<F>(f)); }
    template <class F> void for_each(F &&f) const { visit(*this, std::forward<F>(f)); }
};

Probe train_probe(int num_classes, const ProbeConfig &cfg);

// num_classes x N softmax probabilities.
Mat probe_probabilities(const Probe &probe, const Mat &images);

std::vector<double> prompt_fidelity_per_sample(const Mat &generated, int class_id, const Probe &probe);
double prompt_fidelity(const Mat &generated, int class_id, const Probe &probe);

// Frozen projection plus probe, stored together so scores stay comparable across runs.
struct MetricSuite {
    FeatureProjection projection;
    std::optional<Probe> probe;
};

struct MetricSuiteConfig {
    int num_classes = 4;
    int features = 64;
    int center_per_class = 64;
    std::uint64_t seed = 0;
    ProbeConfig probe;
};

MetricSuite make_metric_suite(const MetricSuiteConfig &cfg);

// "HMET" v1 container with a CRC32 trailer.
std::vector<std::uint8_t> serialize_metric_suite(const MetricSuite &suite);
MetricSuite deserialize_metric_suite(std::span<const std::uint8_t> bytes);

struct MetricEcho {
    double lambda = 0.0;
    double kappa = 0.0;
    double w = 0.0;
    int steps = 0;
    std::uint64_t seed = 0;
    std::string mode = "cfg";
};

struct MetricReport {
    double subject_fidelity = 0.0;
    double prompt_fidelity = 0.0;
    std::vector<double> per_sample_subject;
    std::vector<double> per_sample_prompt;
    MetricEcho echo;

    std::string to_text() const;
};

MetricReport evaluate(const Mat &generated, const Mat &reference, int prompt_class, const MetricSuite &suite,
                      const MetricEcho &echo = {});

// Recontextualization: a subject of class k is rendered under [V] + the next class,
// (k + 1) mod num_classes, so prompt fidelity measures how far the adapters let the
// prompt override the subject's own class.
int recontext_class(int subject_class, int num_classes);

MetricReport evaluate_recontext(const DenoiserParams &base, const LoraAdapterSet *adapters, const Mat &reference,
                                int subject_class, int num_classes, const MetricSuite &suite,
                                const GuidanceConfig &g, const NoiseSchedule &sched, int n, std::uint64_t seed);

struct SweepRow {
    double kappa = 0.0;
    double subject_fidelity = 0.0;
    double prompt_fidelity = 0.0;
};

struct SweepSystem {
    const DenoiserParams *base = nullptr;
    const LoraAdapterSet *adapters = nullptr;
    const NoiseSchedule *sched = nullptr;
    const MetricSuite *metrics = nullptr;
    Mat reference; // subject images, pixel space
};

struct SweepPrompts {
    PromptSpec subject; // c_S, contains [V]
    PromptSpec generic; // c_G
    int target_class = 0;
};

// hmcfg sampling at each kappa with a shared seed; `g` supplies w and steps.
std::vector<SweepRow> kappa_sweep(const SweepSystem &system, std::span<const double> kappas,
                                  const SweepPrompts &prompts, const GuidanceConfig &g, int n, std::uint64_t seed);

std::string sweep_csv(std::span<const SweepRow> rows);

// Rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

} // namespace hld

#include "hld/metrics.hpp"
#include "hld/rng.hpp"
#include "hld/toy_data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace hld;

namespace {

const MetricSuite &shared_suite() {
    static const MetricSuite suite = [] {
        MetricSuiteConfig cfg;
        cfg.center_per_class = 32;
        cfg.seed = 3;
        cfg.probe.steps = 800;
        return make_metric_suite(cfg);
    }();
    return suite;
}

double cosine(const Vec &a, const Vec &b) { return a.dot(b) / (a.norm() * b.norm()); }

} // namespace

TEST(SubjectFidelity, MatchesExplicitCosine) {
    const FeatureProjection &proj = shared_suite().projection;
    const Mat ref = gen_subject_images({0, 1}, 5, 2);
    const Mat gen = gen_subject_images({0, 1}, 3, 9);
    Vec centroid = Vec::Zero(proj.P.rows());
    for (Eigen::Index j = 0; j < ref.cols(); ++j) {
        centroid += proj.P * (ref.col(j) - proj.center);
    }
    centroid /= static_cast<double>(ref.cols());
    const auto per = subject_fidelity_per_sample(gen, ref, proj);
    double mean = 0.0;
    for (Eigen::Index j = 0; j < gen.cols(); ++j) {
        const double want = cosine(proj.P * (gen.col(j) - proj.center), centroid);
        EXPECT_NEAR(per[static_cast<std::size_t>(j)], want, 1e-12);
        mean += want / static_cast<double>(gen.cols());
    }
    EXPECT_NEAR(subject_fidelity(gen, ref, proj), mean, 1e-12);
}

TEST(SubjectFidelity, IdentityAndReflection) {
    const FeatureProjection &proj = shared_suite().projection;
    const Mat ref = gen_subject_images({2, 4}, 1, 1);
    EXPECT_NEAR(subject_fidelity(ref, ref, proj), 1.0, 1e-12);
    const Mat mirrored = (2.0 * proj.center) - ref.col(0);
    EXPECT_NEAR(subject_fidelity(mirrored, ref, proj), -1.0, 1e-12);
}

TEST(SubjectFidelity, ReferenceOrderDoesNotMatter) {
    const FeatureProjection &proj = shared_suite().projection;
    const Mat ref = gen_subject_images({1, 8}, 6, 3);
    Mat reversed = ref.rowwise().reverse();
    const Mat gen = gen_subject_images({1, 8}, 4, 4);
    EXPECT_NEAR(subject_fidelity(gen, ref, proj), subject_fidelity(gen, reversed, proj), 1e-12);
    EXPECT_THROW(subject_fidelity(Mat(kImageDim, 0), ref, proj), UsageError);
}

TEST(SubjectFidelity, SameSubjectScoresAboveOtherClass) {
    const FeatureProjection &proj = shared_suite().projection;
    const Mat ref = gen_subject_images({0, 5}, 8, 1);
    const double same = subject_fidelity(gen_subject_images({0, 5}, 16, 2), ref, proj);
    const double other = subject_fidelity(gen_class_prior(2, 16, 2), ref, proj);
    EXPECT_GT(same, 0.9);
    EXPECT_LT(other, same - 0.3);
}

TEST(Probe, ClassifiesHeldOutPriorImages) {
    const Probe &p = *shared_suite().probe;
    EXPECT_GT(p.val_accuracy, 0.95);
    for (int k = 0; k < 4; ++k) {
        EXPECT_GT(prompt_fidelity(gen_class_prior(k, 32, 1234), k, p), 0.8) << "class " << k;
    }
}

TEST(Probe, UniformNoiseIsNearChance) {
    const Probe &p = *shared_suite().probe;
    Rng rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Mat noise(kImageDim, 64);
    for (Eigen::Index i = 0; i < noise.size(); ++i) {
        noise.data()[i] = u(rng);
    }
    for (int k = 0; k < 4; ++k) {
        EXPECT_NEAR(prompt_fidelity(noise, k, p), 0.25, 0.1) << "class " << k;
    }
}

TEST(Probe, ProbabilitiesAreSoftmax) {
    const Probe &p = *shared_suite().probe;
    const Mat probs = probe_probabilities(p, gen_class_prior(3, 10, 6));
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
        EXPECT_NEAR(probs.col(j).sum(), 1.0, 1e-12);
        EXPECT_GE(probs.col(j).minCoeff(), 0.0);
    }
    EXPECT_THROW(prompt_fidelity(gen_class_prior(0, 2, 1), 4, p), UsageError);
}

TEST(MetricFile, RoundTripPreservesScores) {
    const MetricSuite &s = shared_suite();
    const auto bytes = serialize_metric_suite(s);
    const MetricSuite back = deserialize_metric_suite(bytes);
    EXPECT_EQ(serialize_metric_suite(back), bytes);
    EXPECT_DOUBLE_EQ(back.probe->val_accuracy, s.probe->val_accuracy);
    const Mat gen = gen_class_prior(1, 8, 77);
    const Mat ref = gen_subject_images({1, 2}, 4, 1);
    EXPECT_NEAR(subject_fidelity(gen, ref, back.projection), subject_fidelity(gen, ref, s.projection), 1e-5);
    EXPECT_NEAR(prompt_fidelity(gen, 1, *back.probe), prompt_fidelity(gen, 1, *s.probe), 1e-4);

    auto bad = bytes;
    bad[bad.size() / 2] ^= 0x10;
    EXPECT_THROW(deserialize_metric_suite(bad), FormatError);
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 1);
    EXPECT_THROW(deserialize_metric_suite(cut), FormatError);
}

TEST(Report, TextCarriesEchoAndPerSample) {
    const MetricSuite &s = shared_suite();
    MetricEcho echo;
    echo.kappa = 1.2;
    echo.w = 6.5;
    echo.steps = 30;
    echo.seed = 42;
    echo.mode = "hmcfg";
    const MetricReport r = evaluate(gen_class_prior(0, 3, 1), gen_subject_images({0, 1}, 2, 1), 0, s, echo);
    const std::string text = r.to_text();
    EXPECT_NE(text.find("guidance_scale: 7.5\n"), std::string::npos);
    EXPECT_NE(text.find("kappa: 1.2\n"), std::string::npos);
    EXPECT_NE(text.find("mode: hmcfg\n"), std::string::npos);
    EXPECT_NE(text.find("seed: 42\n"), std::string::npos);
    EXPECT_NE(text.find("index,subject_fidelity,prompt_fidelity\n"), std::string::npos);
    EXPECT_EQ(r.per_sample_prompt.size(), 3u);
}

TEST(Recontext, NextClassWraps) {
    EXPECT_EQ(recontext_class(0, 4), 1);
    EXPECT_EQ(recontext_class(3, 4), 0);
    EXPECT_THROW(recontext_class(4, 4), UsageError);
}

TEST(Spearman, Examples) {
    const std::vector<double> k{0.4, 0.8, 1.0, 1.2, 1.6};
    const std::vector<double> up{0.1, 0.2, 0.3, 0.4, 0.5};
    const std::vector<double> down{5, 4, 3, 2, 1};
    const std::vector<double> mixed{1, 3, 2, 5, 4};
    EXPECT_DOUBLE_EQ(spearman(k, up), 1.0);
    EXPECT_DOUBLE_EQ(spearman(k, down), -1.0);
    // 1 - 6 sum d^2 / (n (n^2 - 1)) with d = (0, 1, 1, 1, 1).
    EXPECT_NEAR(spearman(k, mixed), 1.0 - 6.0 * 4.0 / (5.0 * 24.0), 1e-12);
    const std::vector<double> ties{1, 1, 2};
    const std::vector<double> lin{1, 2, 3};
    // Ranks (1.5, 1.5, 3) against (1, 2, 3).
    EXPECT_NEAR(spearman(ties, lin), 1.5 / std::sqrt(1.5 * 2.0), 1e-12);
    const std::vector<double> flat{2, 2, 2};
    EXPECT_TRUE(std::isnan(spearman(flat, lin)));
    EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), UsageError);
}

TEST(KappaSweep, RowsAndDuplicates) {
    const DenoiserParams base = init_denoiser(DenoiserConfig{kImageDim, 8, 8, 16, 20}, 1);
    const LoraAdapterSet ad = new_adapter_set(base.target_shapes(), 1, LoraInit::b_zero_a_random, 2);
    const NoiseSchedule sched = make_schedule(ScheduleKind::linear, 20, 1e-3, 0.2);
    SweepSystem sys{&base, &ad, &sched, &shared_suite(), gen_subject_images({0, 1}, 2, 1)};
    const SweepPrompts prompts{make_prompt(1, true), make_prompt(1, false), 1};
    GuidanceConfig g;
    g.w = 1.0;
    g.steps = 4;
    const std::vector<double> one{1.0};
    EXPECT_EQ(kappa_sweep(sys, one, prompts, g, 3, 5).size(), 1u);
    const std::vector<double> dup{0.5, 0.5};
    const auto rows = kappa_sweep(sys, dup, prompts, g, 3, 5);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].subject_fidelity, rows[1].subject_fidelity);
    EXPECT_EQ(rows[0].prompt_fidelity, rows[1].prompt_fidelity);
    const std::string csv = sweep_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "kappa,subject_fidelity,prompt_fidelity");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    const std::vector<double> bad{2.5};
    EXPECT_THROW(kappa_sweep(sys, bad, prompts, g, 3, 5), UsageError);
}

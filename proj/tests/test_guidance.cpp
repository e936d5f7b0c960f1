#include "hld/guidance.hpp"
#include "hld/oracle.hpp"
#include "hld/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>

using namespace hld;

namespace {

bool bitwise_equal(const Mat &a, const Mat &b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

DenoiserParams small_denoiser(std::uint64_t seed) {
    DenoiserParams p = init_denoiser(DenoiserConfig{4, 6, 8, 8, 50}, seed);
    Rng rng(seed + 1);
    p.for_each([&](const char *, Mat &m) { m += 0.2 * randn(m.rows(), m.cols(), rng); });
    return p;
}

const NoiseSchedule kSched50 = make_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);

} // namespace

TEST(CfgEps, Examples) {
    Rng rng(1);
    const Mat c = randn(3, 2, rng), u = randn(3, 2, rng);
    EXPECT_TRUE(bitwise_equal(cfg_eps(c, u, 0.0), u + (c - u)));
    EXPECT_LT((cfg_eps(c, u, 0.0) - c).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((cfg_eps(c, c, 4.2) - c).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_DOUBLE_EQ(cfg_eps(Mat::Ones(1, 1), Mat::Zero(1, 1), 1.5)(0, 0), 2.5);
    EXPECT_THROW(cfg_eps(c, Mat::Zero(2, 2), 1.0), UsageError);
}

TEST(HmcfgEps, Examples) {
    EXPECT_DOUBLE_EQ(hmcfg_eps(Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1), 1.0, 1.0)(0, 0), 4.0);
    Rng rng(2);
    const Mat a = randn(4, 3, rng), b = randn(4, 3, rng), n = randn(4, 3, rng);
    const Mat k2 = hmcfg_eps(a, b, n, 2.0, 2.0);
    EXPECT_LT((k2 - (n + 3.0 * (2.0 * a - 2.0 * n))).cwiseAbs().maxCoeff(), 1e-14);
    for (double kappa : {0.0, 0.3, 1.0, 1.7, 2.0}) {
        EXPECT_LT((hmcfg_eps(a, a, a, 5.5, kappa) - a).cwiseAbs().maxCoeff(), 1e-13);
    }
    EXPECT_THROW(hmcfg_eps(a, b, n, 1.0, 2.5), UsageError);
    EXPECT_THROW(hmcfg_eps(a, b, n, 1.0, -0.1), UsageError);
    EXPECT_THROW(hmcfg_eps(a, Mat::Zero(1, 1), n, 1.0, 1.0), UsageError);
}

TEST(HmcfgEps, CollapsesToDoubledCfg) {
    Rng rng(3);
    std::uniform_real_distribution<double> w_dist(0.0, 10.0);
    for (int i = 0; i < 200; ++i) {
        const Mat c = randn(5, 2, rng), n = randn(5, 2, rng);
        const double w = w_dist(rng);
        const Mat h = hmcfg_eps(c, c, n, w, 1.0);
        const Mat f = cfg_eps(c, n, 2.0 * (w + 1.0) - 1.0);
        EXPECT_LT((h - f).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, f.cwiseAbs().maxCoeff()));
    }
}

TEST(HmcfgEps, AffineInKappa) {
    Rng rng(4);
    const Mat a = randn(3, 3, rng), b = randn(3, 3, rng), n = randn(3, 3, rng);
    const double w = 2.5;
    const double h = 0.25;
    const Mat slope = (hmcfg_eps(a, b, n, w, 1.0 + h) - hmcfg_eps(a, b, n, w, 1.0 - h)) / (2 * h);
    EXPECT_LT((slope - (w + 1.0) * (a - b)).cwiseAbs().maxCoeff(), 1e-12);
    const Mat mid = hmcfg_eps(a, b, n, w, 1.0);
    const Mat avg = 0.5 * (hmcfg_eps(a, b, n, w, 0.5) + hmcfg_eps(a, b, n, w, 1.5));
    EXPECT_LT((mid - avg).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GuidanceConfig, Validation) {
    GuidanceConfig g;
    EXPECT_DOUBLE_EQ(g.guidance_scale(), 7.5);
    EXPECT_EQ(g.steps, 30);
    g.kappa = 3.0;
    try {
        g.validate();
        FAIL() << "kappa 3 accepted";
    } catch (const UsageError &e) {
        EXPECT_STREQ(e.what(), "kappa out of [0,2]");
    }
    g = GuidanceConfig{};
    g.w = -0.5;
    EXPECT_THROW(g.validate(), UsageError);
    g = GuidanceConfig{};
    g.steps = 0;
    EXPECT_THROW(g.validate(), UsageError);
    EXPECT_EQ(parse_mode("hmcfg"), GuidanceMode::hmcfg);
    EXPECT_THROW(parse_mode("fancy"), UsageError);
}

TEST(GuidedSample, NoneModeRecoversGaussianMean) {
    const NoiseSchedule sched = make_schedule(ScheduleSpec{});
    GaussianSpec g{Vec(2), Mat::Identity(2, 2), 0};
    g.mu << 2.0, -1.0;
    const AnalyticEpsModel model({{1.0, g}}, sched);
    GuidanceConfig gc;
    gc.mode = GuidanceMode::none;
    gc.steps = 1000;
    const PromptSpec p{{kFirstClassToken}};
    const int n = 10000;
    const Mat x = guided_sample(model, model, p, p, gc, sched, 2, n, 42);
    const Vec mean = x.rowwise().mean();
    for (int d = 0; d < 2; ++d) {
        EXPECT_LT(std::abs(mean[d] - g.mu[d]), 3.0 / std::sqrt(double(n)));
    }
}

TEST(GuidedSample, ZeroAdapterHmcfgMatchesDoubledCfgBitwise) {
    const DenoiserParams p = small_denoiser(5);
    const LoraAdapterSet zero = new_adapter_set(p.target_shapes(), 3, LoraInit::zero);
    const PromptSpec c{{kSubjectToken, kFirstClassToken + 1}};
    GuidanceConfig h;
    h.mode = GuidanceMode::hmcfg;
    h.w = 6.5;
    h.kappa = 1.0;
    h.steps = 10;
    GuidanceConfig f = h;
    f.mode = GuidanceMode::cfg;
    f.w = 2.0 * (h.w + 1.0) - 1.0;
    const Mat a = guided_sample(p, &zero, c, c, h, kSched50, 6, 77);
    const Mat b = guided_sample(p, nullptr, c, c, f, kSched50, 6, 77);
    EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(GuidedSample, UnitScaleCfgEqualsNoGuidance) {
    const DenoiserParams p = small_denoiser(6);
    const PromptSpec c{{kFirstClassToken + 2}};
    GuidanceConfig f;
    f.mode = GuidanceMode::cfg;
    f.w = 0.0;
    f.steps = 12;
    GuidanceConfig none = f;
    none.mode = GuidanceMode::none;
    EXPECT_TRUE(bitwise_equal(guided_sample(p, nullptr, c, c, f, kSched50, 5, 3),
                              guided_sample(p, nullptr, c, c, none, kSched50, 5, 3)));
}

TEST(GuidedSample, SeededAndThreadCountInvariant) {
    const DenoiserParams p = small_denoiser(7);
    const PromptSpec c{{kFirstClassToken}};
    GuidanceConfig g;
    g.steps = 8;
    // 70 chains span several work blocks, so worker counts split them differently.
    setenv("HLD_THREADS", "1", 1);
    const Mat one = guided_sample(p, nullptr, c, c, g, kSched50, 70, 9);
    setenv("HLD_THREADS", "3", 1);
    const Mat three = guided_sample(p, nullptr, c, c, g, kSched50, 70, 9);
    setenv("HLD_THREADS", "8", 1);
    const Mat eight = guided_sample(p, nullptr, c, c, g, kSched50, 70, 9);
    unsetenv("HLD_THREADS");
    EXPECT_TRUE(bitwise_equal(one, three));
    EXPECT_TRUE(bitwise_equal(one, eight));
    EXPECT_TRUE(bitwise_equal(one, guided_sample(p, nullptr, c, c, g, kSched50, 70, 9)));
    EXPECT_FALSE(bitwise_equal(one, guided_sample(p, nullptr, c, c, g, kSched50, 70, 10)));
}

TEST(GuidedSample, HmcfgContract) {
    const DenoiserParams p = small_denoiser(8);
    const LoraAdapterSet zero = new_adapter_set(p.target_shapes(), 1, LoraInit::zero);
    GuidanceConfig g;
    g.mode = GuidanceMode::hmcfg;
    g.steps = 4;
    const PromptSpec cS{{kSubjectToken, kFirstClassToken}};
    const PromptSpec cG{{kFirstClassToken}};
    EXPECT_THROW(guided_sample(p, nullptr, cS, cG, g, kSched50, 2, 1), UsageError);
    EXPECT_THROW(guided_sample(p, &zero, cG, cG, g, kSched50, 2, 1), UsageError);
    EXPECT_NO_THROW(guided_sample(p, &zero, cS, cG, g, kSched50, 2, 1));
    setenv("HLD_THREADS", "zero", 1);
    EXPECT_THROW(worker_threads(), UsageError);
    unsetenv("HLD_THREADS");
}

TEST(ScoreIdentity, HoldsForAnyInputs) {
    const DenoiserParams p = small_denoiser(9);
    Rng rng(10);
    const LoraAdapterSet adapters = new_adapter_set(p.target_shapes(), 2, LoraInit::b_zero_a_random, 11);
    const DenoiserModel base(p);
    const DenoiserModel pers(p, &adapters);
    const PromptSpec cS{{kSubjectToken, kFirstClassToken}};
    const PromptSpec cG{{kFirstClassToken + 1}};
    std::uniform_int_distribution<int> t_dist(1, 50);
    std::uniform_real_distribution<double> w_dist(0.0, 10.0);
    std::uniform_real_distribution<double> k_dist(0.0, 2.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double w = i == 0 ? 0.0 : w_dist(rng);
        worst = std::max(worst, hmcfg_score_identity_check(randn(4, 2, rng), t_dist(rng), pers, base, cS, cG, w,
                                                           k_dist(rng), kSched50));
    }
    EXPECT_LT(worst, 1e-10);
}

TEST(SampleFile, RoundTripAndLayout) {
    Rng rng(12);
    const Mat s = randn(6, 4, rng).cast<float>().cast<double>();
    const std::uint32_t shape[] = {2, 3};
    const auto bytes = encode_samples(s, shape);
    ASSERT_EQ(bytes.size(), 4u + 2 + 4 + 3 * 4 + 24 * 4);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HSMP");
    std::vector<std::uint32_t> got_shape;
    const Mat back = decode_samples(bytes, &got_shape);
    EXPECT_EQ(got_shape, (std::vector<std::uint32_t>{4, 2, 3}));
    EXPECT_TRUE(bitwise_equal(back, s));
    // Row-major: sample 0 occupies the first six floats.
    float v = 0.0f;
    std::memcpy(&v, bytes.data() + 22 + 4, 4);
    EXPECT_EQ(v, static_cast<float>(s(1, 0)));
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(decode_samples(truncated), FormatError);
    auto magic = bytes;
    magic[1] = 'X';
    EXPECT_THROW(decode_samples(magic), FormatError);
    const std::uint32_t wrong[] = {5};
    EXPECT_THROW(encode_samples(s, wrong), UsageError);
}

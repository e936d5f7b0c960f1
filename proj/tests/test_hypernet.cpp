#include "hld/hypernet.hpp"
#include "hld/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hld;

namespace {

HypernetConfig tiny_config(int iterations = 1) {
    HypernetConfig c;
    c.image_dim = 3;
    c.feature = 3;
    c.rank = 2;
    c.iterations = iterations;
    c.targets = {{Target::W_Q, 3, 2}, {Target::W_K, 2, 2}, {Target::W_V, 2, 3}};
    return c;
}

HypernetParams random_params(std::uint64_t seed, int iterations = 1) {
    HypernetParams p = init_hypernet(tiny_config(iterations), seed);
    Rng rng(seed + 1);
    p.for_each([&](const std::string &, Mat &m) { m += 0.5 * randn(m.rows(), m.cols(), rng); });
    return p;
}

double s(double u) { return u / (1.0 + std::exp(-u)); }

} // namespace

TEST(EncodeImage, Deterministic) {
    const HypernetParams p = random_params(1);
    Vec x(3);
    x << 0.1, 0.7, 0.3;
    EXPECT_EQ(encode_image(x, p), encode_image(x, p));
}

TEST(EncodeImage, ZeroWeightsGiveBias) {
    HypernetParams p = random_params(2);
    p.enc_W1.setZero();
    p.enc_W2.setZero();
    Vec x(3);
    x << 0.4, 0.2, 0.9;
    EXPECT_EQ(encode_image(x, p), p.enc_b2.col(0));
}

TEST(EncodeImage, JacobianMatchesCentralDifferences) {
    const HypernetParams p = random_params(3);
    Vec x(3);
    x << 0.3, -0.4, 0.8;
    // Analytic Jacobian of W2 silu(W1 x + b1) + b2.
    const Vec pre = p.enc_W1 * x + p.enc_b1.col(0);
    Mat J = Mat::Zero(3, 3);
    for (int k = 0; k < 3; ++k) {
        const double sig = 1.0 / (1.0 + std::exp(-pre[k]));
        const double ds = sig * (1 + pre[k] * (1 - sig));
        J += ds * p.enc_W2.col(k) * p.enc_W1.row(k);
    }
    const double h = 1e-6;
    double worst = 0.0;
    for (int j = 0; j < 3; ++j) {
        Vec up = x, dn = x;
        up[j] += h;
        dn[j] -= h;
        const Vec fd = (encode_image(up, p) - encode_image(dn, p)) / (2 * h);
        for (int i = 0; i < 3; ++i) {
            worst = std::max(worst, std::abs(fd[i] - J(i, j)) / std::max({std::abs(fd[i]), std::abs(J(i, j)), 1e-8}));
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(EncodeImage, ShapeMismatch) {
    const HypernetParams p = random_params(4);
    EXPECT_THROW(encode_image(Vec(Vec::Zero(4)), p), UsageError);
}

TEST(DecodeWeights, ZeroHeadsGiveZeroSet) {
    HypernetParams p = random_params(5);
    for (auto &m : p.head_W) {
        m.setZero();
    }
    for (auto &m : p.head_b) {
        m.setZero();
    }
    const LoraAdapterSet out = decode_weights(Vec::Constant(3, 0.5), p);
    EXPECT_EQ(adapter_sq_norm(out), 0.0);
    EXPECT_EQ(out.rank(), 2);
}

TEST(DecodeWeights, ParameterCount) {
    const HypernetParams p = random_params(6);
    const LoraAdapterSet out = decode_weights(Vec::Constant(3, -0.2), p);
    std::size_t want = 0;
    for (const auto &ts : p.config.targets) {
        want += 2 * static_cast<std::size_t>(ts.d_in + ts.d_out);
    }
    EXPECT_EQ(out.parameter_count(), want);
    EXPECT_EQ(p.output_size(), want);
}

TEST(DecodeWeights, ReshapeFollowsHeadOrder) {
    const HypernetParams p = random_params(7, 2);
    Vec feat(3);
    feat << 0.2, -0.9, 0.4;
    // Trunk by hand, iterated twice.
    Vec z = feat;
    for (int it = 0; it < 2; ++it) {
        Vec a = p.dec_W1 * z + p.dec_b1.col(0);
        for (auto &v : a) {
            v = s(v);
        }
        Vec b = p.dec_W2 * a + p.dec_b2.col(0);
        for (auto &v : b) {
            v = s(v);
        }
        z = b;
    }
    const LoraAdapterSet out = decode_weights(feat, p);
    for (std::size_t h = 0; h < p.head_W.size(); ++h) {
        const Vec head = p.head_W[h] * z + p.head_b[h].col(0);
        const TargetShape &ts = p.config.targets[h];
        const LoraEntry &e = out.at(ts.target);
        int k = 0;
        for (int i = 0; i < ts.d_out; ++i) {
            for (int j = 0; j < 2; ++j) {
                EXPECT_NEAR(e.B(i, j), head[k++], 1e-14);
            }
        }
        for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < ts.d_in; ++j) {
                EXPECT_NEAR(e.A(i, j), head[k++], 1e-14);
            }
        }
    }
}

TEST(Init, PredictedUpdateStartsAtZero) {
    HypernetConfig c = tiny_config();
    const HypernetParams p = init_hypernet(c, 8);
    const LoraAdapterSet out = decode_weights(Vec::Constant(3, 0.3), p);
    for (const auto &[t, e] : out.entries()) {
        EXPECT_TRUE(e.B.isZero(0.0));
        EXPECT_TRUE(adapter_delta(e).isZero(0.0));
    }
}

TEST(Predict, SingleImageIsDecodeOfEncode) {
    const HypernetParams p = random_params(9);
    Vec x(3);
    x << 0.5, 0.1, 0.6;
    const std::vector<Vec> one{x};
    EXPECT_LT((predict(one, p).flatten() - decode_weights(encode_image(x, p), p).flatten()).cwiseAbs().maxCoeff(),
              1e-14);
}

TEST(Predict, DuplicateAndDistinctImages) {
    const HypernetParams p = random_params(10);
    Vec x(3), y(3);
    x << 0.5, 0.1, 0.6;
    y << 0.9, 0.0, 0.2;
    const std::vector<Vec> once{x};
    const std::vector<Vec> twice{x, x};
    EXPECT_LT((predict(twice, p).flatten() - predict(once, p).flatten()).cwiseAbs().maxCoeff(), 1e-14);

    const Vec fx = decode_weights(encode_image(x, p), p).flatten();
    const Vec fy = decode_weights(encode_image(y, p), p).flatten();
    const std::vector<Vec> xy{x, y};
    const std::vector<Vec> yx{y, x};
    EXPECT_LT((predict(xy, p).flatten() - 0.5 * (fx + fy)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((predict(yx, p).flatten() - predict(xy, p).flatten()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE(predict(xy, p).flatten().norm(), std::max(fx.norm(), fy.norm()) + 1e-12);
    EXPECT_THROW(predict(std::span<const Vec>{}, p), UsageError);
}

TEST(Unflatten, InvertsFlatten) {
    const HypernetParams p = random_params(11);
    Rng rng(12);
    const Vec v = randn(static_cast<Eigen::Index>(p.output_size()), 1, rng).col(0);
    EXPECT_EQ(unflatten_adapters(v, p.config.targets, 2).flatten(), v);
    EXPECT_THROW(unflatten_adapters(Vec::Zero(3), p.config.targets, 2), UsageError);
}

TEST(Backward, SqNormOfPredictMatchesFiniteDifferences) {
    HypernetParams p = random_params(13, 2);
    Rng rng(14);
    const Mat images = randn(3, 2, rng);
    auto value = [&](const HypernetParams &q) {
        const std::vector<Vec> imgs{images.col(0), images.col(1)};
        return adapter_sq_norm(predict(imgs, q));
    };
    HypernetTape tape;
    const auto per = hypernet_forward(p, images, &tape);
    const LoraAdapterSet mean = average_adapters(per);
    // d/d(per-image output) of ||mean||^2 = 2 mean / N.
    const std::vector<LoraAdapterSet> d_out(2, mean.scaled(1.0));
    HypernetParams g = p.zeros_like();
    hypernet_backward(p, tape, d_out, g);

    const double h = 1e-6;
    double worst = 0.0;
    std::vector<Mat *> gs;
    g.for_each([&](const std::string &, Mat &m) { gs.push_back(&m); });
    std::size_t gi = 0;
    p.for_each([&](const std::string &, Mat &m) {
        const Mat &gm = *gs[gi++];
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double keep = m.data()[i];
            m.data()[i] = keep + h;
            const double up = value(p);
            m.data()[i] = keep - h;
            const double dn = value(p);
            m.data()[i] = keep;
            const double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(fd - gm.data()[i]) / std::max({std::abs(fd), std::abs(gm.data()[i]), 1e-6}));
        }
    });
    EXPECT_LT(worst, 1e-4);
}

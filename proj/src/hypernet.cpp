#include "hld/hypernet.hpp"

#include <cmath>
#include <random>

namespace hld {

namespace {

void fill_normal(Mat &m, std::mt19937_64 &rng, double stddev) {
    std::normal_distribution<double> normal(0.0, stddev);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            m(i, j) = normal(rng);
        }
    }
}

Mat silu_of(const Mat &m) { return m.unaryExpr([](double v) { return silu(v); }); }

Mat silu_grad_of(const Mat &m) { return m.unaryExpr([](double v) { return silu_grad(v); }); }

Eigen::Index head_size(const TargetShape &ts, int rank) {
    return static_cast<Eigen::Index>(rank) * (ts.d_in + ts.d_out);
}

} // namespace

std::size_t HypernetParams::output_size() const {
    std::size_t n = 0;
    for (const auto &ts : config.targets) {
        n += static_cast<std::size_t>(head_size(ts, config.rank));
    }
    return n;
}

HypernetParams HypernetParams::zeros_like() const {
    HypernetParams z = *this;
    z.for_each([](const auto &, Mat &m) { m.setZero(); });
    return z;
}

HypernetParams init_hypernet(const HypernetConfig &cfg, std::uint64_t seed) {
    require(cfg.image_dim >= 1 && cfg.feature >= 1, "hypernet widths must be positive");
    require(cfg.rank >= 1, "hypernet rank must be >= 1");
    require(cfg.iterations >= 1, "hypernet iterations must be >= 1");
    require(!cfg.targets.empty(), "hypernet needs at least one target");
    std::mt19937_64 rng(seed);
    const int f = cfg.feature;
    const double sd = 1.0 / std::sqrt(static_cast<double>(f));
    HypernetParams p;
    p.config = cfg;
    p.enc_W1 = Mat(f, cfg.image_dim);
    fill_normal(p.enc_W1, rng, 1.0 / std::sqrt(static_cast<double>(cfg.image_dim)));
    p.enc_b1 = Mat::Zero(f, 1);
    p.enc_W2 = Mat(f, f);
    fill_normal(p.enc_W2, rng, sd);
    p.enc_b2 = Mat::Zero(f, 1);
    p.dec_W1 = Mat(f, f);
    fill_normal(p.dec_W1, rng, sd);
    p.dec_b1 = Mat::Zero(f, 1);
    p.dec_W2 = Mat(f, f);
    fill_normal(p.dec_W2, rng, sd);
    p.dec_b2 = Mat::Zero(f, 1);
    for (const auto &ts : cfg.targets) {
        const Eigen::Index n = head_size(ts, cfg.rank);
        const Eigen::Index b_part = static_cast<Eigen::Index>(ts.d_out) * cfg.rank;
        Mat W = Mat::Zero(n, f);
        Mat b = Mat::Zero(n, 1);
        Mat a_rows(n - b_part, f);
        fill_normal(a_rows, rng, cfg.a_init_std * sd);
        W.bottomRows(n - b_part) = a_rows;
        Mat a_bias(n - b_part, 1);
        fill_normal(a_bias, rng, cfg.a_init_std);
        b.bottomRows(n - b_part) = a_bias;
        p.head_W.push_back(std::move(W));
        p.head_b.push_back(std::move(b));
    }
    return p;
}

Mat encode_image(const Mat &images, const HypernetParams &params) {
    require(images.rows() == params.config.image_dim,
            "encode_image: image has " + std::to_string(images.rows()) + " values, expected " +
                std::to_string(params.config.image_dim));
    Mat pre = params.enc_W1 * images;
    pre.colwise() += params.enc_b1.col(0);
    Mat feat = params.enc_W2 * silu_of(pre);
    feat.colwise() += params.enc_b2.col(0);
    return feat;
}

Vec encode_image(const Vec &image, const HypernetParams &params) {
    return encode_image(Mat(image), params).col(0);
}

LoraAdapterSet unflatten_adapters(const Vec &flat, std::span<const TargetShape> targets, int rank) {
    LoraAdapterSet set;
    Eigen::Index k = 0;
    for (const auto &ts : targets) {
        LoraEntry e{Mat(rank, ts.d_in), Mat(ts.d_out, rank)};
        require(k + head_size(ts, rank) <= flat.size(), "unflatten_adapters: vector too short");
        for (Eigen::Index i = 0; i < e.B.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.B.cols(); ++j) {
                e.B(i, j) = flat[k++];
            }
        }
        for (Eigen::Index i = 0; i < e.A.rows(); ++i) {
            for (Eigen::Index j = 0; j < e.A.cols(); ++j) {
                e.A(i, j) = flat[k++];
            }
        }
        set.insert(ts.target, std::move(e));
    }
    require(k == flat.size(), "unflatten_adapters: vector length does not match targets");
    return set;
}

namespace {

Mat trunk_forward(const HypernetParams &params, const Mat &feat, HypernetTape *tape) {
    Mat z = feat;
    for (int it = 0; it < params.config.iterations; ++it) {
        Mat pre1 = params.dec_W1 * z;
        pre1.colwise() += params.dec_b1.col(0);
        Mat h1 = silu_of(pre1);
        Mat pre2 = params.dec_W2 * h1;
        pre2.colwise() += params.dec_b2.col(0);
        Mat next = silu_of(pre2);
        if (tape != nullptr) {
            tape->trunk_in.push_back(std::move(z));
            tape->trunk_pre1.push_back(std::move(pre1));
            tape->trunk_h1.push_back(std::move(h1));
            tape->trunk_pre2.push_back(std::move(pre2));
        }
        z = std::move(next);
    }
    return z;
}

Mat heads_forward(const HypernetParams &params, const Mat &z) {
    Mat out(static_cast<Eigen::Index>(params.output_size()), z.cols());
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < params.head_W.size(); ++i) {
        const Eigen::Index n = params.head_W[i].rows();
        out.middleRows(off, n) = params.head_W[i] * z;
        out.middleRows(off, n).colwise() += params.head_b[i].col(0);
        off += n;
    }
    return out;
}

} // namespace

LoraAdapterSet decode_weights(const Vec &feature, const HypernetParams &params) {
    require(feature.size() == params.config.feature, "decode_weights: feature width mismatch");
    const Mat z = trunk_forward(params, Mat(feature), nullptr);
    const Mat out = heads_forward(params, z);
    return unflatten_adapters(out.col(0), params.config.targets, params.config.rank);
}

std::vector<LoraAdapterSet> hypernet_forward(const HypernetParams &params, const Mat &images, HypernetTape *tape) {
    require(images.rows() == params.config.image_dim, "hypernet: image size mismatch");
    Mat pre = params.enc_W1 * images;
    pre.colwise() += params.enc_b1.col(0);
    Mat h1 = silu_of(pre);
    Mat feat = params.enc_W2 * h1;
    feat.colwise() += params.enc_b2.col(0);
    if (tape != nullptr) {
        *tape = HypernetTape{};
        tape->x = images;
        tape->enc_pre1 = std::move(pre);
        tape->enc_h1 = std::move(h1);
        tape->feature = feat;
    }
    Mat z = trunk_forward(params, feat, tape);
    const Mat out = heads_forward(params, z);
    if (tape != nullptr) {
        tape->z = std::move(z);
    }
    std::vector<LoraAdapterSet> sets;
    sets.reserve(static_cast<std::size_t>(images.cols()));
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
        sets.push_back(unflatten_adapters(out.col(j), params.config.targets, params.config.rank));
    }
    return sets;
}

void hypernet_backward(const HypernetParams &params, const HypernetTape &tape,
                       std::span<const LoraAdapterSet> d_outputs, HypernetParams &grads) {
    const Eigen::Index N = tape.z.cols();
    require(static_cast<Eigen::Index>(d_outputs.size()) == N, "hypernet_backward: one gradient per image required");
    Mat d_out(static_cast<Eigen::Index>(params.output_size()), N);
    for (Eigen::Index j = 0; j < N; ++j) {
        d_out.col(j) = d_outputs[j].flatten();
    }
    Mat dz = Mat::Zero(tape.z.rows(), N);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < params.head_W.size(); ++i) {
        const Eigen::Index n = params.head_W[i].rows();
        const auto block = d_out.middleRows(off, n);
        grads.head_W[i].noalias() += block * tape.z.transpose();
        grads.head_b[i] += block.rowwise().sum();
        dz.noalias() += params.head_W[i].transpose() * block;
        off += n;
    }
    for (int it = params.config.iterations - 1; it >= 0; --it) {
        const Mat dpre2 = dz.cwiseProduct(silu_grad_of(tape.trunk_pre2[it]));
        grads.dec_W2.noalias() += dpre2 * tape.trunk_h1[it].transpose();
        grads.dec_b2 += dpre2.rowwise().sum();
        const Mat dh1 = params.dec_W2.transpose() * dpre2;
        const Mat dpre1 = dh1.cwiseProduct(silu_grad_of(tape.trunk_pre1[it]));
        grads.dec_W1.noalias() += dpre1 * tape.trunk_in[it].transpose();
        grads.dec_b1 += dpre1.rowwise().sum();
        dz = params.dec_W1.transpose() * dpre1;
    }
    const Mat &dfeat = dz;
    grads.enc_W2.noalias() += dfeat * tape.enc_h1.transpose();
    grads.enc_b2 += dfeat.rowwise().sum();
    const Mat dh = params.enc_W2.transpose() * dfeat;
    const Mat dpre = dh.cwiseProduct(silu_grad_of(tape.enc_pre1));
    grads.enc_W1.noalias() += dpre * tape.x.transpose();
    grads.enc_b1 += dpre.rowwise().sum();
}

LoraAdapterSet predict(std::span<const Vec> images, const HypernetParams &params) {
    require(!images.empty(), "predict: image list is empty");
    Mat cols(params.config.image_dim, static_cast<Eigen::Index>(images.size()));
    for (std::size_t i = 0; i < images.size(); ++i) {
        require(images[i].size() == params.config.image_dim, "predict: image size mismatch");
        cols.col(static_cast<Eigen::Index>(i)) = images[i];
    }
    const auto sets = hypernet_forward(params, cols);
    return average_adapters(sets);
}

} // namespace hld

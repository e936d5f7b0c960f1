#include "hld/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

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

Mat gather_columns(const Mat &m, const std::vector<int> &cols) {
    Mat out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) {
        out.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
    }
    return out;
}

const LoraEntry *entry_for(const DenoiseBatch &batch, Eigen::Index b, Target t) {
    if (batch.adapters.empty() || batch.adapters[b] == nullptr) {
        return nullptr;
    }
    return batch.adapters[b]->find(t);
}

void validate(const DenoiserParams &params, const DenoiseBatch &batch) {
    const auto &cfg = params.config;
    const auto B = static_cast<std::size_t>(batch.x.cols());
    require(batch.x.rows() == cfg.data_dim,
            "denoise: input has " + std::to_string(batch.x.rows()) + " rows, expected " +
                std::to_string(cfg.data_dim));
    require(batch.t.size() == B, "denoise: one step index per column required");
    require(batch.prompts.size() == B, "denoise: one prompt per column required");
    require(batch.adapters.empty() || batch.adapters.size() == B, "denoise: adapters must be empty or per column");
    for (int t : batch.t) {
        require(t >= 1 && t <= cfg.T, "denoise: step index out of range: " + std::to_string(t));
    }
    for (const auto &p : batch.prompts) {
        require(!p.tokens.empty(), "denoise: prompt has no tokens");
        for (int tok : p.tokens) {
            require(tok >= 0 && tok < cfg.vocab, "denoise: unknown token index " + std::to_string(tok));
        }
    }
    const LoraAdapterSet *last = nullptr;
    for (const auto *a : batch.adapters) {
        if (a != nullptr && a != last) {
            check_adapters(params, *a);
            last = a;
        }
    }
}

} // namespace

bool PromptSpec::is_subject() const {
    return std::find(tokens.begin(), tokens.end(), kSubjectToken) != tokens.end();
}

const Mat &DenoiserParams::target(Target t) const {
    switch (t) {
    case Target::W_Q:
        return W_Q;
    case Target::W_K:
        return W_K;
    case Target::W_V:
        return W_V;
    }
    throw UsageError("unknown target");
}

Mat &DenoiserParams::target(Target t) {
    return const_cast<Mat &>(static_cast<const DenoiserParams &>(*this).target(t));
}

std::vector<TargetShape> DenoiserParams::target_shapes() const {
    std::vector<TargetShape> out;
    for (Target t : kAllTargets) {
        const Mat &w = target(t);
        out.push_back({t, static_cast<int>(w.rows()), static_cast<int>(w.cols())});
    }
    return out;
}

DenoiserParams DenoiserParams::zeros_like() const {
    DenoiserParams z = *this;
    z.for_each([](std::string_view, Mat &m) { m.setZero(); });
    return z;
}

DenoiserParams init_denoiser(const DenoiserConfig &cfg, std::uint64_t seed) {
    require(cfg.data_dim >= 1 && cfg.hidden >= 1 && cfg.mlp_hidden >= 1, "denoiser widths must be positive");
    require(cfg.vocab >= kFirstClassToken + 1, "denoiser vocabulary must hold [NULL], [V] and a class token");
    require(cfg.T >= 1, "denoiser needs T >= 1");
    std::mt19937_64 rng(seed);
    const int D = cfg.data_dim;
    const int d = cfg.hidden;
    const int m = cfg.mlp_hidden;
    DenoiserParams p;
    p.config = cfg;
    p.W_in = Mat(d, D);
    fill_normal(p.W_in, rng, 1.0 / std::sqrt(static_cast<double>(D)));
    p.b_in = Mat::Zero(d, 1);
    p.t_embed = Mat(d, cfg.T + 1);
    fill_normal(p.t_embed, rng, 0.5);
    p.tok_embed = Mat(d, cfg.vocab);
    fill_normal(p.tok_embed, rng, 1.0);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    p.W_Q = Mat(d, d);
    fill_normal(p.W_Q, rng, sd);
    p.W_K = Mat(d, d);
    fill_normal(p.W_K, rng, sd);
    p.W_V = Mat(d, d);
    fill_normal(p.W_V, rng, sd);
    p.W_O = Mat(d, d);
    fill_normal(p.W_O, rng, sd);
    p.W_1 = Mat(m, d);
    fill_normal(p.W_1, rng, sd);
    p.b_1 = Mat::Zero(m, 1);
    p.W_2 = Mat(d, m);
    fill_normal(p.W_2, rng, 1.0 / std::sqrt(static_cast<double>(m)));
    p.b_2 = Mat::Zero(d, 1);
    p.W_3 = Mat(m, d);
    fill_normal(p.W_3, rng, sd);
    p.b_3 = Mat::Zero(m, 1);
    p.W_4 = Mat(d, m);
    fill_normal(p.W_4, rng, 1.0 / std::sqrt(static_cast<double>(m)));
    p.b_4 = Mat::Zero(d, 1);
    p.W_out = Mat(D, d);
    fill_normal(p.W_out, rng, 0.1 * sd);
    p.b_out = Mat::Zero(D, 1);
    p.skip = Mat::Zero(1, cfg.T + 1);
    return p;
}

void check_adapters(const DenoiserParams &params, const LoraAdapterSet &adapters) {
    for (const auto &[t, e] : adapters.entries()) {
        const Mat &w = params.target(t);
        if (e.d_out() != w.rows() || e.d_in() != w.cols()) {
            throw UsageError("adapter for " + std::string(target_name(t)) + " is " + std::to_string(e.d_out()) + "x" +
                             std::to_string(e.d_in()) + " but the denoiser matrix is " + std::to_string(w.rows()) +
                             "x" + std::to_string(w.cols()));
        }
    }
}

Mat encode_prompt(const PromptSpec &prompt, const DenoiserParams &params) {
    require(!prompt.tokens.empty(), "encode_prompt: prompt has no tokens");
    for (int tok : prompt.tokens) {
        require(tok >= 0 && tok < params.config.vocab, "encode_prompt: unknown token index " + std::to_string(tok));
    }
    return gather_columns(params.tok_embed, prompt.tokens);
}

Mat denoiser_forward(const DenoiserParams &params, const DenoiseBatch &batch, DenoiserTape *tape) {
    validate(params, batch);
    const Eigen::Index B = batch.x.cols();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.config.hidden));

    Mat h0 = params.W_in * batch.x;
    for (Eigen::Index b = 0; b < B; ++b) {
        h0.col(b) += params.b_in.col(0) + params.t_embed.col(batch.t[b]);
    }
    Mat q = params.W_Q * h0;
    const Mat k_all = params.W_K * params.tok_embed;
    const Mat v_all = params.W_V * params.tok_embed;

    Mat c(h0.rows(), B);
    if (tape != nullptr) {
        tape->keys.assign(B, Mat());
        tape->values.assign(B, Mat());
        tape->embeds.assign(B, Mat());
        tape->attn.assign(B, Vec());
    }
    for (Eigen::Index b = 0; b < B; ++b) {
        if (const auto *e = entry_for(batch, b, Target::W_Q)) {
            q.col(b) += e->B * (e->A * h0.col(b));
        }
        const auto &toks = batch.prompts[b].tokens;
        Mat E = gather_columns(params.tok_embed, toks);
        Mat K = gather_columns(k_all, toks);
        Mat V = gather_columns(v_all, toks);
        if (const auto *e = entry_for(batch, b, Target::W_K)) {
            K += e->B * (e->A * E);
        }
        if (const auto *e = entry_for(batch, b, Target::W_V)) {
            V += e->B * (e->A * E);
        }
        Vec s = (K.transpose() * q.col(b)) * inv_sqrt_d;
        s.array() -= s.maxCoeff();
        Vec a = s.array().exp();
        a /= a.sum();
        c.col(b) = V * a;
        if (tape != nullptr) {
            tape->keys[b] = std::move(K);
            tape->values[b] = std::move(V);
            tape->embeds[b] = std::move(E);
            tape->attn[b] = std::move(a);
        }
    }
    Mat h1 = h0 + params.W_O * c;
    Mat u = params.W_1 * h1;
    u.colwise() += params.b_1.col(0);
    Mat h2 = h1 + params.W_2 * u.unaryExpr([](double v) { return silu(v); });
    h2.colwise() += params.b_2.col(0);
    Mat u2 = params.W_3 * h2;
    u2.colwise() += params.b_3.col(0);
    Mat h3 = h2 + params.W_4 * u2.unaryExpr([](double v) { return silu(v); });
    h3.colwise() += params.b_4.col(0);
    Mat y = params.W_out * h3;
    for (Eigen::Index b = 0; b < B; ++b) {
        y.col(b) += params.b_out.col(0) + params.skip(0, batch.t[b]) * batch.x.col(b);
    }
    if (tape != nullptr) {
        tape->h0 = std::move(h0);
        tape->q = std::move(q);
        tape->c = std::move(c);
        tape->h1 = std::move(h1);
        tape->u = std::move(u);
        tape->h2 = std::move(h2);
        tape->u2 = std::move(u2);
        tape->h3 = std::move(h3);
    }
    return y;
}

void denoiser_backward(const DenoiserParams &params, const DenoiseBatch &batch, const DenoiserTape &tape,
                       const Mat &dY, DenoiserParams *d_params, AdapterGrads *d_adapters) {
    const Eigen::Index B = batch.x.cols();
    require(dY.rows() == params.config.data_dim && dY.cols() == B, "denoiser_backward: gradient shape mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.config.hidden));

    auto adapter_grad = [&](Eigen::Index b, Target t) -> LoraEntry * {
        if (d_adapters == nullptr || batch.adapters.empty() || batch.adapters[b] == nullptr) {
            return nullptr;
        }
        const LoraAdapterSet *key = batch.adapters[b];
        if (key->find(t) == nullptr) {
            return nullptr;
        }
        auto it = d_adapters->find(key);
        if (it == d_adapters->end()) {
            it = d_adapters->emplace(key, key->scaled(0.0)).first;
        }
        return &it->second.at(t);
    };

    const Mat g = tape.u.unaryExpr([](double v) { return silu(v); });
    const Mat g2 = tape.u2.unaryExpr([](double v) { return silu(v); });
    const Mat dh3 = params.W_out.transpose() * dY;
    const Mat du2 = (params.W_4.transpose() * dh3).cwiseProduct(tape.u2.unaryExpr([](double v) { return silu_grad(v); }));
    Mat dh2 = dh3 + params.W_3.transpose() * du2;
    Mat dg = params.W_2.transpose() * dh2;
    Mat du = dg.cwiseProduct(tape.u.unaryExpr([](double v) { return silu_grad(v); }));
    Mat dh1 = dh2 + params.W_1.transpose() * du;
    Mat dc = params.W_O.transpose() * dh1;
    Mat dh0 = dh1;

    Mat dq(tape.q.rows(), B);
    Mat d_tok;
    if (d_params != nullptr) {
        d_tok = Mat::Zero(params.tok_embed.rows(), params.tok_embed.cols());
    }
    Mat dWk_tok = Mat::Zero(params.W_K.rows(), params.W_K.cols());
    Mat dWv_tok = Mat::Zero(params.W_V.rows(), params.W_V.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
        const Mat &K = tape.keys[b];
        const Mat &V = tape.values[b];
        const Mat &E = tape.embeds[b];
        const Vec &a = tape.attn[b];
        const Vec da = V.transpose() * dc.col(b);
        const Mat dV = dc.col(b) * a.transpose();
        Vec ds = a.cwiseProduct(da.array().matrix() - Vec::Constant(a.size(), a.dot(da)));
        ds *= inv_sqrt_d;
        dq.col(b) = K * ds;
        const Mat dK = tape.q.col(b) * ds.transpose();

        if (d_params != nullptr) {
            dWk_tok.noalias() += dK * E.transpose();
            dWv_tok.noalias() += dV * E.transpose();
        }
        Mat dE;
        if (d_params != nullptr) {
            dE = params.W_K.transpose() * dK + params.W_V.transpose() * dV;
        }
        if (const auto *e = entry_for(batch, b, Target::W_K)) {
            if (auto *ge = adapter_grad(b, Target::W_K)) {
                ge->B.noalias() += dK * (e->A * E).transpose();
                ge->A.noalias() += (e->B.transpose() * dK) * E.transpose();
            }
            if (d_params != nullptr) {
                dE += e->A.transpose() * (e->B.transpose() * dK);
            }
        }
        if (const auto *e = entry_for(batch, b, Target::W_V)) {
            if (auto *ge = adapter_grad(b, Target::W_V)) {
                ge->B.noalias() += dV * (e->A * E).transpose();
                ge->A.noalias() += (e->B.transpose() * dV) * E.transpose();
            }
            if (d_params != nullptr) {
                dE += e->A.transpose() * (e->B.transpose() * dV);
            }
        }
        if (const auto *e = entry_for(batch, b, Target::W_Q)) {
            const Vec h0b = tape.h0.col(b);
            const Vec btdq = e->B.transpose() * dq.col(b);
            if (auto *ge = adapter_grad(b, Target::W_Q)) {
                ge->B.noalias() += dq.col(b) * (e->A * h0b).transpose();
                ge->A.noalias() += btdq * h0b.transpose();
            }
            dh0.col(b) += e->A.transpose() * btdq;
        }
        if (d_params != nullptr) {
            const auto &toks = batch.prompts[b].tokens;
            for (std::size_t j = 0; j < toks.size(); ++j) {
                d_tok.col(toks[j]) += dE.col(static_cast<Eigen::Index>(j));
            }
        }
    }
    dh0.noalias() += params.W_Q.transpose() * dq;

    if (d_params == nullptr) {
        return;
    }
    auto &gp = *d_params;
    gp.W_out.noalias() += dY * tape.h3.transpose();
    gp.b_out += dY.rowwise().sum();
    for (Eigen::Index b = 0; b < B; ++b) {
        gp.skip(0, batch.t[b]) += dY.col(b).dot(batch.x.col(b));
    }
    gp.W_4.noalias() += dh3 * g2.transpose();
    gp.b_4 += dh3.rowwise().sum();
    gp.W_3.noalias() += du2 * tape.h2.transpose();
    gp.b_3 += du2.rowwise().sum();
    gp.W_2.noalias() += dh2 * g.transpose();
    gp.b_2 += dh2.rowwise().sum();
    gp.W_1.noalias() += du * tape.h1.transpose();
    gp.b_1 += du.rowwise().sum();
    gp.W_O.noalias() += dh1 * tape.c.transpose();
    gp.W_Q.noalias() += dq * tape.h0.transpose();
    gp.W_K += dWk_tok;
    gp.W_V += dWv_tok;
    gp.tok_embed += d_tok;
    gp.W_in.noalias() += dh0 * batch.x.transpose();
    gp.b_in += dh0.rowwise().sum();
    for (Eigen::Index b = 0; b < B; ++b) {
        gp.t_embed.col(batch.t[b]) += dh0.col(b);
    }
}

Mat denoise(const Mat &x_t, int t, const PromptSpec &prompt, const DenoiserParams &params,
            const LoraAdapterSet *adapters) {
    const auto B = static_cast<std::size_t>(x_t.cols());
    DenoiseBatch batch{x_t, std::vector<int>(B, t), std::vector<PromptSpec>(B, prompt), {}};
    if (adapters != nullptr) {
        check_adapters(params, *adapters);
        batch.adapters.assign(B, adapters);
    }
    return denoiser_forward(params, batch);
}

DenoiserModel::DenoiserModel(const DenoiserParams &params, const LoraAdapterSet *adapters)
    : params_(params), adapters_(adapters) {
    if (adapters_ != nullptr) {
        check_adapters(params_, *adapters_);
    }
}

Mat DenoiserModel::predict(const Mat &x_t, int t, const PromptSpec &prompt) const {
    return denoise(x_t, t, prompt, params_, adapters_);
}

DenoiserParams merge_adapters(const DenoiserParams &params, const LoraAdapterSet &adapters) {
    check_adapters(params, adapters);
    DenoiserParams merged = params;
    for (const auto &[t, e] : adapters.entries()) {
        merged.target(t) += adapter_delta(e);
    }
    return merged;
}

} // namespace hld

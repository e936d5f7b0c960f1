#include "hld/training.hpp"

#include "hld/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <utility>

namespace hld {

namespace {

void add_scaled(LoraAdapterSet &dst, const LoraAdapterSet &src, double c) {
    for (const auto &[t, e] : src.entries()) {
        auto &d = dst.at(t);
        d.A += c * e.A;
        d.B += c * e.B;
    }
}

std::vector<Mat *> factor_ptrs(LoraAdapterSet &set) {
    std::vector<Mat *> out;
    for (Target t : kAllTargets) {
        if (set.contains(t)) {
            out.push_back(&set.at(t).B);
            out.push_back(&set.at(t).A);
        }
    }
    return out;
}

std::vector<const Mat *> factor_ptrs(const LoraAdapterSet &set) {
    std::vector<const Mat *> out;
    for (const auto &[t, e] : set.entries()) {
        out.push_back(&e.B);
        out.push_back(&e.A);
    }
    return out;
}

DiffusionItem make_item(const Vec &x0, PromptSpec prompt, int T, int adapter, Rng &rng) {
    std::uniform_int_distribution<int> pick_t(1, T);
    DiffusionItem it;
    it.x0 = x0;
    it.prompt = std::move(prompt);
    it.t = pick_t(rng);
    it.eps = randn(x0.size(), 1, rng).col(0);
    it.adapter = adapter;
    return it;
}

void check_finite(const LossTerms &terms, int step) {
    if (!std::isfinite(terms.total) || !std::isfinite(terms.loss_ft) || !std::isfinite(terms.loss_reg) ||
        !std::isfinite(terms.sq_norm)) {
        throw NumericalError("non-finite loss at step " + std::to_string(step));
    }
}

} // namespace

void TrainConfig::validate() const {
    require(gamma >= 0.0, "gamma must be >= 0");
    require(lambda >= 0.0, "lambda must be >= 0");
    require(lr >= 0.0, "learning rate must be >= 0");
    require(batch_size >= 1, "batch size must be >= 1");
    require(steps >= 0, "steps must be >= 0");
    require(prompt_dropout >= 0.0 && prompt_dropout <= 1.0, "prompt dropout must lie in [0, 1]");
    require(subject_token_rate >= 0.0 && subject_token_rate <= 1.0, "subject token rate must lie in [0, 1]");
    require(exemplars >= 1, "exemplars must be >= 1");
    require(optimizer.weight_decay >= 0.0, "weight decay must be >= 0");
}

double diffusion_loss(std::span<const DiffusionItem> items, const DenoiserParams &params,
                      std::span<const LoraAdapterSet> adapter_table, const NoiseSchedule &sched,
                      DiffusionGrads grads) {
    if (items.empty()) {
        return 0.0;
    }
    require(sched.T() == params.config.T, "diffusion_loss: schedule length does not match the denoiser");
    const auto N = static_cast<Eigen::Index>(items.size());
    const int D = params.config.data_dim;
    DenoiseBatch batch;
    batch.x.resize(D, N);
    Mat eps(D, N);
    bool any_adapter = false;
    for (Eigen::Index j = 0; j < N; ++j) {
        const auto &it = items[static_cast<std::size_t>(j)];
        require(it.x0.size() == D && it.eps.size() == D, "diffusion_loss: item size does not match the denoiser");
        batch.x.col(j) = sched.alpha(it.t) * it.x0 + sched.sigma(it.t) * it.eps;
        eps.col(j) = it.eps;
        batch.t.push_back(it.t);
        batch.prompts.push_back(it.prompt);
        any_adapter = any_adapter || it.adapter >= 0;
    }
    if (any_adapter) {
        for (const auto &it : items) {
            require(it.adapter < static_cast<int>(adapter_table.size()), "diffusion_loss: adapter index out of range");
            batch.adapters.push_back(it.adapter >= 0 ? &adapter_table[static_cast<std::size_t>(it.adapter)] : nullptr);
        }
    }
    const bool want_grads = grads.params != nullptr || grads.adapters != nullptr;
    DenoiserTape tape;
    const Mat Y = denoiser_forward(params, batch, want_grads ? &tape : nullptr);
    const Mat R = Y - eps;
    const double loss = R.squaredNorm() / static_cast<double>(N);
    if (!want_grads) {
        return loss;
    }
    const Mat dY = (2.0 * grads.weight / static_cast<double>(N)) * R;
    AdapterGrads ag;
    denoiser_backward(params, batch, tape, dY, grads.params, grads.adapters != nullptr ? &ag : nullptr);
    if (grads.adapters != nullptr) {
        auto &out = *grads.adapters;
        if (out.empty()) {
            for (const auto &a : adapter_table) {
                out.push_back(a.scaled(0.0));
            }
        }
        require(out.size() == adapter_table.size(), "diffusion_loss: adapter gradient table size mismatch");
        for (std::size_t i = 0; i < adapter_table.size(); ++i) {
            if (auto f = ag.find(&adapter_table[i]); f != ag.end()) {
                add_scaled(out[i], f->second, 1.0);
            }
        }
    }
    return loss;
}

double loss_ft(std::span<const DiffusionItem> subject_items, const DenoiserParams &params,
               std::span<const LoraAdapterSet> adapter_table, const NoiseSchedule &sched, DiffusionGrads grads) {
    require(!subject_items.empty(), "loss_ft: empty subject batch");
    return diffusion_loss(subject_items, params, adapter_table, sched, grads);
}

double loss_reg(std::span<const DiffusionItem> reg_items, const DenoiserParams &params,
                std::span<const LoraAdapterSet> adapter_table, const NoiseSchedule &sched, DiffusionGrads grads) {
    require(!reg_items.empty(), "loss_reg: empty class-prior batch");
    return diffusion_loss(reg_items, params, adapter_table, sched, grads);
}

LossTerms hypernet_loss(const HypernetBatch &batch, const HypernetParams &hyper, const DenoiserParams &denoiser,
                        const TrainConfig &cfg, const NoiseSchedule &sched, HypernetParams *grads) {
    const std::size_t S = batch.exemplars.size();
    require(S >= 1, "hypernet_loss: batch has no subjects");
    Eigen::Index total_images = 0;
    for (const auto &ex : batch.exemplars) {
        require(ex.cols() >= 1, "hypernet_loss: subject without exemplar images");
        total_images += ex.cols();
    }
    Mat images(hyper.config.image_dim, total_images);
    Eigen::Index col = 0;
    for (const auto &ex : batch.exemplars) {
        require(ex.rows() == hyper.config.image_dim, "hypernet_loss: exemplar size mismatch");
        images.middleCols(col, ex.cols()) = ex;
        col += ex.cols();
    }

    HypernetTape tape;
    const std::vector<LoraAdapterSet> per_image = hypernet_forward(hyper, images, grads != nullptr ? &tape : nullptr);
    std::vector<LoraAdapterSet> table;
    table.reserve(S);
    col = 0;
    for (const auto &ex : batch.exemplars) {
        table.push_back(average_adapters(std::span(per_image).subspan(static_cast<std::size_t>(col),
                                                                      static_cast<std::size_t>(ex.cols()))));
        col += ex.cols();
    }

    std::vector<DiffusionItem> reg_items = batch.items.reg;
    if (cfg.reg_on_base) {
        for (auto &it : reg_items) {
            it.adapter = -1;
        }
    }

    std::vector<LoraAdapterSet> d_table;
    std::vector<LoraAdapterSet> *d_ptr = grads != nullptr ? &d_table : nullptr;
    LossTerms terms;
    terms.loss_ft = loss_ft(batch.items.subject, denoiser, table, sched, {nullptr, d_ptr, 1.0});
    terms.loss_reg = loss_reg(reg_items, denoiser, table, sched, {nullptr, d_ptr, cfg.gamma});
    for (const auto &a : table) {
        terms.sq_norm += adapter_sq_norm(a);
    }
    terms.sq_norm /= static_cast<double>(S);
    terms.total = terms.loss_ft + cfg.gamma * terms.loss_reg + cfg.lambda * terms.sq_norm;

    if (grads == nullptr) {
        return terms;
    }
    if (d_table.empty()) {
        for (const auto &a : table) {
            d_table.push_back(a.scaled(0.0));
        }
    }
    for (std::size_t s = 0; s < S; ++s) {
        add_scaled(d_table[s], table[s], 2.0 * cfg.lambda / static_cast<double>(S));
    }
    std::vector<LoraAdapterSet> d_outputs;
    d_outputs.reserve(static_cast<std::size_t>(total_images));
    for (std::size_t s = 0; s < S; ++s) {
        const auto k = batch.exemplars[s].cols();
        const LoraAdapterSet share = d_table[s].scaled(1.0 / static_cast<double>(k));
        for (Eigen::Index i = 0; i < k; ++i) {
            d_outputs.push_back(share);
        }
    }
    hypernet_backward(hyper, tape, d_outputs, *grads);
    return terms;
}

void Optimizer::update(const std::vector<Mat *> &params, const std::vector<const Mat *> &grads) {
    require(params.size() == grads.size(), "optimizer: parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const Mat *p : params) {
            m_.push_back(Mat::Zero(p->rows(), p->cols()));
            v_.push_back(Mat::Zero(p->rows(), p->cols()));
        }
    }
    require(m_.size() == params.size(), "optimizer: parameter set changed between steps");
    ++t_;
    const double decay = lr_ * spec_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat &p = *params[i];
        const Mat &g = *grads[i];
        require_same_shape(p, g, "optimizer");
        if (decay > 0.0) {
            p *= 1.0 - decay;
        }
        if (spec_.kind == OptimizerKind::sgd) {
            p -= lr_ * g;
            continue;
        }
        m_[i] = spec_.beta1 * m_[i] + (1.0 - spec_.beta1) * g;
        v_[i] = spec_.beta2 * v_[i] + (1.0 - spec_.beta2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
        p.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + spec_.eps);
    }
}

std::string to_jsonl(std::span<const TrainLogRecord> log) {
    std::ostringstream os;
    for (const auto &r : log) {
        nlohmann::json j = {{"step", r.step},
                            {"loss_ft", r.terms.loss_ft},
                            {"loss_reg", r.terms.loss_reg},
                            {"sq_norm", r.terms.sq_norm},
                            {"total", r.terms.total}};
        os << j.dump() << '\n';
    }
    return os.str();
}

HypernetBatch sample_hypernet_batch(const Corpus &corpus, const TrainConfig &cfg, const NoiseSchedule &sched,
                                    int step) {
    require(!corpus.train.empty(), "hypernet training needs at least one training subject");
    Rng rng(derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(step)}));
    std::uniform_int_distribution<std::size_t> pick_subject(0, corpus.train.size() - 1);
    HypernetBatch b;
    for (int s = 0; s < cfg.batch_size; ++s) {
        const SubjectData &sd = corpus.train[pick_subject(rng)];
        const auto n = static_cast<int>(sd.images.cols());
        require(n >= cfg.exemplars, "subject has fewer images than requested exemplars");
        std::vector<int> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        Mat ex(sd.images.rows(), cfg.exemplars);
        for (int i = 0; i < cfg.exemplars; ++i) {
            ex.col(i) = sd.images.col(idx[static_cast<std::size_t>(i)]);
        }
        const Mat x0 = to_model_space(ex);
        for (int i = 0; i < cfg.exemplars; ++i) {
            b.items.subject.push_back(
                make_item(x0.col(i), make_prompt(sd.spec.class_id, true), sched.T(), s, rng));
        }
        const Mat prior = to_model_space(gen_class_prior(sd.spec.class_id, 1, rng()));
        b.items.reg.push_back(make_item(prior.col(0), make_prompt(sd.spec.class_id, false), sched.T(), s, rng));
        b.exemplars.push_back(std::move(ex));
    }
    return b;
}

HypernetTrainResult train_hypernet(const Corpus &corpus, const DenoiserParams &denoiser, HypernetParams init,
                                   const TrainConfig &cfg, const LogSink &sink) {
    cfg.validate();
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    require(sched.T() == denoiser.config.T, "hypernet training: schedule length does not match the denoiser");
    HypernetTrainResult res{std::move(init), {}};
    Optimizer opt(cfg.optimizer, cfg.lr);
    for (int step = 0; step < cfg.steps; ++step) {
        const HypernetBatch batch = sample_hypernet_batch(corpus, cfg, sched, step);
        HypernetParams g = res.params.zeros_like();
        const LossTerms terms = hypernet_loss(batch, res.params, denoiser, cfg, sched, &g);
        check_finite(terms, step);
        opt.step(res.params, g);
        res.log.push_back({step, terms});
        if (sink) {
            sink(res.log.back());
        }
    }
    return res;
}

PretrainResult pretrain_denoiser(int num_classes, DenoiserParams init, const TrainConfig &cfg, const LogSink &sink) {
    cfg.validate();
    require(num_classes >= 1, "pretraining needs at least one class");
    require(kFirstClassToken + num_classes <= init.config.vocab, "vocabulary too small for the class count");
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    require(sched.T() == init.config.T, "pretraining: schedule length does not match the denoiser");
    PretrainResult res{std::move(init), {}};
    Optimizer opt(cfg.optimizer, cfg.lr);
    std::uniform_int_distribution<int> pick_class(0, num_classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(step)}));
        std::vector<DiffusionItem> items;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const int k = pick_class(rng);
            const Mat x0 = to_model_space(gen_class_prior(k, 1, rng()));
            PromptSpec prompt;
            if (unit(rng) < cfg.prompt_dropout) {
                prompt = PromptSpec::null_prompt();
            } else {
                prompt = make_prompt(k, unit(rng) < cfg.subject_token_rate, res.params.config.vocab);
            }
            items.push_back(make_item(x0.col(0), std::move(prompt), sched.T(), -1, rng));
        }
        DenoiserParams g = res.params.zeros_like();
        LossTerms terms;
        terms.loss_ft = diffusion_loss(items, res.params, {}, sched, {&g, nullptr, 1.0});
        terms.total = terms.loss_ft;
        check_finite(terms, step);
        opt.step(res.params, g);
        res.log.push_back({step, terms});
        if (sink) {
            sink(res.log.back());
        }
    }
    return res;
}

std::vector<AdapterSnapshot> finetune_subject(const Mat &subject_images, int class_id,
                                              const DenoiserParams &denoiser, int steps, std::vector<int> marks,
                                              const TrainConfig &cfg, int rank, const LogSink &sink) {
    cfg.validate();
    require(subject_images.cols() >= 1, "finetune: no subject images");
    require(subject_images.rows() == denoiser.config.data_dim, "finetune: image size does not match the denoiser");
    require(steps >= 0, "finetune: steps must be >= 0");
    std::sort(marks.begin(), marks.end());
    marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
    for (int m : marks) {
        require(m >= 0 && m <= steps, "finetune: snapshot mark " + std::to_string(m) + " outside [0, steps]");
    }
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    require(sched.T() == denoiser.config.T, "finetune: schedule length does not match the denoiser");

    std::vector<LoraAdapterSet> table{new_adapter_set(denoiser.target_shapes(), rank, LoraInit::b_zero_a_random,
                                                      derive_seed(cfg.seed, {4}))};
    std::vector<AdapterSnapshot> out;
    auto next_mark = marks.begin();
    if (next_mark != marks.end() && *next_mark == 0) {
        out.push_back({0, table[0]});
        ++next_mark;
    }
    const Mat x_subject = to_model_space(subject_images);
    const PromptSpec prompt_S = make_prompt(class_id, true, denoiser.config.vocab);
    const PromptSpec prompt_G = make_prompt(class_id, false, denoiser.config.vocab);
    std::uniform_int_distribution<Eigen::Index> pick_image(0, x_subject.cols() - 1);
    Optimizer opt(cfg.optimizer, cfg.lr);
    for (int step = 0; step < steps; ++step) {
        Rng rng(derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(step)}));
        std::vector<DiffusionItem> subj, reg;
        for (int i = 0; i < cfg.batch_size; ++i) {
            subj.push_back(make_item(x_subject.col(pick_image(rng)), prompt_S, sched.T(), 0, rng));
        }
        if (cfg.gamma > 0.0) {
            const Mat prior = to_model_space(gen_class_prior(class_id, cfg.batch_size, rng()));
            for (int i = 0; i < cfg.batch_size; ++i) {
                reg.push_back(make_item(prior.col(i), prompt_G, sched.T(), cfg.reg_on_base ? -1 : 0, rng));
            }
        }
        std::vector<LoraAdapterSet> d;
        LossTerms terms;
        terms.loss_ft = loss_ft(subj, denoiser, table, sched, {nullptr, &d, 1.0});
        if (!reg.empty()) {
            terms.loss_reg = loss_reg(reg, denoiser, table, sched, {nullptr, &d, cfg.gamma});
        }
        terms.sq_norm = adapter_sq_norm(table[0]);
        terms.total = terms.loss_ft + cfg.gamma * terms.loss_reg;
        check_finite(terms, step);
        if (d.empty()) {
            d.push_back(table[0].scaled(0.0));
        }
        opt.update(factor_ptrs(table[0]), factor_ptrs(std::as_const(d[0])));
        if (sink) {
            sink({step, terms});
        }
        if (next_mark != marks.end() && *next_mark == step + 1) {
            out.push_back({step + 1, table[0]});
            ++next_mark;
        }
    }
    return out;
}

double grad_check(const DifferentiableFn &fn, const Vec &params, double h) {
    require(h > 0.0, "grad_check: step must be positive");
    const Vec g = fn.gradient(params);
    require(g.size() == params.size(), "grad_check: gradient size mismatch");
    double worst = 0.0;
    Vec p = params;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = fn.value(p);
        p[i] = orig - h;
        const double down = fn.value(p);
        p[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        if (!std::isfinite(fd) || !std::isfinite(g[i])) {
            throw NumericalError("grad_check: non-finite value at coordinate " + std::to_string(i));
        }
        const double err = std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), 1e-8});
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace hld

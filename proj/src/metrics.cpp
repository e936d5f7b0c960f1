#include "hld/metrics.hpp"

#include "hld/io.hpp"
#include "hld/rng.hpp"
#include "hld/toy_data.hpp"
#include "hld/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace hld {

namespace {

constexpr char kSuiteMagic[] = "HMET";
constexpr std::uint16_t kSuiteVersion = 1;

Mat silu_of(const Mat &m) { return m.unaryExpr([](double v) { return silu(v); }); }

Mat softmax_cols(const Mat &logits) {
    Mat p = logits;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const double mx = p.col(j).maxCoeff();
        p.col(j) = (p.col(j).array() - mx).exp();
        p.col(j) /= p.col(j).sum();
    }
    return p;
}

Mat class_images(int class_id, int n, std::uint64_t seed) { return gen_class_prior(class_id, n, seed); }

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

} // namespace

FeatureProjection make_feature_projection(int image_dim, int features, std::uint64_t seed, const Vec &center) {
    require(image_dim >= 1 && features >= 1, "feature projection needs positive sizes");
    require(center.size() == image_dim, "feature projection: center size mismatch");
    Rng rng(seed);
    FeatureProjection p;
    p.P = randn(features, image_dim, rng) / std::sqrt(static_cast<double>(image_dim));
    p.center = center;
    return p;
}

Mat project_features(const Mat &images, const FeatureProjection &proj) {
    require(images.rows() == proj.P.cols(), "project_features: image size mismatch");
    return proj.P * (images.colwise() - proj.center);
}

std::vector<double> subject_fidelity_per_sample(const Mat &generated, const Mat &reference,
                                                const FeatureProjection &proj) {
    require(generated.cols() >= 1, "subject_fidelity: no generated images");
    require(reference.cols() >= 1, "subject_fidelity: no reference images");
    const Vec centroid = project_features(reference, proj).rowwise().mean();
    const Mat f = project_features(generated, proj);
    const double cn = centroid.norm();
    std::vector<double> out(static_cast<std::size_t>(f.cols()));
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
        const double denom = cn * f.col(j).norm();
        out[static_cast<std::size_t>(j)] = denom > 0.0 ? f.col(j).dot(centroid) / denom : 0.0;
    }
    return out;
}

double subject_fidelity(const Mat &generated, const Mat &reference, const FeatureProjection &proj) {
    const auto per = subject_fidelity_per_sample(generated, reference, proj);
    return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

Probe train_probe(int num_classes, const ProbeConfig &cfg) {
    require(num_classes >= 2, "probe needs at least two classes");
    require(cfg.hidden >= 1 && cfg.batch >= 1 && cfg.steps >= 1, "probe sizes must be positive");
    require(cfg.noise_share >= 0.0 && cfg.noise_share < 1.0, "probe noise share must lie in [0, 1)");
    Rng init_rng(derive_seed(cfg.seed, {10}));
    Probe p;
    p.num_classes = num_classes;
    p.W1 = randn(cfg.hidden, kImageDim, init_rng) / std::sqrt(static_cast<double>(kImageDim));
    p.b1 = Mat::Zero(cfg.hidden, 1);
    p.W2 = randn(num_classes, cfg.hidden, init_rng) / std::sqrt(static_cast<double>(cfg.hidden));
    p.b2 = Mat::Zero(num_classes, 1);

    OptimizerSpec spec;
    spec.weight_decay = 0.0;
    Optimizer opt(spec, cfg.lr);
    std::uniform_int_distribution<int> pick_class(0, num_classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> jitter(0.0, 0.05);
    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, {11, static_cast<std::uint64_t>(step)}));
        Mat X(kImageDim, cfg.batch);
        Mat Y = Mat::Zero(num_classes, cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            if (unit(rng) < cfg.noise_share) {
                for (Eigen::Index r = 0; r < X.rows(); ++r) {
                    X(r, i) = unit(rng);
                }
                Y.col(i).setConstant(1.0 / num_classes);
                continue;
            }
            const int k = pick_class(rng);
            X.col(i) = class_images(k, 1, rng()).col(0);
            for (Eigen::Index r = 0; r < X.rows(); ++r) {
                X(r, i) = std::clamp(X(r, i) + jitter(rng), 0.0, 1.0);
            }
            Y(k, i) = 1.0;
        }
        Mat pre = p.W1 * X;
        pre.colwise() += p.b1.col(0);
        const Mat h = silu_of(pre);
        Mat logits = p.W2 * h;
        logits.colwise() += p.b2.col(0);
        const Mat dlog = (softmax_cols(logits) - Y) / static_cast<double>(cfg.batch);
        Probe g = p;
        g.W2 = dlog * h.transpose();
        g.b2 = dlog.rowwise().sum();
        const Mat dpre = (p.W2.transpose() * dlog).cwiseProduct(pre.unaryExpr([](double v) { return silu_grad(v); }));
        g.W1 = dpre * X.transpose();
        g.b1 = dpre.rowwise().sum();
        opt.step(p, g);
    }

    int correct = 0;
    int total = 0;
    for (int k = 0; k < num_classes; ++k) {
        const Mat val = class_images(k, cfg.val_per_class, derive_seed(cfg.seed, {12, static_cast<std::uint64_t>(k)}));
        const Mat probs = probe_probabilities(p, val);
        for (Eigen::Index j = 0; j < probs.cols(); ++j) {
            Eigen::Index best = 0;
            probs.col(j).maxCoeff(&best);
            correct += best == k ? 1 : 0;
            ++total;
        }
    }
    p.val_accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
    return p;
}

Mat probe_probabilities(const Probe &probe, const Mat &images) {
    require(probe.num_classes >= 2, "probe is not trained");
    require(images.rows() == probe.W1.cols(), "probe: image size mismatch");
    Mat pre = probe.W1 * images;
    pre.colwise() += probe.b1.col(0);
    Mat logits = probe.W2 * silu_of(pre);
    logits.colwise() += probe.b2.col(0);
    return softmax_cols(logits);
}

std::vector<double> prompt_fidelity_per_sample(const Mat &generated, int class_id, const Probe &probe) {
    require(generated.cols() >= 1, "prompt_fidelity: no generated images");
    require(class_id >= 0 && class_id < probe.num_classes, "prompt_fidelity: class id out of range");
    const Mat probs = probe_probabilities(probe, generated);
    std::vector<double> out(static_cast<std::size_t>(probs.cols()));
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
        out[static_cast<std::size_t>(j)] = probs(class_id, j);
    }
    return out;
}

double prompt_fidelity(const Mat &generated, int class_id, const Probe &probe) {
    const auto per = prompt_fidelity_per_sample(generated, class_id, probe);
    return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

MetricSuite make_metric_suite(const MetricSuiteConfig &cfg) {
    require(cfg.num_classes >= 2, "metric suite needs at least two classes");
    require(cfg.center_per_class >= 1, "metric suite needs center images");
    Vec center = Vec::Zero(kImageDim);
    for (int k = 0; k < cfg.num_classes; ++k) {
        center += class_images(k, cfg.center_per_class, derive_seed(cfg.seed, {20, static_cast<std::uint64_t>(k)}))
                      .rowwise()
                      .sum();
    }
    center /= static_cast<double>(cfg.num_classes * cfg.center_per_class);
    MetricSuite suite;
    suite.projection = make_feature_projection(kImageDim, cfg.features, derive_seed(cfg.seed, {21}), center);
    ProbeConfig pc = cfg.probe;
    pc.seed = derive_seed(cfg.seed, {22});
    suite.probe = train_probe(cfg.num_classes, pc);
    return suite;
}

std::vector<std::uint8_t> serialize_metric_suite(const MetricSuite &suite) {
    io::ByteWriter header;
    header.raw(std::string_view(kSuiteMagic, 4));
    header.u16(kSuiteVersion);
    header.u32(static_cast<std::uint32_t>(suite.projection.P.rows()));
    header.u32(static_cast<std::uint32_t>(suite.projection.P.cols()));
    header.u8(suite.probe ? 1 : 0);
    io::ByteWriter payload;
    payload.matrix_f32(suite.projection.P);
    payload.matrix_f32(suite.projection.center.transpose());
    if (suite.probe) {
        const Probe &p = *suite.probe;
        header.u32(static_cast<std::uint32_t>(p.num_classes));
        header.u32(static_cast<std::uint32_t>(p.W1.rows()));
        header.f64(p.val_accuracy);
        p.for_each([&](const char *, const Mat &m) { payload.matrix_f32(m); });
    }
    const std::uint32_t crc = io::crc32(payload.data());
    header.bytes(payload.data());
    header.u32(crc);
    return header.take();
}

MetricSuite deserialize_metric_suite(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    if (r.raw(4) != std::string_view(kSuiteMagic, 4)) {
        throw FormatError("metric file: bad magic");
    }
    if (const auto v = r.u16(); v != kSuiteVersion) {
        throw FormatError("metric file: unsupported version " + std::to_string(v));
    }
    const std::uint32_t features = r.u32();
    const std::uint32_t dim = r.u32();
    const std::uint8_t has_probe = r.u8();
    if (features == 0 || dim == 0 || features > 65536 || dim > (1u << 24) || has_probe > 1) {
        throw FormatError("metric file: implausible header");
    }
    std::uint32_t classes = 0;
    std::uint32_t hidden = 0;
    double acc = 0.0;
    if (has_probe != 0) {
        classes = r.u32();
        hidden = r.u32();
        acc = r.f64();
        if (classes < 2 || classes > 65536 || hidden == 0 || hidden > 65536) {
            throw FormatError("metric file: implausible probe shape");
        }
    }
    std::size_t payload_bytes = 4ull * (static_cast<std::size_t>(features) * dim + dim);
    if (has_probe != 0) {
        payload_bytes += 4ull * (static_cast<std::size_t>(hidden) * dim + hidden +
                                 static_cast<std::size_t>(classes) * hidden + classes);
    }
    if (r.remaining() != payload_bytes + 4) {
        throw FormatError("metric file: truncated or oversized payload");
    }
    const auto payload = bytes.subspan(r.pos(), payload_bytes);
    MetricSuite s;
    s.projection.P = r.matrix_f32(features, dim);
    s.projection.center = r.matrix_f32(1, dim).transpose();
    if (has_probe != 0) {
        Probe p;
        p.num_classes = static_cast<int>(classes);
        p.val_accuracy = acc;
        p.W1 = r.matrix_f32(hidden, dim);
        p.b1 = r.matrix_f32(hidden, 1);
        p.W2 = r.matrix_f32(classes, hidden);
        p.b2 = r.matrix_f32(classes, 1);
        s.probe = std::move(p);
    }
    if (r.u32() != io::crc32(payload)) {
        throw FormatError("metric file: CRC mismatch");
    }
    return s;
}

std::string MetricReport::to_text() const {
    std::ostringstream os;
    os << "subject_fidelity: " << fmt(subject_fidelity) << '\n';
    os << "prompt_fidelity: " << fmt(prompt_fidelity) << '\n';
    os << "mode: " << echo.mode << '\n';
    os << "lambda: " << fmt(echo.lambda) << '\n';
    os << "kappa: " << fmt(echo.kappa) << '\n';
    os << "w: " << fmt(echo.w) << '\n';
    os << "guidance_scale: " << fmt(echo.w + 1.0) << '\n';
    os << "steps: " << echo.steps << '\n';
    os << "seed: " << echo.seed << '\n';
    os << "samples: " << per_sample_subject.size() << '\n';
    os << "\n[per_sample]\nindex,subject_fidelity,prompt_fidelity\n";
    for (std::size_t i = 0; i < per_sample_subject.size(); ++i) {
        os << i << ',' << fmt(per_sample_subject[i]) << ',' << fmt(per_sample_prompt[i]) << '\n';
    }
    return os.str();
}

MetricReport evaluate(const Mat &generated, const Mat &reference, int prompt_class, const MetricSuite &suite,
                      const MetricEcho &echo) {
    require(suite.probe.has_value(), "evaluation needs a probe classifier");
    MetricReport rep;
    rep.per_sample_subject = subject_fidelity_per_sample(generated, reference, suite.projection);
    rep.per_sample_prompt = prompt_fidelity_per_sample(generated, prompt_class, *suite.probe);
    const double n = static_cast<double>(rep.per_sample_subject.size());
    rep.subject_fidelity = std::accumulate(rep.per_sample_subject.begin(), rep.per_sample_subject.end(), 0.0) / n;
    rep.prompt_fidelity = std::accumulate(rep.per_sample_prompt.begin(), rep.per_sample_prompt.end(), 0.0) / n;
    rep.echo = echo;
    return rep;
}

int recontext_class(int subject_class, int num_classes) {
    require(num_classes >= 2, "recontextualization needs at least two classes");
    require(subject_class >= 0 && subject_class < num_classes, "subject class out of range");
    return (subject_class + 1) % num_classes;
}

MetricReport evaluate_recontext(const DenoiserParams &base, const LoraAdapterSet *adapters, const Mat &reference,
                                int subject_class, int num_classes, const MetricSuite &suite,
                                const GuidanceConfig &g, const NoiseSchedule &sched, int n, std::uint64_t seed) {
    const int target = recontext_class(subject_class, num_classes);
    const PromptSpec pS = make_prompt(target, true, base.config.vocab);
    const PromptSpec pG = make_prompt(target, false, base.config.vocab);
    const Mat x = guided_sample(base, adapters, pS, pG, g, sched, n, seed);
    MetricEcho echo;
    echo.kappa = g.kappa;
    echo.w = g.w;
    echo.steps = g.steps;
    echo.seed = seed;
    echo.mode = std::string(mode_name(g.mode));
    return evaluate(to_image(x), reference, target, suite, echo);
}

std::vector<SweepRow> kappa_sweep(const SweepSystem &system, std::span<const double> kappas,
                                  const SweepPrompts &prompts, const GuidanceConfig &g, int n, std::uint64_t seed) {
    require(system.base != nullptr && system.sched != nullptr && system.metrics != nullptr,
            "kappa_sweep: incomplete system");
    require(!kappas.empty(), "kappa_sweep: no kappa values");
    for (double k : kappas) {
        require(k >= 0.0 && k <= 2.0, "kappa out of [0,2]");
    }
    std::vector<SweepRow> rows;
    for (double k : kappas) {
        GuidanceConfig gk = g;
        gk.mode = GuidanceMode::hmcfg;
        gk.kappa = k;
        const Mat x = guided_sample(*system.base, system.adapters, prompts.subject, prompts.generic, gk,
                                    *system.sched, n, seed);
        const MetricReport rep = evaluate(to_image(x), system.reference, prompts.target_class, *system.metrics);
        rows.push_back({k, rep.subject_fidelity, rep.prompt_fidelity});
    }
    return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
    std::ostringstream os;
    os << "kappa,subject_fidelity,prompt_fidelity\n";
    for (const auto &r : rows) {
        os << fmt(r.kappa) << ',' << fmt(r.subject_fidelity) << ',' << fmt(r.prompt_fidelity) << '\n';
    }
    return os.str();
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    return ranks;
}

} // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "spearman: length mismatch");
    require(a.size() >= 2, "spearman: need at least two points");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace hld

#include "hld/verify.hpp"

#include "hld/guidance.hpp"
#include "hld/oracle.hpp"
#include "hld/rng.hpp"

#include <cmath>
#include <sstream>

namespace hld {

namespace {

std::string sci(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

std::vector<MixtureComponent> two_class_mixture() {
    GaussianSpec a{Vec(2), 0.3 * Mat::Identity(2, 2), 0};
    a.mu << -1.5, 0.0;
    GaussianSpec b{Vec(2), Mat(2, 2), 1};
    b.mu << 1.5, 0.5;
    b.sigma << 0.4, 0.1, 0.1, 0.25;
    return {{0.5, a}, {0.5, b}};
}

CheckResult check_schedule() {
    const NoiseSchedule s = make_schedule(ScheduleSpec{});
    double worst = 0.0;
    bool monotone = true;
    for (int t = 1; t <= s.T(); ++t) {
        worst = std::max(worst, std::abs(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) - 1.0));
        monotone = monotone && s.alpha_bar(t) < s.alpha_bar(t - 1);
    }
    return {"schedule: alpha^2 + sigma^2 = 1, alpha_bar decreasing", monotone && worst < 1e-12,
            "max deviation " + sci(worst)};
}

CheckResult check_cfg_collapse(const OracleSuiteOptions &opt) {
    Rng rng(derive_seed(opt.seed, {1}));
    std::uniform_real_distribution<double> w_dist(0.0, 10.0);
    double worst = 0.0;
    for (int i = 0; i < opt.draws; ++i) {
        const Mat c = randn(8, 2, rng);
        const Mat n = randn(8, 2, rng);
        const double w = w_dist(rng);
        const Mat h = hmcfg_eps(c, c, n, w, 1.0);
        const Mat f = cfg_eps(c, n, 2.0 * (w + 1.0) - 1.0);
        worst = std::max(worst, (h - f).cwiseAbs().maxCoeff() / std::max(1.0, f.cwiseAbs().maxCoeff()));
    }
    return {"hmcfg(kappa=1, c_S=c_G) equals cfg at doubled scale", worst < 1e-12, "max deviation " + sci(worst)};
}

CheckResult check_affine(const OracleSuiteOptions &opt) {
    // A constant prediction must pass through unchanged when the weights sum to one.
    Rng rng(derive_seed(opt.seed, {2}));
    std::uniform_real_distribution<double> w_dist(0.0, 10.0);
    std::uniform_real_distribution<double> k_dist(0.0, 2.0);
    double worst = 0.0;
    for (int i = 0; i < opt.draws; ++i) {
        const Mat e = randn(4, 3, rng);
        const double w = w_dist(rng);
        worst = std::max(worst, (hmcfg_eps(e, e, e, w, k_dist(rng)) - e).cwiseAbs().maxCoeff() /
                                    std::max(1.0, (w + 1.0) * e.cwiseAbs().maxCoeff()));
        worst = std::max(worst, (cfg_eps(e, e, w) - e).cwiseAbs().maxCoeff());
    }
    return {"guidance weights sum to one", worst < 1e-12, "max deviation " + sci(worst)};
}

CheckResult check_score_identity(const OracleSuiteOptions &opt) {
    const NoiseSchedule sched = make_schedule(ScheduleSpec{});
    const AnalyticEpsModel model(two_class_mixture(), sched);
    Rng rng(derive_seed(opt.seed, {3}));
    std::uniform_int_distribution<int> t_dist(1, sched.T());
    std::uniform_real_distribution<double> w_dist(0.0, 10.0);
    std::uniform_real_distribution<double> k_dist(0.0, 2.0);
    const PromptSpec pS{{kSubjectToken, kFirstClassToken + 1}};
    const PromptSpec pG{{kFirstClassToken}};
    double worst = 0.0;
    for (int i = 0; i < opt.draws; ++i) {
        const Mat x = 2.0 * randn(2, 1, rng);
        worst = std::max(worst, hmcfg_score_identity_check(x, t_dist(rng), model, model, pS, pG, w_dist(rng),
                                                           k_dist(rng), sched));
    }
    return {"hmcfg epsilon form matches score form", worst < 1e-10, "max deviation " + sci(worst)};
}

CheckResult check_optimal_eps(const OracleSuiteOptions &opt) {
    const NoiseSchedule sched = make_schedule(ScheduleSpec{});
    const auto mix = two_class_mixture();
    const GaussianSpec &g = mix[1].gaussian;
    Rng rng(derive_seed(opt.seed, {4}));
    std::uniform_int_distribution<int> t_dist(1, sched.T());
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const int t = t_dist(rng);
        const Mat x = randn(2, 3, rng);
        const Mat via_eps = eps_to_score(optimal_eps(x, t, g, sched), sched.sigma(t));
        const Mat direct = gaussian_score(x, diffused_marginal(g, t, sched));
        worst = std::max(worst, (via_eps - direct).cwiseAbs().maxCoeff() / std::max(1.0, direct.cwiseAbs().maxCoeff()));
    }
    return {"optimal epsilon agrees with the diffused Gaussian score", worst < 1e-10, "max deviation " + sci(worst)};
}

CheckResult check_mixture_score(const OracleSuiteOptions &opt) {
    const NoiseSchedule sched = make_schedule(ScheduleSpec{});
    const auto mix = two_class_mixture();
    Rng rng(derive_seed(opt.seed, {5}));
    std::uniform_int_distribution<int> t_dist(1, sched.T());
    const double h = 1e-5;
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const int t = t_dist(rng);
        const Vec x = 1.5 * randn(2, 1, rng).col(0);
        const Vec s = mixture_score(Mat(x), t, mix, sched).col(0);
        for (int d = 0; d < 2; ++d) {
            Vec up = x;
            Vec dn = x;
            up[d] += h;
            dn[d] -= h;
            const double fd = (mixture_log_density(up, t, mix, sched) - mixture_log_density(dn, t, mix, sched)) / (2 * h);
            worst = std::max(worst, std::abs(fd - s[d]) / std::max(1.0, std::abs(s[d])));
        }
    }
    return {"mixture score matches finite differences of the log density", worst < 1e-6, "max deviation " + sci(worst)};
}

CheckResult check_sampler_moments(const OracleSuiteOptions &opt) {
    const NoiseSchedule sched = make_schedule(ScheduleSpec{});
    GaussianSpec g{Vec(2), Mat(2, 2), 0};
    g.mu << 1.0, -2.0;
    g.sigma << 0.5, 0.2, 0.2, 0.3;
    const AnalyticEpsModel model({{1.0, g}}, sched);
    GuidanceConfig gc;
    gc.mode = GuidanceMode::none;
    gc.steps = sched.T();
    const PromptSpec p{{kFirstClassToken}};
    const Mat x = guided_sample(model, model, p, p, gc, sched, 2, opt.chains, derive_seed(opt.seed, {6}));
    const double n = static_cast<double>(x.cols());
    const Vec mu = x.rowwise().mean();
    const Mat c = x.colwise() - mu;
    const Mat S = c * c.transpose() / (n - 1.0);
    bool ok = true;
    double mean_z = 0.0;
    for (int d = 0; d < 2; ++d) {
        const double z = std::abs(mu[d] - g.mu[d]) / std::sqrt(g.sigma(d, d) / n);
        mean_z = std::max(mean_z, z);
        ok = ok && z < 3.0;
    }
    double cov_rel = 0.0;
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            cov_rel = std::max(cov_rel, std::abs(S(i, j) - g.sigma(i, j)) / std::abs(g.sigma(i, j)));
        }
    }
    ok = ok && cov_rel < 0.05;
    return {"ancestral sampler with optimal epsilon recovers Gaussian moments", ok,
            "max mean z " + sci(mean_z) + ", max covariance rel. error " + sci(cov_rel)};
}

CheckResult check_cfg_direction(const OracleSuiteOptions &opt) {
    const NoiseSchedule sched = make_schedule(ScheduleSpec{});
    const auto mix = two_class_mixture();
    const AnalyticEpsModel model(mix, sched);
    const Vec axis = (mix[1].gaussian.mu - mix[0].gaussian.mu).normalized();
    GuidanceConfig gc;
    gc.mode = GuidanceMode::cfg;
    gc.w = 1.0;
    gc.steps = 200;
    const PromptSpec p{{kFirstClassToken + 1}};
    const Mat x = guided_sample(model, model, p, p, gc, sched, 2, opt.guided_chains, derive_seed(opt.seed, {7}));
    const Vec proj = x.transpose() * axis;
    const double n = static_cast<double>(proj.size());
    const double mean = proj.mean();
    const double sd = std::sqrt((proj.array() - mean).square().sum() / (n - 1.0));
    const double cond = mix[1].gaussian.mu.dot(axis);
    const double z = (mean - cond) / (sd / std::sqrt(n));
    return {"cfg pushes samples beyond the conditional mean along the class axis", z > 3.0,
            "shift " + sci(mean - cond) + " (" + sci(z) + " standard errors)"};
}

} // namespace

std::vector<CheckResult> run_oracle_suite(const OracleSuiteOptions &opt) {
    return {check_schedule(),           check_cfg_collapse(opt),  check_affine(opt),
            check_score_identity(opt),  check_optimal_eps(opt),   check_mixture_score(opt),
            check_sampler_moments(opt), check_cfg_direction(opt)};
}

} // namespace hld

#include "hld/core_math.hpp"

#include <cmath>
#include <string>

namespace hld {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    alpha_bars_.resize(betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
        prod *= 1.0 - betas_[i];
        alpha_bars_[i] = prod;
    }
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    require(!betas.empty(), "schedule needs at least one step");
    for (double b : betas) {
        require(b > 0.0 && b < 1.0, "beta must lie in (0, 1), got " + std::to_string(b));
    }
    return NoiseSchedule(std::move(betas));
}

double NoiseSchedule::beta(int t) const {
    require(t >= 1 && t <= T(), "step index out of range: " + std::to_string(t));
    return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    require(t >= 0 && t <= T(), "step index out of range: " + std::to_string(t));
    return t == 0 ? 1.0 : alpha_bars_[t - 1];
}

double NoiseSchedule::alpha(int t) const { return std::sqrt(alpha_bar(t)); }

double NoiseSchedule::sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

double NoiseSchedule::posterior_variance(int t) const {
    return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max) {
    require(kind == ScheduleKind::linear, "only the linear schedule is supported");
    require(T >= 1, "schedule needs T >= 1");
    require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
            "schedule needs 0 < beta_min <= beta_max < 1");
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        betas[i] = beta_min + frac * (beta_max - beta_min);
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

NoiseSchedule make_schedule(const ScheduleSpec &spec) {
    return make_schedule(spec.kind, spec.T, spec.beta_min, spec.beta_max);
}

RespacedSchedule respace(const NoiseSchedule &sched, int steps) {
    require(steps >= 1 && steps <= sched.T(), "inference steps must lie in [1, T]");
    const int stride = sched.T() / steps;
    RespacedSchedule out{sched, {}};
    if (steps == sched.T()) {
        for (int t = 1; t <= steps; ++t) {
            out.timesteps.push_back(t);
        }
        return out;
    }
    out.timesteps.resize(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        out.timesteps[i] = sched.T() - (steps - 1 - i) * stride;
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    double prev = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double ab = sched.alpha_bar(out.timesteps[i]);
        betas[i] = 1.0 - ab / prev;
        prev = ab;
    }
    out.schedule = NoiseSchedule::from_betas(std::move(betas));
    return out;
}

Mat forward_diffuse(const Mat &x0, int t, const Mat &eps, const NoiseSchedule &sched) {
    require_same_shape(x0, eps, "forward_diffuse");
    require(t >= 1 && t <= sched.T(), "forward_diffuse: step out of range");
    return sched.alpha(t) * x0 + sched.sigma(t) * eps;
}

Mat eps_to_score(const Mat &eps, double sigma_t) {
    require(sigma_t > 0.0, "eps_to_score: sigma_t must be positive");
    return -eps / sigma_t;
}

Mat score_to_eps(const Mat &score, double sigma_t) {
    require(sigma_t > 0.0, "score_to_eps: sigma_t must be positive");
    return -sigma_t * score;
}

Mat reverse_step(const Mat &x_t, const Mat &eps_hat, int t, const NoiseSchedule &sched, const Mat *noise) {
    require_same_shape(x_t, eps_hat, "reverse_step");
    require(t >= 1 && t <= sched.T(), "reverse_step: step out of range");
    require(!(t == 1 && noise != nullptr), "reverse_step: noise must be absent at t = 1");
    const double beta = sched.beta(t);
    Mat mean = (x_t - (beta / sched.sigma(t)) * eps_hat) / std::sqrt(1.0 - beta);
    if (noise != nullptr) {
        require_same_shape(x_t, *noise, "reverse_step noise");
        mean += std::sqrt(sched.posterior_variance(t)) * (*noise);
    }
    return mean;
}

} // namespace hld

#pragma once

// Variance-preserving noise schedules and the ancestral DDPM step.

#include "hld/common.hpp"

#include <span>
#include <vector>

namespace hld {

enum class ScheduleKind { linear };

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::linear;
    int T = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
};

// Steps are 1-based: index t in [1, T]; alpha_bar(0) == 1 is the clean-data case.
class NoiseSchedule {
public:
    // Builds a schedule from explicit betas. Used for respaced (strided) chains.
    static NoiseSchedule from_betas(std::vector<double> betas);

    int T() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const;
    double alpha_bar(int t) const;
    double alpha(int t) const;
    double sigma(int t) const;
    // Posterior variance (beta tilde) for q(x_{t-1} | x_t, x_0).
    double posterior_variance(int t) const;

    std::span<const double> betas() const { return betas_; }
    std::span<const double> alpha_bars() const { return alpha_bars_; }

private:
    explicit NoiseSchedule(std::vector<double> betas);

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max);
NoiseSchedule make_schedule(const ScheduleSpec &spec);

// Strided sub-chain over the training schedule: `timesteps[i]` is the training step that
// sub-step i+1 corresponds to, and `schedule` has betas chosen so its alpha_bars match.
struct RespacedSchedule {
    NoiseSchedule schedule;
    std::vector<int> timesteps;
};

// Trailing spacing with stride floor(T / steps): the last sub-step lands on T.
RespacedSchedule respace(const NoiseSchedule &sched, int steps);

// x_t = alpha_t x0 + sigma_t eps. Operates column-wise on batches.
Mat forward_diffuse(const Mat &x0, int t, const Mat &eps, const NoiseSchedule &sched);

Mat eps_to_score(const Mat &eps, double sigma_t);
Mat score_to_eps(const Mat &score, double sigma_t);

// One ancestral step t -> t-1. `noise` must be null at t == 1 and present otherwise
// for a stochastic step; passing null at t > 1 returns the posterior mean.
Mat reverse_step(const Mat &x_t, const Mat &eps_hat, int t, const NoiseSchedule &sched, const Mat *noise);

} // namespace hld

#pragma once

// Closed-form diffusion quantities for Gaussian and Gaussian-mixture data.

#include "hld/common.hpp"
#include "hld/core_math.hpp"
#include "hld/denoiser.hpp"

#include <optional>
#include <span>
#include <vector>

namespace hld {

struct GaussianSpec {
    Vec mu;
    Mat sigma;
    std::optional<int> class_id;

    void validate() const;
};

struct MixtureComponent {
    double weight;
    GaussianSpec gaussian;
};

// N(alpha_t mu, alpha_t^2 Sigma + sigma_t^2 I); t = 0 returns g unchanged.
GaussianSpec diffused_marginal(const GaussianSpec &g, int t, const NoiseSchedule &sched);

double gaussian_log_density(const Vec &x, const GaussianSpec &g);
// Columns of x are evaluated independently.
Mat gaussian_score(const Mat &x, const GaussianSpec &g);

// Optimal epsilon-predictor sigma_t (alpha^2 Sigma + sigma^2 I)^-1 (x_t - alpha mu), per column.
Mat optimal_eps(const Mat &x_t, int t, const GaussianSpec &g, const NoiseSchedule &sched);

double mixture_log_density(const Vec &x_t, int t, std::span<const MixtureComponent> components,
                           const NoiseSchedule &sched);
Mat mixture_score(const Mat &x_t, int t, std::span<const MixtureComponent> components, const NoiseSchedule &sched);

// Epsilon-predictor that is exact for class-conditional Gaussian data: a class prompt
// maps to its component, and the [NULL] prompt to the full mixture.
class AnalyticEpsModel final : public EpsModel {
public:
    AnalyticEpsModel(std::vector<MixtureComponent> components, const NoiseSchedule &sched);
    Mat predict(const Mat &x_t, int t, const PromptSpec &prompt) const override;

private:
    std::vector<MixtureComponent> components_;
    NoiseSchedule sched_;
};

// Solves S x = b for a small symmetric positive-definite S (closed form for 1-3 dims,
// pivoted elimination above). Throws NumericalError when S is singular.
Mat solve_spd(const Mat &S, const Mat &b);

} // namespace hld

#include "hld/oracle.hpp"

#include <cmath>
#include <numbers>

namespace hld {

namespace {

constexpr double kSingular = 1e-300;

// Closed-form inverse for 1x1 .. 3x3 matrices via the adjugate.
std::optional<Mat> small_inverse(const Mat &S) {
    const auto n = S.rows();
    if (n == 1) {
        if (std::abs(S(0, 0)) < kSingular) {
            throw NumericalError("singular 1x1 system");
        }
        return Mat::Constant(1, 1, 1.0 / S(0, 0));
    }
    if (n == 2) {
        const double det = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
        if (std::abs(det) < kSingular) {
            throw NumericalError("singular 2x2 system");
        }
        Mat inv(2, 2);
        inv << S(1, 1), -S(0, 1), -S(1, 0), S(0, 0);
        return Mat(inv / det);
    }
    if (n == 3) {
        Mat adj(3, 3);
        adj(0, 0) = S(1, 1) * S(2, 2) - S(1, 2) * S(2, 1);
        adj(0, 1) = S(0, 2) * S(2, 1) - S(0, 1) * S(2, 2);
        adj(0, 2) = S(0, 1) * S(1, 2) - S(0, 2) * S(1, 1);
        adj(1, 0) = S(1, 2) * S(2, 0) - S(1, 0) * S(2, 2);
        adj(1, 1) = S(0, 0) * S(2, 2) - S(0, 2) * S(2, 0);
        adj(1, 2) = S(0, 2) * S(1, 0) - S(0, 0) * S(1, 2);
        adj(2, 0) = S(1, 0) * S(2, 1) - S(1, 1) * S(2, 0);
        adj(2, 1) = S(0, 1) * S(2, 0) - S(0, 0) * S(2, 1);
        adj(2, 2) = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
        const double det = S(0, 0) * adj(0, 0) + S(0, 1) * adj(1, 0) + S(0, 2) * adj(2, 0);
        if (std::abs(det) < kSingular) {
            throw NumericalError("singular 3x3 system");
        }
        return Mat(adj / det);
    }
    return std::nullopt;
}

// Gaussian elimination with partial pivoting; returns the solution and log|det S|.
Mat eliminate(Mat S, Mat b, double *log_abs_det) {
    const auto n = S.rows();
    double ld = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
        Eigen::Index piv = k;
        for (Eigen::Index i = k + 1; i < n; ++i) {
            if (std::abs(S(i, k)) > std::abs(S(piv, k))) {
                piv = i;
            }
        }
        if (std::abs(S(piv, k)) < kSingular) {
            throw NumericalError("singular system in Gaussian elimination");
        }
        if (piv != k) {
            S.row(k).swap(S.row(piv));
            b.row(k).swap(b.row(piv));
        }
        ld += std::log(std::abs(S(k, k)));
        for (Eigen::Index i = k + 1; i < n; ++i) {
            const double f = S(i, k) / S(k, k);
            S.row(i) -= f * S.row(k);
            b.row(i) -= f * b.row(k);
        }
    }
    Mat x(n, b.cols());
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        x.row(i) = (b.row(i) - S.row(i).tail(n - 1 - i) * x.bottomRows(n - 1 - i)) / S(i, i);
    }
    if (log_abs_det != nullptr) {
        *log_abs_det = ld;
    }
    return x;
}

double log_det_spd(const Mat &S) {
    double ld = 0.0;
    eliminate(S, Mat::Zero(S.rows(), 1), &ld);
    return ld;
}

} // namespace

void GaussianSpec::validate() const {
    require(mu.size() >= 1, "gaussian: empty mean");
    require(sigma.rows() == mu.size() && sigma.cols() == mu.size(), "gaussian: covariance shape mismatch");
    require((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + sigma.cwiseAbs().maxCoeff()),
            "gaussian: covariance must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(sigma, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() > 0.0, "gaussian: covariance must be positive definite");
}

Mat solve_spd(const Mat &S, const Mat &b) {
    require(S.rows() == S.cols() && S.rows() == b.rows(), "solve_spd: shape mismatch");
    if (auto inv = small_inverse(S)) {
        return (*inv) * b;
    }
    return eliminate(S, b, nullptr);
}

GaussianSpec diffused_marginal(const GaussianSpec &g, int t, const NoiseSchedule &sched) {
    const double a = sched.alpha(t);
    const double s = sched.sigma(t);
    const auto n = g.mu.size();
    return GaussianSpec{a * g.mu, a * a * g.sigma + s * s * Mat::Identity(n, n), g.class_id};
}

double gaussian_log_density(const Vec &x, const GaussianSpec &g) {
    require(x.size() == g.mu.size(), "gaussian_log_density: dimension mismatch");
    const Vec r = x - g.mu;
    const double quad = r.dot(solve_spd(g.sigma, r).col(0));
    const double n = static_cast<double>(x.size());
    return -0.5 * quad - 0.5 * log_det_spd(g.sigma) - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

Mat gaussian_score(const Mat &x, const GaussianSpec &g) {
    require(x.rows() == g.mu.size(), "gaussian_score: dimension mismatch");
    return -solve_spd(g.sigma, x.colwise() - g.mu);
}

Mat optimal_eps(const Mat &x_t, int t, const GaussianSpec &g, const NoiseSchedule &sched) {
    require(t >= 1 && t <= sched.T(), "optimal_eps: step out of range");
    const GaussianSpec m = diffused_marginal(g, t, sched);
    return score_to_eps(gaussian_score(x_t, m), sched.sigma(t));
}

double mixture_log_density(const Vec &x_t, int t, std::span<const MixtureComponent> components,
                           const NoiseSchedule &sched) {
    require(!components.empty(), "mixture: no components");
    std::vector<double> logs;
    for (const auto &c : components) {
        require(c.weight > 0.0, "mixture: weights must be positive");
        logs.push_back(std::log(c.weight) + gaussian_log_density(x_t, diffused_marginal(c.gaussian, t, sched)));
    }
    double mx = logs.front();
    for (double l : logs) {
        mx = std::max(mx, l);
    }
    double s = 0.0;
    for (double l : logs) {
        s += std::exp(l - mx);
    }
    return mx + std::log(s);
}

Mat mixture_score(const Mat &x_t, int t, std::span<const MixtureComponent> components, const NoiseSchedule &sched) {
    require(!components.empty(), "mixture: no components");
    double wsum = 0.0;
    for (const auto &c : components) {
        require(c.weight > 0.0, "mixture: weights must be positive");
        require(c.gaussian.mu.size() == x_t.rows(), "mixture: dimension mismatch");
        wsum += c.weight;
    }
    require(std::abs(wsum - 1.0) < 1e-9, "mixture: weights must sum to 1");
    const auto K = static_cast<Eigen::Index>(components.size());
    const auto n = x_t.rows();
    // Per-component log-weight, log-normalizer, and precision-weighted residuals.
    Mat logs(K, x_t.cols());
    std::vector<Mat> scores;
    for (Eigen::Index k = 0; k < K; ++k) {
        const GaussianSpec m = diffused_marginal(components[k].gaussian, t, sched);
        const Mat r = x_t.colwise() - m.mu;
        Mat prec_r = solve_spd(m.sigma, r);
        const double norm = std::log(components[k].weight) - 0.5 * log_det_spd(m.sigma) -
                            0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
        logs.row(k) = (-0.5 * r.cwiseProduct(prec_r).colwise().sum()).array() + norm;
        scores.push_back(-prec_r);
    }
    Mat out = Mat::Zero(n, x_t.cols());
    for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
        const double mx = logs.col(j).maxCoeff();
        const Vec w = (logs.col(j).array() - mx).exp();
        const double z = w.sum();
        for (Eigen::Index k = 0; k < K; ++k) {
            out.col(j) += (w[k] / z) * scores[k].col(j);
        }
    }
    return out;
}

AnalyticEpsModel::AnalyticEpsModel(std::vector<MixtureComponent> components, const NoiseSchedule &sched)
    : components_(std::move(components)), sched_(sched) {
    require(!components_.empty(), "analytic model: no components");
    for (const auto &c : components_) {
        c.gaussian.validate();
    }
}

Mat AnalyticEpsModel::predict(const Mat &x_t, int t, const PromptSpec &prompt) const {
    const double sigma = sched_.sigma(t);
    if (prompt.tokens.size() == 1 && prompt.tokens[0] == kNullToken) {
        return score_to_eps(mixture_score(x_t, t, components_, sched_), sigma);
    }
    for (int tok : prompt.tokens) {
        for (const auto &c : components_) {
            if (c.gaussian.class_id && kFirstClassToken + *c.gaussian.class_id == tok) {
                return optimal_eps(x_t, t, c.gaussian, sched_);
            }
        }
    }
    throw UsageError("analytic model: prompt names no known class");
}

} // namespace hld

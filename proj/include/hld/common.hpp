#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hld {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Error hierarchy. The CLI maps each kind onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad arguments, shapes, or configuration values (exit 2).
class UsageError : public Error {
public:
    using Error::Error;
};

// Non-finite losses or singular systems (exit 3).
class NumericalError : public Error {
public:
    using Error::Error;
};

// Corrupt, truncated, or version-mismatched files (exit 4).
class FormatError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string &msg) {
    if (!cond) {
        throw UsageError(msg);
    }
}

inline void require_same_shape(const Mat &a, const Mat &b, const char *what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw UsageError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
    }
}

inline double silu(double u) { return u / (1.0 + std::exp(-u)); }

inline double silu_grad(double u) {
    const double s = 1.0 / (1.0 + std::exp(-u));
    return s * (1.0 + u * (1.0 - s));
}

} // namespace hld

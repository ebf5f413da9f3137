#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "uniforget/errors.hpp"

namespace uniforget {

/// Adam with bias correction.
class Adam {
public:
    explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {
        require(lr > 0.0, "Adam: learning rate must be > 0");
    }

    void step(std::span<double> theta, std::span<const double> grad, double lr_scale = 1.0) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
            theta[i] -= lr_scale * lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<double> m_, v_;
};

/// Momentum-free per-coordinate scaling (RMSProp with bias-corrected second
/// moment). A coordinate whose gradient is exactly zero does not move.
class RmsProp {
public:
    explicit RmsProp(std::size_t n, double lr, double rho = 0.99, double eps = 1e-8)
        : lr_(lr), rho_(rho), eps_(eps), v_(n, 0.0) {
        require(lr > 0.0, "RmsProp: learning rate must be > 0");
    }

    void step(std::span<double> theta, std::span<const double> grad) {
        ++t_;
        const double c = 1.0 - std::pow(rho_, t_);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            v_[i] = rho_ * v_[i] + (1.0 - rho_) * grad[i] * grad[i];
            theta[i] -= lr_ * grad[i] / (std::sqrt(v_[i] / c) + eps_);
        }
    }

private:
    double lr_, rho_, eps_;
    long t_ = 0;
    std::vector<double> v_;
};

}  // namespace uniforget

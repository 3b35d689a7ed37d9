#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "magdi/tensor.hpp"

namespace magdi {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Reads Parameter::grad, leaves it untouched.
class Adam {
   public:
    Adam(std::vector<ad::Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
        if (!(config_.lr > 0.0)) {
            throw std::invalid_argument("Adam: learning rate must be positive");
        }
        for (auto* p : params_) {
            m_.emplace_back(p->value.size(), 0.0);
            v_.emplace_back(p->value.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto value = params_[k]->value.data();
            auto grad = params_[k]->grad.data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < value.size(); ++i) {
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
                value[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
            }
        }
    }

    long steps() const { return t_; }

   private:
    std::vector<ad::Parameter*> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace magdi

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dsp/errors.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

// v = momentum * v + g ; w -= lr * v. Velocity slots follow call order, so a
// stepper must always be fed the same parameter list.
class SgdMomentum {
public:
    explicit SgdMomentum(double momentum) : momentum_(momentum) {}

    void step(std::vector<Tensor>& params, double lr) {
        if (velocity_.empty()) {
            velocity_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                velocity_[i].assign(params[i].data().size(), 0.0);
            }
        }
        if (velocity_.size() != params.size()) {
            throw ContractError("SgdMomentum: parameter list changed between steps");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& v = velocity_[i];
            auto& w = params[i].data();
            const auto& g = params[i].grad();
            for (std::size_t j = 0; j < w.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j];
                w[j] -= lr * v[j];
            }
        }
    }

private:
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].data().size(), 0.0);
                v_[i].assign(params[i].data().size(), 0.0);
            }
        }
        if (m_.size() != params.size()) {
            throw ContractError("Adam: parameter list changed between steps");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i].data();
            const auto& g = params[i].grad();
            for (std::size_t j = 0; j < w.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                const double mh = m_[i][j] / c1;
                const double vh = v_[i][j] / c2;
                w[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace dsp

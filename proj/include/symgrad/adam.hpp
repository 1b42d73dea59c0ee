// adam.hpp - Adam update over a flat parameter vector.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace symgrad {

struct AdamSettings {
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    Adam() = default;
    Adam(std::size_t n, AdamSettings s) : s_(s), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grad) {
        if (params.size() != m_.size() || grad.size() != m_.size()) {
            throw std::invalid_argument("Adam::step: size mismatch");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = s_.beta1 * m_[i] + (1.0 - s_.beta1) * grad[i];
            v_[i] = s_.beta2 * v_[i] + (1.0 - s_.beta2) * grad[i] * grad[i];
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            params[i] -= s_.learning_rate * mhat / (std::sqrt(vhat) + s_.eps);
        }
    }

    [[nodiscard]] long iteration() const { return t_; }
    [[nodiscard]] const std::vector<double> &first_moment() const { return m_; }
    [[nodiscard]] const std::vector<double> &second_moment() const { return v_; }

  private:
    AdamSettings s_;
    std::vector<double> m_;
    std::vector<double> v_;
    long t_ = 0;
};

} // namespace symgrad

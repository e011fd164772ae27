#pragma once

#include <cmath>
#include <vector>

#include "simdiffrec/nn.hpp"

namespace simdiffrec::optim {

using ag::Matrix;

/// Adam without weight decay. Parameters without a gradient this step are
/// treated as having a zero gradient.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(nn::ParamList params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& [name, p] : params_) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (p.has_grad()) {
        const Matrix& g = p.grad();
        m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
        v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
      } else {
        m_[i] *= opt_.beta1;
        v_[i] *= opt_.beta2;
      }
      p.mutable_value().array() -= opt_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opt_.eps);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  long steps() const { return t_; }

 private:
  nn::ParamList params_;
  Options opt_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace simdiffrec::optim

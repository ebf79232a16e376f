#include "ppbench/adam.hpp"

#include <cmath>

#include "ppbench/errors.hpp"

namespace ppb {

AdamState::AdamState(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), opts_(options) {
  if (!(opts_.lr > 0.0)) throw ConfigError("Adam learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamState::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad())
      throw ConfigError("adam step: parameter " + std::to_string(i) + " " + shape_str(params_[i].shape()) +
                        " has no gradient");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    const auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
      v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
      w[k] -= opts_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opts_.eps);
    }
  }
}

void AdamState::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace ppb

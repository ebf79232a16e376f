#pragma once

#include <cstdint>
#include <vector>

#include "ppbench/tensor.hpp"

namespace ppb {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over one parameter group.
class AdamState {
 public:
  AdamState(std::vector<Tensor> params, AdamOptions options);

  /// One update from the current grads. Throws ConfigError if any parameter
  /// has no populated grad. Grads are left untouched.
  void step();
  void zero_grad();

  [[nodiscard]] std::uint64_t step_count() const { return t_; }
  [[nodiscard]] const AdamOptions& options() const { return opts_; }
  [[nodiscard]] const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace ppb

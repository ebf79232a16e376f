#pragma once

// Central finite-difference oracle for tape gradients. Test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ppbench/rng.hpp"
#include "ppbench/tensor.hpp"

namespace ppb::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// over every element of every input, worst input reported.
inline double gradcheck(std::vector<Tensor> inputs, const ScalarFn& f, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    {
      NoGradGuard ng;
      auto data = t.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + h;
        const double up = f(inputs).item();
        data[i] = saved - h;
        const double down = f(inputs).item();
        data[i] = saved;
        numeric[i] = (up - down) / (2.0 * h);
      }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::sqrt(std::max(na, nn));
    const double rel = denom > 1e-12 ? std::sqrt(diff) / denom : std::sqrt(diff);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace ppb::testing

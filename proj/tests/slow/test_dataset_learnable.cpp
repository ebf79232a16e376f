// The default synthetic dataset must be learnable by a plain small CNN
// (conv blocks, global max pool, linear layer), independent of the
// prototype machinery.

#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "ppbench/adam.hpp"
#include "ppbench/model.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/rng.hpp"
#include "ppbench/synthdata.hpp"

using namespace ppb;

namespace {

struct PlainCnn {
  std::vector<Tensor> kernels, biases;
  Tensor fc_w, fc_b;

  PlainCnn(int classes, Rng& rng) {
    const std::size_t widths[] = {3, 16, 32, 64};
    for (int b = 0; b < 3; ++b) {
      const auto cin = widths[b], cout = widths[b + 1];
      const double sd = std::sqrt(2.0 / static_cast<double>(cin * 9));
      std::vector<double> w(cout * cin * 9);
      for (auto& v : w) v = rng.normal(0.0, sd);
      kernels.push_back(Tensor::from({cout, cin, 3, 3}, w, true));
      biases.push_back(Tensor::zeros({cout}, true));
    }
    std::vector<double> w(64 * static_cast<std::size_t>(classes));
    for (auto& v : w) v = rng.normal(0.0, std::sqrt(1.0 / 64));
    fc_w = Tensor::from({64, static_cast<std::size_t>(classes)}, w, true);
    fc_b = Tensor::zeros({static_cast<std::size_t>(classes)}, true);
  }

  [[nodiscard]] std::vector<Tensor> params() const {
    auto p = kernels;
    p.insert(p.end(), biases.begin(), biases.end());
    p.push_back(fc_w);
    p.push_back(fc_b);
    return p;
  }

  [[nodiscard]] Tensor logits(const Tensor& x) const {
    Tensor h = x;
    for (int b = 0; b < 3; ++b) h = ops::max_pool2d(ops::relu(ops::conv2d(h, kernels[b], biases[b], 1, 1)), 2, 2);
    return ops::add(ops::matmul(ops::spatial_max(h).values, fc_w), fc_b);
  }
};

}  // namespace

TEST_CASE("a plain CNN exceeds 90% test accuracy on the default dataset") {
  const auto ds = data::Dataset::from_generated(data::generate_images(data::GeneratorConfig{}));
  Rng rng(1);
  PlainCnn net(ds.num_classes(), rng);
  AdamState opt(net.params(), {.lr = 3e-3});
  const auto& train = ds.train();
  double acc = 0.0;
  for (int epoch = 1; epoch <= 10 && acc <= 0.9; ++epoch) {
    const auto order = ds.shuffled(data::Split::Train, Rng(7).split(static_cast<std::uint64_t>(epoch))());
    for (std::size_t start = 0; start < order.size(); start += 16) {
      std::vector<const Tensor*> px;
      std::vector<int> labels;
      for (std::size_t i = start; i < std::min(order.size(), start + 16); ++i) {
        px.push_back(&train[order[i]].pixels);
        labels.push_back(train[order[i]].label);
      }
      ops::cross_entropy_logits(net.logits(model::normalize_batch(px)), labels).backward();
      opt.step();
      opt.zero_grad();
    }
    std::size_t correct = 0;
    {
      NoGradGuard ng;
      for (std::size_t start = 0; start < ds.test().size(); start += 64) {
        std::vector<const Tensor*> px;
        const auto end = std::min(ds.test().size(), start + 64);
        for (std::size_t i = start; i < end; ++i) px.push_back(&ds.test()[i].pixels);
        const auto out = net.logits(model::normalize_batch(px));
        const auto K = static_cast<std::size_t>(ds.num_classes());
        for (std::size_t i = start; i < end; ++i) {
          std::size_t best = 0;
          for (std::size_t k = 1; k < K; ++k)
            if (out.data()[(i - start) * K + k] > out.data()[(i - start) * K + best]) best = k;
          correct += static_cast<int>(best) == ds.test()[i].label;
        }
      }
    }
    acc = static_cast<double>(correct) / static_cast<double>(ds.test().size());
    MESSAGE("epoch " << epoch << " test accuracy " << acc);
  }
  CHECK(acc > 0.9);
}

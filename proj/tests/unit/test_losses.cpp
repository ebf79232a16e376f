#include <cmath>
#include <vector>

#include "doctest.h"
#include "ppbench/errors.hpp"
#include "ppbench/losses.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/rng.hpp"
#include "support/gradcheck.hpp"

using namespace ppb;
using ppb::testing::gradcheck;
using ppb::testing::random_tensor;

namespace {

// Two units on a 1x2 grid with 2 channels; layout [1,D,H,W].
Tensor two_units(double a0, double a1, double b0, double b1, bool grad = false) {
  return Tensor::from({1, 2, 1, 2}, {a0, b0, a1, b1}, grad);
}

model::PrototypeBank bank_of(std::size_t K, std::size_t N, std::vector<double> rows, std::size_t D) {
  return {Tensor::from({K * N, D}, std::move(rows)), {static_cast<int>(K), static_cast<int>(N)}};
}

}  // namespace

TEST_CASE("align loss: hand-evaluated two-unit case") {
  // t(z_s) = I, t(z_d) = [[1,.5],[.5,1]]
  const auto zs = two_units(1, 0, 0, 1);
  const auto zd = two_units(1, 0, 0.5, std::sqrt(0.75));
  CHECK(losses::align_loss(zs, zd, 0.1).item() == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("align loss: identical structures and threshold boundary give zero") {
  const auto zs = two_units(1, 0, 0.6, 0.8);
  CHECK(losses::align_loss(zs, zs, 0.1).item() == 0.0);
  // Units (1,0) and (3,4)/5: every off-diagonal |difference| is exactly 0.6.
  const auto zd = two_units(1, 0, 3, 4);
  CHECK(losses::align_loss(two_units(1, 0, 0, 1), zd, 3.0 / 5.0).item() == 0.0);
}

TEST_CASE("align loss: detached shallow side, monotone in gamma") {
  Rng rng(3);
  const auto zs = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
  const auto zd = random_tensor({2, 5, 2, 2}, rng, -1, 1, true);
  const auto loss = losses::align_loss(zs, zd, 0.05);
  REQUIRE(loss.item() > 0.0);
  loss.backward();
  CHECK_FALSE(zs.has_grad());
  double norm = 0;
  for (double g : zd.grad()) norm += g * g;
  CHECK(norm > 0.0);

  NoGradGuard ng;
  double prev = losses::align_loss(zs, zd, 0.0).item();
  for (double gamma : {0.05, 0.1, 0.3, 0.7, 1.5}) {
    const double v = losses::align_loss(zs, zd, gamma).item();
    CHECK(v <= prev);
    CHECK(v >= 0.0);
    prev = v;
  }
  CHECK(prev == 0.0);
}

TEST_CASE("align loss rejects a non-integer spatial ratio") {
  CHECK_THROWS_AS(losses::align_loss(Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({1, 2, 2, 2}), 0.1), ShapeError);
}

TEST_CASE("shallow patch units group aligned patches") {
  // [1,1,2,4] shallow over a 1x2 deep grid: patches are the left and right 2x2 blocks.
  const auto zs = Tensor::from({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto u = losses::shallow_patch_units(zs, 1, 2);
  REQUIRE(u.shape() == Shape{1, 2, 4});
  CHECK(std::vector<double>(u.data().begin(), u.data().end()) == std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8});
}

TEST_CASE("ortho loss examples") {
  CHECK(losses::ortho_loss(bank_of(2, 2, {1, 0, 0, 1, 0, 1, 1, 0}, 2)).item() == 0.0);
  const double r = 1 / std::sqrt(2.0);
  CHECK(losses::ortho_loss(bank_of(1, 2, {r, r, r, r}, 2)).item() == doctest::Approx(2.0).epsilon(1e-12));
  Rng rng(5);
  const auto P = random_tensor({6, 4}, rng, -1, 1);
  const model::PrototypeBank a{P, {2, 3}};
  // Swap rows 0 and 2 within class 0.
  std::vector<double> v(P.data().begin(), P.data().end());
  for (std::size_t d = 0; d < 4; ++d) std::swap(v[d], v[8 + d]);
  const model::PrototypeBank b{Tensor::from({6, 4}, v), {2, 3}};
  CHECK(losses::ortho_loss(a).item() == doctest::Approx(losses::ortho_loss(b).item()).epsilon(1e-12));
}

TEST_CASE("cluster and separation losses") {
  const model::PrototypeAllocation alloc{2, 2};
  const int label[] = {0};
  const auto g = Tensor::from({1, 4}, {0.2, 0.9, 0.3, 0.1});
  CHECK(losses::cluster_loss(g, label, alloc).item() == doctest::Approx(-0.9));
  CHECK(losses::separation_loss(g, label, alloc).item() == doctest::Approx(0.3));
  const auto zero = Tensor::zeros({1, 4});
  CHECK(losses::cluster_loss(zero, label, alloc).item() == 0.0);
  CHECK(losses::separation_loss(zero, label, alloc).item() == 0.0);

  // Lowering a non-maximal other-class activation leaves L_sep unchanged.
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(4);
    for (auto& x : v) x = rng.uniform(-1, 1);
    const double base = losses::separation_loss(Tensor::from({1, 4}, v), label, alloc).item();
    const std::size_t lo = v[2] < v[3] ? 2 : 3;
    v[lo] -= rng.uniform(0, 1);
    CHECK(losses::separation_loss(Tensor::from({1, 4}, v), label, alloc).item() == base);
  }
}

TEST_CASE("total loss: zero weights reduce to cross-entropy, defaults") {
  const losses::LossWeights defaults;
  CHECK(defaults.align == 0.5);
  CHECK(defaults.gamma == 0.1);
  model::ModelConfig cfg;
  cfg.image_size = 16;
  cfg.num_classes = 2;
  cfg.protos_per_class = 2;
  cfg.proto_dim = 4;
  cfg.channels = {2, 3, 3};
  const model::PrototypeNet net(cfg);
  Rng rng(1);
  const auto x = random_tensor({2, 3, 16, 16}, rng, -1, 1);
  const int labels[] = {0, 1};
  const auto fwd = net.forward(x);
  const losses::LossWeights zero{0, 0, 0, 0, 0.1};
  const auto t = losses::total_loss(fwd, labels, net.bank(), zero, true);
  CHECK(t.total.item() == t.ce.item());
  CHECK_THROWS_AS((losses::LossWeights{-1, 0, 0, 0, 0}.validate()), ConfigError);
}

TEST_CASE("every loss matches finite differences") {
  Rng rng(21);
  const model::PrototypeAllocation alloc{2, 2};
  const int labels[] = {1, 0, 1};
  auto g = random_tensor({3, 4}, rng, -1, 1, true);
  CHECK(gradcheck({g}, [&](const std::vector<Tensor>&) { return ops::cross_entropy_logits(g, labels); }) < 1e-4);
  CHECK(gradcheck({g}, [&](const std::vector<Tensor>&) { return losses::cluster_loss(g, labels, alloc); }) < 1e-4);
  CHECK(gradcheck({g}, [&](const std::vector<Tensor>&) { return losses::separation_loss(g, labels, alloc); }) < 1e-4);
  auto P = random_tensor({4, 3}, rng, -1, 1, true);
  CHECK(gradcheck({P}, [&](const std::vector<Tensor>&) { return losses::ortho_loss({P, alloc}); }) < 1e-4);
  auto zs = random_tensor({2, 3, 4, 4}, rng, -1, 1);
  auto zd = random_tensor({2, 3, 2, 2}, rng, -1, 1, true);
  CHECK(gradcheck({zd}, [&](const std::vector<Tensor>&) { return losses::align_loss(zs, zd, 0.05); }) < 1e-4);
}

TEST_CASE("total loss matches finite differences on a small model") {
  model::ModelConfig cfg;
  cfg.image_size = 16;
  cfg.num_classes = 2;
  cfg.protos_per_class = 2;
  cfg.proto_dim = 3;
  cfg.channels = {2, 2, 2};
  cfg.seed = 4;
  for (auto head : {model::HeadKind::SA, model::HeadKind::FC}) {
    cfg.head = head;
    const model::PrototypeNet net(cfg);
    Rng rng(2);
    const auto x = random_tensor({2, 3, 16, 16}, rng, -1, 1);
    const int labels[] = {0, 1};
    auto params = net.addon_parameters();
    // Keep add-on units away from the zero vector, where unit normalisation is discontinuous.
    for (std::size_t i : {1, 3})
      for (auto& b : params[i].mutable_data()) b = rng.uniform(0.2, 0.6);
    for (const auto& p : net.prototype_parameters()) params.push_back(p);
    for (const auto& p : net.head_parameters()) params.push_back(p);
    const auto bb = net.backbone_parameters();
    params.push_back(bb[6]);  // last conv weight
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double err = gradcheck({params[i]}, [&](const std::vector<Tensor>&) {
        return losses::total_loss(net.forward(x), labels, net.bank(), losses::LossWeights{}, true).total;
      });
      INFO("parameter " << i);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("fc convex objective") {
  const model::PrototypeAllocation alloc{2, 1};
  const model::FCHead head{Tensor::from({2, 2}, {1, -0.5, -0.5, 1})};
  CHECK(losses::off_class_l1(head, alloc).item() == 1.0);
  const model::FCHead diag{Tensor::from({2, 2}, {1, 0, 0, 1})};
  const auto logits = Tensor::from({1, 2}, {0.3, -0.2});
  const int label[] = {0};
  CHECK(losses::fc_convex_objective(logits, label, diag, alloc).item() ==
        ops::cross_entropy_logits(logits, label).item());
}

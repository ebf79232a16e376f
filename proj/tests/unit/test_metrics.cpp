#include <cmath>
#include <map>
#include <string>

#include "doctest.h"
#include "ppbench/errors.hpp"
#include "ppbench/metrics.hpp"
#include "ppbench/ops.hpp"
#include "support/metric_oracle.hpp"

using namespace ppb;
using namespace ppb::metrics;

namespace {

data::AnnotatedImage blank_image(int size, const std::vector<std::pair<int, int>>& points, int label = 0,
                                 const std::string& name = "") {
  data::AnnotatedImage img;
  const auto S = static_cast<std::size_t>(size);
  img.pixels = Tensor::zeros({3, S, S});
  img.label = label;
  img.file = name;
  for (std::size_t i = 0; i < points.size(); ++i) {
    data::PartAnnotation p;
    p.part_id = static_cast<int>(i);
    p.visible = points[i].first >= 0;
    p.x = points[i].first;
    p.y = points[i].second;
    img.parts.push_back(p);
  }
  return img;
}

/// Full-resolution map with a single peak.
Tensor peak_map(int size, int row, int col) {
  const auto S = static_cast<std::size_t>(size);
  auto t = Tensor::zeros({S, S});
  t.mutable_data()[static_cast<std::size_t>(row) * S + static_cast<std::size_t>(col)] = 1.0;
  return t;
}

/// Returns stored maps keyed by image file; `noisy` maps are served when the
/// input differs from the clean normalised pixels.
class TableModel final : public model::ActivationModel {
 public:
  TableModel(model::PrototypeAllocation a, int size) : alloc_(a), size_(static_cast<std::size_t>(size)) {}
  void set(const std::string& file, std::vector<Tensor> maps, std::vector<Tensor> noisy = {}) {
    clean_[file] = stack(maps);
    noisy_[file] = noisy.empty() ? clean_[file] : stack(noisy);
  }
  [[nodiscard]] const model::PrototypeAllocation& allocation() const override { return alloc_; }
  [[nodiscard]] Tensor activation_maps(const data::AnnotatedImage& img, const Tensor& input) const override {
    const auto clean = model::normalize_pixels(img.pixels);
    const bool same = std::equal(clean.data().begin(), clean.data().end(), input.data().begin());
    return same ? clean_.at(img.file) : noisy_.at(img.file);
  }

 private:
  Tensor stack(const std::vector<Tensor>& maps) const {
    std::vector<double> v;
    for (const auto& m : maps) v.insert(v.end(), m.data().begin(), m.data().end());
    return Tensor::from({maps.size(), size_, size_}, v);
  }
  model::PrototypeAllocation alloc_;
  std::size_t size_;
  std::map<std::string, Tensor> clean_, noisy_;
};

EvalSettings settings(int box, double mu = 0.8, int threads = 1) {
  EvalSettings s;
  s.box = {box, box};
  s.mu = mu;
  s.threads = threads;
  return s;
}

}  // namespace

TEST_CASE("box size follows the image side") {
  CHECK(BoxSize::from_ratio(0.321, 64).height == 21);
  CHECK(BoxSize::from_ratio(0.321, 224).height == 72);
  CHECK_THROWS_AS(BoxSize::from_ratio(0.0, 64), ConfigError);
}

TEST_CASE("bounding boxes are half-open and clipped") {
  const auto b = BoundingBox::around(0, 0, {21, 21}, 64, 64);
  CHECK(b.top == 0);
  CHECK(b.left == 0);
  CHECK(b.bottom == 11);
  CHECK(b.right == 11);
  CHECK(b.contains(10, 10));
  CHECK_FALSE(b.contains(11, 0));
  const auto c = BoundingBox::around(30, 40, {4, 4}, 64, 64);
  CHECK(c.contains(40, 30));  // the center is always inside
  CHECK(c.top == 28);
  CHECK(c.bottom == 32);
}

TEST_CASE("constant maps put the box in the top-left corner") {
  const auto box = locate_box(Tensor::full({8, 8}, 0.3), 64, 64, {21, 21});
  CHECK(box.center_row == 0);
  CHECK(box.center_col == 0);
}

TEST_CASE("corresponding part membership") {
  const auto img = blank_image(64, {{10, 10}});
  const auto map = peak_map(64, 10, 10);
  CHECK(corresponding_part(map, img, {21, 21}) == PartVector{1});
  CHECK(oracle::part_vector(map.data().data(), 64, 64, img, 21, 21) == std::vector<int>{1});
  const auto far = blank_image(64, {{40, 40}});
  CHECK(corresponding_part(map, far, {21, 21}) == PartVector{0});
  CHECK(oracle::part_vector(map.data().data(), 64, 64, far, 21, 21) == std::vector<int>{0});
  const auto hidden = blank_image(64, {{-1, -1}, {-1, -1}});
  CHECK(corresponding_part(map, hidden, {21, 21}) == PartVector{0, 0});

  // Every point of a 16x16 image against the brute-force oracle, for a coarse map.
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(16);
    for (auto& x : v) x = rng.uniform();
    const auto coarse = Tensor::from({4, 4}, v);
    const int bh = 1 + static_cast<int>(rng.below(16)), bw = 1 + static_cast<int>(rng.below(16));
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const auto im = blank_image(16, {{x, y}});
        CHECK(corresponding_part(coarse, im, {bh, bw})[0] == oracle::part_vector(v.data(), 4, 4, im, bh, bw)[0]);
      }
  }
}

TEST_CASE("consistency score on hand fixtures") {
  // Part 0 "head" at (5,5), part 1 "belly" at (25,25).
  TableModel m({1, 2}, 32);
  const auto i0 = blank_image(32, {{5, 5}, {25, 25}}, 0, "a");
  const auto i1 = blank_image(32, {{5, 5}, {25, 25}}, 0, "b");
  m.set("a", {peak_map(32, 5, 5), peak_map(32, 5, 5)});
  m.set("b", {peak_map(32, 5, 5), peak_map(32, 25, 25)});
  const auto r = consistency_score(m, {i0, i1}, 2, settings(5));
  CHECK(r.a[0] == std::vector<double>{1.0, 0.0});
  CHECK(r.a[1] == std::vector<double>{0.5, 0.5});
  CHECK(r.consistent == std::vector<std::uint8_t>{1, 0});
  CHECK(r.score == 0.5);
  CHECK(consistency_score(m, {i0, i1}, 2, settings(5, 0.0)).score == 1.0);

  // 4 of 5 images: a = 0.8, which meets mu = 0.8.
  TableModel five({1, 1}, 32);
  std::vector<data::AnnotatedImage> imgs;
  for (int i = 0; i < 5; ++i) {
    const std::string name = "i" + std::to_string(i);
    imgs.push_back(blank_image(32, {{5, 5}}, 0, name));
    five.set(name, {i < 4 ? peak_map(32, 5, 5) : peak_map(32, 25, 25)});
  }
  const auto t = consistency_score(five, imgs, 1, settings(5));
  CHECK(t.a[0][0] == 0.8);
  CHECK(t.score == 1.0);
}

TEST_CASE("classes without test images are excluded and counted") {
  TableModel m({2, 1}, 32);
  m.set("a", {peak_map(32, 5, 5), peak_map(32, 5, 5)});
  const auto r = consistency_score(m, {blank_image(32, {{5, 5}}, 0, "a")}, 1, settings(5));
  CHECK(r.undefined_count == 1);
  CHECK(r.defined == std::vector<std::uint8_t>{1, 0});
  CHECK(r.score == 1.0);
}

TEST_CASE("stability score on hand fixtures") {
  TableModel m({1, 1}, 32);
  const auto i0 = blank_image(32, {{5, 5}, {8, 8}}, 0, "a");
  const auto i1 = blank_image(32, {{5, 5}, {8, 8}}, 0, "b");
  m.set("a", {peak_map(32, 5, 5)}, {peak_map(32, 5, 5)});
  // Noise shifts the peak: the box now holds both parts, (1,0) vs (1,1) is a mismatch.
  m.set("b", {peak_map(32, 3, 3)}, {peak_map(32, 6, 6)});
  const auto r = stability_score(m, {i0, i1}, NoiseSpec::gaussian(0.2), settings(5));
  CHECK(r.match_rate[0] == 0.5);
  CHECK(r.score == 0.5);
  CHECK(stability_score(m, {i0, i1}, NoiseSpec::gaussian(0.0), settings(5)).score == 1.0);
}

TEST_CASE("gaussian perturbation") {
  const auto x = Tensor::full({1, 3, 8, 8}, 0.25);
  const auto same = gaussian_perturb(x, 0.0, 1);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
  const auto a = gaussian_perturb(x, 0.2, 9), b = gaussian_perturb(x, 0.2, 9);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  const auto big = gaussian_perturb(Tensor::zeros({1000000}), 0.2, 3);
  double sum = 0, sq = 0;
  for (double v : big.data()) sum += v, sq += v * v;
  const double mean = sum / 1e6, sd = std::sqrt(sq / 1e6 - mean * mean);
  CHECK(std::abs(mean) < 3 * 0.2 / 1000);
  CHECK(std::abs(sd - 0.2) < 0.01 * 0.2);
}

TEST_CASE("PGD stays inside the L-inf ball and beats random noise") {
  Rng rng(17);
  const model::PrototypeAllocation alloc{2, 2};
  const oracle::PooledModel model(alloc, 4, rng);
  const double eps = 0.1;
  int wins = 0, total = 0;
  for (int i = 0; i < 30; ++i) {
    auto img = blank_image(16, {{3, 3}}, i % 2);
    std::vector<double> px(3 * 16 * 16);
    for (auto& v : px) v = rng.uniform();
    img.pixels = Tensor::from({3, 16, 16}, px);
    const auto x = model::normalize_pixels(img.pixels);

    const auto init = pgd_perturb(model, img, x, eps, eps / 4, 0, 5 + i);
    double linf = 0;
    for (std::size_t e = 0; e < x.numel(); ++e) linf = std::max(linf, std::abs(init.data()[e] - x.data()[e]));
    CHECK(linf <= eps);
    CHECK(linf > 0.0);

    const auto adv = pgd_perturb(model, img, x, eps, eps / 4, 10, 5 + i);
    for (std::size_t e = 0; e < x.numel(); ++e) CHECK(std::abs(adv.data()[e] - x.data()[e]) <= eps + 1e-12);

    std::vector<double> rnd(x.data().begin(), x.data().end());
    Rng noise(1000 + i);
    for (auto& v : rnd) v += noise.uniform(-eps, eps);
    const double attacked = pgd_objective(model, img, x, adv);
    const double random = pgd_objective(model, img, x, Tensor::from(x.shape(), rnd));
    wins += attacked >= random;
    ++total;
  }
  CHECK(wins >= 0.9 * total);
}

TEST_CASE("PGD aborts on a non-finite gradient") {
  class NanModel final : public model::ActivationModel {
   public:
    [[nodiscard]] const model::PrototypeAllocation& allocation() const override { return alloc; }
    [[nodiscard]] Tensor activation_maps(const data::AnnotatedImage&, const Tensor& input) const override {
      const auto scaled = ops::mul_scalar(ops::slice(ops::reshape(input, {3, 4, 4}), 0, 0, 1), std::nan(""));
      return scaled;
    }
    model::PrototypeAllocation alloc{1, 1};
  } nan_model;
  auto img = blank_image(4, {{0, 0}});
  CHECK_THROWS_AS(pgd_perturb(nan_model, img, model::normalize_pixels(img.pixels), 0.1, 0.025, 3, 1), NumericError);
}

TEST_CASE("metrics match the brute-force oracle on random fixtures, any thread count") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = oracle::random_fixture(rng);
    const oracle::PooledModel model(f.alloc, f.pool, rng);
    EvalSettings s;
    s.mu = f.mu;
    s.box = {f.box_h, f.box_w};
    const auto expected = oracle::consistency(model, f.test, f.parts, f.mu, f.box_h, f.box_w);
    const auto noise = NoiseSpec::gaussian(0.3, 77);
    const auto expected_sta = oracle::stability(model, f.test, f.box_h, f.box_w, [&](std::size_t i, const Tensor& x) {
      return oracle::gaussian_noisy(x, 0.3, 77, i);
    });
    for (int threads : {1, 4}) {
      s.threads = threads;
      const auto got = consistency_score(model, f.test, f.parts, s);
      for (std::size_t j = 0; j < got.consistent.size(); ++j)
        CHECK(expected.flags[j] == (got.defined[j] ? static_cast<int>(got.consistent[j]) : -1));
      CHECK(got.score == expected.score);
      const auto sta = stability_score(model, f.test, noise, s);
      for (std::size_t j = 0; j < sta.match_rate.size(); ++j)
        CHECK(expected_sta.rates[j] == (sta.defined[j] ? sta.match_rate[j] : -1.0));
      CHECK(sta.score == expected_sta.score);
    }
  }
}

TEST_CASE("structure similarity") {
  const auto t = Tensor::from({2, 2}, {1, 0.3, 0.3, 1});
  CHECK(structure_similarity(t, t) == 1.0);
  const double r = std::sqrt(std::log(2.0));
  const auto a = Tensor::zeros({2, 2});
  const auto b = Tensor::from({2, 2}, {r, 0, 0, r});
  CHECK(structure_similarity(a, b) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(structure_similarity(a, Tensor::zeros({3, 3})), ShapeError);
}

TEST_CASE("shallow-deep similarity of a network lies in (0, 1]") {
  model::ModelConfig c;
  c.image_size = 32;
  c.num_classes = 2;
  c.protos_per_class = 2;
  c.proto_dim = 8;
  c.channels = {4, 6, 8};
  const model::PrototypeNet net(c);
  Rng rng(3);
  std::vector<data::AnnotatedImage> imgs;
  for (int i = 0; i < 3; ++i) {
    auto img = blank_image(32, {{1, 1}}, i % 2);
    std::vector<double> px(3 * 32 * 32);
    for (auto& v : px) v = rng.uniform();
    img.pixels = Tensor::from({3, 32, 32}, px);
    imgs.push_back(img);
  }
  const double s1 = sdfa_similarity(net, imgs, 1);
  CHECK(s1 > 0.0);
  CHECK(s1 <= 1.0);
  CHECK(sdfa_similarity(net, imgs, 3) == s1);
}

TEST_CASE("cross-class similar prototype counts") {
  const model::PrototypeBank ortho{Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), {3, 1}};
  CHECK(cross_class_similar_count(ortho).mean == 0.0);
  const model::PrototypeBank twins{Tensor::from({2, 2}, {0.6, 0.8, 0.6, 0.8}), {2, 1}};
  const auto t = cross_class_similar_count(twins);
  CHECK(t.counts == std::vector<int>{1, 1});
  CHECK(t.mean == 1.0);

  Rng rng(6);
  std::vector<double> v(12 * 5);
  for (auto& x : v) x = rng.uniform(-0.2, 1);
  const model::PrototypeBank bank{Tensor::from({12, 5}, v), {4, 3}};
  const auto got = cross_class_similar_count(bank, 0.6);
  for (std::size_t i = 0; i < 12; ++i) {
    int count = 0;
    for (std::size_t j = 0; j < 12; ++j) {
      if (i / 3 == j / 3) continue;
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t d = 0; d < 5; ++d) {
        dot += v[i * 5 + d] * v[j * 5 + d];
        ni += v[i * 5 + d] * v[i * 5 + d];
        nj += v[j * 5 + d] * v[j * 5 + d];
      }
      count += dot / (std::sqrt(ni) * std::sqrt(nj)) > 0.6;
    }
    CHECK(got.counts[i] == count);
  }
}

TEST_CASE("per-class table recomputes from raw flags") {
  ConsistencyResult c;
  c.consistent = {1, 0, 1, 1};
  c.defined = {1, 1, 1, 1};
  std::vector<data::AnnotatedImage> test{blank_image(8, {}, 0), blank_image(8, {}, 1), blank_image(8, {}, 1)};
  const int pred[] = {0, 0, 1};
  const auto rows = per_class_consistency_vs_accuracy(c, {2, 2}, test, pred);
  REQUIRE(rows.size() == 2u);
  CHECK(rows[0].consistent_ratio == 0.5);
  CHECK(rows[1].consistent_ratio == 1.0);
  CHECK(rows[0].accuracy == 1.0);
  CHECK(rows[1].accuracy == 0.5);
}

TEST_CASE("consistency over checkpoints") {
  data::GeneratorConfig g;
  g.num_classes = 2;
  g.num_parts = 3;
  g.train_per_class = 2;
  g.test_per_class = 2;
  g.image_size = 32;
  const auto ds = data::Dataset::from_generated(data::generate_images(g));
  model::ModelConfig c;
  c.image_size = 32;
  c.num_classes = 2;
  c.protos_per_class = 2;
  c.proto_dim = 8;
  c.channels = {4, 6, 8};
  std::vector<std::vector<std::uint8_t>> ckpts;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    c.seed = seed;
    ckpts.push_back(model::PrototypeNet(c).checkpoint_bytes());
  }
  const auto series = consistency_over_checkpoints(ckpts, ds, settings(10));
  REQUIRE(series.size() == 3u);
  for (double v : series) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

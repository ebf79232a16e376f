#pragma once

// Brute-force re-derivation of the interpretability metrics from raw
// activation maps: naive bilinear upsampling, row-major argmax scan, box
// membership by enumerating every pixel of the clipped box, then the
// per-prototype averages and thresholds. Shares no code with the metrics
// module beyond the model interface and the RNG.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ppbench/model.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/rng.hpp"
#include "ppbench/synthdata.hpp"

namespace ppb::oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid upsample(const double* map, int h, int w, int out_h, int out_w) {
  auto coord = [](int o, int in, int out, int& i0, int& i1, double& t) {
    double src = (o + 0.5) * (static_cast<double>(in) / out) - 0.5;
    if (src < 0) src = 0;
    i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    i1 = i0 + 1 < in ? i0 + 1 : in - 1;
    t = i1 == i0 ? 0.0 : src - i0;
  };
  Grid g(out_h, std::vector<double>(out_w));
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double ty;
    coord(y, h, out_h, y0, y1, ty);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double tx;
      coord(x, w, out_w, x0, x1, tx);
      const double a = map[y0 * w + x0], b = map[y0 * w + x1];
      const double c = map[y1 * w + x0], d = map[y1 * w + x1];
      const double top = a + tx * (b - a);
      const double bottom = c + tx * (d - c);
      g[y][x] = top + ty * (bottom - top);
    }
  }
  return g;
}

/// Part vector by enumerating every pixel of the box.
inline std::vector<int> part_vector(const double* map, int h, int w, const data::AnnotatedImage& img, int box_h,
                                    int box_w) {
  const int H = static_cast<int>(img.pixels.dim(1)), W = static_cast<int>(img.pixels.dim(2));
  const auto up = upsample(map, h, w, H, W);
  int br = 0, bc = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (up[y][x] > up[br][bc]) br = y, bc = x;
  std::vector<int> o(img.parts.size(), 0);
  for (int y = br - box_h / 2; y < br - box_h / 2 + box_h; ++y)
    for (int x = bc - box_w / 2; x < bc - box_w / 2 + box_w; ++x) {
      if (y < 0 || y >= H || x < 0 || x >= W) continue;
      for (std::size_t i = 0; i < img.parts.size(); ++i)
        if (img.parts[i].visible && img.parts[i].x == x && img.parts[i].y == y) o[i] = 1;
    }
  return o;
}

inline Tensor maps_for(const model::ActivationModel& m, const data::AnnotatedImage& img, const Tensor& input) {
  NoGradGuard ng;
  FreezeParameters frozen;
  return m.activation_maps(img, input);
}

inline std::vector<int> part_vector_of(const Tensor& maps, int j, const data::AnnotatedImage& img, int bh, int bw) {
  const int h = static_cast<int>(maps.dim(1)), w = static_cast<int>(maps.dim(2));
  return part_vector(maps.data().data() + static_cast<std::size_t>(j) * h * w, h, w, img, bh, bw);
}

struct Consistency {
  std::vector<int> flags;  // -1 undefined, else 0/1
  double score = 0;
};

inline Consistency consistency(const model::ActivationModel& m, const std::vector<data::AnnotatedImage>& test,
                               int parts, double mu, int bh, int bw) {
  const auto& a = m.allocation();
  Consistency r;
  int defined = 0, good = 0;
  for (int j = 0; j < a.size(); ++j) {
    const int k = j / a.per_class;
    std::vector<int> counts(parts, 0);
    int n = 0;
    for (const auto& img : test) {
      if (img.label != k) continue;
      ++n;
      const auto maps = maps_for(m, img, model::normalize_pixels(img.pixels));
      const auto o = part_vector_of(maps, j, img, bh, bw);
      for (int i = 0; i < parts; ++i) counts[i] += o[i];
    }
    if (n == 0) {
      r.flags.push_back(-1);
      continue;
    }
    bool flag = false;
    for (int i = 0; i < parts; ++i)
      if (static_cast<double>(counts[i]) / n >= mu) flag = true;
    r.flags.push_back(flag);
    ++defined;
    good += flag;
  }
  r.score = defined ? static_cast<double>(good) / defined : 0.0;
  return r;
}

/// Gaussian noise regenerated from the seeding contract: image i of the
/// split uses Rng(Rng(seed).split(i)()).
inline Tensor gaussian_noisy(const Tensor& x, double sigma, std::uint64_t seed, std::size_t index) {
  Rng rng(Rng(seed).split(index)());
  std::vector<double> v(x.data().begin(), x.data().end());
  if (sigma > 0)
    for (auto& e : v) e += rng.normal(0.0, sigma);
  return Tensor::from(x.shape(), v);
}

struct Stability {
  std::vector<double> rates;  // -1 undefined
  double score = 0;
};

/// `perturb(i, x)` returns the perturbed input of test image i.
template <typename Perturb>
Stability stability(const model::ActivationModel& m, const std::vector<data::AnnotatedImage>& test, int bh, int bw,
                    Perturb perturb) {
  const auto& a = m.allocation();
  std::vector<Tensor> clean(test.size()), noisy(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto x = model::normalize_pixels(test[i].pixels);
    clean[i] = maps_for(m, test[i], x);
    noisy[i] = maps_for(m, test[i], perturb(i, x));
  }
  Stability r;
  double sum = 0;
  int defined = 0;
  for (int j = 0; j < a.size(); ++j) {
    const int k = j / a.per_class;
    int n = 0, same = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (test[i].label != k) continue;
      ++n;
      same += part_vector_of(clean[i], j, test[i], bh, bw) == part_vector_of(noisy[i], j, test[i], bh, bw);
    }
    if (n == 0) {
      r.rates.push_back(-1);
      continue;
    }
    r.rates.push_back(static_cast<double>(same) / n);
    sum += r.rates.back();
    ++defined;
  }
  r.score = defined ? sum / defined : 0.0;
  return r;
}

/// Small differentiable fixture model: max-pools the input to the feature
/// grid and takes inner products with random 3-vectors.
class PooledModel final : public model::ActivationModel {
 public:
  PooledModel(model::PrototypeAllocation alloc, std::size_t pool, Rng& rng) : alloc_(alloc), pool_(pool) {
    std::vector<double> p(static_cast<std::size_t>(alloc.size()) * 3);
    for (auto& v : p) v = rng.uniform(-1, 1);
    protos_ = Tensor::from({static_cast<std::size_t>(alloc.size()), 3}, p);
  }
  [[nodiscard]] const model::PrototypeAllocation& allocation() const override { return alloc_; }
  [[nodiscard]] Tensor activation_maps(const data::AnnotatedImage&, const Tensor& input) const override {
    const auto maps = ops::channel_inner_product(ops::max_pool2d(input, pool_, pool_), protos_);
    return ops::reshape(maps, {maps.dim(1), maps.dim(2), maps.dim(3)});
  }

 private:
  model::PrototypeAllocation alloc_;
  std::size_t pool_;
  Tensor protos_;
};

/// Randomised small metric fixture: M <= 6, <= 10 images per class, C <= 4.
struct Fixture {
  model::PrototypeAllocation alloc;
  int parts = 0;
  int image_size = 0;
  std::size_t pool = 0;
  int box_h = 0, box_w = 0;
  double mu = 0.8;
  std::vector<data::AnnotatedImage> test;
};

inline Fixture random_fixture(Rng& rng) {
  Fixture f;
  f.alloc = {1 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(2))};
  f.parts = 1 + static_cast<int>(rng.below(4));
  const int sizes[] = {16, 24, 32};
  f.image_size = sizes[rng.below(3)];
  f.pool = rng.bernoulli(0.5) ? 4 : 8;
  f.box_h = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(f.image_size)));
  f.box_w = rng.bernoulli(0.5) ? f.box_h : 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(f.image_size)));
  const double mus[] = {0.0, 0.5, 0.8, 1.0};
  f.mu = rng.bernoulli(0.5) ? mus[rng.below(4)] : rng.uniform();
  const auto S = static_cast<std::size_t>(f.image_size);
  for (int k = 0; k < f.alloc.num_classes; ++k) {
    const int n = rng.bernoulli(0.1) ? 0 : 1 + static_cast<int>(rng.below(10));
    for (int i = 0; i < n; ++i) {
      data::AnnotatedImage img;
      img.label = k;
      img.split = data::Split::Test;
      std::vector<double> px(3 * S * S);
      for (auto& v : px) v = rng.uniform();
      img.pixels = Tensor::from({3, S, S}, px);
      for (int c = 0; c < f.parts; ++c) {
        data::PartAnnotation p;
        p.part_id = c;
        p.visible = rng.bernoulli(0.8);
        p.x = p.visible ? static_cast<int>(rng.below(S)) : -1;
        p.y = p.visible ? static_cast<int>(rng.below(S)) : -1;
        img.parts.push_back(p);
      }
      f.test.push_back(std::move(img));
    }
  }
  Rng order = rng.split(99);
  order.shuffle(std::span<data::AnnotatedImage>(f.test));
  return f;
}

}  // namespace ppb::oracle

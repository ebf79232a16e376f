#include "ppbench/losses.hpp"

#include <cstdint>

#include "ppbench/errors.hpp"
#include "ppbench/ops.hpp"

namespace ppb::losses {

namespace {

Tensor batched(const Tensor& t) {
  if (t.rank() == 3) return ops::reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
  if (t.rank() != 4) throw ShapeError("expected a [B,C,H,W] or [C,H,W] feature map, got " + shape_str(t.shape()));
  return t;
}

std::vector<std::uint8_t> class_mask(std::span<const int> labels, const model::PrototypeAllocation& a, bool own) {
  const auto M = static_cast<std::size_t>(a.size());
  std::vector<std::uint8_t> mask(labels.size() * M);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || labels[b] >= a.num_classes) throw ConfigError("label out of range");
    for (std::size_t j = 0; j < M; ++j) mask[b * M + j] = (a.class_of(static_cast<int>(j)) == labels[b]) == own;
  }
  return mask;
}

}  // namespace

void LossWeights::validate() const {
  if (clst < 0 || sep < 0 || ortho < 0 || align < 0 || gamma < 0)
    throw ConfigError("loss weights and gamma must be non-negative");
}

Tensor deep_units(const Tensor& z_deep) {
  const Tensor z = batched(z_deep);
  const std::size_t B = z.dim(0), D = z.dim(1), H = z.dim(2), W = z.dim(3);
  return ops::reshape(ops::permute(z, {0, 2, 3, 1}), {B, H * W, D});
}

Tensor shallow_patch_units(const Tensor& z_shallow, std::size_t deep_h, std::size_t deep_w) {
  const Tensor z = batched(z_shallow);
  const std::size_t B = z.dim(0), D = z.dim(1), H = z.dim(2), W = z.dim(3);
  if (deep_h == 0 || deep_w == 0 || H % deep_h != 0 || W % deep_w != 0) {
    throw ShapeError("shallow map " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not an integer multiple of the deep grid " + std::to_string(deep_h) + "x" +
                     std::to_string(deep_w));
  }
  const std::size_t rh = H / deep_h, rw = W / deep_w;
  auto grid = ops::reshape(z, {B, D, deep_h, rh, deep_w, rw});
  auto patches = ops::permute(grid, {0, 2, 4, 3, 5, 1});  // [B, Hd, Wd, rh, rw, D]
  return ops::reshape(patches, {B, deep_h * deep_w, rh * rw * D});
}

Tensor spatial_structure(const Tensor& units) {
  if (units.rank() != 3) throw ShapeError("spatial_structure expects [B,Z,F], got " + shape_str(units.shape()));
  const auto n = ops::l2_normalize(units, 2);
  return ops::matmul(n, ops::transpose(n, 1, 2));
}

Tensor align_loss(const Tensor& z_shallow, const Tensor& z_deep, double gamma) {
  const Tensor zd = batched(z_deep);
  const Tensor zs = batched(z_shallow);
  if (zs.dim(0) != zd.dim(0)) throw ShapeError("align_loss: batch sizes differ");
  const Tensor t_deep = spatial_structure(deep_units(zd));
  const Tensor t_shallow = ops::detach(spatial_structure(shallow_patch_units(zs, zd.dim(2), zd.dim(3))));
  return ops::mean(ops::relu(ops::add_scalar(ops::abs(ops::sub(t_deep, t_shallow)), -gamma)));
}

Tensor ortho_loss(const model::PrototypeBank& bank) {
  const auto& a = bank.allocation;
  const auto N = static_cast<std::size_t>(a.per_class);
  const Tensor identity = ops::eye(N);
  Tensor total;
  for (int k = 0; k < a.num_classes; ++k) {
    const Tensor block = ops::slice(bank.vectors, 0, static_cast<std::size_t>(a.first_of(k)), N);
    const Tensor term = ops::sum(ops::square(ops::sub(ops::matmul(block, ops::transpose(block, 0, 1)), identity)));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

Tensor cluster_loss(const Tensor& g, std::span<const int> labels, const model::PrototypeAllocation& allocation) {
  return ops::neg(ops::mean(ops::masked_max(g, class_mask(labels, allocation, true))));
}

Tensor separation_loss(const Tensor& g, std::span<const int> labels, const model::PrototypeAllocation& allocation) {
  if (allocation.num_classes < 2) throw ConfigError("separation loss needs at least two classes");
  return ops::mean(ops::masked_max(g, class_mask(labels, allocation, false)));
}

LossTerms total_loss(const model::ForwardResult& forward, std::span<const int> labels,
                     const model::PrototypeBank& bank, const LossWeights& w, bool with_alignment) {
  w.validate();
  LossTerms t;
  const auto& g = forward.activations.values;
  t.ce = ops::cross_entropy_logits(forward.logits, labels);
  t.clst = cluster_loss(g, labels, bank.allocation);
  t.sep = separation_loss(g, labels, bank.allocation);
  t.ortho = ortho_loss(bank);
  t.total = t.ce;
  if (w.clst != 0.0) t.total = ops::add(t.total, ops::mul_scalar(t.clst, w.clst));
  if (w.sep != 0.0) t.total = ops::add(t.total, ops::mul_scalar(t.sep, w.sep));
  if (w.ortho != 0.0) t.total = ops::add(t.total, ops::mul_scalar(t.ortho, w.ortho));
  if (with_alignment) {
    t.align = align_loss(forward.features.shallow, forward.features.deep, w.gamma);
    if (w.align != 0.0) t.total = ops::add(t.total, ops::mul_scalar(t.align, w.align));
  }
  return t;
}

Tensor off_class_l1(const model::FCHead& head, const model::PrototypeAllocation& allocation) {
  const auto K = static_cast<std::size_t>(allocation.num_classes);
  const auto M = static_cast<std::size_t>(allocation.size());
  if (head.weights.shape() != Shape{K, M}) throw ShapeError("FC head does not match the prototype allocation");
  std::vector<double> mask(K * M);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < M; ++j)
      mask[k * M + j] = allocation.class_of(static_cast<int>(j)) == static_cast<int>(k) ? 0.0 : 1.0;
  return ops::sum(ops::mul(ops::abs(head.weights), Tensor::from({K, M}, std::move(mask))));
}

Tensor fc_convex_objective(const Tensor& logits, std::span<const int> labels, const model::FCHead& head,
                           const model::PrototypeAllocation& allocation) {
  return ops::add(ops::cross_entropy_logits(logits, labels), off_class_l1(head, allocation));
}

}  // namespace ppb::losses

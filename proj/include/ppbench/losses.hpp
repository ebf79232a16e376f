#pragma once

#include <span>

#include "ppbench/model.hpp"
#include "ppbench/tensor.hpp"

namespace ppb::losses {

struct LossWeights {
  double clst = 0.8;
  double sep = 0.08;
  double ortho = 1e-2;
  double align = 0.5;
  double gamma = 0.1;  // alignment ReLU threshold

  void validate() const;
};

/// Deep units of z_d [B,D,H,W] as rows: [B, H*W, D].
Tensor deep_units(const Tensor& z_deep);

/// Groups each (H_s/H_d) x (W_s/W_d) patch of z_s [B,D_s,H_s,W_s] into one
/// unit aligned with the deep grid: [B, H_d*W_d, (H_s/H_d)*(W_s/W_d)*D_s].
/// Throws ShapeError if the spatial ratio is not integral.
Tensor shallow_patch_units(const Tensor& z_shallow, std::size_t deep_h, std::size_t deep_w);

/// Pairwise cosine similarity of the rows of units [B,Z,F] -> [B,Z,Z].
Tensor spatial_structure(const Tensor& units);

/// Shallow-deep alignment: mean over images of
/// (1/Z^2) sum_ij max(|t_ij(z_d) - t_ij(z_s)| - gamma, 0), with t(z_s) detached.
/// Accepts batched [B,C,H,W] or single [C,H,W] maps.
Tensor align_loss(const Tensor& z_shallow, const Tensor& z_deep, double gamma);

/// sum_k || P^k P^k^T - I_N ||_F^2 over the class blocks of the bank.
Tensor ortho_loss(const model::PrototypeBank& bank);

/// -mean_b max_{j: c(j) = y_b} g_bj
Tensor cluster_loss(const Tensor& g, std::span<const int> labels, const model::PrototypeAllocation& allocation);
/// +mean_b max_{j: c(j) != y_b} g_bj
Tensor separation_loss(const Tensor& g, std::span<const int> labels, const model::PrototypeAllocation& allocation);

struct LossTerms {
  Tensor ce, clst, sep, ortho, align;  // align undefined when not computed
  Tensor total;
};

/// L_ce + l_clst L_clst + l_sep L_sep + l_ortho L_ortho + l_align L_align.
/// The alignment term is computed only when `with_alignment` is set.
LossTerms total_loss(const model::ForwardResult& forward, std::span<const int> labels,
                     const model::PrototypeBank& bank, const LossWeights& weights, bool with_alignment);

/// L1 norm of the off-class entries of w_h (entries with c(j) != k).
Tensor off_class_l1(const model::FCHead& head, const model::PrototypeAllocation& allocation);
/// L_ce(logits) + sum_k sum_{j: c(j) != k} |w_h[k,j]|
Tensor fc_convex_objective(const Tensor& logits, std::span<const int> labels, const model::FCHead& head,
                           const model::PrototypeAllocation& allocation);

}  // namespace ppb::losses

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ppb {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_parameter = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that are tracked.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node.
/// Operations in ops.hpp record a backward closure on the result whenever any
/// input is tracked (requires_grad, grad mode enabled and, for parameters,
/// not frozen by FreezeParameters). The graph is rebuilt on every forward pass.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t dim(std::size_t i) const;
  [[nodiscard]] std::size_t rank() const { return shape().size(); }
  [[nodiscard]] std::size_t numel() const;

  [[nodiscard]] std::span<const double> data() const;
  /// Direct write access; only for leaves (initialization, optimizer updates).
  [[nodiscard]] std::span<double> mutable_data();
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::initializer_list<std::size_t> index) const;

  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const double> grad() const;
  [[nodiscard]] std::span<double> mutable_grad();
  void zero_grad();

  [[nodiscard]] bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  /// Parameters stop being tracked inside a FreezeParameters scope.
  Tensor& mark_parameter();
  [[nodiscard]] bool is_parameter() const;

  /// True if operations on this tensor are currently being recorded.
  [[nodiscard]] bool tracked() const;

  /// Reverse pass from a scalar. Leaf grads accumulate across calls;
  /// intermediate grads are reset at the start of each pass.
  void backward() const;

  /// Deep copy of the values as a fresh untracked leaf.
  [[nodiscard]] Tensor clone() const;

  [[nodiscard]] const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for the scope's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Treats every parameter tensor as a constant on the current thread, so
/// gradients can flow to inputs (adversarial perturbation) while shared
/// model weights are never written.
class FreezeParameters {
 public:
  FreezeParameters();
  ~FreezeParameters();
  FreezeParameters(const FreezeParameters&) = delete;
  FreezeParameters& operator=(const FreezeParameters&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace ppb

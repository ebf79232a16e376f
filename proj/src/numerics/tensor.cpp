#include "ppbench/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "ppbench/errors.hpp"

namespace ppb {

namespace {
thread_local bool tl_grad_enabled = true;
thread_local bool tl_params_frozen = false;
}  // namespace

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

FreezeParameters::FreezeParameters() : previous_(tl_params_frozen) { tl_params_frozen = true; }
FreezeParameters::~FreezeParameters() { tl_params_frozen = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= node_->shape.size()) throw ShapeError("dimension index out of range for " + shape_str(node_->shape));
  return node_->shape[i];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v >= s[i]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[i] + v;
    ++i;
  }
  return node_->data[flat];
}

bool Tensor::has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

Tensor& Tensor::mark_parameter() {
  node_->is_parameter = true;
  node_->requires_grad = true;
  return *this;
}

bool Tensor::is_parameter() const { return node_->is_parameter; }

bool Tensor::tracked() const {
  return tl_grad_enabled && node_->requires_grad && !(node_->is_parameter && tl_params_frozen);
}

Tensor Tensor::clone() const { return from(shape(), node_->data, false); }

void Tensor::backward() const {
  if (!defined()) throw ShapeError("backward() on undefined tensor");
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw ConfigError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS: parents before children in `order`.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace ppb

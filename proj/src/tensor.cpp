#include "lcdlab/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "lcdlab/error.hpp"

namespace lcdlab {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

FloatBuffer& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0F);
  return grad;
}

static void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor: empty shape");
  for (auto e : shape)
    if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0F, requires_grad); }

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  validate_shape(shape);
  return from_data(shape, FloatBuffer(static_cast<std::size_t>(shape_numel(shape)), value),
                   requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, const std::vector<float>& data, bool requires_grad) {
  return from_data(shape, FloatBuffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, FloatBuffer data, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw Error("tensor: undefined");
  return node_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("tensor: axis out of range for " + shape_str(s));
  return s[axis];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!node_) throw Error("tensor: undefined");
  return node_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!node_) throw Error("tensor: undefined");
  if (!node_->is_leaf()) throw Error("tensor: mutable_data on a non-leaf tensor");
  return node_->data;
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw Error("tensor: undefined");
  if (!node_->is_leaf()) throw Error("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor: no gradient present");
  return node_->grad;
}

std::span<float> Tensor::mutable_grad() {
  if (!has_grad()) throw Error("tensor: no gradient present");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0F);
}

void Tensor::clear_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf(); }

Tensor Tensor::detach() const {
  if (!node_) throw Error("tensor: detach of an undefined tensor");
  return from_data(node_->shape, node_->data, false);
}

Tensor Tensor::clone() const {
  if (!node_) throw Error("tensor: clone of an undefined tensor");
  return from_data(node_->shape, node_->data, requires_grad());
}

void Tensor::backward() const {
  if (!node_) throw Error("backward: undefined tensor");
  if (numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(shape()));
  if (node_->released) throw Error("backward: graph already consumed by a previous backward()");
  if (!node_->requires_grad) throw Error("backward: loss is detached from any parameter");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      detail::Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        if (p->released) throw Error("backward: graph already consumed by a previous backward()");
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad.assign(1, 1.0F);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    if (!n->grad.empty()) n->backward(*n);
  }
  // Intermediate gradients are scratch; drop them together with the graph.
  for (detail::Node* n : order) {
    if (n->is_leaf()) continue;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->parents.clear();
    n->backward = nullptr;
    n->released = true;
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

}  // namespace lcdlab

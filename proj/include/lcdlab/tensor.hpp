#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace lcdlab {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// 64-byte aligned allocation. Vectorized kernels peel a scalar head until
/// the first aligned element, so with aligned storage the split between
/// scalar and SIMD code (and with it the rounding) depends only on shapes,
/// never on where the heap placed a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

namespace detail {

struct Node {
  Shape shape;
  FloatBuffer data;
  FloatBuffer grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool released = false;  // graph consumed by a backward pass
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `self.grad` and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return !backward && !released; }
  FloatBuffer& ensure_grad();
};

}  // namespace detail

/// Dense row-major float32 tensor with reverse-mode autodiff.
///
/// A Tensor is a handle: copies share storage and graph node. Ops never
/// mutate their inputs; only optimizer/EMA code writes through
/// `mutable_data()` on leaf parameters.
///
/// Gradients accumulate into leaf `grad` buffers across backward passes
/// until `zero_grad()` is called. A graph can be backpropagated once; a
/// second `backward()` through the same graph throws.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, const std::vector<float>& data, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, FloatBuffer data, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::initializer_list<float> data, bool requires_grad = false) {
    return from_data(shape, FloatBuffer(data), requires_grad);
  }
  static Tensor scalar(float value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const float> data() const;
  /// Writable storage; only valid on leaves (parameters, freshly built inputs).
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float at(std::int64_t flat_index) const { return data()[static_cast<std::size_t>(flat_index)]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();
  void clear_grad();

  bool is_leaf() const;
  /// New leaf with copied data and no graph.
  Tensor detach() const;
  /// Deep copy preserving requires_grad, without graph.
  Tensor clone() const;

  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Disables graph recording in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

}  // namespace lcdlab

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mus/common.hpp"

namespace mus {

/// Dense 5-D shape (batch, channels, depth, height, width), W fastest.
struct Shape5 {
  int64_t b = 1, c = 1, d = 1, h = 1, w = 1;

  int64_t numel() const { return b * c * d * h * w; }
  int64_t spatial() const { return d * h * w; }
  bool operator==(const Shape5&) const = default;
  std::string str() const;
};

/// Dense real tensor with optional reverse-mode gradient. Non-leaf tensors
/// record their parents and a backward function; backward() walks the graph
/// in reverse topological order. Single-writer contract: callers must not
/// mutate a tensor another op is reading.
template <typename T>
class Tensor {
 public:
  using Ptr = std::shared_ptr<Tensor<T>>;

  Shape5 shape;
  std::vector<T> value;
  std::vector<T> grad;  // same length as value once touched by backward
  bool requires_grad = false;

  // Graph edges, populated by ops when grads are enabled.
  std::vector<Ptr> parents;
  std::function<void(Tensor<T>&)> backward_fn;

  static Ptr create(const Shape5& s, bool requires_grad = false);
  static Ptr from_values(const Shape5& s, std::vector<T> v,
                         bool requires_grad = false);
  static Ptr scalar(T v);

  int64_t numel() const { return shape.numel(); }
  T item() const;

  void ensure_grad();          // allocate + zero if absent
  void zero_grad();            // zero (allocating if needed)
  void accumulate_grad(const std::vector<T>& g);
  bool finite() const;         // all values finite
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

/// Reverse-mode sweep from a scalar root: seeds root grad with 1 and runs
/// every backward function in reverse topological order. Gradients
/// accumulate into leaves (call zero_grad between steps).
template <typename T>
void backward(const TensorPtr<T>& root);

/// Ops record graph edges only while grads are enabled; wrap inference in
/// GradGuard(false) to skip tape construction entirely.
bool grad_enabled();
class GradGuard {
 public:
  explicit GradGuard(bool enable);
  ~GradGuard();
  GradGuard(const GradGuard&) = delete;
  GradGuard& operator=(const GradGuard&) = delete;

 private:
  bool saved_;
};

}  // namespace mus

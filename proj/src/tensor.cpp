#include "mus/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace mus {

std::string Shape5::str() const {
  std::ostringstream os;
  os << "(" << b << "," << c << "," << d << "," << h << "," << w << ")";
  return os.str();
}

template <typename T>
typename Tensor<T>::Ptr Tensor<T>::create(const Shape5& s, bool requires_grad) {
  require(s.b >= 1 && s.c >= 1 && s.d >= 1 && s.h >= 1 && s.w >= 1,
          "tensor dims must be >= 1, got " + s.str());
  auto t = std::make_shared<Tensor<T>>();
  t->shape = s;
  t->value.assign(static_cast<size_t>(s.numel()), T(0));
  t->requires_grad = requires_grad;
  return t;
}

template <typename T>
typename Tensor<T>::Ptr Tensor<T>::from_values(const Shape5& s, std::vector<T> v,
                                               bool requires_grad) {
  require(static_cast<int64_t>(v.size()) == s.numel(),
          "value count does not match shape " + s.str());
  auto t = std::make_shared<Tensor<T>>();
  t->shape = s;
  t->value = std::move(v);
  t->requires_grad = requires_grad;
  return t;
}

template <typename T>
typename Tensor<T>::Ptr Tensor<T>::scalar(T v) {
  return from_values(Shape5{1, 1, 1, 1, 1}, {v});
}

template <typename T>
T Tensor<T>::item() const {
  require(numel() == 1, "item() requires a scalar tensor, shape " + shape.str());
  return value[0];
}

template <typename T>
void Tensor<T>::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
  grad.assign(value.size(), T(0));
}

template <typename T>
void Tensor<T>::accumulate_grad(const std::vector<T>& g) {
  require(g.size() == value.size(), "gradient size mismatch");
  ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

template <typename T>
bool Tensor<T>::finite() const {
  for (T v : value)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
void backward(const TensorPtr<T>& root) {
  require(root != nullptr, "backward on null tensor");
  require(root->numel() == 1, "backward requires a scalar root");

  // Iterative post-order DFS; the graph can be deep for long loss chains.
  std::vector<Tensor<T>*> order;
  std::unordered_set<Tensor<T>*> visited;
  std::vector<std::pair<Tensor<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor<T>* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

GradGuard::GradGuard(bool enable) : saved_(t_grad_enabled) {
  t_grad_enabled = enable;
}

GradGuard::~GradGuard() { t_grad_enabled = saved_; }

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const TensorPtr<float>&);
template void backward<double>(const TensorPtr<double>&);

}  // namespace mus

#pragma once

#include <vector>

#include "mus/tensor.hpp"

namespace mus {

// Stochastic gradient descent with Nesterov momentum. Weight decay is plain
// L2 regularization folded into the gradient before the momentum update:
//   g      <- grad + weight_decay * param
//   buf    <- momentum * buf + g
//   step   <- g + momentum * buf        (Nesterov)  |  buf  (classic)
//   param  <- param - lr * step
// Momentum buffers start at zero, so the first step reduces to buf = g.
template <typename T>
class SGD {
 public:
  SGD(std::vector<TensorPtr<T>> params, double lr, double momentum = 0.0,
      double weight_decay = 0.0, bool nesterov = false);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<TensorPtr<T>> params_;
  std::vector<std::vector<T>> buf_;
  double lr_, momentum_, weight_decay_;
  bool nesterov_;
};

// Adam with bias correction; weight decay is L2 folded into the gradient.
//   g  <- grad + weight_decay * param
//   m  <- beta1 * m + (1 - beta1) * g
//   v  <- beta2 * v + (1 - beta2) * g^2
//   param <- param - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
template <typename T>
class Adam {
 public:
  Adam(std::vector<TensorPtr<T>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<TensorPtr<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
};

}  // namespace mus

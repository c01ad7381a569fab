#include "mus/optim.hpp"

#include <cmath>

#include "mus/common.hpp"

namespace mus {

template <typename T>
SGD<T>::SGD(std::vector<TensorPtr<T>> params, double lr, double momentum,
            double weight_decay, bool nesterov)
    : params_(std::move(params)),
      lr_(lr),
      momentum_(momentum),
      weight_decay_(weight_decay),
      nesterov_(nesterov) {
  require(lr_ >= 0, "SGD: learning rate must be non-negative");
  require(momentum_ >= 0, "SGD: momentum must be non-negative");
  require(!nesterov_ || momentum_ > 0, "SGD: Nesterov requires momentum > 0");
  buf_.reserve(params_.size());
  for (const auto& p : params_) {
    require(p != nullptr, "SGD: null parameter");
    buf_.emplace_back(p->numel(), T(0));
  }
}

template <typename T>
void SGD<T>::step() {
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (p.grad.empty()) continue;
    std::vector<T>& buf = buf_[k];
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      double g = p.grad[i];
      if (weight_decay_ != 0) g += weight_decay_ * p.value[i];
      double step_dir = g;
      if (momentum_ != 0) {
        const double b = momentum_ * buf[i] + g;
        buf[i] = static_cast<T>(b);
        step_dir = nesterov_ ? g + momentum_ * b : b;
      }
      p.value[i] = static_cast<T>(p.value[i] - lr_ * step_dir);
    }
  }
}

template <typename T>
void SGD<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
Adam<T>::Adam(std::vector<TensorPtr<T>> params, double lr, double beta1,
              double beta2, double eps, double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  require(lr_ >= 0, "Adam: learning rate must be non-negative");
  require(beta1_ >= 0 && beta1_ < 1 && beta2_ >= 0 && beta2_ < 1,
          "Adam: betas must lie in [0, 1)");
  require(eps_ > 0, "Adam: eps must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    require(p != nullptr, "Adam: null parameter");
    m_.emplace_back(p->numel(), T(0));
    v_.emplace_back(p->numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (p.grad.empty()) continue;
    std::vector<T>& m = m_[k];
    std::vector<T>& v = v_[k];
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      double g = p.grad[i];
      if (weight_decay_ != 0) g += weight_decay_ * p.value[i];
      const double mi = beta1_ * m[i] + (1.0 - beta1_) * g;
      const double vi = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
      p.value[i] = static_cast<T>(p.value[i] - lr_ * update);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template class SGD<float>;
template class SGD<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace mus

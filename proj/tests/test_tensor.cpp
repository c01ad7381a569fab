#include <doctest.h>

#include "mus/ops.hpp"

using namespace mus;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("create zero-fills and item reads scalars") {
  auto t = Tensor<double>::create({1, 2, 1, 1, 3});
  CHECK(t->numel() == 6);
  for (double v : t->value) CHECK(v == 0.0);
  auto s = Tensor<double>::scalar(2.5);
  CHECK(s->item() == 2.5);
  CHECK_THROWS(t->item());
}

TEST_CASE("from_values validates length") {
  CHECK_THROWS(Tensor<float>::from_values({1, 1, 1, 1, 3}, {1.f, 2.f}));
  auto t = Tensor<float>::from_values({1, 1, 1, 1, 3}, {1.f, 2.f, 3.f});
  CHECK(t->value[2] == 3.f);
}

TEST_CASE("backward accumulates through a diamond graph") {
  auto x = Tensor<double>::from_values({1, 1, 1, 1, 2}, {3.0, -2.0}, true);
  auto a = scale(x, 2.0);            // 2x
  auto b = scale(x, 5.0);            // 5x
  auto y = sum_all(add(a, b));       // sum(7x)
  backward(y);
  CHECK(x->grad[0] == doctest::Approx(7.0));
  CHECK(x->grad[1] == doctest::Approx(7.0));

  // A second backward pass accumulates unless grads are cleared.
  auto y2 = sum_all(scale(x, 1.0));
  backward(y2);
  CHECK(x->grad[0] == doctest::Approx(8.0));
  x->zero_grad();
  CHECK(x->grad[0] == 0.0);
}

TEST_CASE("GradGuard(false) suppresses graph construction") {
  auto x = Tensor<double>::from_values({1, 1, 1, 1, 2}, {1.0, 2.0}, true);
  {
    GradGuard no_grad(false);
    CHECK_FALSE(grad_enabled());
    auto y = scale(x, 3.0);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
  }
  CHECK(grad_enabled());
  auto y = scale(x, 3.0);
  CHECK(y->requires_grad);
  CHECK(y->parents.size() == 1);
}

TEST_CASE("finite() flags NaN and infinity") {
  auto t = Tensor<float>::from_values({1, 1, 1, 1, 2}, {1.f, 2.f});
  CHECK(t->finite());
  t->value[1] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(t->finite());
  t->value[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t->finite());
}

TEST_CASE("ops reject non-finite results") {
  auto x = Tensor<double>::from_values({1, 1, 1, 1, 1},
                                       {std::numeric_limits<double>::max()});
  CHECK_THROWS_AS((void)scale(x, 2.0), std::runtime_error);
}

TEST_CASE("accumulate_grad adds element-wise") {
  auto t = Tensor<double>::create({1, 1, 1, 1, 2});
  t->accumulate_grad({1.0, 2.0});
  t->accumulate_grad({0.5, -1.0});
  CHECK(t->grad[0] == 1.5);
  CHECK(t->grad[1] == 1.0);
  CHECK_THROWS(t->accumulate_grad({1.0}));
}

TEST_SUITE_END();

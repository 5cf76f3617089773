#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cfdr/optim.hpp"
#include "cfdr/rng.hpp"
#include "cfdr/tensor.hpp"
#include "gradcheck_suite.hpp"

using namespace cfdr;

TEST_CASE("relu by definition") {
  Tensor x = Tensor::from_data({3}, {-1.0f, 0.0f, 2.0f});
  Tensor y = relu(x);
  CHECK(y.data() == std::vector<float>{0.0f, 0.0f, 2.0f});
}

TEST_CASE("l2_normalize on a 3-4-5 triangle") {
  Tensor x = Tensor::from_data({2}, {3.0f, 4.0f});
  Tensor y = l2_normalize(x);
  CHECK(y.data()[0] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("conv2d of all-ones kernel over all-ones image") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor y = conv2d(x, w, Tensor{}, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.data()[0] == doctest::Approx(9.0));
}

TEST_CASE("backward of sum(w*w)") {
  Tensor w = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  Tensor loss = sum_all(mul(w, w));
  backward(loss);
  CHECK(w.grad()[0] == doctest::Approx(2.0));
  CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward twice without reset is an error") {
  Tensor w = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  Tensor loss = sum_all(mul(w, w));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::runtime_error);
}

TEST_CASE("backward contract errors") {
  Tensor w = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  CHECK_THROWS_AS(backward(mul(w, w)), std::invalid_argument);  // non-scalar
  Tensor d = sum_all(mul(w, w)).detach();
  CHECK_THROWS_AS(backward(d), std::runtime_error);  // detached
}

TEST_CASE("shape mismatch errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("sgd step") {
  Parameter p("w", Tensor::from_data({1}, {1.0f}, true));
  Tensor loss = scale(sum_all(p.tensor), 0.5f);
  backward(loss);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::sgd;
  cfg.lr = 0.1f;
  optimizer_step({&p}, cfg);
  CHECK(p.tensor.data()[0] == doctest::Approx(0.95));
}

TEST_CASE("adam first step moves by about lr") {
  Parameter p("w", Tensor::from_data({1}, {0.5f}, true));
  Tensor loss = sum_all(p.tensor);  // grad = 1
  backward(loss);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.lr = 0.01f;
  optimizer_step({&p}, cfg);
  // first-step update is lr * 1 / (1 + eps)
  CHECK(p.tensor.data()[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-4));
}

TEST_CASE("step after zero_grad is an error") {
  Parameter p("w", Tensor::from_data({1}, {1.0f}, true));
  Tensor loss = sum_all(p.tensor);
  backward(loss);
  p.tensor.zero_grad();
  OptimizerConfig cfg;
  CHECK_THROWS_WITH_AS(optimizer_step({&p}, cfg),
                       "optimizer_step: missing grad on parameter 'w'", std::runtime_error);
}

TEST_CASE("grads accumulate and survive the step until zeroed") {
  Parameter p("w", Tensor::from_data({1}, {1.0f}, true));
  Tensor l1 = sum_all(p.tensor);
  backward(l1);
  Tensor l2 = sum_all(p.tensor);
  backward(l2);
  CHECK(p.tensor.grad()[0] == doctest::Approx(2.0));
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::sgd;
  cfg.lr = 0.5f;
  optimizer_step({&p}, cfg);
  CHECK(p.tensor.grad()[0] == doctest::Approx(2.0));  // untouched by the step
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
  Rng rng(7);
  std::vector<float> vals(48);
  for (auto& v : vals) v = rng.uniform(-1.0f, 1.0f);
  Tensor x1 = Tensor::from_data({1, 3, 4, 4}, vals);
  Tensor x2 = Tensor::from_data({1, 3, 4, 4}, vals);
  Tensor w = Tensor::from_data({2, 3, 3, 3}, std::vector<float>(54, 0.25f));
  Tensor y1 = softmax(global_avg_pool(conv2d(x1, w, Tensor{}, 1, 1)));
  Tensor y2 = softmax(global_avg_pool(conv2d(x2, w, Tensor{}, 1, 1)));
  CHECK(y1.data() == y2.data());
}

TEST_CASE("l2_normalize output has unit norm for nonzero input") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> vals(8);
    for (auto& v : vals) v = rng.uniform(-4.0f, 4.0f);
    vals[0] += vals[0] >= 0 ? 0.1f : -0.1f;  // keep the row nonzero
    Tensor y = l2_normalize(Tensor::from_data({2, 4}, vals));
    for (int r = 0; r < 2; ++r) {
      double nsq = 0.0;
      for (int j = 0; j < 4; ++j) nsq += static_cast<double>(y.data()[r * 4 + j]) * y.data()[r * 4 + j];
      CHECK(std::abs(std::sqrt(nsq) - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("l2_normalize of the zero vector returns zeros and flags a warning") {
  reset_zero_norm_warning_count();
  Tensor y = l2_normalize(Tensor::zeros({1, 4}));
  for (float v : y.data()) CHECK(v == 0.0f);
  CHECK(zero_norm_warning_count() == 1);
  reset_zero_norm_warning_count();
}

TEST_CASE("max_pool2d ties break to the first row-major index") {
  // all-equal window: gradient must route to the first element only
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0f, 1.0f, 1.0f, 1.0f}, true);
  Tensor y = max_pool2d(x, 2, 2);
  backward(sum_all(y));
  CHECK(x.grad() == std::vector<float>{1.0f, 0.0f, 0.0f, 0.0f});
}

TEST_CASE("gradients match finite differences across all ops") {
  auto res = gradsuite::run_all(/*instances_per_op=*/10, /*seed=*/42);
  INFO("worst op: ", res.worst_op);
  CHECK(res.max_rel_err < 1e-3);
  CHECK(res.max_forward_err < 1e-4);
}

TEST_CASE("no_grad scope records no tape") {
  Tensor w = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  NoGradGuard ng;
  Tensor loss = sum_all(mul(w, w));
  CHECK_FALSE(loss.requires_grad());
}

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "sspf/optim.hpp"

using namespace sspf;

namespace {

ParamSet<double> scalar_param(double v) {
  ParamSet<double> p;
  p.emplace("w", Tensor<double>(1, 1, 1, v));
  return p;
}

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 2e-4), 2e-4);
  EXPECT_NEAR(cosine_lr(100, 100, 2e-4), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100, 2e-4), 1e-4, 1e-18);
  EXPECT_THROW(cosine_lr(101, 100, 2e-4), ConfigError);
  EXPECT_THROW(cosine_lr(-1, 100, 2e-4), ConfigError);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  double prev = cosine_lr(0, 37, 1.0);
  for (long s = 1; s <= 37; ++s) {
    const double lr = cosine_lr(s, 37, 1.0);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Adam, ZeroGradientLeavesWeightsAndDecaysMoments) {
  auto p = scalar_param(0.7);
  auto s = make_adam_state(p);
  s.m.at("w")[0] = 0.5;
  s.v.at("w")[0] = 0.25;
  s.t = 3;
  adam_step(p, s, scalar_param(0.0), 1e-3);
  EXPECT_NEAR(s.m.at("w")[0], 0.45, 1e-15);
  EXPECT_NEAR(s.v.at("w")[0], 0.24975, 1e-15);
  EXPECT_EQ(s.t, 4);
  // m/v are non-zero so the weight still moves by the decaying momentum;
  // with a fresh state nothing changes.
  auto q = scalar_param(0.7);
  auto fresh = make_adam_state(q);
  adam_step(q, fresh, scalar_param(0.0), 1e-3);
  EXPECT_EQ(q.at("w")[0], 0.7);
}

TEST(Adam, ThreeStepsByHand) {
  // g = 1, then -2, then 0.5 with lr 0.1, betas (0.9, 0.999), eps 1e-8.
  auto p = scalar_param(1.0);
  auto s = make_adam_state(p);
  const double grads[3] = {1.0, -2.0, 0.5};
  double w = 1.0, m = 0, v = 0;
  const double b1 = 0.9, b2 = 0.999, lr = 0.1, eps = 1e-8;
  for (int t = 1; t <= 3; ++t) {
    adam_step(p, s, scalar_param(grads[t - 1]), lr);
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    w -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p.at("w")[0], w, 1e-12) << "step " << t;
  }
  // First step moves by exactly lr (up to eps): |m_hat| / sqrt(v_hat) = 1.
  auto q = scalar_param(0.0);
  auto fresh = make_adam_state(q);
  adam_step(q, fresh, scalar_param(3.0), 0.1);
  EXPECT_NEAR(q.at("w")[0], -0.1, 1e-9);
}

TEST(Adam, ConstantGradientStepApproachesLr) {
  auto p = scalar_param(0.0);
  auto s = make_adam_state(p);
  double prev = 0, step = 0;
  for (int t = 0; t < 2000; ++t) {
    adam_step(p, s, scalar_param(0.3), 0.01);
    step = prev - p.at("w")[0];
    prev = p.at("w")[0];
  }
  EXPECT_NEAR(step, 0.01, 1e-6);
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  ParamSet<double> p = scalar_param(1.0);
  p.emplace("layer.b", Tensor<double>(1, 1, 2, 0.5));
  auto s = make_adam_state(p);
  ParamSet<double> g = scalar_param(0.1);
  g.emplace("layer.b", Tensor<double>(1, 1, 2, std::numeric_limits<double>::quiet_NaN()));
  try {
    adam_step(p, s, g, 0.1);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
  }
  EXPECT_EQ(p.at("w")[0], 1.0);
  EXPECT_EQ(s.t, 0);
}

TEST(Adam, ShapeMismatchRejected) {
  auto p = scalar_param(1.0);
  auto s = make_adam_state(p);
  ParamSet<double> g;
  g.emplace("w", Tensor<double>(1, 1, 2));
  EXPECT_THROW(adam_step(p, s, g, 0.1), ShapeError);
}

TEST(Adam, SelectorLimitsUpdates) {
  ParamSet<double> p = scalar_param(1.0);
  p.emplace("enc.x", Tensor<double>(1, 1, 1, 1.0));
  auto s = make_adam_state(p);
  ParamSet<double> g = scalar_param(1.0);
  g.emplace("enc.x", Tensor<double>(1, 1, 1, 1.0));
  adam_step(p, s, g, 0.1, {}, [](const std::string& n) { return n.starts_with("enc."); });
  EXPECT_EQ(p.at("w")[0], 1.0);
  EXPECT_NE(p.at("enc.x")[0], 1.0);
}

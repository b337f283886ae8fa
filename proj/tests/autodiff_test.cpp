#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sspf/autodiff.hpp"

using namespace sspf;
using ad::Tape;
using ad::Var;

namespace {

// Reduces a tensor-valued op to a scalar through a fixed random projection,
// then compares the tape gradient of each input with central differences.
using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

void check_gradients(std::vector<Tensor<double>> inputs, const Builder& build, double tol = 1e-6) {
  Tensor<double> probe;
  auto forward = [&](Tape<double>& tape, std::vector<Var>& vars) {
    vars.clear();
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    const Var out = build(tape, vars);
    if (probe.empty()) {
      const auto& v = tape.value(out);
      probe = oracle::random_tensor<double>(v.channels(), v.height(), v.width(), 77, -1, 1);
    }
    return out;
  };
  auto scalar = [&]() {
    Tape<double> tape;
    std::vector<Var> vars;
    const auto& v = tape.value(forward(tape, vars));
    double s = 0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * probe[i];
    return s;
  };
  Tape<double> tape;
  std::vector<Var> vars;
  const Var out = forward(tape, vars);
  std::vector<Var> terms{out};
  const Var root = ad::scalar_op(tape, terms, 0.0, {probe});
  tape.backward(root);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> g = tape.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double numeric = oracle::central_difference(scalar, inputs[k][i], 1e-6);
      EXPECT_LT(oracle::rel_error(g[i], numeric, 1e-6), tol) << "input " << k << " element " << i;
    }
  }
}

}  // namespace

TEST(Conv, ForwardMatchesNaiveLoop) {
  for (int k : {1, 3}) {
    const auto x = oracle::random_tensor<double>(3, 7, 6, 1, -1, 1);
    const auto w = oracle::random_tensor<double>(4, 3, k * k, 2, -1, 1);
    const auto b = oracle::random_tensor<double>(4, 1, 1, 3, -1, 1);
    EXPECT_LE(max_abs_diff(ad::conv2d_forward(x, w, b), oracle::conv2d(x, w, b)), 1e-12) << "k=" << k;
  }
}

TEST(Conv, GradientsMatchFiniteDifferences) {
  for (int k : {1, 3}) {
    check_gradients({oracle::random_tensor<double>(2, 5, 4, 4, -1, 1), oracle::random_tensor<double>(3, 2, k * k, 5, -1, 1),
                     oracle::random_tensor<double>(3, 1, 1, 6, -1, 1)},
                    [](Tape<double>& t, const std::vector<Var>& v) { return ad::conv2d(t, v[0], v[1], v[2]); });
  }
}

TEST(Conv, RejectsChannelMismatch) {
  Tape<double> t;
  const Var x = t.constant(Tensor<double>(2, 4, 4));
  const Var w = t.constant(Tensor<double>(3, 5, 9));
  const Var b = t.constant(Tensor<double>(3, 1, 1));
  EXPECT_THROW(ad::conv2d(t, x, w, b), ShapeError);
}

TEST(Ops, ElementwiseGradients) {
  auto x = oracle::random_tensor<double>(2, 4, 4, 8, -1, 1);
  check_gradients({x}, [](Tape<double>& t, const std::vector<Var>& v) { return ad::relu(t, v[0]); });
  check_gradients({x}, [](Tape<double>& t, const std::vector<Var>& v) { return ad::sigmoid(t, v[0]); });
  check_gradients({x, oracle::random_tensor<double>(2, 4, 4, 9)},
                  [](Tape<double>& t, const std::vector<Var>& v) { return ad::add(t, v[0], v[1]); });
}

TEST(Ops, ResamplingAndConcatGradients) {
  auto x = oracle::random_tensor<double>(2, 4, 6, 10, -1, 1);
  check_gradients({x}, [](Tape<double>& t, const std::vector<Var>& v) { return ad::avg_pool2(t, v[0]); });
  check_gradients({x}, [](Tape<double>& t, const std::vector<Var>& v) { return ad::upsample2(t, v[0]); });
  check_gradients({x, oracle::random_tensor<double>(3, 4, 6, 11)},
                  [](Tape<double>& t, const std::vector<Var>& v) { return ad::concat(t, v[0], v[1]); });
}

TEST(Ops, PlaneBroadcastGradients) {
  const auto m = oracle::random_tensor<double>(1, 3, 3, 12);
  check_gradients({oracle::random_tensor<double>(4, 3, 3, 13)},
                  [&](Tape<double>& t, const std::vector<Var>& v) { return ad::mul_plane(t, v[0], m); });
  check_gradients({oracle::random_tensor<double>(4, 3, 3, 14)},
                  [&](Tape<double>& t, const std::vector<Var>& v) { return ad::add_plane(t, v[0], m); });
}

TEST(Ops, ForwardValues) {
  Tape<double> t;
  Tensor<double> x = Tensor<double>::plane(2, 2);
  x.at(0, 0) = 1;
  x.at(0, 1) = 2;
  x.at(1, 0) = 3;
  x.at(1, 1) = 6;
  const Var v = t.constant(x);
  EXPECT_DOUBLE_EQ(t.value(ad::avg_pool2(t, v))[0], 3.0);
  const auto& up = t.value(ad::upsample2(t, v));
  EXPECT_EQ(up.height(), 4);
  EXPECT_EQ(up.at(3, 2), 6.0);
  EXPECT_EQ(up.at(1, 1), 1.0);
  x.at(0, 0) = -1;
  EXPECT_EQ(t.value(ad::relu(t, t.constant(x))).at(0, 0), 0.0);
}

TEST(Tape, WeightedSumAndFanOut) {
  // f = 2 * sum(x) + 3 * sum(x * x) reached through two paths from the same leaf.
  Tape<double> t;
  const auto x0 = oracle::random_tensor<double>(1, 2, 3, 15);
  const Var x = t.variable(x0);
  double s1 = 0, s2 = 0;
  Tensor<double> g1(1, 2, 3, 1.0), g2 = x0;
  g2 *= 2.0;
  for (double v : x0.values()) s1 += v, s2 += v * v;
  const Var a = ad::scalar_op(t, {x}, s1, {g1});
  const Var b = ad::scalar_op(t, {x}, s2, {g2});
  const Var f = ad::weighted_sum(t, {a, b}, {2.0, 3.0});
  EXPECT_NEAR(t.value(f)[0], 2 * s1 + 3 * s2, 1e-12);
  t.backward(f);
  const auto g = t.grad(x);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(g[i], 2 + 6 * x0[i], 1e-12);
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape<double> t;
  const Var x = t.variable(Tensor<double>(1, 2, 2));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape<double> t;
  const Var c = t.constant(Tensor<double>(1, 1, 1, 2.0));
  const Var x = t.variable(Tensor<double>(1, 1, 1, 3.0));
  const Var y = ad::add(t, c, x);
  t.backward(y);
  EXPECT_FALSE(t.has_grad(c));
  EXPECT_EQ(t.grad(x)[0], 1.0);
}

#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sspf/spf.hpp"

using namespace sspf;

namespace {

BinaryMap random_binary(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BinaryMap m(1, h, w);
  for (auto& v : m.values()) v = static_cast<std::uint8_t>(rng() & 1);
  return m;
}

std::vector<int> as_ints(const BinaryMap& m) { return {m.values().begin(), m.values().end()}; }

BinaryMap filled(int h, int w, std::uint8_t v) { return BinaryMap(1, h, w, v); }

}  // namespace

TEST(JOperator, TruthTable) {
  const int table[4][3] = {{0, 0, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 0}};
  for (const auto& row : table) {
    BinaryMap x = filled(1, 1, static_cast<std::uint8_t>(row[0]));
    BinaryMap y = filled(1, 1, static_cast<std::uint8_t>(row[1]));
    EXPECT_EQ(j_operator(x, y)[0], row[2]);
    EXPECT_EQ(j_operator(x.cast<double>(), y.cast<double>())[0], row[2]);
  }
}

TEST(JOperator, RandomBinaryMatchesXor) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = random_binary(9, 7, s), b = random_binary(9, 7, 1000 + s);
    const auto j = j_operator(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(j[i], a[i] ^ b[i]);
  }
}

TEST(JOperator, DiagonalAndSymmetry) {
  const auto x = oracle::random_tensor<double>(1, 4, 4, 3);
  const auto y = oracle::random_tensor<double>(1, 4, 4, 4);
  const auto d = j_operator(x, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(d[i], 2 * x[i] * (1 - x[i]), 1e-15);
  EXPECT_EQ(j_operator(x, y), j_operator(y, x));
  EXPECT_THROW(j_operator(x, Tensor<double>::plane(4, 5)), ShapeError);
}

TEST(Masks, SplitIsDisjointAndUnionIsJ) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = random_binary(8, 8, s), b = random_binary(8, 8, 50 + s);
    const auto m = split_unique_masks(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m.m_ir[i] & m.m_vi[i], 0);
    EXPECT_EQ(m.m_union, j_operator(a, b));
  }
}

TEST(Masks, SimpleCases) {
  const auto m = split_unique_masks(filled(2, 2, 1), filled(2, 2, 0));
  for (auto v : m.m_ir.values()) EXPECT_EQ(v, 1);
  for (auto v : m.m_vi.values()) EXPECT_EQ(v, 0);
  const auto s = random_binary(5, 5, 1);
  const auto same = split_unique_masks(s, s);
  for (auto v : same.m_union.values()) EXPECT_EQ(v, 0);
}

TEST(Masks, NonBinaryRejected) {
  EXPECT_THROW(split_unique_masks(filled(2, 2, 2), filled(2, 2, 0)), ShapeError);
}

TEST(Enhance, MatchesScalarOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto f_ir = oracle::random_tensor<double>(4, 8, 8, s, -1, 1);
    const auto f_vi = oracle::random_tensor<double>(4, 8, 8, 100 + s, -1, 1);
    const auto a = random_binary(8, 8, 200 + s), b = random_binary(8, 8, 300 + s);
    const auto e = enhance_features(f_ir, f_vi, a, b, split_unique_masks(a, b));
    const auto [o_ir, o_vi] = oracle::enhance(f_ir, f_vi, as_ints(a), as_ints(b));
    EXPECT_LE(max_abs_diff(e.ir, o_ir), 1e-12);
    EXPECT_LE(max_abs_diff(e.vi, o_vi), 1e-12);
  }
}

TEST(Enhance, IdenticalStructuresAddMapsOnly) {
  const auto f_ir = oracle::random_tensor<double>(2, 4, 4, 1);
  const auto f_vi = oracle::random_tensor<double>(2, 4, 4, 2);
  const auto s = random_binary(4, 4, 3);
  const auto e = enhance_features(f_ir, f_vi, s, s, split_unique_masks(s, s));
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        EXPECT_DOUBLE_EQ(e.ir(c, y, x), s.at(y, x) + f_ir(c, y, x));
        EXPECT_DOUBLE_EQ(e.vi(c, y, x), s.at(y, x) + f_vi(c, y, x));
      }
}

TEST(Enhance, InfraredOnlyStructure) {
  const auto f_ir = oracle::random_tensor<double>(2, 3, 3, 1);
  const auto f_vi = oracle::random_tensor<double>(2, 3, 3, 2);
  const auto one = filled(3, 3, 1), zero = filled(3, 3, 0);
  const auto e = enhance_features(f_ir, f_vi, one, zero, split_unique_masks(one, zero));
  for (std::size_t i = 0; i < e.ir.size(); ++i) {
    EXPECT_DOUBLE_EQ(e.ir[i], 1.0);
    EXPECT_DOUBLE_EQ(e.vi[i], f_ir[i] + f_vi[i]);
  }
}

TEST(Enhance, BroadcastMismatchRejected) {
  const auto f = oracle::random_tensor<double>(2, 4, 4, 1);
  const auto s = random_binary(4, 5, 1);
  EXPECT_THROW(enhance_features(f, f, s, s, split_unique_masks(s, s)), ShapeError);
}

TEST(Enhance, TapeVersionMatchesAndPassesGradients) {
  const auto f_ir = oracle::random_tensor<double>(3, 5, 5, 7, -1, 1);
  const auto f_vi = oracle::random_tensor<double>(3, 5, 5, 8, -1, 1);
  const auto a = random_binary(5, 5, 9), b = random_binary(5, 5, 10);
  ad::Tape<double> t;
  const ad::Var vi = t.variable(f_ir), vv = t.variable(f_vi);
  const auto [ei, ev] = ad::enhance_features(t, vi, vv, a, b);
  const auto ref = enhance_features(f_ir, f_vi, a, b, split_unique_masks(a, b));
  EXPECT_LE(max_abs_diff(t.value(ei), ref.ir), 1e-15);
  EXPECT_LE(max_abs_diff(t.value(ev), ref.vi), 1e-15);
  // d(sum(e_ir) + 2 sum(e_vi)) / d f_ir = (1 - m_ir) + 2 m_ir per pixel.
  const auto m = split_unique_masks(a, b);
  const ad::Var root = ad::scalar_op(t, {ei, ev}, 0.0, {Tensor<double>(3, 5, 5, 1.0), Tensor<double>(3, 5, 5, 2.0)});
  t.backward(root);
  const auto g_ir = t.grad(vi), g_vi = t.grad(vv);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 25; ++p) {
      EXPECT_DOUBLE_EQ(g_ir(c, p / 5, p % 5), 1.0 + m.m_ir[p]);
      EXPECT_DOUBLE_EQ(g_vi(c, p / 5, p % 5), 2.0 - m.m_vi[p]);
    }
}

TEST(FusePyramids, SharedStructureAndZeroFeatures) {
  std::vector<Tensor<double>> f_ir, f_vi, zeros;
  StructurePyramid s, other;
  for (int k = 0; k < 3; ++k) {
    const int n = 8 >> k;
    f_ir.push_back(oracle::random_tensor<double>(2, n, n, k));
    f_vi.push_back(oracle::random_tensor<double>(2, n, n, 10 + k));
    zeros.push_back(Tensor<double>(2, n, n));
    s.levels.push_back(random_binary(n, n, 20 + k));
    other.levels.push_back(random_binary(n, n, 30 + k));
  }
  const auto fused = fuse_pyramids(f_ir, f_vi, s, s);
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < s.levels[k].size(); ++p) {
        const int n = 8 >> k;
        const int y = static_cast<int>(p) / n, x = static_cast<int>(p) % n;
        EXPECT_NEAR(fused[k](c, y, x), 2 * s.levels[k][p] + f_ir[k](c, y, x) + f_vi[k](c, y, x), 1e-15);
      }
  const auto z = fuse_pyramids(zeros, zeros, s, other);
  for (int k = 0; k < 3; ++k)
    for (std::size_t p = 0; p < s.levels[k].size(); ++p)
      EXPECT_EQ(z[k](1, static_cast<int>(p) / (8 >> k), static_cast<int>(p) % (8 >> k)),
                s.levels[k][p] + other.levels[k][p]);
}

TEST(FusePyramids, ComposesVerifiedPieces) {
  std::vector<Tensor<double>> f_ir, f_vi;
  StructurePyramid a, b;
  for (int k = 0; k < 3; ++k) {
    const int n = 16 >> k;
    f_ir.push_back(oracle::random_tensor<double>(3, n, n, 40 + k, -1, 1));
    f_vi.push_back(oracle::random_tensor<double>(3, n, n, 50 + k, -1, 1));
    a.levels.push_back(random_binary(n, n, 60 + k));
    b.levels.push_back(random_binary(n, n, 70 + k));
  }
  const auto fused = fuse_pyramids(f_ir, f_vi, a, b);
  for (int k = 0; k < 3; ++k) {
    auto [o_ir, o_vi] = oracle::enhance(f_ir[k], f_vi[k], as_ints(a.levels[k]), as_ints(b.levels[k]));
    o_ir += o_vi;
    EXPECT_LE(max_abs_diff(fused[k], o_ir), 1e-12);
  }
  // Swapping modalities together with their maps leaves the sum unchanged
  // when the structures coincide.
  EXPECT_EQ(fuse_pyramids(f_ir, f_vi, a, a), fuse_pyramids(f_vi, f_ir, a, a));
  a.levels.pop_back();
  EXPECT_THROW(fuse_pyramids(f_ir, f_vi, a, b), ShapeError);
}

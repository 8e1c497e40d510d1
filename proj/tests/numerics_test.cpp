#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "comet/numerics.hpp"
#include "test_util.hpp"

using namespace comet;
using testutil::random_matrix;

namespace {

// Independent triple loop, summing in k order.
Matrix<double> naive_matmul(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Brute-force softmax attention for one query row at a time.
Matrix<double> brute_attention(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v,
                               const BoolMatrix& mask) {
  Matrix<double> out(q.rows(), v.cols());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<double> w(k.rows(), 0.0);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (!mask(i, j)) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += q(i, c) * k(j, c);
      w[j] = s / std::sqrt(double(q.cols()));
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k.rows(); ++j) z += mask(i, j) ? std::exp(w[j] - mx) : 0.0;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      const double p = mask(i, j) ? std::exp(w[j] - mx) / z : 0.0;
      for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += p * v(j, c);
    }
  }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  const auto x = random_matrix(2, 5, rng);
  EXPECT_EQ(matmul(Matrix<double>::identity(2), x), x);
}

TEST(Matmul, HandExample) {
  const Matrix<double> a{{1, 2}, {3, 4}};
  const Matrix<double> b{{1}, {1}};
  const Matrix<double> want{{3}, {7}};
  EXPECT_EQ(matmul(a, b), want);
  EXPECT_EQ(naive_matmul(a, b), want);
}

TEST(Matmul, ZeroAnnihilates) {
  std::mt19937_64 rng(2);
  const auto x = random_matrix(4, 3, rng);
  EXPECT_EQ(matmul(Matrix<double>(5, 4), x), Matrix<double>(5, 3));
}

TEST(Matmul, MismatchReportsShapes) {
  try {
    matmul(Matrix<double>(2, 3), Matrix<double>(4, 2));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4x2)"), std::string::npos) << msg;
  }
}

TEST(Matmul, MatchesTripleLoopOnRandomShapes) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
    const auto a = random_matrix(n, k, rng), b = random_matrix(k, m, rng);
    testutil::expect_near(matmul(a, b), naive_matmul(a, b), 1e-13);
    testutil::expect_near(matmul_nt(a, transpose(b)), naive_matmul(a, b), 1e-13);
    testutil::expect_near(matmul_tn(transpose(a), b), naive_matmul(a, b), 1e-13);
  }
}

TEST(Matmul, AssociativeWithinTolerance) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  for (int t = 0; t < 100; ++t) {
    const std::size_t p = dim(rng), q = dim(rng), r = dim(rng), s = dim(rng);
    const auto a = random_matrix(p, q, rng), b = random_matrix(q, r, rng), c = random_matrix(r, s, rng);
    const auto left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    double scale = 0.0;
    for (double x : left.storage()) scale = std::max(scale, std::abs(x));
    for (std::size_t i = 0; i < left.size(); ++i)
      EXPECT_LE(std::abs(left.data()[i] - right.data()[i]), 1e-9 * std::max(scale, 1.0));
  }
}

TEST(Matmul, Deterministic) {
  std::mt19937_64 rng(5);
  const auto a = random_matrix(7, 13, rng), b = random_matrix(13, 5, rng);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(RmsNorm, ZeroInputGivesZero) {
  const std::vector<double> x(6, 0.0), gain{1, 2, 3, 4, 5, 6};
  for (double y : rms_norm<double>(x, gain, 1e-6)) EXPECT_EQ(y, 0.0);
}

TEST(RmsNorm, ConstantVectorHasUnitMagnitude) {
  const std::vector<double> gain(5, 1.0);
  for (double c : {-3.0, 0.25, 7.0}) {
    const std::vector<double> x(5, c);
    for (double y : rms_norm<double>(x, gain, 1e-12)) EXPECT_NEAR(y, c > 0 ? 1.0 : -1.0, 1e-9);
  }
}

TEST(RmsNorm, MatchesScalarLoop) {
  std::mt19937_64 rng(6);
  const auto x = random_matrix(5, 16, rng), gain = random_matrix(1, 16, rng);
  const auto y = rms_norm_rows(x, gain, 1e-6);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) ms += x(r, c) * x(r, c);
    ms /= double(x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c)
      EXPECT_NEAR(y(r, c), gain(0, c) * x(r, c) / std::sqrt(ms + 1e-6), 1e-13);
  }
}

TEST(Attention, SingleTokenReturnsItsValue) {
  const Matrix<double> q{{0.3, -1.0}}, k{{2.0, 0.5}}, v{{4.0, -7.0}};
  EXPECT_EQ(causal_attention(q, k, v, BoolMatrix::causal(1)), v);
}

TEST(Attention, IdenticalKeysAverageValues) {
  const Matrix<double> q{{0.0, 0.0}}, k{{1.0, 2.0}, {1.0, 2.0}}, v{{1.0, 3.0}, {5.0, -1.0}};
  const auto out = causal_attention(q, k, v, BoolMatrix(1, 2, true));
  EXPECT_DOUBLE_EQ(out(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(out(0, 1), 1.0);
}

TEST(Attention, MatchesBruteForceCausal) {
  std::mt19937_64 rng(7);
  const auto q = random_matrix(4, 6, rng), k = random_matrix(4, 6, rng), v = random_matrix(4, 3, rng);
  const auto mask = BoolMatrix::causal(4);
  testutil::expect_near(causal_attention(q, k, v, mask), brute_attention(q, k, v, mask), 1e-13);
}

TEST(Attention, RowsSumToOneAndMaskedWeightsAreZero) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + std::size_t(t % 9);
    const auto q = random_matrix(n, 4, rng, 3.0), k = random_matrix(n, 4, rng, 3.0), v = random_matrix(n, 4, rng);
    BoolMatrix mask = BoolMatrix::causal(n);
    Matrix<double> p;
    causal_attention(q, k, v, mask, &p);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask(i, j)) {
          EXPECT_EQ(p(i, j), 0.0);
        }
        s += p(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, AllMaskedRowRejected) {
  BoolMatrix mask = BoolMatrix::causal(3);
  mask.set(1, 0, false);
  mask.set(1, 1, false);
  const Matrix<double> x(3, 2, 1.0);
  EXPECT_THROW(causal_attention(x, x, x, mask), ShapeError);
}

TEST(Attention, ShapeMismatchRejected) {
  EXPECT_THROW(causal_attention(Matrix<double>(2, 3), Matrix<double>(2, 4), Matrix<double>(2, 4),
                                BoolMatrix::causal(2)),
               ShapeError);
}

TEST(Rope, InverseUndoesRotation) {
  std::mt19937_64 rng(9);
  const RopeTable<double> table(10, 4);
  const auto x = random_matrix(10, 8, rng);
  testutil::expect_near(apply_rope(apply_rope(x, 2, table), 2, table, true), x, 1e-14);
}

TEST(Rope, PreservesNormsAndPositionZero) {
  std::mt19937_64 rng(10);
  const RopeTable<double> table(6, 6);
  const auto x = random_matrix(6, 6, rng);
  const auto y = apply_rope(x, 1, table);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(y(0, c), x(0, c));
  for (std::size_t r = 0; r < 6; ++r) {
    double a = 0.0, b = 0.0;
    for (std::size_t c = 0; c < 6; ++c) a += x(r, c) * x(r, c), b += y(r, c) * y(r, c);
    EXPECT_NEAR(a, b, 1e-12);
  }
}

TEST(Rope, DotProductDependsOnOffsetOnly) {
  // The same (q, k) pair placed at positions (i, j) and (i+s, j+s).
  std::mt19937_64 rng(11);
  const RopeTable<double> table(16, 4);
  const auto q = random_matrix(1, 4, rng), k = random_matrix(1, 4, rng);
  auto at = [&](const Matrix<double>& row, std::size_t pos) {
    Matrix<double> m(16, 4);
    for (std::size_t c = 0; c < 4; ++c) m(pos, c) = row(0, c);
    return apply_rope(m, 1, table);
  };
  auto dot = [&](std::size_t i, std::size_t j) {
    const auto rq = at(q, i), rk = at(k, j);
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += rq(i, c) * rk(j, c);
    return s;
  };
  EXPECT_NEAR(dot(5, 2), dot(12, 9), 1e-12);
  EXPECT_NEAR(dot(3, 3), dot(0, 0), 1e-12);
}

TEST(Rope, OddHeadDimensionRejected) { EXPECT_THROW(RopeTable<double>(4, 3), ShapeError); }

TEST(Rows, SliceGatherConcat) {
  const Matrix<double> x{{1, 2}, {3, 4}, {5, 6}};
  EXPECT_EQ(slice_rows(x, 1, 2), (Matrix<double>{{3, 4}, {5, 6}}));
  EXPECT_EQ(slice_rows(x, 3, 0).rows(), 0u);
  EXPECT_THROW(slice_rows(x, 2, 2), ShapeError);
  const std::vector<std::size_t> idx{2, 0, 2};
  EXPECT_EQ(gather_rows<double>(x, idx), (Matrix<double>{{5, 6}, {1, 2}, {5, 6}}));
  const Matrix<double> y{{7, 8}};
  const std::vector<const Matrix<double>*> parts{&y, &x};
  EXPECT_EQ(concat_rows<double>(parts), (Matrix<double>{{7, 8}, {1, 2}, {3, 4}, {5, 6}}));
  const Matrix<double> bad{{1, 2, 3}};
  const std::vector<const Matrix<double>*> mixed{&x, &bad};
  EXPECT_THROW(concat_rows<double>(mixed), ShapeError);
}

TEST(Sigmoid, StableAtExtremes) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_TRUE(std::isfinite(sigmoid(-1000.0)));
  EXPECT_NEAR(sigmoid(40.0), 1.0, 1e-15);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}

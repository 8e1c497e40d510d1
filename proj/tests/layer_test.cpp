#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "comet/layer.hpp"
#include "test_util.hpp"

using namespace comet;
using testutil::random_matrix;

namespace {

ModelConfig layout_config(std::size_t m, std::size_t interval, std::size_t chunk, std::size_t budget) {
  ModelConfig c;
  c.m_global = m;
  c.compression_interval = interval;
  c.chunk_size = chunk;
  c.temp_budget_tokens = budget;
  return c;
}

std::string roles(const ChunkLayout& lay) {
  std::string s;
  for (const auto& sl : lay.slots) s += to_string(sl.role);
  return s;
}

// Scalar reference for the pre-norm layer, written from the formulas with
// explicit loops and no shared kernels.
Matrix<double> reference_layer(const LayerParams<double>& p, const Matrix<double>& x, std::size_t heads,
                               double theta, double eps) {
  const std::size_t n = x.rows(), d = x.cols(), hd = d / heads;
  auto norm = [&](const Matrix<double>& in, const Matrix<double>& g) {
    Matrix<double> out(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      double ss = 0;
      for (std::size_t j = 0; j < d; ++j) ss += in(r, j) * in(r, j);
      const double inv = 1.0 / std::sqrt(ss / double(d) + eps);
      for (std::size_t j = 0; j < d; ++j) out(r, j) = in(r, j) * inv * g(0, j);
    }
    return out;
  };
  auto proj = [&](const Matrix<double>& in, const Matrix<double>& w) {
    Matrix<double> out(in.rows(), w.cols());
    for (std::size_t r = 0; r < in.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c)
        for (std::size_t k = 0; k < in.cols(); ++k) out(r, c) += in(r, k) * w(k, c);
    return out;
  };
  auto rotate = [&](Matrix<double> m) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < hd / 2; ++i) {
          const double ang = double(r) * std::pow(theta, -double(2 * i) / double(hd));
          double& a = m(r, h * hd + 2 * i);
          double& b = m(r, h * hd + 2 * i + 1);
          const double a0 = a, b0 = b;
          a = a0 * std::cos(ang) - b0 * std::sin(ang);
          b = a0 * std::sin(ang) + b0 * std::cos(ang);
        }
    return m;
  };
  const auto n1 = norm(x, p.attn_norm);
  const auto q = rotate(proj(n1, p.wq)), k = rotate(proj(n1, p.wk)), v = proj(n1, p.wv);
  Matrix<double> att(n, d);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < hd; ++c) dot += q(i, h * hd + c) * k(j, h * hd + c);
        s[j] = dot / std::sqrt(double(hd));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t c = 0; c < hd; ++c) att(i, h * hd + c) += s[j] / z * v(j, h * hd + c);
    }
  auto h = proj(att, p.wo);
  for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += x.data()[i];
  auto u = proj(norm(h, p.ffn_norm), p.w1);
  for (auto& e : u.storage()) e = e / (1.0 + std::exp(-e));
  auto f = proj(u, p.w2);
  for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] += h.data()[i];
  return f;
}

LayerParams<double> random_layer(std::size_t d, std::size_t hidden, std::mt19937_64& rng) {
  LayerParams<double> p(d, hidden);
  p.init(rng, 2);
  p.attn_norm = random_matrix(1, d, rng);
  p.ffn_norm = random_matrix(1, d, rng);
  return p;
}

Matrix<double> run_layer(const LayerParams<double>& p, const Matrix<double>& x, const ChunkLayout& lay,
                         std::size_t heads) {
  Eager<double> ops;
  const RopeTable<double> rope(lay.size(), x.cols() / heads);
  return layer_forward(ops, p, x, lay, heads, rope, 1e-6);
}

}  // namespace

TEST(Layout, CountsAndTotal) {
  // m = 4, a full queue of 8 rows, 16 context tokens with interval 8.
  const auto cfg = layout_config(4, 8, 16, 8);
  const auto lay = build_layout(16, cfg, 8);
  EXPECT_EQ(lay.size(), 34u);
  EXPECT_EQ(lay.n_compress, 2u);
  EXPECT_EQ(lay.memory_rows(), 12u);
  EXPECT_EQ(lay.body_rows(), 22u);
}

TEST(Layout, CompressionTokenAfterEveryIntervalAndPartialTail) {
  const auto cfg = layout_config(1, 8, 32, 0);
  const auto lay = build_layout(20, cfg, 0);
  ASSERT_EQ(lay.n_compress, 3u);
  // Body rows: 8 context, C, 8 context, C, 4 context, C, R.
  EXPECT_EQ(lay.compress_rows, (std::vector<std::size_t>{8, 17, 22}));
  EXPECT_EQ(lay.readout_rows, (std::vector<std::size_t>{23}));
  EXPECT_EQ(lay.context_rows.size(), 20u);
}

TEST(Layout, FirstChunkHasNoTemporaryRows) {
  const auto cfg = layout_config(2, 3, 6, 4);
  EXPECT_EQ(roles(build_layout(6, cfg, 0)), "GGHHHCHHHCRR");
  EXPECT_EQ(roles(build_layout(6, cfg, 2)), "GGTTHHHCHHHCRR");
  EXPECT_EQ(roles(build_layout(4, cfg, 4)), "GGTTTTHHHCHCRR");
}

TEST(Layout, RejectsEmptyChunkAndOverfullQueue) {
  const auto cfg = layout_config(2, 3, 6, 4);
  EXPECT_THROW(build_layout(0, cfg, 0), ShapeError);
  EXPECT_THROW(build_layout(6, cfg, 6), ShapeError);
}

TEST(Layout, MaskIsPlainCausal) {
  const auto cfg = layout_config(2, 3, 6, 4);
  const auto lay = build_layout(6, cfg, 2);
  for (std::size_t i = 0; i < lay.size(); ++i)
    for (std::size_t j = 0; j < lay.size(); ++j) EXPECT_EQ((*lay.mask)(i, j), j <= i);
}

TEST(Layer, ZeroOutputProjectionsAreIdentity) {
  std::mt19937_64 rng(1);
  auto p = random_layer(8, 16, rng);
  p.wo = Matrix<double>(8, 8);
  p.w2 = Matrix<double>(16, 8);
  const auto cfg = layout_config(2, 3, 6, 0);
  const auto lay = build_layout(6, cfg, 0);
  const auto x = random_matrix(lay.size(), 8, rng);
  EXPECT_EQ(run_layer(p, x, lay, 2), x);
}

TEST(Layer, MatchesScalarReference) {
  std::mt19937_64 rng(2);
  for (std::size_t heads : {1u, 2u, 4u}) {
    const auto p = random_layer(8, 12, rng);
    const auto cfg = layout_config(2, 3, 6, 4);
    const auto lay = build_layout(5, cfg, 2);
    const auto x = random_matrix(lay.size(), 8, rng);
    testutil::expect_near(run_layer(p, x, lay, heads), reference_layer(p, x, heads, 10000.0, 1e-6), 1e-10);
  }
}

TEST(Layer, SixTokenBruteForce) {
  std::mt19937_64 rng(3);
  const auto p = random_layer(4, 8, rng);
  ModelConfig cfg = layout_config(1, 4, 4, 0);
  const auto lay = build_layout(4, cfg, 0);  // G, 4 tokens, C, R
  ASSERT_EQ(lay.size(), 7u);
  const auto x = random_matrix(7, 4, rng);
  testutil::expect_near(run_layer(p, x, lay, 1), reference_layer(p, x, 1, 10000.0, 1e-6), 1e-12);
}

TEST(Layer, LaterRowsNeverInfluenceEarlierOnes) {
  std::mt19937_64 rng(4);
  const auto p = random_layer(8, 16, rng);
  const auto cfg = layout_config(2, 3, 6, 4);
  const auto lay = build_layout(6, cfg, 4);
  const auto x = random_matrix(lay.size(), 8, rng);
  const auto base = run_layer(p, x, lay, 2);
  for (std::size_t pos = 0; pos < lay.size(); ++pos) {
    auto y = x;
    for (std::size_t c = 0; c < 8; ++c) y(pos, c) += 1.0;
    const auto out = run_layer(p, y, lay, 2);
    for (std::size_t r = 0; r < lay.size(); ++r) {
      bool same = true;
      for (std::size_t c = 0; c < 8; ++c) same = same && out(r, c) == base(r, c);
      if (r < pos) EXPECT_TRUE(same) << "row " << r << " moved after perturbing " << pos;
      else EXPECT_FALSE(same) << "row " << r << " ignores row " << pos;
    }
  }
}

TEST(Layer, MemoryRowsVisibleToEveryBodyRow) {
  std::mt19937_64 rng(5);
  const auto p = random_layer(8, 16, rng);
  const auto cfg = layout_config(2, 3, 6, 4);
  const auto lay = build_layout(6, cfg, 4);
  const auto x = random_matrix(lay.size(), 8, rng);
  const auto base = run_layer(p, x, lay, 2);
  for (std::size_t mem = 0; mem < lay.memory_rows(); ++mem) {
    auto y = x;
    y(mem, 0) += 0.5;
    const auto out = run_layer(p, y, lay, 2);
    for (std::size_t b = lay.memory_rows(); b < lay.size(); ++b) EXPECT_NE(out(b, 0), base(b, 0));
  }
}

TEST(Layer, ShapeErrors) {
  std::mt19937_64 rng(6);
  const auto p = random_layer(8, 16, rng);
  const auto cfg = layout_config(2, 3, 6, 0);
  const auto lay = build_layout(6, cfg, 0);
  EXPECT_THROW(run_layer(p, random_matrix(lay.size() - 1, 8, rng), lay, 2), ShapeError);
  Eager<double> ops;
  const RopeTable<double> rope(lay.size(), 6);
  EXPECT_THROW(layer_forward(ops, p, random_matrix(lay.size(), 12, rng), lay, 2, rope, 1e-6), ShapeError);
}

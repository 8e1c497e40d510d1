#pragma once

// Per-layer input composition and the transformer layer itself.
//
// A layer sees the composed sequence
//
//   [ G (m rows) | T (queue rows) | context tokens with a compression token
//     after every `interval` of them and after a final partial group | R (m rows) ]
//
// under a plain causal mask over that order, with rotary positions
// 0..len-1 restarting at every chunk.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "comet/autodiff.hpp"
#include "comet/config.hpp"

namespace comet {

enum class Role : std::uint8_t { global, temp, context, compress, readout };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::global: return "G";
    case Role::temp: return "T";
    case Role::context: return "H";
    case Role::compress: return "C";
    case Role::readout: return "R";
  }
  return "?";
}

struct Slot {
  Role role;
  std::size_t index;  // position within its role
};

struct ChunkLayout {
  std::vector<Slot> slots;
  std::size_t n_global = 0, n_temp = 0, n_context = 0, n_compress = 0, n_readout = 0;
  // Indices relative to the body, i.e. the rows after G and T.
  std::vector<std::size_t> context_rows, compress_rows, readout_rows;
  std::shared_ptr<const BoolMatrix> mask;

  std::size_t size() const { return slots.size(); }
  std::size_t memory_rows() const { return n_global + n_temp; }
  std::size_t body_rows() const { return n_context + n_compress + n_readout; }
};

/// Lays out one chunk of n_ctx tokens with temp_rows rows of temporary memory.
inline ChunkLayout build_layout(std::size_t n_ctx, const ModelConfig& cfg, std::size_t temp_rows) {
  if (n_ctx == 0) throw ShapeError("build_layout: chunk has no context tokens");
  if (temp_rows > cfg.temp_capacity_tokens())
    throw ShapeError("build_layout: " + std::to_string(temp_rows) + " temp rows exceed capacity " +
                     std::to_string(cfg.temp_capacity_tokens()));
  ChunkLayout lay;
  lay.n_global = cfg.m_global;
  lay.n_temp = temp_rows;
  lay.n_context = n_ctx;
  lay.n_compress = (n_ctx + cfg.compression_interval - 1) / cfg.compression_interval;
  lay.n_readout = cfg.m_global;
  lay.slots.reserve(lay.n_global + lay.n_temp + lay.body_rows());

  for (std::size_t i = 0; i < lay.n_global; ++i) lay.slots.push_back({Role::global, i});
  for (std::size_t i = 0; i < lay.n_temp; ++i) lay.slots.push_back({Role::temp, i});
  std::size_t body = 0, comp = 0;
  for (std::size_t t = 0; t < n_ctx; ++t) {
    lay.slots.push_back({Role::context, t});
    lay.context_rows.push_back(body++);
    if ((t + 1) % cfg.compression_interval == 0 || t + 1 == n_ctx) {
      lay.slots.push_back({Role::compress, comp++});
      lay.compress_rows.push_back(body++);
    }
  }
  for (std::size_t i = 0; i < lay.n_readout; ++i) {
    lay.slots.push_back({Role::readout, i});
    lay.readout_rows.push_back(body++);
  }
  lay.mask = std::make_shared<const BoolMatrix>(BoolMatrix::causal(lay.size()));
  return lay;
}

template <typename T>
struct LayerParams {
  Matrix<T> attn_norm;  // 1 x d
  Matrix<T> wq, wk, wv, wo;  // d x d, applied as x * W
  Matrix<T> ffn_norm;  // 1 x d
  Matrix<T> w1;  // d x hidden
  Matrix<T> w2;  // hidden x d

  LayerParams() = default;
  LayerParams(std::size_t d, std::size_t hidden)
      : attn_norm(1, d, T(1)), wq(d, d), wk(d, d), wv(d, d), wo(d, d), ffn_norm(1, d, T(1)), w1(d, hidden),
        w2(hidden, d) {}

  template <typename Rng>
  void init(Rng& rng, std::size_t n_layers) {
    const double d = double(wq.rows());
    std::normal_distribution<double> in(0.0, 1.0 / std::sqrt(d));
    std::normal_distribution<double> hid(0.0, 1.0 / std::sqrt(double(w1.cols())));
    // Output projections shrink with depth so the residual stream starts stable.
    const double out_scale = 1.0 / std::sqrt(2.0 * double(n_layers));
    for (auto* m : {&wq, &wk, &wv})
      for (auto& x : m->storage()) x = T(in(rng));
    for (auto& x : wo.storage()) x = T(in(rng) * out_scale);
    for (auto& x : w1.storage()) x = T(in(rng));
    for (auto& x : w2.storage()) x = T(hid(rng) * out_scale);
  }
};

/// Pre-norm transformer layer over the composed sequence:
///   h   = x + Attn(RMSNorm(x)) W_o
///   out = h + SiLU(RMSNorm(h) W_1) W_2
/// Returns all rows; callers keep the body rows and drop G/T outputs.
template <typename Ops, typename P>
typename Ops::Value layer_forward(Ops& ops, const P& params, const typename Ops::Value& composed,
                                  const ChunkLayout& layout, std::size_t n_heads,
                                  const RopeTable<typename Ops::Scalar>& rope, typename Ops::Scalar eps) {
  const auto& x = ops.value(composed);
  if (x.rows() != layout.size())
    throw ShapeError("layer_forward: composed input has " + std::to_string(x.rows()) + " rows, layout has " +
                     std::to_string(layout.size()));
  if (x.cols() != params.wq.rows())
    throw ShapeError("layer_forward: input width " + std::to_string(x.cols()) + " differs from layer width " +
                     std::to_string(params.wq.rows()));
  const auto& attn_norm = ops.param(params.attn_norm);
  const auto& wq = ops.param(params.wq);
  const auto& wk = ops.param(params.wk);
  const auto& wv = ops.param(params.wv);
  const auto& wo = ops.param(params.wo);
  const auto& ffn_norm = ops.param(params.ffn_norm);
  const auto& w1 = ops.param(params.w1);
  const auto& w2 = ops.param(params.w2);

  auto n1 = ops.rms_norm(composed, attn_norm, eps);
  auto q = ops.rope(ops.matmul(n1, wq), n_heads, rope);
  auto k = ops.rope(ops.matmul(n1, wk), n_heads, rope);
  auto v = ops.matmul(n1, wv);
  auto a = ops.attention(q, k, v, layout.mask, n_heads);
  auto h = ops.add(composed, ops.matmul(a, wo));
  auto n2 = ops.rms_norm(h, ffn_norm, eps);
  auto f = ops.matmul(ops.silu(ops.matmul(n2, w1)), w2);
  return ops.add(h, f);
}

}  // namespace comet

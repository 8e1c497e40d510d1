#pragma once

// Two interchangeable execution backends with the same operation set:
//
//   Eager<T>  values are plain matrices; used for streaming inference.
//   Tape<T>   values are handles into a gradient tape; used for training and
//             gradient checks.
//
// Model code is written once against the shared interface and instantiated
// with either backend, so both paths call identical forward kernels and
// produce bit-identical activations.

#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "comet/numerics.hpp"

namespace comet {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace kernels {

template <typename T>
Matrix<T> silu(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = x.data()[i] * sigmoid(x.data()[i]);
  return y;
}

template <typename T>
Matrix<T> head_cols(const Matrix<T>& x, std::size_t h, std::size_t hd) {
  Matrix<T> y(x.rows(), hd);
  for (std::size_t r = 0; r < x.rows(); ++r)
    std::copy(x.data() + r * x.cols() + h * hd, x.data() + r * x.cols() + (h + 1) * hd, y.data() + r * hd);
  return y;
}

template <typename T>
void add_head_cols(Matrix<T>& dst, const Matrix<T>& src, std::size_t h, std::size_t hd) {
  for (std::size_t r = 0; r < src.rows(); ++r) {
    T* d = dst.data() + r * dst.cols() + h * hd;
    const T* s = src.data() + r * hd;
    for (std::size_t j = 0; j < hd; ++j) d[j] += s[j];
  }
}

/// Multi-head attention; heads are contiguous column blocks of q/k/v.
template <typename T>
Matrix<T> multi_head_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                               const BoolMatrix& mask, std::size_t n_heads,
                               std::vector<Matrix<T>>* probs = nullptr) {
  detail::require(q.same_shape(k) && k.rows() == v.rows() && q.cols() == v.cols(),
                  "attention: q/k/v shapes " + q.shape_str() + " " + k.shape_str() + " " + v.shape_str());
  detail::require(q.cols() % n_heads == 0, "attention: width not divisible by head count");
  const std::size_t hd = q.cols() / n_heads;
  Matrix<T> out(q.rows(), q.cols());
  if (probs) probs->assign(n_heads, {});
  for (std::size_t h = 0; h < n_heads; ++h) {
    Matrix<T> p;
    Matrix<T> o = causal_attention(head_cols(q, h, hd), head_cols(k, h, hd), head_cols(v, h, hd), mask, &p);
    add_head_cols(out, o, h, hd);
    if (probs) (*probs)[h] = std::move(p);
  }
  return out;
}

/// Row-wise scalar gate. Row r of `state` and `candidate` is concatenated
/// along features and dotted with w_g (2d x 1); g_r = sigmoid of that, or the
/// clamp value when set. Returns the new state and writes gates (rows x 1).
template <typename T>
Matrix<T> gated_update(const Matrix<T>& state, const Matrix<T>& candidate, const Matrix<T>& w_g,
                       std::optional<T> clamp, Matrix<T>& gates) {
  detail::require(state.same_shape(candidate), detail::shapes("gated_update", state, candidate));
  const std::size_t d = state.cols();
  detail::require(w_g.rows() == 2 * d && w_g.cols() == 1, "gated_update: w_g must be (2d x 1), got " + w_g.shape_str());
  gates = Matrix<T>(state.rows(), 1);
  Matrix<T> out(state.rows(), d);
  for (std::size_t r = 0; r < state.rows(); ++r) {
    const T* s = state.data() + r * d;
    const T* c = candidate.data() + r * d;
    T g;
    if (clamp) {
      g = *clamp;
    } else {
      T z = T(0);
      for (std::size_t j = 0; j < d; ++j) z += s[j] * w_g.data()[j];
      for (std::size_t j = 0; j < d; ++j) z += c[j] * w_g.data()[d + j];
      g = sigmoid(z);
    }
    gates(r, 0) = g;
    T* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = g * s[j] + (T(1) - g) * c[j];
  }
  return out;
}

/// Sum over rows of weight_r * -log softmax(logits_r)[target_r]. Rows with a
/// negative target are skipped. Writes softmax probabilities when asked.
template <typename T>
T cross_entropy(const Matrix<T>& logits, std::span<const int> targets, std::span<const T> weights,
                Matrix<T>* probs = nullptr) {
  detail::require(targets.size() == logits.rows(), "cross_entropy: target count differs from logit rows");
  detail::require(weights.empty() || weights.size() == logits.rows(), "cross_entropy: weight count mismatch");
  if (probs) *probs = Matrix<T>(logits.rows(), logits.cols());
  T total = T(0);
  const std::size_t v = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] < 0) continue;
    detail::require(std::size_t(targets[r]) < v, "cross_entropy: target id out of range");
    const T* l = logits.data() + r * v;
    T mx = l[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, l[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(l[j] - mx);
    const T lse = mx + std::log(sum);
    const T w = weights.empty() ? T(1) : weights[r];
    total += w * (lse - l[targets[r]]);
    if (probs) {
      T* p = probs->data() + r * v;
      for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(l[j] - lse);
    }
  }
  return total;
}

}  // namespace kernels

// ===========================================================================
// Eager backend

template <typename T>
class Eager {
 public:
  using Scalar = T;
  using Value = Matrix<T>;

  const Matrix<T>& param(const Matrix<T>& p) { return p; }
  Matrix<T> constant(Matrix<T> m) { return m; }
  Matrix<T> detach(const Matrix<T>& m) { return m; }
  static const Matrix<T>& value(const Matrix<T>& v) { return v; }

  Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) { return comet::matmul(a, b); }
  Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) { return comet::matmul_nt(a, b); }
  Matrix<T> add(Matrix<T> a, const Matrix<T>& b) {
    add_into(a, b);
    return a;
  }
  Matrix<T> sub(Matrix<T> a, const Matrix<T>& b) {
    axpy_into(a, T(-1), b);
    return a;
  }
  Matrix<T> mul(Matrix<T> a, const Matrix<T>& b) {
    detail::require(a.same_shape(b), detail::shapes("mul", a, b));
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= b.data()[i];
    return a;
  }
  Matrix<T> scale(Matrix<T> a, T s) {
    for (auto& x : a.storage()) x *= s;
    return a;
  }
  Matrix<T> sum(const Matrix<T>& a) {
    T s = T(0);
    for (T x : a.storage()) s += x;
    return Matrix<T>(1, 1, s);
  }
  Matrix<T> silu(const Matrix<T>& x) { return kernels::silu(x); }
  Matrix<T> rms_norm(const Matrix<T>& x, const Matrix<T>& gain, T eps) { return rms_norm_rows(x, gain, eps); }
  Matrix<T> rope(const Matrix<T>& x, std::size_t n_heads, const RopeTable<T>& table) {
    return apply_rope(x, n_heads, table);
  }
  Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                      std::shared_ptr<const BoolMatrix> mask, std::size_t n_heads) {
    return kernels::multi_head_attention(q, k, v, *mask, n_heads);
  }
  Matrix<T> slice_rows(const Matrix<T>& x, std::size_t begin, std::size_t count) {
    return comet::slice_rows(x, begin, count);
  }
  Matrix<T> gather_rows(const Matrix<T>& x, std::vector<std::size_t> idx) { return comet::gather_rows<T>(x, idx); }
  Matrix<T> concat_rows(const std::vector<const Matrix<T>*>& parts) { return comet::concat_rows<T>(parts); }
  std::pair<Matrix<T>, Matrix<T>> gated_update(const Matrix<T>& state, const Matrix<T>& candidate,
                                               const Matrix<T>& w_g, std::optional<T> clamp) {
    Matrix<T> g;
    Matrix<T> s = kernels::gated_update(state, candidate, w_g, clamp, g);
    return {std::move(s), std::move(g)};
  }
  Matrix<T> cross_entropy(const Matrix<T>& logits, std::vector<int> targets, std::vector<T> weights) {
    return Matrix<T>(1, 1, kernels::cross_entropy<T>(logits, targets, weights));
  }
};

// ===========================================================================
// Tape backend

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

template <typename T>
class Tape {
 public:
  using Scalar = T;
  using Value = Var;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  /// Leaf bound to a parameter matrix; repeated calls with the same matrix
  /// reuse one leaf so gradients accumulate in a single place.
  Var param(const Matrix<T>& p) {
    auto it = params_.find(&p);
    if (it != params_.end()) return Var{it->second};
    Var v = push(p, true);
    params_.emplace(&p, v.id);
    return v;
  }
  Var constant(Matrix<T> m) { return push(std::move(m), false); }
  Var detach(Var x) { return push(value(x), false); }

  const Matrix<T>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Accumulated gradient of a parameter after backward(); zeros if unused.
  Matrix<T> gradient(const Matrix<T>& p) const {
    auto it = params_.find(&p);
    if (it == params_.end() || nodes_[it->second].grad.empty()) return Matrix<T>(p.rows(), p.cols());
    return nodes_[it->second].grad;
  }
  Matrix<T> gradient(Var v) const {
    const auto& n = nodes_[v.id];
    return n.grad.empty() ? Matrix<T>(n.value.rows(), n.value.cols()) : n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates in reverse recording order.
  void backward(Var loss) {
    detail::require(value(loss).size() == 1, "backward: loss must be a scalar");
    if (!std::isfinite(value(loss).data()[0])) throw NonFiniteError("backward: non-finite loss");
    grad(loss).fill(T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  // -- operations -----------------------------------------------------------

  Var matmul(Var a, Var b) {
    Var out = push(comet::matmul(value(a), value(b)), any(a, b));
    record(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      if (requires_grad(a)) gemm_nt_acc(g, value(b), grad(a));
      if (requires_grad(b)) gemm_tn_acc(value(a), g, grad(b));
    });
    return out;
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    Var out = push(comet::matmul_nt(value(a), value(b)), any(a, b));
    record(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      if (requires_grad(a)) gemm_nn_acc(g, value(b), grad(a));
      if (requires_grad(b)) gemm_tn_acc(g, value(a), grad(b));
    });
    return out;
  }

  Var add(Var a, Var b) {
    Matrix<T> v = value(a);
    add_into(v, value(b));
    Var out = push(std::move(v), any(a, b));
    record(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      if (requires_grad(a)) add_into(grad(a), g);
      if (requires_grad(b)) add_into(grad(b), g);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    Matrix<T> v = value(a);
    axpy_into(v, T(-1), value(b));
    Var out = push(std::move(v), any(a, b));
    record(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      if (requires_grad(a)) add_into(grad(a), g);
      if (requires_grad(b)) axpy_into(grad(b), T(-1), g);
    });
    return out;
  }

  Var mul(Var a, Var b) {
    detail::require(value(a).same_shape(value(b)), detail::shapes("mul", value(a), value(b)));
    Matrix<T> v = value(a);
    for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] *= value(b).data()[i];
    Var out = push(std::move(v), any(a, b));
    record(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      if (requires_grad(a)) {
        auto& ga = grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * value(b).data()[i];
      }
      if (requires_grad(b)) {
        auto& gb = grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * value(a).data()[i];
      }
    });
    return out;
  }

  Var scale(Var a, T s) {
    Matrix<T> v = value(a);
    for (auto& x : v.storage()) x *= s;
    Var out = push(std::move(v), any(a));
    record(out, [this, a, s, out] { axpy_into(grad(a), s, nodes_[out.id].grad); });
    return out;
  }

  Var sum(Var a) {
    T s = T(0);
    for (T x : value(a).storage()) s += x;
    Var out = push(Matrix<T>(1, 1, s), any(a));
    record(out, [this, a, out] {
      const T g = nodes_[out.id].grad.data()[0];
      for (auto& x : grad(a).storage()) x += g;
    });
    return out;
  }

  Var silu(Var x) {
    Var out = push(kernels::silu(value(x)), any(x));
    record(out, [this, x, out] {
      const auto& g = nodes_[out.id].grad;
      const auto& xv = value(x);
      auto& gx = grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = sigmoid(xv.data()[i]);
        gx.data()[i] += g.data()[i] * s * (T(1) + xv.data()[i] * (T(1) - s));
      }
    });
    return out;
  }

  Var rms_norm(Var x, Var gain, T eps) {
    auto inv = std::make_shared<std::vector<T>>();
    Var out = push(rms_norm_rows(value(x), value(gain), eps, inv.get()), any(x, gain));
    record(out, [this, x, gain, inv, out] {
      rms_norm_rows_backward(value(x), value(gain), *inv, nodes_[out.id].grad,
                             requires_grad(x) ? &grad(x) : nullptr, requires_grad(gain) ? &grad(gain) : nullptr);
    });
    return out;
  }

  Var rope(Var x, std::size_t n_heads, const RopeTable<T>& table) {
    Var out = push(apply_rope(value(x), n_heads, table), any(x));
    record(out, [this, x, n_heads, &table, out] {
      add_into(grad(x), apply_rope(nodes_[out.id].grad, n_heads, table, /*inverse=*/true));
    });
    return out;
  }

  Var attention(Var q, Var k, Var v, std::shared_ptr<const BoolMatrix> mask, std::size_t n_heads) {
    auto probs = std::make_shared<std::vector<Matrix<T>>>();
    Var out = push(kernels::multi_head_attention(value(q), value(k), value(v), *mask, n_heads, probs.get()),
                   any(q, k, v));
    record(out, [this, q, k, v, probs, n_heads, out] {
      const auto& g = nodes_[out.id].grad;
      const std::size_t hd = value(q).cols() / n_heads;
      auto& gq = grad(q);
      auto& gk = grad(k);
      auto& gv = grad(v);
      for (std::size_t h = 0; h < n_heads; ++h) {
        Matrix<T> qh = kernels::head_cols(value(q), h, hd), kh = kernels::head_cols(value(k), h, hd),
                  vh = kernels::head_cols(value(v), h, hd);
        Matrix<T> dq(qh.rows(), hd), dk(kh.rows(), hd), dv(vh.rows(), hd);
        causal_attention_backward(qh, kh, vh, (*probs)[h], kernels::head_cols(g, h, hd), dq, dk, dv);
        kernels::add_head_cols(gq, dq, h, hd);
        kernels::add_head_cols(gk, dk, h, hd);
        kernels::add_head_cols(gv, dv, h, hd);
      }
    });
    return out;
  }

  Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    Var out = push(comet::slice_rows(value(x), begin, count), any(x));
    record(out, [this, x, begin, out] {
      const auto& g = nodes_[out.id].grad;
      auto& gx = grad(x);
      T* dst = gx.data() + begin * gx.cols();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g.data()[i];
    });
    return out;
  }

  Var gather_rows(Var x, std::vector<std::size_t> idx) {
    Var out = push(comet::gather_rows<T>(value(x), idx), any(x));
    record(out, [this, x, idx = std::move(idx), out] {
      const auto& g = nodes_[out.id].grad;
      auto& gx = grad(x);
      const std::size_t c = gx.cols();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = gx.data() + idx[i] * c;
        const T* src = g.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
    return out;
  }

  Var concat_rows(const std::vector<const Var*>& part_ptrs) {
    std::vector<const Matrix<T>*> ptrs;
    std::vector<Var> parts;
    bool rg = false;
    for (const Var* p : part_ptrs) {
      parts.push_back(*p);
      ptrs.push_back(&value(*p));
      rg = rg || requires_grad(*p);
    }
    Var out = push(comet::concat_rows<T>(ptrs), rg);
    record(out, [this, parts, out] {
      const auto& g = nodes_[out.id].grad;
      std::size_t at = 0;
      for (Var p : parts) {
        const std::size_t n = value(p).size();
        if (requires_grad(p)) {
          auto& gp = grad(p);
          for (std::size_t i = 0; i < n; ++i) gp.data()[i] += g.data()[at + i];
        }
        at += n;
      }
    });
    return out;
  }

  std::pair<Var, Var> gated_update(Var state, Var candidate, Var w_g, std::optional<T> clamp) {
    Matrix<T> gates;
    Matrix<T> next = kernels::gated_update(value(state), value(candidate), value(w_g), clamp, gates);
    Var g = push(gates, false);
    Var out = push(std::move(next), any(state, candidate, w_g));
    const bool learned = !clamp.has_value();
    record(out, [this, state, candidate, w_g, g, learned, out] {
      const auto& dout = nodes_[out.id].grad;
      const auto& s = value(state);
      const auto& c = value(candidate);
      const auto& w = value(w_g);
      const auto& gv = value(g);
      const std::size_t d = s.cols();
      Matrix<T>* ds = requires_grad(state) ? &grad(state) : nullptr;
      Matrix<T>* dc = requires_grad(candidate) ? &grad(candidate) : nullptr;
      Matrix<T>* dw = (learned && requires_grad(w_g)) ? &grad(w_g) : nullptr;
      for (std::size_t r = 0; r < s.rows(); ++r) {
        const T gr = gv(r, 0);
        const T* dor = dout.data() + r * d;
        const T* sr = s.data() + r * d;
        const T* cr = c.data() + r * d;
        T dz = T(0);
        if (learned) {
          T dg = T(0);
          for (std::size_t j = 0; j < d; ++j) dg += dor[j] * (sr[j] - cr[j]);
          dz = dg * gr * (T(1) - gr);
        }
        if (ds) {
          T* p = ds->data() + r * d;
          for (std::size_t j = 0; j < d; ++j) p[j] += gr * dor[j] + dz * w.data()[j];
        }
        if (dc) {
          T* p = dc->data() + r * d;
          for (std::size_t j = 0; j < d; ++j) p[j] += (T(1) - gr) * dor[j] + dz * w.data()[d + j];
        }
        if (dw) {
          for (std::size_t j = 0; j < d; ++j) dw->data()[j] += dz * sr[j];
          for (std::size_t j = 0; j < d; ++j) dw->data()[d + j] += dz * cr[j];
        }
      }
    });
    return {out, g};
  }

  Var cross_entropy(Var logits, std::vector<int> targets, std::vector<T> weights) {
    auto probs = std::make_shared<Matrix<T>>();
    const T loss = kernels::cross_entropy<T>(value(logits), targets, weights, probs.get());
    Var out = push(Matrix<T>(1, 1, loss), any(logits));
    record(out, [this, logits, probs, targets = std::move(targets), weights = std::move(weights), out] {
      const T g = nodes_[out.id].grad.data()[0];
      auto& gl = grad(logits);
      const std::size_t v = gl.cols();
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] < 0) continue;
        const T w = g * (weights.empty() ? T(1) : weights[r]);
        T* dst = gl.data() + r * v;
        const T* p = probs->data() + r * v;
        for (std::size_t j = 0; j < v; ++j) dst[j] += w * p[j];
        dst[targets[r]] -= w;
      }
    });
    return out;
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    std::function<void()> back;
    bool requires_grad = false;
  };

  Var push(Matrix<T> v, bool requires_grad) {
    nodes_.push_back(Node{std::move(v), {}, {}, requires_grad});
    return Var{nodes_.size() - 1};
  }

  template <typename F>
  void record(Var out, F&& f) {
    if (nodes_[out.id].requires_grad) nodes_[out.id].back = std::forward<F>(f);
  }

  template <typename... Vs>
  bool any(Vs... vs) const {
    return (requires_grad(vs) || ...);
  }

  Matrix<T>& grad(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty() && n.value.size() != 0) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Matrix<T>*, std::size_t> params_;
};

// ===========================================================================
// Finite-difference gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares analytic gradients against central differences for every element
/// of every parameter. `loss_on_tape` builds the loss on a fresh tape given the
/// parameter list; `loss_eager` evaluates it without recording. Relative error
/// per element is |a - n| / (|a| + |n| + 1e-12).
template <typename T, typename TapeLoss, typename EagerLoss>
GradCheckResult grad_check(std::vector<Matrix<T>*> params, TapeLoss&& loss_on_tape, EagerLoss&& loss_eager,
                           T h = T(1e-5)) {
  if (!(h > T(0))) throw std::invalid_argument("grad_check: step must be positive");
  Tape<T> tape;
  Var loss = loss_on_tape(tape);
  if (!std::isfinite(tape.value(loss).data()[0])) throw NonFiniteError("grad_check: non-finite loss");
  tape.backward(loss);
  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix<T> analytic = tape.gradient(*params[p]);
    auto& values = params[p]->storage();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + h;
      const T up = loss_eager();
      values[i] = saved - h;
      const T down = loss_eager();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError("grad_check: non-finite loss");
      const double numeric = (double(up) - double(down)) / (2.0 * double(h));
      const double a = analytic.data()[i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      ++res.n_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = p;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace comet

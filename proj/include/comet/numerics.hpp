#pragma once

// Dense row-major kernels shared by the eager and taped execution paths.
//
// Summation order is fixed everywhere: products accumulate over the inner
// index in increasing order, reductions over a row run left to right. The
// build does not enable -ffast-math, so results are bit-reproducible for a
// given binary.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace comet {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }
  static Matrix row_vector(std::span<const T> values) {
    Matrix m(1, values.size());
    std::copy(values.begin(), values.end(), m.data_.begin());
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Boolean attention mask; true marks an attendable (query, key) pair.
class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), data_(rows * cols, fill ? 1 : 0) {}

  static BoolMatrix causal(std::size_t n) {
    BoolMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { data_[r * cols_ + c] = v ? 1 : 0; }

  /// One past the last attendable column of row r (0 when the row is empty).
  std::size_t row_extent(std::size_t r) const {
    for (std::size_t c = cols_; c > 0; --c)
      if (data_[r * cols_ + c - 1]) return c;
    return 0;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> data_;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
std::string shapes(const char* op, const Matrix<T>& a, const Matrix<T>& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.shape_str() << " and " << b.shape_str();
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products. All three accumulate into `out`, which must already be shaped.

/// out += a * b
template <typename T>
void gemm_nn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  detail::require(a.cols() == b.rows(), detail::shapes("matmul", a, b));
  detail::require(out.rows() == a.rows() && out.cols() == b.cols(), "matmul: bad output shape");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const T* A = a.data();
  const T* B = b.data();
  T* C = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      if (aip == T(0)) continue;
      const T* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
}

/// out += a^T * b
template <typename T>
void gemm_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  detail::require(a.rows() == b.rows(), detail::shapes("matmul_tn", a, b));
  detail::require(out.rows() == a.cols() && out.cols() == b.cols(), "matmul_tn: bad output shape");
  const std::size_t n = a.rows(), ka = a.cols(), m = b.cols();
  const T* A = a.data();
  const T* B = b.data();
  T* C = out.data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* brow = B + r * m;
    for (std::size_t i = 0; i < ka; ++i) {
      const T ari = A[r * ka + i];
      if (ari == T(0)) continue;
      T* crow = C + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += ari * brow[j];
    }
  }
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// out += a * b^T
template <typename T>
void gemm_nt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  detail::require(a.cols() == b.cols(), detail::shapes("matmul_nt", a, b));
  gemm_nn_acc(a, transpose(b), out);
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), detail::shapes("matmul", a, b));
  Matrix<T> out(a.rows(), b.cols());
  gemm_nn_acc(a, b, out);
  return out;
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), detail::shapes("matmul_nt", a, b));
  Matrix<T> out(a.rows(), b.rows());
  gemm_nn_acc(a, transpose(b), out);
  return out;
}

template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows(), detail::shapes("matmul_tn", a, b));
  Matrix<T> out(a.cols(), b.cols());
  gemm_tn_acc(a, b, out);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  detail::require(dst.same_shape(src), detail::shapes("add", dst, src));
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
void axpy_into(Matrix<T>& dst, T alpha, const Matrix<T>& src) {
  detail::require(dst.same_shape(src), detail::shapes("axpy", dst, src));
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += alpha * s[i];
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  for (T v : m.storage())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// ---------------------------------------------------------------------------
// RMSNorm

template <typename T>
constexpr T kRmsEps = T(1e-6);

/// y_i = gain_i * x_i / sqrt(mean(x^2) + eps)
template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gain, T eps = kRmsEps<T>) {
  detail::require(x.size() == gain.size(), "rms_norm: gain length differs from input length");
  T ss = T(0);
  for (T v : x) ss += v * v;
  const T inv = T(1) / std::sqrt(ss / T(x.size()) + eps);
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * x[i] * inv;
  return y;
}

/// Row-wise RMSNorm. Writes the per-row reciprocal RMS into `inv_rms` when
/// given, for use by the backward pass.
template <typename T>
Matrix<T> rms_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, T eps,
                        std::vector<T>* inv_rms = nullptr) {
  detail::require(gain.rows() == 1 && gain.cols() == x.cols(), detail::shapes("rms_norm", x, gain));
  Matrix<T> y(x.rows(), x.cols());
  if (inv_rms) inv_rms->assign(x.rows(), T(0));
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data() + r * d;
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / T(d) + eps);
    if (inv_rms) (*inv_rms)[r] = inv;
    T* yr = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = gain.data()[j] * xr[j] * inv;
  }
  return y;
}

/// Backward of rms_norm_rows; accumulates into dx and dgain (either may be null).
template <typename T>
void rms_norm_rows_backward(const Matrix<T>& x, const Matrix<T>& gain, const std::vector<T>& inv_rms,
                            const Matrix<T>& dy, Matrix<T>* dx, Matrix<T>* dgain) {
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data() + r * d;
    const T* dyr = dy.data() + r * d;
    const T inv = inv_rms[r];
    if (dgain) {
      T* dg = dgain->data();
      for (std::size_t j = 0; j < d; ++j) dg[j] += dyr[j] * xr[j] * inv;
    }
    if (dx) {
      // dx = inv * (g*dy) - x * inv^3 * mean(g*dy*x)
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += gain.data()[j] * dyr[j] * xr[j];
      const T coef = inv * inv * inv * dot / T(d);
      T* dxr = dx->data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dxr[j] += inv * gain.data()[j] * dyr[j] - coef * xr[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Softmax and attention

/// In-place masked softmax over row r's first `extent` entries. Entries the
/// mask excludes are written as exactly zero.
template <typename T>
void masked_softmax_row(T* row, std::size_t extent, const BoolMatrix& mask, std::size_t r) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < extent; ++j)
    if (mask(r, j)) mx = std::max(mx, row[j]);
  T sum = T(0);
  for (std::size_t j = 0; j < extent; ++j) {
    if (mask(r, j)) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    } else {
      row[j] = T(0);
    }
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < extent; ++j) row[j] *= inv;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> y = x;
  BoolMatrix all(x.rows(), x.cols(), true);
  for (std::size_t r = 0; r < x.rows(); ++r) masked_softmax_row(y.data() + r * y.cols(), y.cols(), all, r);
  return y;
}

inline void check_mask_rows(const BoolMatrix& mask) {
  for (std::size_t r = 0; r < mask.rows(); ++r)
    if (mask.row_extent(r) == 0)
      throw ShapeError("attention: row " + std::to_string(r) + " has no attendable position");
}

/// Single-head scaled dot-product attention, softmax(q k^T / sqrt(dh) + mask) v.
/// When `probs` is given it receives the attention weights (rows sum to one
/// over unmasked positions, masked entries are exactly zero).
template <typename T>
Matrix<T> causal_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                           const BoolMatrix& mask, Matrix<T>* probs = nullptr) {
  detail::require(q.cols() == k.cols(), detail::shapes("attention(q,k)", q, k));
  detail::require(k.rows() == v.rows(), detail::shapes("attention(k,v)", k, v));
  detail::require(mask.rows() == q.rows() && mask.cols() == k.rows(), "attention: mask shape mismatch");
  check_mask_rows(mask);
  const T scale = T(1) / std::sqrt(T(q.cols()));
  Matrix<T> s = matmul_nt(q, k);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    T* row = s.data() + r * s.cols();
    for (std::size_t j = 0; j < s.cols(); ++j) row[j] *= scale;
    masked_softmax_row(row, s.cols(), mask, r);
  }
  Matrix<T> out = matmul(s, v);
  if (probs) *probs = std::move(s);
  return out;
}

/// Backward of causal_attention given its saved probabilities.
template <typename T>
void causal_attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                               const Matrix<T>& probs, const Matrix<T>& dout, Matrix<T>& dq,
                               Matrix<T>& dk, Matrix<T>& dv) {
  const T scale = T(1) / std::sqrt(T(q.cols()));
  gemm_tn_acc(probs, dout, dv);
  Matrix<T> dp = matmul_nt(dout, v);
  // dS = P * (dP - rowsum(dP * P))
  for (std::size_t r = 0; r < dp.rows(); ++r) {
    T* dpr = dp.data() + r * dp.cols();
    const T* pr = probs.data() + r * probs.cols();
    T dot = T(0);
    for (std::size_t j = 0; j < dp.cols(); ++j) dot += dpr[j] * pr[j];
    for (std::size_t j = 0; j < dp.cols(); ++j) dpr[j] = pr[j] * (dpr[j] - dot) * scale;
  }
  gemm_nn_acc(dp, k, dq);
  gemm_tn_acc(dp, q, dk);
}

// ---------------------------------------------------------------------------
// Rotary position encoding, applied per head to adjacent feature pairs.

template <typename T>
struct RopeTable {
  std::size_t head_dim = 0;
  std::vector<T> cos, sin;  // [position][head_dim / 2]

  RopeTable(std::size_t n_positions, std::size_t head_dim_, double theta = 10000.0) : head_dim(head_dim_) {
    detail::require(head_dim % 2 == 0, "rope: head dimension must be even");
    const std::size_t half = head_dim / 2;
    cos.resize(n_positions * half);
    sin.resize(n_positions * half);
    for (std::size_t p = 0; p < n_positions; ++p)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = 1.0 / std::pow(theta, double(2 * i) / double(head_dim));
        const double ang = double(p) * freq;
        cos[p * half + i] = T(std::cos(ang));
        sin[p * half + i] = T(std::sin(ang));
      }
  }
};

/// Rotates row r of x by position r. `inverse` applies the transpose rotation,
/// which is also the backward pass of the forward rotation.
template <typename T>
Matrix<T> apply_rope(const Matrix<T>& x, std::size_t n_heads, const RopeTable<T>& table, bool inverse = false) {
  detail::require(x.cols() % n_heads == 0, "rope: model width not divisible by head count");
  const std::size_t hd = x.cols() / n_heads;
  detail::require(hd == table.head_dim, "rope: table head dimension mismatch");
  detail::require(table.cos.size() >= x.rows() * (hd / 2), "rope: table too short");
  const std::size_t half = hd / 2;
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t p = 0; p < x.rows(); ++p) {
    const T* c = table.cos.data() + p * half;
    const T* s = table.sin.data() + p * half;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const T* xr = x.data() + p * x.cols() + h * hd;
      T* yr = y.data() + p * y.cols() + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const T a = xr[2 * i], b = xr[2 * i + 1];
        const T sn = inverse ? -s[i] : s[i];
        yr[2 * i] = a * c[i] - b * sn;
        yr[2 * i + 1] = a * sn + b * c[i];
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Row utilities

template <typename T>
Matrix<T> slice_rows(const Matrix<T>& x, std::size_t begin, std::size_t count) {
  detail::require(begin + count <= x.rows(), "slice_rows: range exceeds " + x.shape_str());
  Matrix<T> y(count, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + (begin + count) * x.cols(), y.data());
  return y;
}

template <typename T>
Matrix<T> gather_rows(const Matrix<T>& x, std::span<const std::size_t> idx) {
  Matrix<T> y(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(idx[i] < x.rows(), "gather_rows: index out of range");
    std::copy(x.data() + idx[i] * x.cols(), x.data() + (idx[i] + 1) * x.cols(), y.data() + i * x.cols());
  }
  return y;
}

template <typename T>
Matrix<T> concat_rows(std::span<const Matrix<T>* const> parts) {
  std::size_t rows = 0, cols = 0;
  bool have_cols = false;
  for (const auto* p : parts) {
    if (p->rows() == 0) continue;
    if (have_cols) detail::require(p->cols() == cols, "concat_rows: column mismatch");
    cols = p->cols();
    have_cols = true;
    rows += p->rows();
  }
  if (!have_cols && !parts.empty()) cols = parts.front()->cols();
  Matrix<T> y(rows, cols);
  std::size_t at = 0;
  for (const auto* p : parts) {
    std::copy(p->data(), p->data() + p->size(), y.data() + at);
    at += p->size();
  }
  return y;
}

}  // namespace comet

#pragma once

// Global and temporary memory.
//
// Global memory: each layer keeps an (m x d) state S. The layer reads it as
// G = RLA(S), where RLA(x) = x + (x W_down^T) W_up^T is a residual low-rank
// adapter. After the layer runs, the readout outputs R' become a candidate
// state S~ = RMSNorm(R') and the state moves to g*S + (1-g)*S~ with one gate
// per state row, g = sigmoid([S_row ; S~_row] . w_g).
//
// Temporary memory: a fixed-capacity FIFO of per-chunk entries, each entry
// RLA(RMSNorm(C')) of that chunk's compression-token outputs. The layer sees
// the entries concatenated oldest first.
//
// Everything here is templated on an execution backend (see autodiff.hpp) so
// the same code runs eagerly for streaming and on a tape for training.

#include <deque>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "comet/autodiff.hpp"

namespace comet {

template <typename T>
struct RlaParams {
  Matrix<T> w_down;  // r x d
  Matrix<T> w_up;    // d x r

  RlaParams() = default;
  RlaParams(std::size_t d_model, std::size_t rank) : w_down(rank, d_model), w_up(d_model, rank) {
    detail::require(rank >= 1, "rla: rank must be at least 1");
  }

  std::size_t rank() const { return w_down.rows(); }
  std::size_t d_model() const { return w_down.cols(); }

  /// Small random w_down, zero w_up: the adapter starts as the identity map.
  template <typename Rng>
  void init_identity(Rng& rng, T stddev) {
    std::normal_distribution<double> nd(0.0, double(stddev));
    for (auto& x : w_down.storage()) x = T(nd(rng));
    w_up.fill(T(0));
  }
};

/// x + (x W_down^T) W_up^T, applied to every row of x.
template <typename Ops, typename V>
typename Ops::Value rla_apply(Ops& ops, const V& w_down, const V& w_up, const V& x) {
  const auto& xv = ops.value(x);
  detail::require(xv.cols() == ops.value(w_down).cols(),
                  "rla: input width " + std::to_string(xv.cols()) + " differs from adapter width " +
                      std::to_string(ops.value(w_down).cols()));
  return ops.add(x, ops.matmul_nt(ops.matmul_nt(x, w_down), w_up));
}

template <typename T>
Matrix<T> rla_apply(const RlaParams<T>& rla, const Matrix<T>& x) {
  Eager<T> ops;
  return rla_apply(ops, rla.w_down, rla.w_up, x);
}

/// G = RLA(S). Does not touch S.
template <typename Ops, typename V>
typename Ops::Value global_memory_read(Ops& ops, const V& state, const V& w_down, const V& w_up) {
  return rla_apply(ops, w_down, w_up, state);
}

template <typename T>
Matrix<T> global_memory_read(const Matrix<T>& state, const RlaParams<T>& rla) {
  return rla_apply(rla, state);
}

/// Gated state update from readout outputs. Returns (S', gates). `clamp`
/// overrides the learned gate for ablations and tests.
template <typename Ops, typename V>
std::pair<typename Ops::Value, typename Ops::Value> global_state_update(Ops& ops, const V& state,
                                                                       const V& readout_out, const V& w_g,
                                                                       const V& gain,
                                                                       typename Ops::Scalar eps,
                                                                       std::optional<typename Ops::Scalar> clamp) {
  const auto& s = ops.value(state);
  const auto& r = ops.value(readout_out);
  if (r.rows() != s.rows())
    throw ShapeError("global_state_update: readout has " + std::to_string(r.rows()) + " rows, state has " +
                     std::to_string(s.rows()));
  auto candidate = ops.rms_norm(readout_out, gain, eps);
  return ops.gated_update(state, candidate, w_g, clamp);
}

/// Bounded FIFO of chunk entries held in a ring of `capacity` slots.
/// Pushing into a full ring overwrites the oldest entry. With preallocate()
/// every slot owns its storage up front, so the footprint never changes.
template <typename V>
class TempQueue {
 public:
  TempQueue() = default;
  TempQueue(std::size_t capacity_entries, std::size_t entry_rows)
      : capacity_(capacity_entries), entry_rows_(entry_rows), slots_(capacity_entries) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t entry_rows() const { return entry_rows_; }
  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }

  /// i-th entry, oldest first.
  const V& at(std::size_t i) const { return slots_[(head_ + i) % capacity_]; }
  std::vector<const V*> entries() const {
    std::vector<const V*> out;
    out.reserve(count_);
    for (std::size_t i = 0; i < count_; ++i) out.push_back(&at(i));
    return out;
  }

  void preallocate(const V& blank) {
    for (auto& s : slots_) s = blank;
  }
  const std::vector<V>& slots() const { return slots_; }

  /// Appends at the tail; drops the head when over capacity. A zero-capacity
  /// queue stays empty.
  void push(const V& entry) {
    if (capacity_ == 0) return;
    slots_[(head_ + count_) % capacity_] = entry;  // copy keeps the slot's buffer
    if (count_ < capacity_) {
      ++count_;
    } else {
      head_ = (head_ + 1) % capacity_;
    }
  }

  void clear() { head_ = count_ = 0; }

 private:
  std::size_t capacity_ = 0;
  std::size_t entry_rows_ = 0;
  std::vector<V> slots_;
  std::size_t head_ = 0, count_ = 0;
};

/// Normalizes compression-token outputs, passes them through the adapter and
/// enqueues the result. Entries shorter than entry_rows come from a final
/// partial chunk and are accepted; longer ones are rejected.
template <typename Ops, typename V>
void temp_enqueue(Ops& ops, TempQueue<typename Ops::Value>& queue, const V& comp_out, const V& w_down,
                  const V& w_up, const V& gain, typename Ops::Scalar eps) {
  const std::size_t rows = ops.value(comp_out).rows();
  if (rows == 0 || rows > queue.entry_rows())
    throw ShapeError("temp_enqueue: entry has " + std::to_string(rows) + " rows, expected 1.." +
                     std::to_string(queue.entry_rows()));
  if (queue.capacity() == 0) return;
  queue.push(rla_apply(ops, w_down, w_up, ops.rms_norm(comp_out, gain, eps)));
}

/// Entries concatenated oldest first; an empty queue yields zero rows.
template <typename Ops>
typename Ops::Value temp_concat(Ops& ops, const TempQueue<typename Ops::Value>& queue, std::size_t d_model) {
  if (queue.empty()) return ops.constant(Matrix<typename Ops::Scalar>(0, d_model));
  return ops.concat_rows(queue.entries());
}

/// Elements held by live entries.
template <typename T>
std::size_t element_count(const TempQueue<Matrix<T>>& q) {
  std::size_t n = 0;
  for (const auto* e : q.entries()) n += e->size();
  return n;
}

/// Elements of storage owned by the ring, live or not.
template <typename T>
std::size_t footprint_elements(const TempQueue<Matrix<T>>& q) {
  std::size_t n = 0;
  for (const auto& s : q.slots()) n += std::max(s.storage().capacity(), s.size());
  return n;
}

// ---------------------------------------------------------------------------
// Gate trace

struct GateRecord {
  std::size_t layer = 0;
  std::size_t chunk = 0;
  std::size_t state_id = 0;
  double gate = 0.0;
};

class GateTrace {
 public:
  void record(std::size_t layer, std::size_t chunk, std::span<const double> gates) {
    for (std::size_t i = 0; i < gates.size(); ++i) rows_.push_back({layer, chunk, i, gates[i]});
  }
  template <typename T>
  void record(std::size_t layer, std::size_t chunk, const Matrix<T>& gates) {
    for (std::size_t i = 0; i < gates.rows(); ++i) rows_.push_back({layer, chunk, i, double(gates(i, 0))});
  }

  const std::vector<GateRecord>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  void clear() { rows_.clear(); }

  void write_csv(std::ostream& os) const {
    os << "layer,chunk,state_id,gate_value\n";
    os.precision(17);
    for (const auto& r : rows_) os << r.layer << ',' << r.chunk << ',' << r.state_id << ',' << r.gate << '\n';
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows_)
      arr.push_back({{"layer", r.layer}, {"chunk", r.chunk}, {"state_id", r.state_id}, {"gate_value", r.gate}});
    return arr;
  }

 private:
  std::vector<GateRecord> rows_;
};

}  // namespace comet

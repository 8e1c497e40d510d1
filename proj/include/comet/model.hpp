#pragma once

// Full chunk-recurrent model: embeddings, a stack of layers each with its own
// global state and FIFO, and an LM head over context positions.

#include <chrono>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "comet/config.hpp"
#include "comet/layer.hpp"
#include "comet/memory.hpp"

namespace comet {

template <typename T>
struct MemoryParams {
  RlaParams<T> rla;
  RlaParams<T> temp_rla;  // used only when share_rla is false
  Matrix<T> w_g;          // 2d x 1
  Matrix<T> s0;           // m x d, initial state
  Matrix<T> state_norm;   // 1 x d, gain of RMSNorm(R')
  Matrix<T> temp_norm;    // 1 x d, gain of RMSNorm(C')

  const RlaParams<T>& temp_adapter(bool shared) const { return shared ? rla : temp_rla; }
};

template <typename T>
struct ModelParams {
  Matrix<T> tok_emb;      // vocab x d
  Matrix<T> compress_emb; // 1 x d, shared by every compression slot
  Matrix<T> readout_emb;  // m x d
  std::vector<LayerParams<T>> layers;
  std::vector<MemoryParams<T>> memory;
  Matrix<T> final_norm;   // 1 x d
  Matrix<T> lm_head;      // d x vocab

  /// Every trainable matrix with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Matrix<T>*>> named() {
    std::vector<std::pair<std::string, Matrix<T>*>> out{
        {"tok_emb", &tok_emb}, {"compress_emb", &compress_emb}, {"readout_emb", &readout_emb}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      auto& l = layers[i];
      auto& m = memory[i];
      out.insert(out.end(), {{p + "attn_norm", &l.attn_norm},
                             {p + "wq", &l.wq},
                             {p + "wk", &l.wk},
                             {p + "wv", &l.wv},
                             {p + "wo", &l.wo},
                             {p + "ffn_norm", &l.ffn_norm},
                             {p + "w1", &l.w1},
                             {p + "w2", &l.w2},
                             {p + "rla.w_down", &m.rla.w_down},
                             {p + "rla.w_up", &m.rla.w_up},
                             {p + "temp_rla.w_down", &m.temp_rla.w_down},
                             {p + "temp_rla.w_up", &m.temp_rla.w_up},
                             {p + "w_g", &m.w_g},
                             {p + "s0", &m.s0},
                             {p + "state_norm", &m.state_norm},
                             {p + "temp_norm", &m.temp_norm}});
    }
    out.insert(out.end(), {{"final_norm", &final_norm}, {"lm_head", &lm_head}});
    return out;
  }

  std::vector<std::pair<std::string, const Matrix<T>*>> named() const {
    auto mut = const_cast<ModelParams*>(this)->named();
    return {mut.begin(), mut.end()};
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named()) n += m->size();
    return n;
  }
};

/// Per-layer recurrent memory carried between chunks.
template <typename V>
struct MemoryState {
  std::vector<V> state;              // per layer, m x d
  std::vector<TempQueue<V>> queues;  // per layer
};

/// Elements in live state rows and live queue entries.
template <typename T>
std::size_t element_count(const MemoryState<Matrix<T>>& mem) {
  std::size_t n = 0;
  for (const auto& s : mem.state) n += s.size();
  for (const auto& q : mem.queues) n += element_count(q);
  return n;
}

/// Elements of storage the memory owns, including queue slots not yet filled.
template <typename T>
std::size_t footprint_elements(const MemoryState<Matrix<T>>& mem) {
  std::size_t n = 0;
  for (const auto& s : mem.state) n += s.size();
  for (const auto& q : mem.queues) n += footprint_elements(q);
  return n;
}

template <typename T>
class Model {
 public:
  using Scalar = T;

  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)), rope_(1, 2) {
    cfg_.validate();
    allocate();
    rope_ = RopeTable<T>(max_composed_rows(), cfg_.d_model / cfg_.n_heads, cfg_.rope_theta);
    init(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  const RopeTable<T>& rope() const { return rope_; }

  /// Test hook: forces every gate to a constant. The no_gate ablation is a
  /// built-in clamp at zero.
  void set_gate_override(std::optional<T> g) { gate_override_ = g; }
  std::optional<T> gate_clamp() const {
    if (gate_override_) return gate_override_;
    if (cfg_.ablation == Ablation::no_gate) return T(0);
    return std::nullopt;
  }

  std::size_t max_composed_rows() const {
    return 2 * cfg_.m_global + cfg_.temp_capacity_tokens() + cfg_.chunk_size + cfg_.compress_per_chunk();
  }

  /// Standard initialization: weights random, norm gains 1, S0 zero, adapters
  /// start as identity, w_g zero so gates start at 0.5.
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    auto fill = [&](Matrix<T>& m, double sd) {
      for (auto& x : m.storage()) x = T(unit(rng) * sd);
    };
    fill(params_.tok_emb, 1.0);
    fill(params_.compress_emb, 1.0);
    fill(params_.readout_emb, 1.0);
    for (auto& l : params_.layers) l.init(rng, cfg_.n_layers);
    for (auto& m : params_.memory) {
      m.rla.init_identity(rng, T(0.02));
      m.temp_rla.init_identity(rng, T(0.02));
      m.w_g.fill(T(0));
      m.s0.fill(T(0));
      m.state_norm.fill(T(1));
      m.temp_norm.fill(T(1));
    }
    params_.final_norm.fill(T(1));
    fill(params_.lm_head, 1.0 / std::sqrt(double(cfg_.d_model)));
  }

  /// Every parameter random (gains near one); makes all memory paths active,
  /// which gradient checks need.
  void randomize(std::uint64_t seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (auto& [name, m] : params_.named()) {
      const bool gain = name.ends_with("norm");
      for (auto& x : m->storage()) x = gain ? T(1.0 + 0.2 * unit(rng)) : T(unit(rng) * scale);
    }
  }

  template <typename Ops>
  MemoryState<typename Ops::Value> initial_memory(Ops& ops) const {
    MemoryState<typename Ops::Value> mem;
    const std::size_t cap = cfg_.temp_capacity_entries();
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      mem.state.push_back(typename Ops::Value(ops.param(params_.memory[i].s0)));
      mem.queues.emplace_back(cap, cfg_.compress_per_chunk());
      if constexpr (std::is_same_v<typename Ops::Value, Matrix<T>>)
        mem.queues.back().preallocate(Matrix<T>(cfg_.compress_per_chunk(), cfg_.d_model));
    }
    return mem;
  }

  /// Runs one chunk through every layer. With `commit` the per-layer states
  /// and queues advance; without it the memory is read but left unchanged
  /// (used to score a partial chunk that will keep growing). Returns logits
  /// for the context positions only, one row per token.
  template <typename Ops>
  typename Ops::Value forward_chunk(Ops& ops, MemoryState<typename Ops::Value>& mem, std::span<const int> ids,
                                    bool commit, GateTrace* trace = nullptr, std::size_t chunk_index = 0) const {
    using V = typename Ops::Value;
    if (ids.empty()) throw std::invalid_argument("process_chunk: empty chunk");
    if (ids.size() > cfg_.chunk_size)
      throw std::invalid_argument("process_chunk: " + std::to_string(ids.size()) + " tokens exceed chunk_size " +
                                  std::to_string(cfg_.chunk_size));
    for (int id : ids)
      if (id < 0 || std::size_t(id) >= cfg_.vocab)
        throw std::invalid_argument("process_chunk: token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(cfg_.vocab));

    std::size_t temp_rows = 0;
    if (!mem.queues.empty())
      for (const auto* e : mem.queues[0].entries()) temp_rows += ops.value(*e).rows();
    const ChunkLayout layout = build_layout(ids.size(), cfg_, temp_rows);

    // Layer-0 body rows from one table: token embeddings, then the shared
    // compression embedding, then the readout embeddings.
    std::vector<std::size_t> rows;
    rows.reserve(layout.body_rows());
    for (const auto& slot : layout.slots) {
      switch (slot.role) {
        case Role::context: rows.push_back(std::size_t(ids[slot.index])); break;
        case Role::compress: rows.push_back(cfg_.vocab); break;
        case Role::readout: rows.push_back(cfg_.vocab + 1 + slot.index); break;
        default: break;
      }
    }
    const auto& tok = ops.param(params_.tok_emb);
    const auto& comp = ops.param(params_.compress_emb);
    const auto& rdo = ops.param(params_.readout_emb);
    V table = ops.concat_rows({&tok, &comp, &rdo});
    V body = ops.gather_rows(table, std::move(rows));

    const T eps = T(cfg_.rms_eps);
    const auto clamp = gate_clamp();
    const std::size_t m = cfg_.m_global;
    const std::size_t n_body = layout.body_rows();

    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      const auto& mp = params_.memory[i];
      const auto& w_down = ops.param(mp.rla.w_down);
      const auto& w_up = ops.param(mp.rla.w_up);
      V g_mem = m > 0 ? global_memory_read(ops, mem.state[i], w_down, w_up)
                      : ops.constant(Matrix<T>(0, cfg_.d_model));
      V t_mem = temp_concat(ops, mem.queues[i], cfg_.d_model);
      V composed = ops.concat_rows({&g_mem, &t_mem, &body});
      V out = layer_forward(ops, params_.layers[i], composed, layout, cfg_.n_heads, rope_, eps);
      body = ops.slice_rows(out, layout.memory_rows(), n_body);

      if (!commit) continue;
      if (m > 0) {
        V readout = ops.slice_rows(body, n_body - m, m);
        auto [next, gates] = global_state_update(ops, mem.state[i], readout, ops.param(mp.w_g),
                                                 ops.param(mp.state_norm), eps, clamp);
        if (trace) trace->record(i, chunk_index, ops.value(gates));
        mem.state[i] = std::move(next);
      }
      if (mem.queues[i].capacity() > 0) {
        const auto& ta = mp.temp_adapter(cfg_.share_rla);
        V comp_out = ops.gather_rows(body, layout.compress_rows);
        temp_enqueue(ops, mem.queues[i], comp_out, ops.param(ta.w_down), ops.param(ta.w_up),
                     ops.param(mp.temp_norm), eps);
      }
    }

    V hidden = ops.gather_rows(body, layout.context_rows);
    V normed = ops.rms_norm(hidden, ops.param(params_.final_norm), eps);
    return ops.matmul(normed, ops.param(params_.lm_head));
  }

 private:
  void allocate() {
    const std::size_t d = cfg_.d_model, m = cfg_.m_global;
    params_.tok_emb = Matrix<T>(cfg_.vocab, d);
    params_.compress_emb = Matrix<T>(1, d);
    params_.readout_emb = Matrix<T>(m, d);
    params_.layers.clear();
    params_.memory.clear();
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      params_.layers.emplace_back(d, cfg_.ffn_hidden);
      MemoryParams<T> mp;
      mp.rla = RlaParams<T>(d, cfg_.rla_rank);
      mp.temp_rla = cfg_.share_rla ? RlaParams<T>{} : RlaParams<T>(d, cfg_.rla_rank);
      mp.w_g = Matrix<T>(2 * d, 1);
      mp.s0 = Matrix<T>(m, d);
      mp.state_norm = Matrix<T>(1, d, T(1));
      mp.temp_norm = Matrix<T>(1, d, T(1));
      params_.memory.push_back(std::move(mp));
    }
    params_.final_norm = Matrix<T>(1, d, T(1));
    params_.lm_head = Matrix<T>(d, cfg_.vocab);
  }

  ModelConfig cfg_;
  ModelParams<T> params_;
  RopeTable<T> rope_;
  std::optional<T> gate_override_;
};

template <typename T>
std::size_t argmax_row(const Matrix<T>& m, std::size_t r) {
  const auto row = m.row(r);
  return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------
// Streaming

/// One logical stream over a model. Holds only per-layer states and queues,
/// so its size depends on the configuration and never on tokens consumed.
template <typename T>
class StreamSession {
 public:
  explicit StreamSession(const Model<T>& model, bool record_gates = false) : model_(&model) {
    mem_ = model.initial_memory(ops_);
    if (record_gates) trace_.emplace();
  }

  /// Processes a chunk and advances memory. Returns logits for its tokens.
  Matrix<T> process_chunk(std::span<const int> ids) {
    Matrix<T> logits = model_->forward_chunk(ops_, mem_, ids, /*commit=*/true, trace_ ? &*trace_ : nullptr, tau_);
    ++tau_;
    return logits;
  }

  /// Scores a chunk against the current memory without advancing it.
  Matrix<T> peek_chunk(std::span<const int> ids) const {
    Eager<T> ops;
    MemoryState<Matrix<T>> scratch = mem_;
    return model_->forward_chunk(ops, scratch, ids, /*commit=*/false);
  }

  std::size_t chunks_processed() const { return tau_; }
  /// Storage owned by the memory (fixed per configuration).
  std::size_t retained_elements() const { return footprint_elements(mem_); }
  /// Elements currently holding live state or queue entries.
  std::size_t occupied_elements() const { return element_count(mem_); }
  const MemoryState<Matrix<T>>& memory() const { return mem_; }
  const GateTrace* trace() const { return trace_ ? &*trace_ : nullptr; }
  GateTrace take_trace() { return trace_ ? std::move(*trace_) : GateTrace{}; }
  const Model<T>& model() const { return *model_; }

 private:
  const Model<T>* model_;
  Eager<T> ops_;
  MemoryState<Matrix<T>> mem_;
  std::size_t tau_ = 0;
  std::optional<GateTrace> trace_;
};

template <typename T>
struct StreamOutput {
  std::vector<Matrix<T>> logits;      // one block per chunk
  std::vector<double> chunk_seconds;  // wall time per chunk
  std::size_t peak_retained = 0;
  std::size_t final_retained = 0;
  std::size_t peak_occupied = 0;
  std::size_t final_occupied = 0;
  GateTrace trace;
};

/// Splits tokens into chunk_size pieces (the last one at its natural length)
/// and streams them through a fresh session.
template <typename T>
StreamOutput<T> stream_infer(const Model<T>& model, std::span<const int> ids, bool record_gates = false) {
  if (ids.empty()) throw std::invalid_argument("stream_infer: empty input");
  StreamSession<T> session(model, record_gates);
  StreamOutput<T> out;
  const std::size_t cs = model.config().chunk_size;
  for (std::size_t at = 0; at < ids.size(); at += cs) {
    const std::size_t n = std::min(cs, ids.size() - at);
    const auto t0 = std::chrono::steady_clock::now();
    out.logits.push_back(session.process_chunk(ids.subspan(at, n)));
    out.chunk_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    out.peak_retained = std::max(out.peak_retained, session.retained_elements());
    out.peak_occupied = std::max(out.peak_occupied, session.occupied_elements());
  }
  out.final_retained = session.retained_elements();
  out.final_occupied = session.occupied_elements();
  out.trace = session.take_trace();
  return out;
}

/// Greedy decoding. Complete chunks of the prompt are committed to memory;
/// the trailing partial chunk stays pending and is rescored as generated
/// tokens are appended, and is committed once it fills up.
template <typename T>
std::vector<int> greedy_decode(StreamSession<T>& session, std::span<const int> prompt, std::size_t max_new) {
  if (max_new == 0) throw std::invalid_argument("greedy_decode: max_new must be at least 1");
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  const std::size_t cs = session.model().config().chunk_size;
  std::vector<int> pending;
  Matrix<T> last;  // logits of the most recent token
  auto feed = [&](int tok, bool need_logits) {
    pending.push_back(tok);
    if (pending.size() == cs) {
      Matrix<T> l = session.process_chunk(pending);
      last = slice_rows(l, l.rows() - 1, 1);
      pending.clear();
    } else if (need_logits) {
      Matrix<T> l = session.peek_chunk(pending);
      last = slice_rows(l, l.rows() - 1, 1);
    }
  };
  for (std::size_t i = 0; i < prompt.size(); ++i) feed(prompt[i], i + 1 == prompt.size());
  std::vector<int> out;
  for (std::size_t k = 0; k < max_new; ++k) {
    const int next = int(argmax_row(last, 0));
    out.push_back(next);
    if (k + 1 < max_new) feed(next, true);
  }
  return out;
}

}  // namespace comet

#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "comet/model.hpp"

namespace comet {

struct TrainConfig {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 10;
  std::size_t total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t bptt_window = 0;  // chunks; 0 = full backpropagation through time
  double grad_clip = 1.0;       // global-norm clip, 0 disables

  void validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr", "must be positive");
    if (total_steps == 0) throw ConfigError("total_steps", "must be at least 1");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in (0,1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "must be positive");
    if (batch_size == 0) throw ConfigError("batch_size", "must be at least 1");
    if (grad_clip < 0.0) throw ConfigError("grad_clip", "must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},         {"warmup_steps", c.warmup_steps}, {"total_steps", c.total_steps},
                     {"beta1", c.beta1},             {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
                     {"batch_size", c.batch_size},   {"bptt_window", c.bptt_window},   {"grad_clip", c.grad_clip}};
}

/// Linear warmup from 0 to peak over warmup_steps, then cosine decay to 0 at
/// total_steps. Past total_steps the rate is 0.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) return 0.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.peak_lr * double(step) / double(cfg.warmup_steps);
  if (cfg.total_steps <= cfg.warmup_steps) return cfg.peak_lr;
  const double progress = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
  return 0.5 * cfg.peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

/// One training sequence. weights[p] scales the loss of predicting ids[p+1]
/// from position p; empty means every target counts once.
struct TrainExample {
  std::vector<int> ids;
  std::vector<double> weights;
};

struct LossReport {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;                  // weighted mean cross-entropy per target
  std::vector<double> chunk_loss;     // summed over the batch, per chunk index
  std::vector<std::size_t> chunk_tokens;  // context targets per chunk index
  std::size_t tokens = 0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  bool applied = false;
};

/// One line of the training log. Wall time is left out so identical runs
/// write identical logs.
inline nlohmann::json log_record(const LossReport& r) {
  return {{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"grad_norm", r.grad_norm}, {"tokens", r.tokens}};
}

template <typename T>
struct SequenceLoss {
  Var total;
  std::vector<double> chunk_loss;
  std::vector<std::size_t> chunk_tokens;
  double weight = 0.0;
};

/// Builds the summed weighted cross-entropy of one sequence on `tape`, starting
/// from fresh memory. With a nonzero window the memory is detached every
/// `bptt_window` chunks, so no gradient reaches computation more than
/// bptt_window chunks before a loss term.
template <typename T>
SequenceLoss<T> sequence_loss(const Model<T>& model, Tape<T>& tape, const TrainExample& ex,
                              std::size_t bptt_window) {
  const std::size_t cs = model.config().chunk_size;
  if (ex.ids.size() < 2) throw std::invalid_argument("sequence_loss: need at least two tokens");
  if (!ex.weights.empty() && ex.weights.size() != ex.ids.size())
    throw std::invalid_argument("sequence_loss: weights must match ids");
  auto mem = model.initial_memory(tape);
  SequenceLoss<T> out;
  std::vector<Var> parts;
  std::size_t chunk = 0;
  for (std::size_t at = 0; at < ex.ids.size(); at += cs, ++chunk) {
    if (bptt_window > 0 && chunk > 0 && chunk % bptt_window == 0) {
      for (auto& s : mem.state) s = tape.detach(s);
      for (auto& q : mem.queues) {
        TempQueue<Var> fresh(q.capacity(), q.entry_rows());
        for (const Var* e : q.entries()) fresh.push(tape.detach(*e));
        q = std::move(fresh);
      }
    }
    const std::size_t n = std::min(cs, ex.ids.size() - at);
    std::span<const int> ids(ex.ids.data() + at, n);
    Var logits = model.forward_chunk(tape, mem, ids, /*commit=*/true);
    std::vector<int> targets(n, -1);
    std::vector<T> weights(n, T(0));
    std::size_t count = 0;
    double wsum = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t g = at + p;
      if (g + 1 >= ex.ids.size()) continue;
      const double w = ex.weights.empty() ? 1.0 : ex.weights[g];
      if (w == 0.0) continue;
      targets[p] = ex.ids[g + 1];
      weights[p] = T(w);
      ++count;
      wsum += w;
    }
    Var ce = tape.cross_entropy(logits, std::move(targets), std::move(weights));
    out.chunk_loss.push_back(double(tape.value(ce).data()[0]));
    out.chunk_tokens.push_back(count);
    out.weight += wsum;
    parts.push_back(ce);
  }
  Var total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = tape.add(total, parts[i]);
  out.total = total;
  return out;
}

template <typename T>
class Adam {
 public:
  explicit Adam(Model<T>& model) {
    for (auto& [name, m] : model.params().named()) {
      m_.emplace_back(m->rows(), m->cols());
      v_.emplace_back(m->rows(), m->cols());
    }
  }

  std::size_t steps() const { return t_; }

  void update(Model<T>& model, const std::vector<Matrix<T>>& grads, double lr, const TrainConfig& cfg) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t_));
    auto named = model.params().named();
    for (std::size_t p = 0; p < named.size(); ++p) {
      auto& w = named[p].second->storage();
      auto& m = m_[p].storage();
      auto& v = v_[p].storage();
      const auto& g = grads[p].storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = T(cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi);
        v[i] = T(cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi);
        const double mh = double(m[i]) / bc1, vh = double(v[i]) / bc2;
        w[i] = T(double(w[i]) - lr * mh / (std::sqrt(vh) + cfg.adam_eps));
      }
    }
  }

  std::vector<Matrix<T>>& first_moments() { return m_; }
  std::vector<Matrix<T>>& second_moments() { return v_; }

 private:
  std::vector<Matrix<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Forward and backward over a batch, gradients reduced in batch order, then
/// one Adam step. A non-finite loss or gradient leaves parameters and
/// optimizer state untouched and reports applied = false.
template <typename T>
LossReport train_step(Model<T>& model, Adam<T>& opt, const std::vector<TrainExample>& batch,
                      const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  LossReport rep;
  rep.step = opt.steps();
  rep.lr = lr_at(rep.step, cfg);
  auto named = model.params().named();
  std::vector<Matrix<T>> grads;
  for (auto& [name, m] : named) grads.emplace_back(m->rows(), m->cols());

  double loss_sum = 0.0, weight_sum = 0.0;
  bool finite = true;
  for (const auto& ex : batch) {
    Tape<T> tape;
    SequenceLoss<T> sl = sequence_loss(model, tape, ex, cfg.bptt_window);
    const double l = double(tape.value(sl.total).data()[0]);
    if (!std::isfinite(l)) {
      finite = false;
      break;
    }
    loss_sum += l;
    weight_sum += sl.weight;
    if (rep.chunk_loss.size() < sl.chunk_loss.size()) {
      rep.chunk_loss.resize(sl.chunk_loss.size(), 0.0);
      rep.chunk_tokens.resize(sl.chunk_loss.size(), 0);
    }
    for (std::size_t c = 0; c < sl.chunk_loss.size(); ++c) {
      rep.chunk_loss[c] += sl.chunk_loss[c];
      rep.chunk_tokens[c] += sl.chunk_tokens[c];
      rep.tokens += sl.chunk_tokens[c];
    }
    tape.backward(sl.total);
    for (std::size_t p = 0; p < named.size(); ++p) add_into(grads[p], tape.gradient(*named[p].second));
  }

  const double denom = weight_sum > 0.0 ? weight_sum : 1.0;
  rep.loss = loss_sum / denom;
  double sq = 0.0;
  for (auto& g : grads)
    for (auto& x : g.storage()) {
      x = T(double(x) / denom);
      sq += double(x) * double(x);
    }
  rep.grad_norm = std::sqrt(sq);
  if (!finite || !std::isfinite(rep.grad_norm)) {
    rep.loss = std::numeric_limits<double>::quiet_NaN();
    rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rep;
  }
  if (cfg.grad_clip > 0.0 && rep.grad_norm > cfg.grad_clip) {
    const double s = cfg.grad_clip / rep.grad_norm;
    for (auto& g : grads)
      for (auto& x : g.storage()) x = T(double(x) * s);
  }
  opt.update(model, grads, rep.lr, cfg);
  rep.applied = true;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradientCheckReport {
  bool skipped = false;
  std::string reason;
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
  std::map<std::string, double> per_group;  // parameter name -> max rel error
  std::string worst;
};

/// Checks analytic gradients of the summed loss of one random sequence of
/// n_chunks chunks against central differences, element by element, for every
/// parameter. Parameters are randomized first so every memory path carries
/// gradient. A clamped gate has no derivative, so the check is skipped.
inline GradientCheckReport verify_gradients(const ModelConfig& cfg, std::size_t n_chunks, std::uint64_t seed = 1,
                                            std::optional<double> gate_clamp = std::nullopt, double h = 1e-5) {
  GradientCheckReport rep;
  Model<double> model(cfg, seed);
  model.randomize(seed + 1);
  model.set_gate_override(gate_clamp);
  if (model.gate_clamp()) {
    rep.skipped = true;
    rep.reason = "gate is clamped to a constant; gate parameters receive no gradient";
    return rep;
  }
  std::mt19937_64 rng(seed + 2);
  std::uniform_int_distribution<int> tok(0, int(cfg.vocab) - 1);
  TrainExample ex;
  ex.ids.resize(n_chunks * cfg.chunk_size);
  for (auto& t : ex.ids) t = tok(rng);

  auto named = model.params().named();
  std::vector<Matrix<double>*> params;
  for (auto& [name, m] : named) params.push_back(m);

  // Differences are taken one parameter group at a time to name the worst.
  for (std::size_t p = 0; p < named.size(); ++p) {
    if (named[p].second->empty()) continue;
    auto r = grad_check<double>(
        {named[p].second}, [&](Tape<double>& tape) { return sequence_loss(model, tape, ex, 0).total; },
        [&] {
          Tape<double> tape;
          return tape.value(sequence_loss(model, tape, ex, 0).total).data()[0];
        },
        h);
    rep.per_group[named[p].first] = r.max_rel_error;
    rep.n_checked += r.n_checked;
    if (r.max_rel_error >= rep.max_rel_error) {
      rep.max_rel_error = r.max_rel_error;
      rep.worst = named[p].first + "[" + std::to_string(r.worst_index) + "] analytic=" +
                  std::to_string(r.worst_analytic) + " numeric=" + std::to_string(r.worst_numeric);
    }
  }
  return rep;
}

}  // namespace comet

#pragma once

// Discrete-event model of two ways to spread a chunk-recurrent forward pass
// over workers. Chunks go to workers round-robin; a worker runs its chunks in
// order and the layers of a chunk in order. The two schedules differ only in
// what chunk tau must wait for from chunk tau-1:
//
//   naive      the whole forward pass of chunk tau-1 (all layers), then the
//              state transfer;
//   layerwise  only layer i of chunk tau-1, plus the transfer, before its own
//              layer i may start.
//
// A transfer costs t_comm time units whenever the two chunks sit on different
// workers and occupies neither worker.

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace comet::sim {

struct SimConfig {
  std::size_t n_workers = 1;
  std::size_t n_chunks = 1;
  std::size_t n_layers = 1;
  double t_layer = 1.0;
  double t_comm = 0.0;

  void validate() const {
    if (n_workers == 0) throw std::invalid_argument("n_workers: must be at least 1");
    if (n_chunks == 0) throw std::invalid_argument("n_chunks: must be at least 1");
    if (n_layers == 0) throw std::invalid_argument("n_layers: must be at least 1");
    if (!(t_layer >= 0.0)) throw std::invalid_argument("t_layer: must be non-negative");
    if (!(t_comm >= 0.0)) throw std::invalid_argument("t_comm: must be non-negative");
  }

  std::size_t worker_of(std::size_t chunk) const { return chunk % n_workers; }
};

struct Task {
  std::size_t chunk = 0, layer = 0, worker = 0;
  double start = 0.0, finish = 0.0;
};

struct ScheduleResult {
  std::string scheduler;
  SimConfig cfg;
  std::vector<Task> tasks;  // index chunk * n_layers + layer
  double makespan = 0.0;
  double busy_time = 0.0;
  double bubble_fraction = 0.0;
  std::vector<double> utilization;  // per worker

  const Task& at(std::size_t chunk, std::size_t layer) const { return tasks[chunk * cfg.n_layers + layer]; }
};

namespace detail {

inline void finalize(ScheduleResult& r) {
  const auto& c = r.cfg;
  std::vector<double> busy(c.n_workers, 0.0);
  r.makespan = 0.0;
  r.busy_time = 0.0;
  for (const auto& t : r.tasks) {
    r.makespan = std::max(r.makespan, t.finish);
    busy[t.worker] += t.finish - t.start;
    r.busy_time += t.finish - t.start;
  }
  r.utilization.assign(c.n_workers, 0.0);
  if (r.makespan > 0.0) {
    for (std::size_t w = 0; w < c.n_workers; ++w) r.utilization[w] = busy[w] / r.makespan;
    r.bubble_fraction = 1.0 - r.busy_time / (double(c.n_workers) * r.makespan);
  } else {
    r.bubble_fraction = 0.0;
  }
}

template <typename ReadyFn>
ScheduleResult simulate(const SimConfig& cfg, const char* name, ReadyFn&& ready) {
  cfg.validate();
  ScheduleResult r;
  r.scheduler = name;
  r.cfg = cfg;
  r.tasks.resize(cfg.n_chunks * cfg.n_layers);
  std::vector<double> worker_free(cfg.n_workers, 0.0);
  // Chunk order is a topological order for both dependency rules.
  for (std::size_t c = 0; c < cfg.n_chunks; ++c) {
    const std::size_t w = cfg.worker_of(c);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      Task& t = r.tasks[c * cfg.n_layers + l];
      t.chunk = c;
      t.layer = l;
      t.worker = w;
      double start = worker_free[w];
      if (l > 0) start = std::max(start, r.tasks[c * cfg.n_layers + l - 1].finish);
      if (c > 0) start = std::max(start, ready(r, c, l));
      t.start = start;
      t.finish = start + cfg.t_layer;
      worker_free[w] = t.finish;
    }
  }
  finalize(r);
  return r;
}

}  // namespace detail

inline ScheduleResult sim_naive(const SimConfig& cfg) {
  return detail::simulate(cfg, "naive", [&cfg](const ScheduleResult& r, std::size_t c, std::size_t) {
    const double comm = cfg.worker_of(c) != cfg.worker_of(c - 1) ? cfg.t_comm : 0.0;
    return r.at(c - 1, cfg.n_layers - 1).finish + comm;
  });
}

inline ScheduleResult sim_layerwise(const SimConfig& cfg) {
  return detail::simulate(cfg, "layerwise", [&cfg](const ScheduleResult& r, std::size_t c, std::size_t l) {
    const double comm = cfg.worker_of(c) != cfg.worker_of(c - 1) ? cfg.t_comm : 0.0;
    return r.at(c - 1, l).finish + comm;
  });
}

struct Comparison {
  ScheduleResult naive, layerwise;
  double speedup = 1.0;
};

inline Comparison compare(const SimConfig& cfg) {
  Comparison c{sim_naive(cfg), sim_layerwise(cfg), 1.0};
  c.speedup = c.layerwise.makespan > 0.0 ? c.naive.makespan / c.layerwise.makespan : 1.0;
  return c;
}

/// Returns an empty string when the schedule is valid, otherwise the first
/// violated property.
inline std::string check_schedule(const ScheduleResult& r, bool layerwise_rule) {
  const auto& c = r.cfg;
  if (r.tasks.size() != c.n_chunks * c.n_layers) return "task count";
  constexpr double tol = 1e-9;
  for (std::size_t ch = 0; ch < c.n_chunks; ++ch)
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const Task& t = r.at(ch, l);
      if (t.chunk != ch || t.layer != l) return "task identity";
      if (l > 0 && t.start + tol < r.at(ch, l - 1).finish) return "layer order";
      if (ch > 0) {
        const double comm = c.worker_of(ch) != c.worker_of(ch - 1) ? c.t_comm : 0.0;
        const double need = layerwise_rule ? r.at(ch - 1, l).finish : r.at(ch - 1, c.n_layers - 1).finish;
        if (t.start + tol < need + comm) return "chunk dependency";
      }
    }
  std::vector<std::vector<const Task*>> per_worker(c.n_workers);
  for (const auto& t : r.tasks) per_worker[t.worker].push_back(&t);
  for (auto& v : per_worker) {
    std::sort(v.begin(), v.end(), [](const Task* a, const Task* b) { return a->start < b->start; });
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i]->start + tol < v[i - 1]->finish) return "worker overlap";
  }
  return {};
}

// ---------------------------------------------------------------------------
// Export

inline void write_gantt_csv(std::ostream& os, const std::vector<const ScheduleResult*>& results) {
  os << "scheduler,worker,chunk,layer,start,finish\n";
  for (const auto* r : results)
    for (const auto& t : r->tasks)
      os << r->scheduler << ',' << t.worker << ',' << t.chunk << ',' << t.layer << ',' << t.start << ','
         << t.finish << '\n';
}

inline nlohmann::json summary_json(const Comparison& c) {
  auto one = [](const ScheduleResult& r) {
    return nlohmann::json{{"makespan", r.makespan},
                          {"busy_time", r.busy_time},
                          {"bubble_fraction", r.bubble_fraction},
                          {"utilization", r.utilization}};
  };
  const auto& cfg = c.naive.cfg;
  return {{"config",
           {{"n_workers", cfg.n_workers},
            {"n_chunks", cfg.n_chunks},
            {"n_layers", cfg.n_layers},
            {"t_layer", cfg.t_layer},
            {"t_comm", cfg.t_comm}}},
          {"naive", one(c.naive)},
          {"layerwise", one(c.layerwise)},
          {"speedup", c.speedup}};
}

}  // namespace comet::sim

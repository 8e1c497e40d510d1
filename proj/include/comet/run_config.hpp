#pragma once

// INI run configuration: [model], [train], [task] and [sim] sections.
// Values given as overrides ("section.key=value") replace file values.
// Unknown sections or keys are rejected so typos cannot go unnoticed.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "comet/config.hpp"
#include "comet/pipeline_sim.hpp"
#include "comet/training.hpp"

namespace comet {

struct TaskConfig {
  std::string kind = "passkey";  // passkey | copy
  // passkey
  std::size_t key_digits = 7;
  std::size_t train_min_tokens = 150;
  std::size_t train_max_tokens = 512;
  double prompt_weight = 0.1;
  double digit_weight = 0.1;  // prompt positions whose next token is a digit
  std::size_t curriculum_steps = 0;
  std::vector<std::size_t> eval_lengths = {192, 320, 448, 512};
  std::vector<double> eval_depths = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::size_t> extrapolation_lengths = {1024};
  std::size_t eval_samples = 20;
  // copy probe
  std::size_t copy_chunks = 6;
  std::vector<std::size_t> copy_gaps = {1, 2, 3, 4, 5};
  std::size_t copy_samples = 100;
  // Evaluation probes may be longer than training probes; 0 and empty mean
  // the training values.
  std::size_t copy_eval_chunks = 0;
  std::vector<std::size_t> copy_eval_gaps;

  std::size_t eval_copy_chunks() const { return copy_eval_chunks ? copy_eval_chunks : copy_chunks; }
  const std::vector<std::size_t>& eval_copy_gaps() const { return copy_eval_gaps.empty() ? copy_gaps : copy_eval_gaps; }

  void validate() const {
    if (kind != "passkey" && kind != "copy") throw ConfigError("task.kind", "must be 'passkey' or 'copy'");
    if (key_digits == 0) throw ConfigError("task.key_digits", "must be at least 1");
    if (train_min_tokens > train_max_tokens)
      throw ConfigError("task.train_min_tokens", "must not exceed task.train_max_tokens");
    if (prompt_weight < 0.0) throw ConfigError("task.prompt_weight", "must be non-negative");
    if (digit_weight < 0.0) throw ConfigError("task.digit_weight", "must be non-negative");
    for (double d : eval_depths)
      if (d < 0.0 || d > 1.0) throw ConfigError("task.eval_depths", "depths must lie in [0,1]");
    if (copy_chunks < 2) throw ConfigError("task.copy_chunks", "must be at least 2");
    for (std::size_t g : copy_gaps)
      if (g == 0 || g >= copy_chunks) throw ConfigError("task.copy_gaps", "gaps must lie in [1, copy_chunks-1]");
    if (copy_eval_chunks == 1) throw ConfigError("task.copy_eval_chunks", "must be 0 or at least 2");
    for (std::size_t g : eval_copy_gaps())
      if (g == 0 || g >= eval_copy_chunks())
        throw ConfigError("task.copy_eval_gaps", "gaps must lie in [1, copy_eval_chunks-1]");
  }
};

struct SimSection {
  sim::SimConfig sim;
  std::vector<double> comm_sweep;  // extra t_comm values for the speedup sweep
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
  SimSection sim;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    train.validate();
    task.validate();
    try {
      sim.sim.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("sim", e.what());
    }
    for (double c : sim.comm_sweep)
      if (!(c >= 0.0)) throw ConfigError("sim.comm_sweep", "values must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TaskConfig& t) {
  j = {{"kind", t.kind},
       {"key_digits", t.key_digits},
       {"train_min_tokens", t.train_min_tokens},
       {"train_max_tokens", t.train_max_tokens},
       {"prompt_weight", t.prompt_weight},
       {"digit_weight", t.digit_weight},
       {"curriculum_steps", t.curriculum_steps},
       {"eval_lengths", t.eval_lengths},
       {"eval_depths", t.eval_depths},
       {"extrapolation_lengths", t.extrapolation_lengths},
       {"eval_samples", t.eval_samples},
       {"copy_chunks", t.copy_chunks},
       {"copy_gaps", t.copy_gaps},
       {"copy_samples", t.copy_samples},
       {"copy_eval_chunks", t.copy_eval_chunks},
       {"copy_eval_gaps", t.copy_eval_gaps}};
}

inline void to_json(nlohmann::json& j, const RunConfig& r) {
  const auto& s = r.sim.sim;
  j = {{"model", r.model},
       {"train", r.train},
       {"task", r.task},
       {"sim",
        {{"n_workers", s.n_workers},
         {"n_chunks", s.n_chunks},
         {"n_layers", s.n_layers},
         {"t_layer", s.t_layer},
         {"t_comm", s.t_comm},
         {"comm_sweep", r.sim.comm_sweep}}},
       {"seed", r.seed}};
}

namespace ini_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_scalar(const std::string& field, const std::string& text);

template <>
inline std::string parse_scalar<std::string>(const std::string&, const std::string& text) {
  return trim(text);
}

template <>
inline bool parse_scalar<bool>(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(field, "expected a boolean, got '" + t + "'");
}

template <>
inline std::size_t parse_scalar<std::size_t>(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(field, "expected a non-negative integer, got '" + t + "'");
  try {
    return std::stoull(t);
  } catch (const std::exception&) {
    throw ConfigError(field, "integer out of range: '" + t + "'");
  }
}

template <>
inline double parse_scalar<double>(const std::string& field, const std::string& text) {
  const std::string t = trim(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (t.empty() || used != t.size()) throw ConfigError(field, "expected a number, got '" + t + "'");
  return v;
}

template <typename V>
std::vector<V> parse_list(const std::string& field, const std::string& text) {
  std::vector<V> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(parse_scalar<V>(field, item));
  return out;
}

}  // namespace ini_detail

/// Applies one "section.key" = value assignment.
inline void apply_setting(RunConfig& rc, const std::string& section, const std::string& key,
                          const std::string& value) {
  using namespace ini_detail;
  const std::string field = section + "." + key;
  auto set = [&](auto& target) { target = parse_scalar<std::decay_t<decltype(target)>>(field, value); };
  auto set_list = [&](auto& target) {
    target = parse_list<typename std::decay_t<decltype(target)>::value_type>(field, value);
  };
  auto& m = rc.model;
  auto& t = rc.train;
  auto& k = rc.task;
  auto& s = rc.sim.sim;
  if (section == "model") {
    if (key == "d_model") return set(m.d_model);
    if (key == "n_layers") return set(m.n_layers);
    if (key == "n_heads") return set(m.n_heads);
    if (key == "ffn_hidden") return set(m.ffn_hidden);
    if (key == "vocab") return set(m.vocab);
    if (key == "chunk_size") return set(m.chunk_size);
    if (key == "m_global") return set(m.m_global);
    if (key == "temp_budget_tokens") return set(m.temp_budget_tokens);
    if (key == "compression_interval") return set(m.compression_interval);
    if (key == "rla_rank") return set(m.rla_rank);
    if (key == "share_rla") return set(m.share_rla);
    if (key == "ablation") return void(m.ablation = ablation_from_string(trim(value)));
    if (key == "rope_theta") return set(m.rope_theta);
    if (key == "rms_eps") return set(m.rms_eps);
  } else if (section == "train") {
    if (key == "peak_lr") return set(t.peak_lr);
    if (key == "warmup_steps") return set(t.warmup_steps);
    if (key == "total_steps") return set(t.total_steps);
    if (key == "beta1") return set(t.beta1);
    if (key == "beta2") return set(t.beta2);
    if (key == "adam_eps") return set(t.adam_eps);
    if (key == "batch_size") return set(t.batch_size);
    if (key == "bptt_window") return set(t.bptt_window);
    if (key == "grad_clip") return set(t.grad_clip);
  } else if (section == "task") {
    if (key == "kind") return set(k.kind);
    if (key == "key_digits") return set(k.key_digits);
    if (key == "train_min_tokens") return set(k.train_min_tokens);
    if (key == "train_max_tokens") return set(k.train_max_tokens);
    if (key == "prompt_weight") return set(k.prompt_weight);
    if (key == "digit_weight") return set(k.digit_weight);
    if (key == "curriculum_steps") return set(k.curriculum_steps);
    if (key == "eval_lengths") return set_list(k.eval_lengths);
    if (key == "eval_depths") return set_list(k.eval_depths);
    if (key == "extrapolation_lengths") return set_list(k.extrapolation_lengths);
    if (key == "eval_samples") return set(k.eval_samples);
    if (key == "copy_chunks") return set(k.copy_chunks);
    if (key == "copy_gaps") return set_list(k.copy_gaps);
    if (key == "copy_samples") return set(k.copy_samples);
    if (key == "copy_eval_chunks") return set(k.copy_eval_chunks);
    if (key == "copy_eval_gaps") return set_list(k.copy_eval_gaps);
  } else if (section == "sim") {
    if (key == "n_workers") return set(s.n_workers);
    if (key == "n_chunks") return set(s.n_chunks);
    if (key == "n_layers") return set(s.n_layers);
    if (key == "t_layer") return set(s.t_layer);
    if (key == "t_comm") return set(s.t_comm);
    if (key == "comm_sweep") return set_list(rc.sim.comm_sweep);
  } else if (section == "run") {
    if (key == "seed") return void(rc.seed = parse_scalar<std::size_t>(field, value));
  } else {
    throw ConfigError(section, "unknown section (model, train, task, sim, run)");
  }
  throw ConfigError(field, "unknown key");
}

/// Parses "section.key=value".
inline void apply_override(RunConfig& rc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError(assignment, "override must look like section.key=value");
  apply_setting(rc, ini_detail::trim(assignment.substr(0, dot)), ini_detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
                assignment.substr(eq + 1));
}

inline void apply_ini(RunConfig& rc, std::istream& is, const std::string& origin = "config") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin, std::string("line ") + std::to_string(e.line()) + ": " + e.message());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError(section, "key outside of any section");
    for (const auto& [key, value] : body) apply_setting(rc, section, key, value.data());
  }
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  RunConfig rc;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config", "cannot open config file '" + path + "'");
    apply_ini(rc, is, path);
  }
  for (const auto& o : overrides) apply_override(rc, o);
  return rc;
}

}  // namespace comet

// comet: command-line front end for training, evaluation, streaming, gate
// tracing, the pipeline simulator and gradient checking.
//
// Exit codes: 0 success, 1 a check failed, 2 configuration error,
// 3 artifact or compatibility error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "comet/checkpoint.hpp"
#include "comet/recipes.hpp"
#include "comet/svg.hpp"

#ifndef COMET_BUILD_ID
#define COMET_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace comet;
using Json = nlohmann::json;
using Scalar = float;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;

constexpr const char* kOutRootEnv = "COMET_OUT_ROOT";

struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

fs::path resolve_out(const Common& c, const std::string& command) {
  fs::path out = c.out.empty() ? fs::path("runs") / command : fs::path(c.out);
  if (const char* root = std::getenv(kOutRootEnv); root && *root && out.is_relative()) out = fs::path(root) / out;
  return out;
}

RunConfig resolve_config(const Common& c) {
  RunConfig rc = load_run_config(c.config, c.overrides);
  if (c.seed_given) rc.seed = c.seed;
  return rc;
}

class Run {
 public:
  Run(std::string command, const Common& c, RunConfig rc) : command_(std::move(command)), rc_(std::move(rc)) {
    dir_ = resolve_out(c, command_);
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ArtifactError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  const RunConfig& config() const { return rc_; }
  RunConfig& config() { return rc_; }
  fs::path path(const std::string& name) {
    artifacts_.push_back(name);
    return dir_ / name;
  }

  std::ofstream open(const std::string& name) {
    const fs::path p = path(name);
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw ArtifactError("cannot write " + p.string());
    return os;
  }

  void finish(const Json& extra = Json::object()) {
    Json m;
    m["command"] = command_;
    m["config"] = rc_;
    m["seed"] = rc_.seed;
    m["build"] = COMET_BUILD_ID;
    m["output_dir"] = dir_.string();
    m["artifacts"] = artifacts_;
    if (!extra.empty()) m["inputs"] = extra;
    std::ofstream os(dir_ / "manifest.json", std::ios::trunc);
    os << m.dump(2) << '\n';
    if (!os) throw ArtifactError("cannot write manifest in " + dir_.string());
  }

 private:
  std::string command_;
  RunConfig rc_;
  fs::path dir_;
  std::vector<std::string> artifacts_;
};

// Checkpoints record which task vocabulary they were trained with.
struct LoadedModel {
  Model<Scalar> model;
  std::string task;
  ToyVocab vocab;
};

LoadedModel load_model(const std::string& path) {
  if (path.empty()) throw ConfigError("checkpoint", "--checkpoint is required");
  if (!fs::exists(path)) throw ArtifactError("checkpoint not found: " + path);
  std::string task = "passkey";
  {
    std::ifstream is(path, std::ios::binary);
    const Json header = read_checkpoint_header(is);
    if (header.contains("meta") && header["meta"].contains("task")) task = header["meta"]["task"].get<std::string>();
  }
  Model<Scalar> model = load_checkpoint<Scalar>(path);
  TaskConfig tc;
  tc.kind = task;
  ToyVocab vocab = task_vocab(tc);
  if (model.config().vocab != vocab.size())
    throw ArtifactError("checkpoint vocab size " + std::to_string(model.config().vocab) + " does not match the " +
                        task + " vocabulary (" + std::to_string(vocab.size()) + ")");
  return {std::move(model), task, std::move(vocab)};
}

std::vector<int> read_input(const LoadedModel& lm, const std::string& input, std::size_t random_tokens,
                            std::uint64_t seed) {
  if (!input.empty()) {
    std::ifstream is(input, std::ios::binary);
    if (!is) throw ConfigError("input", "cannot open input file '" + input + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    std::string text = ss.str();
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    try {
      return lm.vocab.encode(text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("input", e.what());
    }
  }
  if (random_tokens == 0) throw ConfigError("input", "give --input or --tokens");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, int(lm.vocab.size()) - 1);
  std::vector<int> ids(random_tokens);
  for (auto& t : ids) t = tok(rng);
  return ids;
}

// ---------------------------------------------------------------------------

int cmd_train(const Common& c) {
  Run run("train", c, resolve_config(c));
  RunConfig rc = run.config();
  const ToyVocab vocab = task_vocab(rc.task);
  rc.model.vocab = vocab.size();
  run.config() = rc;
  rc.validate();
  std::ofstream log = run.open("train_log.jsonl");
  std::size_t every = std::max<std::size_t>(1, rc.train.total_steps / 20);
  Model<Scalar> model = train_task<Scalar>(rc, nullptr, [&](const LossReport& r) {
    log << log_record(r).dump() << '\n';
    if (r.step % every == 0 || r.step + 1 == rc.train.total_steps)
      std::cerr << "step " << r.step << " loss " << r.loss << " lr " << r.lr << " " << r.wall_ms << " ms\n";
  });
  log.close();
  save_checkpoint(model, run.path("model.ckpt").string(), Json{{"task", rc.task.kind}, {"seed", rc.seed}});
  run.finish();
  return kExitOk;
}

int cmd_passkey_eval(const Common& c, const std::string& ckpt, std::vector<std::size_t> lengths,
                     std::vector<double> depths, std::size_t samples) {
  Run run("passkey-eval", c, resolve_config(c));
  const auto& task = run.config().task;
  if (lengths.empty()) lengths = task.eval_lengths;
  if (depths.empty()) depths = task.eval_depths;
  if (samples == 0) samples = task.eval_samples;
  for (double d : depths)
    if (d < 0.0 || d > 1.0) throw ConfigError("depths", "depths must lie in [0,1]");
  LoadedModel lm = load_model(ckpt);
  if (lm.task != "passkey") throw ArtifactError("checkpoint was trained on the " + lm.task + " task, not passkey");
  AccuracyGrid grid;
  try {
    grid = eval_passkey(lm.model, lm.vocab, lengths, depths, samples, run.config().seed, task.key_digits);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("lengths", e.what());
  }
  {
    auto os = run.open("passkey_accuracy.csv");
    grid.write_csv(os);
  }
  {
    auto os = run.open("passkey_accuracy.svg");
    std::vector<std::string> rows, cols;
    for (auto l : lengths) rows.push_back(std::to_string(l));
    for (auto d : depths) {
      std::ostringstream s;
      s << d;
      cols.push_back(s.str());
    }
    svg::heatmap(os, grid.accuracy, rows, cols, "passkey accuracy", "depth", "length (tokens)");
  }
  std::cout << "mean accuracy " << grid.mean() << " min " << grid.min() << '\n';
  run.finish({{"checkpoint", ckpt}, {"samples", samples}});
  return kExitOk;
}

int cmd_copy_eval(const Common& c, const std::string& ckpt, std::vector<std::size_t> gaps, std::size_t samples) {
  Run run("copy-eval", c, resolve_config(c));
  const auto& task = run.config().task;
  const std::size_t n_chunks = task.eval_copy_chunks();
  if (gaps.empty()) gaps = task.eval_copy_gaps();
  if (samples == 0) samples = task.copy_samples;
  for (auto g : gaps)
    if (g == 0 || g >= n_chunks) throw ConfigError("gaps", "gaps must lie in [1, copy_eval_chunks-1]");
  LoadedModel lm = load_model(ckpt);
  if (lm.task != "copy") throw ArtifactError("checkpoint was trained on the " + lm.task + " task, not copy");
  const auto acc = eval_copy(lm.model, lm.vocab, n_chunks, gaps, samples, run.config().seed);
  auto os = run.open("copy_accuracy.csv");
  os << "gap,accuracy\n";
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    os << gaps[i] << ',' << acc[i] << '\n';
    std::cout << "gap " << gaps[i] << " accuracy " << acc[i] << '\n';
  }
  os.close();
  run.finish({{"checkpoint", ckpt}, {"samples", samples}, {"temp_capacity_chunks",
                                                           lm.model.config().temp_capacity_entries()}});
  return kExitOk;
}

int cmd_stream(const Common& c, const std::string& ckpt, const std::string& input, std::size_t tokens) {
  Run run("stream", c, resolve_config(c));
  LoadedModel lm = load_model(ckpt);
  const auto ids = read_input(lm, input, tokens, run.config().seed);
  StreamSession<Scalar> session(lm.model);
  const std::size_t cs = lm.model.config().chunk_size;
  auto os = run.open("stream.csv");
  os << "chunk,tokens,seconds,retained_elements,occupied_elements\n";
  Json summary;
  std::vector<double> secs;
  for (std::size_t at = 0, k = 0; at < ids.size(); at += cs, ++k) {
    const std::size_t n = std::min(cs, ids.size() - at);
    const auto t0 = std::chrono::steady_clock::now();
    session.process_chunk(std::span<const int>(ids).subspan(at, n));
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    secs.push_back(s);
    os << k << ',' << n << ',' << s << ',' << session.retained_elements() << ',' << session.occupied_elements() << '\n';
  }
  os.close();
  summary["tokens"] = ids.size();
  summary["chunks"] = secs.size();
  summary["retained_elements"] = session.retained_elements();
  summary["analytic_retained_elements"] = lm.model.config().retained_state_elements();
  double total = 0.0;
  for (double s : secs) total += s;
  summary["total_seconds"] = total;
  auto js = run.open("stream_summary.json");
  js << summary.dump(2) << '\n';
  js.close();
  std::cout << summary.dump() << '\n';
  run.finish({{"checkpoint", ckpt}, {"input", input}, {"random_tokens", tokens}});
  return kExitOk;
}

int cmd_gate_trace(const Common& c, const std::string& ckpt, const std::string& input, std::size_t tokens) {
  Run run("gate-trace", c, resolve_config(c));
  LoadedModel lm = load_model(ckpt);
  const auto ids = read_input(lm, input, tokens, run.config().seed);
  const auto out = stream_infer(lm.model, std::span<const int>(ids), /*record_gates=*/true);
  {
    auto os = run.open("gates.csv");
    out.trace.write_csv(os);
  }
  const auto& cfg = lm.model.config();
  const std::size_t chunks = out.logits.size();
  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    std::vector<std::vector<double>> grid(cfg.m_global, std::vector<double>(chunks, 0.0));
    for (const auto& r : out.trace.rows())
      if (r.layer == layer) grid[r.state_id][r.chunk] = r.gate;
    std::vector<std::string> rows, cols;
    for (std::size_t i = 0; i < cfg.m_global; ++i) rows.push_back(std::to_string(i));
    for (std::size_t k = 0; k < chunks; ++k) cols.push_back(std::to_string(k));
    auto os = run.open("gates_layer" + std::to_string(layer) + ".svg");
    svg::heatmap(os, grid, rows, cols, "gate values, layer " + std::to_string(layer), "chunk", "state id");
  }
  std::cout << "recorded " << out.trace.size() << " gate values over " << chunks << " chunks\n";
  run.finish({{"checkpoint", ckpt}, {"input", input}, {"random_tokens", tokens}});
  return kExitOk;
}

int cmd_pipeline_sim(const Common& c) {
  Run run("pipeline-sim", c, resolve_config(c));
  const auto& s = run.config().sim;
  try {
    s.sim.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("sim", e.what());
  }
  for (double v : s.comm_sweep)
    if (!(v >= 0.0)) throw ConfigError("sim.comm_sweep", "values must be non-negative");
  const sim::Comparison cmp = sim::compare(s.sim);
  {
    auto os = run.open("summary.json");
    os << sim::summary_json(cmp).dump(2) << '\n';
  }
  {
    auto os = run.open("gantt.csv");
    sim::write_gantt_csv(os, {&cmp.naive, &cmp.layerwise});
  }
  {
    auto os = run.open("gantt_naive.svg");
    svg::gantt(os, cmp.naive);
  }
  {
    auto os = run.open("gantt_layerwise.svg");
    svg::gantt(os, cmp.layerwise);
  }
  if (!s.comm_sweep.empty()) {
    auto os = run.open("comm_sweep.csv");
    os << "t_comm,naive_makespan,layerwise_makespan,speedup\n";
    for (double t : s.comm_sweep) {
      sim::SimConfig sc = s.sim;
      sc.t_comm = t;
      const auto r = sim::compare(sc);
      os << t << ',' << r.naive.makespan << ',' << r.layerwise.makespan << ',' << r.speedup << '\n';
    }
  }
  std::cout << "naive " << cmp.naive.makespan << " layerwise " << cmp.layerwise.makespan << " speedup "
            << cmp.speedup << '\n';
  run.finish();
  return kExitOk;
}

int cmd_grad_check(const Common& c, std::size_t chunks, double tol) {
  RunConfig rc = resolve_config(c);
  // Tiny model unless the config says otherwise.
  if (c.config.empty()) {
    rc.model.d_model = 8;
    rc.model.n_heads = 2;
    rc.model.ffn_hidden = 16;
    rc.model.vocab = 11;
    rc.model.chunk_size = 6;
    rc.model.m_global = 2;
    rc.model.compression_interval = 3;
    rc.model.temp_budget_tokens = 4;
    rc.model.rla_rank = 2;
    for (const auto& o : c.overrides) apply_override(rc, o);
  }
  rc.model.validate();
  Run run("grad-check", c, rc);
  const auto rep = verify_gradients(rc.model, chunks, rc.seed + 1);
  Json j;
  j["max_rel_error"] = rep.max_rel_error;
  j["tolerance"] = tol;
  j["skipped"] = rep.skipped;
  j["reason"] = rep.reason;
  Json groups = Json::object();
  for (const auto& [name, err] : rep.per_group) groups[name] = err;
  j["per_group"] = groups;
  j["passed"] = !rep.skipped && rep.max_rel_error < tol;
  {
    auto os = run.open("grad_check.json");
    os << j.dump(2) << '\n';
  }
  std::cout << "max relative error " << rep.max_rel_error << (j["passed"].get<bool>() ? " (pass)" : " (FAIL)")
            << '\n';
  run.finish();
  return j["passed"].get<bool>() ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chunk-recurrent memory transformer toolkit"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "INI configuration file");
    sub->add_option("--out", common.out, std::string("output directory (relative paths are placed under $") +
                                             kOutRootEnv + " when set)");
    sub->add_option("--set", common.overrides, "override, e.g. --set train.total_steps=10 (repeatable)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s, common.seed_given = true; }, "random seed");
  };

  std::string ckpt, input;
  std::size_t tokens = 0, samples = 0, chunks = 3;
  std::vector<std::size_t> lengths, gaps;
  std::vector<double> depths;
  double tol = 1e-4;

  auto* train = app.add_subcommand("train", "train a model on the configured task");
  add_common(train);

  auto* pk = app.add_subcommand("passkey-eval", "passkey accuracy grid (CSV + SVG heatmap)");
  add_common(pk);
  pk->add_option("--checkpoint", ckpt)->required();
  pk->add_option("--lengths", lengths, "lengths in tokens")->delimiter(',');
  pk->add_option("--depths", depths, "depth fractions")->delimiter(',');
  pk->add_option("--samples", samples, "samples per cell");

  auto* cp = app.add_subcommand("copy-eval", "copy-probe accuracy per gap");
  add_common(cp);
  cp->add_option("--checkpoint", ckpt)->required();
  cp->add_option("--gaps", gaps, "gaps in chunks")->delimiter(',');
  cp->add_option("--samples", samples, "samples per gap");

  auto* st = app.add_subcommand("stream", "stream an input through a model, chunk by chunk");
  add_common(st);
  st->add_option("--checkpoint", ckpt)->required();
  st->add_option("--input", input, "text file");
  st->add_option("--tokens", tokens, "random input of this many tokens instead of a file");

  auto* gt = app.add_subcommand("gate-trace", "record gate values while streaming an input");
  add_common(gt);
  gt->add_option("--checkpoint", ckpt)->required();
  gt->add_option("--input", input, "text file");
  gt->add_option("--tokens", tokens, "random input of this many tokens instead of a file");

  auto* ps = app.add_subcommand("pipeline-sim", "compare naive and layer-wise pipeline schedules");
  add_common(ps);

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check on a small model");
  add_common(gc);
  gc->add_option("--chunks", chunks, "chunks per sequence");
  gc->add_option("--tolerance", tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(common);
    if (*pk) return cmd_passkey_eval(common, ckpt, lengths, depths, samples);
    if (*cp) return cmd_copy_eval(common, ckpt, gaps, samples);
    if (*st) return cmd_stream(common, ckpt, input, tokens);
    if (*gt) return cmd_gate_trace(common, ckpt, input, tokens);
    if (*ps) return cmd_pipeline_sim(common);
    if (*gc) return cmd_grad_check(common, chunks, tol);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitArtifact;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << '\n';
    return kExitArtifact;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  return kExitOk;
}

#pragma once

// Training loops for the two synthetic tasks. Everything is driven by one
// seed: the model initialization uses it directly and the data stream uses a
// generator derived from it, so a run is reproducible bit for bit.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "comet/run_config.hpp"
#include "comet/tasks.hpp"
#include "comet/training.hpp"

namespace comet {

using StepCallback = std::function<void(const LossReport&)>;
using ExampleSampler = std::function<TrainExample(std::mt19937_64&, std::size_t step)>;

inline std::uint64_t data_seed(std::uint64_t seed) { return seed * 0x9e3779b97f4a7c15ull + 0x5851f42d4c957f2dull; }

/// Runs tc.total_steps optimizer steps on batches drawn from `sample`.
template <typename T>
std::vector<LossReport> train_loop(Model<T>& model, const TrainConfig& tc, std::uint64_t seed,
                                   const ExampleSampler& sample, const StepCallback& on_step = {}) {
  tc.validate();
  Adam<T> opt(model);
  std::mt19937_64 rng(data_seed(seed));
  std::vector<LossReport> log;
  log.reserve(tc.total_steps);
  for (std::size_t s = 0; s < tc.total_steps; ++s) {
    std::vector<TrainExample> batch;
    batch.reserve(tc.batch_size);
    for (std::size_t i = 0; i < tc.batch_size; ++i) batch.push_back(sample(rng, s));
    LossReport r = train_step(model, opt, batch, tc);
    r.step = s;
    if (on_step) on_step(r);
    log.push_back(std::move(r));
  }
  return log;
}

/// Passkey prompts of random length and depth. During the first
/// curriculum_steps steps the key grows from one digit to key_digits and the
/// longest prompt from train_min_tokens to train_max_tokens.
inline ExampleSampler passkey_sampler(const ToyVocab& vocab, const TaskConfig& task) {
  return [&vocab, task](std::mt19937_64& rng, std::size_t step) {
    std::size_t digits = task.key_digits, max_len = task.train_max_tokens;
    if (step < task.curriculum_steps) {
      const double f = double(step + 1) / double(task.curriculum_steps);
      digits = std::max<std::size_t>(1, std::size_t(std::ceil(f * double(task.key_digits))));
      max_len = task.train_min_tokens + std::size_t(f * double(task.train_max_tokens - task.train_min_tokens));
    }
    std::uniform_int_distribution<std::size_t> len(task.train_min_tokens, max_len);
    std::uniform_real_distribution<double> depth(0.0, 1.0);
    const std::size_t n = len(rng);
    const double d = depth(rng);
    PasskeySpec spec{n, d, random_digits(rng, digits)};
    TrainExample ex = passkey_example(gen_passkey(vocab, spec), task.prompt_weight);
    // Digits inside the prompt (the key's second mention among them) are a
    // local copying signal; they get their own weight.
    for (std::size_t p = 0; p + 1 < ex.ids.size(); ++p) {
      const std::string& sym = vocab.symbol(ex.ids[p + 1]);
      if (ex.weights[p] < 1.0 && sym.size() == 1 && sym[0] >= '0' && sym[0] <= '9') ex.weights[p] = task.digit_weight;
    }
    return ex;
  };
}

/// The query always sits in the last chunk; the gap is uniform over the
/// configured gaps.
inline ExampleSampler copy_sampler(const ToyVocab& vocab, const ModelConfig& model, const TaskConfig& task) {
  return [&vocab, cs = model.chunk_size, task](std::mt19937_64& rng, std::size_t) {
    std::uniform_int_distribution<std::size_t> pick(0, task.copy_gaps.size() - 1);
    const std::size_t gap = task.copy_gaps[pick(rng)];
    return copy_example(gen_copy_probe(vocab, cs, task.copy_chunks, task.copy_chunks - gap, task.copy_chunks, rng));
  };
}

inline ToyVocab task_vocab(const TaskConfig& task) {
  return task.kind == "copy" ? copy_probe::vocab() : passkey::vocab();
}

/// Trains a fresh model for rc (model.vocab is set from the task vocabulary).
template <typename T>
Model<T> train_task(RunConfig rc, std::vector<LossReport>* log = nullptr, const StepCallback& on_step = {}) {
  const ToyVocab vocab = task_vocab(rc.task);
  rc.model.vocab = vocab.size();
  rc.validate();
  Model<T> model(rc.model, rc.seed);
  const ExampleSampler sample =
      rc.task.kind == "copy" ? copy_sampler(vocab, rc.model, rc.task) : passkey_sampler(vocab, rc.task);
  auto l = train_loop(model, rc.train, rc.seed, sample, on_step);
  if (log) *log = std::move(l);
  return model;
}

}  // namespace comet

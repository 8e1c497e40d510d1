#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "comet/checkpoint.hpp"
#include "comet/model.hpp"
#include "test_util.hpp"

using namespace comet;
using testutil::random_ids;
using testutil::tiny_config;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

Model<double> random_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<double> m(cfg, seed);
  m.randomize(seed + 1);
  return m;
}

Matrix<double> last_chunk_logits(const Model<double>& m, const std::vector<int>& ids) {
  return stream_infer(m, std::span<const int>(ids)).logits.back();
}

bool differs(const Matrix<double>& a, const Matrix<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return true;
  return false;
}

// Rewrites a checkpoint with an edited JSON header and the same payload.
void rewrite_header(const std::string& src, const std::string& dst,
                    const std::function<void(nlohmann::json&)>& edit) {
  std::ifstream is(src, std::ios::binary);
  auto header = read_checkpoint_header(is);
  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  edit(header);
  const std::string text = header.dump();
  std::ofstream os(dst, std::ios::binary | std::ios::trunc);
  os.write(kCheckpointMagic, 8);
  const std::uint32_t v = kCheckpointVersion;
  const std::uint64_t n = text.size();
  os.write(reinterpret_cast<const char*>(&v), 4);
  os.write(reinterpret_cast<const char*>(&n), 8);
  os << text << payload;
}

}  // namespace

TEST(Model, FirstChunkBookkeeping) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 1);
  StreamSession<double> s(model);
  std::mt19937_64 rng(2);
  const auto ids = random_ids(cfg.chunk_size, cfg.vocab, rng);
  const auto logits = s.process_chunk(ids);
  EXPECT_EQ(logits.rows(), cfg.chunk_size);
  EXPECT_EQ(logits.cols(), cfg.vocab);
  EXPECT_EQ(s.chunks_processed(), 1u);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    EXPECT_EQ(s.memory().state[i].rows(), cfg.m_global);
    ASSERT_EQ(s.memory().queues[i].size(), 1u);
    EXPECT_EQ(s.memory().queues[i].at(0).rows(), cfg.compress_per_chunk());
  }
}

TEST(Model, InputValidation) {
  const auto cfg = tiny_config();
  Model<double> model(cfg, 1);
  StreamSession<double> s(model);
  EXPECT_THROW(s.process_chunk(std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(s.process_chunk(std::vector<int>(cfg.chunk_size + 1, 0)), std::invalid_argument);
  EXPECT_THROW(s.process_chunk(std::vector<int>{int(cfg.vocab)}), std::invalid_argument);
  EXPECT_THROW(s.process_chunk(std::vector<int>{-1}), std::invalid_argument);
  EXPECT_EQ(s.chunks_processed(), 0u);
}

TEST(Model, ParameterCountMatchesShapes) {
  const auto cfg = tiny_config();
  Model<double> model(cfg, 1);
  const std::size_t d = cfg.d_model, r = cfg.rla_rank, m = cfg.m_global;
  const std::size_t per_layer = 4 * d * d + 2 * d + 2 * d * cfg.ffn_hidden  // layer
                                + 2 * d * r + 2 * d + m * d + 2 * d;       // adapter, w_g, s0, gains
  const std::size_t expected = cfg.vocab * d + d + m * d + cfg.n_layers * per_layer + d + d * cfg.vocab;
  EXPECT_EQ(model.params().count(), expected);
}

TEST(Model, InitializationIsSeeded) {
  const auto cfg = tiny_config();
  Model<double> a(cfg, 5), b(cfg, 5), c(cfg, 6);
  EXPECT_EQ(a.params().tok_emb, b.params().tok_emb);
  EXPECT_NE(a.params().tok_emb, c.params().tok_emb);
  for (const auto& mp : a.params().memory) {
    EXPECT_EQ(mp.w_g, Matrix<double>(2 * cfg.d_model, 1));
    EXPECT_EQ(mp.rla.w_up, Matrix<double>(cfg.d_model, cfg.rla_rank));
  }
}

TEST(Model, EarlierChunksReachLaterLogits) {
  std::mt19937_64 rng(3);
  for (auto ab : {Ablation::full, Ablation::global_only, Ablation::temp_only, Ablation::no_gate}) {
    auto cfg = tiny_config();
    cfg.ablation = ab;
    if (ab == Ablation::temp_only) cfg.m_global = 0;
    const auto model = random_model(cfg, 4);
    auto ids = random_ids(3 * cfg.chunk_size, cfg.vocab, rng);
    const auto base = stream_infer(model, std::span<const int>(ids)).logits;
    ids[1] = (ids[1] + 1) % int(cfg.vocab);
    const auto moved = stream_infer(model, std::span<const int>(ids)).logits;
    EXPECT_TRUE(differs(base[2], moved[2])) << to_string(ab);
    // Changing the last chunk leaves earlier chunks alone.
    ids[1] = (ids[1] + int(cfg.vocab) - 1) % int(cfg.vocab);
    ids.back() = (ids.back() + 1) % int(cfg.vocab);
    const auto tail = stream_infer(model, std::span<const int>(ids)).logits;
    EXPECT_EQ(tail[0], base[0]);
    EXPECT_EQ(tail[1], base[1]);
  }
}

TEST(Model, GateClampOneFreezesState) {
  const auto cfg = tiny_config();
  auto model = random_model(cfg, 5);
  model.set_gate_override(1.0);
  StreamSession<double> s(model);
  std::mt19937_64 rng(6);
  for (int c = 0; c < 4; ++c) s.process_chunk(random_ids(cfg.chunk_size, cfg.vocab, rng));
  for (std::size_t i = 0; i < cfg.n_layers; ++i) EXPECT_EQ(s.memory().state[i], model.params().memory[i].s0);
}

TEST(Model, NoGateStateIsFreshlyNormalizedEachChunk) {
  auto cfg = tiny_config();
  cfg.ablation = Ablation::no_gate;
  auto model = random_model(cfg, 7);
  for (auto& mp : model.params().memory) mp.state_norm.fill(1.0);
  StreamSession<double> s(model, true);
  std::mt19937_64 rng(8);
  for (int c = 0; c < 3; ++c) {
    s.process_chunk(random_ids(cfg.chunk_size, cfg.vocab, rng));
    for (const auto& st : s.memory().state)
      for (std::size_t r = 0; r < st.rows(); ++r) {
        double ss = 0;
        for (double x : st.row(r)) ss += x * x;
        EXPECT_NEAR(ss / double(st.cols()), 1.0, 1e-4);
      }
  }
  for (const auto& row : s.trace()->rows()) EXPECT_EQ(row.gate, 0.0);
}

TEST(Model, RetainedStorageIsConstant) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 9);
  StreamSession<double> s(model);
  const std::size_t fixed = s.retained_elements();
  EXPECT_EQ(fixed, cfg.retained_state_elements());
  std::mt19937_64 rng(10);
  const std::size_t cap = cfg.temp_capacity_entries();
  for (std::size_t c = 1; c <= 3 * cap + 2; ++c) {
    s.process_chunk(random_ids(cfg.chunk_size, cfg.vocab, rng));
    EXPECT_EQ(s.retained_elements(), fixed);
    const std::size_t live = std::min(c, cap) * cfg.compress_per_chunk() * cfg.d_model;
    EXPECT_EQ(s.occupied_elements(), cfg.n_layers * (cfg.m_global * cfg.d_model + live));
  }
}

TEST(Model, GateTraceShape) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 11);
  std::mt19937_64 rng(12);
  const auto ids = random_ids(5 * cfg.chunk_size, cfg.vocab, rng);
  const auto out = stream_infer(model, std::span<const int>(ids), true);
  ASSERT_EQ(out.trace.rows().size(), cfg.n_layers * 5 * cfg.m_global);
  for (const auto& r : out.trace.rows()) {
    EXPECT_GT(r.gate, 0.0);
    EXPECT_LT(r.gate, 1.0);
  }
}

TEST(Model, PartialFinalChunk) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 13);
  std::mt19937_64 rng(14);
  const auto ids = random_ids(2 * cfg.chunk_size + 2, cfg.vocab, rng);
  const auto out = stream_infer(model, std::span<const int>(ids));
  ASSERT_EQ(out.logits.size(), 3u);
  EXPECT_EQ(out.logits[2].rows(), 2u);
}

TEST(Model, PeekLeavesMemoryUntouched) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 15);
  std::mt19937_64 rng(16);
  StreamSession<double> s(model);
  s.process_chunk(random_ids(cfg.chunk_size, cfg.vocab, rng));
  const auto before = s.memory().state;
  const auto part = random_ids(3, cfg.vocab, rng);
  const auto peeked = s.peek_chunk(part);
  EXPECT_EQ(s.memory().state, before);
  EXPECT_EQ(s.chunks_processed(), 1u);
  EXPECT_EQ(s.process_chunk(part), peeked);
}

TEST(Model, GreedyDecodeMatchesFullRecompute) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 17);
  std::mt19937_64 rng(18);
  for (std::size_t len : {3u, 6u, 11u}) {
    const auto prompt = random_ids(len, cfg.vocab, rng);
    StreamSession<double> s(model);
    const auto out = greedy_decode(s, std::span<const int>(prompt), 9);
    std::vector<int> seq = prompt;
    for (int tok : out) {
      const auto l = last_chunk_logits(model, seq);
      EXPECT_EQ(int(argmax_row(l, l.rows() - 1)), tok);
      seq.push_back(tok);
    }
    StreamSession<double> again(model);
    EXPECT_EQ(greedy_decode(again, std::span<const int>(prompt), 9), out);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto cfg = tiny_config();
  const auto model = random_model(cfg, 19);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(model, path, {{"task", "passkey"}});
  const auto back = load_checkpoint<double>(path);
  EXPECT_EQ(back.config(), cfg);
  const auto a = model.params().named();
  const auto b = back.params().named();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;
  std::ifstream is(path, std::ios::binary);
  EXPECT_EQ(read_checkpoint_header(is)["meta"]["task"], "passkey");
}

TEST(Checkpoint, FloatModelRoundTrips) {
  const auto cfg = tiny_config();
  Model<float> model(cfg, 20);
  model.randomize(21);
  const auto path = temp_path("float.ckpt");
  save_checkpoint(model, path);
  const auto back = load_checkpoint<float>(path);
  EXPECT_EQ(back.params().lm_head, model.params().lm_head);
}

TEST(Checkpoint, BadMagicRejected) {
  const auto path = temp_path("bad.ckpt");
  std::ofstream(path, std::ios::binary) << "NOTACKPT and some more bytes";
  EXPECT_THROW(load_checkpoint<double>(path), CheckpointError);
  EXPECT_THROW(load_checkpoint<double>(temp_path("does_not_exist.ckpt")), CheckpointError);
}

TEST(Checkpoint, HashMismatchRejected) {
  const auto cfg = tiny_config();
  const auto path = temp_path("hash.ckpt"), edited = temp_path("hash_edited.ckpt");
  save_checkpoint(random_model(cfg, 22), path);
  rewrite_header(path, edited, [](nlohmann::json& h) { h["config"]["rope_theta"] = 500.0; });
  try {
    load_checkpoint<double>(edited);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("config_hash"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ConfigMismatchNamesField) {
  const auto cfg = tiny_config();
  const auto path = temp_path("field.ckpt");
  save_checkpoint(random_model(cfg, 23), path);
  auto other = cfg;
  other.d_model = 12;
  other.n_heads = 2;
  Model<double> target(other, 1);
  try {
    load_checkpoint_into(target, path);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("config.d_model"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncatedAndPaddedFilesRejected) {
  const auto cfg = tiny_config();
  const auto path = temp_path("trunc.ckpt");
  save_checkpoint(random_model(cfg, 24), path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::copy_file(path, temp_path("padded.ckpt"), std::filesystem::copy_options::overwrite_existing);
  std::ofstream(temp_path("padded.ckpt"), std::ios::binary | std::ios::app) << 'x';
  EXPECT_THROW(load_checkpoint<double>(temp_path("padded.ckpt")), CheckpointError);
  std::filesystem::resize_file(path, size - 8);
  EXPECT_THROW(load_checkpoint<double>(path), CheckpointError);
}

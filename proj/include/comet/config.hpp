#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace comet {

/// Raised for invalid configuration values; the message names the field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& why)
      : std::invalid_argument(field + ": " + why), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class Ablation { full, global_only, temp_only, no_gate };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::global_only: return "global_only";
    case Ablation::temp_only: return "temp_only";
    case Ablation::no_gate: return "no_gate";
  }
  return "full";
}

inline Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "global_only") return Ablation::global_only;
  if (s == "temp_only") return Ablation::temp_only;
  if (s == "no_gate") return Ablation::no_gate;
  throw ConfigError("ablation", "unknown mode '" + s + "' (full, global_only, temp_only, no_gate)");
}

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_hidden = 128;
  std::size_t vocab = 64;
  std::size_t chunk_size = 64;
  std::size_t m_global = 8;  // also the number of readout tokens
  std::size_t temp_budget_tokens = 64;
  std::size_t compression_interval = 8;
  std::size_t rla_rank = 8;
  bool share_rla = true;  // one adapter per layer for both memory paths
  Ablation ablation = Ablation::full;
  double rope_theta = 10000.0;
  double rms_eps = 1e-6;

  /// Hyperparameters of the large-model setting: 512 global, 2048 temporary,
  /// chunk 2048, one compression token per 8 context tokens, rank 8.
  static ModelConfig large_reference() {
    ModelConfig c;
    c.d_model = 2560;
    c.n_layers = 36;
    c.n_heads = 32;
    c.ffn_hidden = 9728;
    c.vocab = 151936;
    c.chunk_size = 2048;
    c.m_global = 512;
    c.temp_budget_tokens = 2048;
    c.compression_interval = 8;
    c.rla_rank = 8;
    return c;
  }

  std::size_t compress_per_chunk() const { return (chunk_size + compression_interval - 1) / compression_interval; }

  std::size_t temp_capacity_entries() const {
    if (ablation == Ablation::global_only) return 0;
    return temp_budget_tokens / compress_per_chunk();
  }

  std::size_t temp_capacity_tokens() const { return temp_capacity_entries() * compress_per_chunk(); }

  /// Elements held by one stream between chunks once the FIFO is full.
  std::size_t retained_state_elements() const {
    return n_layers * (m_global * d_model + temp_capacity_tokens() * d_model);
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(name, "must be at least 1");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(ffn_hidden, "ffn_hidden");
    positive(vocab, "vocab");
    positive(chunk_size, "chunk_size");
    positive(compression_interval, "compression_interval");
    positive(rla_rank, "rla_rank");
    if (d_model % n_heads != 0) throw ConfigError("n_heads", "must divide d_model");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("n_heads", "head dimension must be even for rotary encoding");
    if (chunk_size < compression_interval) throw ConfigError("compression_interval", "must not exceed chunk_size");
    if (m_global == 0 && ablation != Ablation::temp_only)
      throw ConfigError("m_global", "must be at least 1 unless ablation = temp_only");
    if (temp_budget_tokens % compress_per_chunk() != 0)
      throw ConfigError("temp_budget_tokens", "must be a multiple of compression tokens per chunk (" +
                                                  std::to_string(compress_per_chunk()) + ")");
    if (ablation == Ablation::temp_only && temp_budget_tokens == 0)
      throw ConfigError("temp_budget_tokens", "temp_only mode needs a nonzero temporary budget");
    if (!(rms_eps > 0.0)) throw ConfigError("rms_eps", "must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"ffn_hidden", c.ffn_hidden},
                     {"vocab", c.vocab},
                     {"chunk_size", c.chunk_size},
                     {"m_global", c.m_global},
                     {"temp_budget_tokens", c.temp_budget_tokens},
                     {"compression_interval", c.compression_interval},
                     {"rla_rank", c.rla_rank},
                     {"share_rla", c.share_rla},
                     {"ablation", to_string(c.ablation)},
                     {"rope_theta", c.rope_theta},
                     {"rms_eps", c.rms_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) throw ConfigError(key, "missing");
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  get("d_model", c.d_model);
  get("n_layers", c.n_layers);
  get("n_heads", c.n_heads);
  get("ffn_hidden", c.ffn_hidden);
  get("vocab", c.vocab);
  get("chunk_size", c.chunk_size);
  get("m_global", c.m_global);
  get("temp_budget_tokens", c.temp_budget_tokens);
  get("compression_interval", c.compression_interval);
  get("rla_rank", c.rla_rank);
  get("share_rla", c.share_rla);
  std::string ab;
  get("ablation", ab);
  c.ablation = ablation_from_string(ab);
  get("rope_theta", c.rope_theta);
  get("rms_eps", c.rms_eps);
}

/// FNV-1a over the canonical JSON text.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t config_hash(const ModelConfig& c) { return fnv1a64(nlohmann::json(c).dump()); }

}  // namespace comet

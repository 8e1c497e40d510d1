#pragma once

// Checkpoint container:
//
//   bytes 0..7    magic "COMETCKP"
//   bytes 8..11   format version, u32 little-endian
//   bytes 12..19  header length N, u64 little-endian
//   N bytes       JSON header: config, config hash, endianness, parameter
//                 table (name, rows, cols, offset in elements)
//   rest          parameter blocks, IEEE-754 f64 little-endian, header order
//
// Parameters are always stored as f64 whatever the in-memory scalar type.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "comet/model.hpp"

namespace comet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'M', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(char((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError(std::string("checkpoint truncated in ") + what);
    v |= U(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path, const nlohmann::json& meta = {}) {
  nlohmann::json header;
  header["format"] = "comet-checkpoint";
  header["version"] = kCheckpointVersion;
  header["endianness"] = "little";
  header["scalar"] = "f64";
  header["config"] = model.config();
  header["config_hash"] = ckpt_detail::hex64(config_hash(model.config()));
  if (!meta.is_null()) header["meta"] = meta;
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : model.params().named()) {
    table.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
    offset += m->size();
  }
  header["params"] = table;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  ckpt_detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  ckpt_detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, m] : model.params().named())
    for (T v : m->storage()) ckpt_detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(double(v)));
  if (!os) throw CheckpointError("write failed for " + path);
}

/// Reads and validates the header only.
inline nlohmann::json read_checkpoint_header(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("not a checkpoint: bad magic header");
  const auto version = ckpt_detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("version: file has " + std::to_string(version) + ", reader supports " +
                          std::to_string(kCheckpointVersion));
  const auto len = ckpt_detail::get_le<std::uint64_t>(is, "header length");
  if (len > (1ull << 30)) throw CheckpointError("header length: implausible value " + std::to_string(len));
  std::string text(len, '\0');
  if (!is.read(text.data(), std::streamsize(len))) throw CheckpointError("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("header: invalid JSON: ") + e.what());
  }
  if (header.value("endianness", "") != "little")
    throw CheckpointError("endianness: expected \"little\"");
  if (header.value("scalar", "") != "f64") throw CheckpointError("scalar: expected \"f64\"");
  return header;
}

inline ModelConfig checkpoint_config(const nlohmann::json& header) {
  ModelConfig cfg;
  try {
    cfg = header.at("config").get<ModelConfig>();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("config.") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("config: ") + e.what());
  }
  const std::string want = ckpt_detail::hex64(config_hash(cfg));
  const std::string got = header.value("config_hash", "");
  if (got != want) throw CheckpointError("config_hash: header says " + got + ", config hashes to " + want);
  return cfg;
}

/// Loads parameters into an existing model whose configuration must match.
template <typename T>
void load_checkpoint_into(Model<T>& model, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  const nlohmann::json header = read_checkpoint_header(is);
  const ModelConfig cfg = checkpoint_config(header);
  if (!(cfg == model.config())) {
    const nlohmann::json a = cfg, b = model.config();
    for (auto it = a.begin(); it != a.end(); ++it)
      if (b.at(it.key()) != it.value())
        throw CheckpointError("config." + it.key() + ": file has " + it.value().dump() + ", model has " +
                              b.at(it.key()).dump());
  }
  const auto& table = header.at("params");
  auto named = model.params().named();
  if (table.size() != named.size())
    throw CheckpointError("params: file has " + std::to_string(table.size()) + " tensors, model has " +
                          std::to_string(named.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& e = table[i];
    const auto& [name, m] = named[i];
    if (e.at("name") != name)
      throw CheckpointError("params[" + std::to_string(i) + "].name: file has " + e.at("name").dump() +
                            ", expected \"" + name + "\"");
    if (e.at("rows").get<std::size_t>() != m->rows() || e.at("cols").get<std::size_t>() != m->cols())
      throw CheckpointError("params." + name + ": shape (" + e.at("rows").dump() + "x" + e.at("cols").dump() +
                            ") in file, " + m->shape_str() + " expected");
  }
  for (auto& [name, m] : named)
    for (T& v : m->storage())
      v = T(std::bit_cast<double>(ckpt_detail::get_le<std::uint64_t>(is, name.c_str())));
  if (is.peek() != EOF) throw CheckpointError("checkpoint has trailing bytes after parameter blocks");
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  ModelConfig cfg;
  {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    cfg = checkpoint_config(read_checkpoint_header(is));
  }
  Model<T> model(cfg);
  load_checkpoint_into(model, path);
  return model;
}

}  // namespace comet

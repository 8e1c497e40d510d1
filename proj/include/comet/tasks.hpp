#pragma once

// Synthetic retrieval tasks: the passkey prompt and a copy-through-memory
// probe, plus the small vocabularies they are tokenized with.

#include <algorithm>
#include <cctype>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "comet/model.hpp"
#include "comet/training.hpp"

namespace comet {

/// Symbol table tokenized by greedy longest match. Built either from single
/// characters or from whole words of a reference text (each word with and
/// without a leading space, with every character of the text as fallback).
class ToyVocab {
 public:
  ToyVocab() = default;
  explicit ToyVocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) { index(); }

  static ToyVocab characters(const std::string& alphabet) {
    std::set<char> chars(alphabet.begin(), alphabet.end());
    std::vector<std::string> syms;
    for (char c : chars) syms.emplace_back(1, c);
    return ToyVocab(std::move(syms));
  }

  static ToyVocab words(const std::string& text, const std::string& extra_chars = "") {
    std::set<std::string> syms;
    for (char c : text) syms.insert(std::string(1, c));
    for (char c : extra_chars) syms.insert(std::string(1, c));
    for (std::size_t i = 0; i < text.size();) {
      if (std::isalpha(static_cast<unsigned char>(text[i]))) {
        std::size_t j = i;
        while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
        const std::string w = text.substr(i, j - i);
        syms.insert(w);
        syms.insert(" " + w);
        i = j;
      } else {
        ++i;
      }
    }
    return ToyVocab(std::vector<std::string>(syms.begin(), syms.end()));
  }

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(int id) const { return symbols_.at(std::size_t(id)); }
  bool contains(const std::string& s) const { return ids_.count(s) > 0; }
  int id(const std::string& s) const {
    auto it = ids_.find(s);
    if (it == ids_.end()) throw std::invalid_argument("vocab: unknown symbol '" + s + "'");
    return it->second;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < text.size();) {
      std::size_t best = 0;
      int best_id = -1;
      for (std::size_t len = std::min(max_len_, text.size() - i); len > 0; --len) {
        auto it = ids_.find(text.substr(i, len));
        if (it != ids_.end()) {
          best = len;
          best_id = it->second;
          break;
        }
      }
      if (best_id < 0) throw std::invalid_argument("vocab: cannot encode character '" + text.substr(i, 1) + "'");
      out.push_back(best_id);
      i += best;
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string s;
    for (int id : ids) s += symbols_.at(std::size_t(id));
    return s;
  }

 private:
  void index() {
    ids_.clear();
    max_len_ = 1;
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_[i].empty()) throw std::invalid_argument("vocab: empty symbol");
      if (!ids_.emplace(symbols_[i], int(i)).second)
        throw std::invalid_argument("vocab: duplicate symbol '" + symbols_[i] + "'");
      max_len_ = std::max(max_len_, symbols_[i].size());
    }
  }

  std::vector<std::string> symbols_;
  std::map<std::string, int> ids_;
  std::size_t max_len_ = 1;
};

// ---------------------------------------------------------------------------
// Passkey retrieval

namespace passkey {

inline const std::string kSystem =
    "You are an expert at finding a specific 'pass key' inside a long document. When asked, you will reply with "
    "only the pass key and nothing else.";
inline const std::string kIntro =
    " There is an important info hidden inside a lot of irrelevant text. Find it and memorize them. I will quiz you "
    "about the important information there. ";
inline const std::string kFiller =
    "To bake a cake, you need flour, sugar, and eggs. Mix them well. Bake at 350 degrees. ";
inline const std::string kQuestion = "What is the pass key? The pass key is";

inline std::string prefix() {
  return R"([{"role": "system", "content": ")" + kSystem + R"("}, {"role": "user", "content": ")" + kIntro;
}
inline std::string key_statement(const std::string& key) {
  return "The pass key is " + key + ". Remember it. " + key + " is the pass key. ";
}
inline const std::string kSuffix = R"("}])";

/// Word-level vocabulary covering the template, all digits and the space.
inline ToyVocab vocab() {
  return ToyVocab::words(prefix() + kFiller + key_statement("0") + kQuestion + kSuffix, "0123456789 ");
}

}  // namespace passkey

struct PasskeySpec {
  std::size_t total_length_tokens = 512;
  double depth_fraction = 0.5;
  std::string passkey = "1392093";
};

struct PasskeySample {
  std::string text;    // full rendered chat-format prompt
  std::string prompt;  // model input: text up to and including "The pass key is"
  std::string answer;  // digits
  std::vector<int> prompt_ids;
  std::vector<int> answer_ids;  // " " followed by one token per digit
  std::size_t repeats_before = 0, repeats_after = 0;
  std::size_t key_token = 0;  // index of the key statement's first token (" The")
};

/// Renders the passkey prompt with explicit repeat counts.
inline PasskeySample render_passkey(const ToyVocab& vocab, const std::string& key, std::size_t x, std::size_t y) {
  if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw std::invalid_argument("passkey: key must be a non-empty digit string");
  PasskeySample s;
  std::string before = passkey::prefix();
  for (std::size_t i = 0; i < x; ++i) before += passkey::kFiller;
  std::string after = passkey::key_statement(key);
  for (std::size_t i = 0; i < y; ++i) after += passkey::kFiller;
  after += passkey::kQuestion;
  s.prompt = before + after;
  s.text = s.prompt + passkey::kSuffix;
  s.answer = key;
  s.repeats_before = x;
  s.repeats_after = y;
  // The space ending `before` merges into the " The" token of the statement.
  s.key_token = vocab.encode(before.substr(0, before.size() - 1)).size();
  s.prompt_ids = vocab.encode(s.prompt);
  s.answer_ids = vocab.encode(" " + key);
  return s;
}

/// Token lengths of the template pieces; measured once per vocabulary.
struct PasskeyLengths {
  std::size_t base = 0;    // prompt with no filler
  std::size_t filler = 0;  // one filler sentence
  std::size_t prefix = 0;  // tokens before the first filler

  explicit PasskeyLengths(const ToyVocab& v, std::size_t key_digits = 7) {
    const std::string key(key_digits, '0');
    base = render_passkey(v, key, 0, 0).prompt_ids.size();
    filler = render_passkey(v, key, 1, 0).prompt_ids.size() - base;
    prefix = v.encode(passkey::prefix()).size();
  }
};

/// Chooses filler counts to hit the target length and places the key
/// statement as close as possible to depth_fraction of the total length.
inline PasskeySample gen_passkey(const ToyVocab& vocab, const PasskeySpec& spec) {
  if (spec.depth_fraction < 0.0 || spec.depth_fraction > 1.0)
    throw std::invalid_argument("passkey: depth_fraction must lie in [0,1]");
  static thread_local std::map<const ToyVocab*, std::pair<std::size_t, PasskeyLengths>> cache;
  auto it = cache.find(&vocab);
  if (it == cache.end() || it->second.first != spec.passkey.size())
    it = cache.insert_or_assign(&vocab, std::pair{spec.passkey.size(), PasskeyLengths(vocab, spec.passkey.size())})
             .first;
  const PasskeyLengths& len = it->second.second;
  if (spec.total_length_tokens < len.base)
    throw std::invalid_argument("passkey: length " + std::to_string(spec.total_length_tokens) +
                                " is below the template minimum of " + std::to_string(len.base) + " tokens");
  const std::size_t n = (spec.total_length_tokens - len.base + len.filler / 2) / len.filler;
  const double target = spec.depth_fraction * double(spec.total_length_tokens) - double(len.prefix);
  long x = std::lround(target / double(len.filler));
  x = std::clamp<long>(x, 0, long(n));
  return render_passkey(vocab, spec.passkey, std::size_t(x), n - std::size_t(x));
}

inline std::string random_digits(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 9);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += char('0' + d(rng));
  return s;
}

/// Prompt followed by the answer; only the answer tokens carry loss.
inline TrainExample passkey_example(const PasskeySample& s, double prompt_weight = 0.0) {
  TrainExample ex;
  ex.ids = s.prompt_ids;
  ex.ids.insert(ex.ids.end(), s.answer_ids.begin(), s.answer_ids.end());
  ex.weights.assign(ex.ids.size(), prompt_weight);
  // weights[p] scores the prediction of ids[p+1]
  for (std::size_t p = s.prompt_ids.size() - 1; p + 1 < ex.ids.size(); ++p) ex.weights[p] = 1.0;
  ex.weights.back() = 0.0;
  return ex;
}

inline nlohmann::json to_jsonl_record(const PasskeySample& s, const PasskeySpec& spec) {
  return {{"text", s.text},
          {"answer", s.answer},
          {"meta",
           {{"total_length_tokens", spec.total_length_tokens},
            {"depth_fraction", spec.depth_fraction},
            {"repeats_before", s.repeats_before},
            {"repeats_after", s.repeats_after},
            {"prompt_tokens", s.prompt_ids.size()},
            {"key_token", s.key_token}}}};
}

/// Greedy-decodes the answer and compares digit strings exactly.
template <typename T>
bool passkey_correct(const Model<T>& model, const ToyVocab& vocab, const PasskeySample& s) {
  StreamSession<T> session(model);
  const auto out = greedy_decode(session, s.prompt_ids, s.answer_ids.size());
  std::string decoded = vocab.decode(out);
  decoded.erase(decoded.begin(), std::find_if(decoded.begin(), decoded.end(), [](char c) { return c != ' '; }));
  return decoded == s.answer;
}

struct AccuracyGrid {
  std::vector<std::size_t> lengths;
  std::vector<double> depths;
  std::vector<std::vector<double>> accuracy;  // [length][depth]

  double min() const {
    double m = 1.0;
    for (const auto& row : accuracy)
      for (double a : row) m = std::min(m, a);
    return m;
  }
  double mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& row : accuracy)
      for (double a : row) s += a, ++n;
    return n ? s / double(n) : 0.0;
  }
  void write_csv(std::ostream& os) const {
    os << "length,depth,accuracy\n";
    for (std::size_t i = 0; i < lengths.size(); ++i)
      for (std::size_t j = 0; j < depths.size(); ++j)
        os << lengths[i] << ',' << depths[j] << ',' << accuracy[i][j] << '\n';
  }
};

/// Exact-match accuracy over a grid of lengths (tokens) x depths with
/// `samples` random passkeys per cell.
template <typename T>
AccuracyGrid eval_passkey(const Model<T>& model, const ToyVocab& vocab, const std::vector<std::size_t>& lengths,
                          const std::vector<double>& depths, std::size_t samples, std::uint64_t seed,
                          std::size_t key_digits = 7) {
  AccuracyGrid grid{lengths, depths, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t len : lengths) {
    std::vector<double> row;
    for (double depth : depths) {
      std::size_t hits = 0;
      for (std::size_t k = 0; k < samples; ++k) {
        PasskeySpec spec{len, depth, random_digits(rng, key_digits)};
        hits += passkey_correct(model, vocab, gen_passkey(vocab, spec)) ? 1 : 0;
      }
      row.push_back(samples ? double(hits) / double(samples) : 0.0);
    }
    grid.accuracy.push_back(std::move(row));
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Copy probe
//
// A symbol is announced ("#" then the symbol) somewhere in the key chunk and
// asked for ("?") at the end of the query chunk; every other position holds
// random filler letters. Chunks are numbered from 1.

namespace copy_probe {
inline const std::string kFillerAlphabet = "abcdefghijklmnop";
inline const std::string kSymbols = "0123456789ABCDEF";
inline ToyVocab vocab() { return ToyVocab::characters(kFillerAlphabet + kSymbols + "#?"); }
}  // namespace copy_probe

struct CopyProbe {
  std::vector<int> ids;
  int answer = 0;             // token id of the symbol
  std::size_t query_pos = 0;  // position of "?"; the answer follows it
};

inline CopyProbe gen_copy_probe(const ToyVocab& vocab, std::size_t chunk_size, std::size_t n_chunks,
                                std::size_t key_chunk, std::size_t query_chunk, std::mt19937_64& rng) {
  if (!(key_chunk >= 1 && key_chunk < query_chunk && query_chunk <= n_chunks))
    throw std::invalid_argument("copy probe: need 1 <= key_chunk < query_chunk <= n_chunks");
  if (chunk_size < 4) throw std::invalid_argument("copy probe: chunk_size must be at least 4");
  std::uniform_int_distribution<std::size_t> filler(0, copy_probe::kFillerAlphabet.size() - 1);
  std::uniform_int_distribution<std::size_t> sym(0, copy_probe::kSymbols.size() - 1);
  CopyProbe p;
  p.ids.resize(n_chunks * chunk_size);
  for (auto& t : p.ids) t = vocab.id(std::string(1, copy_probe::kFillerAlphabet[filler(rng)]));
  const int symbol = vocab.id(std::string(1, copy_probe::kSymbols[sym(rng)]));
  std::uniform_int_distribution<std::size_t> at(0, chunk_size - 2);
  const std::size_t key_pos = (key_chunk - 1) * chunk_size + at(rng);
  p.ids[key_pos] = vocab.id("#");
  p.ids[key_pos + 1] = symbol;
  p.query_pos = (query_chunk - 1) * chunk_size + chunk_size - 2;
  p.ids[p.query_pos] = vocab.id("?");
  p.ids[p.query_pos + 1] = symbol;
  p.answer = symbol;
  return p;
}

inline TrainExample copy_example(const CopyProbe& p) {
  TrainExample ex;
  ex.ids = p.ids;
  ex.weights.assign(p.ids.size(), 0.0);
  ex.weights[p.query_pos] = 1.0;
  return ex;
}

/// Streams the probe up to and including "?" and checks the argmax.
template <typename T>
bool copy_correct(const Model<T>& model, const CopyProbe& p) {
  StreamSession<T> session(model);
  const auto out = greedy_decode(session, std::span<const int>(p.ids.data(), p.query_pos + 1), 1);
  return out.front() == p.answer;
}

/// Accuracy per gap (query_chunk - key_chunk); the query sits in the last chunk.
template <typename T>
std::vector<double> eval_copy(const Model<T>& model, const ToyVocab& vocab, std::size_t n_chunks,
                              const std::vector<std::size_t>& gaps, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> acc;
  for (std::size_t gap : gaps) {
    std::size_t hits = 0;
    for (std::size_t k = 0; k < samples; ++k) {
      auto p = gen_copy_probe(vocab, model.config().chunk_size, n_chunks, n_chunks - gap, n_chunks, rng);
      hits += copy_correct(model, p) ? 1 : 0;
    }
    acc.push_back(samples ? double(hits) / double(samples) : 0.0);
  }
  return acc;
}

}  // namespace comet

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metro/errors.hpp"
#include "metro/rng.hpp"
#include "metro/tape.hpp"
#include "metro/tokens.hpp"

namespace metro {

// Byte-level tokenizer: id = byte + 4 unless a remapping is loaded.
class ByteTokenizer {
 public:
  ByteTokenizer() {
    for (int b = 0; b < 256; ++b) map_[b] = b + kNumSpecial;
  }

  // JSON object {"<byte>": id, ...}; bytes not listed are rejected on encode.
  static ByteTokenizer from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocab file " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("vocab file " + path + ": " + e.what());
    }
    if (!j.is_object()) throw DataError("vocab file " + path + ": expected an object of byte -> id");
    ByteTokenizer t;
    t.map_.fill(-1);
    for (auto& [key, value] : j.items()) {
      int b = -1;
      try {
        b = std::stoi(key);
      } catch (...) {
      }
      if (b < 0 || b > 255) throw DataError("vocab file " + path + ": key '" + key + "' is not a byte value");
      if (!value.is_number_integer() || value.get<int>() < kNumSpecial)
        throw DataError("vocab file " + path + ": id for byte " + key + " must be an integer >= 4");
      t.map_[b] = value.get<int>();
    }
    return t;
  }

  int vocab_size() const { return *std::max_element(map_.begin(), map_.end()) + 1; }

  IdList encode(std::string_view text) const {
    IdList ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
      if (map_[c] < 0) throw DataError("byte " + std::to_string(c) + " has no vocabulary id");
      ids.push_back(map_[c]);
    }
    return ids;
  }

 private:
  std::array<std::int32_t, 256> map_{};
};

// Documents are separated by one or more blank lines; whitespace-only
// documents are dropped and inner single newlines are kept.
inline std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  auto flush = [&] {
    while (!current.empty() && (current.back() == '\n' || current.back() == '\r')) current.pop_back();
    if (current.find_first_not_of(" \t\r\n") != std::string::npos) docs.push_back(current);
    current.clear();
  };
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      flush();
    } else {
      current.append(line);
      current.push_back('\n');
    }
    pos = end + 1;
  }
  flush();
  return docs;
}

inline std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  auto docs = split_documents(ss.str());
  if (docs.empty()) throw DataError("corpus " + path + " contains no documents");
  return docs;
}

struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  IdList ids;
  std::vector<std::uint8_t> pad;
  std::vector<std::size_t> documents;  // source document of each row
};

// One document per row: [CLS] window [SEP] then padding. Documents and
// window offsets are drawn from the (seed, step) "data" stream, so a batch
// depends only on its step number.
inline Batch make_batch(const std::vector<IdList>& docs, std::size_t batch, std::size_t seq_len, std::uint64_t seed,
                        std::uint64_t step) {
  if (docs.empty()) throw DataError("make_batch: no documents");
  if (seq_len < 3) throw ConfigError("sequence length must be at least 3", "model.max_seq_len");
  Batch b{batch, seq_len, IdList(batch * seq_len, kPadId), std::vector<std::uint8_t>(batch * seq_len, 1), {}};
  RngStream rng(seed, stream_id("data"), step);
  const std::size_t body = seq_len - 2;
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t d = static_cast<std::size_t>(rng.below(docs.size()));
    const IdList& doc = docs[d];
    if (doc.empty()) throw DataError("make_batch: empty document " + std::to_string(d));
    const std::size_t take = std::min(body, doc.size());
    const std::size_t start = doc.size() > body ? static_cast<std::size_t>(rng.below(doc.size() - body + 1)) : 0;
    std::int32_t* row = b.ids.data() + r * seq_len;
    row[0] = kClsId;
    std::copy_n(doc.begin() + static_cast<std::ptrdiff_t>(start), take, row + 1);
    row[take + 1] = kSepId;
    std::fill_n(b.pad.begin() + static_cast<std::ptrdiff_t>(r * seq_len), take + 2, std::uint8_t{0});
    b.documents.push_back(d);
  }
  return b;
}

// Seeded order-2 Markov chain over a small alphabet. Every context (a, b)
// allows `fanout` successors with random weights.
class MarkovGrammar {
 public:
  static constexpr std::string_view kAlphabet = "abcdefg ";
  static constexpr std::size_t kSymbols = kAlphabet.size();
  static constexpr std::size_t kStates = kSymbols * kSymbols;

  explicit MarkovGrammar(std::uint64_t seed, std::size_t fanout = 3) {
    RngStream rng(seed, "grammar");
    for (std::size_t s = 0; s < kStates; ++s) {
      std::array<std::size_t, kSymbols> order{};
      for (std::size_t i = 0; i < kSymbols; ++i) order[i] = i;
      for (std::size_t i = 0; i < fanout; ++i) std::swap(order[i], order[i + rng.below(kSymbols - i)]);
      double total = 0;
      for (std::size_t i = 0; i < fanout; ++i) total += next_[s][order[i]] = 0.2 + rng.uniform();
      for (auto& p : next_[s]) p /= total;
    }
  }

  // P(next = c | previous two symbols = state).
  double transition(std::size_t state, std::size_t c) const { return next_[state][c]; }

  // Stationary distribution over (a, b) pair states by power iteration.
  std::vector<double> stationary_pairs() const {
    std::vector<double> pi(kStates, 1.0 / kStates), nxt(kStates);
    for (int it = 0; it < 20000; ++it) {
      std::fill(nxt.begin(), nxt.end(), 0.0);
      for (std::size_t s = 0; s < kStates; ++s)
        for (std::size_t c = 0; c < kSymbols; ++c) nxt[(s % kSymbols) * kSymbols + c] += pi[s] * next_[s][c];
      double delta = 0;
      for (std::size_t s = 0; s < kStates; ++s) delta += std::abs(nxt[s] - pi[s]);
      pi.swap(nxt);
      if (delta < 1e-15) break;
    }
    return pi;
  }

  // Stationary probability of each symbol.
  std::vector<double> stationary_symbols() const {
    const auto pi = stationary_pairs();
    std::vector<double> u(kSymbols, 0.0);
    for (std::size_t s = 0; s < kStates; ++s) u[s % kSymbols] += pi[s];
    return u;
  }

  // Each document starts from a stationary pair so every symbol is
  // marginally stationary.
  std::string document(RngStream& rng, std::size_t length) const {
    std::string out;
    out.reserve(length);
    std::size_t state = draw(pairs_cdf(), rng);
    out.push_back(kAlphabet[state / kSymbols]);
    if (length > 1) out.push_back(kAlphabet[state % kSymbols]);
    while (out.size() < length) {
      const std::size_t c = draw(next_[state], rng);
      out.push_back(kAlphabet[c]);
      state = (state % kSymbols) * kSymbols + c;
    }
    out.resize(length);
    return out;
  }

 private:
  template <typename Probs>
  static std::size_t draw(const Probs& p, RngStream& rng) {
    double u = rng.uniform();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (u < p[i]) return i;
      u -= p[i];
    }
    for (std::size_t i = p.size(); i-- > 0;)
      if (p[i] > 0) return i;
    return 0;
  }

  const std::vector<double>& pairs_cdf() const {
    if (pairs_.empty()) pairs_ = stationary_pairs();
    return pairs_;
  }

  std::array<std::array<double, kSymbols>, kStates> next_{};
  mutable std::vector<double> pairs_;
};

struct CorpusSpec {
  std::size_t documents = 100;
  std::size_t min_length = 60;
  std::size_t max_length = 200;
  std::uint64_t seed = 1;
};

// Blank-line separated documents, one line each.
inline std::string generate_corpus(const CorpusSpec& spec) {
  if (spec.documents < 1) throw ConfigError("must be at least 1", "documents");
  if (spec.min_length < 1 || spec.max_length < spec.min_length)
    throw ConfigError("need 1 <= min_length <= max_length", "doc_len");
  MarkovGrammar grammar(spec.seed);
  RngStream rng(spec.seed, "corpus");
  std::string out;
  for (std::size_t d = 0; d < spec.documents; ++d) {
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    if (d > 0) out += "\n\n";
    out += grammar.document(rng, len);
  }
  out += "\n";
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace metro

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dropforge/errors.hpp"
#include "dropforge/io_util.hpp"
#include "dropforge/model.hpp"

namespace dropforge {

enum class CorpusMode { bytes, ids };

inline CorpusMode corpus_mode_from_name(const std::string& s) {
  if (s == "bytes") return CorpusMode::bytes;
  if (s == "ids") return CorpusMode::ids;
  throw InputError("unknown corpus mode: " + s);
}

// Token-id sequences plus a fingerprint of the exact file content they
// came from. declared_vocab is -1 for byte corpora; the model's own
// vocabulary bound is enforced at embedding time either way.
struct CalibrationSet {
  std::vector<TokenSeq> sequences;
  std::string source_digest;
  std::int64_t declared_vocab = -1;
};

inline CalibrationSet parse_corpus(const std::string& bytes, CorpusMode mode) {
  if (bytes.empty()) throw InputError("corpus is empty");
  CalibrationSet set;
  set.source_digest = digest_hex(bytes);
  if (mode == CorpusMode::bytes) {
    TokenSeq seq;
    seq.reserve(bytes.size());
    for (unsigned char c : bytes) seq.push_back(static_cast<TokenId>(c));
    set.sequences.push_back(std::move(seq));
    return set;
  }
  // ids mode: first line "#vocab=<V>", then one sequence per line of
  // base-10 ids separated by single spaces.
  const auto lines = split(bytes, '\n');
  if (lines.empty() || lines[0].rfind("#vocab=", 0) != 0)
    throw InputError("id corpus must start with #vocab=<V>");
  set.declared_vocab = parse_int(std::string_view(lines[0]).substr(7));
  if (set.declared_vocab < 1) throw InputError("id corpus: vocab must be >= 1");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    TokenSeq seq;
    for (const std::string& tok : split(lines[i], ' ')) {
      if (tok.empty()) continue;
      const std::int64_t id = parse_int(tok);
      if (id < 0 || id >= set.declared_vocab)
        throw InputError("id corpus: token id " + tok + " outside declared vocab");
      seq.push_back(static_cast<TokenId>(id));
    }
    if (!seq.empty()) set.sequences.push_back(std::move(seq));
  }
  if (set.sequences.empty()) throw InputError("id corpus holds no sequences");
  return set;
}

inline CalibrationSet load_corpus(const std::string& path, CorpusMode mode) {
  return parse_corpus(read_file_bytes(path), mode);
}

inline std::string ids_to_text(const std::vector<TokenSeq>& sequences, std::int64_t vocab) {
  std::string out = "#vocab=" + std::to_string(vocab) + "\n";
  for (const TokenSeq& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
    out += '\n';
  }
  return out;
}

inline void write_ids_file(const std::string& path, const std::vector<TokenSeq>& sequences,
                           std::int64_t vocab) {
  atomic_write_file(path, ids_to_text(sequences, vocab));
}

// A full block of batch_size rows x seq_len token ids; no padding exists
// anywhere in the pipeline.
struct TokenBatch {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<TokenId> ids;

  std::span<const TokenId> row(std::int64_t r) const {
    return {ids.data() + r * cols, static_cast<std::size_t>(cols)};
  }
};

struct BatchPlan {
  std::int64_t batch_size = 0;
  std::int64_t seq_len = 0;
  std::vector<TokenBatch> batches;
  std::string source_digest;

  std::int64_t total_tokens() const {
    return static_cast<std::int64_t>(batches.size()) * batch_size * seq_len;
  }
};

// Chops every sequence into non-overlapping seq_len chunks (remainder
// discarded), then groups chunks into full batches in order (trailing
// partial batch discarded).
inline BatchPlan make_batches(const CalibrationSet& calib, std::int64_t batch_size,
                              std::int64_t seq_len) {
  if (batch_size < 1 || seq_len < 1)
    throw InputError("make_batches: batch_size and seq_len must be >= 1");
  BatchPlan plan;
  plan.batch_size = batch_size;
  plan.seq_len = seq_len;
  plan.source_digest = calib.source_digest;

  TokenBatch current;
  current.cols = seq_len;
  for (const TokenSeq& seq : calib.sequences) {
    const std::int64_t chunks = static_cast<std::int64_t>(seq.size()) / seq_len;
    for (std::int64_t c = 0; c < chunks; ++c) {
      current.ids.insert(current.ids.end(), seq.begin() + c * seq_len,
                         seq.begin() + (c + 1) * seq_len);
      if (++current.rows == batch_size) {
        plan.batches.push_back(std::move(current));
        current = TokenBatch{};
        current.cols = seq_len;
      }
    }
  }
  if (plan.batches.empty())
    throw InputError("make_batches: corpus yields no full batch of " +
                     std::to_string(batch_size) + " x " + std::to_string(seq_len) + " tokens");
  return plan;
}

}  // namespace dropforge

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace tlab {

// Word-level vocabulary. Ids 0..4 are the reserved tokens; content words
// follow, most frequent first (ties by word, ascending).
struct Vocab {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> id_of;

  int size() const { return static_cast<int>(words.size()); }
  int lookup(const std::string& w) const;  // unk id when absent

  static Vocab from_counts(
      const std::vector<std::pair<std::string, long long>>& counts, int cap);
};

// Documents hold content token ids only (no specials); with the word-level
// tokenizer every token is its own word, so word boundaries are implicit.
struct Corpus {
  Vocab vocab;
  std::vector<std::vector<int>> documents;
};

// Lowercased word-level split: runs of alphanumerics (and non-ASCII bytes)
// are words, every other non-space character is a single-token symbol.
std::vector<std::string> tokenize(const std::string& text);

// Blank-line separated blocks.
std::vector<std::string> split_documents(const std::string& text);

// Tokenizes, drops documents shorter than min_doc_len, caps the vocabulary
// at vocab_cap total ids (reserved included), and shuffles document order
// with the seed. Deterministic.
Corpus build_corpus(const std::string& text, int vocab_cap, int min_doc_len,
                    uint64_t seed);

// Sequences with a planted dependency structure, so that a masked token is
// recoverable from a specific relative offset:
//   copy-forward:  token i (i >= 4) is the successor symbol of token i-4
//   copy-backward: token i (i < len-4) is the successor symbol of token i+4
//   bracket-match: balanced nested brackets of three types, so each closer
//                  is fixed by its matching opener (variable distance)
Corpus synth_directional_corpus(const std::string& preset, int n_docs,
                                uint64_t seed);

// Model-ready windows: [cls] content [sep], zero or more [pad] at the tail
// of a document's last window. word_ids mirror ids with -1 on specials and
// the window-local word index on content.
struct PackedSequence {
  std::vector<int> ids;
  std::vector<int> word_ids;
};
std::vector<PackedSequence> pack_sequences(
    const std::vector<std::vector<int>>& documents, int max_len);

// Entropy (nats) of the content-token unigram distribution; the loss of the
// best context-free predictor, used as a training baseline.
double unigram_entropy(const std::vector<std::vector<int>>& documents,
                       int vocab_size);

}  // namespace tlab

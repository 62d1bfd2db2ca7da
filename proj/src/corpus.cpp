#include "tlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "tlab/error.hpp"
#include "tlab/rng.hpp"
#include "tlab/token_ids.hpp"

namespace tlab {

namespace {

constexpr const char* kReservedWords[kReservedIds] = {"[PAD]", "[MASK]",
                                                      "[UNK]", "[CLS]",
                                                      "[SEP]"};

bool is_word_byte(unsigned char c) {
  return std::isalnum(c) || c >= 0x80;  // keep UTF-8 multibyte runs together
}

}  // namespace

int Vocab::lookup(const std::string& w) const {
  auto it = id_of.find(w);
  return it == id_of.end() ? kUnkId : it->second;
}

Vocab Vocab::from_counts(
    const std::vector<std::pair<std::string, long long>>& counts, int cap) {
  if (cap < kReservedIds)
    throw ConfigError("vocab cap is below the reserved token count");
  auto ranked = counts;
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  for (const char* w : kReservedWords) v.words.emplace_back(w);
  for (const auto& [word, n] : ranked) {
    if (v.size() >= cap) break;
    v.words.push_back(word);
  }
  for (int i = 0; i < v.size(); ++i) v.id_of[v.words[i]] = i;
  return v;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
      continue;
    }
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
    if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<std::string> split_documents(const std::string& text) {
  std::vector<std::string> docs;
  std::string cur;
  bool blank_run = true;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    const bool blank =
        line.find_first_not_of(" \t\r") == std::string::npos;
    if (blank) {
      if (!blank_run && !cur.empty()) {
        docs.push_back(cur);
        cur.clear();
      }
      blank_run = true;
    } else {
      cur += line;
      cur += '\n';
      blank_run = false;
    }
    if (eol == text.size()) break;
    pos = eol + 1;
  }
  if (!cur.empty()) docs.push_back(cur);
  return docs;
}

Corpus build_corpus(const std::string& text, int vocab_cap, int min_doc_len,
                    uint64_t seed) {
  if (vocab_cap < kReservedIds)
    throw ConfigError("vocab cap is below the reserved token count");
  auto blocks = split_documents(text);
  std::vector<std::vector<std::string>> docs;
  for (const auto& block : blocks) {
    auto words = tokenize(block);
    if (static_cast<int>(words.size()) < min_doc_len) continue;
    docs.push_back(std::move(words));
  }
  if (docs.empty()) throw InputError("corpus source has no usable documents");

  std::map<std::string, long long> counts;
  for (const auto& d : docs)
    for (const auto& w : d) ++counts[w];
  Corpus corpus;
  corpus.vocab = Vocab::from_counts({counts.begin(), counts.end()}, vocab_cap);

  corpus.documents.reserve(docs.size());
  for (const auto& d : docs) {
    std::vector<int> ids;
    ids.reserve(d.size());
    for (const auto& w : d) ids.push_back(corpus.vocab.lookup(w));
    corpus.documents.push_back(std::move(ids));
  }

  Rng rng(seed);
  for (size_t i = 0; i + 1 < corpus.documents.size(); ++i) {
    const size_t j = i + rng.below(corpus.documents.size() - i);
    std::swap(corpus.documents[i], corpus.documents[j]);
  }
  return corpus;
}

Corpus synth_directional_corpus(const std::string& preset, int n_docs,
                                uint64_t seed) {
  if (n_docs < 1) throw ConfigError("synthetic corpus needs at least 1 document");
  constexpr int kAlphabet = 20;
  constexpr int kOffset = 4;
  Rng rng(seed);

  auto symbol = [](int s) { return "sym" + std::to_string(s); };
  std::vector<std::vector<std::string>> docs;
  docs.reserve(n_docs);

  if (preset == "copy-forward" || preset == "copy-backward") {
    const bool forward = preset == "copy-forward";
    for (int d = 0; d < n_docs; ++d) {
      const int len = 12 + static_cast<int>(rng.below(21));
      std::vector<int> syms(len);
      if (forward) {
        for (int i = 0; i < kOffset; ++i)
          syms[i] = static_cast<int>(rng.below(kAlphabet));
        for (int i = kOffset; i < len; ++i)
          syms[i] = (syms[i - kOffset] + 1) % kAlphabet;
      } else {
        for (int i = len - kOffset; i < len; ++i)
          syms[i] = static_cast<int>(rng.below(kAlphabet));
        for (int i = len - kOffset - 1; i >= 0; --i)
          syms[i] = (syms[i + kOffset] + 1) % kAlphabet;
      }
      std::vector<std::string> words;
      words.reserve(syms.size());
      for (int s : syms) words.push_back(symbol(s));
      docs.push_back(std::move(words));
    }
  } else if (preset == "bracket-match") {
    constexpr int kTypes = 3;
    for (int d = 0; d < n_docs; ++d) {
      const int pairs = 8 + static_cast<int>(rng.below(9));
      const int len = 2 * pairs;
      std::vector<std::string> words;
      std::vector<int> stack;
      int opened = 0;
      while (static_cast<int>(words.size()) < len) {
        const int remaining = len - static_cast<int>(words.size());
        const bool must_close =
            !stack.empty() && remaining == static_cast<int>(stack.size());
        const bool can_open = opened < pairs;
        if (!must_close && can_open && (stack.empty() || rng.uniform() < 0.5)) {
          const int type = static_cast<int>(rng.below(kTypes));
          stack.push_back(type);
          ++opened;
          words.push_back("open" + std::to_string(type));
        } else {
          words.push_back("close" + std::to_string(stack.back()));
          stack.pop_back();
        }
      }
      docs.push_back(std::move(words));
    }
  } else {
    throw ConfigError("unknown synthetic preset '" + preset +
                      "' (expected copy-forward, copy-backward, or "
                      "bracket-match)");
  }

  std::map<std::string, long long> counts;
  for (const auto& d : docs)
    for (const auto& w : d) ++counts[w];
  Corpus corpus;
  corpus.vocab = Vocab::from_counts({counts.begin(), counts.end()},
                                    kReservedIds + static_cast<int>(counts.size()));
  corpus.documents.reserve(docs.size());
  for (const auto& d : docs) {
    std::vector<int> ids;
    ids.reserve(d.size());
    for (const auto& w : d) ids.push_back(corpus.vocab.lookup(w));
    corpus.documents.push_back(std::move(ids));
  }
  return corpus;
}

std::vector<PackedSequence> pack_sequences(
    const std::vector<std::vector<int>>& documents, int max_len) {
  if (max_len < 4) throw ConfigError("sequence length must be at least 4");
  const int capacity = max_len - 2;  // room for [cls] and [sep]
  std::vector<PackedSequence> out;
  for (const auto& doc : documents) {
    for (size_t start = 0; start < doc.size(); start += capacity) {
      const int n =
          static_cast<int>(std::min<size_t>(capacity, doc.size() - start));
      PackedSequence seq;
      seq.ids.reserve(max_len);
      seq.word_ids.reserve(max_len);
      seq.ids.push_back(kClsId);
      seq.word_ids.push_back(-1);
      for (int k = 0; k < n; ++k) {
        seq.ids.push_back(doc[start + k]);
        seq.word_ids.push_back(k);
      }
      seq.ids.push_back(kSepId);
      seq.word_ids.push_back(-1);
      while (static_cast<int>(seq.ids.size()) < max_len) {
        seq.ids.push_back(kPadId);
        seq.word_ids.push_back(-1);
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

double unigram_entropy(const std::vector<std::vector<int>>& documents,
                       int vocab_size) {
  std::vector<long long> counts(vocab_size, 0);
  long long total = 0;
  for (const auto& doc : documents)
    for (int id : doc) {
      if (id < 0 || id >= vocab_size)
        throw InputError("token id outside the vocabulary");
      ++counts[id];
      ++total;
    }
  if (total == 0) throw InputError("no tokens to measure");
  double h = 0.0;
  for (long long c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace tlab

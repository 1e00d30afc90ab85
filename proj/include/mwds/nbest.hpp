#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace mwds {

// One second-pass rescoring candidate. Scores are costs: lower is better.
struct Hypothesis {
  std::string text;
  double first_pass_score = 0.0;
  std::optional<double> teacher_score;
  // Memo for edit_distance(reference tokens, hypothesis tokens).
  mutable std::optional<int> cached_edit_distance;
};

struct Utterance {
  std::string id;
  std::string reference;
  std::vector<Hypothesis> nbest;  // first-pass rank order
};

struct Corpus {
  std::vector<Utterance> utterances;
  std::string split;  // train / dev / test tag
};

inline constexpr int kDefaultNBestMax = 10;

// Reads a JSONL corpus (one utterance per line). Rejects unknown fields,
// malformed lines (reported with their 1-based line number), duplicate ids,
// empty files and n-best lists outside [1, n_max].
Corpus load_corpus(const std::string& path, int n_max = kDefaultNBestMax);

// Writes the canonical JSONL form: fields in schema order, LF endings.
// save_corpus(load_corpus(p)) is byte-identical to a canonically written p.
void save_corpus(const Corpus& corpus, const std::string& path);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumReserved = 4;

  static const std::array<const char*, kNumReserved>& reserved_tokens();

  Vocab();

  // Id for a token; [UNK] when absent. Reserved surface forms never map to
  // their control ids through this lookup.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }

  void add(const std::string& token);

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Whitespace tokens from references and hypotheses, ranked by frequency then
// lexicographic order, truncated to max_size - 4 plus the reserved tokens.
Vocab build_vocab(const Corpus& corpus, int max_size);

void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

struct TokenizerStats {
  int64_t truncated = 0;
};

inline constexpr int kDefaultMaxLen = 32;

// [CLS] + whitespace-split token ids; OOV maps to [UNK]. Sequences longer
// than max_len are hard-truncated and counted in stats.
std::vector<int> tokenize(const std::string& text, const Vocab& vocab,
                          int max_len = kDefaultMaxLen, TokenizerStats* stats = nullptr);

std::vector<std::string> split_tokens(const std::string& text);

}  // namespace mwds

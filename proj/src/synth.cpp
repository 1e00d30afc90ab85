#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwds/metrics.hpp"
#include "mwds/pipeline.hpp"
#include "mwds/rng.hpp"

namespace mwds {

namespace {

// Structured toy grammar: sentences are random walks over word classes with
// a sparse successor relation, and words within a class follow a skewed rank
// distribution. Grammaticality therefore lives in token bigrams (which class
// may follow which) while token frequency carries a weaker unigram signal;
// corruptions below break both.
struct ToyGrammar {
  static constexpr int kClasses = 10;
  // Each class allows exactly three successor classes; the relation is
  // doubly stochastic, so class marginals stay flat at every position.
  static constexpr int kOffsets[3] = {1, 2, 5};

  std::vector<std::vector<std::string>> class_words;
  std::vector<std::string> all_words;
  std::vector<double> rank_cdf;

  explicit ToyGrammar(int vocab_words) {
    if (vocab_words < 2 * kClasses) {
      throw std::invalid_argument("synth: vocab_words must be >= " + std::to_string(2 * kClasses));
    }
    class_words.resize(kClasses);
    for (int c = 0; c < kClasses; ++c) {
      const int count = vocab_words / kClasses + (c < vocab_words % kClasses ? 1 : 0);
      for (int k = 0; k < count; ++k) {
        std::string word = "c" + std::to_string(c) + "w" + std::to_string(k);
        class_words[static_cast<size_t>(c)].push_back(word);
        all_words.push_back(std::move(word));
      }
    }
    // Zipf-like rank weights 1/(k+2) over the largest class size.
    size_t max_size = 0;
    for (const auto& words : class_words) max_size = std::max(max_size, words.size());
    rank_cdf.resize(max_size);
    double total = 0.0;
    for (size_t k = 0; k < max_size; ++k) total += 1.0 / static_cast<double>(k + 2);
    double acc = 0.0;
    for (size_t k = 0; k < max_size; ++k) {
      acc += 1.0 / static_cast<double>(k + 2) / total;
      rank_cdf[k] = acc;
    }
  }

  const std::string& draw_from_class(int c, Rng& rng) const {
    const auto& words = class_words[static_cast<size_t>(c)];
    const double u = rng.uniform() * rank_cdf[words.size() - 1];
    size_t k = 0;
    while (k + 1 < words.size() && u > rank_cdf[k]) ++k;
    return words[k];
  }

  const std::string& draw_uniform(Rng& rng) const {
    return all_words[static_cast<size_t>(rng.uniform_int(static_cast<int>(all_words.size())))];
  }

  std::vector<std::string> sentence(Rng& rng, int len_min, int len_max) const {
    const int len = len_min + rng.uniform_int(len_max - len_min + 1);
    std::vector<std::string> out;
    out.reserve(static_cast<size_t>(len));
    int c = rng.uniform_int(kClasses);
    for (int i = 0; i < len; ++i) {
      out.push_back(draw_from_class(c, rng));
      c = (c + kOffsets[rng.uniform_int(3)]) % kClasses;
    }
    return out;
  }
};

constexpr int ToyGrammar::kOffsets[3];

std::vector<std::string> corrupt(const std::vector<std::string>& reference,
                                 const ToyGrammar& grammar, double rate, Rng& rng) {
  std::vector<std::string> out;
  for (const std::string& token : reference) {
    if (rng.uniform() >= rate) {
      out.push_back(token);
      continue;
    }
    const double kind = rng.uniform();
    if (kind < 0.6) {  // substitution from the full vocabulary
      out.push_back(grammar.draw_uniform(rng));
    } else if (kind < 0.8) {  // deletion
      continue;
    } else {  // insertion after the kept token
      out.push_back(token);
      out.push_back(grammar.draw_uniform(rng));
    }
  }
  if (out.empty()) out.push_back(reference.front());
  return out;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Corpus generate_split(const SynthConfig& cfg, const ToyGrammar& grammar, const std::string& split,
                      int count, uint64_t stream) {
  Rng rng(mix_seed(static_cast<uint64_t>(cfg.seed), stream));
  Corpus corpus;
  corpus.split = split;
  for (int i = 0; i < count; ++i) {
    Utterance utt;
    utt.id = split + "-" + std::to_string(i);
    const std::vector<std::string> ref = grammar.sentence(rng, cfg.len_min, cfg.len_max);
    utt.reference = join(ref);
    struct Draft {
      std::string text;
      double score;
      int order;
    };
    std::vector<Draft> drafts;
    for (int j = 0; j < cfg.nbest_size; ++j) {
      const std::vector<std::string> hyp = corrupt(ref, grammar, cfg.corruption_rate, rng);
      const int edits = edit_distance(ref, hyp);
      const double noise = cfg.score_noise > 0.0 ? rng.normal(0.0, cfg.score_noise) : 0.0;
      Draft draft;
      draft.text = join(hyp);
      draft.score = kFpEditScale * edits + noise + kFpLenPenalty * static_cast<double>(hyp.size());
      draft.order = j;
      drafts.push_back(std::move(draft));
    }
    // First-pass rank order; generation order breaks exact score ties.
    std::stable_sort(drafts.begin(), drafts.end(),
                     [](const Draft& a, const Draft& b) { return a.score < b.score; });
    for (const Draft& draft : drafts) {
      Hypothesis hyp;
      hyp.text = draft.text;
      hyp.first_pass_score = draft.score;
      utt.nbest.push_back(std::move(hyp));
    }
    corpus.utterances.push_back(std::move(utt));
  }
  return corpus;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_train < 1 || n_dev < 1 || n_test < 1) {
    throw std::invalid_argument("synth: split sizes must be positive");
  }
  if (vocab_words < 20) throw std::invalid_argument("synth: vocab_words must be >= 20");
  if (len_min < 1 || len_max < len_min) throw std::invalid_argument("synth: bad length range");
  if (nbest_size < 2) {
    throw std::invalid_argument("synth: nbest_size must be >= 2 for MWER-trainable data");
  }
  if (corruption_rate < 0.0 || corruption_rate >= 1.0) {
    throw std::invalid_argument("synth: corruption_rate must be in [0, 1)");
  }
  if (score_noise < 0.0) throw std::invalid_argument("synth: score_noise must be >= 0");
}

SynthCorpora generate_synthetic_corpora(const SynthConfig& cfg) {
  cfg.validate();
  const ToyGrammar grammar(cfg.vocab_words);
  SynthCorpora out;
  out.train = generate_split(cfg, grammar, "train", cfg.n_train, 0);
  out.dev = generate_split(cfg, grammar, "dev", cfg.n_dev, 1);
  out.test = generate_split(cfg, grammar, "test", cfg.n_test, 2);
  return out;
}

SynthPaths generate_synthetic(const SynthConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const SynthCorpora corpora = generate_synthetic_corpora(cfg);
  SynthPaths paths;
  paths.train = (fs::path(out_dir) / "train.jsonl").string();
  paths.dev = (fs::path(out_dir) / "dev.jsonl").string();
  paths.test = (fs::path(out_dir) / "test.jsonl").string();
  paths.vocab = (fs::path(out_dir) / "vocab.txt").string();
  save_corpus(corpora.train, paths.train);
  save_corpus(corpora.dev, paths.dev);
  save_corpus(corpora.test, paths.test);
  save_vocab(build_vocab(corpora.train, cfg.vocab_words + Vocab::kNumReserved), paths.vocab);
  return paths;
}

}  // namespace mwds

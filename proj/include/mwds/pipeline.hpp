#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mwds/losses.hpp"
#include "mwds/metrics.hpp"
#include "mwds/nbest.hpp"
#include "mwds/scorer.hpp"

namespace mwds {

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

struct SynthConfig {
  int n_train = 2000;
  int n_dev = 200;
  int n_test = 200;
  int vocab_words = 200;
  int len_min = 4;
  int len_max = 12;
  int nbest_size = 10;
  double corruption_rate = 0.2;
  double score_noise = 0.05;
  int64_t seed = 1;

  void validate() const;
};

// First-pass score composition for synthetic hypotheses:
// fp = kFpEditScale * E + N(0, score_noise) + kFpLenPenalty * |tokens|.
inline constexpr double kFpEditScale = 0.05;
inline constexpr double kFpLenPenalty = 0.001;

struct SynthPaths {
  std::string train, dev, test, vocab;
};

// Writes train/dev/test.jsonl plus vocab.txt under out_dir; deterministic in
// cfg.seed.
SynthPaths generate_synthetic(const SynthConfig& cfg, const std::string& out_dir);

// In-memory variant used by tests.
struct SynthCorpora {
  Corpus train, dev, test;
};
SynthCorpora generate_synthetic_corpora(const SynthConfig& cfg);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Stage { kAdapt, kPllDistill, kMwer, kDistill };
enum class InitFrom { kScratch, kAdapted, kMwerTrained };

Stage stage_from_string(const std::string& name);
std::string stage_to_string(Stage stage);
InitFrom init_from_string(const std::string& name);
std::string init_from_to_string(InitFrom init);

struct TrainConfig {
  Stage stage = Stage::kMwer;
  InitFrom init_from = InitFrom::kScratch;
  std::string init_checkpoint;  // required for kAdapted / kMwerTrained
  LossSpec loss;
  int batch_size = 16;
  double lr0 = 1e-4;
  double lr_decay = 0.9;
  int max_epochs = 10;
  int patience = 3;
  double w1 = 20.0;
  double w2 = 1.0;
  int64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  std::optional<double> dev_wer;
  double lr = 0.0;
};

std::string epoch_log_to_json(const EpochLog& log);

template <typename S>
struct TrainResult {
  ScorerModel<S> best_model;
  std::vector<EpochLog> log;
  double best_metric = 0.0;
  int best_epoch = 0;
};

// Runs one training stage; returns the best-dev checkpoint. ADAPT and
// PLL_DISTILL select on dev loss, MWER and DISTILL on dev WER at the
// training interpolation weights. Aborts with diagnostics on NaN loss.
template <typename S>
TrainResult<S> train(const TrainConfig& cfg, const ScorerModel<S>& init, const Corpus& train_set,
                     const Corpus& dev_set, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Teacher score caching and distillation
// ---------------------------------------------------------------------------

// Fills Hypothesis::teacher_score with the teacher's CLS cost (one forward
// per hypothesis).
template <typename S>
void cache_teacher_scores(const ScorerModel<S>& teacher, Corpus& corpus, const Vocab& vocab,
                          int workers);

// Fills Hypothesis::teacher_score with the teacher's PLL (stage-two target).
template <typename S>
void cache_teacher_plls(const ScorerModel<S>& teacher, Corpus& corpus, const Vocab& vocab,
                        int workers);

// Trains a student with the given distillation spec. Teacher scores must
// already be cached in the corpora (or a teacher model given to do it here).
template <typename S>
TrainResult<S> distill(const TrainConfig& cfg, const ScorerModel<S>* teacher,
                       const ScorerModel<S>& student_init, Corpus& train_set, Corpus& dev_set,
                       const Vocab& vocab);

// ---------------------------------------------------------------------------
// Rescoring and evaluation
// ---------------------------------------------------------------------------

// Second-pass cost of every hypothesis, utterance-parallel and order-stable.
template <typename S>
std::vector<std::vector<double>> second_pass_scores(const ScorerModel<S>& model,
                                                    const Corpus& corpus, const Vocab& vocab,
                                                    int workers);

// argmin_j w1 * fp_j + w2 * sp_j per utterance, ties to the lowest index.
std::vector<int> select_hypotheses(const Corpus& corpus,
                                   const std::vector<std::vector<double>>& second_pass,
                                   double w1, double w2);

// First-pass selections (w2 = 0).
std::vector<int> first_pass_selections(const Corpus& corpus);

template <typename S>
struct RescoreResult {
  std::vector<int> selections;
  std::vector<std::vector<double>> second_pass;
};

template <typename S>
RescoreResult<S> rescore(const ScorerModel<S>& model, const Corpus& corpus, const Vocab& vocab,
                         double w1, double w2, int workers);

inline const std::vector<double>& w2_grid() {
  static const std::vector<double> grid = {0,   0.01, 0.02, 0.05, 0.1, 0.2, 0.5,
                                           1.0, 2.0,  5.0,  10.0, 20.0, 50.0};
  return grid;
}

// Fixes w1 = 1 and grid-searches w2 for minimum dev WER (ties to smaller w2).
template <typename S>
std::pair<double, double> tune_interpolation(const ScorerModel<S>& model, const Corpus& dev_set,
                                             const Vocab& vocab, int workers);

// Grid search over precomputed second-pass scores.
std::pair<double, double> tune_interpolation_scores(
    const Corpus& dev_set, const std::vector<std::vector<double>>& second_pass,
    const std::vector<double>& grid = w2_grid());

struct SystemSelections {
  std::string name;
  std::string role;  // "teacher", "baseline", "distilled" or empty
  std::vector<int> selections;
};

struct SystemRow {
  std::string name;
  std::string role;
  double wer = 0.0;
  double oracle_wer = 0.0;
  std::optional<double> werr_vs_first_pass;
  std::optional<double> werr_vs_baseline;
  std::optional<double> gap_closure_pct;
  std::optional<double> p_value_vs_baseline;
};

// Per-system WER and WERR vs the first pass; systems with the baseline /
// teacher / distilled roles additionally get WERR vs baseline, gap closure
// and the matched-pairs p-value against the baseline.
std::vector<SystemRow> evaluate_systems(const Corpus& corpus,
                                        const std::vector<SystemSelections>& systems);

std::string render_system_table(const std::vector<SystemRow>& rows);
std::string system_rows_to_json(const std::vector<SystemRow>& rows);

}  // namespace mwds

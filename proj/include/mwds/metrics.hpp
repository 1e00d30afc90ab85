#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mwds/nbest.hpp"

namespace mwds {

struct EvalReport {
  int64_t total_ref_tokens = 0;
  int64_t total_edits = 0;
  double wer = 0.0;  // percent
  std::optional<double> werr_vs_baseline;
  double oracle_wer = 0.0;
  std::optional<double> gap_closure_pct;
  std::optional<double> p_value;
};

std::string eval_report_to_json(const EvalReport& report);

// Levenshtein distance with unit substitution/insertion/deletion costs.
int edit_distance(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

// Edit distance between an utterance's reference and one of its hypotheses,
// memoized in Hypothesis::cached_edit_distance.
int hypothesis_edit_distance(const Utterance& utt, size_t hyp_index);

// All per-hypothesis edit distances of an utterance, memoized.
std::vector<int> utterance_edit_distances(const Utterance& utt);

// Index of the minimum edit distance hypothesis; ties break to the lowest
// index (first-pass rank).
int oracle_index(const Utterance& utt);

// Micro-averaged WER over the corpus for the given per-utterance selections.
EvalReport corpus_wer(const Corpus& corpus, const std::vector<int>& selections);

// 100 * (system - baseline) / baseline; negative means improvement.
double werr(double baseline_wer, double system_wer);

// 100 * (baseline - student) / (baseline - teacher); requires a positive gap.
double gap_closure(double teacher_wer, double baseline_wer, double student_wer);

// Two-sided matched-pairs test on per-utterance error differences using the
// normal approximation; returns the p-value.
double matched_pairs_test(const std::vector<int>& errors_a, const std::vector<int>& errors_b);

}  // namespace mwds

#include "mwds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace mwds {

std::string eval_report_to_json(const EvalReport& report) {
  nlohmann::ordered_json obj;
  obj["total_ref_tokens"] = report.total_ref_tokens;
  obj["total_edits"] = report.total_edits;
  obj["wer"] = report.wer;
  obj["werr_vs_baseline"] =
      report.werr_vs_baseline ? nlohmann::ordered_json(*report.werr_vs_baseline) : nullptr;
  obj["oracle_wer"] = report.oracle_wer;
  obj["gap_closure_pct"] =
      report.gap_closure_pct ? nlohmann::ordered_json(*report.gap_closure_pct) : nullptr;
  obj["p_value"] = report.p_value ? nlohmann::ordered_json(*report.p_value) : nullptr;
  return obj.dump();
}

int edit_distance(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const size_t n = ref.size(), m = hyp.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      if (ref[i - 1] == hyp[j - 1]) {
        cur[j] = prev[j - 1];
      } else {
        cur[j] = 1 + std::min({prev[j - 1], prev[j], cur[j - 1]});
      }
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

int hypothesis_edit_distance(const Utterance& utt, size_t hyp_index) {
  const Hypothesis& hyp = utt.nbest.at(hyp_index);
  if (!hyp.cached_edit_distance) {
    hyp.cached_edit_distance =
        edit_distance(split_tokens(utt.reference), split_tokens(hyp.text));
  }
  return *hyp.cached_edit_distance;
}

std::vector<int> utterance_edit_distances(const Utterance& utt) {
  std::vector<int> out(utt.nbest.size());
  for (size_t j = 0; j < utt.nbest.size(); ++j) out[j] = hypothesis_edit_distance(utt, j);
  return out;
}

int oracle_index(const Utterance& utt) {
  if (utt.nbest.empty()) throw std::invalid_argument("oracle_index: empty n-best");
  int best = 0;
  int best_dist = hypothesis_edit_distance(utt, 0);
  for (size_t j = 1; j < utt.nbest.size(); ++j) {
    const int d = hypothesis_edit_distance(utt, j);
    if (d < best_dist) {
      best = static_cast<int>(j);
      best_dist = d;
    }
  }
  return best;
}

EvalReport corpus_wer(const Corpus& corpus, const std::vector<int>& selections) {
  if (corpus.utterances.empty()) throw std::invalid_argument("corpus_wer: empty corpus");
  if (selections.size() != corpus.utterances.size()) {
    throw std::invalid_argument("corpus_wer: " + std::to_string(selections.size()) +
                                " selections for " + std::to_string(corpus.utterances.size()) +
                                " utterances");
  }
  EvalReport report;
  int64_t oracle_edits = 0;
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    const Utterance& utt = corpus.utterances[i];
    const int sel = selections[i];
    if (sel < 0 || static_cast<size_t>(sel) >= utt.nbest.size()) {
      throw std::invalid_argument("corpus_wer: selection " + std::to_string(sel) +
                                  " out of range for utterance \"" + utt.id + "\"");
    }
    report.total_ref_tokens += static_cast<int64_t>(split_tokens(utt.reference).size());
    report.total_edits += hypothesis_edit_distance(utt, static_cast<size_t>(sel));
    oracle_edits += hypothesis_edit_distance(utt, static_cast<size_t>(oracle_index(utt)));
  }
  if (report.total_ref_tokens <= 0) {
    throw std::domain_error("corpus_wer: reference token count is zero");
  }
  report.wer = 100.0 * static_cast<double>(report.total_edits) /
               static_cast<double>(report.total_ref_tokens);
  report.oracle_wer =
      100.0 * static_cast<double>(oracle_edits) / static_cast<double>(report.total_ref_tokens);
  return report;
}

double werr(double baseline_wer, double system_wer) {
  if (baseline_wer <= 0.0) {
    throw std::domain_error("werr: baseline WER must be positive, got " +
                            std::to_string(baseline_wer));
  }
  return 100.0 * (system_wer - baseline_wer) / baseline_wer;
}

double gap_closure(double teacher_wer, double baseline_wer, double student_wer) {
  if (baseline_wer <= teacher_wer) {
    throw std::domain_error("gap_closure: teacher-baseline gap must be positive");
  }
  return 100.0 * (baseline_wer - student_wer) / (baseline_wer - teacher_wer);
}

double matched_pairs_test(const std::vector<int>& errors_a, const std::vector<int>& errors_b) {
  if (errors_a.size() != errors_b.size()) {
    throw std::invalid_argument("matched_pairs_test: length mismatch " +
                                std::to_string(errors_a.size()) + " vs " +
                                std::to_string(errors_b.size()));
  }
  const size_t n = errors_a.size();
  if (n < 2) throw std::invalid_argument("matched_pairs_test: need at least 2 pairs");

  double mean = 0.0;
  bool all_zero = true;
  for (size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(errors_a[i] - errors_b[i]);
    mean += d;
    all_zero = all_zero && d == 0.0;
  }
  if (all_zero) return 1.0;
  mean /= static_cast<double>(n);

  double ss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(errors_a[i] - errors_b[i]) - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) return 0.0;  // unanimous nonzero differences
  const double z = mean * std::sqrt(static_cast<double>(n)) / sd;
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

}  // namespace mwds

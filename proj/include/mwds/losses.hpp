#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mwds/rng.hpp"
#include "mwds/tensor.hpp"

namespace mwds {

// First- and second-pass costs of one n-best list plus interpolation weights;
// the effective hypothesis cost is w1 * first_pass + w2 * second_pass.
template <typename S>
struct NBestScores {
  std::vector<S> first_pass;
  std::vector<S> second_pass;
  std::vector<int> edit_distances;
  S w1 = S(20);
  S w2 = S(1);

  size_t size() const { return second_pass.size(); }
  void validate(bool need_edits) const;
  std::vector<S> interpolated() const;
};

enum class LossKind {
  kMlm,
  kPllDistill,
  kMwer,
  kPostCe,
  kPostOracle,
  kNMse,
  kMse,
  kCombo,
};

LossKind loss_kind_from_string(const std::string& name);
std::string loss_kind_to_string(LossKind kind);

struct LossSpec {
  LossKind kind = LossKind::kMwer;
  double temperature = 1.0;
  double alpha = 1.0;
  // Combo components in evaluation order; weights must be non-negative with
  // at least one positive.
  std::vector<std::pair<LossKind, double>> combo;

  void validate() const;
};

// Combo string syntax: "kind:weight,kind:weight" where weight is a number or
// the literal "beta" / "gamma".
std::vector<std::pair<LossKind, double>> parse_combo(const std::string& text, double beta,
                                                     double gamma);

// p_j = exp(-s_j / T) / sum_k exp(-s_k / T), min-subtraction stabilized;
// lower cost means higher probability.
template <typename S>
std::vector<S> nbest_posterior(const std::vector<S>& scores, S temperature);

// --------------------------------------------------------------------------
// Differentiable builders. `student_sp` is a [1 x n] node of student
// second-pass costs; teacher quantities enter as gradient-blocked constants.
// --------------------------------------------------------------------------

// w1 * first_pass + w2 * student_sp as a [1 x n] node.
template <typename S>
int interpolate_node(Tape<S>& tape, int student_sp, const std::vector<S>& first_pass, S w1, S w2);

template <typename S>
int posterior_node(Tape<S>& tape, int scores, S temperature);

template <typename S>
int log_posterior_node(Tape<S>& tape, int scores, S temperature);

// Expected excess edit distance sum_j (E_j - mean(E)) p_j at temperature 1.
template <typename S>
int mwer_loss_node(Tape<S>& tape, int interp_scores, const std::vector<int>& edit_distances);

// Cross-entropy from the teacher posterior (at T) to the student posterior.
template <typename S>
int posterior_ce_node(Tape<S>& tape, int student_interp, const std::vector<S>& teacher_interp,
                      S temperature);

// posterior_ce plus alpha * CE(OneHot(oracle), student posterior at T = 1).
template <typename S>
int oracle_corrected_node(Tape<S>& tape, int student_interp,
                          const std::vector<S>& teacher_interp, S temperature, S alpha,
                          const std::vector<int>& edit_distances);

// (1/n) sum_j (t_j - s_j)^2 between two interpolated score vectors.
template <typename S>
int nbest_mse_node(Tape<S>& tape, int student_interp, const std::vector<S>& teacher_interp);

// (1/N) sum_i (t_i - s_i)^2 on second-pass-only scores.
template <typename S>
int mse_node(Tape<S>& tape, int student_hat, const std::vector<S>& teacher_hat);

// (student_cls - teacher_pll)^2 for one item.
template <typename S>
int pll_distill_node(Tape<S>& tape, int student_cls, S teacher_pll);

// Mean cross-entropy over masked positions of one logits matrix.
template <typename S>
int mlm_loss_node(Tape<S>& tape, int logits, const std::vector<int>& positions,
                  const std::vector<int>& labels);

template <typename S>
struct ComboInputs {
  int student_sp = -1;  // [1 x n] student second-pass node
  std::vector<S> first_pass;
  std::vector<S> teacher_sp;  // second-pass teacher costs; empty when unused
  std::vector<int> edit_distances;
  S w1 = S(20);
  S w2 = S(1);
};

// Weighted sum of component losses sharing one interpolated student forward.
template <typename S>
int combined_loss_node(Tape<S>& tape, const LossSpec& spec, const ComboInputs<S>& inputs);

// --------------------------------------------------------------------------
// Value-level wrappers (teacher-side math and tests).
// --------------------------------------------------------------------------

template <typename S>
S mwer_loss_value(const NBestScores<S>& ns);

template <typename S>
S posterior_ce_value(const NBestScores<S>& student, const NBestScores<S>& teacher, S temperature);

template <typename S>
S oracle_corrected_value(const NBestScores<S>& student, const NBestScores<S>& teacher,
                         S temperature, S alpha);

template <typename S>
S nbest_mse_value(const NBestScores<S>& teacher, const NBestScores<S>& student);

template <typename S>
S mse_value(const std::vector<S>& teacher_hat, const std::vector<S>& student_hat);

template <typename S>
S pll_distill_value(S student_cls, S teacher_pll);

// --------------------------------------------------------------------------
// MLM masking policy: 15% of non-CLS positions, split 80% [MASK] / 10%
// random token / 10% unchanged; at least one position is always selected.
// --------------------------------------------------------------------------

struct MaskedItem {
  std::vector<int> masked_ids;
  std::vector<int> positions;  // masked positions, ascending
  std::vector<int> labels;     // original token at each masked position
};

MaskedItem apply_mlm_mask(const std::vector<int>& ids, int vocab_size, Rng& rng);

// --------------------------------------------------------------------------
// Finite-difference audit of every training objective, 64-bit engine.
// --------------------------------------------------------------------------

struct GradSuiteEntry {
  std::string name;
  double max_rel_err = 0.0;
};

// Central-difference checks (epsilon 1e-5) of all losses on `instances`
// random n=8 instances each: MWER, posterior CE (T=2), oracle-corrected
// (alpha=1), n-best MSE, MSE, MLM, PLL regression and the four reference
// loss combinations (beta=0.01, gamma=0.5).
std::vector<GradSuiteEntry> run_loss_grad_suite(int instances, uint64_t seed);

}  // namespace mwds

#include "mwds/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mwds/nbest.hpp"

namespace mwds {

template <typename S>
void NBestScores<S>::validate(bool need_edits) const {
  if (second_pass.empty()) throw std::invalid_argument("n-best scores: empty list");
  if (first_pass.size() != second_pass.size()) {
    throw std::invalid_argument("n-best scores: first/second pass length mismatch");
  }
  if (need_edits && edit_distances.size() != second_pass.size()) {
    throw std::invalid_argument("n-best scores: edit distances missing or mismatched");
  }
}

template <typename S>
std::vector<S> NBestScores<S>::interpolated() const {
  std::vector<S> out(second_pass.size());
  for (size_t j = 0; j < out.size(); ++j) {
    out[j] = w1 * first_pass[j] + w2 * second_pass[j];
  }
  return out;
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "mlm") return LossKind::kMlm;
  if (name == "pll_distill") return LossKind::kPllDistill;
  if (name == "mwer") return LossKind::kMwer;
  if (name == "post_ce") return LossKind::kPostCe;
  if (name == "post_oracle") return LossKind::kPostOracle;
  if (name == "nmse") return LossKind::kNMse;
  if (name == "mse") return LossKind::kMse;
  if (name == "combo") return LossKind::kCombo;
  throw std::invalid_argument("unknown loss \"" + name + "\"");
}

std::string loss_kind_to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kMlm: return "mlm";
    case LossKind::kPllDistill: return "pll_distill";
    case LossKind::kMwer: return "mwer";
    case LossKind::kPostCe: return "post_ce";
    case LossKind::kPostOracle: return "post_oracle";
    case LossKind::kNMse: return "nmse";
    case LossKind::kMse: return "mse";
    case LossKind::kCombo: return "combo";
  }
  return "?";
}

void LossSpec::validate() const {
  if (temperature <= 0.0) throw std::invalid_argument("loss: temperature must be positive");
  if (kind == LossKind::kCombo) {
    if (combo.empty()) throw std::invalid_argument("loss: combo has no components");
    bool any_positive = false;
    for (const auto& [component, weight] : combo) {
      if (component == LossKind::kCombo || component == LossKind::kMlm ||
          component == LossKind::kPllDistill || component == LossKind::kMse) {
        throw std::invalid_argument("loss: combo cannot contain " +
                                    loss_kind_to_string(component));
      }
      if (weight < 0.0) throw std::invalid_argument("loss: combo weights must be non-negative");
      any_positive = any_positive || weight > 0.0;
    }
    if (!any_positive) throw std::invalid_argument("loss: combo needs a positive weight");
  }
}

std::vector<std::pair<LossKind, double>> parse_combo(const std::string& text, double beta,
                                                     double gamma) {
  std::vector<std::pair<LossKind, double>> out;
  std::istringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const size_t colon = part.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("combo component \"" + part + "\" is not kind:weight");
    }
    const std::string kind = part.substr(0, colon);
    const std::string weight = part.substr(colon + 1);
    double w = 0.0;
    if (weight == "beta") {
      w = beta;
    } else if (weight == "gamma") {
      w = gamma;
    } else {
      try {
        size_t used = 0;
        w = std::stod(weight, &used);
        if (used != weight.size()) throw std::invalid_argument(weight);
      } catch (const std::exception&) {
        throw std::invalid_argument("combo weight \"" + weight + "\" is not a number");
      }
    }
    out.emplace_back(loss_kind_from_string(kind), w);
  }
  if (out.empty()) throw std::invalid_argument("combo \"" + text + "\" has no components");
  return out;
}

template <typename S>
std::vector<S> nbest_posterior(const std::vector<S>& scores, S temperature) {
  if (scores.empty()) throw std::invalid_argument("nbest_posterior: empty scores");
  if (temperature <= S(0)) throw std::invalid_argument("nbest_posterior: T must be positive");
  const S lo = *std::min_element(scores.begin(), scores.end());
  std::vector<S> out(scores.size());
  S denom = S(0);
  for (size_t j = 0; j < scores.size(); ++j) {
    out[j] = std::exp(-(scores[j] - lo) / temperature);
    denom += out[j];
  }
  for (S& p : out) p /= denom;
  return out;
}

template <typename S>
int interpolate_node(Tape<S>& tape, int student_sp, const std::vector<S>& first_pass, S w1,
                     S w2) {
  const int n = tape.value(student_sp).cols();
  if (static_cast<size_t>(n) != first_pass.size()) {
    throw std::invalid_argument("interpolate: first-pass length " +
                                std::to_string(first_pass.size()) + " vs n-best " +
                                std::to_string(n));
  }
  std::vector<S> fp(first_pass.size());
  for (size_t j = 0; j < first_pass.size(); ++j) fp[j] = w1 * first_pass[j];
  return tape.add(tape.scale(student_sp, w2), tape.constant_row(std::move(fp)));
}

template <typename S>
int posterior_node(Tape<S>& tape, int scores, S temperature) {
  if (temperature <= S(0)) throw std::invalid_argument("posterior: T must be positive");
  return tape.softmax_rows(tape.scale(scores, S(-1) / temperature));
}

template <typename S>
int log_posterior_node(Tape<S>& tape, int scores, S temperature) {
  if (temperature <= S(0)) throw std::invalid_argument("posterior: T must be positive");
  return tape.log_softmax_rows(tape.scale(scores, S(-1) / temperature));
}

template <typename S>
int mwer_loss_node(Tape<S>& tape, int interp_scores, const std::vector<int>& edit_distances) {
  const int n = tape.value(interp_scores).cols();
  if (static_cast<size_t>(n) != edit_distances.size()) {
    throw std::invalid_argument("mwer: edit distance count " +
                                std::to_string(edit_distances.size()) + " vs n-best " +
                                std::to_string(n));
  }
  S mean_edit = S(0);
  for (int e : edit_distances) mean_edit += static_cast<S>(e);
  mean_edit /= static_cast<S>(n);
  std::vector<S> centered(edit_distances.size());
  for (size_t j = 0; j < centered.size(); ++j) {
    centered[j] = static_cast<S>(edit_distances[j]) - mean_edit;
  }
  const int posterior = posterior_node(tape, interp_scores, S(1));
  return tape.sum(tape.mul(posterior, tape.constant_row(std::move(centered))));
}

template <typename S>
int posterior_ce_node(Tape<S>& tape, int student_interp, const std::vector<S>& teacher_interp,
                      S temperature) {
  const int n = tape.value(student_interp).cols();
  if (static_cast<size_t>(n) != teacher_interp.size()) {
    throw std::invalid_argument("posterior_ce: teacher scores length " +
                                std::to_string(teacher_interp.size()) + " vs n-best " +
                                std::to_string(n));
  }
  const std::vector<S> q = nbest_posterior(teacher_interp, temperature);
  const int log_p = log_posterior_node(tape, student_interp, temperature);
  return tape.scale(tape.sum(tape.mul(tape.constant_row(q), log_p)), S(-1));
}

template <typename S>
int oracle_corrected_node(Tape<S>& tape, int student_interp,
                          const std::vector<S>& teacher_interp, S temperature, S alpha,
                          const std::vector<int>& edit_distances) {
  if (edit_distances.empty() ||
      edit_distances.size() != static_cast<size_t>(tape.value(student_interp).cols())) {
    throw std::invalid_argument("oracle correction: edit distances missing or mismatched");
  }
  const int ce = posterior_ce_node(tape, student_interp, teacher_interp, temperature);
  int oracle = 0;
  for (size_t j = 1; j < edit_distances.size(); ++j) {
    if (edit_distances[j] < edit_distances[static_cast<size_t>(oracle)]) {
      oracle = static_cast<int>(j);
    }
  }
  // Eq-literal correction: the student posterior is taken at temperature 1.
  const int log_p1 = log_posterior_node(tape, student_interp, S(1));
  const int picked = tape.gather_elems(log_p1, {0, oracle});
  return tape.add(ce, tape.scale(tape.sum(picked), -alpha));
}

template <typename S>
int nbest_mse_node(Tape<S>& tape, int student_interp, const std::vector<S>& teacher_interp) {
  const int n = tape.value(student_interp).cols();
  if (static_cast<size_t>(n) != teacher_interp.size()) {
    throw std::invalid_argument("nbest_mse: teacher scores length " +
                                std::to_string(teacher_interp.size()) + " vs n-best " +
                                std::to_string(n));
  }
  const int diff = tape.sub(tape.constant_row(teacher_interp), student_interp);
  return tape.mean(tape.mul(diff, diff));
}

template <typename S>
int mse_node(Tape<S>& tape, int student_hat, const std::vector<S>& teacher_hat) {
  return nbest_mse_node(tape, student_hat, teacher_hat);
}

template <typename S>
int pll_distill_node(Tape<S>& tape, int student_cls, S teacher_pll) {
  if (!std::isfinite(static_cast<double>(teacher_pll))) {
    throw std::invalid_argument("pll_distill: teacher PLL must be finite");
  }
  const int diff = tape.sub(student_cls, tape.constant_scalar(teacher_pll));
  return tape.mul(diff, diff);
}

template <typename S>
int mlm_loss_node(Tape<S>& tape, int logits, const std::vector<int>& positions,
                  const std::vector<int>& labels) {
  if (positions.empty()) throw std::invalid_argument("mlm loss: no masked positions");
  if (positions.size() != labels.size()) {
    throw std::invalid_argument("mlm loss: positions/labels length mismatch");
  }
  const int rows = tape.take_rows(logits, positions);
  const int log_probs = tape.log_softmax_rows(rows);
  std::vector<int> pairs;
  pairs.reserve(labels.size() * 2);
  for (size_t i = 0; i < labels.size(); ++i) {
    pairs.push_back(static_cast<int>(i));
    pairs.push_back(labels[i]);
  }
  return tape.scale(tape.mean(tape.gather_elems(log_probs, pairs)), S(-1));
}

template <typename S>
int combined_loss_node(Tape<S>& tape, const LossSpec& spec, const ComboInputs<S>& inputs) {
  LossSpec effective = spec;
  if (effective.kind != LossKind::kCombo) {
    effective.combo = {{spec.kind, 1.0}};
    effective.kind = LossKind::kCombo;
  }
  effective.validate();

  const int student_interp =
      interpolate_node(tape, inputs.student_sp, inputs.first_pass, inputs.w1, inputs.w2);
  std::vector<S> teacher_interp;
  if (!inputs.teacher_sp.empty()) {
    if (inputs.teacher_sp.size() != inputs.first_pass.size()) {
      throw std::invalid_argument("combined loss: teacher score length mismatch");
    }
    teacher_interp.resize(inputs.teacher_sp.size());
    for (size_t j = 0; j < teacher_interp.size(); ++j) {
      teacher_interp[j] = inputs.w1 * inputs.first_pass[j] + inputs.w2 * inputs.teacher_sp[j];
    }
  }

  int total = -1;
  for (const auto& [component, weight] : effective.combo) {
    int term = -1;
    switch (component) {
      case LossKind::kMwer:
        if (inputs.edit_distances.empty()) {
          throw std::invalid_argument("combined loss: MWER requested without edit distances");
        }
        term = mwer_loss_node(tape, student_interp, inputs.edit_distances);
        break;
      case LossKind::kPostCe:
        if (teacher_interp.empty()) {
          throw std::invalid_argument("combined loss: post_ce requested without teacher scores");
        }
        term = posterior_ce_node(tape, student_interp, teacher_interp,
                                 static_cast<S>(effective.temperature));
        break;
      case LossKind::kPostOracle:
        if (teacher_interp.empty()) {
          throw std::invalid_argument(
              "combined loss: post_oracle requested without teacher scores");
        }
        term = oracle_corrected_node(tape, student_interp, teacher_interp,
                                     static_cast<S>(effective.temperature),
                                     static_cast<S>(effective.alpha), inputs.edit_distances);
        break;
      case LossKind::kNMse:
        if (teacher_interp.empty()) {
          throw std::invalid_argument("combined loss: nmse requested without teacher scores");
        }
        term = nbest_mse_node(tape, student_interp, teacher_interp);
        break;
      default:
        throw std::invalid_argument("combined loss: unsupported component " +
                                    loss_kind_to_string(component));
    }
    const int weighted = tape.scale(term, static_cast<S>(weight));
    total = total < 0 ? weighted : tape.add(total, weighted);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

template <typename S>
S mwer_loss_value(const NBestScores<S>& ns) {
  ns.validate(true);
  Tape<S> tape;
  const int sp = tape.constant_row(ns.second_pass);
  const int interp = interpolate_node(tape, sp, ns.first_pass, ns.w1, ns.w2);
  return tape.scalar_value(mwer_loss_node(tape, interp, ns.edit_distances));
}

template <typename S>
S posterior_ce_value(const NBestScores<S>& student, const NBestScores<S>& teacher,
                     S temperature) {
  student.validate(false);
  teacher.validate(false);
  Tape<S> tape;
  const int sp = tape.constant_row(student.second_pass);
  const int interp = interpolate_node(tape, sp, student.first_pass, student.w1, student.w2);
  return tape.scalar_value(posterior_ce_node(tape, interp, teacher.interpolated(), temperature));
}

template <typename S>
S oracle_corrected_value(const NBestScores<S>& student, const NBestScores<S>& teacher,
                         S temperature, S alpha) {
  student.validate(true);
  teacher.validate(false);
  Tape<S> tape;
  const int sp = tape.constant_row(student.second_pass);
  const int interp = interpolate_node(tape, sp, student.first_pass, student.w1, student.w2);
  return tape.scalar_value(oracle_corrected_node(tape, interp, teacher.interpolated(),
                                                 temperature, alpha, student.edit_distances));
}

template <typename S>
S nbest_mse_value(const NBestScores<S>& teacher, const NBestScores<S>& student) {
  teacher.validate(false);
  student.validate(false);
  Tape<S> tape;
  const int sp = tape.constant_row(student.second_pass);
  const int interp = interpolate_node(tape, sp, student.first_pass, student.w1, student.w2);
  return tape.scalar_value(nbest_mse_node(tape, interp, teacher.interpolated()));
}

template <typename S>
S mse_value(const std::vector<S>& teacher_hat, const std::vector<S>& student_hat) {
  if (teacher_hat.empty() || teacher_hat.size() != student_hat.size()) {
    throw std::invalid_argument("mse: vectors must be non-empty and equal length");
  }
  Tape<S> tape;
  return tape.scalar_value(mse_node(tape, tape.constant_row(student_hat), teacher_hat));
}

template <typename S>
S pll_distill_value(S student_cls, S teacher_pll) {
  Tape<S> tape;
  return tape.scalar_value(pll_distill_node(tape, tape.constant_scalar(student_cls), teacher_pll));
}

MaskedItem apply_mlm_mask(const std::vector<int>& ids, int vocab_size, Rng& rng) {
  if (ids.size() < 2) throw std::invalid_argument("mlm mask: need at least one non-CLS token");
  MaskedItem item;
  item.masked_ids = ids;
  for (size_t pos = 1; pos < ids.size(); ++pos) {
    if (rng.uniform() >= 0.15) continue;
    item.positions.push_back(static_cast<int>(pos));
  }
  if (item.positions.empty()) {
    item.positions.push_back(1 + rng.uniform_int(static_cast<int>(ids.size()) - 1));
  }
  for (int pos : item.positions) {
    const size_t p = static_cast<size_t>(pos);
    item.labels.push_back(ids[p]);
    const double roll = rng.uniform();
    if (roll < 0.8) {
      item.masked_ids[p] = Vocab::kMask;
    } else if (roll < 0.9) {
      item.masked_ids[p] =
          Vocab::kNumReserved + rng.uniform_int(vocab_size - Vocab::kNumReserved);
    }  // else keep the original token
  }
  return item;
}

std::vector<GradSuiteEntry> run_loss_grad_suite(int instances, uint64_t seed) {
  Rng rng(seed);
  constexpr int kN = 8;
  constexpr double kEps = 1e-5;
  const double beta = 0.01, gamma = 0.5;

  struct Case {
    std::string name;
    std::function<int(Tape<double>&, int, const NBestScores<double>&, const NBestScores<double>&)>
        build;
  };
  const auto combo_builder = [](std::vector<std::pair<LossKind, double>> combo) {
    return [combo = std::move(combo)](Tape<double>& t, int sp, const NBestScores<double>& student,
                                      const NBestScores<double>& teacher) {
      LossSpec spec;
      spec.kind = LossKind::kCombo;
      spec.temperature = 2.0;
      spec.alpha = 1.0;
      spec.combo = combo;
      ComboInputs<double> inputs;
      inputs.student_sp = sp;
      inputs.first_pass = student.first_pass;
      inputs.teacher_sp = teacher.second_pass;
      inputs.edit_distances = student.edit_distances;
      inputs.w1 = student.w1;
      inputs.w2 = student.w2;
      return combined_loss_node(t, spec, inputs);
    };
  };
  const std::vector<Case> cases = {
      {"mwer",
       [](Tape<double>& t, int sp, const NBestScores<double>& s, const NBestScores<double>&) {
         return mwer_loss_node(t, interpolate_node(t, sp, s.first_pass, s.w1, s.w2),
                               s.edit_distances);
       }},
      {"post_ce(T=2)",
       [](Tape<double>& t, int sp, const NBestScores<double>& s, const NBestScores<double>& te) {
         return posterior_ce_node(t, interpolate_node(t, sp, s.first_pass, s.w1, s.w2),
                                  te.interpolated(), 2.0);
       }},
      {"post_oracle(T=2,a=1)",
       [](Tape<double>& t, int sp, const NBestScores<double>& s, const NBestScores<double>& te) {
         return oracle_corrected_node(t, interpolate_node(t, sp, s.first_pass, s.w1, s.w2),
                                      te.interpolated(), 2.0, 1.0, s.edit_distances);
       }},
      {"nmse",
       [](Tape<double>& t, int sp, const NBestScores<double>& s, const NBestScores<double>& te) {
         return nbest_mse_node(t, interpolate_node(t, sp, s.first_pass, s.w1, s.w2),
                               te.interpolated());
       }},
      {"mse",
       [](Tape<double>& t, int sp, const NBestScores<double>&, const NBestScores<double>& te) {
         return mse_node(t, sp, te.second_pass);
       }},
      {"b*nmse+mwer", combo_builder({{LossKind::kNMse, beta}, {LossKind::kMwer, 1.0}})},
      {"post_ce+b*nmse", combo_builder({{LossKind::kPostCe, 1.0}, {LossKind::kNMse, beta}})},
      {"post_ce+b*mwer", combo_builder({{LossKind::kPostCe, 1.0}, {LossKind::kMwer, beta}})},
      {"g*post_ce+b*nmse+g*mwer", combo_builder({{LossKind::kPostCe, gamma},
                                                 {LossKind::kNMse, beta},
                                                 {LossKind::kMwer, gamma}})},
  };

  std::vector<GradSuiteEntry> results;
  for (const Case& c : cases) {
    GradSuiteEntry entry{c.name, 0.0};
    for (int k = 0; k < instances; ++k) {
      NBestScores<double> student, teacher;
      student.w1 = teacher.w1 = 20.0;
      student.w2 = teacher.w2 = 1.0;
      for (int j = 0; j < kN; ++j) {
        const double fp = rng.uniform() * 0.4 - 0.2;
        student.first_pass.push_back(fp);
        teacher.first_pass.push_back(fp);
        student.second_pass.push_back(rng.uniform() * 4.0 - 2.0);
        teacher.second_pass.push_back(rng.uniform() * 4.0 - 2.0);
        student.edit_distances.push_back(rng.uniform_int(5));
      }
      teacher.edit_distances = student.edit_distances;
      Tensor<double> sp = Tensor<double>::row(student.second_pass);
      sp.requires_grad = true;
      const double err = grad_check<double>(
          sp,
          [&](Tape<double>& t, int id) { return c.build(t, id, student, teacher); }, kEps);
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    results.push_back(entry);
  }

  // MLM: gradients through a random logits matrix at 8 token positions.
  {
    GradSuiteEntry entry{"mlm", 0.0};
    constexpr int kVocab = 16;
    for (int k = 0; k < instances; ++k) {
      Tensor<double> logits({kN, kVocab});
      for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.uniform() * 4.0 - 2.0;
      logits.requires_grad = true;
      std::vector<int> positions, labels;
      for (int j = 0; j < kN; ++j) {
        if (rng.uniform() < 0.4) {
          positions.push_back(j);
          labels.push_back(rng.uniform_int(kVocab));
        }
      }
      if (positions.empty()) {
        positions.push_back(rng.uniform_int(kN));
        labels.push_back(rng.uniform_int(kVocab));
      }
      const double err = grad_check<double>(
          logits,
          [&](Tape<double>& t, int id) { return mlm_loss_node(t, id, positions, labels); }, kEps);
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    results.push_back(entry);
  }

  // PLL regression: gradient through the CLS scalar.
  {
    GradSuiteEntry entry{"pll_distill", 0.0};
    for (int k = 0; k < instances; ++k) {
      Tensor<double> cls = Tensor<double>::scalar(rng.uniform() * 4.0 - 2.0);
      cls.requires_grad = true;
      const double target = rng.uniform() * 20.0;
      const double err = grad_check<double>(
          cls,
          [&](Tape<double>& t, int id) { return pll_distill_node(t, id, target); }, kEps);
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    results.push_back(entry);
  }
  return results;
}

template struct NBestScores<float>;
template struct NBestScores<double>;

#define MWDS_INSTANTIATE_LOSSES(S)                                                             \
  template std::vector<S> nbest_posterior(const std::vector<S>&, S);                           \
  template int interpolate_node(Tape<S>&, int, const std::vector<S>&, S, S);                   \
  template int posterior_node(Tape<S>&, int, S);                                               \
  template int log_posterior_node(Tape<S>&, int, S);                                           \
  template int mwer_loss_node(Tape<S>&, int, const std::vector<int>&);                         \
  template int posterior_ce_node(Tape<S>&, int, const std::vector<S>&, S);                     \
  template int oracle_corrected_node(Tape<S>&, int, const std::vector<S>&, S, S,               \
                                     const std::vector<int>&);                                 \
  template int nbest_mse_node(Tape<S>&, int, const std::vector<S>&);                           \
  template int mse_node(Tape<S>&, int, const std::vector<S>&);                                 \
  template int pll_distill_node(Tape<S>&, int, S);                                             \
  template int mlm_loss_node(Tape<S>&, int, const std::vector<int>&, const std::vector<int>&); \
  template int combined_loss_node(Tape<S>&, const LossSpec&, const ComboInputs<S>&);           \
  template S mwer_loss_value(const NBestScores<S>&);                                           \
  template S posterior_ce_value(const NBestScores<S>&, const NBestScores<S>&, S);              \
  template S oracle_corrected_value(const NBestScores<S>&, const NBestScores<S>&, S, S);       \
  template S nbest_mse_value(const NBestScores<S>&, const NBestScores<S>&);                    \
  template S mse_value(const std::vector<S>&, const std::vector<S>&);                          \
  template S pll_distill_value(S, S);

MWDS_INSTANTIATE_LOSSES(float)
MWDS_INSTANTIATE_LOSSES(double)

#undef MWDS_INSTANTIATE_LOSSES

}  // namespace mwds

#include "mwds/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "mwds/rng.hpp"

namespace mwds {

namespace {

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  const auto pull = [&] {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n) break;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int extra = std::min(workers, n) - 1;
  pool.reserve(static_cast<size_t>(extra));
  for (int w = 0; w < extra; ++w) pool.emplace_back(pull);
  pull();
  for (auto& t : pool) t.join();
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
  }
}

// One gradient unit: the loss contribution of one item (utterance, sentence
// or hypothesis) plus gradients of its loss *sum* w.r.t. every parameter.
template <typename S>
struct JobOut {
  double loss_sum = 0.0;
  double weight = 1.0;
  std::vector<Tensor<S>> grads;  // aligned with model.params(); buffers shared with the tape
};

template <typename S>
class Adam {
 public:
  explicit Adam(ScorerModel<S>& model) {
    for (Tensor<S>* p : model.params()) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void step(ScorerModel<S>& model, const std::vector<Tensor<S>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    auto params = model.params();
    for (size_t k = 0; k < params.size(); ++k) {
      Tensor<S>& p = *params[k];
      const Tensor<S>& g = grads[k];
      Tensor<S>& m = m_[k];
      Tensor<S>& v = v_[k];
      const int64_t n = p.numel();
      for (int64_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = kBeta1 * static_cast<double>(m[i]) + (1.0 - kBeta1) * gi;
        const double vi = kBeta2 * static_cast<double>(v[i]) + (1.0 - kBeta2) * gi * gi;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        p[i] = static_cast<S>(static_cast<double>(p[i]) -
                              lr * mhat / (std::sqrt(vhat) + kEps));
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<Tensor<S>> m_, v_;
  int64_t t_ = 0;
};

// Tokenized views of a corpus used by training and scoring.
struct TokenizedCorpus {
  std::vector<std::vector<int>> reference_ids;          // per utterance
  std::vector<std::vector<std::vector<int>>> hyp_ids;   // per utterance, per hypothesis
};

TokenizedCorpus tokenize_corpus(const Corpus& corpus, const Vocab& vocab, int max_len) {
  TokenizedCorpus out;
  out.reference_ids.reserve(corpus.utterances.size());
  out.hyp_ids.reserve(corpus.utterances.size());
  for (const Utterance& utt : corpus.utterances) {
    out.reference_ids.push_back(tokenize(utt.reference, vocab, max_len));
    std::vector<std::vector<int>> hyps;
    hyps.reserve(utt.nbest.size());
    for (const Hypothesis& hyp : utt.nbest) {
      hyps.push_back(tokenize(hyp.text, vocab, max_len));
    }
    out.hyp_ids.push_back(std::move(hyps));
  }
  return out;
}

template <typename S>
std::vector<S> teacher_scores_of(const Utterance& utt, const char* stage_name) {
  std::vector<S> out;
  out.reserve(utt.nbest.size());
  for (const Hypothesis& hyp : utt.nbest) {
    if (!hyp.teacher_score) {
      throw std::invalid_argument(std::string(stage_name) + ": utterance \"" + utt.id +
                                  "\" misses cached teacher scores");
    }
    out.push_back(static_cast<S>(*hyp.teacher_score));
  }
  return out;
}

// Loss graph of one n-best utterance; scores every hypothesis on the tape.
template <typename S>
int utterance_loss_node(Tape<S>& tape, const BoundScorer<S>& bound, const Utterance& utt,
                        const std::vector<std::vector<int>>& hyp_ids, const LossSpec& spec,
                        double w1, double w2, bool need_teacher) {
  std::vector<int> score_nodes;
  score_nodes.reserve(hyp_ids.size());
  for (const auto& ids : hyp_ids) score_nodes.push_back(bound.score(ids));
  ComboInputs<S> inputs;
  inputs.student_sp = tape.stack_scalars(score_nodes);
  inputs.w1 = static_cast<S>(w1);
  inputs.w2 = static_cast<S>(w2);
  for (const Hypothesis& hyp : utt.nbest) {
    inputs.first_pass.push_back(static_cast<S>(hyp.first_pass_score));
  }
  const bool need_edits =
      spec.kind == LossKind::kMwer || spec.kind == LossKind::kPostOracle ||
      spec.kind == LossKind::kCombo;
  if (need_edits) inputs.edit_distances = utterance_edit_distances(utt);
  if (need_teacher) inputs.teacher_sp = teacher_scores_of<S>(utt, "distillation");
  return combined_loss_node(tape, spec, inputs);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

Stage stage_from_string(const std::string& name) {
  if (name == "adapt") return Stage::kAdapt;
  if (name == "pll_distill") return Stage::kPllDistill;
  if (name == "mwer") return Stage::kMwer;
  if (name == "distill") return Stage::kDistill;
  throw std::invalid_argument("unknown stage \"" + name + "\"");
}

std::string stage_to_string(Stage stage) {
  switch (stage) {
    case Stage::kAdapt: return "adapt";
    case Stage::kPllDistill: return "pll_distill";
    case Stage::kMwer: return "mwer";
    case Stage::kDistill: return "distill";
  }
  return "?";
}

InitFrom init_from_string(const std::string& name) {
  if (name == "scratch") return InitFrom::kScratch;
  if (name == "adapted") return InitFrom::kAdapted;
  if (name == "mwer_trained") return InitFrom::kMwerTrained;
  throw std::invalid_argument("unknown init_from \"" + name + "\"");
}

std::string init_from_to_string(InitFrom init) {
  switch (init) {
    case InitFrom::kScratch: return "scratch";
    case InitFrom::kAdapted: return "adapted";
    case InitFrom::kMwerTrained: return "mwer_trained";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
  if (lr0 < 0.0) throw std::invalid_argument("train: lr0 must be non-negative");
  if (lr_decay <= 0.0 || lr_decay > 1.0) throw std::invalid_argument("train: lr_decay in (0,1]");
  if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be positive");
  if (patience < 1 || patience > max_epochs) {
    throw std::invalid_argument("train: need 1 <= patience <= max_epochs");
  }
  if (workers < 1) throw std::invalid_argument("train: workers must be positive");
  loss.validate();
  if (stage == Stage::kDistill) {
    const LossKind k = loss.kind;
    if (k != LossKind::kPostCe && k != LossKind::kPostOracle && k != LossKind::kNMse &&
        k != LossKind::kMse && k != LossKind::kCombo) {
      throw std::invalid_argument("distill: loss must be post_ce, post_oracle, nmse, mse or combo");
    }
  }
}

std::string epoch_log_to_json(const EpochLog& log) {
  nlohmann::ordered_json obj;
  obj["epoch"] = log.epoch;
  obj["train_loss"] = log.train_loss;
  obj["dev_loss"] = log.dev_loss;
  obj["dev_wer"] = log.dev_wer ? nlohmann::ordered_json(*log.dev_wer) : nullptr;
  obj["lr"] = log.lr;
  return obj.dump();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

// Work items of one epoch, already deterministic (masks pre-drawn on the
// main thread) so that parallel execution cannot change results.
struct EpochItems {
  // n-best stages: utterance indices; regression stages: (utterance, hyp);
  // adapt: masked references.
  std::vector<int> utterances;
  std::vector<std::pair<int, int>> hyp_refs;
  std::vector<MaskedItem> masked;
  size_t size(Stage stage) const {
    switch (stage) {
      case Stage::kAdapt: return masked.size();
      case Stage::kPllDistill: return hyp_refs.size();
      case Stage::kMwer: return utterances.size();
      case Stage::kDistill: return hyp_refs.empty() ? utterances.size() : hyp_refs.size();
    }
    return 0;
  }
};

template <typename S>
JobOut<S> run_item(const ScorerModel<S>& model, const Corpus& corpus,
                   const TokenizedCorpus& tokens, const TrainConfig& cfg,
                   const EpochItems& items, Stage stage, int item) {
  Tape<S> tape;
  BoundScorer<S> bound(tape, model, true);
  JobOut<S> out;
  int loss_node = -1;
  switch (stage) {
    case Stage::kAdapt: {
      const MaskedItem& masked = items.masked[static_cast<size_t>(item)];
      const int logits = bound.mlm_logits(masked.masked_ids);
      const int mean_ce = mlm_loss_node(tape, logits, masked.positions, masked.labels);
      out.weight = static_cast<double>(masked.positions.size());
      loss_node = tape.scale(mean_ce, static_cast<S>(out.weight));
      break;
    }
    case Stage::kPllDistill: {
      const auto [u, h] = items.hyp_refs[static_cast<size_t>(item)];
      const Hypothesis& hyp = corpus.utterances[static_cast<size_t>(u)].nbest[static_cast<size_t>(h)];
      if (!hyp.teacher_score) {
        throw std::invalid_argument("pll_distill: missing teacher PLL for utterance \"" +
                                    corpus.utterances[static_cast<size_t>(u)].id + "\"");
      }
      const int score = bound.score(tokens.hyp_ids[static_cast<size_t>(u)][static_cast<size_t>(h)]);
      loss_node = pll_distill_node(tape, score, static_cast<S>(*hyp.teacher_score));
      break;
    }
    case Stage::kMwer:
    case Stage::kDistill: {
      if (!items.hyp_refs.empty()) {  // MSE: independently sampled hypotheses
        const auto [u, h] = items.hyp_refs[static_cast<size_t>(item)];
        const Utterance& utt = corpus.utterances[static_cast<size_t>(u)];
        const std::vector<S> teacher = teacher_scores_of<S>(utt, "mse distillation");
        const int score =
            bound.score(tokens.hyp_ids[static_cast<size_t>(u)][static_cast<size_t>(h)]);
        loss_node = mse_node(tape, tape.stack_scalars({score}),
                             {teacher[static_cast<size_t>(h)]});
        break;
      }
      const int u = items.utterances[static_cast<size_t>(item)];
      const Utterance& utt = corpus.utterances[static_cast<size_t>(u)];
      const LossSpec spec = stage == Stage::kMwer ? LossSpec{LossKind::kMwer, 1.0, 1.0, {}}
                                                  : cfg.loss;
      loss_node = utterance_loss_node(tape, bound, utt, tokens.hyp_ids[static_cast<size_t>(u)],
                                      spec, cfg.w1, cfg.w2, stage == Stage::kDistill);
      break;
    }
  }
  out.loss_sum = static_cast<double>(tape.scalar_value(loss_node));
  tape.backward(loss_node);
  out.grads.reserve(bound.param_nodes().size());
  for (int node : bound.param_nodes()) out.grads.push_back(tape.grad(node));
  return out;
}

template <typename S>
double dev_metric_loss(const ScorerModel<S>& model, const Corpus& dev, const TokenizedCorpus& tokens,
                       const TrainConfig& cfg, const std::vector<MaskedItem>& dev_masks) {
  // Mean dev loss mirroring the stage objective; gradient-free forwards.
  std::vector<double> sums;
  std::vector<double> weights;
  const Stage stage = cfg.stage;
  if (stage == Stage::kAdapt) {
    const int n = static_cast<int>(dev_masks.size());
    sums.assign(static_cast<size_t>(n), 0.0);
    weights.assign(static_cast<size_t>(n), 0.0);
    parallel_for(n, cfg.workers, [&](int i) {
      Tape<S> tape;
      BoundScorer<S> bound(tape, model, false);
      const MaskedItem& m = dev_masks[static_cast<size_t>(i)];
      const int loss = mlm_loss_node(tape, bound.mlm_logits(m.masked_ids), m.positions, m.labels);
      sums[static_cast<size_t>(i)] =
          static_cast<double>(tape.scalar_value(loss)) * static_cast<double>(m.positions.size());
      weights[static_cast<size_t>(i)] = static_cast<double>(m.positions.size());
    });
  } else if (stage == Stage::kPllDistill ||
             (stage == Stage::kDistill && cfg.loss.kind == LossKind::kMse)) {
    std::vector<std::pair<int, int>> refs;
    for (size_t u = 0; u < dev.utterances.size(); ++u) {
      for (size_t h = 0; h < dev.utterances[u].nbest.size(); ++h) {
        refs.emplace_back(static_cast<int>(u), static_cast<int>(h));
      }
    }
    const int n = static_cast<int>(refs.size());
    sums.assign(static_cast<size_t>(n), 0.0);
    weights.assign(static_cast<size_t>(n), 1.0);
    parallel_for(n, cfg.workers, [&](int i) {
      const auto [u, h] = refs[static_cast<size_t>(i)];
      const Hypothesis& hyp = dev.utterances[static_cast<size_t>(u)].nbest[static_cast<size_t>(h)];
      if (!hyp.teacher_score) {
        throw std::invalid_argument("dev loss: missing teacher score for \"" +
                                    dev.utterances[static_cast<size_t>(u)].id + "\"");
      }
      const S s = score_value(model, tokens.hyp_ids[static_cast<size_t>(u)][static_cast<size_t>(h)]);
      const double d = static_cast<double>(s) - *hyp.teacher_score;
      sums[static_cast<size_t>(i)] = d * d;
    });
  } else {
    const int n = static_cast<int>(dev.utterances.size());
    sums.assign(static_cast<size_t>(n), 0.0);
    weights.assign(static_cast<size_t>(n), 1.0);
    parallel_for(n, cfg.workers, [&](int i) {
      Tape<S> tape;
      BoundScorer<S> bound(tape, model, false);
      const Utterance& utt = dev.utterances[static_cast<size_t>(i)];
      const LossSpec spec = stage == Stage::kMwer ? LossSpec{LossKind::kMwer, 1.0, 1.0, {}}
                                                  : cfg.loss;
      const int loss = utterance_loss_node(tape, bound, utt, tokens.hyp_ids[static_cast<size_t>(i)],
                                           spec, cfg.w1, cfg.w2, stage == Stage::kDistill);
      sums[static_cast<size_t>(i)] = static_cast<double>(tape.scalar_value(loss));
    });
  }
  double sum = 0.0, weight = 0.0;
  for (size_t i = 0; i < sums.size(); ++i) {
    sum += sums[i];
    weight += weights[i];
  }
  return weight > 0.0 ? sum / weight : 0.0;
}

}  // namespace

template <typename S>
TrainResult<S> train(const TrainConfig& cfg, const ScorerModel<S>& init, const Corpus& train_set,
                     const Corpus& dev_set, const Vocab& vocab) {
  cfg.validate();
  if (train_set.utterances.empty() || dev_set.utterances.empty()) {
    throw std::invalid_argument("train: empty corpus");
  }
  if (init.cfg.vocab_size != vocab.size()) {
    throw std::invalid_argument("train: model vocab size " + std::to_string(init.cfg.vocab_size) +
                                " does not match vocab " + std::to_string(vocab.size()));
  }

  ScorerModel<S> model = init.clone();
  Adam<S> adam(model);
  const TokenizedCorpus train_tokens = tokenize_corpus(train_set, vocab, init.cfg.max_len);
  const TokenizedCorpus dev_tokens = tokenize_corpus(dev_set, vocab, init.cfg.max_len);
  const Stage stage = cfg.stage;
  const bool select_on_wer = stage == Stage::kMwer || stage == Stage::kDistill;

  // Fixed dev masking so that ADAPT epochs are comparable.
  std::vector<MaskedItem> dev_masks;
  if (stage == Stage::kAdapt) {
    Rng mask_rng(mix_seed(static_cast<uint64_t>(cfg.seed), 999));
    for (const auto& ids : dev_tokens.reference_ids) {
      dev_masks.push_back(apply_mlm_mask(ids, vocab.size(), mask_rng));
    }
  }

  TrainResult<S> result;
  result.best_model = model.clone();
  result.best_metric = std::numeric_limits<double>::infinity();
  result.best_epoch = 0;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(epoch - 1));
    Rng epoch_rng(mix_seed(static_cast<uint64_t>(cfg.seed), static_cast<uint64_t>(epoch)));

    // Assemble this epoch's items in deterministic order.
    EpochItems items;
    if (stage == Stage::kAdapt) {
      std::vector<int> order(train_set.utterances.size());
      std::iota(order.begin(), order.end(), 0);
      shuffle_indices(order, epoch_rng);
      for (int u : order) {
        items.masked.push_back(apply_mlm_mask(train_tokens.reference_ids[static_cast<size_t>(u)],
                                              vocab.size(), epoch_rng));
      }
    } else if (stage == Stage::kPllDistill ||
               (stage == Stage::kDistill && cfg.loss.kind == LossKind::kMse)) {
      for (size_t u = 0; u < train_set.utterances.size(); ++u) {
        for (size_t h = 0; h < train_set.utterances[u].nbest.size(); ++h) {
          items.hyp_refs.emplace_back(static_cast<int>(u), static_cast<int>(h));
        }
      }
      std::vector<int> order(items.hyp_refs.size());
      std::iota(order.begin(), order.end(), 0);
      shuffle_indices(order, epoch_rng);
      std::vector<std::pair<int, int>> shuffled;
      shuffled.reserve(items.hyp_refs.size());
      for (int i : order) shuffled.push_back(items.hyp_refs[static_cast<size_t>(i)]);
      items.hyp_refs = std::move(shuffled);
    } else {
      items.utterances.resize(train_set.utterances.size());
      std::iota(items.utterances.begin(), items.utterances.end(), 0);
      shuffle_indices(items.utterances, epoch_rng);
    }

    const int total_items = static_cast<int>(items.size(stage));
    double epoch_loss_sum = 0.0;
    double epoch_weight = 0.0;
    int batch_index = 0;
    for (int start = 0; start < total_items; start += cfg.batch_size, ++batch_index) {
      const int count = std::min(cfg.batch_size, total_items - start);
      std::vector<JobOut<S>> slots(static_cast<size_t>(count));
      parallel_for(count, cfg.workers, [&](int i) {
        slots[static_cast<size_t>(i)] =
            run_item(model, train_set, train_tokens, cfg, items, stage, start + i);
      });

      // Order-preserving reduction keeps results identical for any worker
      // count.
      double batch_sum = 0.0, batch_weight = 0.0;
      for (const JobOut<S>& job : slots) {
        batch_sum += job.loss_sum;
        batch_weight += job.weight;
      }
      const double batch_loss = batch_sum / batch_weight;
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("training aborted: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                                 ", lr " + std::to_string(lr));
      }
      epoch_loss_sum += batch_sum;
      epoch_weight += batch_weight;

      auto params = model.params();
      std::vector<Tensor<S>> grads;
      grads.reserve(params.size());
      for (const Tensor<S>* p : params) grads.emplace_back(p->shape());
      const S inv_weight = static_cast<S>(1.0 / batch_weight);
      for (const JobOut<S>& job : slots) {
        for (size_t k = 0; k < grads.size(); ++k) {
          const Tensor<S>& g = job.grads[k];
          Tensor<S>& acc = grads[k];
          const int64_t n = acc.numel();
          for (int64_t i = 0; i < n; ++i) acc[i] += g[i] * inv_weight;
        }
      }
      adam.step(model, grads, lr);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_weight > 0.0 ? epoch_loss_sum / epoch_weight : 0.0;
    log.dev_loss = dev_metric_loss(model, dev_set, dev_tokens, cfg, dev_masks);
    if (select_on_wer) {
      // Deployment metric: dev WER at the tuned inference interpolation.
      const auto scores = second_pass_scores(model, dev_set, vocab, cfg.workers);
      const auto [w1, w2] = tune_interpolation_scores(dev_set, scores);
      log.dev_wer = corpus_wer(dev_set, select_hypotheses(dev_set, scores, w1, w2)).wer;
    }
    log.lr = lr;
    result.log.push_back(log);

    const double metric = select_on_wer ? *log.dev_wer : log.dev_loss;
    if (metric < result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      result.best_model = model.clone();
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= cfg.patience) break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Teacher caching and distillation
// ---------------------------------------------------------------------------

template <typename S>
void cache_teacher_scores(const ScorerModel<S>& teacher, Corpus& corpus, const Vocab& vocab,
                          int workers) {
  const int n = static_cast<int>(corpus.utterances.size());
  parallel_for(n, workers, [&](int i) {
    Utterance& utt = corpus.utterances[static_cast<size_t>(i)];
    for (Hypothesis& hyp : utt.nbest) {
      hyp.teacher_score = static_cast<double>(
          score_value(teacher, tokenize(hyp.text, vocab, teacher.cfg.max_len)));
    }
  });
}

template <typename S>
void cache_teacher_plls(const ScorerModel<S>& teacher, Corpus& corpus, const Vocab& vocab,
                        int workers) {
  const int n = static_cast<int>(corpus.utterances.size());
  parallel_for(n, workers, [&](int i) {
    Utterance& utt = corpus.utterances[static_cast<size_t>(i)];
    for (Hypothesis& hyp : utt.nbest) {
      const std::vector<int> ids = tokenize(hyp.text, vocab, teacher.cfg.max_len);
      // An empty sentence has no maskable position: its PLL sum is zero.
      hyp.teacher_score =
          ids.size() < 2 ? 0.0 : static_cast<double>(pll_value(teacher, ids));
    }
  });
}

template <typename S>
TrainResult<S> distill(const TrainConfig& cfg, const ScorerModel<S>* teacher,
                       const ScorerModel<S>& student_init, Corpus& train_set, Corpus& dev_set,
                       const Vocab& vocab) {
  TrainConfig tc = cfg;
  tc.stage = Stage::kDistill;
  tc.validate();
  const auto has_all_scores = [](const Corpus& corpus) {
    for (const Utterance& utt : corpus.utterances) {
      for (const Hypothesis& hyp : utt.nbest) {
        if (!hyp.teacher_score) return false;
      }
    }
    return true;
  };
  if (!has_all_scores(train_set) || !has_all_scores(dev_set)) {
    if (teacher == nullptr) {
      throw std::invalid_argument(
          "distill: teacher scores missing from the corpus and no teacher model given");
    }
    cache_teacher_scores(*teacher, train_set, vocab, cfg.workers);
    cache_teacher_scores(*teacher, dev_set, vocab, cfg.workers);
  }
  return train(tc, student_init, train_set, dev_set, vocab);
}

// ---------------------------------------------------------------------------
// Rescoring and evaluation
// ---------------------------------------------------------------------------

template <typename S>
std::vector<std::vector<double>> second_pass_scores(const ScorerModel<S>& model,
                                                    const Corpus& corpus, const Vocab& vocab,
                                                    int workers) {
  const int n = static_cast<int>(corpus.utterances.size());
  std::vector<std::vector<double>> out(static_cast<size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const Utterance& utt = corpus.utterances[static_cast<size_t>(i)];
    std::vector<double>& row = out[static_cast<size_t>(i)];
    row.reserve(utt.nbest.size());
    for (const Hypothesis& hyp : utt.nbest) {
      row.push_back(static_cast<double>(
          score_value(model, tokenize(hyp.text, vocab, model.cfg.max_len))));
    }
  });
  return out;
}

std::vector<int> select_hypotheses(const Corpus& corpus,
                                   const std::vector<std::vector<double>>& second_pass,
                                   double w1, double w2) {
  if (second_pass.size() != corpus.utterances.size()) {
    throw std::invalid_argument("select: score rows do not match the corpus");
  }
  std::vector<int> selections(corpus.utterances.size(), 0);
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    const Utterance& utt = corpus.utterances[i];
    if (second_pass[i].size() != utt.nbest.size()) {
      throw std::invalid_argument("select: score row size mismatch at utterance \"" + utt.id +
                                  "\"");
    }
    int best = 0;
    double best_score = 0.0;
    for (size_t j = 0; j < utt.nbest.size(); ++j) {
      const double s = w1 * utt.nbest[j].first_pass_score + w2 * second_pass[i][j];
      if (j == 0 || s < best_score) {
        best = static_cast<int>(j);
        best_score = s;
      }
    }
    selections[i] = best;
  }
  return selections;
}

std::vector<int> first_pass_selections(const Corpus& corpus) {
  std::vector<int> selections(corpus.utterances.size(), 0);
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    const Utterance& utt = corpus.utterances[i];
    int best = 0;
    for (size_t j = 1; j < utt.nbest.size(); ++j) {
      if (utt.nbest[j].first_pass_score < utt.nbest[static_cast<size_t>(best)].first_pass_score) {
        best = static_cast<int>(j);
      }
    }
    selections[i] = best;
  }
  return selections;
}

template <typename S>
RescoreResult<S> rescore(const ScorerModel<S>& model, const Corpus& corpus, const Vocab& vocab,
                         double w1, double w2, int workers) {
  RescoreResult<S> result;
  result.second_pass = second_pass_scores(model, corpus, vocab, workers);
  result.selections = select_hypotheses(corpus, result.second_pass, w1, w2);
  return result;
}

std::pair<double, double> tune_interpolation_scores(
    const Corpus& dev_set, const std::vector<std::vector<double>>& second_pass,
    const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("tune: empty w2 grid");
  double best_w2 = grid.front();
  double best_wer = std::numeric_limits<double>::infinity();
  for (double w2 : grid) {
    const double wer = corpus_wer(dev_set, select_hypotheses(dev_set, second_pass, 1.0, w2)).wer;
    if (wer < best_wer) {
      best_wer = wer;
      best_w2 = w2;
    }
  }
  return {1.0, best_w2};
}

template <typename S>
std::pair<double, double> tune_interpolation(const ScorerModel<S>& model, const Corpus& dev_set,
                                             const Vocab& vocab, int workers) {
  if (dev_set.utterances.empty()) throw std::invalid_argument("tune: empty dev corpus");
  return tune_interpolation_scores(dev_set, second_pass_scores(model, dev_set, vocab, workers));
}

std::vector<SystemRow> evaluate_systems(const Corpus& corpus,
                                        const std::vector<SystemSelections>& systems) {
  const std::vector<int> fp = first_pass_selections(corpus);
  const EvalReport fp_report = corpus_wer(corpus, fp);

  const auto per_utterance_errors = [&](const std::vector<int>& selections) {
    std::vector<int> errors(corpus.utterances.size());
    for (size_t i = 0; i < corpus.utterances.size(); ++i) {
      errors[i] = hypothesis_edit_distance(corpus.utterances[i],
                                           static_cast<size_t>(selections[i]));
    }
    return errors;
  };

  const SystemSelections* baseline = nullptr;
  const SystemSelections* teacher = nullptr;
  for (const SystemSelections& system : systems) {
    if (system.role == "baseline") baseline = &system;
    if (system.role == "teacher") teacher = &system;
  }
  std::optional<double> baseline_wer, teacher_wer;
  if (baseline) baseline_wer = corpus_wer(corpus, baseline->selections).wer;
  if (teacher) teacher_wer = corpus_wer(corpus, teacher->selections).wer;

  std::vector<SystemRow> rows;
  SystemRow fp_row;
  fp_row.name = "first_pass";
  fp_row.wer = fp_report.wer;
  fp_row.oracle_wer = fp_report.oracle_wer;
  rows.push_back(fp_row);

  for (const SystemSelections& system : systems) {
    const EvalReport report = corpus_wer(corpus, system.selections);
    SystemRow row;
    row.name = system.name;
    row.role = system.role;
    row.wer = report.wer;
    row.oracle_wer = report.oracle_wer;
    if (fp_report.wer > 0.0) row.werr_vs_first_pass = werr(fp_report.wer, report.wer);
    if (baseline_wer && *baseline_wer > 0.0 && system.role != "baseline") {
      row.werr_vs_baseline = werr(*baseline_wer, report.wer);
    }
    if (system.role == "distilled" && baseline_wer && teacher_wer &&
        *baseline_wer > *teacher_wer) {
      row.gap_closure_pct = gap_closure(*teacher_wer, *baseline_wer, report.wer);
    }
    if (baseline && system.role != "baseline") {
      row.p_value_vs_baseline = matched_pairs_test(per_utterance_errors(system.selections),
                                                   per_utterance_errors(baseline->selections));
    }
    rows.push_back(row);
  }
  return rows;
}

std::string render_system_table(const std::vector<SystemRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(26) << "system" << std::right << std::setw(8) << "WER"
     << std::setw(10) << "oracle" << std::setw(12) << "WERR(fp)" << std::setw(12) << "WERR(base)"
     << std::setw(12) << "closure" << std::setw(12) << "p-value" << "\n";
  const auto cell = [](const std::optional<double>& v, int precision = 2) {
    if (!v) return std::string("-");
    std::ostringstream c;
    c << std::fixed << std::setprecision(precision) << std::showpos << *v;
    return c.str();
  };
  for (const SystemRow& row : rows) {
    os << std::left << std::setw(26) << row.name << std::right << std::fixed
       << std::setprecision(2) << std::setw(8) << row.wer << std::setw(10) << row.oracle_wer
       << std::setw(12) << cell(row.werr_vs_first_pass) << std::setw(12)
       << cell(row.werr_vs_baseline) << std::setw(12) << cell(row.gap_closure_pct);
    if (row.p_value_vs_baseline) {
      os << std::setw(12) << std::scientific << std::setprecision(2) << *row.p_value_vs_baseline;
    } else {
      os << std::setw(12) << "-";
    }
    os << "\n";
  }
  return os.str();
}

std::string system_rows_to_json(const std::vector<SystemRow>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const SystemRow& row : rows) {
    nlohmann::ordered_json obj;
    obj["name"] = row.name;
    obj["role"] = row.role;
    obj["wer"] = row.wer;
    obj["oracle_wer"] = row.oracle_wer;
    obj["werr_vs_first_pass"] =
        row.werr_vs_first_pass ? nlohmann::ordered_json(*row.werr_vs_first_pass) : nullptr;
    obj["werr_vs_baseline"] =
        row.werr_vs_baseline ? nlohmann::ordered_json(*row.werr_vs_baseline) : nullptr;
    obj["gap_closure_pct"] =
        row.gap_closure_pct ? nlohmann::ordered_json(*row.gap_closure_pct) : nullptr;
    obj["p_value_vs_baseline"] =
        row.p_value_vs_baseline ? nlohmann::ordered_json(*row.p_value_vs_baseline) : nullptr;
    arr.push_back(std::move(obj));
  }
  return arr.dump();
}

#define MWDS_INSTANTIATE_PIPELINE(S)                                                          \
  template TrainResult<S> train(const TrainConfig&, const ScorerModel<S>&, const Corpus&,     \
                                const Corpus&, const Vocab&);                                 \
  template void cache_teacher_scores(const ScorerModel<S>&, Corpus&, const Vocab&, int);      \
  template void cache_teacher_plls(const ScorerModel<S>&, Corpus&, const Vocab&, int);        \
  template TrainResult<S> distill(const TrainConfig&, const ScorerModel<S>*,                  \
                                  const ScorerModel<S>&, Corpus&, Corpus&, const Vocab&);     \
  template std::vector<std::vector<double>> second_pass_scores(const ScorerModel<S>&,         \
                                                               const Corpus&, const Vocab&,   \
                                                               int);                          \
  template RescoreResult<S> rescore(const ScorerModel<S>&, const Corpus&, const Vocab&,       \
                                    double, double, int);                                     \
  template std::pair<double, double> tune_interpolation(const ScorerModel<S>&, const Corpus&, \
                                                        const Vocab&, int);

MWDS_INSTANTIATE_PIPELINE(float)
MWDS_INSTANTIATE_PIPELINE(double)

#undef MWDS_INSTANTIATE_PIPELINE

}  // namespace mwds

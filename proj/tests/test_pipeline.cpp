#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mwds/losses.hpp"
#include "mwds/metrics.hpp"
#include "mwds/pipeline.hpp"
#include "mwds/rng.hpp"
#include "mwds/scorer.hpp"

using mwds::Corpus;
using mwds::LossKind;
using mwds::LossSpec;
using mwds::Rng;
using mwds::ScorerConfig;
using mwds::ScorerModel;
using mwds::Stage;
using mwds::SynthConfig;
using mwds::TrainConfig;
using mwds::Vocab;

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig small_synth(int64_t seed) {
  SynthConfig cfg;
  cfg.n_train = 40;
  cfg.n_dev = 12;
  cfg.n_test = 12;
  cfg.vocab_words = 60;
  cfg.nbest_size = 5;
  cfg.corruption_rate = 0.25;
  cfg.score_noise = 0.05;
  cfg.seed = seed;
  return cfg;
}

ScorerConfig tiny_model_config(int vocab_size, int64_t seed) {
  ScorerConfig cfg;
  cfg.layers = 1;
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.vocab_size = vocab_size;
  cfg.max_len = 24;
  cfg.seed = seed;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("mwds_pipe_" + std::to_string(::getpid()) + "_" + name);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

bool models_identical(const ScorerModel<float>& a, const ScorerModel<float>& b) {
  auto pa = a.params();
  auto pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (size_t k = 0; k < pa.size(); ++k) {
    if (pa[k]->numel() != pb[k]->numel()) return false;
    for (int64_t i = 0; i < pa[k]->numel(); ++i) {
      if ((*pa[k])[i] != (*pb[k])[i]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("synthetic generator") {
  SUBCASE("zero corruption copies the reference everywhere") {
    SynthConfig cfg = small_synth(3);
    cfg.corruption_rate = 0.0;
    const auto corpora = mwds::generate_synthetic_corpora(cfg);
    for (const auto& utt : corpora.train.utterances) {
      for (const auto& hyp : utt.nbest) CHECK(hyp.text == utt.reference);
    }
    const auto report =
        mwds::corpus_wer(corpora.train, std::vector<int>(corpora.train.utterances.size(), 0));
    CHECK(report.oracle_wer == 0.0);
    CHECK(report.wer == 0.0);
  }

  SUBCASE("zero score noise makes the first pass oracle-consistent") {
    SynthConfig cfg = small_synth(5);
    cfg.score_noise = 0.0;
    const auto corpora = mwds::generate_synthetic_corpora(cfg);
    for (const auto& utt : corpora.test.utterances) {
      const auto dists = mwds::utterance_edit_distances(utt);
      int fp_argmin = 0;
      for (size_t j = 1; j < utt.nbest.size(); ++j) {
        if (utt.nbest[j].first_pass_score <
            utt.nbest[static_cast<size_t>(fp_argmin)].first_pass_score) {
          fp_argmin = static_cast<int>(j);
        }
      }
      CHECK(dists[static_cast<size_t>(fp_argmin)] == dists[static_cast<size_t>(mwds::oracle_index(utt))]);
      CHECK(fp_argmin == mwds::oracle_index(utt));
    }
  }

  SUBCASE("fixed seed reproduces byte-identical files") {
    TempDir a("gen_a"), b("gen_b");
    const SynthConfig cfg = small_synth(7);
    mwds::generate_synthetic(cfg, a.path.string());
    mwds::generate_synthetic(cfg, b.path.string());
    for (const char* name : {"train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt"}) {
      CHECK(read_file((a.path / name).string()) == read_file((b.path / name).string()));
      CHECK(!read_file((a.path / name).string()).empty());
    }
  }

  SUBCASE("sentence lengths respect the configured range") {
    SynthConfig cfg = small_synth(11);
    const auto corpora = mwds::generate_synthetic_corpora(cfg);
    for (const auto& utt : corpora.train.utterances) {
      const auto n = mwds::split_tokens(utt.reference).size();
      CHECK(n >= static_cast<size_t>(cfg.len_min));
      CHECK(n <= static_cast<size_t>(cfg.len_max));
    }
  }
}

TEST_CASE("training contracts") {
  const SynthConfig scfg = small_synth(13);
  auto corpora = mwds::generate_synthetic_corpora(scfg);
  const Vocab vocab = mwds::build_vocab(corpora.train, scfg.vocab_words + Vocab::kNumReserved);
  const auto init = ScorerModel<float>::init(tiny_model_config(vocab.size(), 21));

  SUBCASE("zero learning rate changes nothing and keeps dev loss constant") {
    TrainConfig cfg;
    cfg.stage = Stage::kMwer;
    cfg.loss.kind = LossKind::kMwer;
    cfg.lr0 = 0.0;
    cfg.batch_size = 8;
    cfg.max_epochs = 3;
    cfg.patience = 3;
    cfg.seed = 1;
    const auto result = mwds::train(cfg, init, corpora.train, corpora.dev, vocab);
    CHECK(models_identical(result.best_model, init));
    REQUIRE(result.log.size() >= 2);
    CHECK(result.log[0].dev_loss == result.log[1].dev_loss);
    CHECK(result.log[0].dev_wer.has_value());
  }

  SUBCASE("patience one stops after exactly two evaluations") {
    TrainConfig cfg;
    cfg.stage = Stage::kMwer;
    cfg.loss.kind = LossKind::kMwer;
    cfg.lr0 = 0.0;  // dev metric can never improve
    cfg.batch_size = 8;
    cfg.max_epochs = 10;
    cfg.patience = 1;
    cfg.seed = 1;
    const auto result = mwds::train(cfg, init, corpora.train, corpora.dev, vocab);
    CHECK(result.log.size() == 2);
    CHECK(result.best_epoch == 1);
  }

  SUBCASE("single-utterance MWER overfit moves posterior mass onto the oracle") {
    Corpus one;
    one.split = "train";
    // Pick a training utterance whose n-best is not already perfect.
    for (const auto& utt : corpora.train.utterances) {
      const auto dists = mwds::utterance_edit_distances(utt);
      int distinct = 0;
      for (int d : dists) distinct += d != dists[0];
      if (distinct > 0) {
        one.utterances.push_back(utt);
        break;
      }
    }
    REQUIRE(one.utterances.size() == 1);

    TrainConfig cfg;
    cfg.stage = Stage::kMwer;
    cfg.loss.kind = LossKind::kMwer;
    cfg.lr0 = 5e-3;
    cfg.lr_decay = 1.0;
    cfg.batch_size = 1;
    cfg.max_epochs = 40;
    cfg.patience = 40;
    cfg.seed = 3;

    const auto posterior_mass_on_oracle = [&](const ScorerModel<float>& model) {
      const auto scores = mwds::second_pass_scores(model, one, vocab, 1);
      const auto& utt = one.utterances[0];
      std::vector<double> interp(utt.nbest.size());
      for (size_t j = 0; j < utt.nbest.size(); ++j) {
        interp[j] = cfg.w1 * utt.nbest[j].first_pass_score + cfg.w2 * scores[0][j];
      }
      const auto p = mwds::nbest_posterior(interp, 1.0);
      return p[static_cast<size_t>(mwds::oracle_index(utt))];
    };

    const double before = posterior_mass_on_oracle(init);
    const auto result = mwds::train(cfg, init, one, one, vocab);
    // The final model overfits harder than the best-dev checkpoint; compare
    // with the last epoch state by retraining metric-free.
    const double after = posterior_mass_on_oracle(result.best_model);
    CHECK(after > before);
  }

  SUBCASE("non-finite loss aborts with diagnostics") {
    Corpus poisoned = corpora.train;
    for (auto& utt : poisoned.utterances) {
      for (auto& hyp : utt.nbest) hyp.teacher_score = 1e300;
    }
    Corpus dev = corpora.dev;
    for (auto& utt : dev.utterances) {
      for (auto& hyp : utt.nbest) hyp.teacher_score = 1e300;
    }
    TrainConfig cfg;
    cfg.stage = Stage::kDistill;
    cfg.loss.kind = LossKind::kMse;
    cfg.lr0 = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    try {
      mwds::train(cfg, init, poisoned, dev, vocab);
      FAIL("expected abort");
    } catch (const std::runtime_error& e) {
      const std::string what = e.what();
      CHECK(what.find("epoch 1") != std::string::npos);
      CHECK(what.find("lr") != std::string::npos);
    }
  }

  SUBCASE("identical seeds are bit-deterministic across worker counts") {
    TrainConfig cfg;
    cfg.stage = Stage::kMwer;
    cfg.loss.kind = LossKind::kMwer;
    cfg.lr0 = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.seed = 9;
    cfg.workers = 1;
    const auto run1 = mwds::train(cfg, init, corpora.train, corpora.dev, vocab);
    cfg.workers = 2;
    const auto run2 = mwds::train(cfg, init, corpora.train, corpora.dev, vocab);
    CHECK(models_identical(run1.best_model, run2.best_model));
    REQUIRE(run1.log.size() == run2.log.size());
    for (size_t i = 0; i < run1.log.size(); ++i) {
      CHECK(run1.log[i].train_loss == run2.log[i].train_loss);
      CHECK(run1.log[i].dev_loss == run2.log[i].dev_loss);
    }
  }

  SUBCASE("adapt stage trains and logs without dev WER") {
    TrainConfig cfg;
    cfg.stage = Stage::kAdapt;
    cfg.loss.kind = LossKind::kMlm;
    cfg.lr0 = 2e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 3;
    cfg.patience = 3;
    cfg.seed = 5;
    const auto result = mwds::train(cfg, init, corpora.train, corpora.dev, vocab);
    REQUIRE(!result.log.empty());
    CHECK_FALSE(result.log[0].dev_wer.has_value());
    // MLM on structured text must beat the untrained model.
    CHECK(result.best_metric < result.log[0].dev_loss * 1.01);
    const std::string json = mwds::epoch_log_to_json(result.log[0]);
    CHECK(json.find("\"epoch\":1") != std::string::npos);
    CHECK(json.find("\"dev_wer\":null") != std::string::npos);
  }
}

TEST_CASE("distillation") {
  const SynthConfig scfg = small_synth(17);
  auto corpora = mwds::generate_synthetic_corpora(scfg);
  const Vocab vocab = mwds::build_vocab(corpora.train, scfg.vocab_words + Vocab::kNumReserved);
  const auto teacher = ScorerModel<float>::init(tiny_model_config(vocab.size(), 31));

  SUBCASE("self-distillation with NMSE is a fixed point") {
    TrainConfig cfg;
    cfg.stage = Stage::kDistill;
    cfg.loss.kind = LossKind::kNMse;
    cfg.lr0 = 0.0;
    cfg.batch_size = 8;
    cfg.max_epochs = 1;
    cfg.patience = 1;
    auto train_set = corpora.train;
    auto dev_set = corpora.dev;
    const auto result = mwds::distill(cfg, &teacher, teacher, train_set, dev_set, vocab);
    CHECK(result.log[0].train_loss == doctest::Approx(0.0).epsilon(1e-12));
    // Teacher scores were cached into the corpus.
    for (const auto& utt : train_set.utterances) {
      for (const auto& hyp : utt.nbest) CHECK(hyp.teacher_score.has_value());
    }
  }

  SUBCASE("missing teacher and missing cached scores is a validation error") {
    TrainConfig cfg;
    cfg.stage = Stage::kDistill;
    cfg.loss.kind = LossKind::kPostCe;
    auto train_set = corpora.train;
    auto dev_set = corpora.dev;
    CHECK_THROWS_AS(
        mwds::distill<float>(cfg, nullptr, teacher, train_set, dev_set, vocab),
        std::invalid_argument);
  }

  SUBCASE("MSE accepts text-only extra data without edit distances") {
    Corpus text_only;
    text_only.split = "train";
    Rng rng(23);
    for (int i = 0; i < 20; ++i) {
      mwds::Utterance utt;
      utt.id = "text-" + std::to_string(i);
      utt.reference = "";  // never consulted by the MSE path
      mwds::Hypothesis hyp;
      hyp.text = corpora.train.utterances[static_cast<size_t>(i)].nbest[0].text;
      hyp.first_pass_score = 0.0;
      utt.nbest.push_back(hyp);
      text_only.utterances.push_back(utt);
    }
    TrainConfig cfg;
    cfg.stage = Stage::kDistill;
    cfg.loss.kind = LossKind::kMse;
    cfg.lr0 = 1e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 1;
    cfg.patience = 1;
    auto dev_set = corpora.dev;
    const auto student = ScorerModel<float>::init(tiny_model_config(vocab.size(), 33));
    const auto result = mwds::distill(cfg, &teacher, student, text_only, dev_set, vocab);
    CHECK(std::isfinite(result.log[0].train_loss));
  }
}

TEST_CASE("rescoring") {
  const SynthConfig scfg = small_synth(19);
  auto corpora = mwds::generate_synthetic_corpora(scfg);
  const Vocab vocab = mwds::build_vocab(corpora.train, scfg.vocab_words + Vocab::kNumReserved);
  const auto model = ScorerModel<float>::init(tiny_model_config(vocab.size(), 41));

  SUBCASE("w2 = 0 reproduces the first-pass ranking") {
    const auto result = mwds::rescore(model, corpora.test, vocab, 1.0, 0.0, 2);
    CHECK(result.selections == mwds::first_pass_selections(corpora.test));
  }

  SUBCASE("positive rescaling of (w1, w2) never changes selections") {
    const auto scores = mwds::second_pass_scores(model, corpora.test, vocab, 2);
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
      const double w1 = rng.uniform() * 5.0 + 0.1;
      const double w2 = rng.uniform() * 5.0;
      const double c = rng.uniform() * 9.9 + 0.1;
      CHECK(mwds::select_hypotheses(corpora.test, scores, w1, w2) ==
            mwds::select_hypotheses(corpora.test, scores, c * w1, c * w2));
    }
  }

  SUBCASE("identical models give identical selections at w1 = 0") {
    TempDir dir("ckpt");
    const std::string path = (dir.path / "m.bin").string();
    mwds::save_checkpoint(model, path);
    const auto copy = mwds::load_checkpoint<float>(path);
    const auto a = mwds::rescore(model, corpora.test, vocab, 0.0, 1.0, 1);
    const auto b = mwds::rescore(copy, corpora.test, vocab, 0.0, 1.0, 1);
    CHECK(a.selections == b.selections);
  }
}

TEST_CASE("interpolation tuning") {
  const SynthConfig scfg = small_synth(23);
  auto corpora = mwds::generate_synthetic_corpora(scfg);

  SUBCASE("constant scores tie the whole grid and return the smallest w2") {
    std::vector<std::vector<double>> constant;
    for (const auto& utt : corpora.dev.utterances) {
      constant.emplace_back(utt.nbest.size(), 0.5);
    }
    const auto [w1, w2] = mwds::tune_interpolation_scores(corpora.dev, constant);
    CHECK(w1 == 1.0);
    CHECK(w2 == 0.0);
    const auto report = mwds::corpus_wer(
        corpora.dev, mwds::select_hypotheses(corpora.dev, constant, w1, w2));
    const auto fp_report =
        mwds::corpus_wer(corpora.dev, mwds::first_pass_selections(corpora.dev));
    CHECK(report.wer == fp_report.wer);
  }

  SUBCASE("an oracle-revealing scorer reaches the oracle WER") {
    std::vector<std::vector<double>> oracle_scores;
    for (const auto& utt : corpora.dev.utterances) {
      std::vector<double> row;
      for (int d : mwds::utterance_edit_distances(utt)) row.push_back(d);
      oracle_scores.push_back(row);
    }
    const auto [w1, w2] = mwds::tune_interpolation_scores(corpora.dev, oracle_scores);
    const auto report = mwds::corpus_wer(
        corpora.dev, mwds::select_hypotheses(corpora.dev, oracle_scores, w1, w2));
    CHECK(report.wer == report.oracle_wer);
  }

  SUBCASE("a grid of one entry returns that entry") {
    std::vector<std::vector<double>> scores;
    for (const auto& utt : corpora.dev.utterances) scores.emplace_back(utt.nbest.size(), 0.0);
    const auto [w1, w2] = mwds::tune_interpolation_scores(corpora.dev, scores, {0.3});
    CHECK(w1 == 1.0);
    CHECK(w2 == 0.3);
  }
}

TEST_CASE("system evaluation") {
  const SynthConfig scfg = small_synth(29);
  auto corpora = mwds::generate_synthetic_corpora(scfg);
  const Corpus& test = corpora.test;

  std::vector<int> oracle_selections;
  for (const auto& utt : test.utterances) oracle_selections.push_back(mwds::oracle_index(utt));
  const std::vector<int> fp = mwds::first_pass_selections(test);

  SUBCASE("oracle selections hit the oracle WER field exactly") {
    const auto report = mwds::corpus_wer(test, oracle_selections);
    CHECK(report.wer == report.oracle_wer);
  }

  SUBCASE("a system against itself has zero WERR and p = 1") {
    const auto rows = mwds::evaluate_systems(
        test, {{"baseline", "baseline", fp}, {"teacher", "teacher", fp}});
    REQUIRE(rows.size() == 3);
    CHECK(rows[2].werr_vs_baseline == doctest::Approx(0.0));
    CHECK(rows[2].p_value_vs_baseline == doctest::Approx(1.0));
  }

  SUBCASE("roles populate gap closure and p-values") {
    const auto rows = mwds::evaluate_systems(test, {
        {"teacher", "teacher", oracle_selections},
        {"baseline", "baseline", fp},
        {"student", "distilled", oracle_selections},
    });
    REQUIRE(rows.size() == 4);
    const auto& distilled = rows[3];
    REQUIRE(distilled.gap_closure_pct.has_value());
    CHECK(*distilled.gap_closure_pct == doctest::Approx(100.0));
    CHECK(distilled.p_value_vs_baseline.has_value());
    const std::string table = mwds::render_system_table(rows);
    CHECK(table.find("first_pass") != std::string::npos);
    CHECK(table.find("student") != std::string::npos);
    const std::string json = mwds::system_rows_to_json(rows);
    CHECK(json.find("\"gap_closure_pct\":100.0") != std::string::npos);
  }
}

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mwds/losses.hpp"
#include "mwds/metrics.hpp"
#include "mwds/nbest.hpp"
#include "mwds/pipeline.hpp"
#include "mwds/scorer.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

int engine_precision() {
  const char* p = std::getenv("MWDS_PRECISION");
  return p != nullptr && std::string(p) == "64" ? 64 : 32;
}

// Flat key-value run configuration: JSON file plus key=value overrides; keys
// outside the verb's documented set are rejected.
class Config {
 public:
  explicit Config(std::set<std::string> allowed) : allowed_(std::move(allowed)) {}

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    json obj;
    try {
      obj = json::parse(in);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument("config " + path + ": " + e.what());
    }
    if (!obj.is_object()) throw std::invalid_argument("config must be a JSON object: " + path);
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      set_checked(it.key(), it.value());
    }
  }

  void apply_override(const std::string& pair) {
    const size_t eq = pair.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects KEY=VALUE, got \"" + pair + "\"");
    }
    const std::string key = pair.substr(0, eq);
    const std::string raw = pair.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
      if (value.is_object() || value.is_array()) value = raw;
    } catch (const json::parse_error&) {
      value = raw;
    }
    set_checked(key, value);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (!it->second.is_number()) throw std::invalid_argument("config key " + key + " must be a number");
    return it->second.get<int64_t>();
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (!it->second.is_number()) throw std::invalid_argument("config key " + key + " must be a number");
    return it->second.get<double>();
  }

  std::string get_string(const std::string& key, const std::string& fallback = "") const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (!it->second.is_string()) throw std::invalid_argument("config key " + key + " must be a string");
    return it->second.get<std::string>();
  }

  std::string require_string(const std::string& key) const {
    if (!has(key)) throw std::invalid_argument("config key \"" + key + "\" is required");
    return get_string(key);
  }

  void snapshot(const std::string& out_dir) const {
    json obj = json::object();
    for (const auto& [key, value] : values_) obj[key] = value;
    std::ofstream out(fs::path(out_dir) / "config.json", std::ios::binary);
    out << obj.dump(2) << "\n";
  }

 private:
  void set_checked(const std::string& key, json value) {
    if (!allowed_.count(key)) {
      throw std::invalid_argument("unknown config key \"" + key + "\"");
    }
    values_[key] = std::move(value);
  }

  std::set<std::string> allowed_;
  std::map<std::string, json> values_;
};

std::string keys_help(const std::set<std::string>& keys) {
  std::string out = "config keys: ";
  bool first = true;
  for (const auto& key : keys) {
    if (!first) out += ", ";
    out += key;
    first = false;
  }
  return out;
}

// Common per-verb command line state.
struct VerbArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::optional<int> workers;
  std::optional<int64_t> seed;
};

void add_common_flags(CLI::App* cmd, VerbArgs& args, bool need_out = true) {
  cmd->add_option("--config", args.config_path, "run-config JSON file (flat key-value)");
  auto* out = cmd->add_option("--out", args.out_dir, "output directory for artifacts");
  if (need_out) out->required();
  cmd->add_option("--set", args.overrides, "KEY=VALUE config override (repeatable)");
  cmd->add_option("--workers", args.workers, "concurrent utterance workers");
  cmd->add_option("--seed", args.seed, "seed override");
}

Config build_config(const VerbArgs& args, const std::set<std::string>& allowed) {
  Config cfg(allowed);
  if (!args.config_path.empty()) cfg.load_file(args.config_path);
  for (const std::string& pair : args.overrides) cfg.apply_override(pair);
  if (args.workers) cfg.apply_override("workers=" + std::to_string(*args.workers));
  if (args.seed) cfg.apply_override("seed=" + std::to_string(*args.seed));
  return cfg;
}

int config_workers(const Config& cfg) {
  return static_cast<int>(cfg.get_int("workers", 1));
}

// ---------------------------------------------------------------------------
// Shared loaders
// ---------------------------------------------------------------------------

mwds::ScorerConfig scorer_config_from(const Config& cfg, int vocab_size) {
  mwds::ScorerConfig sc;
  sc.layers = static_cast<int>(cfg.get_int("layers", 2));
  sc.hidden_dim = static_cast<int>(cfg.get_int("hidden_dim", 32));
  sc.heads = static_cast<int>(cfg.get_int("heads", 2));
  sc.ffn_dim = static_cast<int>(cfg.get_int("ffn_dim", 2 * sc.hidden_dim));
  sc.max_len = static_cast<int>(cfg.get_int("max_len", mwds::kDefaultMaxLen));
  sc.vocab_size = vocab_size;
  sc.seed = cfg.get_int("seed", 0);
  sc.validate();
  return sc;
}

mwds::TrainConfig train_config_from(const Config& cfg, mwds::Stage stage) {
  mwds::TrainConfig tc;
  tc.stage = stage;
  tc.init_from = mwds::init_from_string(cfg.get_string("init_from", "scratch"));
  tc.init_checkpoint = cfg.get_string("init_checkpoint", "");
  tc.batch_size = static_cast<int>(cfg.get_int("batch_size", 16));
  tc.lr0 = cfg.get_double("lr0", 1e-4);
  tc.lr_decay = cfg.get_double("lr_decay", 0.9);
  tc.max_epochs = static_cast<int>(cfg.get_int("max_epochs", 10));
  tc.patience = static_cast<int>(cfg.get_int("patience", 3));
  tc.w1 = cfg.get_double("w1", 20.0);
  tc.w2 = cfg.get_double("w2", 1.0);
  tc.seed = cfg.get_int("seed", 0);
  tc.workers = config_workers(cfg);

  mwds::LossSpec spec;
  switch (stage) {
    case mwds::Stage::kAdapt: spec.kind = mwds::LossKind::kMlm; break;
    case mwds::Stage::kPllDistill: spec.kind = mwds::LossKind::kPllDistill; break;
    case mwds::Stage::kMwer: spec.kind = mwds::LossKind::kMwer; break;
    case mwds::Stage::kDistill:
      spec.kind = mwds::loss_kind_from_string(cfg.get_string("loss", "post_ce"));
      break;
  }
  spec.temperature = cfg.get_double("temperature", 1.0);
  spec.alpha = cfg.get_double("alpha", 1.0);
  if (spec.kind == mwds::LossKind::kCombo) {
    spec.combo = mwds::parse_combo(cfg.require_string("combo"), cfg.get_double("beta", 0.01),
                                   cfg.get_double("gamma", 0.5));
  }
  tc.loss = spec;
  return tc;
}

template <typename S>
mwds::ScorerModel<S> student_init_from(const Config& cfg, const mwds::Vocab& vocab) {
  const std::string ckpt = cfg.get_string("init_checkpoint", "");
  if (!ckpt.empty()) return mwds::load_checkpoint<S>(ckpt);
  return mwds::ScorerModel<S>::init(scorer_config_from(cfg, vocab.size()));
}

void write_train_log(const std::vector<mwds::EpochLog>& log, const std::string& out_dir) {
  std::ofstream out(fs::path(out_dir) / "train_log.jsonl", std::ios::binary);
  for (const auto& entry : log) out << mwds::epoch_log_to_json(entry) << "\n";
}

void write_selections(const mwds::Corpus& corpus, const std::vector<int>& selections,
                      const std::vector<std::vector<double>>& scores,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    nlohmann::ordered_json obj;
    obj["id"] = corpus.utterances[i].id;
    obj["selected"] = selections[i];
    obj["second_pass"] = scores.empty() ? nlohmann::ordered_json::array()
                                        : nlohmann::ordered_json(scores[i]);
    out << obj.dump() << "\n";
  }
}

std::vector<int> read_selections(const mwds::Corpus& corpus, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open selections file: " + path);
  std::map<std::string, int> by_id;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    by_id[obj.at("id").get<std::string>()] = obj.at("selected").get<int>();
  }
  std::vector<int> selections;
  selections.reserve(corpus.utterances.size());
  for (const auto& utt : corpus.utterances) {
    const auto it = by_id.find(utt.id);
    if (it == by_id.end()) {
      throw std::invalid_argument("selections file misses utterance \"" + utt.id + "\"");
    }
    selections.push_back(it->second);
  }
  return selections;
}

template <typename S>
void save_stage_outputs(const mwds::TrainResult<S>& result, const std::string& out_dir) {
  mwds::save_checkpoint(result.best_model, (fs::path(out_dir) / "model.ckpt").string());
  write_train_log(result.log, out_dir);
  const int64_t with_emb = result.best_model.param_count(true);
  const int64_t without_emb = result.best_model.param_count(false);
  std::cout << "best epoch " << result.best_epoch << ", best dev metric " << result.best_metric
            << "\nparameters: " << with_emb << " total, " << without_emb
            << " excluding embeddings\ncheckpoint: " << (fs::path(out_dir) / "model.ckpt").string()
            << "\n";
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

int run_gen_data(const Config& cfg, const std::string& out_dir) {
  mwds::SynthConfig sc;
  sc.n_train = static_cast<int>(cfg.get_int("n_train", sc.n_train));
  sc.n_dev = static_cast<int>(cfg.get_int("n_dev", sc.n_dev));
  sc.n_test = static_cast<int>(cfg.get_int("n_test", sc.n_test));
  sc.vocab_words = static_cast<int>(cfg.get_int("vocab_words", sc.vocab_words));
  sc.len_min = static_cast<int>(cfg.get_int("len_min", sc.len_min));
  sc.len_max = static_cast<int>(cfg.get_int("len_max", sc.len_max));
  sc.nbest_size = static_cast<int>(cfg.get_int("nbest_size", sc.nbest_size));
  sc.corruption_rate = cfg.get_double("corruption_rate", sc.corruption_rate);
  sc.score_noise = cfg.get_double("score_noise", sc.score_noise);
  sc.seed = cfg.get_int("seed", sc.seed);
  const auto paths = mwds::generate_synthetic(sc, out_dir);
  cfg.snapshot(out_dir);
  std::cout << "wrote " << paths.train << ", " << paths.dev << ", " << paths.test << ", "
            << paths.vocab << "\n";
  return 0;
}

template <typename S>
int run_train_stage(const Config& cfg, const std::string& out_dir, mwds::Stage stage) {
  const mwds::Vocab vocab = mwds::load_vocab(cfg.require_string("vocab"));
  mwds::Corpus train_set = mwds::load_corpus(cfg.require_string("train"));
  mwds::Corpus dev_set = mwds::load_corpus(cfg.require_string("dev"));
  train_set.split = "train";
  dev_set.split = "dev";
  const mwds::TrainConfig tc = train_config_from(cfg, stage);
  fs::create_directories(out_dir);

  mwds::ScorerModel<S> init = student_init_from<S>(cfg, vocab);
  mwds::TrainResult<S> result;
  if (stage == mwds::Stage::kPllDistill) {
    const auto teacher = mwds::load_checkpoint<S>(cfg.require_string("teacher"));
    mwds::cache_teacher_plls(teacher, train_set, vocab, tc.workers);
    mwds::cache_teacher_plls(teacher, dev_set, vocab, tc.workers);
    mwds::save_corpus(train_set, (fs::path(out_dir) / "train_scored.jsonl").string());
    mwds::save_corpus(dev_set, (fs::path(out_dir) / "dev_scored.jsonl").string());
    result = mwds::train(tc, init, train_set, dev_set, vocab);
  } else if (stage == mwds::Stage::kDistill) {
    std::optional<mwds::ScorerModel<S>> teacher;
    if (cfg.has("teacher")) teacher = mwds::load_checkpoint<S>(cfg.get_string("teacher"));
    result = mwds::distill(tc, teacher ? &*teacher : nullptr, init, train_set, dev_set, vocab);
    mwds::save_corpus(train_set, (fs::path(out_dir) / "train_scored.jsonl").string());
    mwds::save_corpus(dev_set, (fs::path(out_dir) / "dev_scored.jsonl").string());
  } else {
    result = mwds::train(tc, init, train_set, dev_set, vocab);
  }
  cfg.snapshot(out_dir);
  save_stage_outputs(result, out_dir);
  return 0;
}

template <typename S>
int run_rescore(const Config& cfg, const std::string& out_dir) {
  const mwds::Vocab vocab = mwds::load_vocab(cfg.require_string("vocab"));
  mwds::Corpus corpus = mwds::load_corpus(cfg.require_string("corpus"));
  const auto model = mwds::load_checkpoint<S>(cfg.require_string("model"));
  const double w1 = cfg.get_double("w1", 1.0);
  const double w2 = cfg.get_double("w2", 1.0);
  const auto result = mwds::rescore(model, corpus, vocab, w1, w2, config_workers(cfg));
  fs::create_directories(out_dir);
  cfg.snapshot(out_dir);
  write_selections(corpus, result.selections, result.second_pass,
                   (fs::path(out_dir) / "selections.jsonl").string());
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    for (size_t j = 0; j < corpus.utterances[i].nbest.size(); ++j) {
      corpus.utterances[i].nbest[j].teacher_score = result.second_pass[i][j];
    }
  }
  mwds::save_corpus(corpus, (fs::path(out_dir) / "scored.jsonl").string());
  const auto report = mwds::corpus_wer(corpus, result.selections);
  std::cout << "rescored " << corpus.utterances.size() << " utterances at w1=" << w1
            << " w2=" << w2 << ": WER " << report.wer << " (oracle " << report.oracle_wer
            << ")\n";
  return 0;
}

template <typename S>
int run_tune_weights(const Config& cfg, const std::string& out_dir) {
  const mwds::Vocab vocab = mwds::load_vocab(cfg.require_string("vocab"));
  const mwds::Corpus dev_set = mwds::load_corpus(cfg.require_string("dev"));
  const auto model = mwds::load_checkpoint<S>(cfg.require_string("model"));
  const auto [w1, w2] = mwds::tune_interpolation(model, dev_set, vocab, config_workers(cfg));
  fs::create_directories(out_dir);
  cfg.snapshot(out_dir);
  nlohmann::ordered_json weights;
  weights["w1"] = w1;
  weights["w2"] = w2;
  std::ofstream out(fs::path(out_dir) / "weights.json", std::ios::binary);
  out << weights.dump() << "\n";
  std::cout << "tuned interpolation: w1=" << w1 << " w2=" << w2 << "\n";
  return 0;
}

template <typename S>
int run_evaluate(const Config& cfg, const std::string& out_dir) {
  const mwds::Vocab vocab = mwds::load_vocab(cfg.require_string("vocab"));
  const mwds::Corpus test_set = mwds::load_corpus(cfg.require_string("test"));
  std::optional<mwds::Corpus> dev_set;
  if (cfg.has("dev")) dev_set = mwds::load_corpus(cfg.get_string("dev"));
  const int workers = config_workers(cfg);

  std::vector<mwds::SystemSelections> systems;
  for (const char* role : {"teacher", "baseline", "distilled"}) {
    if (!cfg.has(role)) continue;
    const auto model = mwds::load_checkpoint<S>(cfg.get_string(role));
    double w1 = cfg.get_double("w1", 1.0);
    double w2 = cfg.get_double("w2", 1.0);
    if (dev_set) {
      std::tie(w1, w2) = mwds::tune_interpolation(model, *dev_set, vocab, workers);
    }
    std::ostringstream label;
    label << role << " (w2=" << w2 << ")";
    mwds::SystemSelections system;
    system.name = label.str();
    system.role = role;
    system.selections = mwds::rescore(model, test_set, vocab, w1, w2, workers).selections;
    systems.push_back(std::move(system));
  }
  if (cfg.has("selections")) {
    mwds::SystemSelections system;
    system.name = "selections";
    system.selections = read_selections(test_set, cfg.get_string("selections"));
    systems.push_back(std::move(system));
  }

  const auto rows = mwds::evaluate_systems(test_set, systems);
  const std::string table = mwds::render_system_table(rows);
  std::cout << table;
  fs::create_directories(out_dir);
  cfg.snapshot(out_dir);
  std::ofstream txt(fs::path(out_dir) / "report.txt", std::ios::binary);
  txt << table;
  std::ofstream js(fs::path(out_dir) / "report.json", std::ios::binary);
  js << mwds::system_rows_to_json(rows) << "\n";
  return 0;
}

int run_grad_check(const Config& cfg) {
  const int instances = static_cast<int>(cfg.get_int("instances", 20));
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 7));
  const auto suite = mwds::run_loss_grad_suite(instances, seed);
  bool ok = true;
  for (const auto& entry : suite) {
    const bool pass = entry.max_rel_err < 1e-4;
    ok = ok && pass;
    std::printf("%-26s max rel err %.3e  %s\n", entry.name.c_str(), entry.max_rel_err,
                pass ? "PASS" : "FAIL");
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n-best rescoring with MWER training and teacher-student distillation"};
  app.require_subcommand(1);

  const std::set<std::string> synth_keys = {"n_train", "n_dev", "n_test", "vocab_words",
                                            "len_min", "len_max", "nbest_size",
                                            "corruption_rate", "score_noise", "seed"};
  const std::set<std::string> adapt_keys = {"train", "dev", "vocab", "layers", "hidden_dim",
                                            "heads", "ffn_dim", "max_len", "init_checkpoint",
                                            "init_from", "batch_size", "lr0", "lr_decay",
                                            "max_epochs", "patience", "seed", "workers"};
  std::set<std::string> pll_keys = adapt_keys;
  pll_keys.insert("teacher");
  std::set<std::string> mwer_keys = adapt_keys;
  mwer_keys.insert("w1");
  mwer_keys.insert("w2");
  std::set<std::string> distill_keys = mwer_keys;
  for (const char* k : {"teacher", "loss", "temperature", "alpha", "beta", "gamma", "combo"}) {
    distill_keys.insert(k);
  }
  const std::set<std::string> rescore_keys = {"model", "corpus", "vocab", "w1", "w2", "workers"};
  const std::set<std::string> tune_keys = {"model", "dev", "vocab", "workers"};
  const std::set<std::string> eval_keys = {"test", "dev", "vocab", "teacher", "baseline",
                                           "distilled", "selections", "w1", "w2", "workers"};
  const std::set<std::string> gradcheck_keys = {"instances", "seed"};

  struct Verb {
    CLI::App* cmd;
    VerbArgs args;
    const std::set<std::string>* keys;
  };
  std::map<std::string, Verb> verbs;
  const auto add_verb = [&](const std::string& name, const std::string& what,
                            const std::set<std::string>& keys, bool need_out = true) {
    Verb verb;
    verb.cmd = app.add_subcommand(name, what + " (" + keys_help(keys) + ")");
    verb.keys = &keys;
    verbs.emplace(name, std::move(verb));
    add_common_flags(verbs[name].cmd, verbs[name].args, need_out);
  };

  add_verb("gen-data", "generate a seeded synthetic n-best corpus", synth_keys);
  add_verb("adapt", "domain-adapt a model with masked language modeling", adapt_keys);
  add_verb("distill-pll", "fit the CLS head to teacher pseudo log-likelihoods", pll_keys);
  add_verb("train-mwer", "discriminative MWER training", mwer_keys);
  add_verb("distill", "distill from an MWER-trained teacher", distill_keys);
  add_verb("rescore", "rescore a corpus with a trained model", rescore_keys);
  add_verb("evaluate", "evaluate systems on a test corpus", eval_keys);
  add_verb("tune-weights", "grid-search the second-pass interpolation weight", tune_keys);
  add_verb("grad-check", "finite-difference audit of every training loss", gradcheck_keys,
           /*need_out=*/false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    Verb& verb = verbs.at(name);
    const Config cfg = build_config(verb.args, *verb.keys);
    const bool wide = engine_precision() == 64;

    if (name == "gen-data") return run_gen_data(cfg, verb.args.out_dir);
    if (name == "adapt") {
      return wide ? run_train_stage<double>(cfg, verb.args.out_dir, mwds::Stage::kAdapt)
                  : run_train_stage<float>(cfg, verb.args.out_dir, mwds::Stage::kAdapt);
    }
    if (name == "distill-pll") {
      return wide ? run_train_stage<double>(cfg, verb.args.out_dir, mwds::Stage::kPllDistill)
                  : run_train_stage<float>(cfg, verb.args.out_dir, mwds::Stage::kPllDistill);
    }
    if (name == "train-mwer") {
      return wide ? run_train_stage<double>(cfg, verb.args.out_dir, mwds::Stage::kMwer)
                  : run_train_stage<float>(cfg, verb.args.out_dir, mwds::Stage::kMwer);
    }
    if (name == "distill") {
      return wide ? run_train_stage<double>(cfg, verb.args.out_dir, mwds::Stage::kDistill)
                  : run_train_stage<float>(cfg, verb.args.out_dir, mwds::Stage::kDistill);
    }
    if (name == "rescore") {
      return wide ? run_rescore<double>(cfg, verb.args.out_dir)
                  : run_rescore<float>(cfg, verb.args.out_dir);
    }
    if (name == "tune-weights") {
      return wide ? run_tune_weights<double>(cfg, verb.args.out_dir)
                  : run_tune_weights<float>(cfg, verb.args.out_dir);
    }
    if (name == "evaluate") {
      return wide ? run_evaluate<double>(cfg, verb.args.out_dir)
                  : run_evaluate<float>(cfg, verb.args.out_dir);
    }
    if (name == "grad-check") return run_grad_check(cfg);
    std::cerr << "error: unknown verb \"" << name << "\"\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
}

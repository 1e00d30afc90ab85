#include "mwds/nbest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

namespace mwds {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] void line_error(const std::string& path, size_t line_no, const std::string& what) {
  throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": " + what);
}

void check_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& path,
                size_t line_no, const char* where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      line_error(path, line_no, std::string("unknown field \"") + it.key() + "\" in " + where);
    }
  }
  for (const auto& key : allowed) {
    if (!obj.contains(key)) {
      line_error(path, line_no, std::string("missing field \"") + key + "\" in " + where);
    }
  }
}

}  // namespace

Corpus load_corpus(const std::string& path, int n_max) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open corpus file: " + path);

  Corpus corpus;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) line_error(path, line_no, "empty line");
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      line_error(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) line_error(path, line_no, "utterance line is not a JSON object");
    check_keys(obj, {"id", "reference", "nbest"}, path, line_no, "utterance");
    if (!obj["id"].is_string() || !obj["reference"].is_string() || !obj["nbest"].is_array()) {
      line_error(path, line_no, "field types must be id:string, reference:string, nbest:array");
    }

    Utterance utt;
    utt.id = obj["id"].get<std::string>();
    utt.reference = obj["reference"].get<std::string>();
    if (!seen_ids.insert(utt.id).second) {
      line_error(path, line_no, "duplicate utterance id \"" + utt.id + "\"");
    }

    const auto& nbest = obj["nbest"];
    if (nbest.empty() || static_cast<int>(nbest.size()) > n_max) {
      line_error(path, line_no,
                 "n-best size " + std::to_string(nbest.size()) + " outside [1, " +
                     std::to_string(n_max) + "]");
    }
    for (const auto& h : nbest) {
      if (!h.is_object()) line_error(path, line_no, "hypothesis is not a JSON object");
      check_keys(h, {"text", "first_pass_score", "teacher_score"}, path, line_no, "hypothesis");
      if (!h["text"].is_string() || !h["first_pass_score"].is_number()) {
        line_error(path, line_no, "hypothesis needs text:string and first_pass_score:number");
      }
      Hypothesis hyp;
      hyp.text = h["text"].get<std::string>();
      hyp.first_pass_score = h["first_pass_score"].get<double>();
      if (!std::isfinite(hyp.first_pass_score)) {
        line_error(path, line_no, "first_pass_score must be finite");
      }
      if (h["teacher_score"].is_number()) {
        hyp.teacher_score = h["teacher_score"].get<double>();
      } else if (!h["teacher_score"].is_null()) {
        line_error(path, line_no, "teacher_score must be a number or null");
      }
      utt.nbest.push_back(std::move(hyp));
    }
    corpus.utterances.push_back(std::move(utt));
  }
  if (corpus.utterances.empty()) {
    throw std::invalid_argument("empty corpus: " + path);
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  for (const Utterance& utt : corpus.utterances) {
    ordered_json obj;
    obj["id"] = utt.id;
    obj["reference"] = utt.reference;
    ordered_json nbest = ordered_json::array();
    for (const Hypothesis& hyp : utt.nbest) {
      ordered_json h;
      h["text"] = hyp.text;
      h["first_pass_score"] = hyp.first_pass_score;
      if (hyp.teacher_score) {
        h["teacher_score"] = *hyp.teacher_score;
      } else {
        h["teacher_score"] = nullptr;
      }
      nbest.push_back(std::move(h));
    }
    obj["nbest"] = std::move(nbest);
    out << obj.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

const std::array<const char*, Vocab::kNumReserved>& Vocab::reserved_tokens() {
  static const std::array<const char*, kNumReserved> names = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
  return names;
}

Vocab::Vocab() {
  for (const char* name : reserved_tokens()) {
    const int next = static_cast<int>(id_to_token_.size());
    token_to_id_.emplace(name, next);
    id_to_token_.emplace_back(name);
  }
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end() || it->second < kNumReserved) return kUnk;
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw std::invalid_argument("vocab id " + std::to_string(id) + " out of range [0, " +
                                std::to_string(size()) + ")");
  }
  return id_to_token_[static_cast<size_t>(id)];
}

void Vocab::add(const std::string& token) {
  if (token_to_id_.count(token)) {
    throw std::invalid_argument("duplicate vocab token \"" + token + "\"");
  }
  const int next = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, next);
  id_to_token_.push_back(token);
}

Vocab build_vocab(const Corpus& corpus, int max_size) {
  if (max_size < Vocab::kNumReserved) {
    throw std::invalid_argument("vocab max_size must be at least " +
                                std::to_string(Vocab::kNumReserved));
  }
  std::map<std::string, int64_t> counts;
  const auto count_text = [&](const std::string& text) {
    for (const std::string& tok : split_tokens(text)) ++counts[tok];
  };
  for (const Utterance& utt : corpus.utterances) {
    count_text(utt.reference);
    for (const Hypothesis& hyp : utt.nbest) count_text(hyp.text);
  }
  for (const char* reserved : Vocab::reserved_tokens()) counts.erase(reserved);

  // Frequency descending, then lexicographic; counts map is already sorted by
  // token, so a stable sort on count keeps the lexicographic tie-break.
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab vocab;
  const size_t budget = static_cast<size_t>(max_size - Vocab::kNumReserved);
  for (size_t i = 0; i < ranked.size() && i < budget; ++i) {
    vocab.add(ranked[i].first);
  }
  return vocab;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file: " + path);
  for (int i = 0; i < vocab.size(); ++i) out << vocab.token(i) << "\n";
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open vocab file: " + path);
  Vocab vocab;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    if (line_no < Vocab::kNumReserved) {
      if (line != Vocab::reserved_tokens()[static_cast<size_t>(line_no)]) {
        throw std::invalid_argument(path + ": reserved token row " + std::to_string(line_no) +
                                    " is \"" + line + "\"");
      }
    } else {
      vocab.add(line);
    }
    ++line_no;
  }
  if (line_no < Vocab::kNumReserved) {
    throw std::invalid_argument(path + ": vocab file misses reserved tokens");
  }
  return vocab;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab, int max_len,
                          TokenizerStats* stats) {
  std::vector<int> ids;
  ids.push_back(Vocab::kCls);
  for (const std::string& tok : split_tokens(text)) ids.push_back(vocab.id(tok));
  if (static_cast<int>(ids.size()) > max_len) {
    ids.resize(static_cast<size_t>(max_len));
    if (stats) ++stats->truncated;
  }
  return ids;
}

}  // namespace mwds

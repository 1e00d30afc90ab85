#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mwds/nbest.hpp"

using mwds::Corpus;
using mwds::Hypothesis;
using mwds::Utterance;
using mwds::Vocab;

namespace {

namespace fs = std::filesystem;

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& name) {
    path = fs::temp_directory_path() / ("mwds_test_" + std::to_string(::getpid()) + "_" + name);
  }
  ~TempFile() {
    std::error_code ec;
    fs::remove(path, ec);
  }
  void write(const std::string& content) const {
    std::ofstream out(path, std::ios::binary);
    out << content;
  }
  std::string read() const {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
};

const char* kFixtureLine =
    R"({"id":"u1","reference":"a b c","nbest":[{"text":"a b c","first_pass_score":0.25,"teacher_score":null},{"text":"a c","first_pass_score":0.75,"teacher_score":-1.5}]})"
    "\n";

}  // namespace

TEST_CASE("load_corpus parses the golden fixture") {
  TempFile f("fixture.jsonl");
  f.write(kFixtureLine);
  Corpus corpus = mwds::load_corpus(f.path.string());
  REQUIRE(corpus.utterances.size() == 1);
  const Utterance& utt = corpus.utterances[0];
  CHECK(utt.id == "u1");
  CHECK(utt.reference == "a b c");
  REQUIRE(utt.nbest.size() == 2);
  CHECK(utt.nbest[0].text == "a b c");
  CHECK(utt.nbest[0].first_pass_score == doctest::Approx(0.25));
  CHECK_FALSE(utt.nbest[0].teacher_score.has_value());
  CHECK(utt.nbest[1].teacher_score == doctest::Approx(-1.5));
}

TEST_CASE("load_corpus rejects an empty file") {
  TempFile f("empty.jsonl");
  f.write("");
  CHECK_THROWS_WITH_AS(mwds::load_corpus(f.path.string()),
                       doctest::Contains("empty corpus"), std::invalid_argument);
}

TEST_CASE("load_corpus enforces the n-best bound") {
  std::ostringstream line;
  line << R"({"id":"u1","reference":"a","nbest":[)";
  for (int i = 0; i < 11; ++i) {
    if (i) line << ",";
    line << R"({"text":"a","first_pass_score":)" << i << R"(,"teacher_score":null})";
  }
  line << "]}\n";
  TempFile f("toolong.jsonl");
  f.write(line.str());
  CHECK_THROWS_WITH_AS(mwds::load_corpus(f.path.string(), 10),
                       doctest::Contains("n-best size 11"), std::invalid_argument);
}

TEST_CASE("load_corpus reports malformed lines with 1-based line numbers") {
  TempFile f("bad.jsonl");
  f.write(std::string(kFixtureLine) + "{not json\n");
  try {
    mwds::load_corpus(f.path.string());
    FAIL("expected parse error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    CHECK(std::string(e.what()).find("malformed") != std::string::npos);
  }
}

TEST_CASE("load_corpus rejects duplicate ids and unknown fields") {
  TempFile dup("dup.jsonl");
  dup.write(std::string(kFixtureLine) + kFixtureLine);
  CHECK_THROWS_WITH_AS(mwds::load_corpus(dup.path.string()),
                       doctest::Contains("duplicate utterance id"), std::invalid_argument);

  TempFile unk("unk.jsonl");
  unk.write(
      R"({"id":"u1","reference":"a","extra":1,"nbest":[{"text":"a","first_pass_score":0,"teacher_score":null}]})"
      "\n");
  CHECK_THROWS_WITH_AS(mwds::load_corpus(unk.path.string()),
                       doctest::Contains("unknown field \"extra\""), std::invalid_argument);
}

TEST_CASE("save/load round-trip is byte identical on canonical files") {
  Corpus corpus;
  for (int i = 0; i < 5; ++i) {
    Utterance utt;
    utt.id = "utt-" + std::to_string(i);
    utt.reference = "w" + std::to_string(i) + " w" + std::to_string(i + 1);
    for (int j = 0; j < 3; ++j) {
      Hypothesis hyp;
      hyp.text = "w" + std::to_string(i + j);
      hyp.first_pass_score = 0.125 * i - 1.0 / 3.0 * j;
      if (j == 1) hyp.teacher_score = -0.7 + 0.01 * i;
      utt.nbest.push_back(hyp);
    }
    corpus.utterances.push_back(utt);
  }
  TempFile first("round1.jsonl");
  TempFile second("round2.jsonl");
  mwds::save_corpus(corpus, first.path.string());
  Corpus reloaded = mwds::load_corpus(first.path.string());
  mwds::save_corpus(reloaded, second.path.string());
  CHECK(first.read() == second.read());
  CHECK(first.read().find("\r") == std::string::npos);
}

TEST_CASE("build_vocab ranks by frequency then lexicographic order") {
  Corpus corpus;
  Utterance utt;
  utt.id = "u";
  utt.reference = "a a";
  Hypothesis hyp;
  hyp.text = "b";
  utt.nbest.push_back(hyp);
  corpus.utterances.push_back(utt);

  SUBCASE("tokens {a,a,b} with max_size 6") {
    Vocab vocab = mwds::build_vocab(corpus, 6);
    CHECK(vocab.size() == 6);
    CHECK(vocab.id("a") == 4);
    CHECK(vocab.id("b") == 5);
  }

  SUBCASE("truncation floor keeps reserved tokens only") {
    Vocab vocab = mwds::build_vocab(corpus, 4);
    CHECK(vocab.size() == 4);
    CHECK(vocab.id("a") == Vocab::kUnk);
    CHECK(vocab.id("b") == Vocab::kUnk);
  }

  SUBCASE("equal-frequency tie breaks lexicographically") {
    Corpus tie;
    Utterance u2;
    u2.id = "u2";
    u2.reference = "y x";
    Hypothesis h2;
    h2.text = "x y";
    u2.nbest.push_back(h2);
    tie.utterances.push_back(u2);
    Vocab vocab = mwds::build_vocab(tie, 6);
    CHECK(vocab.id("x") == 4);
    CHECK(vocab.id("y") == 5);
  }
}

TEST_CASE("tokenize") {
  Corpus corpus;
  Utterance utt;
  utt.id = "u";
  utt.reference = "a b";
  corpus.utterances.push_back(utt);
  Vocab vocab = mwds::build_vocab(corpus, 10);

  SUBCASE("empty text is CLS only") {
    CHECK(mwds::tokenize("", vocab) == std::vector<int>{Vocab::kCls});
  }

  SUBCASE("known words map through the vocab") {
    CHECK(mwds::tokenize("a b", vocab) ==
          std::vector<int>{Vocab::kCls, vocab.id("a"), vocab.id("b")});
  }

  SUBCASE("out-of-vocabulary becomes UNK") {
    CHECK(mwds::tokenize("zzz", vocab) == std::vector<int>{Vocab::kCls, Vocab::kUnk});
  }

  SUBCASE("reserved surface forms never map to control ids") {
    std::vector<int> ids = mwds::tokenize("[MASK] [PAD] [CLS] a", vocab);
    REQUIRE(ids.size() == 5);
    CHECK(ids[0] == Vocab::kCls);
    for (size_t i = 1; i + 1 < ids.size(); ++i) CHECK(ids[i] == Vocab::kUnk);
    CHECK(ids[4] == vocab.id("a"));
  }

  SUBCASE("truncation is hard and counted") {
    std::string text;
    for (int i = 0; i < 40; ++i) text += "a ";
    mwds::TokenizerStats stats;
    std::vector<int> ids = mwds::tokenize(text, vocab, 32, &stats);
    CHECK(ids.size() == 32);
    CHECK(stats.truncated == 1);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "clusterlm/corpus.hpp"
#include "support/oracles.hpp"

using namespace clusterlm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / "clusterlm_corpus_test";
  fs::create_directories(dir);
  return dir;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& line : lines) out << line << "\n";
}

}  // namespace

TEST_CASE("load_corpus preserves file order and fields") {
  fs::path path = temp_dir() / "two.jsonl";
  write_lines(path, {R"({"id":"a","text":"x"})", R"({"id":"b","text":"y"})"});
  corpus::Corpus c = corpus::load_corpus(path);
  REQUIRE(c.docs.size() == 2);
  CHECK(c.docs[0].id == "a");
  CHECK(c.docs[0].text == "x");
  CHECK_FALSE(c.docs[0].label.has_value());
  CHECK(c.docs[1].id == "b");
}

TEST_CASE("load_corpus rejects duplicates, empty files, malformed lines") {
  fs::path dup = temp_dir() / "dup.jsonl";
  write_lines(dup, {R"({"id":"a","text":"x"})", R"({"id":"a","text":"y"})"});
  CHECK_THROWS_WITH_AS(corpus::load_corpus(dup), doctest::Contains("\"a\""), Error);

  fs::path empty = temp_dir() / "empty.jsonl";
  write_lines(empty, {});
  CHECK_THROWS_AS(corpus::load_corpus(empty), Error);

  fs::path bad = temp_dir() / "bad.jsonl";
  write_lines(bad, {R"({"id":"a","text":"x"})", "not json"});
  CHECK_THROWS_WITH_AS(corpus::load_corpus(bad), doctest::Contains("line 2"), Error);
}

TEST_CASE("synthetic corpus save/load round trip is byte-identical at 10k records") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 4;
  spec.vocab_per_domain = 30;
  spec.shared_vocab = 10;
  spec.docs_per_domain = 2500;
  spec.doc_length_min = 5;
  spec.doc_length_max = 20;
  spec.seed = 11;
  corpus::Corpus generated = corpus::generate_synthetic(spec);
  REQUIRE(generated.docs.size() == 10000);

  fs::path path = temp_dir() / "round.jsonl";
  corpus::save_corpus(generated, path);
  corpus::Corpus loaded = corpus::load_corpus(path);
  fs::path again = temp_dir() / "round2.jsonl";
  corpus::save_corpus(loaded, again);
  CHECK(read_file(path) == read_file(again));
  CHECK(corpus::corpus_digest(generated) == corpus::corpus_digest(loaded));
}

TEST_CASE("generate_synthetic is seed-deterministic") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 2;
  spec.seed = 7;
  corpus::Corpus a = corpus::generate_synthetic(spec);
  corpus::Corpus b = corpus::generate_synthetic(spec);
  CHECK(corpus::corpus_digest(a) == corpus::corpus_digest(b));
  spec.seed = 8;
  corpus::Corpus c = corpus::generate_synthetic(spec);
  CHECK(corpus::corpus_digest(a) != corpus::corpus_digest(c));
}

TEST_CASE("disjoint domain vocabularies share no mass outside shared tokens") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 3;
  spec.shared_vocab = 0;
  spec.docs_per_domain = 50;
  spec.seed = 3;
  corpus::Corpus c = corpus::generate_synthetic(spec);
  std::map<std::string, std::set<std::string>> tokens_by_domain;
  for (const auto& doc : c.docs)
    for (const auto& tok : corpus::tokenize_whitespace(doc.text))
      tokens_by_domain[*doc.label].insert(tok);
  for (auto it = tokens_by_domain.begin(); it != tokens_by_domain.end(); ++it)
    for (auto jt = std::next(it); jt != tokens_by_domain.end(); ++jt)
      for (const std::string& tok : it->second) CHECK(jt->second.count(tok) == 0);
}

TEST_CASE("per-domain unigram KL divergence is positive (count oracle)") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 4;
  spec.docs_per_domain = 200;
  spec.shared_vocab = 10;
  spec.seed = 5;
  corpus::Corpus c = corpus::generate_synthetic(spec);
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& doc : c.docs)
    for (const auto& tok : corpus::tokenize_whitespace(doc.text)) ++counts[*doc.label][tok];
  REQUIRE(counts.size() == 4);
  for (auto it = counts.begin(); it != counts.end(); ++it)
    for (auto jt = counts.begin(); jt != counts.end(); ++jt) {
      if (it == jt) continue;
      CHECK(testing::smoothed_kl(it->second, jt->second) > 0.0);
    }
}

TEST_CASE("skew multipliers control per-domain document counts exactly") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 3;
  spec.docs_per_domain = 100;
  spec.skew = {0.5, 1.0, 2.25};
  spec.seed = 9;
  corpus::Corpus c = corpus::generate_synthetic(spec);
  std::map<std::string, std::size_t> per_domain;
  for (const auto& doc : c.docs) ++per_domain[*doc.label];
  CHECK(per_domain["dom0"] == 50);
  CHECK(per_domain["dom1"] == 100);
  CHECK(per_domain["dom2"] == 225);
}

TEST_CASE("build_vocab ranks by frequency then lexicographically") {
  corpus::Corpus c;
  c.docs = {{"1", "a a b", {}}};
  corpus::Vocab v = corpus::build_vocab(c, 10);
  CHECK(v.id_of("a") < v.id_of("b"));
  CHECK(v.id_of("a") == 3);  // specials occupy 0..2

  corpus::Corpus tie;
  tie.docs = {{"1", "b a", {}}};
  corpus::Vocab vt = corpus::build_vocab(tie, 10);
  CHECK(vt.id_of("a") < vt.id_of("b"));

  CHECK(v.id_of("zzz") == corpus::Vocab::kUnk);
  CHECK_THROWS_AS(corpus::build_vocab(c, 2), Error);
}

TEST_CASE("vocab save/load keeps indices stable") {
  corpus::Corpus c;
  c.docs = {{"1", "w1 w2 w3 w1", {}}};
  corpus::Vocab v = corpus::build_vocab(c, 100);
  fs::path path = temp_dir() / "vocab.json";
  corpus::save_vocab(v, path);
  corpus::Vocab loaded = corpus::load_vocab(path);
  CHECK(loaded.tokens == v.tokens);
  CHECK(loaded.id_of("w2") == v.id_of("w2"));
  CHECK(loaded.digest() == v.digest());
}

TEST_CASE("pack_sequences chops the BOD-joined stream and masks padding") {
  corpus::Corpus c;
  c.docs = {{"1", "a b", {}}, {"2", "c", {}}};
  corpus::Vocab v = corpus::build_vocab(c, 10);
  corpus::SequenceBatch batch = corpus::pack_sequences(c, v, 3);
  REQUIRE(batch.rows.size() == 2);
  CHECK(batch.rows[0] ==
        std::vector<std::int32_t>{corpus::Vocab::kBod, v.id_of("a"), v.id_of("b")});
  CHECK(batch.rows[1] ==
        std::vector<std::int32_t>{corpus::Vocab::kBod, v.id_of("c"), corpus::Vocab::kPad});
  CHECK(batch.mask[0] == std::vector<std::uint8_t>{1, 1, 1});
  CHECK(batch.mask[1] == std::vector<std::uint8_t>{1, 1, 0});
}

TEST_CASE("divisible stream length yields zero padded positions") {
  corpus::Corpus c;
  c.docs = {{"1", "a b c", {}}, {"2", "d e f", {}}};  // stream length 8
  corpus::Vocab v = corpus::build_vocab(c, 10);
  corpus::SequenceBatch batch = corpus::pack_sequences(c, v, 4);
  CHECK(batch.unmasked_total() == 8);
  for (const auto& mask : batch.mask)
    for (std::uint8_t bit : mask) CHECK(bit == 1);
}

TEST_CASE("unmasked positions recount the stream length independently") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 2;
  spec.docs_per_domain = 13;
  spec.doc_length_min = 3;
  spec.doc_length_max = 17;
  spec.seed = 21;
  corpus::Corpus c = corpus::generate_synthetic(spec);
  corpus::Vocab v = corpus::build_vocab(c, 4096);
  corpus::SequenceBatch batch = corpus::pack_sequences(c, v, 7);
  std::size_t expected = 0;  // independent recount: one BOD + tokens per doc
  for (const auto& doc : c.docs)
    expected += 1 + corpus::tokenize_whitespace(doc.text).size();
  CHECK(batch.unmasked_total() == expected);
}

TEST_CASE("pack round trip recovers per-document token sequences") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 3;
  spec.docs_per_domain = 9;
  spec.seed = 2;
  corpus::Corpus c = corpus::generate_synthetic(spec);
  corpus::Vocab v = corpus::build_vocab(c, 4096);
  corpus::SequenceBatch batch = corpus::pack_sequences(c, v, 5);

  std::vector<std::vector<std::int32_t>> recovered;
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    for (std::size_t p = 0; p < batch.rows[r].size(); ++p) {
      if (!batch.mask[r][p]) continue;
      std::int32_t id = batch.rows[r][p];
      if (id == corpus::Vocab::kBod) {
        recovered.emplace_back();
      } else {
        recovered.back().push_back(id);
      }
    }
  }
  REQUIRE(recovered.size() == c.docs.size());
  for (std::size_t d = 0; d < c.docs.size(); ++d)
    CHECK(recovered[d] == v.encode(c.docs[d].text));
}

TEST_CASE("pack_sequences rejects tiny seq_len and empty corpora") {
  corpus::Corpus c;
  c.docs = {{"1", "a", {}}};
  corpus::Vocab v = corpus::build_vocab(c, 10);
  CHECK_THROWS_AS(corpus::pack_sequences(c, v, 1), Error);
  corpus::Corpus empty;
  CHECK_THROWS_AS(corpus::pack_sequences(empty, v, 4), Error);
}

TEST_CASE("synthetic spec validation") {
  corpus::SyntheticSpec spec;
  spec.n_domains = 0;
  CHECK_THROWS_AS(corpus::generate_synthetic(spec), Error);
  spec.n_domains = 2;
  spec.skew = {1.0};
  CHECK_THROWS_AS(corpus::generate_synthetic(spec), Error);
  spec.skew = {1.0, -1.0};
  CHECK_THROWS_AS(corpus::generate_synthetic(spec), Error);
  spec.skew.clear();
  spec.doc_length_min = 9;
  spec.doc_length_max = 3;
  CHECK_THROWS_AS(corpus::generate_synthetic(spec), Error);
}

#pragma once

// Corpus ingestion, synthetic multi-domain generation, vocabulary
// construction, and sequence packing.
//
// Corpus files are line-delimited JSON records with fields `id` (string),
// `text` (string), and optional `label` (string), UTF-8 encoded.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "clusterlm/common.hpp"
#include "clusterlm/sha256.hpp"

namespace clusterlm::corpus {

struct Document {
  std::string id;
  std::string text;
  std::optional<std::string> label;
};

struct Corpus {
  std::vector<Document> docs;
  std::string provenance;
};

inline std::vector<std::string> tokenize_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

inline bool is_blank(const std::string& text) {
  for (char ch : text)
    if (!std::isspace(static_cast<unsigned char>(ch))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Corpus file I/O
// ---------------------------------------------------------------------------

inline std::string record_to_line(const Document& doc) {
  nlohmann::json rec;
  rec["id"] = doc.id;
  rec["text"] = doc.text;
  if (doc.label) rec["label"] = *doc.label;
  return rec.dump();
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("cannot open corpus file: " + path.string());
  Corpus corpus;
  corpus.provenance = path.string();
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object() || !rec.contains("id") ||
        !rec.contains("text") || !rec["id"].is_string() || !rec["text"].is_string()) {
      fail_validation("malformed corpus record at line " + std::to_string(line_no) +
                      " of " + path.string());
    }
    Document doc;
    doc.id = rec["id"].get<std::string>();
    doc.text = rec["text"].get<std::string>();
    if (rec.contains("label")) {
      if (!rec["label"].is_string())
        fail_validation("malformed label at line " + std::to_string(line_no));
      doc.label = rec["label"].get<std::string>();
    }
    if (is_blank(doc.text))
      fail_validation("empty document text at line " + std::to_string(line_no));
    if (!seen_ids.insert(doc.id).second)
      fail_validation("duplicate document id \"" + doc.id + "\" at line " +
                      std::to_string(line_no));
    corpus.docs.push_back(std::move(doc));
  }
  if (corpus.docs.empty()) fail_validation("empty corpus file: " + path.string());
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::string out;
  for (const Document& doc : corpus.docs) {
    out += record_to_line(doc);
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline std::string corpus_digest(const Corpus& corpus) {
  Sha256 h;
  for (const Document& doc : corpus.docs) {
    h.update(record_to_line(doc));
    h.update("\n");
  }
  return h.hex_digest();
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct Vocab {
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBod = 1;
  static constexpr std::int32_t kUnk = 2;
  static constexpr const char* kPadText = "<pad>";
  static constexpr const char* kBodText = "<bod>";
  static constexpr const char* kUnkText = "<unk>";

  std::vector<std::string> tokens;  // index == id; first three are specials
  std::unordered_map<std::string, std::int32_t> index;

  std::size_t size() const { return tokens.size(); }

  std::int32_t id_of(const std::string& token) const {
    auto it = index.find(token);
    return it == index.end() ? kUnk : it->second;
  }

  const std::string& text_of(std::int32_t id) const { return tokens[id]; }

  std::vector<std::int32_t> encode(const std::string& text) const {
    std::vector<std::int32_t> ids;
    for (const std::string& tok : tokenize_whitespace(text)) ids.push_back(id_of(tok));
    return ids;
  }

  std::string digest() const {
    Sha256 h;
    for (const std::string& tok : tokens) {
      h.update(tok);
      h.update("\n");
    }
    return h.hex_digest();
  }
};

inline Vocab make_vocab(std::vector<std::string> ranked_tokens) {
  Vocab vocab;
  vocab.tokens = {Vocab::kPadText, Vocab::kBodText, Vocab::kUnkText};
  for (std::string& tok : ranked_tokens) vocab.tokens.push_back(std::move(tok));
  for (std::size_t i = 0; i < vocab.tokens.size(); ++i)
    vocab.index.emplace(vocab.tokens[i], static_cast<std::int32_t>(i));
  return vocab;
}

// Most frequent whitespace tokens, capped at max_size including the three
// special ids. Frequency ties break lexicographically.
inline Vocab build_vocab(const Corpus& corpus, std::size_t max_size) {
  if (corpus.docs.empty()) fail_validation("build_vocab: empty corpus");
  if (max_size < 3) fail_validation("build_vocab: max_size below special token count");
  std::unordered_map<std::string, std::uint64_t> counts;
  for (const Document& doc : corpus.docs)
    for (const std::string& tok : tokenize_whitespace(doc.text)) {
      if (tok == Vocab::kPadText || tok == Vocab::kBodText || tok == Vocab::kUnkText)
        continue;
      ++counts[tok];
    }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::size_t keep = std::min(ranked.size(), max_size - 3);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return make_vocab(std::move(tokens));
}

inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["kind"] = "vocab";
  j["tokens"] = vocab.tokens;
  write_file_atomic(path, j.dump(2) + "\n");
}

inline Vocab load_vocab(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("kind", "") != "vocab")
    fail_integrity("corrupt vocab file: " + path.string());
  std::vector<std::string> tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < 3 || tokens[0] != Vocab::kPadText || tokens[1] != Vocab::kBodText ||
      tokens[2] != Vocab::kUnkText)
    fail_integrity("vocab file missing special tokens: " + path.string());
  Vocab vocab;
  vocab.tokens = std::move(tokens);
  for (std::size_t i = 0; i < vocab.tokens.size(); ++i)
    vocab.index.emplace(vocab.tokens[i], static_cast<std::int32_t>(i));
  return vocab;
}

// ---------------------------------------------------------------------------
// Sequence packing
// ---------------------------------------------------------------------------

struct SequenceBatch {
  std::size_t seq_len = 0;
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<std::vector<std::uint8_t>> mask;  // 1 = scored, 0 = padding

  std::size_t unmasked_total() const {
    std::size_t n = 0;
    for (const auto& m : mask)
      for (std::uint8_t bit : m) n += bit;
    return n;
  }
};

// Token stream: [BOD, tokens...] per document, concatenated in corpus order.
inline std::vector<std::int32_t> token_stream(const Corpus& corpus, const Vocab& vocab) {
  std::vector<std::int32_t> stream;
  for (const Document& doc : corpus.docs) {
    stream.push_back(Vocab::kBod);
    for (std::int32_t id : vocab.encode(doc.text)) stream.push_back(id);
  }
  return stream;
}

inline SequenceBatch pack_stream(const std::vector<std::int32_t>& stream,
                                 std::size_t seq_len) {
  if (seq_len < 2) fail_validation("pack_sequences: seq_len must be >= 2");
  SequenceBatch batch;
  batch.seq_len = seq_len;
  for (std::size_t start = 0; start < stream.size(); start += seq_len) {
    std::size_t end = std::min(stream.size(), start + seq_len);
    std::vector<std::int32_t> row(stream.begin() + start, stream.begin() + end);
    std::vector<std::uint8_t> row_mask(end - start, 1);
    row.resize(seq_len, Vocab::kPad);
    row_mask.resize(seq_len, 0);
    batch.rows.push_back(std::move(row));
    batch.mask.push_back(std::move(row_mask));
  }
  return batch;
}

inline SequenceBatch pack_sequences(const Corpus& corpus, const Vocab& vocab,
                                    std::size_t seq_len) {
  if (corpus.docs.empty()) fail_validation("pack_sequences: empty corpus");
  return pack_stream(token_stream(corpus, vocab), seq_len);
}

// ---------------------------------------------------------------------------
// Synthetic multi-domain corpora
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_domains = 2;
  std::size_t vocab_per_domain = 50;
  std::size_t shared_vocab = 0;
  std::size_t docs_per_domain = 100;
  std::size_t doc_length_min = 20;
  std::size_t doc_length_max = 60;
  std::vector<double> skew;  // optional per-domain document-count multipliers
  std::uint64_t seed = 0;

  void validate() const {
    if (n_domains == 0) fail_validation("synthetic spec: n_domains must be positive");
    if (vocab_per_domain == 0)
      fail_validation("synthetic spec: vocab_per_domain must be positive");
    if (docs_per_domain == 0)
      fail_validation("synthetic spec: docs_per_domain must be positive");
    if (doc_length_min == 0 || doc_length_min > doc_length_max)
      fail_validation("synthetic spec: doc length range invalid");
    if (!skew.empty()) {
      if (skew.size() != n_domains)
        fail_validation("synthetic spec: skew size must equal n_domains");
      for (double m : skew)
        if (!(m > 0.0)) fail_validation("synthetic spec: skew multipliers must be positive");
    }
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    SyntheticSpec spec;
    spec.n_domains = j.at("n_domains").get<std::size_t>();
    spec.vocab_per_domain = j.at("vocab_per_domain").get<std::size_t>();
    spec.shared_vocab = j.value("shared_vocab", std::size_t(0));
    spec.docs_per_domain = j.at("docs_per_domain").get<std::size_t>();
    spec.doc_length_min = j.at("doc_length_min").get<std::size_t>();
    spec.doc_length_max = j.at("doc_length_max").get<std::size_t>();
    if (j.contains("skew")) spec.skew = j.at("skew").get<std::vector<double>>();
    spec.seed = j.value("seed", std::uint64_t(0));
    spec.validate();
    return spec;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_domains"] = n_domains;
    j["vocab_per_domain"] = vocab_per_domain;
    j["shared_vocab"] = shared_vocab;
    j["docs_per_domain"] = docs_per_domain;
    j["doc_length_min"] = doc_length_min;
    j["doc_length_max"] = doc_length_max;
    if (!skew.empty()) j["skew"] = skew;
    j["seed"] = seed;
    return j;
  }

  std::string domain_label(std::size_t domain) const {
    return "dom" + std::to_string(domain);
  }
  std::string domain_token(std::size_t domain, std::size_t i) const {
    return "d" + std::to_string(domain) + "w" + std::to_string(i);
  }
  std::string shared_token(std::size_t i) const { return "sw" + std::to_string(i); }

  std::size_t domain_doc_count(std::size_t domain) const {
    if (skew.empty()) return docs_per_domain;
    return static_cast<std::size_t>(
        std::llround(skew[domain] * static_cast<double>(docs_per_domain)));
  }
};

// Each document is a bag of tokens drawn uniformly from its domain's
// exclusive vocabulary plus the shared vocabulary; the label records the
// generating domain. Same seed, same corpus, byte for byte.
inline Corpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Corpus corpus;
  corpus.provenance = "synthetic:" + spec.to_json().dump();
  for (std::size_t dom = 0; dom < spec.n_domains; ++dom) {
    std::vector<std::string> pool;
    pool.reserve(spec.vocab_per_domain + spec.shared_vocab);
    for (std::size_t i = 0; i < spec.vocab_per_domain; ++i)
      pool.push_back(spec.domain_token(dom, i));
    for (std::size_t i = 0; i < spec.shared_vocab; ++i)
      pool.push_back(spec.shared_token(i));
    std::size_t doc_count = spec.domain_doc_count(dom);
    for (std::size_t d = 0; d < doc_count; ++d) {
      std::size_t len =
          spec.doc_length_min +
          rng.next_below(spec.doc_length_max - spec.doc_length_min + 1);
      std::string text;
      for (std::size_t t = 0; t < len; ++t) {
        if (t > 0) text += ' ';
        text += pool[rng.next_below(pool.size())];
      }
      Document doc;
      doc.id = spec.domain_label(dom) + "-" + std::to_string(d);
      doc.text = std::move(text);
      doc.label = spec.domain_label(dom);
      corpus.docs.push_back(std::move(doc));
    }
  }
  rng.shuffle(corpus.docs);
  return corpus;
}

}  // namespace clusterlm::corpus

#pragma once

// Shared test fixtures: small in-memory expert collections built without
// the run-directory machinery, plus stub experts with fixed distributions.

#include <memory>
#include <string>
#include <vector>

#include "clusterlm/btm.hpp"
#include "clusterlm/cluster.hpp"
#include "clusterlm/corpus.hpp"
#include "clusterlm/embed.hpp"
#include "clusterlm/lm.hpp"

namespace clusterlm::testing {

// Expert with a fixed peaked distribution: `peak` gets 0.9, the rest share
// the remainder uniformly.
class PeakedStub final : public lm::ExpertModel {
 public:
  PeakedStub(const corpus::Vocab& vocab, std::int32_t peak)
      : size_(vocab.size()), peak_(peak) {
    vocab_digest_ = vocab.digest();
  }
  lm::ExpertKind kind() const override { return lm::ExpertKind::ngram; }
  std::size_t vocab_size() const override { return size_; }
  std::vector<double> next_token_probs(std::span<const std::int32_t>) const override {
    std::vector<double> p(size_, 0.1 / static_cast<double>(size_ - 1));
    p[static_cast<std::size_t>(peak_)] = 0.9;
    return p;
  }
  double next_token_prob(std::span<const std::int32_t>, std::int32_t token) const override {
    return token == peak_ ? 0.9 : 0.1 / static_cast<double>(size_ - 1);
  }
  std::unique_ptr<lm::ExpertModel> branch() const override {
    return std::make_unique<PeakedStub>(*this);
  }
  nlohmann::json state_to_json() const override { return {{"peak", peak_}}; }

 private:
  std::size_t size_;
  std::int32_t peak_;
};

// Builds a K-cluster collection over a labeled synthetic corpus: pipeline
// fit on all docs, balanced k-means centers, and one interpolated n-gram
// expert per cluster trained on the cluster's greedy slice.
inline btm::ExpertCollection build_ngram_collection(const corpus::Corpus& docs,
                                                    std::size_t k,
                                                    std::size_t seq_len = 16,
                                                    std::size_t svd_dim = 8,
                                                    std::size_t ngram_order = 2) {
  btm::ExpertCollection collection;
  collection.vocab = corpus::build_vocab(docs, 4096);
  embed::EmbedConfig embed_config;
  embed_config.svd_dim = svd_dim;
  collection.pipeline = embed::fit_pipeline(docs.docs, embed_config, 1);

  Matrix pts(docs.docs.size(), collection.pipeline.dim());
  for (std::size_t d = 0; d < docs.docs.size(); ++d) {
    std::vector<double> e = collection.pipeline.embed(docs.docs[d].text);
    std::copy(e.begin(), e.end(), pts.row(d).begin());
  }
  cluster::KMeansConfig kmeans_config;
  kmeans_config.seed = 7;
  auto [model, fit_assignment] = cluster::fit_balanced_kmeans(pts, k, kmeans_config);
  collection.clusters = std::move(model);
  cluster::Assignment assignment =
      cluster::greedy_assign(pts, collection.clusters.centers);

  std::vector<corpus::Corpus> slices(k);
  for (std::size_t d = 0; d < docs.docs.size(); ++d)
    slices[assignment.cluster_of[d]].docs.push_back(docs.docs[d]);

  lm::NGramConfig ngram_config;
  ngram_config.order = ngram_order;
  for (std::size_t j = 0; j < k; ++j) {
    auto expert = std::make_unique<lm::NGramModel>(collection.vocab, ngram_config);
    if (!slices[j].docs.empty()) {
      corpus::SequenceBatch rows =
          corpus::pack_sequences(slices[j], collection.vocab, seq_len);
      lm::TrainSchedule schedule;
      lm::train(*expert, rows, schedule);
    }
    collection.experts.push_back(std::move(expert));
    collection.checkpoint_digests.push_back("");
  }
  return collection;
}

inline corpus::Corpus two_domain_corpus(std::size_t docs_per_domain = 80,
                                        std::uint64_t seed = 19) {
  corpus::SyntheticSpec spec;
  spec.n_domains = 2;
  spec.vocab_per_domain = 40;
  spec.shared_vocab = 6;
  spec.docs_per_domain = docs_per_domain;
  spec.doc_length_min = 12;
  spec.doc_length_max = 30;
  spec.seed = seed;
  return corpus::generate_synthetic(spec);
}

}  // namespace clusterlm::testing

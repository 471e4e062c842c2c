#pragma once

// Sparse ensemble inference. Ensemble weights come from squared Euclidean
// distances between the context embedding and the cluster centers,
// sharpened by a temperature and sparsified with top-k renormalization:
//
//   p(D = j | ctx) ~ topk[ exp(-dist(h_ctx, h_cj)^2 / T) ]
//
// The mixture next-token distribution sums expert distributions under
// those weights, evaluating only the active experts. Weights are
// recomputed per incoming token; the freeze_half cache policy pins them
// after the midpoint of each document. Performance routing replaces the
// distance rule with a softmax over few-shot accuracies (fixed or
// EMA-updated variants).

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clusterlm/btm.hpp"
#include "clusterlm/cluster.hpp"
#include "clusterlm/common.hpp"
#include "clusterlm/corpus.hpp"
#include "clusterlm/embed.hpp"
#include "clusterlm/lm.hpp"

namespace clusterlm::route {

struct EnsembleWeights {
  std::vector<double> probs;          // over K experts; sums to 1
  std::vector<std::uint32_t> active;  // nonzero entries, ascending
  double temperature = 0.1;
  std::uint32_t k_active = 0;
};

// Distance-softmax weights. Ties at the top-k cutoff keep the lower index. If every
// retained weight underflows to zero, falls back to one-hot on the nearest
// center, which preserves the T -> 0 limit.
inline EnsembleWeights ensemble_weights(std::span<const double> context_embedding,
                                        const Matrix& centers, double temperature,
                                        std::uint32_t k_active) {
  const std::size_t k = centers.rows;
  if (k == 0) fail_validation("ensemble_weights: no centers");
  if (!(temperature > 0.0)) fail_validation("ensemble_weights: T must be positive");
  if (k_active < 1 || k_active > k)
    fail_validation("ensemble_weights: k_active must be in [1, K]");
  if (context_embedding.size() != centers.cols)
    fail_validation("ensemble_weights: embedding dimension mismatch");

  std::vector<double> dist_sq(k);
  std::vector<double> raw(k);
  for (std::size_t j = 0; j < k; ++j) {
    dist_sq[j] = squared_distance(context_embedding, centers.row(j));
    raw[j] = std::exp(-dist_sq[j] / temperature);
  }

  std::vector<std::uint32_t> order(k);
  for (std::size_t j = 0; j < k; ++j) order[j] = static_cast<std::uint32_t>(j);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return raw[a] > raw[b]; });

  EnsembleWeights weights;
  weights.temperature = temperature;
  weights.k_active = k_active;
  weights.probs.assign(k, 0.0);

  double sum = 0.0;
  for (std::uint32_t i = 0; i < k_active; ++i) sum += raw[order[i]];
  if (sum > 0.0) {
    for (std::uint32_t i = 0; i < k_active; ++i)
      weights.probs[order[i]] = raw[order[i]] / sum;
  } else {
    std::size_t nearest = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (dist_sq[j] < dist_sq[nearest]) nearest = j;
    weights.probs[nearest] = 1.0;
  }
  for (std::uint32_t j = 0; j < k; ++j)
    if (weights.probs[j] > 0.0) weights.active.push_back(j);
  return weights;
}

// Top-k sparsification of an existing weight vector (used by the
// performance-routing variants, whose raw weights are accuracy softmaxes).
inline EnsembleWeights sparsify(EnsembleWeights weights, std::uint32_t k_active) {
  const std::size_t k = weights.probs.size();
  if (k_active < 1 || k_active > k) fail_validation("sparsify: k_active out of range");
  std::vector<std::uint32_t> order(k);
  for (std::size_t j = 0; j < k; ++j) order[j] = static_cast<std::uint32_t>(j);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return weights.probs[a] > weights.probs[b];
  });
  std::vector<double> kept(k, 0.0);
  double sum = 0.0;
  for (std::uint32_t i = 0; i < k_active; ++i) sum += weights.probs[order[i]];
  for (std::uint32_t i = 0; i < k_active; ++i)
    kept[order[i]] = weights.probs[order[i]] / sum;
  weights.probs = std::move(kept);
  weights.active.clear();
  for (std::uint32_t j = 0; j < k; ++j)
    if (weights.probs[j] > 0.0) weights.active.push_back(j);
  weights.k_active = k_active;
  return weights;
}

// Mixture of expert next-token distributions. Only active experts
// are evaluated.
inline std::vector<double> mixture_next_token(const btm::ExpertCollection& collection,
                                              const EnsembleWeights& weights,
                                              std::span<const std::int32_t> context) {
  if (weights.probs.size() != collection.k())
    fail_validation("mixture_next_token: weight / expert count mismatch");
  std::vector<double> mix(collection.vocab.size(), 0.0);
  for (std::uint32_t j : weights.active) {
    std::vector<double> p = collection.experts[j]->next_token_probs(context);
    double w = weights.probs[j];
    for (std::size_t v = 0; v < mix.size(); ++v) mix[v] += w * p[v];
  }
  return mix;
}

inline double mixture_next_token_prob(const btm::ExpertCollection& collection,
                                      const EnsembleWeights& weights,
                                      std::span<const std::int32_t> context,
                                      std::int32_t token) {
  double p = 0.0;
  for (std::uint32_t j : weights.active)
    p += weights.probs[j] * collection.experts[j]->next_token_prob(context, token);
  return p;
}

// ---------------------------------------------------------------------------
// Ensemble perplexity with per-token or cached second-half routing
// ---------------------------------------------------------------------------

enum class CachePolicy { per_token, freeze_half };

struct EvalOptions {
  double temperature = 0.1;
  std::uint32_t k_active = 0;  // 0 = all experts
  CachePolicy policy = CachePolicy::per_token;
  std::size_t seq_len = 64;
  std::size_t context_window = 0;  // routing embedder window; 0 = full history
};

// Documents are packed exactly like lm::perplexity (one stream across
// document boundaries), so a K=1 collection reproduces the dense expert's
// perplexity bit for bit. The routing context is the current document's
// history, reset at each <bod>; freeze_half stops recomputing weights at
// the midpoint of each document's stream.
inline double eval_ensemble_ppl(const btm::ExpertCollection& collection,
                                const corpus::Corpus& docs, const EvalOptions& options) {
  if (docs.docs.empty()) fail_validation("eval_ensemble_ppl: empty corpus");
  const corpus::Vocab& vocab = collection.vocab;
  std::uint32_t k_active = options.k_active == 0
                               ? static_cast<std::uint32_t>(collection.k())
                               : options.k_active;

  std::vector<std::int32_t> stream = corpus::token_stream(docs, vocab);
  std::vector<std::size_t> doc_rel(stream.size());
  std::vector<std::size_t> doc_len(stream.size());
  {
    std::size_t pos = 0;
    for (const corpus::Document& doc : docs.docs) {
      std::size_t m = 1 + vocab.encode(doc.text).size();
      for (std::size_t i = 0; i < m; ++i) {
        doc_rel[pos] = i;
        doc_len[pos] = m;
        ++pos;
      }
    }
  }

  embed::ContextEmbedder embedder(collection.pipeline, options.context_window);
  EnsembleWeights weights;
  long double nll = 0.0L;  // same extended-precision accumulation as lm::perplexity
  const std::size_t seq_len = options.seq_len;
  for (std::size_t g = 0; g < stream.size(); ++g) {
    if (doc_rel[g] == 0) embedder.reset();
    std::size_t half = (doc_len[g] + 1) / 2;
    bool recompute =
        options.policy == CachePolicy::per_token || doc_rel[g] < half;
    if (recompute) {
      std::vector<double> ctx_embedding = embedder.embedding();
      weights = ensemble_weights(ctx_embedding, collection.clusters.centers,
                                 options.temperature, k_active);
    }
    std::size_t row_start = (g / seq_len) * seq_len;
    std::span<const std::int32_t> lm_context(stream.data() + row_start, g - row_start);
    nll += -std::log(static_cast<long double>(
        mixture_next_token_prob(collection, weights, lm_context, stream[g])));
    embedder.push(vocab.text_of(stream[g]));
  }
  return static_cast<double>(std::exp(nll / static_cast<long double>(stream.size())));
}

struct SweepRow {
  double temperature = 0.0;
  std::uint32_t k_active = 0;
  double ppl = 0.0;
};

inline std::vector<SweepRow> temperature_sweep(const btm::ExpertCollection& collection,
                                               const corpus::Corpus& docs,
                                               const std::vector<double>& temperatures,
                                               const std::vector<std::uint32_t>& top_ks,
                                               EvalOptions base = {}) {
  if (temperatures.empty() || top_ks.empty())
    fail_validation("temperature_sweep: empty grid");
  std::vector<SweepRow> rows;
  for (double t : temperatures) {
    for (std::uint32_t k : top_ks) {
      EvalOptions options = base;
      options.temperature = t;
      options.k_active = k;
      rows.push_back({t, k, eval_ensemble_ppl(collection, docs, options)});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Few-shot classification
// ---------------------------------------------------------------------------

struct FewShotExample {
  std::string text;
  std::string label;
};

struct FewShotTask {
  std::vector<FewShotExample> demonstrations;
  std::vector<FewShotExample> test;
  std::vector<std::string> label_order;
  std::map<std::string, std::string> verbalizers;

  void validate() const {
    if (label_order.empty()) fail_validation("few-shot task: no labels");
    for (const std::string& label : label_order)
      if (!verbalizers.count(label))
        fail_validation("few-shot task: missing verbalizer for label " + label);
    for (const FewShotExample& t : test)
      for (const FewShotExample& d : demonstrations)
        if (t.text == d.text)
          fail_validation("few-shot task: demonstrations overlap test examples");
  }
};

inline FewShotTask load_task(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object())
    fail_integrity("corrupt few-shot task file: " + path.string());
  FewShotTask task;
  for (const auto& e : j.at("demonstrations"))
    task.demonstrations.push_back(
        {e.at("text").get<std::string>(), e.at("label").get<std::string>()});
  for (const auto& e : j.at("test"))
    task.test.push_back(
        {e.at("text").get<std::string>(), e.at("label").get<std::string>()});
  task.label_order = j.at("label_order").get<std::vector<std::string>>();
  for (const auto& [label, verbalizer] : j.at("verbalizers").items())
    task.verbalizers[label] = verbalizer.get<std::string>();
  task.validate();
  return task;
}

namespace detail {

inline std::vector<std::int32_t> render_prompt(
    const corpus::Vocab& vocab, std::span<const FewShotExample> demonstrations,
    const FewShotTask& task, const std::string& example_text) {
  std::vector<std::int32_t> ids{corpus::Vocab::kBod};
  for (const FewShotExample& demo : demonstrations) {
    for (std::int32_t id : vocab.encode(demo.text)) ids.push_back(id);
    for (std::int32_t id : vocab.encode(task.verbalizers.at(demo.label)))
      ids.push_back(id);
  }
  for (std::int32_t id : vocab.encode(example_text)) ids.push_back(id);
  return ids;
}

inline std::string demos_and_example_text(std::span<const FewShotExample> demonstrations,
                                          const FewShotTask& task,
                                          const std::string& example_text) {
  std::string text;
  for (const FewShotExample& demo : demonstrations) {
    text += demo.text;
    text += ' ';
    text += task.verbalizers.at(demo.label);
    text += ' ';
  }
  text += example_text;
  return text;
}

inline std::vector<double> softmax(std::vector<double> scores, double tau) {
  double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (double& s : scores) {
    s = std::exp((s - mx) / tau);
    sum += s;
  }
  for (double& s : scores) s /= sum;
  return scores;
}

inline EnsembleWeights weights_from_probs(std::vector<double> probs, double tau) {
  EnsembleWeights weights;
  weights.temperature = tau;
  weights.k_active = static_cast<std::uint32_t>(probs.size());
  weights.probs = std::move(probs);
  for (std::uint32_t j = 0; j < weights.probs.size(); ++j)
    if (weights.probs[j] > 0.0) weights.active.push_back(j);
  return weights;
}

}  // namespace detail

// Scores each verbalized label by its mixture sequence log-probability
// after the demonstrations and the example; ties keep the first label in
// task order.
inline std::string classify_fewshot(const btm::ExpertCollection& collection,
                                    const EnsembleWeights& weights,
                                    const FewShotTask& task,
                                    const std::string& example_text,
                                    std::span<const FewShotExample> demonstrations) {
  const corpus::Vocab& vocab = collection.vocab;
  std::vector<std::int32_t> prompt =
      detail::render_prompt(vocab, demonstrations, task, example_text);
  std::string best_label;
  double best_score = 0.0;
  bool first = true;
  for (const std::string& label : task.label_order) {
    std::vector<std::int32_t> ids = prompt;
    double score = 0.0;
    for (std::int32_t id : vocab.encode(task.verbalizers.at(label))) {
      score += std::log(mixture_next_token_prob(collection, weights, ids, id));
      ids.push_back(id);
    }
    if (first || score > best_score) {
      best_label = label;
      best_score = score;
      first = false;
    }
  }
  return best_label;
}

inline std::string classify_fewshot(const btm::ExpertCollection& collection,
                                    const EnsembleWeights& weights,
                                    const FewShotTask& task,
                                    const std::string& example_text) {
  return classify_fewshot(collection, weights, task, example_text,
                          task.demonstrations);
}

// Cluster routing for a few-shot example: embed demonstrations + example
// through the pipeline and weight by center distances.
inline EnsembleWeights route_weights_for_example(const btm::ExpertCollection& collection,
                                                 const FewShotTask& task,
                                                 const std::string& example_text,
                                                 double temperature,
                                                 std::uint32_t k_active) {
  std::string text =
      detail::demos_and_example_text(task.demonstrations, task, example_text);
  std::vector<double> embedding = collection.pipeline.embed(text);
  return ensemble_weights(embedding, collection.clusters.centers, temperature, k_active);
}

// ---------------------------------------------------------------------------
// Performance routing (fixed and EMA-updated)
// ---------------------------------------------------------------------------

struct PerfRouteConfig {
  double tau = 1.0;        // softmax temperature over accuracies in [0, 1]
  double ema_alpha = 0.3;  // decay for the updating variant
  std::size_t permutations = 8;
  std::uint64_t seed = 0;
};

namespace detail {

inline bool expert_correct(const btm::ExpertCollection& collection, std::uint32_t expert,
                           const FewShotTask& task,
                           std::span<const FewShotExample> demonstrations,
                           const FewShotExample& example) {
  std::vector<double> one_hot(collection.k(), 0.0);
  one_hot[expert] = 1.0;
  EnsembleWeights weights = weights_from_probs(std::move(one_hot), 1.0);
  return classify_fewshot(collection, weights, task, example.text, demonstrations) ==
         example.label;
}

}  // namespace detail

// Fixed performance routing with validation examples: every validation
// example is prepended with all demonstrations; the routing distribution is
// a softmax over each expert's average accuracy.
inline EnsembleWeights perf_route_fixed_val(const btm::ExpertCollection& collection,
                                            const FewShotTask& task,
                                            std::span<const FewShotExample> validation,
                                            const PerfRouteConfig& config = {}) {
  if (validation.empty()) fail_validation("perf_route_fixed_val: empty validation set");
  for (const FewShotExample& v : validation)
    for (const FewShotExample& d : task.demonstrations)
      if (v.text == d.text)
        fail_validation("perf_route_fixed_val: validation overlaps demonstrations");
  std::vector<double> accuracy(collection.k(), 0.0);
  for (std::uint32_t e = 0; e < collection.k(); ++e) {
    std::size_t correct = 0;
    for (const FewShotExample& example : validation)
      correct += detail::expert_correct(collection, e, task, task.demonstrations, example);
    accuracy[e] = static_cast<double>(correct) / static_cast<double>(validation.size());
  }
  return detail::weights_from_probs(detail::softmax(accuracy, config.tau), config.tau);
}

// Demonstrations-only variant: seeded permutations of the demonstrations,
// all-but-last as context and the last (label removed) as the held-out
// estimate of performance.
inline EnsembleWeights perf_route_fixed_demos(const btm::ExpertCollection& collection,
                                              const FewShotTask& task,
                                              const PerfRouteConfig& config = {}) {
  if (task.demonstrations.size() < 2)
    fail_validation("perf_route_fixed_demos: need at least 2 demonstrations");
  Rng rng(config.seed);
  std::vector<double> accuracy(collection.k(), 0.0);
  for (std::size_t r = 0; r < config.permutations; ++r) {
    std::vector<FewShotExample> perm = task.demonstrations;
    rng.shuffle(perm);
    FewShotExample held_out = perm.back();
    perm.pop_back();
    for (std::uint32_t e = 0; e < collection.k(); ++e)
      accuracy[e] += detail::expert_correct(collection, e, task, perm, held_out);
  }
  for (double& a : accuracy) a /= static_cast<double>(config.permutations);
  return detail::weights_from_probs(detail::softmax(accuracy, config.tau), config.tau);
}

// Updating variant: start uniform, EMA toward each test example's accuracy
// softmax. Returns the trajectory (initial weights first).
inline std::vector<EnsembleWeights> perf_route_updating(
    const btm::ExpertCollection& collection, const FewShotTask& task,
    std::span<const FewShotExample> test_stream, const PerfRouteConfig& config = {}) {
  if (!(config.ema_alpha >= 0.0 && config.ema_alpha <= 1.0))
    fail_validation("perf_route_updating: alpha must be in [0, 1]");
  std::vector<double> probs(collection.k(),
                            1.0 / static_cast<double>(collection.k()));
  std::vector<EnsembleWeights> trajectory;
  trajectory.push_back(detail::weights_from_probs(probs, config.tau));
  for (const FewShotExample& example : test_stream) {
    std::vector<double> accuracy(collection.k(), 0.0);
    for (std::uint32_t e = 0; e < collection.k(); ++e)
      accuracy[e] = detail::expert_correct(collection, e, task, task.demonstrations,
                                           example)
                        ? 1.0
                        : 0.0;
    std::vector<double> target = detail::softmax(accuracy, config.tau);
    for (std::size_t j = 0; j < probs.size(); ++j)
      probs[j] = (1.0 - config.ema_alpha) * probs[j] + config.ema_alpha * target[j];
    trajectory.push_back(detail::weights_from_probs(probs, config.tau));
  }
  return trajectory;
}

}  // namespace clusterlm::route

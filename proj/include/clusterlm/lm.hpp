#pragma once

// Expert language models at desk scale. Two backends share one interface so
// downstream routing and orchestration stay backend-agnostic:
//
//   * NGramModel  - Jelinek-Mercer interpolation of relative frequencies
//                   across orders with a final add-alpha floor. Exactly
//                   recountable, which is what the oracle tests lean on.
//   * NeuralModel - token embeddings -> concat of the last `context`
//                   embeddings -> one tanh hidden layer -> softmax. Trained
//                   by SGD with a linear learning-rate decay to zero and
//                   dropout on the hidden layer only.
//
// Probabilities use natural logs everywhere; perplexity is exp of the mean
// negative log-likelihood over unmasked positions.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "clusterlm/common.hpp"
#include "clusterlm/corpus.hpp"
#include "clusterlm/sha256.hpp"

namespace clusterlm::lm {

enum class ExpertKind { ngram, neural };

inline const char* kind_name(ExpertKind kind) {
  return kind == ExpertKind::ngram ? "ngram" : "neural";
}

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step)
      : Error(ErrorKind::runtime,
              "training diverged (non-finite loss) at step " + std::to_string(step)),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainSchedule {
  std::size_t steps = 1;
  std::size_t batch_size = 8;
  double peak_lr = 0.1;
  double dropout = 0.0;  // hidden layer only; embeddings are never dropped
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) fail_validation("schedule: steps must be >= 1");
    if (batch_size < 1) fail_validation("schedule: batch_size must be >= 1");
    if (!(peak_lr > 0.0)) fail_validation("schedule: peak_lr must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0))
      fail_validation("schedule: dropout must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"steps", steps},
            {"batch_size", batch_size},
            {"peak_lr", peak_lr},
            {"dropout", dropout},
            {"seed", seed}};
  }
  static TrainSchedule from_json(const nlohmann::json& j) {
    TrainSchedule s;
    s.steps = j.at("steps").get<std::size_t>();
    s.batch_size = j.at("batch_size").get<std::size_t>();
    s.peak_lr = j.at("peak_lr").get<double>();
    s.dropout = j.at("dropout").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
};

class ExpertModel {
 public:
  virtual ~ExpertModel() = default;

  virtual ExpertKind kind() const = 0;
  virtual std::size_t vocab_size() const = 0;
  const std::string& vocab_digest() const { return vocab_digest_; }
  std::uint64_t trained_tokens() const { return trained_tokens_; }

  // Full next-token distribution; exp of the entries sums to 1 within 1e-9.
  virtual std::vector<double> next_token_probs(
      std::span<const std::int32_t> context) const = 0;
  virtual double next_token_prob(std::span<const std::int32_t> context,
                                 std::int32_t token) const = 0;

  std::vector<double> next_token_logprobs(std::span<const std::int32_t> context) const {
    std::vector<double> probs = next_token_probs(context);
    for (double& p : probs) p = std::log(p);
    return probs;
  }
  double next_token_logprob(std::span<const std::int32_t> context,
                            std::int32_t token) const {
    return std::log(next_token_prob(context, token));
  }

  virtual std::unique_ptr<ExpertModel> branch() const = 0;
  virtual nlohmann::json state_to_json() const = 0;

 protected:
  std::string vocab_digest_;
  std::uint64_t trained_tokens_ = 0;
};

// ---------------------------------------------------------------------------
// N-gram expert
// ---------------------------------------------------------------------------

struct NGramConfig {
  std::size_t order = 3;
  std::vector<double> lambdas;  // empty -> uniform over orders
  double alpha = 0.01;          // final add-alpha floor

  void validate() const {
    if (order < 1 || order > 5) fail_validation("ngram: order must be in [1, 5]");
    if (!(alpha >= 0.0)) fail_validation("ngram: alpha must be >= 0");
    if (!lambdas.empty()) {
      if (lambdas.size() != order)
        fail_validation("ngram: lambda count must equal order");
      double sum = 0.0;
      for (double l : lambdas) {
        if (l < 0.0) fail_validation("ngram: lambdas must be >= 0");
        sum += l;
      }
      if (std::fabs(sum - 1.0) > 1e-9) fail_validation("ngram: lambdas must sum to 1");
    }
  }

  std::vector<double> effective_lambdas() const {
    if (!lambdas.empty()) return lambdas;
    return std::vector<double>(order, 1.0 / static_cast<double>(order));
  }
};

class NGramModel final : public ExpertModel {
 public:
  struct ContextCounts {
    std::unordered_map<std::int32_t, std::int64_t> tokens;
    std::int64_t total = 0;
  };
  using Level = std::unordered_map<std::uint64_t, ContextCounts>;

  NGramModel(const corpus::Vocab& vocab, NGramConfig config) : config_(config) {
    config_.validate();
    if (vocab.size() > 65535)
      fail_validation("ngram: vocab too large for context packing (max 65535)");
    vocab_size_ = vocab.size();
    vocab_digest_ = vocab.digest();
    lambdas_ = config_.effective_lambdas();
    levels_.resize(config_.order);
  }

  ExpertKind kind() const override { return ExpertKind::ngram; }
  std::size_t vocab_size() const override { return vocab_size_; }
  const NGramConfig& config() const { return config_; }
  const std::vector<Level>& levels() const { return levels_; }

  static std::uint64_t pack_context(std::span<const std::int32_t> tokens) {
    std::uint64_t key = 0;
    for (std::int32_t tok : tokens)
      key = (key << 16) | static_cast<std::uint64_t>(static_cast<std::uint16_t>(tok));
    return key;
  }

  // Counts every within-segment n-gram of every order in a single rolling
  // pass. Each call is an independent segment; no context crosses calls.
  void ingest(std::span<const std::int32_t> segment) {
    for (std::size_t i = 0; i < segment.size(); ++i) {
      for (std::size_t k = 1; k <= config_.order; ++k) {
        if (i + 1 < k) break;
        std::uint64_t key = pack_context(segment.subspan(i + 1 - k, k - 1));
        ContextCounts& cc = levels_[k - 1][key];
        ++cc.tokens[segment[i]];
        ++cc.total;
      }
    }
    trained_tokens_ += segment.size();
  }

  double next_token_prob(std::span<const std::int32_t> context,
                         std::int32_t token) const override {
    double accum = 0.0;
    double lambda_sum = 0.0;
    for (std::size_t k = 1; k <= config_.order; ++k) {
      if (context.size() + 1 < k) break;
      const ContextCounts* cc = find_context(k, context);
      if (cc == nullptr || cc->total == 0) continue;
      lambda_sum += lambdas_[k - 1];
      auto it = cc->tokens.find(token);
      if (it != cc->tokens.end())
        accum += lambdas_[k - 1] * (static_cast<double>(it->second) /
                                    static_cast<double>(cc->total));
    }
    return floor_probability(accum, lambda_sum);
  }

  std::vector<double> next_token_probs(
      std::span<const std::int32_t> context) const override {
    std::vector<double> accum(vocab_size_, 0.0);
    double lambda_sum = 0.0;
    for (std::size_t k = 1; k <= config_.order; ++k) {
      if (context.size() + 1 < k) break;
      const ContextCounts* cc = find_context(k, context);
      if (cc == nullptr || cc->total == 0) continue;
      lambda_sum += lambdas_[k - 1];
      for (const auto& [tok, count] : cc->tokens)
        accum[tok] += lambdas_[k - 1] *
                      (static_cast<double>(count) / static_cast<double>(cc->total));
    }
    for (double& p : accum) p = floor_probability(p, lambda_sum);
    return accum;
  }

  std::unique_ptr<ExpertModel> branch() const override {
    return std::make_unique<NGramModel>(*this);
  }

  nlohmann::json state_to_json() const override {
    nlohmann::json j;
    j["order"] = config_.order;
    j["lambdas"] = lambdas_;
    j["alpha"] = config_.alpha;
    j["vocab_size"] = vocab_size_;
    nlohmann::json levels = nlohmann::json::array();
    for (const Level& level : levels_) {
      // Canonical order: contexts and tokens sorted, so identical count
      // tables serialize to identical bytes regardless of insertion order.
      std::map<std::uint64_t, const ContextCounts*> sorted;
      for (const auto& [key, cc] : level) sorted.emplace(key, &cc);
      nlohmann::json level_json = nlohmann::json::array();
      for (const auto& [key, cc] : sorted) {
        std::map<std::int32_t, std::int64_t> toks(cc->tokens.begin(), cc->tokens.end());
        nlohmann::json entry;
        entry["ctx"] = key;
        entry["total"] = cc->total;
        nlohmann::json counts = nlohmann::json::array();
        for (const auto& [tok, count] : toks)
          counts.push_back(nlohmann::json::array({tok, count}));
        entry["counts"] = std::move(counts);
        level_json.push_back(std::move(entry));
      }
      levels.push_back(std::move(level_json));
    }
    j["levels"] = std::move(levels);
    return j;
  }

  static std::unique_ptr<NGramModel> from_state_json(const nlohmann::json& j,
                                                     const std::string& vocab_digest,
                                                     std::uint64_t trained_tokens) {
    NGramConfig config;
    config.order = j.at("order").get<std::size_t>();
    config.lambdas = j.at("lambdas").get<std::vector<double>>();
    config.alpha = j.at("alpha").get<double>();
    auto model = std::unique_ptr<NGramModel>(new NGramModel());
    model->config_ = config;
    model->lambdas_ = config.lambdas;
    model->vocab_size_ = j.at("vocab_size").get<std::size_t>();
    model->vocab_digest_ = vocab_digest;
    model->trained_tokens_ = trained_tokens;
    model->levels_.resize(config.order);
    const nlohmann::json& levels = j.at("levels");
    for (std::size_t k = 0; k < config.order; ++k) {
      for (const auto& entry : levels.at(k)) {
        ContextCounts cc;
        cc.total = entry.at("total").get<std::int64_t>();
        for (const auto& pair : entry.at("counts"))
          cc.tokens[pair.at(0).get<std::int32_t>()] = pair.at(1).get<std::int64_t>();
        model->levels_[k].emplace(entry.at("ctx").get<std::uint64_t>(), std::move(cc));
      }
    }
    return model;
  }

 private:
  NGramModel() = default;

  const ContextCounts* find_context(std::size_t k,
                                    std::span<const std::int32_t> context) const {
    std::uint64_t key = pack_context(context.subspan(context.size() - (k - 1), k - 1));
    const Level& level = levels_[k - 1];
    auto it = level.find(key);
    return it == level.end() ? nullptr : &it->second;
  }

  double floor_probability(double accum, double lambda_sum) const {
    double denom = lambda_sum + config_.alpha * static_cast<double>(vocab_size_);
    if (denom == 0.0) return 1.0 / static_cast<double>(vocab_size_);
    return (accum + config_.alpha) / denom;
  }

  NGramConfig config_;
  std::vector<double> lambdas_;
  std::size_t vocab_size_ = 0;
  std::vector<Level> levels_;
};

// Recounts every n-gram of every order from scratch with an independent
// nested scan and compares against the incrementally maintained tables.
inline bool recount_oracle(const NGramModel& model,
                           const std::vector<std::vector<std::int32_t>>& segments) {
  std::size_t order = model.config().order;
  std::vector<NGramModel::Level> expected(order);
  for (const auto& segment : segments) {
    for (std::size_t k = 1; k <= order; ++k) {
      if (segment.size() + 1 < k) continue;
      for (std::size_t i = k - 1; i < segment.size(); ++i) {
        std::uint64_t key = NGramModel::pack_context(
            std::span<const std::int32_t>(segment).subspan(i + 1 - k, k - 1));
        auto& cc = expected[k - 1][key];
        ++cc.tokens[segment[i]];
        ++cc.total;
      }
    }
  }
  for (std::size_t k = 0; k < order; ++k) {
    const auto& actual = model.levels()[k];
    if (actual.size() != expected[k].size()) return false;
    for (const auto& [key, cc] : expected[k]) {
      auto it = actual.find(key);
      if (it == actual.end()) return false;
      if (it->second.total != cc.total) return false;
      if (it->second.tokens.size() != cc.tokens.size()) return false;
      for (const auto& [tok, count] : cc.tokens) {
        auto jt = it->second.tokens.find(tok);
        if (jt == it->second.tokens.end() || jt->second != count) return false;
      }
    }
  }
  return true;
}

inline bool recount_oracle(const NGramModel& model,
                           const std::vector<std::int32_t>& stream) {
  return recount_oracle(model, std::vector<std::vector<std::int32_t>>{stream});
}

// ---------------------------------------------------------------------------
// Neural expert
// ---------------------------------------------------------------------------

struct NeuralConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t context = 3;

  void validate() const {
    if (embed_dim == 0 || hidden_dim == 0 || context == 0)
      fail_validation("neural: dimensions must be positive");
  }
};

class NeuralModel final : public ExpertModel {
 public:
  NeuralModel(const corpus::Vocab& vocab, NeuralConfig config, std::uint64_t seed)
      : config_(config) {
    config_.validate();
    vocab_size_ = vocab.size();
    vocab_digest_ = vocab.digest();
    init_seed_ = seed;
    Rng rng(derive_seed(seed, 0x6e657572));
    const std::size_t V = vocab_size_, e = config_.embed_dim, h = config_.hidden_dim;
    const std::size_t in = e * config_.context;
    embeddings_.resize(V * e);
    w1_.resize(h * in);
    b1_.assign(h, 0.0);
    w2_.resize(V * h);
    b2_.assign(V, 0.0);
    for (double& v : embeddings_) v = rng.next_uniform(-0.1, 0.1);
    double limit1 = std::sqrt(6.0 / static_cast<double>(in + h));
    for (double& v : w1_) v = rng.next_uniform(-limit1, limit1);
    double limit2 = std::sqrt(6.0 / static_cast<double>(h + V));
    for (double& v : w2_) v = rng.next_uniform(-limit2, limit2);
  }

  ExpertKind kind() const override { return ExpertKind::neural; }
  std::size_t vocab_size() const override { return vocab_size_; }
  const NeuralConfig& config() const { return config_; }

  std::vector<double> next_token_probs(
      std::span<const std::int32_t> context) const override {
    Workspace ws(config_, vocab_size_);
    forward(window(context), nullptr, ws);
    std::vector<double> probs(vocab_size_);
    for (std::size_t v = 0; v < vocab_size_; ++v) probs[v] = std::exp(ws.logp[v]);
    return probs;
  }

  double next_token_prob(std::span<const std::int32_t> context,
                         std::int32_t token) const override {
    Workspace ws(config_, vocab_size_);
    forward(window(context), nullptr, ws);
    return std::exp(ws.logp[static_cast<std::size_t>(token)]);
  }

  std::unique_ptr<ExpertModel> branch() const override {
    return std::make_unique<NeuralModel>(*this);
  }

  struct Gradients {
    std::vector<double> embeddings, w1, b1, w2, b2;
    explicit Gradients(const NeuralModel& m)
        : embeddings(m.embeddings_.size(), 0.0),
          w1(m.w1_.size(), 0.0),
          b1(m.b1_.size(), 0.0),
          w2(m.w2_.size(), 0.0),
          b2(m.b2_.size(), 0.0) {}
  };

  // Mean masked cross-entropy over the rows plus its gradient. With
  // dropout_rng == nullptr the forward pass is deterministic (evaluation
  // mode); that path is also what the finite-difference check probes.
  double loss_and_grad(const std::vector<std::vector<std::int32_t>>& rows,
                       const std::vector<std::vector<std::uint8_t>>& mask,
                       double dropout, Rng* dropout_rng, Gradients* grads) const {
    const std::size_t h = config_.hidden_dim;
    Workspace ws(config_, vocab_size_);
    std::vector<double> drop_scale(h, 1.0);
    double total_loss = 0.0;
    std::size_t total_positions = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t p = 0; p < rows[r].size(); ++p) {
        if (!mask[r][p]) continue;
        ++total_positions;
        std::span<const std::int32_t> prefix(rows[r].data(), p);
        std::vector<std::int32_t> ctx = window(prefix);
        const std::vector<double>* scale = nullptr;
        if (dropout_rng != nullptr && dropout > 0.0) {
          for (std::size_t i = 0; i < h; ++i)
            drop_scale[i] = dropout_rng->next_real01() < dropout
                                ? 0.0
                                : 1.0 / (1.0 - dropout);
          scale = &drop_scale;
        }
        forward(ctx, scale, ws);
        total_loss += -ws.logp[static_cast<std::size_t>(rows[r][p])];
        if (grads != nullptr) backward(ctx, rows[r][p], scale, ws, *grads);
      }
    }
    if (total_positions == 0) return 0.0;
    double inv = 1.0 / static_cast<double>(total_positions);
    if (grads != nullptr) {
      for (double& g : grads->embeddings) g *= inv;
      for (double& g : grads->w1) g *= inv;
      for (double& g : grads->b1) g *= inv;
      for (double& g : grads->w2) g *= inv;
      for (double& g : grads->b2) g *= inv;
    }
    return total_loss * inv;
  }

  void apply_gradients(const Gradients& grads, double lr) {
    auto apply = [lr](std::vector<double>& param, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
    };
    apply(embeddings_, grads.embeddings);
    apply(w1_, grads.w1);
    apply(b1_, grads.b1);
    apply(w2_, grads.w2);
    apply(b2_, grads.b2);
  }

  std::vector<std::vector<double>*> parameter_tensors() {
    return {&embeddings_, &w1_, &b1_, &w2_, &b2_};
  }
  std::vector<const std::vector<double>*> gradient_tensors(Gradients& g) const {
    return {&g.embeddings, &g.w1, &g.b1, &g.w2, &g.b2};
  }

  void note_trained_tokens(std::uint64_t n) { trained_tokens_ += n; }

  nlohmann::json state_to_json() const override {
    nlohmann::json j;
    j["embed_dim"] = config_.embed_dim;
    j["hidden_dim"] = config_.hidden_dim;
    j["context"] = config_.context;
    j["vocab_size"] = vocab_size_;
    j["init_seed"] = init_seed_;
    j["embeddings"] = embeddings_;
    j["w1"] = w1_;
    j["b1"] = b1_;
    j["w2"] = w2_;
    j["b2"] = b2_;
    return j;
  }

  static std::unique_ptr<NeuralModel> from_state_json(const nlohmann::json& j,
                                                      const std::string& vocab_digest,
                                                      std::uint64_t trained_tokens) {
    auto model = std::unique_ptr<NeuralModel>(new NeuralModel());
    model->config_.embed_dim = j.at("embed_dim").get<std::size_t>();
    model->config_.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    model->config_.context = j.at("context").get<std::size_t>();
    model->vocab_size_ = j.at("vocab_size").get<std::size_t>();
    model->init_seed_ = j.at("init_seed").get<std::uint64_t>();
    model->vocab_digest_ = vocab_digest;
    model->trained_tokens_ = trained_tokens;
    model->embeddings_ = j.at("embeddings").get<std::vector<double>>();
    model->w1_ = j.at("w1").get<std::vector<double>>();
    model->b1_ = j.at("b1").get<std::vector<double>>();
    model->w2_ = j.at("w2").get<std::vector<double>>();
    model->b2_ = j.at("b2").get<std::vector<double>>();
    return model;
  }

 private:
  NeuralModel() = default;

  struct Workspace {
    Workspace(const NeuralConfig& c, std::size_t vocab)
        : x(c.embed_dim * c.context),
          tanh_z(c.hidden_dim),
          hidden(c.hidden_dim),
          logits(vocab),
          logp(vocab) {}
    std::vector<double> x, tanh_z, hidden, logits, logp;
  };

  // Last `context` tokens of the prefix, left-padded with <pad>.
  std::vector<std::int32_t> window(std::span<const std::int32_t> prefix) const {
    std::vector<std::int32_t> ctx(config_.context, corpus::Vocab::kPad);
    std::size_t take = std::min(prefix.size(), config_.context);
    for (std::size_t i = 0; i < take; ++i)
      ctx[config_.context - take + i] = prefix[prefix.size() - take + i];
    return ctx;
  }

  void forward(const std::vector<std::int32_t>& ctx,
               const std::vector<double>* drop_scale, Workspace& ws) const {
    const std::size_t e = config_.embed_dim, h = config_.hidden_dim;
    const std::size_t in = e * config_.context;
    for (std::size_t c = 0; c < config_.context; ++c) {
      const double* row = embeddings_.data() + static_cast<std::size_t>(ctx[c]) * e;
      for (std::size_t i = 0; i < e; ++i) ws.x[c * e + i] = row[i];
    }
    for (std::size_t i = 0; i < h; ++i) {
      double z = b1_[i];
      const double* wrow = w1_.data() + i * in;
      for (std::size_t j = 0; j < in; ++j) z += wrow[j] * ws.x[j];
      ws.tanh_z[i] = std::tanh(z);
      ws.hidden[i] = drop_scale ? ws.tanh_z[i] * (*drop_scale)[i] : ws.tanh_z[i];
    }
    double max_logit = -1e300;
    for (std::size_t v = 0; v < vocab_size_; ++v) {
      double z = b2_[v];
      const double* wrow = w2_.data() + v * h;
      for (std::size_t i = 0; i < h; ++i) z += wrow[i] * ws.hidden[i];
      ws.logits[v] = z;
      if (z > max_logit) max_logit = z;
    }
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab_size_; ++v) sum += std::exp(ws.logits[v] - max_logit);
    double lse = max_logit + std::log(sum);
    for (std::size_t v = 0; v < vocab_size_; ++v) ws.logp[v] = ws.logits[v] - lse;
  }

  void backward(const std::vector<std::int32_t>& ctx, std::int32_t target,
                const std::vector<double>* drop_scale, const Workspace& ws,
                Gradients& grads) const {
    const std::size_t e = config_.embed_dim, h = config_.hidden_dim;
    const std::size_t in = e * config_.context;
    std::vector<double> dlogits(vocab_size_);
    for (std::size_t v = 0; v < vocab_size_; ++v) dlogits[v] = std::exp(ws.logp[v]);
    dlogits[static_cast<std::size_t>(target)] -= 1.0;

    std::vector<double> dhidden(h, 0.0);
    for (std::size_t v = 0; v < vocab_size_; ++v) {
      double dv = dlogits[v];
      if (dv == 0.0) continue;
      double* gw2 = grads.w2.data() + v * h;
      const double* w2row = w2_.data() + v * h;
      for (std::size_t i = 0; i < h; ++i) {
        gw2[i] += dv * ws.hidden[i];
        dhidden[i] += dv * w2row[i];
      }
      grads.b2[v] += dv;
    }

    std::vector<double> dx(in, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      double pass = drop_scale ? dhidden[i] * (*drop_scale)[i] : dhidden[i];
      double dz = pass * (1.0 - ws.tanh_z[i] * ws.tanh_z[i]);
      if (dz == 0.0) continue;
      double* gw1 = grads.w1.data() + i * in;
      const double* w1row = w1_.data() + i * in;
      for (std::size_t j = 0; j < in; ++j) {
        gw1[j] += dz * ws.x[j];
        dx[j] += dz * w1row[j];
      }
      grads.b1[i] += dz;
    }

    for (std::size_t c = 0; c < config_.context; ++c) {
      double* ge = grads.embeddings.data() + static_cast<std::size_t>(ctx[c]) * e;
      for (std::size_t i = 0; i < e; ++i) ge[i] += dx[c * e + i];
    }
  }

  NeuralConfig config_;
  std::size_t vocab_size_ = 0;
  std::uint64_t init_seed_ = 0;
  std::vector<double> embeddings_, w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Seeding, branching, training
// ---------------------------------------------------------------------------

struct ExpertConfig {
  ExpertKind kind = ExpertKind::ngram;
  NGramConfig ngram;
  NeuralConfig neural;
};

inline std::unique_ptr<ExpertModel> new_seed(const ExpertConfig& config,
                                             const corpus::Vocab& vocab,
                                             std::uint64_t seed) {
  if (config.kind == ExpertKind::ngram)
    return std::make_unique<NGramModel>(vocab, config.ngram);
  return std::make_unique<NeuralModel>(vocab, config.neural, seed);
}

inline std::unique_ptr<ExpertModel> branch(const ExpertModel& model) {
  return model.branch();
}

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> step_seconds;
  std::uint64_t tokens_seen = 0;

  double max_seconds_per_update() const {
    double mx = 0.0;
    for (double s : step_seconds) mx = std::max(mx, s);
    return mx;
  }
};

namespace detail {

inline std::vector<std::size_t> step_row_indices(std::size_t step,
                                                 std::size_t batch_size,
                                                 std::size_t total_rows) {
  std::vector<std::size_t> rows(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b)
    rows[b] = (step * batch_size + b) % total_rows;
  return rows;
}

}  // namespace detail

// N-gram training ingests every row exactly once (schedule fields other
// than batch grouping are irrelevant to counting); the per-step loss is the
// prequential mean NLL of the group under the counts accumulated so far.
// Neural training runs schedule.steps SGD steps over the rows cyclically
// with lr_t = peak * (1 - t/steps).
inline TrainResult train(ExpertModel& model, const corpus::SequenceBatch& batch,
                         const TrainSchedule& schedule) {
  schedule.validate();
  if (batch.rows.empty()) fail_validation("train: empty batch");
  TrainResult result;
  using clock = std::chrono::steady_clock;

  if (model.kind() == ExpertKind::ngram) {
    auto& ngram = static_cast<NGramModel&>(model);
    for (std::size_t start = 0; start < batch.rows.size(); start += schedule.batch_size) {
      auto t0 = clock::now();
      std::size_t end = std::min(batch.rows.size(), start + schedule.batch_size);
      double nll = 0.0;
      std::size_t positions = 0;
      std::vector<std::vector<std::int32_t>> prefixes;
      for (std::size_t r = start; r < end; ++r) {
        std::size_t keep = 0;
        while (keep < batch.rows[r].size() && batch.mask[r][keep]) ++keep;
        std::span<const std::int32_t> row(batch.rows[r].data(), keep);
        for (std::size_t p = 0; p < keep; ++p) {
          nll += -std::log(ngram.next_token_prob(row.first(p), row[p]));
          ++positions;
        }
        prefixes.emplace_back(row.begin(), row.end());
      }
      for (const auto& prefix : prefixes) {
        ngram.ingest(prefix);
        result.tokens_seen += prefix.size();
      }
      result.step_losses.push_back(positions > 0 ? nll / static_cast<double>(positions)
                                                 : 0.0);
      result.step_seconds.push_back(
          std::chrono::duration<double>(clock::now() - t0).count());
    }
    return result;
  }

  auto& neural = static_cast<NeuralModel&>(model);
  Rng dropout_rng(derive_seed(schedule.seed, 0x64726f70));
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    auto t0 = clock::now();
    std::vector<std::size_t> indices =
        detail::step_row_indices(step, schedule.batch_size, batch.rows.size());
    std::vector<std::vector<std::int32_t>> rows;
    std::vector<std::vector<std::uint8_t>> mask;
    std::size_t step_tokens = 0;
    for (std::size_t idx : indices) {
      rows.push_back(batch.rows[idx]);
      mask.push_back(batch.mask[idx]);
      for (std::uint8_t bit : batch.mask[idx]) step_tokens += bit;
    }
    NeuralModel::Gradients grads(neural);
    double loss = neural.loss_and_grad(rows, mask, schedule.dropout, &dropout_rng, &grads);
    if (!std::isfinite(loss)) throw DivergenceError(step);
    double lr = schedule.peak_lr *
                (1.0 - static_cast<double>(step) / static_cast<double>(schedule.steps));
    neural.apply_gradients(grads, lr);
    neural.note_trained_tokens(step_tokens);
    result.tokens_seen += step_tokens;
    result.step_losses.push_back(loss);
    result.step_seconds.push_back(
        std::chrono::duration<double>(clock::now() - t0).count());
  }
  return result;
}

// Central finite differences against the analytic gradient, parameter-wise.
inline double grad_check(NeuralModel& model, const corpus::SequenceBatch& batch,
                         double epsilon = 1e-5) {
  NeuralModel::Gradients grads(model);
  model.loss_and_grad(batch.rows, batch.mask, 0.0, nullptr, &grads);
  auto params = model.parameter_tensors();
  auto grad_views = model.gradient_tensors(grads);
  double max_rel = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<double>& tensor = *params[t];
    const std::vector<double>& analytic = *grad_views[t];
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      double original = tensor[i];
      tensor[i] = original + epsilon;
      double up = model.loss_and_grad(batch.rows, batch.mask, 0.0, nullptr, nullptr);
      tensor[i] = original - epsilon;
      double down = model.loss_and_grad(batch.rows, batch.mask, 0.0, nullptr, nullptr);
      tensor[i] = original;
      double numeric = (up - down) / (2.0 * epsilon);
      double denom = std::max(std::fabs(analytic[i]) + std::fabs(numeric), 1e-4);
      max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
    }
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

// NLL accumulates in extended precision so that exactly-representable
// uniform distributions (e.g. 1/16 over 16 tokens) survive the exp/log
// round trip: a uniform model over |V| scores ppl == |V| on the nose.
inline double perplexity(const ExpertModel& model, const corpus::Corpus& docs,
                         const corpus::Vocab& vocab, std::size_t seq_len) {
  if (docs.docs.empty()) fail_validation("perplexity: empty corpus");
  corpus::SequenceBatch batch = corpus::pack_sequences(docs, vocab, seq_len);
  long double nll = 0.0L;
  std::size_t positions = 0;
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    std::span<const std::int32_t> row(batch.rows[r]);
    for (std::size_t p = 0; p < row.size(); ++p) {
      if (!batch.mask[r][p]) continue;
      nll += -std::log(static_cast<long double>(model.next_token_prob(row.first(p), row[p])));
      ++positions;
    }
  }
  return static_cast<double>(std::exp(nll / static_cast<long double>(positions)));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::uint32_t cluster_id = 0;
  TrainSchedule schedule;
  std::string data_digest;
  std::string content_digest;
};

inline nlohmann::json checkpoint_payload(const ExpertModel& model,
                                         const CheckpointMeta& meta) {
  nlohmann::json j;
  j["version"] = 1;
  j["kind"] = "expert_checkpoint";
  j["expert_kind"] = kind_name(model.kind());
  j["vocab_digest"] = model.vocab_digest();
  j["trained_tokens"] = model.trained_tokens();
  j["cluster_id"] = meta.cluster_id;
  j["schedule"] = meta.schedule.to_json();
  j["data_digest"] = meta.data_digest;
  j["state"] = model.state_to_json();
  return j;
}

inline std::string checkpoint_digest(const ExpertModel& model,
                                     const CheckpointMeta& meta) {
  return sha256_hex(checkpoint_payload(model, meta).dump());
}

inline void save_checkpoint(const ExpertModel& model, const CheckpointMeta& meta,
                            const std::filesystem::path& path) {
  nlohmann::json j = checkpoint_payload(model, meta);
  j["content_digest"] = sha256_hex(j.dump());
  write_file_atomic(path, j.dump() + "\n");
}

struct LoadedCheckpoint {
  std::unique_ptr<ExpertModel> model;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("kind", "") != "expert_checkpoint")
    fail_integrity("corrupt checkpoint file: " + path.string());
  if (j.value("version", 0) != 1)
    fail_integrity("checkpoint version mismatch: " + path.string());
  std::string stored_digest = j.value("content_digest", "");
  nlohmann::json payload = j;
  payload.erase("content_digest");
  if (sha256_hex(payload.dump()) != stored_digest)
    fail_integrity("checkpoint digest mismatch: " + path.string());

  LoadedCheckpoint out;
  out.meta.cluster_id = j.at("cluster_id").get<std::uint32_t>();
  out.meta.schedule = TrainSchedule::from_json(j.at("schedule"));
  out.meta.data_digest = j.value("data_digest", "");
  out.meta.content_digest = stored_digest;
  std::string expert_kind = j.at("expert_kind").get<std::string>();
  std::string vocab_digest = j.at("vocab_digest").get<std::string>();
  std::uint64_t trained = j.at("trained_tokens").get<std::uint64_t>();
  if (expert_kind == "ngram") {
    out.model = NGramModel::from_state_json(j.at("state"), vocab_digest, trained);
  } else if (expert_kind == "neural") {
    out.model = NeuralModel::from_state_json(j.at("state"), vocab_digest, trained);
  } else {
    fail_integrity("unknown expert kind in checkpoint: " + expert_kind);
  }
  return out;
}

}  // namespace clusterlm::lm

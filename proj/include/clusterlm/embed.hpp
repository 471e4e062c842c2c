#pragma once

// Document embedding pipeline: tf-idf with stop-word removal and number
// masking, truncated SVD via an exact Gram-matrix eigendecomposition, and
// per-dimension standardization. The pipeline is fit on a single shard and
// is immutable afterwards; transform/embed are safe to call concurrently.
//
// Pinned formulas:
//   idf(f) = ln((1 + N) / (1 + df(f))) + 1, N = fit-document count
//   rows are L2-normalized at transform time
//   embedding = (components * tfidf(text) - mean) / scale

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
#include "clusterlm/corpus.hpp"
#include "clusterlm/linalg.hpp"
#include "clusterlm/sha256.hpp"
#include "clusterlm/stopwords.hpp"

namespace clusterlm::embed {

struct SparseVec {
  // (column, value), sorted by column.
  std::vector<std::pair<std::int32_t, double>> entries;

  double norm() const {
    double acc = 0.0;
    for (const auto& [col, val] : entries) acc += val * val;
    return std::sqrt(acc);
  }
};

// A token counts as numeric if every character is a digit or punctuation
// and at least one digit is present ("911", "3.14", "1,000").
inline bool is_numeric_token(const std::string& token) {
  bool has_digit = false;
  for (char ch : token) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isdigit(c)) {
      has_digit = true;
    } else if (!std::ispunct(c)) {
      return false;
    }
  }
  return has_digit;
}

struct TfidfConfig {
  std::vector<std::string> stopwords = default_stopwords();
  std::string mask_token = "<num>";
};

struct TfidfModel {
  std::vector<std::string> features;  // sorted; index == column
  std::unordered_map<std::string, std::int32_t> feature_index;
  std::vector<double> idf;
  std::unordered_set<std::string> stopwords;
  std::string mask_token = "<num>";

  std::size_t feature_count() const { return features.size(); }

  // Number masking happens before counting; stop-words are dropped.
  std::optional<std::string> map_token(const std::string& token) const {
    const std::string& mapped = is_numeric_token(token) ? mask_token : token;
    if (stopwords.count(mapped)) return std::nullopt;
    return mapped;
  }

  std::optional<std::int32_t> feature_of(const std::string& token) const {
    auto mapped = map_token(token);
    if (!mapped) return std::nullopt;
    auto it = feature_index.find(*mapped);
    if (it == feature_index.end()) return std::nullopt;
    return it->second;
  }
};

inline TfidfModel fit_tfidf(std::span<const corpus::Document> docs,
                            const TfidfConfig& config = {}) {
  if (docs.size() < 2) fail_validation("fit_tfidf: need at least 2 documents");
  TfidfModel model;
  model.stopwords.insert(config.stopwords.begin(), config.stopwords.end());
  model.mask_token = config.mask_token;

  std::unordered_map<std::string, std::size_t> df;
  for (const corpus::Document& doc : docs) {
    std::unordered_set<std::string> seen;
    for (const std::string& tok : corpus::tokenize_whitespace(doc.text)) {
      auto mapped = model.map_token(tok);
      if (mapped && seen.insert(*mapped).second) ++df[*mapped];
    }
  }
  if (df.empty())
    fail_validation("fit_tfidf: all documents empty after stopword/number filtering");

  model.features.reserve(df.size());
  for (const auto& [tok, count] : df) model.features.push_back(tok);
  std::sort(model.features.begin(), model.features.end());
  model.idf.resize(model.features.size());
  const double n_docs = static_cast<double>(docs.size());
  for (std::size_t i = 0; i < model.features.size(); ++i) {
    model.feature_index.emplace(model.features[i], static_cast<std::int32_t>(i));
    double docfreq = static_cast<double>(df[model.features[i]]);
    model.idf[i] = std::log((1.0 + n_docs) / (1.0 + docfreq)) + 1.0;
  }
  return model;
}

// Raw term counts weighted by idf, L2-normalized. All features unseen ->
// zero vector.
inline SparseVec transform_tfidf(const TfidfModel& model, const std::string& text) {
  std::unordered_map<std::int32_t, double> counts;
  for (const std::string& tok : corpus::tokenize_whitespace(text)) {
    auto col = model.feature_of(tok);
    if (col) counts[*col] += 1.0;
  }
  SparseVec vec;
  vec.entries.reserve(counts.size());
  for (const auto& [col, count] : counts)
    vec.entries.emplace_back(col, count * model.idf[col]);
  std::sort(vec.entries.begin(), vec.entries.end());
  double norm = vec.norm();
  if (norm > 0.0)
    for (auto& [col, val] : vec.entries) val /= norm;
  return vec;
}

// ---------------------------------------------------------------------------
// Truncated SVD projector with standardization
// ---------------------------------------------------------------------------

struct Projector {
  std::size_t dim = 0;            // effective dimension (after rank clamping)
  std::size_t feature_count = 0;  // F
  std::size_t requested_dim = 0;
  bool clamped = false;
  std::vector<double> components;  // dim x F, row-major
  std::vector<double> mean;        // per projected dimension
  std::vector<double> scale;       // floored at kScaleFloor
  std::vector<double> spectrum;    // top eigenvalues of the Gram matrix

  static constexpr double kScaleFloor = 1e-8;

  std::vector<double> project(const SparseVec& vec) const {
    std::vector<double> out(dim, 0.0);
    for (const auto& [col, val] : vec.entries) {
      const double* comp = components.data() + static_cast<std::size_t>(col);
      for (std::size_t r = 0; r < dim; ++r) out[r] += comp[r * feature_count] * val;
    }
    return out;
  }

  std::vector<double> standardize(std::vector<double> projected) const {
    for (std::size_t r = 0; r < dim; ++r)
      projected[r] = (projected[r] - mean[r]) / scale[r];
    return projected;
  }

  double captured_variance() const {
    double acc = 0.0;
    for (double v : spectrum) acc += v;
    return acc;
  }
};

namespace detail {

// Gram matrix on the smaller side: X^T X (F x F) when F <= N, else X X^T.
inline Matrix gram_feature_space(const std::vector<SparseVec>& vecs, std::size_t f) {
  Matrix g(f, f);
  for (const SparseVec& vec : vecs)
    for (const auto& [ci, vi] : vec.entries)
      for (const auto& [cj, vj] : vec.entries) g.at(ci, cj) += vi * vj;
  return g;
}

inline Matrix gram_sample_space(const std::vector<SparseVec>& vecs) {
  const std::size_t n = vecs.size();
  Matrix g(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      double dot = 0.0;
      const auto& ea = vecs[a].entries;
      const auto& eb = vecs[b].entries;
      std::size_t i = 0, j = 0;
      while (i < ea.size() && j < eb.size()) {
        if (ea[i].first < eb[j].first) {
          ++i;
        } else if (ea[i].first > eb[j].first) {
          ++j;
        } else {
          dot += ea[i].second * eb[j].second;
          ++i;
          ++j;
        }
      }
      g.at(a, b) = dot;
      g.at(b, a) = dot;
    }
  }
  return g;
}

// Deterministic sign: largest-magnitude entry of each component positive.
inline void fix_component_sign(std::vector<double>& row) {
  double best = 0.0;
  for (double v : row)
    if (std::fabs(v) > std::fabs(best)) best = v;
  if (best < 0.0)
    for (double& v : row) v = -v;
}

}  // namespace detail

inline Projector fit_projector(const std::vector<SparseVec>& vecs,
                               std::size_t feature_count, std::size_t dim) {
  if (dim == 0) fail_validation("fit_projector: dim must be >= 1");
  if (vecs.size() < dim)
    fail_validation("fit_projector: need at least `dim` fit vectors");

  const std::size_t n = vecs.size();
  const std::size_t f = feature_count;
  const bool feature_side = f <= n;
  Matrix gram = feature_side ? detail::gram_feature_space(vecs, f)
                             : detail::gram_sample_space(vecs);
  EigenDecomposition eig = jacobi_eigen_symmetric(std::move(gram));

  double lambda_max = eig.values.empty() ? 0.0 : std::max(eig.values[0], 0.0);
  std::size_t rank = 0;
  for (double v : eig.values)
    if (v > 1e-12 * std::max(lambda_max, 1.0)) ++rank;
  if (rank == 0) fail_validation("fit_projector: fit matrix has rank 0");

  Projector proj;
  proj.requested_dim = dim;
  proj.dim = std::min(dim, rank);
  proj.clamped = proj.dim < dim;
  proj.feature_count = f;
  proj.components.assign(proj.dim * f, 0.0);
  proj.spectrum.assign(eig.values.begin(), eig.values.begin() + proj.dim);

  for (std::size_t r = 0; r < proj.dim; ++r) {
    std::vector<double> comp(f, 0.0);
    if (feature_side) {
      for (std::size_t i = 0; i < f; ++i) comp[i] = eig.vectors.at(r, i);
    } else {
      // v = X^T u / sigma
      double sigma = std::sqrt(eig.values[r]);
      for (std::size_t a = 0; a < n; ++a) {
        double u = eig.vectors.at(r, a);
        for (const auto& [col, val] : vecs[a].entries) comp[col] += u * val;
      }
      for (double& c : comp) c /= sigma;
    }
    detail::fix_component_sign(comp);
    std::copy(comp.begin(), comp.end(), proj.components.begin() + r * f);
  }

  // Standardization statistics over the fit sample's projections.
  proj.mean.assign(proj.dim, 0.0);
  proj.scale.assign(proj.dim, 0.0);
  std::vector<std::vector<double>> projected;
  projected.reserve(n);
  for (const SparseVec& vec : vecs) projected.push_back(proj.project(vec));
  for (const auto& p : projected)
    for (std::size_t r = 0; r < proj.dim; ++r) proj.mean[r] += p[r];
  for (std::size_t r = 0; r < proj.dim; ++r) proj.mean[r] /= static_cast<double>(n);
  for (const auto& p : projected)
    for (std::size_t r = 0; r < proj.dim; ++r) {
      double dev = p[r] - proj.mean[r];
      proj.scale[r] += dev * dev;
    }
  for (std::size_t r = 0; r < proj.dim; ++r) {
    proj.scale[r] = std::sqrt(proj.scale[r] / static_cast<double>(n));
    if (proj.scale[r] < Projector::kScaleFloor) proj.scale[r] = Projector::kScaleFloor;
  }
  return proj;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct EmbedConfig {
  std::size_t svd_dim = 100;  // clamped to rank when the data is smaller
  TfidfConfig tfidf;
};

struct EmbedPipeline {
  TfidfModel tfidf;
  Projector projector;
  struct Provenance {
    std::uint64_t seed = 0;
    std::size_t shard_docs = 0;
    std::string shard_digest;
  } provenance;

  std::size_t dim() const { return projector.dim; }

  std::vector<double> embed(const std::string& text) const {
    return projector.standardize(projector.project(transform_tfidf(tfidf, text)));
  }
};

inline EmbedPipeline fit_pipeline(std::span<const corpus::Document> shard,
                                  const EmbedConfig& config = {},
                                  std::uint64_t seed = 0) {
  EmbedPipeline pipeline;
  pipeline.tfidf = fit_tfidf(shard, config.tfidf);
  std::vector<SparseVec> vecs;
  vecs.reserve(shard.size());
  Sha256 shard_hash;
  for (const corpus::Document& doc : shard) {
    vecs.push_back(transform_tfidf(pipeline.tfidf, doc.text));
    shard_hash.update(doc.id);
    shard_hash.update("\n");
  }
  std::size_t dim = std::min(config.svd_dim, vecs.size());
  pipeline.projector = fit_projector(vecs, pipeline.tfidf.feature_count(),
                                     std::max<std::size_t>(dim, 1));
  pipeline.provenance.seed = seed;
  pipeline.provenance.shard_docs = shard.size();
  pipeline.provenance.shard_digest = shard_hash.hex_digest();
  return pipeline;
}

// Inverse transform: un-standardize, then map back to feature space. Returns
// the m largest-weight features, descending, ties lexicographic.
inline std::vector<std::pair<std::string, double>> top_terms(
    const EmbedPipeline& pipeline, std::span<const double> center, std::size_t m) {
  const Projector& proj = pipeline.projector;
  if (center.size() != proj.dim)
    fail_validation("top_terms: center dimension mismatch");
  std::vector<double> y(proj.dim);
  for (std::size_t r = 0; r < proj.dim; ++r)
    y[r] = center[r] * proj.scale[r] + proj.mean[r];
  std::vector<double> weights(proj.feature_count, 0.0);
  for (std::size_t r = 0; r < proj.dim; ++r) {
    const double* comp = proj.components.data() + r * proj.feature_count;
    for (std::size_t i = 0; i < proj.feature_count; ++i) weights[i] += comp[i] * y[r];
  }
  std::vector<std::size_t> order(proj.feature_count);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (weights[a] != weights[b]) return weights[a] > weights[b];
    return pipeline.tfidf.features[a] < pipeline.tfidf.features[b];
  });
  std::size_t take = std::min(m, proj.feature_count);
  std::vector<std::pair<std::string, double>> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i)
    out.emplace_back(pipeline.tfidf.features[order[i]], weights[order[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization (full-precision JSON; doubles round-trip exactly)
// ---------------------------------------------------------------------------

inline nlohmann::json pipeline_to_json(const EmbedPipeline& p) {
  nlohmann::json j;
  j["version"] = 1;
  j["kind"] = "embed_pipeline";
  j["tfidf"]["features"] = p.tfidf.features;
  j["tfidf"]["idf"] = p.tfidf.idf;
  std::vector<std::string> stop(p.tfidf.stopwords.begin(), p.tfidf.stopwords.end());
  std::sort(stop.begin(), stop.end());
  j["tfidf"]["stopwords"] = stop;
  j["tfidf"]["mask_token"] = p.tfidf.mask_token;
  j["projector"]["dim"] = p.projector.dim;
  j["projector"]["feature_count"] = p.projector.feature_count;
  j["projector"]["requested_dim"] = p.projector.requested_dim;
  j["projector"]["clamped"] = p.projector.clamped;
  j["projector"]["components"] = p.projector.components;
  j["projector"]["mean"] = p.projector.mean;
  j["projector"]["scale"] = p.projector.scale;
  j["projector"]["spectrum"] = p.projector.spectrum;
  j["provenance"]["seed"] = p.provenance.seed;
  j["provenance"]["shard_docs"] = p.provenance.shard_docs;
  j["provenance"]["shard_digest"] = p.provenance.shard_digest;
  return j;
}

inline void save_pipeline(const EmbedPipeline& p, const std::filesystem::path& path) {
  write_file_atomic(path, pipeline_to_json(p).dump() + "\n");
}

inline std::string pipeline_digest(const EmbedPipeline& p) {
  return sha256_hex(pipeline_to_json(p).dump());
}

inline EmbedPipeline load_pipeline(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object())
    fail_integrity("corrupt pipeline file: " + path.string());
  if (j.value("kind", "") != "embed_pipeline" || j.value("version", 0) != 1)
    fail_integrity("pipeline file version mismatch: " + path.string());
  EmbedPipeline p;
  try {
    p.tfidf.features = j.at("tfidf").at("features").get<std::vector<std::string>>();
    p.tfidf.idf = j.at("tfidf").at("idf").get<std::vector<double>>();
    auto stop = j.at("tfidf").at("stopwords").get<std::vector<std::string>>();
    p.tfidf.stopwords.insert(stop.begin(), stop.end());
    p.tfidf.mask_token = j.at("tfidf").at("mask_token").get<std::string>();
    p.projector.dim = j.at("projector").at("dim").get<std::size_t>();
    p.projector.feature_count = j.at("projector").at("feature_count").get<std::size_t>();
    p.projector.requested_dim = j.at("projector").at("requested_dim").get<std::size_t>();
    p.projector.clamped = j.at("projector").at("clamped").get<bool>();
    p.projector.components = j.at("projector").at("components").get<std::vector<double>>();
    p.projector.mean = j.at("projector").at("mean").get<std::vector<double>>();
    p.projector.scale = j.at("projector").at("scale").get<std::vector<double>>();
    p.projector.spectrum = j.at("projector").at("spectrum").get<std::vector<double>>();
    p.provenance.seed = j.at("provenance").at("seed").get<std::uint64_t>();
    p.provenance.shard_docs = j.at("provenance").at("shard_docs").get<std::size_t>();
    p.provenance.shard_digest = j.at("provenance").at("shard_digest").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    fail_integrity("corrupt pipeline file: " + path.string());
  }
  if (p.tfidf.features.size() != p.tfidf.idf.size() ||
      p.projector.components.size() != p.projector.dim * p.projector.feature_count ||
      p.projector.mean.size() != p.projector.dim ||
      p.projector.scale.size() != p.projector.dim)
    fail_integrity("pipeline file has inconsistent shapes: " + path.string());
  for (std::size_t i = 0; i < p.tfidf.features.size(); ++i)
    p.tfidf.feature_index.emplace(p.tfidf.features[i], static_cast<std::int32_t>(i));
  return p;
}

// Incremental context embedder used by the router: pushing one token updates
// the projected tf-idf vector in O(dim) instead of re-embedding the whole
// history. An optional trailing window bounds the history (0 = unbounded).
class ContextEmbedder {
 public:
  explicit ContextEmbedder(const EmbedPipeline& pipeline, std::size_t window = 0)
      : pipeline_(&pipeline), window_(window),
        raw_(pipeline.projector.dim, 0.0) {}

  void reset() {
    counts_.clear();
    history_.clear();
    std::fill(raw_.begin(), raw_.end(), 0.0);
    norm_sq_ = 0.0;
  }

  void push(const std::string& token) {
    auto col = pipeline_->tfidf.feature_of(token);
    if (window_ > 0) {
      history_.push_back(col ? *col : -1);
      if (history_.size() > window_) {
        std::int32_t old = history_.front();
        history_.erase(history_.begin());
        if (old >= 0) apply(old, -1);
      }
    }
    if (col) apply(*col, +1);
  }

  std::vector<double> embedding() const {
    const Projector& proj = pipeline_->projector;
    std::vector<double> out(proj.dim);
    double norm = norm_sq_ > 0.0 ? std::sqrt(norm_sq_) : 0.0;
    for (std::size_t r = 0; r < proj.dim; ++r) {
      double projected = norm > 0.0 ? raw_[r] / norm : 0.0;
      out[r] = (projected - proj.mean[r]) / proj.scale[r];
    }
    return out;
  }

 private:
  void apply(std::int32_t col, int delta) {
    const Projector& proj = pipeline_->projector;
    double idf = pipeline_->tfidf.idf[col];
    double& count = counts_[col];
    // ||c .* idf||^2 changes by idf^2 * ((c+d)^2 - c^2).
    norm_sq_ += idf * idf * ((count + delta) * (count + delta) - count * count);
    if (norm_sq_ < 0.0) norm_sq_ = 0.0;
    const double* comp = proj.components.data() + static_cast<std::size_t>(col);
    for (std::size_t r = 0; r < proj.dim; ++r)
      raw_[r] += delta * idf * comp[r * proj.feature_count];
    count += delta;
    if (count == 0.0) counts_.erase(col);
  }

  const EmbedPipeline* pipeline_;
  std::size_t window_;
  std::unordered_map<std::int32_t, double> counts_;
  std::vector<std::int32_t> history_;
  std::vector<double> raw_;
  double norm_sq_ = 0.0;
};

}  // namespace clusterlm::embed

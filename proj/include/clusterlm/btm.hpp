#pragma once

// Branch-Train-Merge orchestration: fit the embedding pipeline and the
// balanced clustering on a single shard, assign the full corpus greedily,
// branch a shard-trained seed model per cluster, train every expert on its
// cluster's documents only, and merge the checkpoints into a collection.
//
// Expert jobs run as forked worker processes by default (an in-process
// serial mode produces identical artifacts). A job communicates with the
// orchestrator only through its checkpoint and status files; siblings share
// no mutable state. All orchestrator state lives in the manifest, which is
// rewritten atomically after every status change, so a crash anywhere is
// recoverable via resume().
//
// Run directory layout:
//   run_dir/vocab.json, pipeline.json, clusters.json, assignment.csv,
//           seed.ckpt, experts/<id>.ckpt, experts/<id>.status.json,
//           manifest.json, collection.json

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "clusterlm/cluster.hpp"
#include "clusterlm/common.hpp"
#include "clusterlm/corpus.hpp"
#include "clusterlm/embed.hpp"
#include "clusterlm/lm.hpp"
#include "clusterlm/sha256.hpp"

namespace clusterlm::btm {

struct RunConfig {
  std::size_t k = 1;
  lm::ExpertConfig expert;
  lm::TrainSchedule schedule;  // steps are derived from the token budget
  std::uint64_t token_budget = 100000;
  std::uint64_t seed_token_budget = 0;  // 0 = one pass over the fit shard
  std::size_t worker_budget = 0;        // max concurrent jobs; 0 = k
  std::size_t seq_len = 64;
  std::size_t vocab_max = 4096;
  std::size_t shard_size = 800;
  std::size_t svd_dim = 100;
  std::uint64_t seed = 0;
  bool parallel = true;  // forked worker processes; serial mode is for debugging
  cluster::KMeansConfig kmeans;  // seed is overridden from the master seed
  embed::TfidfConfig tfidf;
  std::vector<std::uint32_t> launch_order;   // optional job order
  std::set<std::uint32_t> fault_injection;   // abort these jobs mid-run (tests)
  std::filesystem::path run_dir;

  void validate() const {
    if (k == 0) fail_validation("run config: k must be >= 1");
    if (token_budget == 0) fail_validation("run config: token budget must be positive");
    if (seq_len < 2) fail_validation("run config: seq_len must be >= 2");
    if (run_dir.empty()) fail_validation("run config: run_dir required");
    schedule.validate();
  }

  std::uint64_t pipeline_seed() const { return derive_seed(seed, 1); }
  std::uint64_t cluster_seed() const { return derive_seed(seed, 2); }
  std::uint64_t seed_model_seed() const { return derive_seed(seed, 3); }
  std::uint64_t expert_seed(std::uint32_t cluster_id) const {
    return derive_seed(seed, 100 + cluster_id);
  }

  // Semantic configuration only: execution details (parallelism, launch
  // order, fault injection) must not change artifact digests.
  nlohmann::json semantic_json() const {
    nlohmann::json j;
    j["k"] = k;
    j["expert_kind"] = lm::kind_name(expert.kind);
    j["ngram"] = {{"order", expert.ngram.order},
                  {"lambdas", expert.ngram.effective_lambdas()},
                  {"alpha", expert.ngram.alpha}};
    j["neural"] = {{"embed_dim", expert.neural.embed_dim},
                   {"hidden_dim", expert.neural.hidden_dim},
                   {"context", expert.neural.context}};
    j["schedule"] = schedule.to_json();
    j["token_budget"] = token_budget;
    j["seed_token_budget"] = seed_token_budget;
    j["seq_len"] = seq_len;
    j["vocab_max"] = vocab_max;
    j["shard_size"] = shard_size;
    j["svd_dim"] = svd_dim;
    j["seed"] = seed;
    j["kmeans"] = {{"max_iter", kmeans.max_iter},
                   {"tol", kmeans.tol},
                   {"squared", kmeans.mode == cluster::DistanceMode::squared_euclidean}};
    return j;
  }
};

struct ExpertRecord {
  std::uint32_t cluster_id = 0;
  std::string status = "pending";  // pending | running | done | failed
  std::string data_digest;
  std::string checkpoint_path;
  std::string checkpoint_digest;
  std::string error;
  double wall_time_s = 0.0;
  double max_seconds_per_update = 0.0;
  std::size_t steps = 0;
  std::size_t docs = 0;
  std::uint64_t trained_tokens = 0;

  // full=false is the canonical content form: wall-clock timings and file
  // locations are excluded so re-runs compare equal wherever they live.
  nlohmann::json to_json(bool full) const {
    nlohmann::json j;
    j["cluster_id"] = cluster_id;
    j["status"] = status;
    j["data_digest"] = data_digest;
    j["checkpoint_digest"] = checkpoint_digest;
    j["error"] = error;
    j["steps"] = steps;
    j["docs"] = docs;
    j["trained_tokens"] = trained_tokens;
    if (full) {
      j["checkpoint_path"] = checkpoint_path;
      j["wall_time_s"] = wall_time_s;
      j["max_seconds_per_update"] = max_seconds_per_update;
    }
    return j;
  }

  static ExpertRecord from_json(const nlohmann::json& j) {
    ExpertRecord r;
    r.cluster_id = j.at("cluster_id").get<std::uint32_t>();
    r.status = j.at("status").get<std::string>();
    r.data_digest = j.value("data_digest", "");
    r.checkpoint_path = j.value("checkpoint_path", "");
    r.checkpoint_digest = j.value("checkpoint_digest", "");
    r.error = j.value("error", "");
    r.steps = j.value("steps", std::size_t(0));
    r.docs = j.value("docs", std::size_t(0));
    r.trained_tokens = j.value("trained_tokens", std::uint64_t(0));
    r.wall_time_s = j.value("wall_time_s", 0.0);
    r.max_seconds_per_update = j.value("max_seconds_per_update", 0.0);
    return r;
  }
};

struct RunManifest {
  std::size_t k = 0;
  nlohmann::json config;  // semantic config
  std::string corpus_digest;
  std::string vocab_digest;
  std::string pipeline_digest;
  std::string cluster_model_digest;
  std::string seed_checkpoint_digest;
  std::vector<ExpertRecord> experts;

  nlohmann::json to_json(bool include_timings = true) const {
    nlohmann::json j;
    j["version"] = 1;
    j["kind"] = "run_manifest";
    j["k"] = k;
    j["config"] = config;
    j["corpus_digest"] = corpus_digest;
    j["vocab_digest"] = vocab_digest;
    j["pipeline_digest"] = pipeline_digest;
    j["cluster_model_digest"] = cluster_model_digest;
    j["seed_checkpoint_digest"] = seed_checkpoint_digest;
    nlohmann::json experts_json = nlohmann::json::array();
    for (const ExpertRecord& r : experts) experts_json.push_back(r.to_json(include_timings));
    j["experts"] = std::move(experts_json);
    return j;
  }

  // Content digest over artifacts, data, and seeds; wall-clock timings and
  // execution mode are excluded so serial and parallel runs compare equal.
  std::string run_digest() const { return sha256_hex(to_json(false).dump()); }

  bool all_done() const {
    for (const ExpertRecord& r : experts)
      if (r.status != "done") return false;
    return true;
  }
};

inline void save_manifest(const RunManifest& manifest,
                          const std::filesystem::path& path) {
  write_file_atomic(path, manifest.to_json().dump(2) + "\n");
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("kind", "") != "run_manifest")
    fail_integrity("corrupt manifest: " + path.string());
  RunManifest m;
  m.k = j.at("k").get<std::size_t>();
  m.config = j.at("config");
  m.corpus_digest = j.at("corpus_digest").get<std::string>();
  m.vocab_digest = j.at("vocab_digest").get<std::string>();
  m.pipeline_digest = j.at("pipeline_digest").get<std::string>();
  m.cluster_model_digest = j.at("cluster_model_digest").get<std::string>();
  m.seed_checkpoint_digest = j.at("seed_checkpoint_digest").get<std::string>();
  for (const auto& e : j.at("experts")) m.experts.push_back(ExpertRecord::from_json(e));
  return m;
}

// ---------------------------------------------------------------------------
// Expert collection
// ---------------------------------------------------------------------------

struct ExpertCollection {
  corpus::Vocab vocab;
  embed::EmbedPipeline pipeline;
  cluster::ClusterModel clusters;
  std::vector<std::unique_ptr<lm::ExpertModel>> experts;  // index == cluster id
  std::vector<std::string> checkpoint_digests;

  std::size_t k() const { return experts.size(); }
};

// ---------------------------------------------------------------------------
// Internals shared by run / resume
// ---------------------------------------------------------------------------

namespace detail {

inline std::string slice_digest(const corpus::Corpus& slice) {
  Sha256 h;
  for (const corpus::Document& doc : slice.docs) {
    h.update(doc.id);
    h.update("\x1f");
    h.update(doc.text);
    h.update("\n");
  }
  return h.hex_digest();
}

// Rows drawn cyclically from the slice's packed sequences until the token
// share is reached; small corpora simply run multiple epochs.
inline corpus::SequenceBatch budget_rows(const corpus::SequenceBatch& packed,
                                         std::uint64_t token_share) {
  corpus::SequenceBatch out;
  out.seq_len = packed.seq_len;
  std::uint64_t tokens = 0;
  std::size_t r = 0;
  while (tokens < token_share) {
    out.rows.push_back(packed.rows[r]);
    out.mask.push_back(packed.mask[r]);
    for (std::uint8_t bit : packed.mask[r]) tokens += bit;
    r = (r + 1) % packed.rows.size();
  }
  return out;
}

// Steps spanning the budgeted rows exactly once, so every expert sees its
// token share regardless of backend.
inline lm::TrainSchedule derive_schedule(const RunConfig& config,
                                         std::size_t total_rows,
                                         std::uint64_t expert_seed) {
  lm::TrainSchedule schedule = config.schedule;
  schedule.steps = (total_rows + schedule.batch_size - 1) / schedule.batch_size;
  schedule.seed = expert_seed;
  return schedule;
}

inline std::filesystem::path checkpoint_path(const RunConfig& config,
                                             std::uint32_t cluster_id) {
  return config.run_dir / "experts" / (std::to_string(cluster_id) + ".ckpt");
}

inline std::filesystem::path status_path(const RunConfig& config,
                                         std::uint32_t cluster_id) {
  return config.run_dir / "experts" / (std::to_string(cluster_id) + ".status.json");
}

// The whole expert job: branch the seed, train on the slice's budgeted rows,
// write the checkpoint, then the status record. Runs either in-process
// (serial mode) or inside a forked worker; its only outputs are its own two
// files under experts/.
inline ExpertRecord run_expert_job(const RunConfig& config,
                                   const corpus::Vocab& vocab,
                                   const lm::ExpertModel& seed_model,
                                   const corpus::Corpus& slice,
                                   std::uint32_t cluster_id) {
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  ExpertRecord record;
  record.cluster_id = cluster_id;
  record.docs = slice.docs.size();
  record.checkpoint_path = checkpoint_path(config, cluster_id).string();
  try {
    if (slice.docs.empty())
      fail_validation("empty cluster " + std::to_string(cluster_id) +
                      ": no documents to train on");
    record.data_digest = slice_digest(slice);
    corpus::SequenceBatch packed = corpus::pack_sequences(slice, vocab, config.seq_len);
    corpus::SequenceBatch rows = budget_rows(packed, config.token_budget / config.k);
    lm::TrainSchedule schedule =
        derive_schedule(config, rows.rows.size(), config.expert_seed(cluster_id));

    std::unique_ptr<lm::ExpertModel> expert = seed_model.branch();
    lm::TrainResult trained = lm::train(*expert, rows, schedule);

    if (config.fault_injection.count(cluster_id))
      fail_runtime("fault injection: job killed mid-training");

    lm::CheckpointMeta meta;
    meta.cluster_id = cluster_id;
    meta.schedule = schedule;
    meta.data_digest = record.data_digest;
    lm::save_checkpoint(*expert, meta, checkpoint_path(config, cluster_id));

    record.status = "done";
    record.checkpoint_digest = lm::checkpoint_digest(*expert, meta);
    record.steps = trained.step_losses.size();
    record.trained_tokens = trained.tokens_seen;
    record.max_seconds_per_update = trained.max_seconds_per_update();
  } catch (const std::exception& e) {
    record.status = "failed";
    record.error = e.what();
    record.checkpoint_digest.clear();
  }
  record.wall_time_s = std::chrono::duration<double>(clock::now() - t0).count();
  write_file_atomic(status_path(config, cluster_id),
                    record.to_json(true).dump(2) + "\n");
  return record;
}

// Job dispatch. Parallel mode forks one worker per job, capped at the
// worker budget: the child writes the checkpoint and status files and
// exits, and the parent reads the status file back. A worker that dies
// without a status file is recorded as failed. `on_update` is invoked
// after every record change so the orchestrator can persist the manifest.
inline std::vector<ExpertRecord> run_jobs(
    const RunConfig& config, const corpus::Vocab& vocab,
    const lm::ExpertModel& seed_model, const std::vector<corpus::Corpus>& slices,
    const std::vector<std::uint32_t>& order,
    const std::function<void(const ExpertRecord&)>& on_update = {}) {
  std::vector<ExpertRecord> records(config.k);
  auto notify = [&](const ExpertRecord& record) {
    if (on_update) on_update(record);
  };
  auto mark_running = [&](std::uint32_t id) {
    records[id].cluster_id = id;
    records[id].status = "running";
    records[id].docs = slices[id].docs.size();
    notify(records[id]);
  };

  if (!config.parallel) {
    for (std::uint32_t id : order) {
      mark_running(id);
      records[id] = run_expert_job(config, vocab, seed_model, slices[id], id);
      notify(records[id]);
    }
    return records;
  }

  std::size_t max_workers = config.worker_budget > 0 ? config.worker_budget : config.k;
  std::vector<std::pair<pid_t, std::uint32_t>> running;
  auto reap_one = [&]() {
    int status = 0;
    pid_t pid = ::waitpid(-1, &status, 0);
    if (pid <= 0) fail_runtime("waitpid failed while jobs were outstanding");
    for (std::size_t i = 0; i < running.size(); ++i) {
      if (running[i].first != pid) continue;
      std::uint32_t id = running[i].second;
      running.erase(running.begin() + static_cast<std::ptrdiff_t>(i));
      std::filesystem::path spath = status_path(config, id);
      if (std::filesystem::exists(spath)) {
        nlohmann::json j = nlohmann::json::parse(read_file(spath), nullptr, false);
        if (!j.is_discarded()) {
          records[id] = ExpertRecord::from_json(j);
          notify(records[id]);
          return;
        }
      }
      records[id].cluster_id = id;
      records[id].status = "failed";
      records[id].error = "worker exited without status (code " +
                          std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) +
                          ")";
      notify(records[id]);
      return;
    }
  };

  for (std::uint32_t id : order) {
    while (running.size() >= max_workers) reap_one();
    mark_running(id);
    pid_t pid = ::fork();
    if (pid < 0) fail_runtime("fork failed");
    if (pid == 0) {
      // Worker process: produce the two job files, then leave without
      // touching shared state.
      int code = 0;
      try {
        ExpertRecord r = run_expert_job(config, vocab, seed_model, slices[id], id);
        code = r.status == "done" ? 0 : 1;
      } catch (...) {
        code = 2;
      }
      ::_exit(code);
    }
    running.emplace_back(pid, id);
  }
  while (!running.empty()) reap_one();
  return records;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct RunArtifacts {
  RunManifest manifest;
  corpus::Vocab vocab;
  embed::EmbedPipeline pipeline;
  cluster::ClusterModel clusters;
  cluster::Assignment assignment;
};

inline void save_assignment_csv(const cluster::Assignment& assignment,
                                const corpus::Corpus& docs,
                                const std::filesystem::path& path) {
  std::string out = "doc_id,cluster\n";
  for (std::size_t d = 0; d < docs.docs.size(); ++d)
    out += docs.docs[d].id + "," + std::to_string(assignment.cluster_of[d]) + "\n";
  write_file_atomic(path, out);
}

// Seeded sample without replacement, preserving determinism for a given
// (corpus, seed) pair. Corpus order of the selected docs is kept.
inline std::vector<std::size_t> shard_indices(std::size_t corpus_size,
                                              std::size_t shard_size,
                                              std::uint64_t seed) {
  std::size_t take = std::min(corpus_size, shard_size);
  std::vector<std::size_t> all(corpus_size);
  std::iota(all.begin(), all.end(), std::size_t(0));
  Rng rng(seed);
  rng.shuffle(all);
  all.resize(take);
  std::sort(all.begin(), all.end());
  return all;
}

// Cluster -> branch -> train -> merge. Fits the embedder and the balanced
// clustering on one shard, predicts clusters greedily for every document,
// then trains one expert per cluster on that cluster's documents only.
// K = 1 degenerates to dense continued training of the seed.
inline RunArtifacts run_pipeline(const corpus::Corpus& docs, const RunConfig& config) {
  config.validate();
  if (docs.docs.size() < config.k)
    fail_validation("run_pipeline: fewer documents than clusters");
  std::filesystem::create_directories(config.run_dir / "experts");

  RunArtifacts artifacts;
  RunManifest& manifest = artifacts.manifest;
  manifest.k = config.k;
  manifest.config = config.semantic_json();
  manifest.corpus_digest = corpus::corpus_digest(docs);

  // Vocabulary over the full corpus.
  artifacts.vocab = corpus::build_vocab(docs, config.vocab_max);
  corpus::save_vocab(artifacts.vocab, config.run_dir / "vocab.json");
  manifest.vocab_digest = artifacts.vocab.digest();

  // Embedding pipeline fit on a single shard.
  std::vector<std::size_t> shard =
      shard_indices(docs.docs.size(), config.shard_size, config.pipeline_seed());
  corpus::Corpus shard_docs;
  shard_docs.provenance = docs.provenance + "#shard";
  for (std::size_t idx : shard) shard_docs.docs.push_back(docs.docs[idx]);
  embed::EmbedConfig embed_config;
  embed_config.svd_dim = config.svd_dim;
  embed_config.tfidf = config.tfidf;
  artifacts.pipeline =
      embed::fit_pipeline(shard_docs.docs, embed_config, config.pipeline_seed());
  embed::save_pipeline(artifacts.pipeline, config.run_dir / "pipeline.json");
  manifest.pipeline_digest = embed::pipeline_digest(artifacts.pipeline);

  // Balanced k-means on the shard; greedy prediction for the full corpus.
  Matrix shard_points(shard_docs.docs.size(), artifacts.pipeline.dim());
  for (std::size_t d = 0; d < shard_docs.docs.size(); ++d) {
    std::vector<double> e = artifacts.pipeline.embed(shard_docs.docs[d].text);
    std::copy(e.begin(), e.end(), shard_points.row(d).begin());
  }
  cluster::KMeansConfig kmeans_config = config.kmeans;
  kmeans_config.seed = config.cluster_seed();
  auto [model, shard_assignment] =
      cluster::fit_balanced_kmeans(shard_points, config.k, kmeans_config);
  artifacts.clusters = std::move(model);
  cluster::save_cluster_model(artifacts.clusters, config.run_dir / "clusters.json");
  manifest.cluster_model_digest = cluster::cluster_model_digest(artifacts.clusters);

  Matrix all_points(docs.docs.size(), artifacts.pipeline.dim());
  for (std::size_t d = 0; d < docs.docs.size(); ++d) {
    std::vector<double> e = artifacts.pipeline.embed(docs.docs[d].text);
    std::copy(e.begin(), e.end(), all_points.row(d).begin());
  }
  artifacts.assignment =
      cluster::greedy_assign(all_points, artifacts.clusters.centers, kmeans_config.mode);
  save_assignment_csv(artifacts.assignment, docs, config.run_dir / "assignment.csv");

  // Seed expert trained on the shard, then branched per cluster.
  std::unique_ptr<lm::ExpertModel> seed_model =
      lm::new_seed(config.expert, artifacts.vocab, config.seed_model_seed());
  {
    corpus::SequenceBatch shard_rows =
        corpus::pack_sequences(shard_docs, artifacts.vocab, config.seq_len);
    corpus::SequenceBatch seed_rows =
        config.seed_token_budget > 0
            ? detail::budget_rows(shard_rows, config.seed_token_budget)
            : shard_rows;
    lm::TrainSchedule seed_schedule =
        detail::derive_schedule(config, seed_rows.rows.size(), config.seed_model_seed());
    lm::train(*seed_model, seed_rows, seed_schedule);
    lm::CheckpointMeta seed_meta;
    seed_meta.cluster_id = 0;
    seed_meta.schedule = seed_schedule;
    seed_meta.data_digest = detail::slice_digest(shard_docs);
    lm::save_checkpoint(*seed_model, seed_meta, config.run_dir / "seed.ckpt");
    manifest.seed_checkpoint_digest = lm::checkpoint_digest(*seed_model, seed_meta);
  }

  // Per-cluster document slices, corpus order preserved.
  std::vector<corpus::Corpus> slices(config.k);
  for (std::size_t d = 0; d < docs.docs.size(); ++d)
    slices[artifacts.assignment.cluster_of[d]].docs.push_back(docs.docs[d]);

  manifest.experts.resize(config.k);
  for (std::uint32_t j = 0; j < config.k; ++j) {
    manifest.experts[j].cluster_id = j;
    manifest.experts[j].status = "pending";
    manifest.experts[j].docs = slices[j].docs.size();
  }
  save_manifest(manifest, config.run_dir / "manifest.json");

  std::vector<std::uint32_t> order = config.launch_order;
  if (order.empty())
    for (std::uint32_t j = 0; j < config.k; ++j) order.push_back(j);

  // The manifest is rewritten atomically after every status change; a
  // crash at any point is recoverable via resume().
  std::vector<ExpertRecord> records = detail::run_jobs(
      config, artifacts.vocab, *seed_model, slices, order,
      [&](const ExpertRecord& record) {
        manifest.experts[record.cluster_id] = record;
        save_manifest(manifest, config.run_dir / "manifest.json");
      });
  manifest.experts = std::move(records);
  save_manifest(manifest, config.run_dir / "manifest.json");
  return artifacts;
}

// ---------------------------------------------------------------------------
// Resume, merge, load
// ---------------------------------------------------------------------------

// Re-runs only non-done expert jobs; finished checkpoints are verified and
// never touched. The corpus must match the manifest's digest.
inline RunManifest resume(const corpus::Corpus& docs, const RunConfig& config) {
  RunManifest manifest = load_manifest(config.run_dir / "manifest.json");
  if (manifest.corpus_digest != corpus::corpus_digest(docs))
    fail_integrity("resume: corpus does not match manifest digest");
  if (manifest.k != config.k) fail_integrity("resume: config k does not match manifest");

  corpus::Vocab vocab = corpus::load_vocab(config.run_dir / "vocab.json");
  embed::EmbedPipeline pipeline = embed::load_pipeline(config.run_dir / "pipeline.json");
  cluster::ClusterModel clusters =
      cluster::load_cluster_model(config.run_dir / "clusters.json");

  Matrix all_points(docs.docs.size(), pipeline.dim());
  for (std::size_t d = 0; d < docs.docs.size(); ++d) {
    std::vector<double> e = pipeline.embed(docs.docs[d].text);
    std::copy(e.begin(), e.end(), all_points.row(d).begin());
  }
  cluster::Assignment assignment =
      cluster::greedy_assign(all_points, clusters.centers, config.kmeans.mode);
  std::vector<corpus::Corpus> slices(manifest.k);
  for (std::size_t d = 0; d < docs.docs.size(); ++d)
    slices[assignment.cluster_of[d]].docs.push_back(docs.docs[d]);

  lm::LoadedCheckpoint seed = lm::load_checkpoint(config.run_dir / "seed.ckpt");

  std::vector<std::uint32_t> todo;
  for (const ExpertRecord& record : manifest.experts) {
    if (record.status == "done") {
      std::filesystem::path path = record.checkpoint_path;
      if (!std::filesystem::exists(path))
        fail_integrity("resume: missing checkpoint for done expert " +
                       std::to_string(record.cluster_id));
      lm::LoadedCheckpoint loaded = lm::load_checkpoint(path);
      if (loaded.meta.content_digest != record.checkpoint_digest)
        fail_integrity("resume: checkpoint digest mismatch for expert " +
                       std::to_string(record.cluster_id));
      continue;
    }
    todo.push_back(record.cluster_id);
  }

  std::vector<ExpertRecord> fresh = detail::run_jobs(
      config, vocab, *seed.model, slices, todo, [&](const ExpertRecord& record) {
        manifest.experts[record.cluster_id] = record;
        save_manifest(manifest, config.run_dir / "manifest.json");
      });
  for (std::uint32_t id : todo) manifest.experts[id] = fresh[id];
  save_manifest(manifest, config.run_dir / "manifest.json");
  return manifest;
}

// Verifies K checkpoints (cluster ids a permutation of 0..K-1, digests
// intact) and writes the collection manifest.
inline void merge(const std::filesystem::path& run_dir) {
  RunManifest manifest = load_manifest(run_dir / "manifest.json");
  nlohmann::json collection;
  collection["version"] = 1;
  collection["kind"] = "expert_collection";
  collection["k"] = manifest.k;
  collection["vocab_digest"] = manifest.vocab_digest;
  collection["pipeline_digest"] = manifest.pipeline_digest;
  collection["cluster_model_digest"] = manifest.cluster_model_digest;
  collection["run_digest"] = manifest.run_digest();
  std::set<std::uint32_t> seen;
  nlohmann::json experts = nlohmann::json::array();
  for (const ExpertRecord& record : manifest.experts) {
    if (record.status != "done")
      fail_integrity("merge: expert " + std::to_string(record.cluster_id) +
                     " is not done (status " + record.status + ")");
    if (!seen.insert(record.cluster_id).second)
      fail_integrity("merge: duplicate cluster id " + std::to_string(record.cluster_id));
    lm::LoadedCheckpoint loaded = lm::load_checkpoint(record.checkpoint_path);
    if (loaded.meta.content_digest != record.checkpoint_digest)
      fail_integrity("merge: digest mismatch for expert " +
                     std::to_string(record.cluster_id));
    experts.push_back({{"cluster_id", record.cluster_id},
                       {"path", record.checkpoint_path},
                       {"digest", record.checkpoint_digest}});
  }
  for (std::uint32_t j = 0; j < manifest.k; ++j)
    if (!seen.count(j))
      fail_integrity("merge: missing expert for cluster " + std::to_string(j));
  collection["experts"] = std::move(experts);
  write_file_atomic(run_dir / "collection.json", collection.dump(2) + "\n");
}

inline ExpertCollection load_collection(const std::filesystem::path& run_dir) {
  nlohmann::json j =
      nlohmann::json::parse(read_file(run_dir / "collection.json"), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("kind", "") != "expert_collection")
    fail_integrity("corrupt collection manifest in " + run_dir.string());
  ExpertCollection collection;
  collection.vocab = corpus::load_vocab(run_dir / "vocab.json");
  collection.pipeline = embed::load_pipeline(run_dir / "pipeline.json");
  collection.clusters = cluster::load_cluster_model(run_dir / "clusters.json");
  if (collection.vocab.digest() != j.at("vocab_digest").get<std::string>())
    fail_integrity("collection: vocab digest mismatch");
  if (embed::pipeline_digest(collection.pipeline) !=
      j.at("pipeline_digest").get<std::string>())
    fail_integrity("collection: pipeline digest mismatch");
  std::size_t k = j.at("k").get<std::size_t>();
  collection.experts.resize(k);
  collection.checkpoint_digests.resize(k);
  for (const auto& e : j.at("experts")) {
    std::uint32_t id = e.at("cluster_id").get<std::uint32_t>();
    lm::LoadedCheckpoint loaded = lm::load_checkpoint(e.at("path").get<std::string>());
    if (loaded.meta.content_digest != e.at("digest").get<std::string>())
      fail_integrity("collection: checkpoint digest mismatch for expert " +
                     std::to_string(id));
    collection.experts[id] = std::move(loaded.model);
    collection.checkpoint_digests[id] = loaded.meta.content_digest;
  }
  for (std::size_t id = 0; id < k; ++id)
    if (!collection.experts[id])
      fail_integrity("collection: missing expert " + std::to_string(id));
  return collection;
}

// In-memory collection straight out of run artifacts (no disk round trip).
inline ExpertCollection collection_from_run(const RunArtifacts& artifacts,
                                            const RunConfig& config) {
  ExpertCollection collection;
  collection.vocab = artifacts.vocab;
  collection.pipeline = artifacts.pipeline;
  collection.clusters = artifacts.clusters;
  collection.experts.resize(config.k);
  collection.checkpoint_digests.resize(config.k);
  for (const ExpertRecord& record : artifacts.manifest.experts) {
    if (record.status != "done")
      fail_integrity("collection_from_run: expert " +
                     std::to_string(record.cluster_id) + " not done");
    lm::LoadedCheckpoint loaded = lm::load_checkpoint(record.checkpoint_path);
    collection.experts[record.cluster_id] = std::move(loaded.model);
    collection.checkpoint_digests[record.cluster_id] = loaded.meta.content_digest;
  }
  return collection;
}

// ---------------------------------------------------------------------------
// Update timing
// ---------------------------------------------------------------------------

struct UpdateReport {
  std::vector<double> per_expert_max;  // seconds per update
  double overall_max = 0.0;
};

inline UpdateReport measure_updates(const std::vector<std::vector<double>>& timings) {
  UpdateReport report;
  if (timings.empty()) fail_validation("measure_updates: no timing records");
  for (const auto& expert_timings : timings) {
    if (expert_timings.empty())
      fail_validation("measure_updates: empty timing record");
    double mx = 0.0;
    for (double t : expert_timings) mx = std::max(mx, t);
    report.per_expert_max.push_back(mx);
    report.overall_max = std::max(report.overall_max, mx);
  }
  return report;
}

inline UpdateReport measure_updates(const RunManifest& manifest) {
  UpdateReport report;
  if (manifest.experts.empty()) fail_validation("measure_updates: no experts");
  for (const ExpertRecord& record : manifest.experts) {
    report.per_expert_max.push_back(record.max_seconds_per_update);
    report.overall_max = std::max(report.overall_max, record.max_seconds_per_update);
  }
  return report;
}

}  // namespace clusterlm::btm

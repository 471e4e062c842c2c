// Command-line surface for the cluster-expert pipeline: synthetic corpus
// generation, clustering, branch-train-merge runs, ensemble evaluation,
// analysis artifacts, and cost calculators. Every artifact embeds its
// resolved configuration and input digests; figure-like outputs are CSV
// files for external plotting.
//
// Exit codes: 0 success, 2 validation error, 3 runtime error, 4 integrity
// error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clusterlm/btm.hpp"
#include "clusterlm/budget.hpp"
#include "clusterlm/cluster.hpp"
#include "clusterlm/corpus.hpp"
#include "clusterlm/embed.hpp"
#include "clusterlm/lm.hpp"
#include "clusterlm/route.hpp"

namespace fs = std::filesystem;
using namespace clusterlm;

namespace {

std::string provenance_line(const std::string& command, const nlohmann::json& config,
                            const nlohmann::json& inputs) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = config;
  j["inputs"] = inputs;
  return "# provenance: " + j.dump() + "\n";
}

void write_csv(const fs::path& path, const std::string& provenance,
               const std::string& header, const std::string& body) {
  write_file_atomic(path, provenance + header + "\n" + body);
}

Matrix embed_corpus(const embed::EmbedPipeline& pipeline, const corpus::Corpus& docs) {
  Matrix points(docs.docs.size(), pipeline.dim());
  for (std::size_t d = 0; d < docs.docs.size(); ++d) {
    std::vector<double> e = pipeline.embed(docs.docs[d].text);
    std::copy(e.begin(), e.end(), points.row(d).begin());
  }
  return points;
}

std::vector<std::string> require_labels(const corpus::Corpus& docs) {
  std::vector<std::string> labels;
  for (const auto& doc : docs.docs) {
    if (!doc.label) fail_validation("document " + doc.id + " has no label");
    labels.push_back(*doc.label);
  }
  return labels;
}

std::vector<budget::CostObservation> load_observations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("cannot open observations file: " + path.string());
  std::vector<budget::CostObservation> observations;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.find_first_of("0123456789") == std::string::npos) continue;  // header
    std::istringstream row(line);
    std::string t_str, c_str;
    if (!std::getline(row, t_str, ',') || !std::getline(row, c_str, ','))
      fail_validation("malformed observation line: " + line);
    observations.push_back({std::stod(t_str), std::stod(c_str)});
  }
  return observations;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out,
              std::optional<std::uint64_t> seed) {
  nlohmann::json spec_json = nlohmann::json::parse(read_file(spec_path), nullptr, false);
  if (spec_json.is_discarded()) fail_validation("malformed synthetic spec file");
  if (seed) spec_json["seed"] = *seed;
  if (!spec_json.contains("seed"))
    fail_validation("synth: a seed is required (in the spec file or via --seed)");
  corpus::SyntheticSpec spec = corpus::SyntheticSpec::from_json(spec_json);
  corpus::Corpus docs = corpus::generate_synthetic(spec);
  corpus::save_corpus(docs, out);
  // The corpus format has no room for comments, so provenance rides in a
  // sidecar file.
  nlohmann::json meta;
  meta["command"] = "synth";
  meta["config"] = spec.to_json();
  meta["corpus_digest"] = corpus::corpus_digest(docs);
  write_file_atomic(out + ".meta.json", meta.dump(2) + "\n");
  std::cout << "wrote " << docs.docs.size() << " documents to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

struct ClusterFlags {
  std::string corpus_path;
  std::size_t k = 2;
  std::string mode = "balanced";
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t svd_dim = 100;
  std::size_t shard_size = 800;
  std::size_t max_iter = 100;
  double tol = 1e-6;
  bool squared = false;
  std::size_t top_terms = 5;
  std::string stopword_file;
};

int cmd_cluster(const ClusterFlags& flags) {
  corpus::Corpus docs = corpus::load_corpus(flags.corpus_path);
  fs::create_directories(flags.out_dir);
  nlohmann::json config = {{"k", flags.k},
                           {"mode", flags.mode},
                           {"seed", flags.seed},
                           {"svd_dim", flags.svd_dim},
                           {"shard_size", flags.shard_size},
                           {"max_iter", flags.max_iter},
                           {"tol", flags.tol},
                           {"squared", flags.squared}};
  nlohmann::json inputs = {{"corpus", flags.corpus_path},
                           {"corpus_digest", corpus::corpus_digest(docs)}};
  std::string provenance = provenance_line("cluster", config, inputs);

  cluster::Assignment assignment;
  if (flags.mode == "random") {
    assignment = cluster::random_assign(docs.docs.size(), flags.k, flags.seed);
  } else {
    std::vector<std::size_t> shard = btm::shard_indices(
        docs.docs.size(), flags.shard_size, derive_seed(flags.seed, 1));
    corpus::Corpus shard_docs;
    for (std::size_t idx : shard) shard_docs.docs.push_back(docs.docs[idx]);
    embed::EmbedConfig embed_config;
    embed_config.svd_dim = flags.svd_dim;
    if (!flags.stopword_file.empty()) {
      embed_config.tfidf.stopwords.clear();
      std::istringstream words(read_file(flags.stopword_file));
      std::string word;
      while (words >> word) embed_config.tfidf.stopwords.push_back(word);
    }
    embed::EmbedPipeline pipeline =
        embed::fit_pipeline(shard_docs.docs, embed_config, derive_seed(flags.seed, 1));
    embed::save_pipeline(pipeline, fs::path(flags.out_dir) / "pipeline.json");

    Matrix shard_points = embed_corpus(pipeline, shard_docs);
    cluster::KMeansConfig kmeans_config;
    kmeans_config.max_iter = flags.max_iter;
    kmeans_config.tol = flags.tol;
    kmeans_config.seed = derive_seed(flags.seed, 2);
    kmeans_config.mode = flags.squared ? cluster::DistanceMode::squared_euclidean
                                       : cluster::DistanceMode::euclidean;
    auto [model, shard_assignment] =
        flags.mode == "unbalanced"
            ? cluster::fit_unbalanced_kmeans(shard_points, flags.k, kmeans_config)
            : cluster::fit_balanced_kmeans(shard_points, flags.k, kmeans_config);
    cluster::save_cluster_model(model, fs::path(flags.out_dir) / "clusters.json");

    Matrix all_points = embed_corpus(pipeline, docs);
    assignment = cluster::greedy_assign(all_points, model.centers, kmeans_config.mode);

    std::ostringstream terms_body;
    for (std::size_t j = 0; j < flags.k; ++j) {
      auto terms = embed::top_terms(pipeline, model.centers.row(j), flags.top_terms);
      for (std::size_t r = 0; r < terms.size(); ++r)
        terms_body << j << "," << r << "," << terms[r].first << "," << terms[r].second
                   << "\n";
    }
    write_csv(fs::path(flags.out_dir) / "top_terms.csv", provenance,
              "cluster,rank,term,weight", terms_body.str());
  }

  btm::save_assignment_csv(assignment, docs, fs::path(flags.out_dir) / "assignment.csv");

  cluster::SizeStats stats = cluster::cluster_size_stats(assignment);
  std::ostringstream stats_body;
  stats_body << stats.min << "," << stats.max << "," << stats.median << ","
             << stats.range << "\n";
  write_csv(fs::path(flags.out_dir) / "size_stats.csv", provenance, "min,max,median,range",
            stats_body.str());

  bool labeled = true;
  for (const auto& doc : docs.docs)
    if (!doc.label) labeled = false;
  if (labeled) {
    cluster::OverlapMatrix overlap =
        cluster::overlap_matrix(assignment, require_labels(docs));
    std::ostringstream body;
    for (std::size_t row = 0; row < overlap.labels.size(); ++row) {
      body << overlap.labels[row];
      for (std::size_t c = 0; c < overlap.k; ++c) body << "," << overlap.at(row, c);
      body << "\n";
    }
    std::string header = "label";
    for (std::size_t c = 0; c < flags.k; ++c) header += ",cluster" + std::to_string(c);
    write_csv(fs::path(flags.out_dir) / "overlap.csv", provenance, header, body.str());
  }
  std::cout << "clustered " << docs.docs.size() << " documents into " << flags.k
            << " clusters (" << flags.mode << "); size range " << stats.range << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string corpus_path;
  std::string run_dir;
  std::size_t k = 1;
  std::string kind = "ngram";
  std::uint64_t seed = 0;
  std::uint64_t token_budget = 100000;
  std::uint64_t seed_token_budget = 0;
  std::size_t seq_len = 64;
  std::size_t vocab_max = 4096;
  std::size_t shard_size = 800;
  std::size_t svd_dim = 100;
  std::size_t ngram_order = 3;
  double alpha = 0.01;
  std::vector<double> lambdas;
  std::size_t batch_size = 8;
  double lr = 0.1;
  double dropout = 0.0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t context = 3;
  bool parallel = true;
  bool serial = false;
  std::size_t workers = 0;
  bool resume = false;

  btm::RunConfig to_run_config() const {
    btm::RunConfig config;
    config.k = k;
    config.expert.kind =
        kind == "neural" ? lm::ExpertKind::neural : lm::ExpertKind::ngram;
    config.expert.ngram.order = ngram_order;
    config.expert.ngram.alpha = alpha;
    config.expert.ngram.lambdas = lambdas;
    config.expert.neural = {embed_dim, hidden_dim, context};
    config.schedule.batch_size = batch_size;
    config.schedule.peak_lr = lr;
    config.schedule.dropout = dropout;
    config.token_budget = token_budget;
    config.seed_token_budget = seed_token_budget;
    config.seq_len = seq_len;
    config.vocab_max = vocab_max;
    config.shard_size = shard_size;
    config.svd_dim = svd_dim;
    config.seed = seed;
    config.parallel = serial ? false : parallel;
    config.worker_budget = workers;
    config.run_dir = run_dir;
    return config;
  }
};

int cmd_train(const TrainFlags& flags) {
  corpus::Corpus docs = corpus::load_corpus(flags.corpus_path);
  btm::RunConfig config = flags.to_run_config();
  if (flags.resume) {
    btm::RunManifest manifest = btm::resume(docs, config);
    if (manifest.all_done()) {
      btm::merge(config.run_dir);
      std::cout << "resume complete; collection written to "
                << (config.run_dir / "collection.json").string() << "\n";
      return 0;
    }
    std::cout << "resume finished with failures; inspect the manifest\n";
    return 3;
  }
  btm::RunArtifacts artifacts = btm::run_pipeline(docs, config);
  if (artifacts.manifest.all_done()) {
    btm::merge(config.run_dir);
    std::cout << "run complete: " << config.k << " expert(s) in " << flags.run_dir
              << " (run digest " << artifacts.manifest.run_digest().substr(0, 12)
              << ")\n";
    return 0;
  }
  std::size_t failed = 0;
  for (const auto& record : artifacts.manifest.experts)
    if (record.status != "done") ++failed;
  std::cout << failed << " expert job(s) failed; re-run with --resume after fixing\n";
  return 3;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string run_dir;
  std::string corpus_path;
  std::vector<double> temperatures = {0.1};
  std::vector<std::uint32_t> top_ks;
  std::string policy = "per_token";
  std::size_t seq_len = 64;
  std::size_t window = 0;
  std::string out;
};

int cmd_eval(const EvalFlags& flags) {
  btm::ExpertCollection collection = btm::load_collection(flags.run_dir);
  corpus::Corpus docs = corpus::load_corpus(flags.corpus_path);
  std::vector<std::uint32_t> top_ks = flags.top_ks;
  if (top_ks.empty()) top_ks.push_back(static_cast<std::uint32_t>(collection.k()));
  route::EvalOptions base;
  base.policy = flags.policy == "freeze_half" ? route::CachePolicy::freeze_half
                                              : route::CachePolicy::per_token;
  base.seq_len = flags.seq_len;
  base.context_window = flags.window;
  auto rows =
      route::temperature_sweep(collection, docs, flags.temperatures, top_ks, base);

  nlohmann::json config = {{"temperatures", flags.temperatures},
                           {"top_ks", top_ks},
                           {"cache_policy", flags.policy},
                           {"seq_len", flags.seq_len},
                           {"window", flags.window}};
  nlohmann::json inputs = {{"run_dir", flags.run_dir},
                           {"corpus", flags.corpus_path},
                           {"corpus_digest", corpus::corpus_digest(docs)}};
  std::ostringstream body;
  body.precision(17);
  for (const auto& row : rows)
    body << row.temperature << "," << row.k_active << "," << row.ppl << "\n";
  write_csv(flags.out, provenance_line("eval", config, inputs), "T,k_active,ppl",
            body.str());
  for (const auto& row : rows)
    std::cout << "T=" << row.temperature << " top-" << row.k_active
              << " ppl=" << row.ppl << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeFlags {
  std::string which;
  std::vector<std::string> run_dirs;
  std::string corpus_path;
  std::string out;
  std::size_t seq_len = 64;
  std::size_t top_terms = 5;
  budget::FlopSpec flop_spec{1, 1, 1, 1, 1, 1};
  std::string dense_csv;
  std::string sparse_csv;
  double target = 0.0;
  double penalty = 0.0;

  std::string run_dir() const {
    if (run_dirs.empty()) fail_validation("analyze: --run-dir required");
    return run_dirs.front();
  }
};

int cmd_analyze(const AnalyzeFlags& flags) {
  if (flags.which == "flops") {
    double per_expert = budget::elm_flops(flags.flop_spec);
    double total = budget::total_flops(flags.flop_spec);
    std::printf("elm_flops=%.17g total_flops=%.17g\n", per_expert, total);
    if (!flags.out.empty()) {
      nlohmann::json config = {{"l", flags.flop_spec.layers},
                               {"h", flags.flop_spec.hidden},
                               {"s", flags.flop_spec.seq_len},
                               {"V", flags.flop_spec.vocab},
                               {"T", flags.flop_spec.train_tokens},
                               {"k", flags.flop_spec.clusters}};
      std::ostringstream body;
      body.precision(17);
      body << flags.flop_spec.clusters << "," << per_expert << "," << total << "\n";
      write_csv(flags.out, provenance_line("analyze.flops", config, {}),
                "clusters,elm_flops,total_flops", body.str());
    }
    return 0;
  }
  if (flags.which == "speedup") {
    auto dense = load_observations(flags.dense_csv);
    auto sparse = load_observations(flags.sparse_csv);
    double factor = budget::speedup(dense, sparse, flags.target);
    std::printf("speedup=%.17g\n", factor);
    if (!flags.out.empty()) {
      nlohmann::json config = {{"target", flags.target}};
      nlohmann::json inputs = {{"dense", flags.dense_csv}, {"sparse", flags.sparse_csv}};
      std::ostringstream body;
      body.precision(17);
      body << flags.target << "," << factor << "\n";
      write_csv(flags.out, provenance_line("analyze.speedup", config, inputs),
                "target,speedup", body.str());
    }
    return 0;
  }
  if (flags.which == "scaling") {
    // One row per run: training tokens, cluster count, ensemble perplexity.
    if (flags.corpus_path.empty()) fail_validation("analyze scaling: --corpus required");
    corpus::Corpus eval_docs = corpus::load_corpus(flags.corpus_path);
    std::ostringstream body;
    body.precision(17);
    for (const std::string& dir : flags.run_dirs) {
      btm::ExpertCollection collection = btm::load_collection(dir);
      btm::RunManifest manifest = btm::load_manifest(fs::path(dir) / "manifest.json");
      route::EvalOptions options;
      options.temperature = 0.1;
      options.seq_len = flags.seq_len;
      double ppl = route::eval_ensemble_ppl(collection, eval_docs, options);
      body << manifest.config.value("token_budget", std::uint64_t(0)) << ","
           << manifest.k << "," << ppl << "\n";
    }
    nlohmann::json config = {{"run_dirs", flags.run_dirs}, {"seq_len", flags.seq_len}};
    nlohmann::json scaling_inputs = {{"corpus", flags.corpus_path},
                                     {"corpus_digest", corpus::corpus_digest(eval_docs)}};
    write_csv(flags.out, provenance_line("analyze.scaling", config, scaling_inputs),
              "tokens,clusters,ppl", body.str());
    std::cout << "wrote scaling rows for " << flags.run_dirs.size() << " run(s)\n";
    return 0;
  }
  if (flags.which == "updates") {
    std::vector<budget::UpdateInput> inputs;
    for (const std::string& dir : flags.run_dirs) {
      btm::RunManifest manifest = btm::load_manifest(fs::path(dir) / "manifest.json");
      budget::UpdateInput input;
      input.config = "k=" + std::to_string(manifest.k);
      input.workers = manifest.k;
      for (const auto& record : manifest.experts)
        input.per_expert_max.push_back(record.max_seconds_per_update);
      inputs.push_back(std::move(input));
    }
    auto rows = budget::update_report(inputs, flags.penalty);
    std::ostringstream body;
    for (const auto& row : rows)
      body << row.config << "," << row.workers << "," << row.max_seconds_per_update
           << "," << row.modeled_with_penalty << "\n";
    nlohmann::json config = {{"penalty", flags.penalty}, {"run_dirs", flags.run_dirs}};
    write_csv(flags.out, provenance_line("analyze.updates", config, {}),
              "config,workers,max_seconds_per_update,modeled_with_penalty", body.str());
    std::cout << "wrote update report for " << rows.size() << " run(s)\n";
    return 0;
  }

  btm::ExpertCollection collection = btm::load_collection(flags.run_dir());
  nlohmann::json inputs = {{"run_dir", flags.run_dir()}};
  if (flags.which == "terms") {
    std::ostringstream body;
    for (std::size_t j = 0; j < collection.k(); ++j) {
      auto terms = embed::top_terms(collection.pipeline,
                                    collection.clusters.centers.row(j), flags.top_terms);
      for (std::size_t r = 0; r < terms.size(); ++r)
        body << j << "," << r << "," << terms[r].first << "," << terms[r].second << "\n";
    }
    write_csv(flags.out, provenance_line("analyze.terms", {{"m", flags.top_terms}}, inputs),
              "cluster,rank,term,weight", body.str());
    std::cout << "wrote top terms for " << collection.k() << " clusters\n";
    return 0;
  }

  corpus::Corpus docs = corpus::load_corpus(flags.corpus_path);
  inputs["corpus"] = flags.corpus_path;
  inputs["corpus_digest"] = corpus::corpus_digest(docs);
  Matrix points = embed_corpus(collection.pipeline, docs);
  cluster::Assignment assignment =
      cluster::greedy_assign(points, collection.clusters.centers);

  if (flags.which == "sizes") {
    cluster::SizeStats stats = cluster::cluster_size_stats(assignment);
    std::ostringstream body;
    body << stats.min << "," << stats.max << "," << stats.median << "," << stats.range
         << "\n";
    write_csv(flags.out, provenance_line("analyze.sizes", {}, inputs),
              "min,max,median,range", body.str());
    std::cout << "cluster sizes: min=" << stats.min << " max=" << stats.max
              << " median=" << stats.median << " range=" << stats.range << "\n";
    return 0;
  }
  if (flags.which == "overlap") {
    cluster::OverlapMatrix overlap =
        cluster::overlap_matrix(assignment, require_labels(docs));
    std::ostringstream body;
    for (std::size_t row = 0; row < overlap.labels.size(); ++row) {
      body << overlap.labels[row];
      for (std::size_t c = 0; c < overlap.k; ++c) body << "," << overlap.at(row, c);
      body << "\n";
    }
    std::string header = "label";
    for (std::size_t c = 0; c < collection.k(); ++c)
      header += ",cluster" + std::to_string(c);
    write_csv(flags.out, provenance_line("analyze.overlap", {}, inputs), header,
              body.str());
    std::cout << "wrote overlap matrix (" << overlap.labels.size() << " labels x "
              << overlap.k << " clusters)\n";
    return 0;
  }
  if (flags.which == "specialization") {
    // ratio(e, c) = ppl(expert e on cluster c's docs) / ppl(expert c on them)
    std::vector<corpus::Corpus> slices(collection.k());
    for (std::size_t d = 0; d < docs.docs.size(); ++d)
      slices[assignment.cluster_of[d]].docs.push_back(docs.docs[d]);
    for (std::size_t c = 0; c < collection.k(); ++c)
      if (slices[c].docs.empty())
        fail_validation("cluster " + std::to_string(c) +
                        " has no evaluation documents; use a larger corpus");
    Matrix ppl(collection.k(), collection.k());
    for (std::size_t e = 0; e < collection.k(); ++e)
      for (std::size_t c = 0; c < collection.k(); ++c)
        ppl.at(e, c) = lm::perplexity(*collection.experts[e], slices[c],
                                      collection.vocab, flags.seq_len);
    std::ostringstream body;
    body.precision(17);
    for (std::size_t e = 0; e < collection.k(); ++e) {
      body << e;
      for (std::size_t c = 0; c < collection.k(); ++c)
        body << "," << ppl.at(e, c) / ppl.at(c, c);
      body << "\n";
    }
    std::string header = "expert";
    for (std::size_t c = 0; c < collection.k(); ++c)
      header += ",cluster" + std::to_string(c);
    write_csv(flags.out,
              provenance_line("analyze.specialization", {{"seq_len", flags.seq_len}},
                              inputs),
              header, body.str());
    std::cout << "wrote " << collection.k() << "x" << collection.k()
              << " specialization ratio matrix\n";
    return 0;
  }
  fail_validation("unknown analysis: " + flags.which);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clusterlm: cluster-specialized expert language models"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-domain corpus");
  std::string synth_spec, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec, "synthetic spec JSON file")->required();
  synth->add_option("--out", synth_out, "output corpus (JSONL)")->required();
  synth->add_option("--seed", synth_seed, "override the spec's seed");

  auto* cluster_cmd =
      app.add_subcommand("cluster", "fit the embedding pipeline and clusters");
  ClusterFlags cf;
  cluster_cmd->add_option("--corpus", cf.corpus_path)->required();
  cluster_cmd->add_option("--k", cf.k)->required();
  cluster_cmd->add_option("--mode", cf.mode)
      ->check(CLI::IsMember({"balanced", "unbalanced", "random"}));
  cluster_cmd->add_option("--out-dir", cf.out_dir)->required();
  cluster_cmd->add_option("--seed", cf.seed)->required();
  cluster_cmd->add_option("--svd-dim", cf.svd_dim);
  cluster_cmd->add_option("--shard-size", cf.shard_size);
  cluster_cmd->add_option("--max-iter", cf.max_iter);
  cluster_cmd->add_option("--tol", cf.tol);
  cluster_cmd->add_flag("--squared", cf.squared, "squared-distance assignment objective");
  cluster_cmd->add_option("--top-terms", cf.top_terms);
  cluster_cmd->add_option("--stopwords", cf.stopword_file, "stopword lexicon file");

  auto* train_cmd = app.add_subcommand("train", "branch-train-merge expert training");
  TrainFlags tf;
  train_cmd->add_option("--corpus", tf.corpus_path)->required();
  train_cmd->add_option("--out-dir", tf.run_dir)->required();
  train_cmd->add_option("--k", tf.k);
  train_cmd->add_option("--kind", tf.kind)->check(CLI::IsMember({"ngram", "neural"}));
  train_cmd->add_option("--seed", tf.seed)->required();
  train_cmd->add_option("--token-budget", tf.token_budget);
  train_cmd->add_option("--seed-token-budget", tf.seed_token_budget);
  train_cmd->add_option("--seq-len", tf.seq_len);
  train_cmd->add_option("--vocab-max", tf.vocab_max);
  train_cmd->add_option("--shard-size", tf.shard_size);
  train_cmd->add_option("--svd-dim", tf.svd_dim);
  train_cmd->add_option("--ngram-order", tf.ngram_order);
  train_cmd->add_option("--alpha", tf.alpha);
  train_cmd->add_option("--lambda", tf.lambdas, "interpolation weights (one per order)");
  train_cmd->add_option("--batch-size", tf.batch_size);
  train_cmd->add_option("--lr", tf.lr);
  train_cmd->add_option("--dropout", tf.dropout);
  train_cmd->add_option("--embed-dim", tf.embed_dim);
  train_cmd->add_option("--hidden-dim", tf.hidden_dim);
  train_cmd->add_option("--context", tf.context);
  train_cmd->add_flag("--parallel", tf.parallel,
                      "forked worker per expert (the default)");
  train_cmd->add_flag("--serial", tf.serial, "run expert jobs in-process (debugging)");
  train_cmd->add_option("--workers", tf.workers, "max concurrent workers");
  train_cmd->add_flag("--resume", tf.resume, "re-run only non-done experts");

  auto* eval_cmd = app.add_subcommand("eval", "ensemble perplexity on a corpus");
  EvalFlags ef;
  eval_cmd->add_option("--run-dir", ef.run_dir)->required();
  eval_cmd->add_option("--corpus", ef.corpus_path)->required();
  eval_cmd->add_option("--temperature", ef.temperatures, "temperature grid");
  eval_cmd->add_option("--top-k", ef.top_ks, "top-k grid (default: all experts)");
  eval_cmd->add_option("--cache-policy", ef.policy)
      ->check(CLI::IsMember({"per_token", "freeze_half"}));
  eval_cmd->add_option("--seq-len", ef.seq_len);
  eval_cmd->add_option("--window", ef.window, "routing context window (0 = full)");
  eval_cmd->add_option("--out", ef.out)->required();

  auto* analyze_cmd = app.add_subcommand("analyze", "emit analysis artifacts");
  AnalyzeFlags af;
  analyze_cmd->add_option("--which", af.which)
      ->required()
      ->check(CLI::IsMember({"specialization", "terms", "overlap", "sizes", "scaling",
                             "flops", "speedup", "updates"}));
  analyze_cmd->add_option("--run-dir", af.run_dirs);
  analyze_cmd->add_option("--corpus", af.corpus_path);
  analyze_cmd->add_option("--out", af.out);
  analyze_cmd->add_option("--seq-len", af.seq_len);
  analyze_cmd->add_option("--top-terms", af.top_terms);
  analyze_cmd->add_option("--layers", af.flop_spec.layers);
  analyze_cmd->add_option("--hidden", af.flop_spec.hidden);
  analyze_cmd->add_option("--seq", af.flop_spec.seq_len);
  analyze_cmd->add_option("--vocab", af.flop_spec.vocab);
  analyze_cmd->add_option("--tokens", af.flop_spec.train_tokens);
  analyze_cmd->add_option("--clusters", af.flop_spec.clusters);
  analyze_cmd->add_option("--dense", af.dense_csv);
  analyze_cmd->add_option("--sparse", af.sparse_csv);
  analyze_cmd->add_option("--target", af.target);
  analyze_cmd->add_option("--penalty", af.penalty);

  auto* budget_cmd = app.add_subcommand("budget", "cost calculators");
  budget_cmd->require_subcommand(1);
  auto* flops_cmd = budget_cmd->add_subcommand("flops", "expert / total training FLOPs");
  budget::FlopSpec flop_spec{1, 1, 1, 1, 1, 1};
  bool flops_total = false;
  flops_cmd->add_option("--layers", flop_spec.layers)->required();
  flops_cmd->add_option("--hidden", flop_spec.hidden)->required();
  flops_cmd->add_option("--seq", flop_spec.seq_len)->required();
  flops_cmd->add_option("--vocab", flop_spec.vocab)->required();
  flops_cmd->add_option("--tokens", flop_spec.train_tokens)->required();
  flops_cmd->add_option("--clusters", flop_spec.clusters);
  flops_cmd->add_flag("--total", flops_total, "report k * per-expert FLOPs");
  auto* interp_cmd =
      budget_cmd->add_subcommand("interpolate", "log-space cost at a target");
  std::string in_obs;
  double in_target = 0.0;
  interp_cmd->add_option("--observations", in_obs, "CSV of performance,cost rows")
      ->required();
  interp_cmd->add_option("--target", in_target)->required();
  auto* speed_cmd = budget_cmd->add_subcommand("speedup", "dense / sparse cost ratio");
  std::string sp_dense, sp_sparse;
  double sp_target = 0.0;
  speed_cmd->add_option("--dense", sp_dense)->required();
  speed_cmd->add_option("--sparse", sp_sparse)->required();
  speed_cmd->add_option("--target", sp_target)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_out, synth_seed);
    if (cluster_cmd->parsed()) return cmd_cluster(cf);
    if (train_cmd->parsed()) return cmd_train(tf);
    if (eval_cmd->parsed()) return cmd_eval(ef);
    if (analyze_cmd->parsed()) return cmd_analyze(af);
    if (budget_cmd->parsed()) {
      if (flops_cmd->parsed()) {
        double value =
            flops_total ? budget::total_flops(flop_spec) : budget::elm_flops(flop_spec);
        std::printf("%.17g\n", value);
        return 0;
      }
      if (interp_cmd->parsed()) {
        std::printf("%.17g\n",
                    budget::interpolate_cost(load_observations(in_obs), in_target));
        return 0;
      }
      if (speed_cmd->parsed()) {
        std::printf("%.17g\n", budget::speedup(load_observations(sp_dense),
                                               load_observations(sp_sparse), sp_target));
        return 0;
      }
    }
    fail_validation("no subcommand selected");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::validation:
        return 2;
      case ErrorKind::runtime:
        return 3;
      case ErrorKind::integrity:
        return 4;
    }
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

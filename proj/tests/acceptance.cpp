// Acceptance suite: one binary, one pass/fail line per criterion, nonzero
// exit if anything fails. Each criterion pins its tolerance in code and is
// timed against its stated runtime budget.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "clusterlm/btm.hpp"
#include "clusterlm/budget.hpp"
#include "clusterlm/cluster.hpp"
#include "clusterlm/corpus.hpp"
#include "clusterlm/embed.hpp"
#include "clusterlm/lm.hpp"
#include "clusterlm/route.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace clusterlm;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void run_criterion(int id, const std::string& name, double time_budget_s,
                   const std::function<std::string()>& body) {
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  bool pass = true;
  std::string detail;
  try {
    detail = body();
  } catch (const std::exception& e) {
    pass = false;
    detail = std::string("exception: ") + e.what();
  }
  double elapsed = std::chrono::duration<double>(clock::now() - t0).count();
  if (pass && elapsed >= time_budget_s) {
    pass = false;
    detail += " [over time budget]";
  }
  if (!pass) ++failures;
  std::printf("[%s] criterion %2d (%.1fs/%.0fs): %s%s%s\n", pass ? "PASS" : "FAIL", id,
              elapsed, time_budget_s, name.c_str(), detail.empty() ? "" : " - ",
              detail.c_str());
  std::fflush(stdout);
}

void require(bool condition, const std::string& message) {
  if (!condition) throw Error(ErrorKind::runtime, message);
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "clusterlm_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_digest(const fs::path& path) { return sha256_hex(read_file(path)); }

corpus::SyntheticSpec eight_domain_spec(std::uint64_t seed,
                                        std::size_t docs_per_domain) {
  corpus::SyntheticSpec spec;
  spec.n_domains = 8;
  spec.vocab_per_domain = 50;
  spec.shared_vocab = 10;
  spec.docs_per_domain = docs_per_domain;
  spec.doc_length_min = 60;
  spec.doc_length_max = 90;
  spec.seed = seed;
  return spec;
}

btm::RunConfig eight_domain_config(const fs::path& run_dir, std::size_t k) {
  btm::RunConfig config;
  config.k = k;
  config.expert.kind = lm::ExpertKind::ngram;
  config.expert.ngram.order = 2;
  config.token_budget = 240000;
  config.seq_len = 64;
  config.vocab_max = 4096;
  config.shard_size = 600;
  config.svd_dim = 16;
  config.seed = 1;
  config.schedule.batch_size = 8;
  config.run_dir = run_dir;
  return config;
}

// Shared state for the figure-direction criteria (5-8).
struct EightDomainRuns {
  corpus::Corpus train;
  corpus::Corpus eval;
  std::map<std::size_t, btm::ExpertCollection> collections;  // by k
  std::map<std::size_t, double> full_topk_ppl;               // by k, T = 0.1
};

EightDomainRuns* g_runs = nullptr;

EightDomainRuns& eight_domain_runs() {
  if (g_runs != nullptr) return *g_runs;
  g_runs = new EightDomainRuns();
  g_runs->train = corpus::generate_synthetic(eight_domain_spec(7001, 420));
  g_runs->eval = corpus::generate_synthetic(eight_domain_spec(7002, 25));
  for (std::size_t k : {1, 4, 8}) {
    fs::path dir = fresh_dir("fig3_k" + std::to_string(k));
    btm::RunConfig config = eight_domain_config(dir, k);
    btm::RunArtifacts artifacts = btm::run_pipeline(g_runs->train, config);
    require(artifacts.manifest.all_done(), "expert training failed for k=" +
                                               std::to_string(k));
    btm::merge(dir);
    g_runs->collections.emplace(k, btm::load_collection(dir));
    route::EvalOptions options;
    options.temperature = 0.1;
    options.k_active = static_cast<std::uint32_t>(k);
    options.seq_len = config.seq_len;
    g_runs->full_topk_ppl[k] =
        route::eval_ensemble_ppl(g_runs->collections.at(k), g_runs->eval, options);
  }
  return *g_runs;
}

std::string format_double(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.6g", value);
  return buffer;
}

}  // namespace

// ---------------------------------------------------------------------------

int main() {
  std::printf("acceptance suite\n");

  run_criterion(1, "balanced assignment optimality vs brute force", 10.0, [] {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
      std::size_t k = 2 + rng.next_below(2);       // 2..3
      std::size_t n = k + rng.next_below(13 - k);  // k..12
      std::size_t dim = 1 + rng.next_below(3);
      Matrix pts(n, dim);
      for (double& v : pts.data) v = 2.0 * rng.next_normal();
      Matrix centers(k, dim);
      for (double& v : centers.data) v = 2.0 * rng.next_normal();
      cluster::Assignment assignment = cluster::balanced_assign(pts, centers);
      double oracle = testing::brute_force_optimal_balanced_cost(pts, centers);
      require(std::fabs(*assignment.cost - oracle) <= 1e-6,
              "auction cost " + format_double(*assignment.cost) +
                  " != brute force " + format_double(oracle));
    }
    for (int trial = 0; trial < 5; ++trial) {
      Matrix pts(64, 4);
      for (double& v : pts.data) v = rng.next_normal();
      Matrix centers(8, 4);
      for (double& v : centers.data) v = rng.next_normal();
      cluster::Assignment assignment = cluster::balanced_assign(pts, centers);
      for (std::size_t size : assignment.sizes())
        require(size == 8, "D=64 K=8 cluster size " + std::to_string(size) + " != 8");
    }
    return std::string("200 instances optimal within 1e-6; D=64/K=8 sizes exactly 8");
  });

  run_criterion(2, "FLOP formula and parallelism identity", 1.0, [] {
    budget::FlopSpec spec{2, 4, 8, 16, 100, 1};
    require(budget::elm_flops(spec) == 448000.0, "worked example not exactly 448000");
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      budget::FlopSpec random_spec;
      random_spec.layers = 1 + rng.next_below(64);
      random_spec.hidden = 8 + rng.next_below(8192);
      random_spec.seq_len = 16 + rng.next_below(4096);
      random_spec.vocab = 128 + rng.next_below(60000);
      random_spec.train_tokens = 1 + rng.next_below(1u << 30);
      random_spec.clusters = std::size_t(1) << rng.next_below(8);
      budget::FlopSpec dense = random_spec;
      dense.clusters = 1;
      require(static_cast<double>(random_spec.clusters) * budget::elm_flops(random_spec) ==
                  budget::elm_flops(dense),
              "identity k*F(T,k) = F(T,1) not exact");
    }
    return std::string("448000 exact; identity exact over 100 random specs");
  });

  run_criterion(3, "log-space cost interpolation and speedup identity", 1.0, [] {
    std::vector<budget::CostObservation> obs = {{10.0, 100.0}, {20.0, 1000.0}};
    double c = budget::interpolate_cost(obs, 15.0);
    require(std::fabs(c - 316.227766) <= 1e-6,
            "interpolation " + format_double(c) + " != 316.227766");
    Rng rng(4);
    std::vector<budget::CostObservation> curve;
    for (int i = 0; i < 6; ++i)
      curve.push_back({static_cast<double>(i), 10.0 + 100.0 * rng.next_real01()});
    for (double t = 0.0; t <= 5.0; t += 0.37)
      require(budget::speedup(curve, curve, t) == 1.0, "speedup(a,a,t) != 1 exactly");
    return std::string("316.227766 within 1e-6; speedup(a,a,t) == 1 exactly");
  });

  run_criterion(4, "distance-softmax ensemble weights", 1.0, [] {
    Matrix centers(2, 1);
    centers.at(0, 0) = 1.0;
    centers.at(1, 0) = 2.0;
    std::vector<double> origin = {0.0};
    route::EnsembleWeights hand = route::ensemble_weights(origin, centers, 1.0, 2);
    require(std::fabs(hand.probs[0] - 0.952574) <= 1e-6 &&
                std::fabs(hand.probs[1] - 0.047426) <= 1e-6,
            "hand example mismatch");

    Matrix three(3, 1);
    three.at(0, 0) = 1.0;
    three.at(1, 0) = 1.5;
    three.at(2, 0) = 4.0;
    route::EnsembleWeights cold = route::ensemble_weights(origin, three, 1e-12, 3);
    require(cold.probs[0] == 1.0, "T -> 0 limit not one-hot on the nearest center");
    route::EnsembleWeights hot = route::ensemble_weights(origin, three, 1e6, 3);
    for (double p : hot.probs)
      require(std::fabs(p - 1.0 / 3.0) <= 1e-3, "T = 1e6 not within 1e-3 of uniform");

    Rng rng(9);
    for (int trial = 0; trial < 1000; ++trial) {
      std::size_t k = 1 + rng.next_below(10);
      std::size_t dim = 1 + rng.next_below(5);
      Matrix random_centers(k, dim);
      for (double& v : random_centers.data) v = rng.next_uniform(-3.0, 3.0);
      std::vector<double> ctx(dim);
      for (double& v : ctx) v = rng.next_uniform(-3.0, 3.0);
      route::EnsembleWeights w = route::ensemble_weights(
          ctx, random_centers, 0.05 + rng.next_real01(),
          1 + static_cast<std::uint32_t>(rng.next_below(k)));
      double sum = 0.0;
      for (double p : w.probs) sum += p;
      require(std::fabs(sum - 1.0) <= 1e-9, "weights do not sum to 1 within 1e-9");
    }
    return std::string("hand values, both temperature limits, 1000 random draws sum to 1");
  });

  run_criterion(5, "cluster-count scaling direction (token-matched)", 300.0, [] {
    EightDomainRuns& runs = eight_domain_runs();
    double p1 = runs.full_topk_ppl.at(1);
    double p4 = runs.full_topk_ppl.at(4);
    double p8 = runs.full_topk_ppl.at(8);
    require(p8 < p4, "ppl(K=8) >= ppl(K=4)");
    require(p4 < p1, "ppl(K=4) >= ppl(K=1)");
    double gap = (p1 - p8) / p1;
    require(gap >= 0.05, "K=8 vs K=1 relative gap " + format_double(gap) + " < 5%");
    return "ppl K=1/4/8 = " + format_double(p1) + "/" + format_double(p4) + "/" +
           format_double(p8) + ", gap " + format_double(100.0 * gap) + "%";
  });

  run_criterion(6, "random clusters underperform the dense model", 300.0, [] {
    EightDomainRuns& runs = eight_domain_runs();
    const btm::ExpertCollection& reference = runs.collections.at(8);
    btm::RunConfig config = eight_domain_config(fresh_dir("fig9"), 8);

    // Same corpus and budget, but documents land in random clusters; the
    // inference-time centers stay as learned.
    cluster::Assignment random_assignment =
        cluster::random_assign(runs.train.docs.size(), 8, 777);
    std::vector<corpus::Corpus> slices(8);
    for (std::size_t d = 0; d < runs.train.docs.size(); ++d)
      slices[random_assignment.cluster_of[d]].docs.push_back(runs.train.docs[d]);

    corpus::Vocab vocab = corpus::build_vocab(runs.train, config.vocab_max);
    std::vector<std::size_t> shard_idx = btm::shard_indices(
        runs.train.docs.size(), config.shard_size, config.pipeline_seed());
    corpus::Corpus shard;
    for (std::size_t idx : shard_idx) shard.docs.push_back(runs.train.docs[idx]);
    auto seed_model = lm::new_seed(config.expert, vocab, config.seed_model_seed());
    corpus::SequenceBatch shard_rows =
        corpus::pack_sequences(shard, vocab, config.seq_len);
    lm::train(*seed_model, shard_rows,
              btm::detail::derive_schedule(config, shard_rows.rows.size(),
                                           config.seed_model_seed()));

    btm::ExpertCollection random_collection;
    random_collection.vocab = vocab;
    random_collection.pipeline = reference.pipeline;
    random_collection.clusters = reference.clusters;
    for (std::uint32_t j = 0; j < 8; ++j) {
      auto expert = seed_model->branch();
      corpus::SequenceBatch packed =
          corpus::pack_sequences(slices[j], vocab, config.seq_len);
      corpus::SequenceBatch rows =
          btm::detail::budget_rows(packed, config.token_budget / 8);
      lm::train(*expert, rows,
                btm::detail::derive_schedule(config, rows.rows.size(),
                                             config.expert_seed(j)));
      random_collection.experts.push_back(std::move(expert));
      random_collection.checkpoint_digests.push_back("");
    }

    route::EvalOptions options;
    options.temperature = 0.1;
    options.k_active = 8;
    options.seq_len = config.seq_len;
    double random_ppl =
        route::eval_ensemble_ppl(random_collection, runs.eval, options);
    double dense_ppl = runs.full_topk_ppl.at(1);
    require(random_ppl >= dense_ppl, "random-cluster ppl " + format_double(random_ppl) +
                                         " < dense " + format_double(dense_ppl));
    return "random K=8 ppl " + format_double(random_ppl) + " >= dense " +
           format_double(dense_ppl);
  });

  run_criterion(7, "sparsified inference direction (top-1 / top-2 / full)", 300.0, [] {
    EightDomainRuns& runs = eight_domain_runs();
    const btm::ExpertCollection& collection = runs.collections.at(8);
    route::EvalOptions options;
    options.temperature = 0.1;
    options.seq_len = 64;
    options.k_active = 1;
    double top1 = route::eval_ensemble_ppl(collection, runs.eval, options);
    options.k_active = 2;
    double top2 = route::eval_ensemble_ppl(collection, runs.eval, options);
    double full = runs.full_topk_ppl.at(8);
    double dense = runs.full_topk_ppl.at(1);
    require(top1 < dense,
            "top-1 ppl " + format_double(top1) + " >= dense " + format_double(dense));
    double gap = std::fabs(top2 - full) / full;
    require(gap <= 0.02, "top-2 vs full gap " + format_double(gap) + " > 2%");
    return "top-1 " + format_double(top1) + " < dense " + format_double(dense) +
           "; |top-2 - full|/full = " + format_double(100.0 * gap) + "%";
  });

  run_criterion(8, "expert specialization ratio matrix", 300.0, [] {
    EightDomainRuns& runs = eight_domain_runs();
    const btm::ExpertCollection& collection = runs.collections.at(8);
    Matrix points(runs.eval.docs.size(), collection.pipeline.dim());
    for (std::size_t d = 0; d < runs.eval.docs.size(); ++d) {
      std::vector<double> e = collection.pipeline.embed(runs.eval.docs[d].text);
      std::copy(e.begin(), e.end(), points.row(d).begin());
    }
    cluster::Assignment assignment =
        cluster::greedy_assign(points, collection.clusters.centers);
    std::vector<corpus::Corpus> slices(8);
    for (std::size_t d = 0; d < runs.eval.docs.size(); ++d)
      slices[assignment.cluster_of[d]].docs.push_back(runs.eval.docs[d]);
    for (std::size_t c = 0; c < 8; ++c)
      require(!slices[c].docs.empty(), "eval cluster " + std::to_string(c) + " empty");

    Matrix ppl(8, 8);
    for (std::size_t e = 0; e < 8; ++e)
      for (std::size_t c = 0; c < 8; ++c)
        ppl.at(e, c) =
            lm::perplexity(*collection.experts[e], slices[c], collection.vocab, 64);
    std::size_t off_diag = 0, at_least_one = 0;
    for (std::size_t e = 0; e < 8; ++e) {
      require(ppl.at(e, e) / ppl.at(e, e) == 1.0, "diagonal ratio != 1 exactly");
      for (std::size_t c = 0; c < 8; ++c) {
        if (e == c) continue;
        ++off_diag;
        if (ppl.at(e, c) / ppl.at(c, c) >= 1.0) ++at_least_one;
      }
    }
    double fraction = static_cast<double>(at_least_one) / static_cast<double>(off_diag);
    require(fraction >= 0.95, "only " + format_double(100.0 * fraction) +
                                  "% of off-diagonal ratios >= 1");
    return "diagonal exactly 1; " + format_double(100.0 * fraction) +
           "% of off-diagonal ratios >= 1";
  });

  run_criterion(9, "balancing narrows cluster sizes on skewed data", 60.0, [] {
    corpus::SyntheticSpec spec;
    spec.n_domains = 2;
    spec.vocab_per_domain = 30;
    spec.shared_vocab = 5;
    spec.docs_per_domain = 100;
    spec.doc_length_min = 30;
    spec.doc_length_max = 60;
    spec.skew = {1.8, 0.2};  // 90/10 document masses
    spec.seed = 31;
    corpus::Corpus docs = corpus::generate_synthetic(spec);
    embed::EmbedConfig embed_config;
    embed_config.svd_dim = 4;
    embed::EmbedPipeline pipeline = embed::fit_pipeline(docs.docs, embed_config, 1);
    Matrix points(docs.docs.size(), pipeline.dim());
    for (std::size_t d = 0; d < docs.docs.size(); ++d) {
      std::vector<double> e = pipeline.embed(docs.docs[d].text);
      std::copy(e.begin(), e.end(), points.row(d).begin());
    }
    cluster::KMeansConfig config;
    config.seed = 5;
    auto [bal_model, bal_assignment] = cluster::fit_balanced_kmeans(points, 2, config);
    auto [unb_model, unb_assignment] = cluster::fit_unbalanced_kmeans(points, 2, config);
    cluster::SizeStats balanced = cluster::cluster_size_stats(bal_assignment);
    cluster::SizeStats unbalanced = cluster::cluster_size_stats(unb_assignment);
    require(balanced.range <= 1, "balanced range " + std::to_string(balanced.range));
    double ratio =
        static_cast<double>(unbalanced.max) / static_cast<double>(unbalanced.min);
    require(ratio >= 2.0, "unbalanced max/min " + format_double(ratio) + " < 2");
    return "balanced range " + std::to_string(balanced.range) + "; unbalanced max/min " +
           format_double(ratio);
  });

  run_criterion(10, "neural gradient check on 20 random tiny configs", 30.0, [] {
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      std::size_t n_tokens = 6 + rng.next_below(8);
      std::string text;
      for (std::size_t i = 0; i < 3 * n_tokens; ++i)
        text += "w" + std::to_string(rng.next_below(n_tokens)) + " ";
      corpus::Corpus c;
      c.docs = {{"d", text, {}}};
      corpus::Vocab vocab = corpus::build_vocab(c, n_tokens + 3);
      lm::NeuralConfig config;
      config.embed_dim = 2 + rng.next_below(4);
      config.hidden_dim = 3 + rng.next_below(8);
      config.context = 1 + rng.next_below(4);
      corpus::SequenceBatch batch = corpus::pack_sequences(c, vocab, 6);
      batch.rows.resize(1);  // one sequence keeps the finite differences cheap
      batch.mask.resize(1);
      lm::NeuralModel model(vocab, config, rng.next_u64());
      double err = lm::grad_check(model, batch, 1e-5);
      worst = std::max(worst, err);
      require(err <= 1e-4, "grad check rel err " + format_double(err) + " > 1e-4");
    }
    return "max relative error " + format_double(worst) + " <= 1e-4";
  });

  run_criterion(11, "n-gram recount oracle and exact uniform perplexity", 30.0, [] {
    Rng rng(15);
    corpus::Corpus base;
    base.docs = {{"d", "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9 t10 t11 t12", {}}};
    corpus::Vocab vocab = corpus::build_vocab(base, 16);
    for (int trial = 0; trial < 50; ++trial) {
      lm::NGramConfig config;
      config.order = 1 + rng.next_below(4);
      lm::NGramModel model(vocab, config);
      std::vector<std::int32_t> stream;
      std::size_t length = 1 + rng.next_below(10000);
      for (std::size_t i = 0; i < length; ++i)
        stream.push_back(static_cast<std::int32_t>(rng.next_below(vocab.size())));
      model.ingest(stream);
      require(lm::recount_oracle(model, stream),
              "incremental counts != recount on a random stream");
    }
    require(vocab.size() == 16, "test vocabulary is not 16 tokens");
    lm::NGramConfig config;
    config.order = 3;
    lm::NGramModel fresh(vocab, config);
    corpus::Corpus eval;
    eval.docs = {{"e", "t0 t3 t9 t2 t5", {}}};
    double ppl = lm::perplexity(fresh, eval, vocab, 6);
    require(ppl == 16.0, "uniform-model perplexity " + format_double(ppl) + " != 16");
    return std::string("50 random streams recounted bit-equal; uniform ppl == 16 exactly");
  });

  run_criterion(12, "fault isolation, resume, and execution determinism", 300.0, [] {
    corpus::SyntheticSpec spec = eight_domain_spec(9001, 40);
    spec.vocab_per_domain = 15;
    corpus::Corpus docs = corpus::generate_synthetic(spec);
    auto config_for = [&](const fs::path& dir) {
      btm::RunConfig config = eight_domain_config(dir, 8);
      config.token_budget = 16000;
      config.shard_size = 128;
      config.svd_dim = 8;
      return config;
    };

    // Kill one of 8 expert jobs, then resume: exactly one retrained and the
    // surviving checkpoints byte-identical.
    fs::path dir = fresh_dir("fault");
    btm::RunConfig config = config_for(dir);
    config.parallel = true;
    config.fault_injection = {5};
    btm::RunArtifacts broken = btm::run_pipeline(docs, config);
    std::map<std::uint32_t, std::string> before;
    std::size_t failed_count = 0;
    for (const auto& record : broken.manifest.experts) {
      if (record.status == "failed") {
        ++failed_count;
        require(record.cluster_id == 5, "wrong expert failed");
      } else {
        before[record.cluster_id] = file_digest(record.checkpoint_path);
      }
    }
    require(failed_count == 1, "expected exactly one failed expert");
    config.fault_injection.clear();
    btm::RunManifest resumed = btm::resume(docs, config);
    require(resumed.all_done(), "resume did not finish the run");
    for (const auto& record : resumed.experts) {
      if (record.cluster_id == 5) continue;
      require(file_digest(record.checkpoint_path) == before.at(record.cluster_id),
              "surviving checkpoint changed on resume");
    }

    // Serial and parallel runs produce identical run digests.
    fs::path serial_dir = fresh_dir("serial");
    btm::RunConfig serial = config_for(serial_dir);
    serial.parallel = false;
    btm::RunArtifacts serial_run = btm::run_pipeline(docs, serial);
    fs::path parallel_dir = fresh_dir("parallel");
    btm::RunConfig parallel = config_for(parallel_dir);
    parallel.parallel = true;
    btm::RunArtifacts parallel_run = btm::run_pipeline(docs, parallel);
    require(serial_run.manifest.run_digest() == parallel_run.manifest.run_digest(),
            "serial vs parallel run digests differ");
    require(resumed.run_digest() == serial_run.manifest.run_digest(),
            "resumed run digest differs from a clean run");

    // Launch-order permutation invariance over 5 shuffles.
    Rng rng(123);
    for (int shuffle = 0; shuffle < 5; ++shuffle) {
      std::vector<std::uint32_t> order = {0, 1, 2, 3, 4, 5, 6, 7};
      rng.shuffle(order);
      fs::path shuffle_dir = fresh_dir("shuffle" + std::to_string(shuffle));
      btm::RunConfig shuffled = config_for(shuffle_dir);
      shuffled.launch_order = order;
      btm::RunArtifacts run = btm::run_pipeline(docs, shuffled);
      require(run.manifest.run_digest() == serial_run.manifest.run_digest(),
              "launch-order shuffle changed the run digest");
    }
    return std::string(
        "1/8 killed and resumed with 7 checkpoints byte-identical; serial == parallel; "
        "5 shuffles invariant");
  });

  run_criterion(13, "performance routing hand examples", 1.0, [] {
    corpus::Corpus base;
    base.docs = {{"d", "foo bar yes no", {}}};
    corpus::Vocab vocab = corpus::build_vocab(base, 16);
    btm::ExpertCollection collection;
    collection.vocab = vocab;
    collection.experts.push_back(
        std::make_unique<testing::PeakedStub>(vocab, vocab.id_of("yes")));
    collection.experts.push_back(
        std::make_unique<testing::PeakedStub>(vocab, vocab.id_of("no")));
    collection.checkpoint_digests = {"", ""};
    route::FewShotTask task;
    task.label_order = {"pos", "neg"};
    task.verbalizers = {{"pos", "yes"}, {"neg", "no"}};
    task.demonstrations = {{"foo", "pos"}, {"bar foo", "pos"}};
    task.test = {{"bar", "pos"}, {"foo bar", "pos"}};
    task.validate();

    std::vector<route::FewShotExample> validation = {{"bar bar", "pos"},
                                                     {"foo foo", "pos"}};
    route::EnsembleWeights fixed =
        route::perf_route_fixed_val(collection, task, validation);
    require(std::fabs(fixed.probs[0] - 0.731059) <= 1e-6 &&
                std::fabs(fixed.probs[1] - 0.268941) <= 1e-6,
            "softmax hand example mismatch");

    route::PerfRouteConfig half;
    half.ema_alpha = 0.5;
    std::vector<route::FewShotExample> one = {task.test[0]};
    auto trajectory = route::perf_route_updating(collection, task, one, half);
    require(std::fabs(trajectory[1].probs[0] - 0.615529) <= 1e-6 &&
                std::fabs(trajectory[1].probs[1] - 0.384471) <= 1e-6,
            "EMA hand example mismatch");

    route::PerfRouteConfig frozen;
    frozen.ema_alpha = 0.0;
    for (const auto& w : route::perf_route_updating(collection, task, task.test, frozen))
      for (double p : w.probs)
        require(std::fabs(p - 0.5) <= 1e-12, "alpha=0 trajectory moved off uniform");
    return std::string(
        "[0.731059, 0.268941] and EMA [0.615529, 0.384471] within 1e-6; alpha=0 constant");
  });

  run_criterion(14, "cached second-half routing within 2% of per-token", 120.0, [] {
    corpus::SyntheticSpec spec;
    spec.n_domains = 2;
    spec.vocab_per_domain = 40;
    spec.shared_vocab = 6;
    spec.docs_per_domain = 60;
    spec.doc_length_min = 60;
    spec.doc_length_max = 90;
    spec.seed = 19;
    corpus::Corpus docs = corpus::generate_synthetic(spec);
    btm::ExpertCollection collection = testing::build_ngram_collection(docs, 2, 16, 4);
    spec.docs_per_domain = 40;
    spec.seed = 123;
    corpus::Corpus eval = corpus::generate_synthetic(spec);
    route::EvalOptions per_token;
    per_token.temperature = 0.1;
    per_token.seq_len = 16;
    per_token.policy = route::CachePolicy::per_token;
    route::EvalOptions frozen = per_token;
    frozen.policy = route::CachePolicy::freeze_half;
    double a = route::eval_ensemble_ppl(collection, eval, per_token);
    double b = route::eval_ensemble_ppl(collection, eval, frozen);
    double rel = std::fabs(b - a) / a;
    require(rel <= 0.02, "freeze_half gap " + format_double(100.0 * rel) + "% > 2%");
    return "per-token " + format_double(a) + " vs freeze_half " + format_double(b) +
           " (" + format_double(100.0 * rel) + "%)";
  });

  std::printf("%d of 14 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

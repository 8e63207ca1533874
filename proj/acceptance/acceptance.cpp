// Acceptance suite. Each criterion prints one PASS/FAIL line; pass criterion
// numbers on the command line to run a subset.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tsub/cleaning.hpp"
#include "tsub/harness.hpp"
#include "tsub/mining.hpp"
#include "tsub/model.hpp"
#include "tsub/retrieval.hpp"
#include "tsub/subspace.hpp"
#include "tsub/synthetic.hpp"
#include "tsub/training.hpp"

#ifndef TSUB_CLI_PATH
#define TSUB_CLI_PATH "tsub"
#endif

namespace fs = std::filesystem;
using namespace tsub;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Vector gaussian(Rng& rng, std::size_t d, double sigma = 1.0) {
  std::normal_distribution<double> n(0.0, sigma);
  Vector v(static_cast<Eigen::Index>(d));
  for (auto& x : v) x = n(rng);
  return v;
}

double plain_sq_dist(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_correctness() {
  Rng rng(101);
  constexpr double margin = 0.4;
  double worst = 0.0;
  std::size_t configs = 0, checks = 0, rejected = 0;
  while (configs < 20) {
    Architecture arch;
    arch.d_in = pick(rng, 3, 6);
    arch.hidden.assign(pick(rng, 0, 2), 0);
    for (auto& h : arch.hidden) h = pick(rng, 3, 6);
    arch.d = pick(rng, 2, 5);
    arch.num_classes = pick(rng, 3, 5);
    const Model model = Model::random(arch, rng());

    TrainingBatch batch;
    const std::size_t n = pick(rng, 6, 10);
    for (std::size_t i = 0; i < n; ++i) {
      batch.inputs.push_back(gaussian(rng, arch.d_in));
      batch.labels.push_back(static_cast<std::uint32_t>(pick(rng, 0, arch.num_classes - 1)));
    }
    const std::size_t t = pick(rng, 3, 6);
    for (std::size_t i = 0; i < t; ++i) {
      std::size_t a = pick(rng, 0, n - 1), p = pick(rng, 0, n - 2), q = pick(rng, 0, n - 3);
      if (p >= a) ++p;
      const auto lo = std::min(a, p), hi = std::max(a, p);
      if (q >= lo) ++q;
      if (q >= hi) ++q;
      batch.triplets.push_back({a, p, q});
    }

    // Finite differences are meaningless at a hinge kink.
    std::vector<Embedding> e;
    for (const auto& x : batch.inputs) e.push_back(embed(model, x));
    bool near_kink = false, any_active = false;
    for (const auto& tr : batch.triplets) {
      const double h = squared_distance(e[tr.anchor], e[tr.positive]) - squared_distance(e[tr.anchor], e[tr.negative]) + margin;
      near_kink |= std::abs(h) < 1e-3;
      any_active |= h > 0.0;
    }
    if (near_kink || !any_active) {
      ++rejected;
      continue;
    }
    ++configs;

    LossOptions triplet_only{margin, 1.0, true, false};
    LossOptions softmax_only{margin, 1.0, false, true};
    LossOptions joint{margin, 0.1 + 0.9 * std::uniform_real_distribution<double>()(rng), true, true};
    for (const auto& opt : {triplet_only, softmax_only, joint}) {
      worst = std::max(worst, grad_check(model, batch, opt, 1e-5));
      ++checks;
    }
  }
  return {worst <= 1e-4,
          fmt("%zu configurations, %zu checks (%zu kinked draws skipped), max relative error %.3g", configs, checks,
              rejected, worst)};
}

// 2 ------------------------------------------------------------------------

std::vector<Triplet> ohnm_oracle(const AnchorPositiveBatch& batch, const std::vector<Embedding>& emb, std::size_t k,
                                 double margin) {
  std::vector<Triplet> out;
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const std::size_t a = 2 * i, p = 2 * i + 1;
    const double d_ap = plain_sq_dist(emb[a].values(), emb[p].values());
    std::vector<std::tuple<double, std::uint64_t, std::size_t>> all;
    for (std::size_t j = 0; j < batch.num_members(); ++j) {
      if (batch.member_identity(j) == batch.pairs[i].identity) continue;
      all.emplace_back(plain_sq_dist(emb[a].values(), emb[j].values()), batch.member_sample_id(j), j);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t r = 0; r < k; ++r) {
      const double loss = d_ap - std::get<0>(all[r]) + margin;
      if (loss > 0.0) out.push_back({a, p, std::get<2>(all[r]), d_ap, std::get<0>(all[r]), loss});
    }
  }
  return out;
}

Outcome mining_oracle() {
  Rng rng(202);
  std::size_t matched = 0, triplets = 0, tied_batches = 0;
  for (std::size_t b = 0; b < 100; ++b) {
    const std::size_t k = std::array<std::size_t, 3>{1, 3, 5}[b % 3];
    const bool lattice = b % 2 == 1;
    std::vector<std::uint32_t> ids(200);
    std::iota(ids.begin(), ids.end(), 0u);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<std::uint64_t> sample_ids(1000);
    std::iota(sample_ids.begin(), sample_ids.end(), std::uint64_t{0});
    std::shuffle(sample_ids.begin(), sample_ids.end(), rng);

    AnchorPositiveBatch batch;
    for (std::size_t i = 0; i < 32; ++i) {
      batch.pairs.push_back({ids[i], 2 * i, 2 * i + 1, sample_ids[2 * i], sample_ids[2 * i + 1]});
    }
    std::vector<Embedding> emb;
    for (std::size_t m = 0; m < 64; ++m) {
      if (lattice) {
        // Signed axis vectors: distances are exactly 0, 2 or 4.
        Vector v = Vector::Zero(4);
        v[static_cast<Eigen::Index>(pick(rng, 0, 3))] = pick(rng, 0, 1) ? 1.0 : -1.0;
        emb.push_back(l2_normalize(v));
      } else {
        emb.push_back(l2_normalize(gaussian(rng, 8)));
      }
    }
    tied_batches += lattice;

    MiningConfig cfg;
    cfg.top_k = k;
    cfg.batch_size = 32;
    const auto got = batch_ohnm_select(batch, emb, cfg);
    const auto want = ohnm_oracle(batch, emb, k, cfg.margin);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].anchor == want[i].anchor && got[i].positive == want[i].positive &&
             got[i].negative == want[i].negative && std::abs(got[i].loss - want[i].loss) <= 1e-12;
    }
    matched += same;
    triplets += got.size();
  }
  return {matched == 100, fmt("%zu/100 batches identical (%zu with lattice ties), %zu selected triplets", matched,
                              tied_batches, triplets)};
}

// 3 ------------------------------------------------------------------------

Outcome subspace_direction() {
  std::vector<double> batch_acc, kmeans_acc, random_acc;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PipelineConfig base;
    base.seed = seed;
    base.cleaning = false;
    base.triplet.lambda = 0.0;
    const auto prepared = prepare_data(base);
    auto run = [&](MiningRegime regime, const std::string& partition) {
      auto cfg = base;
      cfg.regime = regime;
      cfg.partition = partition;
      return run_from_prepared(prepared, cfg).verification.accuracy;
    };
    batch_acc.push_back(run(MiningRegime::batch, "kmeans"));
    kmeans_acc.push_back(run(MiningRegime::subspace, "kmeans"));
    random_acc.push_back(run(MiningRegime::subspace, "random"));
    std::printf("    seed %llu: batch %.4f kmeans %.4f random %.4f\n", static_cast<unsigned long long>(seed),
                batch_acc.back(), kmeans_acc.back(), random_acc.back());
    std::fflush(stdout);
  }
  const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  std::vector<double> diff;
  for (std::size_t i = 0; i < 5; ++i) diff.push_back(kmeans_acc[i] - batch_acc[i]);
  const double md = mean(diff);
  double var = 0.0;
  for (double d : diff) var += (d - md) * (d - md);
  var /= 4.0;
  const double t = var > 0.0 ? md / std::sqrt(var / 5.0) : (md > 0.0 ? INFINITY : 0.0);
  // One-sided paired t-test, df = 4, alpha = 0.05.
  const bool significant = md > 0.0 && t > 2.132;
  const bool random_ok = mean(random_acc) <= mean(kmeans_acc);
  return {significant && random_ok,
          fmt("mean pair accuracy batch %.4f kmeans %.4f random %.4f; kmeans-batch %+.4f, paired t %.2f "
              "(need > 2.132); random <= kmeans: %s",
              mean(batch_acc), mean(kmeans_acc), mean(random_acc), md, t, random_ok ? "yes" : "no")};
}

// 4 ------------------------------------------------------------------------

double active_ratio(std::size_t superclusters, double* global_mean, double* subspace_mean) {
  PipelineConfig cfg;
  cfg.seed = 1;
  cfg.cleaning = false;
  cfg.synthetic.num_superclusters = superclusters;
  const auto prepared = prepare_data(cfg);
  const auto emb = embed_all(prepared.classifier, prepared.clean);
  const IdentityGroups groups(prepared.clean);
  const auto km = kmeans(std::span<const IdentityCentroid>(prepared.centroids), cfg.num_subspaces,
                         cfg.kmeans_max_iter, stage_seed(cfg.seed, "partition"));
  const auto schedule = subspace_schedule(km.partition, 500);
  MiningConfig mc = cfg.triplet.mining;
  Rng g_rng(stage_seed(cfg.seed, "global")), s_rng(stage_seed(cfg.seed, "subspace"));
  double g = 0.0, s = 0.0;
  for (std::size_t i = 0; i < 500; ++i) {
    g += static_cast<double>(count_active(global_batch_ohnm(groups, emb, mc, g_rng).triplets).active);
    s += static_cast<double>(
        count_active(subspace_batch_ohnm(km.partition, schedule[i], groups, emb, mc, s_rng).triplets).active);
  }
  *global_mean = g / 500.0;
  *subspace_mean = s / 500.0;
  return s / g;
}

Outcome hard_triplet_density() {
  double g10, s10, g1, s1;
  const double r10 = active_ratio(10, &g10, &s10);
  const double r1 = active_ratio(1, &g1, &s1);
  return {r10 >= 1.5 && r1 < 1.2,
          fmt("S=10: %.2f vs %.2f active per batch, ratio %.3f (need >= 1.5); S=1: %.2f vs %.2f, ratio %.3f "
              "(need < 1.2)",
              s10, g10, r10, s1, g1, r1)};
}

// 5 ------------------------------------------------------------------------

Outcome cleaning_effectiveness() {
  double acc_noisy = 0.0, acc_clean = 0.0, r_agree = 0.0, r_fixed = 0.0, fit = 0.0;
  std::size_t flipped = 0, total = 0, kept_agree = 0, kept_fixed = 0;
  constexpr int seeds = 3;
  for (int seed = 1; seed <= seeds; ++seed) {
    SyntheticSpec spec;
    spec.num_identities = 200;
    spec.num_superclusters = 10;
    spec.identity_spread_sigma = 0.3;
    spec.label_flip_rate = 0.15;
    spec.noise_mode = NoiseMode::concentrated;
    spec.noisy_identity_fraction = 0.375;
    spec.unseen_identities = 0;
    spec.seed = static_cast<std::uint64_t>(seed);
    const auto data = generate_synthetic(spec);
    const auto flags = data.noise_flags();

    CleaningConfig cc;
    cc.classifier.architecture.d_in = spec.d_in;
    cc.classifier.schedule.epochs_per_rate = 6;
    cc.classifier.seed = static_cast<std::uint64_t>(11 * seed);
    const Model noisy = train_classifier(data.train, cc.classifier);
    const Model initial = train_initial_classifier(data.train, cc);
    const auto agreement = filter_by_agreement(data.train, initial, &flags);
    const Model cleaned = retrain_clean(agreement.clean, cc);

    const double kept_fraction =
        static_cast<double>(agreement.report.kept) / static_cast<double>(data.train.size());
    const auto fixed = fixed_ratio_baseline(data.train, initial, kept_fraction, &flags);

    fit += classification_accuracy(noisy, data.train) / seeds;
    acc_noisy += classification_accuracy(noisy, data.test) / seeds;
    acc_clean += classification_accuracy(cleaned, data.test) / seeds;
    r_agree += agreement.report.noise_recall.value_or(0.0) / seeds;
    r_fixed += fixed.report.noise_recall.value_or(0.0) / seeds;
    flipped += data.noise_count();
    total += data.train.size();
    kept_agree += agreement.report.kept;
    kept_fixed += fixed.report.kept;
  }
  return {acc_clean >= acc_noisy && r_agree > r_fixed,
          fmt("%d seeds, %zu of %zu labels flipped, noisy-label train fit %.4f; held-out accuracy cleaned %.4f vs "
              "noisy %.4f; noise recall agreement %.4f (kept %zu) vs fixed ratio %.4f (kept %zu)",
              seeds, flipped, total, fit, acc_clean, acc_noisy, r_agree, kept_agree, r_fixed, kept_fixed)};
}

// 6 ------------------------------------------------------------------------

LabeledDataset random_embedding_set(Rng& rng, std::size_t C, std::size_t per, std::size_t d, bool lattice) {
  LabeledDataset ds;
  ds.num_identities = C;
  ds.d_in = d;
  std::vector<std::uint64_t> ids(C * per);
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t next = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      Vector v = lattice ? Vector(Vector::Zero(static_cast<Eigen::Index>(d))) : gaussian(rng, d);
      if (lattice) v[static_cast<Eigen::Index>(pick(rng, 0, d - 1))] = pick(rng, 0, 1) ? 1.0 : -1.0;
      ds.samples.push_back({ids[next++], static_cast<std::uint32_t>(c), l2_normalize(v).values()});
    }
  }
  return ds;
}

Outcome retrieval_correctness() {
  Rng rng(606);
  std::size_t exact = 0;
  for (bool lattice : {false, true}) {
    const auto ds = random_embedding_set(rng, 100, 20, lattice ? 4 : 8, lattice);
    std::vector<Vector> emb;
    for (const auto& s : ds.samples) emb.push_back(s.features);
    const auto index = build_index(ds, emb);
    for (std::size_t q = 0; q < 5000; ++q) {
      const Vector query = lattice ? ds.samples[pick(rng, 0, ds.size() - 1)].features
                                   : Vector(l2_normalize(gaussian(rng, 8)).values());
      double best = INFINITY;
      std::uint64_t best_id = 0;
      std::uint32_t best_identity = 0;
      for (const auto& s : ds.samples) {
        const double d = plain_sq_dist(query, s.features);
        if (d < best || (d == best && s.sample_id < best_id)) {
          best = d;
          best_id = s.sample_id;
          best_identity = s.identity;
        }
      }
      const auto r = retrieve_flat(index, query);
      exact += r.nearest_sample_id == best_id && r.predicted_identity == best_identity &&
               std::abs(r.sample_distance - best) <= 1e-12 && r.distance_ops == ds.size();
    }
  }

  SyntheticSpec spec;
  spec.num_identities = 500;
  spec.identity_spread_sigma = 0.3;
  spec.unseen_identities = 0;
  spec.test_per_identity = 20;
  spec.seed = 6;
  const auto data = generate_synthetic(spec);
  const Model raw = Model::identity_linear(spec.d_in);
  const auto well = build_index(data.train, raw);
  std::size_t agree = 0;
  for (const auto& s : data.test.samples) {
    const Vector e = embed(raw, s.features).values();
    agree += retrieve_hierarchical(well, e).predicted_identity == retrieve_flat(well, e).predicted_identity;
  }
  const double agreement = static_cast<double>(agree) / static_cast<double>(data.test.size());

  const auto big = random_embedding_set(rng, 1000, 50, 4, false);
  std::vector<Vector> big_emb;
  for (const auto& s : big.samples) big_emb.push_back(s.features);
  const auto big_index = build_index(big, big_emb);
  bool ops_ok = true;
  std::size_t h_ops = 0, f_ops = 0;
  for (std::size_t q = 0; q < 20; ++q) {
    const Vector query = l2_normalize(gaussian(rng, 4)).values();
    h_ops = retrieve_hierarchical(big_index, query).distance_ops;
    f_ops = retrieve_flat(big_index, query).distance_ops;
    ops_ok &= h_ops == 1050 && f_ops == 50000;
  }
  const bool pass = exact == 10000 && agreement >= 0.99 && ops_ok;
  return {pass, fmt("flat = oracle on %zu/10000 queries; hierarchical/flat agreement %.4f on %zu queries; ops %zu vs "
                    "%zu (%.1fx)",
                    exact, agreement, data.test.size(), h_ops, f_ops,
                    static_cast<double>(f_ops) / static_cast<double>(h_ops))};
}

// 7 ------------------------------------------------------------------------

double sse(std::span<const Vector> pts, const std::vector<std::uint32_t>& assign, std::size_t M) {
  std::vector<Vector> sum(M, Vector::Zero(pts[0].size()));
  std::vector<double> n(M, 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sum[assign[i]] += pts[i];
    n[assign[i]] += 1.0;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) total += plain_sq_dist(pts[i], sum[assign[i]] / n[assign[i]]);
  return total;
}

Outcome kmeans_properties() {
  Rng rng(707);
  std::size_t monotone = 0;
  for (std::size_t inst = 0; inst < 50; ++inst) {
    const std::size_t n = pick(rng, 20, 200), d = pick(rng, 2, 6), M = pick(rng, 2, 8), blobs = pick(rng, 1, 10);
    std::vector<Vector> centers;
    for (std::size_t b = 0; b < blobs; ++b) centers.push_back(gaussian(rng, d, 3.0));
    std::vector<Vector> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back(centers[pick(rng, 0, blobs - 1)] + gaussian(rng, d));
    const auto res = kmeans(std::span<const Vector>(pts), M, 100, rng());
    bool ok = !res.trace.objective.empty();
    for (std::size_t i = 1; i < res.trace.objective.size(); ++i) ok &= res.trace.objective[i] <= res.trace.objective[i - 1];
    ok &= std::abs(res.trace.objective.back() - partition_objective(res.partition, pts)) <= 1e-9;
    monotone += ok;
  }

  std::vector<Vector> pts;
  for (std::size_t i = 0; i < 12; ++i) {
    Vector c = Vector::Zero(3);
    c[0] = i < 6 ? -2.0 : 2.0;
    pts.push_back(c + gaussian(rng, 3, 0.8));
  }
  double best = INFINITY;
  std::vector<std::uint32_t> best_assign;
  for (std::uint32_t mask = 1; mask < (1u << 11); ++mask) {  // point 11 fixed in cluster 0
    std::vector<std::uint32_t> a(12);
    for (std::size_t i = 0; i < 11; ++i) a[i] = (mask >> i) & 1u;
    const double v = sse(pts, a, 2);
    if (v < best) {
      best = v;
      best_assign = a;
    }
  }
  const auto km = kmeans(std::span<const Vector>(pts), 2, 100, 7);
  const double got = partition_objective(km.partition, pts);
  bool same_partition = true;
  for (std::size_t i = 0; i < 12; ++i) {
    same_partition &= (km.partition.assignment[i] == km.partition.assignment[11]) == (best_assign[i] == best_assign[11]);
  }
  const bool optimum = std::abs(got - best) <= 1e-9 * std::max(1.0, best) && same_partition;
  return {monotone == 50 && optimum, fmt("monotone on %zu/50 instances; C=12 brute-force optimum %.6f, k-means %.6f, "
                                         "same partition: %s",
                                         monotone, best, got, same_partition ? "yes" : "no")};
}

// 8 ------------------------------------------------------------------------

bool csv_coverage_monotone(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  double prev = INFINITY;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    for (int i = 0; i < 3; ++i) std::getline(row, cell, ',');
    const double c = std::stod(cell);
    if (c > prev) return false;
    prev = c;
  }
  return true;
}

Outcome coverage_machinery() {
  Rng rng(808);
  std::uniform_real_distribution<double> u;
  std::size_t monotone = 0, curves = 0;
  for (std::size_t k = 0; k < 100; ++k) {
    std::vector<ScoredResult> results(pick(rng, 1, 300));
    const double p_correct = u(rng);
    for (auto& r : results) {
      // Coarse confidences force many ties.
      r.confidence = k % 2 ? std::round(u(rng) * 10.0) / 10.0 : u(rng);
      r.correct = u(rng) < p_correct;
    }
    const auto grid = threshold_grid(results, k % 3 == 0 ? 16 : 0);
    monotone += csv_coverage_monotone(curve_to_csv(precision_coverage(results, grid)));
    ++curves;
  }

  std::vector<ScoredResult> perfect(200), wrong(200);
  for (auto& r : perfect) r = {u(rng), true};
  for (auto& r : wrong) r = {u(rng), false};
  const double cov_perfect = coverage_at_precision(precision_coverage(perfect, threshold_grid(perfect)), 1.0);
  const double cov_wrong = coverage_at_precision(precision_coverage(wrong, threshold_grid(wrong)), 1.0);

  // Oracle: every in-index query is answered correctly; out-of-index queries can never be.
  SyntheticSpec spec;
  spec.num_identities = 150;
  spec.identity_spread_sigma = 0.3;
  spec.test_per_identity = 2;
  spec.unseen_identities = 50;
  spec.unseen_samples = 2;
  spec.seed = 8;
  const auto data = generate_synthetic(spec);
  const Model raw = Model::identity_linear(spec.d_in);
  const auto index = build_index(data.train, raw);
  std::vector<ScoredResult> scored;
  for (const auto& s : data.test.samples) {
    const auto r = retrieve_hierarchical(index, embed(raw, s.features).values());
    scored.push_back({r.confidence, r.predicted_identity == s.identity});
  }
  for (const auto& s : data.unseen.samples) {
    scored.push_back({retrieve_hierarchical(index, embed(raw, s.features).values()).confidence, false});
  }
  const auto oracle_curve = precision_coverage(scored, threshold_grid(scored));
  monotone += csv_coverage_monotone(curve_to_csv(oracle_curve));
  ++curves;
  const double cov_oracle = coverage_at_precision(oracle_curve, 1.0);

  // The cap holds however confident the out-of-index answers are.
  bool capped = true;
  for (std::size_t k = 0; k < 20; ++k) {
    std::vector<ScoredResult> adversarial;
    for (std::size_t i = 0; i < 300; ++i) adversarial.push_back({u(rng), true});
    for (std::size_t i = 0; i < 100; ++i) adversarial.push_back({u(rng), false});
    capped &= coverage_at_precision(precision_coverage(adversarial, threshold_grid(adversarial)), 1.0) <= 0.75;
  }
  const double in_fraction = static_cast<double>(data.test.size()) / static_cast<double>(scored.size());
  const bool pass = monotone == curves && cov_perfect == 1.0 && cov_wrong == 0.0 && capped && in_fraction == 0.75 &&
                    cov_oracle == 0.75;
  return {pass, fmt("%zu/%zu curves monotone; coverage@1.0 perfect %.3f, all-wrong %.3f; oracle with 25%% "
                    "out-of-index %.4f (cap 0.75, adversarial cap held: %s)",
                    monotone, curves, cov_perfect, cov_wrong, cov_oracle, capped ? "yes" : "no")};
}

// 9 ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome ablation_determinism() {
  const fs::path root = fs::temp_directory_path() / "tsub_acceptance_determinism";
  fs::remove_all(root);
  int codes[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = root / ("run" + std::to_string(run));
    const std::string cmd = std::string("\"") + TSUB_CLI_PATH + "\" ablate --seed 7 --out \"" + out.string() + "\" > /dev/null";
    codes[run] = std::system(cmd.c_str());
  }
  if (codes[0] != 0 || codes[1] != 0) return {false, fmt("ablate exited with %d / %d", codes[0], codes[1])};

  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root / "run0")) {
    if (e.is_regular_file() && e.path().filename() != "timings.json") {
      files.push_back(fs::relative(e.path(), root / "run0"));
    }
  }
  std::sort(files.begin(), files.end());
  std::size_t identical = 0, other_count = 0, wall_clock = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "run1")) {
    other_count += e.is_regular_file() && e.path().filename() != "timings.json";
  }
  for (const auto& f : files) {
    const auto a = slurp(root / "run0" / f);
    identical += a == slurp(root / "run1" / f);
    wall_clock += a.find("wall_clock") != std::string::npos;
  }
  const bool pass = !files.empty() && identical == files.size() && other_count == files.size() && wall_clock == 0;
  if (pass) fs::remove_all(root);
  return {pass, fmt("%zu/%zu JSON/CSV files byte-identical across two runs (timings.json excluded)", identical,
                    files.size())};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "mining oracle equivalence", mining_oracle},
      {3, "subspace beats global mining", subspace_direction},
      {4, "hard-triplet density", hard_triplet_density},
      {5, "cleaning effectiveness", cleaning_effectiveness},
      {6, "retrieval correctness and cost", retrieval_correctness},
      {7, "k-means properties", kmeans_properties},
      {8, "precision/coverage machinery", coverage_machinery},
      {9, "ablation determinism", ablation_determinism},
  };

  CLI::App app{"tsub acceptance suite"};
  std::vector<int> selected;
  bool list = false;
  app.add_option("criteria", selected, "criterion numbers to run (default: all)")->check(CLI::Range(1, 9));
  app.add_flag("--list", list, "list criteria and exit");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& c : criteria) std::printf("%d %s\n", c.id, c.name);
    return 0;
  }
  if (selected.empty()) {
    for (const auto& c : criteria) selected.push_back(c.id);
  }

  int failures = 0;
  for (int id : selected) {
    const auto& c = criteria[static_cast<std::size_t>(id - 1)];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %d %s (%.1fs): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, secs, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}

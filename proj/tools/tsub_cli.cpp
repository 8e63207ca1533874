// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsub/dataset_io.hpp"
#include "tsub/harness.hpp"

namespace fs = std::filesystem;
using namespace tsub;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool seed_required) {
  cmd->add_option("--config", o.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "override one key, key=value (repeatable)");
  auto* seed = cmd->add_option("--seed", o.seed, "run seed");
  if (seed_required) seed->required();
}

PipelineConfig resolve(const CommonOptions& o) {
  ConfigMap map = o.config_path.empty() ? ConfigMap{} : ConfigMap::load(o.config_path);
  for (const auto& kv : o.overrides) map.apply_override(kv);
  if (o.seed) map.set("seed", std::to_string(*o.seed));
  return PipelineConfig::from_map(map);
}

LabeledDataset load_any(const std::string& path, std::size_t num_identities = 0) {
  if (fs::path(path).extension() == ".csv") return import_csv(fs::path(path), num_identities);
  return load_dataset(path);
}

std::vector<Vector> query_vectors(const LabeledDataset& data, const Model* model) {
  std::vector<Vector> out;
  for (const auto& s : data.samples) out.push_back(model ? embed(*model, s.features).values() : s.features);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Triplet training with subspace mining, label cleaning and two-layer retrieval"};
  app.require_subcommand(1);

  CommonOptions gen_o;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic supercluster benchmark");
  add_common(gen, gen_o, true);
  gen->add_option("--out", gen_out, "output directory")->required();

  CommonOptions clean_o;
  std::string clean_data, clean_out, clean_flags;
  std::optional<double> clean_ratio;
  auto* clean = app.add_subcommand("clean", "agreement filter (or fixed-ratio baseline) over a dataset");
  add_common(clean, clean_o, false);
  clean->add_option("--data", clean_data, "TFDS or CSV dataset")->required();
  clean->add_option("--noise-flags", clean_flags, "ground-truth flags JSON from gen-data");
  clean->add_option("--fixed-ratio", clean_ratio, "keep this share per identity instead of the agreement filter");
  clean->add_option("--out", clean_out, "output directory")->required();

  CommonOptions train_o;
  std::string train_out;
  auto* train = app.add_subcommand("train", "run the full pipeline with checkpoints");
  add_common(train, train_o, true);
  train->add_option("--out", train_out, "output directory")->required();

  std::string part_data, part_model, part_out, part_kind = "kmeans";
  std::size_t part_m = 10, part_iter = 100;
  std::uint64_t part_seed = 0;
  bool part_renorm = false;
  auto* part = app.add_subcommand("partition", "cluster identity centroids into subspaces");
  part->add_option("--data", part_data, "TFDS dataset")->required();
  part->add_option("--model", part_model, "TFMD checkpoint")->required();
  part->add_option("--M", part_m, "number of subspaces");
  part->add_option("--max-iter", part_iter, "k-means iteration cap");
  part->add_option("--kind", part_kind, "kmeans or random")->check(CLI::IsMember({"kmeans", "random"}));
  part->add_option("--seed", part_seed, "clustering seed");
  part->add_flag("--renormalize", part_renorm, "renormalize centroids before clustering");
  part->add_option("--out", part_out, "partition JSON path")->required();

  std::string bi_data, bi_model, bi_out, bi_tag;
  auto* bi = app.add_subcommand("build-index", "embed a dataset and write a TFIX index");
  bi->add_option("--data", bi_data, "TFDS or CSV dataset")->required();
  bi->add_option("--model", bi_model, "TFMD checkpoint")->required();
  bi->add_option("--tag", bi_tag, "model tag stored in the index");
  bi->add_option("--out", bi_out, "TFIX path")->required();

  std::string q_index, q_model, q_queries, q_out, q_conf = "identity";
  bool q_flat = false;
  auto* q = app.add_subcommand("query", "retrieve identities for query features or embeddings");
  q->add_option("--index", q_index, "TFIX index")->required();
  q->add_option("--model", q_model, "TFMD checkpoint; without it queries are embeddings");
  q->add_option("--queries", q_queries, "TFDS or CSV queries")->required();
  q->add_option("--confidence", q_conf, "identity or sample")->check(CLI::IsMember({"identity", "sample"}));
  q->add_flag("--flat", q_flat, "exhaustive scan instead of two-layer retrieval");
  q->add_option("--out", q_out, "JSON results path (stdout when omitted)");

  std::string ev_model, ev_pairs_data, ev_index, ev_queries, ev_out;
  std::size_t ev_pairs = 2000;
  std::uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("evaluate", "pair verification and precision/coverage");
  ev->add_option("--model", ev_model, "TFMD checkpoint")->required();
  ev->add_option("--pairs-data", ev_pairs_data, "held-out dataset for verification pairs");
  ev->add_option("--pairs", ev_pairs, "same and different pairs each");
  ev->add_option("--seed", ev_seed, "pair sampling seed");
  ev->add_option("--index", ev_index, "TFIX index for retrieval evaluation");
  ev->add_option("--queries", ev_queries, "labeled queries; labels absent from the index count as out-of-index");
  ev->add_option("--out", ev_out, "output directory")->required();

  CommonOptions ab_o;
  std::string ab_out;
  auto* ab = app.add_subcommand("ablate", "run the 12-cell ablation grid");
  add_common(ab, ab_o, false);
  ab->add_option("--out", ab_out, "output directory")->required();

  std::string ep_record, ep_out;
  auto* ep = app.add_subcommand("emit-plots", "write plot CSVs for an experiment record");
  ep->add_option("--record", ep_record, "record.json")->required()->check(CLI::ExistingFile);
  ep->add_option("--out", ep_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cfg = resolve(gen_o);
      SyntheticSpec spec = cfg.synthetic;
      spec.seed = stage_seed(cfg.seed, "data");
      const auto data = generate_synthetic(spec);
      fs::create_directories(gen_out);
      save_dataset(fs::path(gen_out) / "train.tfds", data.train);
      save_dataset(fs::path(gen_out) / "test.tfds", data.test);
      save_dataset(fs::path(gen_out) / "unseen.tfds", data.unseen);
      nlohmann::ordered_json flags;
      flags["noise_flags"] = data.noise_flags();
      flags["true_identity"] = data.true_identity;
      flags["supercluster"] = data.supercluster;
      write_text(fs::path(gen_out) / "ground_truth.json", flags.dump() + "\n");
      write_text(fs::path(gen_out) / "config.txt", cfg.to_map().to_text());
      std::cout << "wrote " << data.train.size() << " train, " << data.test.size() << " test, " << data.unseen.size()
                << " unseen samples to " << gen_out << "\n";
    } else if (*clean) {
      const auto cfg = resolve(clean_o);
      const auto data = load_any(clean_data);
      std::vector<bool> flags;
      if (!clean_flags.empty()) {
        const auto j = nlohmann::json::parse(read_text(clean_flags));
        flags = j.at("noise_flags").get<std::vector<bool>>();
      }
      CleaningConfig cc{cfg.classifier, cfg.init_subset_fraction, cfg.warm_start};
      cc.classifier.seed = stage_seed(cfg.seed, "init_classifier");
      const Model initial = train_initial_classifier(data, cc);
      const auto result = clean_ratio ? fixed_ratio_baseline(data, initial, *clean_ratio, flags.empty() ? nullptr : &flags)
                                      : filter_by_agreement(data, initial, flags.empty() ? nullptr : &flags);
      fs::create_directories(clean_out);
      save_model(fs::path(clean_out) / "init_classifier.tfmd", initial);
      write_text(fs::path(clean_out) / "init_classifier.json", model_sidecar_json(initial, "init_classifier") + "\n");
      save_dataset(fs::path(clean_out) / "clean.tfds", result.clean);
      write_text(fs::path(clean_out) / "cleaning_report.json", cleaning_report_to_json(result.report) + "\n");
      std::cout << "kept " << result.report.kept << ", removed " << result.report.removed << "\n";
    } else if (*train) {
      const auto cfg = resolve(train_o);
      const auto rec = run_pipeline(cfg, fs::path(train_out));
      write_text(fs::path(train_out) / "config.txt", cfg.to_map().to_text());
      std::cout << "pair accuracy " << rec.verification.accuracy << ", coverage@0.95 " << rec.coverage_at_95 << "\n";
    } else if (*part) {
      const auto data = load_any(part_data);
      const auto model = load_model(part_model);
      SubspacePartition p;
      if (part_kind == "kmeans") {
        p = refresh_partition(data, model, part_m, part_iter, part_seed, part_renorm).partition;
      } else {
        const auto cents = build_identity_centroids(data, model, part_renorm);
        std::vector<Vector> pts;
        for (const auto& c : cents) pts.push_back(c.centroid);
        p = random_partition(pts.size(), part_m, part_seed);
        assign_centers(p, pts);
      }
      write_text(part_out, partition_to_json(p) + "\n");
    } else if (*bi) {
      const auto data = load_any(bi_data);
      const auto model = load_model(bi_model);
      save_index(bi_out, build_index(data, model, bi_tag));
    } else if (*q) {
      const auto index = load_index(q_index);
      std::optional<Model> model;
      if (!q_model.empty()) model = load_model(q_model);
      const auto queries = load_any(q_queries);
      const auto vecs = query_vectors(queries, model ? &*model : nullptr);
      const auto mode = q_conf == "identity" ? ConfidenceMode::identity : ConfidenceMode::sample;
      std::vector<QueryResult> results;
      std::vector<std::uint64_t> ids;
      for (std::size_t i = 0; i < vecs.size(); ++i) {
        results.push_back(q_flat ? retrieve_flat(index, vecs[i]) : retrieve_hierarchical(index, vecs[i], mode));
        ids.push_back(queries.samples[i].sample_id);
      }
      const auto text = query_results_to_json(results, ids) + "\n";
      if (q_out.empty()) std::cout << text;
      else write_text(q_out, text);
    } else if (*ev) {
      const auto model = load_model(ev_model);
      fs::create_directories(ev_out);
      nlohmann::ordered_json j;
      if (!ev_pairs_data.empty()) {
        const auto held = load_any(ev_pairs_data);
        const auto pairs = make_verification_pairs(held, ev_pairs, ev_pairs, ev_seed);
        const auto v = pair_verification(model, held, pairs);
        j["pair_accuracy"] = v.accuracy;
        j["pair_threshold"] = v.threshold;
        j["pairs"] = v.pairs;
      }
      if (!ev_index.empty() && !ev_queries.empty()) {
        const auto index = load_index(ev_index);
        const auto queries = load_any(ev_queries);
        std::vector<ScoredResult> scored;
        for (const auto& s : queries.samples) {
          const auto r = retrieve_hierarchical(index, embed(model, s.features).values());
          scored.push_back({r.confidence, r.predicted_identity == s.identity});
        }
        const auto curve = precision_coverage(scored, threshold_grid(scored, 512));
        write_text(fs::path(ev_out) / "retrieval_curve.csv", curve_to_csv(curve));
        j["coverage_at_95"] = coverage_at_precision(curve, 0.95);
        j["coverage_at_99"] = coverage_at_precision(curve, 0.99);
        j["queries"] = scored.size();
      }
      write_text(fs::path(ev_out) / "evaluation.json", j.dump(2) + "\n");
      std::cout << j.dump(2) << "\n";
    } else if (*ab) {
      const auto cfg = resolve(ab_o);
      const auto rows = ablation_suite(cfg);
      write_ablation(rows, ab_out);
      write_text(fs::path(ab_out) / "config.txt", cfg.to_map().to_text());
      std::cout << ablation_csv(rows);
    } else if (*ep) {
      const auto bundle = emit_plots(read_text(ep_record), ep_out);
      if (!bundle.coverage_monotone) {
        std::cerr << "coverage column is not non-increasing\n";
        return 3;
      }
      std::cout << "wrote " << bundle.files.size() << " files to " << ep_out << "\n";
    }
  } catch (const StageError& e) {
    std::cerr << "stage " << e.stage() << " failed: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

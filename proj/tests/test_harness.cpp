#include <doctest.h>

#include <filesystem>
#include <json.hpp>
#include <random>

#include "test_util.hpp"
#include "tsub/dataset_io.hpp"
#include "tsub/harness.hpp"

using namespace tsub;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(std::uint64_t seed) {
  PipelineConfig c;
  c.seed = seed;
  c.synthetic.num_identities = 40;
  c.synthetic.samples_min = c.synthetic.samples_max = 6;
  c.synthetic.d_in = 8;
  c.synthetic.num_superclusters = 4;
  c.synthetic.within_identity_sigma = 0.01;
  c.synthetic.identity_spread_sigma = 0.2;
  c.synthetic.test_per_identity = 2;
  c.synthetic.unseen_identities = 10;
  c.synthetic.unseen_samples = 4;
  c.classifier.architecture.hidden = {16};
  c.classifier.architecture.d = 8;
  c.classifier.schedule = {{1.0, 0.1}, 6};
  c.classifier.batch_size = 16;
  c.num_subspaces = 4;
  c.triplet.mining.batch_size = 8;
  c.triplet.schedule = {{0.1, 0.01}, 2};
  c.verification_pairs = 100;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tsub_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config text parsing") {
  const auto map = ConfigMap::parse("# comment\n seed = 5 \n\ntriplet.M=3   # trailing\nmodel.hidden = 8, 4\n");
  CHECK(map.get("seed") == "5");
  CHECK(map.get("triplet.M") == "3");
  CHECK(map.get("model.hidden") == "8, 4");
  CHECK_THROWS_AS(map.get("missing"), ConfigError);
  CHECK_THROWS_AS(ConfigMap::parse("no equals sign"), ConfigError);
  CHECK_THROWS_AS(ConfigMap::parse(" = value"), ConfigError);

  auto m2 = map;
  m2.apply_override("triplet.M=7");
  CHECK(m2.get("triplet.M") == "7");
  CHECK_THROWS_AS(m2.apply_override("oops"), ConfigError);

  const auto cfg = PipelineConfig::from_map(map);
  CHECK(cfg.seed == 5);
  CHECK(cfg.num_subspaces == 3);
  CHECK(cfg.classifier.architecture.hidden == std::vector<std::size_t>{8, 4});
}

TEST_CASE("config values are validated") {
  auto with = [](const std::string& kv) {
    ConfigMap m;
    m.apply_override(kv);
    return PipelineConfig::from_map(m);
  };
  CHECK_THROWS_AS(with("nonsense.key=1"), ConfigError);
  CHECK_THROWS_AS(with("seed=-1"), ConfigError);
  CHECK_THROWS_AS(with("triplet.M=0"), ConfigError);
  CHECK_THROWS_AS(with("triplet.lambda=abc"), ConfigError);
  CHECK_THROWS_AS(with("triplet.regime=global"), ConfigError);
  CHECK_THROWS_AS(with("triplet.partition=spectral"), ConfigError);
  CHECK_THROWS_AS(with("cleaning.enabled=maybe"), ConfigError);
  CHECK_THROWS_AS(with("synthetic.flip_rate=1.0"), ConfigError);
  CHECK_THROWS_AS(with("data.source=file"), ConfigError);
  CHECK_THROWS_AS(with("eval.out_of_index_fraction=1"), ConfigError);
  CHECK(with("triplet.regime=batch").regime == MiningRegime::batch);
  CHECK_THROWS_AS(with("synthetic.noise_mode=concentrated"), ConfigError);  // needs a noisy fraction
}

TEST_CASE("config snapshot round trips") {
  auto cfg = tiny_config(9);
  cfg.triplet.lambda = 0.3;
  cfg.regime = MiningRegime::ohnm;
  cfg.confidence = ConfidenceMode::sample;
  const auto text = cfg.to_map().to_text();
  const auto back = PipelineConfig::from_map(ConfigMap::parse(text));
  CHECK(back.to_map().to_text() == text);
  CHECK(back.triplet.lambda == 0.3);
  CHECK(back.classifier.schedule.rates == cfg.classifier.schedule.rates);
}

TEST_CASE("stage seeds are stable and distinct") {
  CHECK(stage_seed(1, "data") == stage_seed(1, "data"));
  CHECK(stage_seed(1, "data") != stage_seed(1, "triplet"));
  CHECK(stage_seed(1, "data") != stage_seed(2, "data"));
}

TEST_CASE("verification pairs") {
  const auto ds = tsub::testing::blob_dataset(6, 4, 3, 1.0, 0.1, 2);
  const auto pairs = make_verification_pairs(ds, 50, 70, 4);
  CHECK(pairs.size() == 120);
  std::size_t same = 0;
  for (const auto& p : pairs) {
    CHECK(p.a != p.b);
    CHECK(p.same == (ds.samples[p.a].identity == ds.samples[p.b].identity));
    same += p.same;
  }
  CHECK(same == 50);
  const auto again = make_verification_pairs(ds, 50, 70, 4);
  for (std::size_t i = 0; i < pairs.size(); ++i) CHECK((pairs[i].a == again[i].a && pairs[i].b == again[i].b));
  CHECK_THROWS_AS(make_verification_pairs(tsub::testing::blob_dataset(3, 1, 3, 1.0, 0.1, 2), 1, 1, 0), ConfigError);
}

TEST_CASE("pair verification") {
  SUBCASE("empty") {
    CHECK_THROWS_AS(pair_verification(std::span<const Vector>{}, std::span<const VerificationPair>{}), ConfigError);
  }
  SUBCASE("far-apart identities are separable") {
    const auto ds = tsub::testing::blob_dataset(8, 5, 4, 10.0, 0.01, 3);
    std::vector<Vector> emb;
    for (const auto& s : ds.samples) emb.push_back(s.features);
    const auto pairs = make_verification_pairs(ds, 200, 200, 1);
    CHECK(pair_verification(std::span<const Vector>(emb), pairs).accuracy == 1.0);
  }
  SUBCASE("random embeddings sit near chance") {
    std::mt19937_64 rng(4);
    std::vector<Vector> emb;
    std::vector<VerificationPair> pairs;
    for (std::size_t i = 0; i < 4000; ++i) emb.push_back(tsub::testing::random_unit(rng, 8).values());
    for (std::size_t i = 0; i < 2000; ++i) pairs.push_back({2 * i, 2 * i + 1, i % 2 == 0});
    const auto r = pair_verification(std::span<const Vector>(emb), pairs);
    CHECK(r.accuracy == doctest::Approx(0.5).epsilon(0.1));
    CHECK(std::abs(r.accuracy - 0.5) <= 0.05);
  }
  SUBCASE("sweep agrees with a dense threshold grid") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> cell(0, 6);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Vector> emb;
      std::vector<VerificationPair> pairs;
      for (std::size_t i = 0; i < 300; ++i) {
        emb.push_back(tsub::testing::vec({double(cell(rng)), double(cell(rng))}));
        emb.push_back(tsub::testing::vec({double(cell(rng)), double(cell(rng))}));
        // Same pairs are biased toward short distances.
        const bool same = (emb[2 * i] - emb[2 * i + 1]).squaredNorm() < 20.0 ? cell(rng) < 5 : cell(rng) < 2;
        pairs.push_back({2 * i, 2 * i + 1, same});
      }
      const auto r = pair_verification(std::span<const Vector>(emb), pairs);
      auto acc_at = [&](double t) {
        std::size_t ok = 0;
        for (const auto& p : pairs) ok += (((emb[p.a] - emb[p.b]).squaredNorm() <= t) == p.same);
        return static_cast<double>(ok) / static_cast<double>(pairs.size());
      };
      double grid_best = 0.0;
      for (double t = -1.0; t <= 80.0; t += 0.25) grid_best = std::max(grid_best, acc_at(t));
      CHECK(r.accuracy == grid_best);
      CHECK(acc_at(r.threshold) == r.accuracy);
    }
  }
}

TEST_CASE("pipeline: regimes, determinism and checkpoints") {
  const auto base = tiny_config(3);
  const auto prepared = prepare_data(base);
  REQUIRE(prepared.cleaning.has_value());
  CHECK(prepared.cleaning->kept + prepared.cleaning->removed == prepared.train.size());

  SUBCASE("mining none reduces to the classifier") {
    auto cfg = base;
    cfg.regime = MiningRegime::none;
    const auto rec = run_from_prepared(prepared, cfg);
    CHECK(rec.model.parameters() == prepared.classifier.parameters());
    CHECK(rec.triplet_log.empty());
    CHECK(rec.verification.accuracy == rec.classifier_pair_accuracy);
    CHECK_FALSE(rec.partition.has_value());
  }
  SUBCASE("one subspace equals batch mining") {
    auto sub = base;
    sub.num_subspaces = 1;
    auto batch = base;
    batch.regime = MiningRegime::batch;
    const auto a = run_from_prepared(prepared, sub);
    const auto b = run_from_prepared(prepared, batch);
    CHECK(a.model.parameters() == b.model.parameters());
    CHECK(a.verification.accuracy == b.verification.accuracy);
  }
  SUBCASE("identical config and seed give identical records") {
    const auto a = record_to_json(run_pipeline(base), false);
    const auto b = record_to_json(run_pipeline(base), false);
    CHECK(a == b);
    CHECK(nlohmann::json::parse(record_to_json(run_from_prepared(prepared, base), true)).contains("wall_clock"));
    CHECK_FALSE(nlohmann::json::parse(a).contains("wall_clock"));
  }
  SUBCASE("record contents") {
    const auto rec = run_from_prepared(prepared, base);
    const auto j = nlohmann::json::parse(record_to_json(rec, false));
    CHECK(j["seed"] == 3);
    CHECK(j["config"]["triplet.M"] == "4");
    CHECK(j["stages"]["partition"]["M"] == 4);
    CHECK(j["stages"]["triplet"]["steps"] == rec.triplet_log.size());
    CHECK(j["stages"]["triplet"]["active_series"].size() == rec.triplet_log.size());
    CHECK(j["evaluation"]["curve"].size() == rec.curve.points.size());
    // 80 in-index test queries plus a third as many out-of-index ones.
    CHECK(rec.curve.total == 80 + 27);
    CHECK(rec.curve.points.back().coverage == 0.0);
    CHECK(rec.mean_flat_ops == doctest::Approx(static_cast<double>(rec.index.num_members())));
  }
  SUBCASE("checkpoints") {
    const auto dir = scratch_dir("ckpt");
    const auto rec = run_pipeline(base, dir);
    for (const char* f : {"train.tfds", "init_classifier.tfmd", "init_classifier.json", "clean.tfds",
                          "cleaning_report.json", "classifier.tfmd", "classifier.json", "partition.json", "model.tfmd",
                          "model.json", "mining.jsonl", "index.tfix", "record.json", "timings.json"}) {
      CHECK_MESSAGE(fs::exists(dir / f), f);
    }
    CHECK(load_model(dir / "model.tfmd").parameters() == rec.model.parameters());
    CHECK(load_dataset(dir / "clean.tfds").size() == rec.cleaning->kept);
    CHECK(partition_from_json(read_text(dir / "partition.json")).assignment == rec.partition->assignment);
    const auto lines = read_text(dir / "mining.jsonl");
    CHECK(static_cast<std::size_t>(std::count(lines.begin(), lines.end(), '\n')) == rec.triplet_log.size());
    CHECK(read_text(dir / "record.json") == record_to_json(rec, false) + "\n");
    fs::remove_all(dir);
  }
}

TEST_CASE("cleaning on noiseless separable data changes nothing downstream") {
  auto on = tiny_config(4);
  auto off = on;
  off.cleaning = false;
  const auto a = run_pipeline(on);
  const auto b = run_pipeline(off);
  REQUIRE(a.cleaning.has_value());
  CHECK(a.cleaning->removed == 0);
  CHECK(a.model.parameters() == b.model.parameters());
  CHECK(a.verification.accuracy == b.verification.accuracy);
  CHECK(a.coverage_at_95 == b.coverage_at_95);
}

TEST_CASE("stage failures carry the stage name") {
  auto cfg = tiny_config(5);
  cfg.triplet.mining.batch_size = 41;
  cfg.regime = MiningRegime::batch;
  try {
    run_pipeline(cfg);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "triplet");
  }
  cfg = tiny_config(5);
  cfg.num_subspaces = 41;
  try {
    run_pipeline(cfg);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "partition");
  }
  cfg = tiny_config(5);
  cfg.data_source = "file";
  cfg.train_path = "/nonexistent/train.tfds";
  try {
    run_pipeline(cfg);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "data");
  }
}

TEST_CASE("file-backed data source") {
  const auto dir = scratch_dir("files");
  fs::create_directories(dir);
  auto spec = tiny_config(6).synthetic;
  spec.seed = 1;
  const auto data = generate_synthetic(spec);
  save_dataset(dir / "train.tfds", data.train);
  save_dataset(dir / "test.tfds", data.test);
  save_dataset(dir / "unseen.tfds", data.unseen);
  auto cfg = tiny_config(6);
  cfg.data_source = "file";
  cfg.train_path = (dir / "train.tfds").string();
  cfg.test_path = (dir / "test.tfds").string();
  cfg.unseen_path = (dir / "unseen.tfds").string();
  const auto rec = run_pipeline(cfg);
  CHECK(rec.verification.pairs == 200);
  CHECK_FALSE(rec.cleaning->noise_recall.has_value());
  fs::remove_all(dir);
}

TEST_CASE("ablation grid and CSV") {
  std::vector<std::string> names;
  const auto grid = ablation_grid(tiny_config(7), &names);
  CHECK(grid.size() == 12);
  CHECK(names[0] == "softmax-triplet");
  CHECK(names[3] == "batch_m1-joint");
  CHECK(names[7] == "kmeans_m2-joint");
  CHECK(names[11] == "kmeans_m8-joint");
  CHECK(grid[2].regime == MiningRegime::batch);
  CHECK(grid[4].partition == "random");
  CHECK(grid[6].num_subspaces == 2);
  CHECK(grid[10].num_subspaces == 8);
  CHECK(grid[0].triplet.lambda == 0.0);
  CHECK(grid[1].triplet.lambda == 1.0);

  auto small = tiny_config(7);
  small.classifier.schedule = {{1.0}, 2};
  small.triplet.schedule = {{0.1}, 1};
  const auto rows = ablation_suite(small);
  CHECK(rows.size() == 12);
  CHECK(rows[0].record.model.parameters() == rows[1].record.model.parameters());
  const auto csv = ablation_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
  const auto dir = scratch_dir("ablate");
  write_ablation(rows, dir);
  CHECK(fs::exists(dir / "ablation.csv"));
  CHECK(fs::exists(dir / "timings.json"));
  CHECK(fs::exists(dir / "records" / "kmeans_m4-joint.json"));
  fs::remove_all(dir);
}

TEST_CASE("plot emission") {
  const auto rec = run_pipeline(tiny_config(8));
  const auto json = record_to_json(rec, false);
  const auto dir = scratch_dir("plots");
  const auto bundle = emit_plots(json, dir);
  CHECK(bundle.coverage_monotone);
  CHECK(bundle.files.size() == 6);
  const auto curve = read_text(dir / "retrieval_curve.csv");
  CHECK(static_cast<std::size_t>(std::count(curve.begin(), curve.end(), '\n')) == rec.curve.points.size() + 1);
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  CHECK(manifest.size() == 5);
  CHECK(manifest[0]["columns"] == nlohmann::json::array({"threshold", "precision", "coverage", "M", "correct"}));

  std::vector<std::string> first;
  for (const auto& f : bundle.files) first.push_back(read_text(f));
  const auto again = emit_plots(json, dir);
  for (std::size_t i = 0; i < again.files.size(); ++i) CHECK(read_text(again.files[i]) == first[i]);

  auto broken = nlohmann::ordered_json::parse(json);
  broken["evaluation"]["curve"][1]["coverage"] = 2.0;
  CHECK_FALSE(emit_plots(broken.dump(), dir).coverage_monotone);
  fs::remove_all(dir);
}

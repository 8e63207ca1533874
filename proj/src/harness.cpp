// SPDX-License-Identifier: Apache-2.0
#include "tsub/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "tsub/dataset_io.hpp"

namespace tsub {

namespace {

using ojson = nlohmann::ordered_json;

constexpr const char* kLibraryVersion = "0.1.0";
constexpr int kRecordFormatVersion = 1;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) throw ConfigError(key + ": not a number: '" + text + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": not a non-negative integer: '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": not a boolean: '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += f(xs[i]);
  }
  return out;
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const PipelineConfig&)>;
struct Field {
  Setter set;
  Getter get;
};

template <typename M>
Field size_field(M member) {
  return {[member](PipelineConfig& c, const std::string& k, const std::string& v) {
            std::invoke(member, c) = static_cast<std::size_t>(parse_u64(k, v));
          },
          [member](const PipelineConfig& c) { return std::to_string(std::invoke(member, c)); }};
}

template <typename M>
Field double_field(M member) {
  return {[member](PipelineConfig& c, const std::string& k, const std::string& v) { std::invoke(member, c) = parse_double(k, v); },
          [member](const PipelineConfig& c) { return fmt_double(std::invoke(member, c)); }};
}

template <typename M>
Field bool_field(M member) {
  return {[member](PipelineConfig& c, const std::string& k, const std::string& v) { std::invoke(member, c) = parse_bool(k, v); },
          [member](const PipelineConfig& c) { return std::string(std::invoke(member, c) ? "true" : "false"); }};
}

template <typename M>
Field string_field(M member) {
  return {[member](PipelineConfig& c, const std::string&, const std::string& v) { std::invoke(member, c) = v; },
          [member](const PipelineConfig& c) { return std::invoke(member, c); }};
}

template <typename M>
Field rates_field(M member) {
  return {[member](PipelineConfig& c, const std::string& k, const std::string& v) {
            std::vector<double> rates;
            for (const auto& item : split_list(v)) rates.push_back(parse_double(k, item));
            std::invoke(member, c) = std::move(rates);
          },
          [member](const PipelineConfig& c) { return join(std::invoke(member, c), fmt_double); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["seed"] = {[](PipelineConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); },
                 [](const PipelineConfig& c) { return std::to_string(c.seed); }};
    t["data.source"] = string_field([](auto& c) -> auto& { return c.data_source; });
    t["data.train"] = string_field([](auto& c) -> auto& { return c.train_path; });
    t["data.test"] = string_field([](auto& c) -> auto& { return c.test_path; });
    t["data.unseen"] = string_field([](auto& c) -> auto& { return c.unseen_path; });
    t["synthetic.identities"] = size_field([](auto& c) -> auto& { return c.synthetic.num_identities; });
    t["synthetic.samples_min"] = size_field([](auto& c) -> auto& { return c.synthetic.samples_min; });
    t["synthetic.samples_max"] = size_field([](auto& c) -> auto& { return c.synthetic.samples_max; });
    t["synthetic.d_in"] = size_field([](auto& c) -> auto& { return c.synthetic.d_in; });
    t["synthetic.superclusters"] = size_field([](auto& c) -> auto& { return c.synthetic.num_superclusters; });
    t["synthetic.sigma_w"] = double_field([](auto& c) -> auto& { return c.synthetic.within_identity_sigma; });
    t["synthetic.sigma_b"] = double_field([](auto& c) -> auto& { return c.synthetic.identity_spread_sigma; });
    t["synthetic.flip_rate"] = double_field([](auto& c) -> auto& { return c.synthetic.label_flip_rate; });
    t["synthetic.noise_mode"] = {
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "uniform") c.synthetic.noise_mode = NoiseMode::uniform;
          else if (v == "concentrated") c.synthetic.noise_mode = NoiseMode::concentrated;
          else throw ConfigError(k + ": expected uniform or concentrated");
        },
        [](const PipelineConfig& c) {
          return std::string(c.synthetic.noise_mode == NoiseMode::uniform ? "uniform" : "concentrated");
        }};
    t["synthetic.noisy_identity_fraction"] = double_field([](auto& c) -> auto& { return c.synthetic.noisy_identity_fraction; });
    t["synthetic.test_per_identity"] = size_field([](auto& c) -> auto& { return c.synthetic.test_per_identity; });
    t["synthetic.unseen_identities"] = size_field([](auto& c) -> auto& { return c.synthetic.unseen_identities; });
    t["synthetic.unseen_samples"] = size_field([](auto& c) -> auto& { return c.synthetic.unseen_samples; });
    t["model.hidden"] = {
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          std::vector<std::size_t> h;
          for (const auto& item : split_list(v)) h.push_back(static_cast<std::size_t>(parse_u64(k, item)));
          c.classifier.architecture.hidden = std::move(h);
        },
        [](const PipelineConfig& c) {
          return join(c.classifier.architecture.hidden, [](std::size_t x) { return std::to_string(x); });
        }};
    t["model.d"] = size_field([](auto& c) -> auto& { return c.classifier.architecture.d; });
    t["classifier.rates"] = rates_field([](auto& c) -> auto& { return c.classifier.schedule.rates; });
    t["classifier.epochs_per_rate"] = size_field([](auto& c) -> auto& { return c.classifier.schedule.epochs_per_rate; });
    t["classifier.batch_size"] = size_field([](auto& c) -> auto& { return c.classifier.batch_size; });
    t["classifier.momentum"] = double_field([](auto& c) -> auto& { return c.classifier.momentum; });
    t["cleaning.enabled"] = bool_field([](auto& c) -> auto& { return c.cleaning; });
    t["cleaning.init_subset_fraction"] = double_field([](auto& c) -> auto& { return c.init_subset_fraction; });
    t["cleaning.warm_start"] = bool_field([](auto& c) -> auto& { return c.warm_start; });
    t["triplet.regime"] = {
        [](PipelineConfig& c, const std::string&, const std::string& v) { c.regime = mining_regime_from_string(v); },
        [](const PipelineConfig& c) { return to_string(c.regime); }};
    t["triplet.partition"] = string_field([](auto& c) -> auto& { return c.partition; });
    t["triplet.M"] = size_field([](auto& c) -> auto& { return c.num_subspaces; });
    t["triplet.kmeans_max_iter"] = size_field([](auto& c) -> auto& { return c.kmeans_max_iter; });
    t["triplet.renormalize_centroids"] = bool_field([](auto& c) -> auto& { return c.renormalize_centroids; });
    t["triplet.margin"] = double_field([](auto& c) -> auto& { return c.triplet.mining.margin; });
    t["triplet.top_k"] = size_field([](auto& c) -> auto& { return c.triplet.mining.top_k; });
    t["triplet.batch_size"] = size_field([](auto& c) -> auto& { return c.triplet.mining.batch_size; });
    t["triplet.semi_hard"] = bool_field([](auto& c) -> auto& { return c.triplet.mining.semi_hard; });
    t["triplet.lambda"] = double_field([](auto& c) -> auto& { return c.triplet.lambda; });
    t["triplet.rates"] = rates_field([](auto& c) -> auto& { return c.triplet.schedule.rates; });
    t["triplet.epochs_per_rate"] = size_field([](auto& c) -> auto& { return c.triplet.schedule.epochs_per_rate; });
    t["triplet.momentum"] = double_field([](auto& c) -> auto& { return c.triplet.momentum; });
    t["triplet.reinit_head"] = bool_field([](auto& c) -> auto& { return c.triplet.reinit_head; });
    t["eval.pairs"] = size_field([](auto& c) -> auto& { return c.verification_pairs; });
    t["eval.out_of_index_fraction"] = double_field([](auto& c) -> auto& { return c.out_of_index_fraction; });
    t["eval.confidence"] = {
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "identity") c.confidence = ConfidenceMode::identity;
          else if (v == "sample") c.confidence = ConfidenceMode::sample;
          else throw ConfigError(k + ": expected identity or sample");
        },
        [](const PipelineConfig& c) {
          return std::string(c.confidence == ConfidenceMode::identity ? "identity" : "sample");
        }};
    return t;
  }();
  return table;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class StageTimer {
 public:
  explicit StageTimer(std::vector<std::pair<std::string, double>>& sink) : sink_(sink) {}

  template <typename F>
  auto run(const std::string& stage, F&& f) -> decltype(f()) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if constexpr (std::is_void_v<decltype(f())>) {
        f();
        record(stage, t0);
      } else {
        auto result = f();
        record(stage, t0);
        return result;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  }

 private:
  void record(const std::string& stage, std::chrono::steady_clock::time_point t0) {
    sink_.emplace_back(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::vector<std::pair<std::string, double>>& sink_;
};

ojson epochs_json(const std::vector<EpochReport>& log) {
  ojson arr = ojson::array();
  for (const auto& e : log) {
    arr.push_back({{"epoch", e.epoch}, {"learning_rate", e.learning_rate}, {"mean_loss", e.mean_loss}});
  }
  return arr;
}

ojson curve_json(const PrecisionCoverageCurve& curve) {
  ojson arr = ojson::array();
  for (const auto& p : curve.points) {
    arr.push_back({{"threshold", p.threshold},
                   {"precision", p.precision},
                   {"coverage", p.coverage},
                   {"M", p.answered},
                   {"correct", p.correct},
                   {"undefined", p.undefined}});
  }
  return arr;
}

double mean_active(const std::vector<StepReport>& log) {
  if (log.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : log) s += static_cast<double>(r.loss.active_triplets);
  return s / static_cast<double>(log.size());
}

std::string mining_lines(const std::vector<StepReport>& log, const MiningConfig& mining) {
  std::string out;
  for (const auto& r : log) {
    ActiveCount c;
    c.active = r.loss.active_triplets;
    c.mean_loss = r.loss.candidate_triplets
                      ? r.loss.triplet_loss * static_cast<double>(r.loss.active_triplets) /
                            static_cast<double>(r.loss.candidate_triplets)
                      : 0.0;
    out += mining_diagnostic_json(r.step, r.scope, c, mining.batch_size, mining.top_k);
    out += '\n';
  }
  return out;
}

void save_model_with_sidecar(const std::filesystem::path& dir, const std::string& stem, const Model& model) {
  save_model(dir / (stem + ".tfmd"), model);
  write_text(dir / (stem + ".json"), model_sidecar_json(model, stem) + "\n");
}

std::string csv_line(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out + '\n';
}

std::string json_num(const ojson& v) {
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number()) return fmt_double(v.get<double>());
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  return v.dump();
}

}  // namespace

// ---------------------------------------------------------------- config

ConfigMap ConfigMap::parse(const std::string& text) {
  ConfigMap map;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    map.values_[key] = trim(line.substr(eq + 1));
  }
  return map;
}

ConfigMap ConfigMap::load(const std::filesystem::path& path) { return parse(read_text(path)); }

void ConfigMap::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = trim(assignment.substr(0, eq));
  if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
  values_[key] = trim(assignment.substr(eq + 1));
}

const std::string& ConfigMap::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

std::string ConfigMap::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

PipelineConfig PipelineConfig::from_map(const ConfigMap& map) {
  PipelineConfig c;
  const auto& table = fields();
  for (const auto& [k, v] : map.values()) {
    const auto it = table.find(k);
    if (it == table.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second.set(c, k, v);
  }
  c.validate();
  return c;
}

ConfigMap PipelineConfig::to_map() const {
  ConfigMap map;
  for (const auto& [k, f] : fields()) map.set(k, f.get(*this));
  return map;
}

void PipelineConfig::validate() const {
  if (data_source != "synthetic" && data_source != "file") throw ConfigError("data.source must be synthetic or file");
  if (data_source == "file" && train_path.empty()) throw ConfigError("data.train is required for file data");
  if (data_source == "synthetic") synthetic.validate();
  if (partition != "kmeans" && partition != "random") throw ConfigError("triplet.partition must be kmeans or random");
  if (num_subspaces == 0) throw ConfigError("triplet.M must be positive");
  if (kmeans_max_iter == 0) throw ConfigError("triplet.kmeans_max_iter must be positive");
  if (!(init_subset_fraction > 0.0 && init_subset_fraction <= 1.0)) {
    throw ConfigError("cleaning.init_subset_fraction must lie in (0, 1]");
  }
  if (!(out_of_index_fraction >= 0.0 && out_of_index_fraction < 1.0)) {
    throw ConfigError("eval.out_of_index_fraction must lie in [0, 1)");
  }
  if (triplet.lambda < 0.0) throw ConfigError("triplet.lambda must be non-negative");
  if (triplet.mining.top_k == 0) throw ConfigError("triplet.top_k must be positive");
  if (triplet.mining.batch_size < 2) throw ConfigError("triplet.batch_size must be at least 2");
  if (classifier.batch_size == 0) throw ConfigError("classifier.batch_size must be positive");
  if (classifier.architecture.d == 0) throw ConfigError("model.d must be positive");
  if (verification_pairs == 0) throw ConfigError("eval.pairs must be positive");
}

std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : stage) h = (h ^ ch) * 0x100000001b3ULL;
  return splitmix64(seed ^ splitmix64(h));
}

// ---------------------------------------------------------- verification

std::vector<VerificationPair> make_verification_pairs(const LabeledDataset& dataset, std::size_t n_same,
                                                      std::size_t n_diff, std::uint64_t seed) {
  const auto groups = dataset.members_by_identity();
  std::vector<std::size_t> multi;
  std::vector<std::size_t> any;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (!groups[c].empty()) any.push_back(c);
    if (groups[c].size() >= 2) multi.push_back(c);
  }
  if (n_same > 0 && multi.empty()) throw ConfigError("no identity has two samples for same pairs");
  if (n_diff > 0 && any.size() < 2) throw ConfigError("different pairs need two identities");
  std::mt19937_64 rng(seed);
  auto below = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  std::vector<VerificationPair> pairs;
  pairs.reserve(n_same + n_diff);
  for (std::size_t i = 0; i < n_same; ++i) {
    const auto& g = groups[multi[below(multi.size())]];
    const std::size_t x = below(g.size());
    std::size_t y = below(g.size() - 1);
    if (y >= x) ++y;
    pairs.push_back({g[x], g[y], true});
  }
  for (std::size_t i = 0; i < n_diff; ++i) {
    const std::size_t x = below(any.size());
    std::size_t y = below(any.size() - 1);
    if (y >= x) ++y;
    const auto& gx = groups[any[x]];
    const auto& gy = groups[any[y]];
    pairs.push_back({gx[below(gx.size())], gy[below(gy.size())], false});
  }
  return pairs;
}

VerificationResult pair_verification(std::span<const Vector> embeddings, std::span<const VerificationPair> pairs) {
  if (pairs.empty()) throw ConfigError("pair_verification: no pairs");
  std::vector<std::pair<double, bool>> d;
  d.reserve(pairs.size());
  std::size_t n_diff = 0;
  for (const auto& p : pairs) {
    if (p.a >= embeddings.size() || p.b >= embeddings.size()) throw DimensionError("pair index out of range");
    d.emplace_back(squared_distance(embeddings[p.a], embeddings[p.b]), p.same);
    n_diff += !p.same;
  }
  std::sort(d.begin(), d.end());
  VerificationResult best{static_cast<double>(n_diff) / static_cast<double>(d.size()), d.front().first - 1.0,
                          d.size()};
  std::size_t best_correct = n_diff;
  std::size_t same_below = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    same_below += d[i].second;
    if (i + 1 < d.size() && d[i + 1].first == d[i].first) continue;
    const std::size_t diff_below = i + 1 - same_below;
    const std::size_t correct = same_below + (n_diff - diff_below);
    if (correct > best_correct) {
      best_correct = correct;
      best.threshold = i + 1 < d.size() ? 0.5 * (d[i].first + d[i + 1].first) : d[i].first + 1.0;
    }
  }
  best.accuracy = static_cast<double>(best_correct) / static_cast<double>(d.size());
  return best;
}

VerificationResult pair_verification(const Model& model, const LabeledDataset& dataset,
                                     std::span<const VerificationPair> pairs) {
  std::vector<Vector> emb;
  emb.reserve(dataset.size());
  for (const auto& s : dataset.samples) emb.push_back(embed(model, s.features).values());
  return pair_verification(std::span<const Vector>(emb), pairs);
}

// -------------------------------------------------------------- pipeline

PreparedData prepare_data(const PipelineConfig& config, const std::filesystem::path* dir) {
  config.validate();
  PreparedData out;
  std::vector<std::pair<std::string, double>> timing;
  StageTimer timer(timing);
  if (dir) std::filesystem::create_directories(*dir);

  timer.run("data", [&] {
    if (config.data_source == "synthetic") {
      SyntheticSpec spec = config.synthetic;
      spec.seed = stage_seed(config.seed, "data");
      auto data = generate_synthetic(spec);
      out.noise_flags = data.noise_flags();
      out.train = std::move(data.train);
      out.test = std::move(data.test);
      out.unseen = std::move(data.unseen);
    } else {
      out.train = load_dataset(config.train_path);
      if (!config.test_path.empty()) out.test = load_dataset(config.test_path);
      if (!config.unseen_path.empty()) out.unseen = load_dataset(config.unseen_path);
    }
    if (!out.test.empty() && out.test.num_identities != out.train.num_identities) {
      throw ConfigError("test split must share the training identity space");
    }
    if (dir) save_dataset(*dir / "train.tfds", out.train);
  });

  ClassifierConfig cc = config.classifier;
  CleaningConfig clean_cfg{cc, config.init_subset_fraction, config.warm_start};
  if (config.cleaning) {
    timer.run("init_classifier", [&] {
      clean_cfg.classifier.seed = stage_seed(config.seed, "init_classifier");
      out.initial_classifier = train_initial_classifier(out.train, clean_cfg, &out.init_log);
      if (dir) save_model_with_sidecar(*dir, "init_classifier", *out.initial_classifier);
    });
    timer.run("clean", [&] {
      auto result = filter_by_agreement(out.train, *out.initial_classifier,
                                        out.noise_flags.empty() ? nullptr : &out.noise_flags);
      out.clean = std::move(result.clean);
      out.cleaning = result.report;
      if (dir) {
        save_dataset(*dir / "clean.tfds", out.clean);
        write_text(*dir / "cleaning_report.json", cleaning_report_to_json(result.report) + "\n");
      }
    });
  } else {
    out.clean = out.train;
  }

  timer.run("classifier", [&] {
    clean_cfg.classifier.seed = stage_seed(config.seed, "classifier");
    out.classifier = config.cleaning
                         ? retrain_clean(out.clean, clean_cfg, out.initial_classifier ? &*out.initial_classifier : nullptr,
                                         &out.classifier_log)
                         : train_classifier(out.clean, clean_cfg.classifier, &out.classifier_log);
    if (dir) save_model_with_sidecar(*dir, "classifier", out.classifier);
  });

  timer.run("centroids", [&] {
    // Identities emptied by cleaning fall back to their original samples so
    // every identity keeps a point for clustering.
    const auto clean_groups = out.clean.members_by_identity();
    const auto raw_groups = out.train.members_by_identity();
    for (std::uint32_t c = 0; c < out.train.num_identities; ++c) {
      const bool use_clean = c < clean_groups.size() && !clean_groups[c].empty();
      const auto& group = use_clean ? clean_groups[c] : raw_groups[c];
      const auto& source = use_clean ? out.clean : out.train;
      if (group.empty()) throw EmptyIdentityError("identity " + std::to_string(c) + " has no samples");
      std::vector<Embedding> emb;
      for (auto pos : group) emb.push_back(embed(out.classifier, source.samples[pos].features));
      out.centroids.push_back(identity_centroid(c, std::span<const Embedding>(emb)));
    }
  });

  for (auto& [name, secs] : timing) {
    out.stage_names.push_back(name);
    out.stage_seconds.push_back(secs);
  }
  return out;
}

ExperimentRecord run_from_prepared(const PreparedData& prepared, const PipelineConfig& config,
                                   const std::filesystem::path* dir) {
  config.validate();
  ExperimentRecord rec;
  rec.config = config;
  rec.init_log = prepared.init_log;
  rec.classifier_log = prepared.classifier_log;
  rec.cleaning = prepared.cleaning;
  for (std::size_t i = 0; i < prepared.stage_names.size(); ++i) {
    rec.wall_clock.emplace_back(prepared.stage_names[i], prepared.stage_seconds[i]);
  }
  StageTimer timer(rec.wall_clock);
  if (dir) std::filesystem::create_directories(*dir);

  if (config.regime == MiningRegime::subspace) {
    timer.run("partition", [&] {
      std::vector<Vector> points;
      for (const auto& c : prepared.centroids) {
        points.push_back(config.renormalize_centroids ? renormalized(c.centroid) : c.centroid);
      }
      const auto seed = stage_seed(config.seed, "partition");
      if (config.partition == "kmeans") {
        rec.partition = kmeans(std::span<const Vector>(points), config.num_subspaces, config.kmeans_max_iter, seed).partition;
      } else {
        auto p = random_partition(points.size(), config.num_subspaces, seed);
        assign_centers(p, points);
        rec.partition = std::move(p);
      }
      if (dir) write_text(*dir / "partition.json", partition_to_json(*rec.partition) + "\n");
    });
  }

  rec.model = prepared.classifier;
  timer.run("triplet", [&] {
    TripletConfig tc = config.triplet;
    tc.regime = config.regime;
    tc.seed = stage_seed(config.seed, "triplet");
    train_triplet(rec.model, prepared.clean, tc, rec.partition ? &*rec.partition : nullptr, &rec.triplet_log);
    if (dir) {
      save_model_with_sidecar(*dir, "model", rec.model);
      write_text(*dir / "mining.jsonl", mining_lines(rec.triplet_log, config.triplet.mining));
    }
  });

  timer.run("index", [&] {
    rec.index = build_index(prepared.clean, rec.model, "model:" + to_string(config.regime));
    if (dir) save_index(*dir / "index.tfix", rec.index);
  });

  timer.run("evaluate", [&] {
    const LabeledDataset& verify = prepared.unseen.empty() ? prepared.test : prepared.unseen;
    if (verify.empty()) throw ConfigError("no held-out split for verification pairs");
    const auto pairs = make_verification_pairs(verify, config.verification_pairs, config.verification_pairs,
                                               stage_seed(config.seed, "pairs"));
    rec.classifier_pair_accuracy = pair_verification(prepared.classifier, verify, pairs).accuracy;
    rec.verification = pair_verification(rec.model, verify, pairs);
    if (rec.model.has_head() && !prepared.test.empty()) rec.test_accuracy = classification_accuracy(rec.model, prepared.test);

    if (prepared.test.empty()) return;
    std::vector<ScoredResult> scored;
    std::size_t agree = 0;
    double hier_ops = 0.0;
    double flat_ops = 0.0;
    for (const auto& s : prepared.test.samples) {
      const Vector q = embed(rec.model, s.features).values();
      const auto h = retrieve_hierarchical(rec.index, q, config.confidence);
      const auto f = retrieve_flat(rec.index, q);
      agree += h.predicted_identity == f.predicted_identity;
      hier_ops += static_cast<double>(h.distance_ops);
      flat_ops += static_cast<double>(f.distance_ops);
      scored.push_back({h.confidence, h.predicted_identity == s.identity});
    }
    rec.flat_agreement = static_cast<double>(agree) / static_cast<double>(prepared.test.size());
    rec.mean_hierarchical_ops = hier_ops / static_cast<double>(prepared.test.size());
    rec.mean_flat_ops = flat_ops / static_cast<double>(prepared.test.size());

    const double f = config.out_of_index_fraction;
    auto extra = static_cast<std::size_t>(std::llround(f / (1.0 - f) * static_cast<double>(prepared.test.size())));
    extra = std::min(extra, prepared.unseen.size());
    std::vector<std::size_t> order(prepared.unseen.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(stage_seed(config.seed, "queries"));
    for (std::size_t i = 0; i < extra; ++i) {
      std::swap(order[i], order[i + std::uniform_int_distribution<std::size_t>(0, order.size() - i - 1)(rng)]);
    }
    for (std::size_t i = 0; i < extra; ++i) {
      const Vector q = embed(rec.model, prepared.unseen.samples[order[i]].features).values();
      scored.push_back({retrieve_hierarchical(rec.index, q, config.confidence).confidence, false});
    }
    rec.curve = precision_coverage(scored, threshold_grid(scored, 512));
    rec.coverage_at_95 = coverage_at_precision(rec.curve, 0.95);
    rec.coverage_at_99 = coverage_at_precision(rec.curve, 0.99);
  });

  if (dir) {
    write_text(*dir / "record.json", record_to_json(rec, false) + "\n");
    ojson t = ojson::object();
    for (const auto& [name, secs] : rec.wall_clock) t[name] = secs;
    write_text(*dir / "timings.json", t.dump(2) + "\n");
  }
  return rec;
}

ExperimentRecord run_pipeline(const PipelineConfig& config, const std::optional<std::filesystem::path>& out_dir) {
  const std::filesystem::path* dir = out_dir ? &*out_dir : nullptr;
  const auto prepared = prepare_data(config, dir);
  return run_from_prepared(prepared, config, dir);
}

std::string record_to_json(const ExperimentRecord& rec, bool include_wall_clock) {
  ojson j;
  j["format"] = "tsub.experiment";
  j["format_version"] = kRecordFormatVersion;
  j["library_version"] = kLibraryVersion;
  j["seed"] = rec.config.seed;
  ojson cfg = ojson::object();
  const ConfigMap snapshot = rec.config.to_map();
  for (const auto& [k, v] : snapshot.values()) cfg[k] = v;
  j["config"] = std::move(cfg);

  ojson stages;
  stages["init_classifier"] = {{"epochs", epochs_json(rec.init_log)}};
  stages["cleaning"] = rec.cleaning ? ojson::parse(cleaning_report_to_json(*rec.cleaning)) : ojson(nullptr);
  stages["classifier"] = {{"epochs", epochs_json(rec.classifier_log)}};
  if (rec.partition) {
    stages["partition"] = {{"M", rec.partition->M},
                           {"sizes", rec.partition->sizes},
                           {"objective_trace", rec.partition->objective_trace}};
  } else {
    stages["partition"] = nullptr;
  }
  ojson trip;
  trip["regime"] = to_string(rec.config.regime);
  trip["steps"] = rec.triplet_log.size();
  trip["mean_active"] = mean_active(rec.triplet_log);
  std::size_t fallback = 0;
  for (const auto& r : rec.triplet_log) fallback += r.loss.fallback_used;
  trip["fallback_steps"] = fallback;
  ojson epochs = ojson::array();
  const std::size_t per_epoch =
      rec.triplet_log.empty() || rec.config.triplet.schedule.rates.empty()
          ? 0
          : rec.triplet_log.size() / (rec.config.triplet.schedule.rates.size() * rec.config.triplet.schedule.epochs_per_rate);
  for (std::size_t start = 0; per_epoch > 0 && start < rec.triplet_log.size(); start += per_epoch) {
    const std::size_t end = std::min(rec.triplet_log.size(), start + per_epoch);
    double tl = 0.0, sl = 0.0, act = 0.0, cand = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      const auto& r = rec.triplet_log[i].loss;
      tl += r.triplet_loss;
      sl += r.softmax_loss;
      act += static_cast<double>(r.active_triplets);
      cand += static_cast<double>(r.candidate_triplets);
    }
    const double n = static_cast<double>(end - start);
    epochs.push_back({{"epoch", start / per_epoch},
                      {"mean_triplet_loss", tl / n},
                      {"mean_softmax_loss", sl / n},
                      {"mean_active", act / n},
                      {"mean_candidates", cand / n}});
  }
  trip["epochs"] = std::move(epochs);
  std::vector<std::size_t> series;
  for (const auto& r : rec.triplet_log) series.push_back(r.loss.active_triplets);
  trip["active_series"] = series;
  stages["triplet"] = std::move(trip);
  j["stages"] = std::move(stages);

  ojson ev;
  ev["classifier_pair_accuracy"] = rec.classifier_pair_accuracy;
  ev["pair_accuracy"] = rec.verification.accuracy;
  ev["pair_threshold"] = rec.verification.threshold;
  ev["pairs"] = rec.verification.pairs;
  ev["test_accuracy"] = rec.test_accuracy;
  ev["coverage_at_95"] = rec.coverage_at_95;
  ev["coverage_at_99"] = rec.coverage_at_99;
  ev["flat_agreement"] = rec.flat_agreement;
  ev["mean_hierarchical_ops"] = rec.mean_hierarchical_ops;
  ev["mean_flat_ops"] = rec.mean_flat_ops;
  ev["index_identities"] = rec.index.num_identities();
  ev["index_members"] = rec.index.num_members();
  ev["curve_total"] = rec.curve.total;
  ev["curve"] = curve_json(rec.curve);
  j["evaluation"] = std::move(ev);

  if (include_wall_clock) {
    ojson t = ojson::object();
    for (const auto& [name, secs] : rec.wall_clock) t[name] = secs;
    j["wall_clock"] = std::move(t);
  }
  return j.dump(2);
}

// -------------------------------------------------------------- ablation

std::vector<PipelineConfig> ablation_grid(const PipelineConfig& base, std::vector<std::string>* names) {
  const std::size_t M = base.num_subspaces;
  const double joint_lambda = base.triplet.lambda > 0.0 ? base.triplet.lambda : 1.0;
  struct Variant {
    std::string name;
    MiningRegime regime;
    std::string partition;
    std::size_t M;
  };
  const std::vector<Variant> variants = {
      {"softmax", MiningRegime::none, base.partition, M},
      {"batch_m1", MiningRegime::batch, "kmeans", 1},
      {"random_m" + std::to_string(M), MiningRegime::subspace, "random", M},
      {"kmeans_m" + std::to_string(std::max<std::size_t>(1, M / 2)), MiningRegime::subspace, "kmeans",
       std::max<std::size_t>(1, M / 2)},
      {"kmeans_m" + std::to_string(M), MiningRegime::subspace, "kmeans", M},
      {"kmeans_m" + std::to_string(2 * M), MiningRegime::subspace, "kmeans", 2 * M},
  };
  std::vector<PipelineConfig> out;
  if (names) names->clear();
  for (const auto& v : variants) {
    for (int joint = 0; joint < 2; ++joint) {
      PipelineConfig c = base;
      c.regime = v.regime;
      c.partition = v.partition;
      c.num_subspaces = v.M;
      c.triplet.lambda = joint ? joint_lambda : 0.0;
      out.push_back(c);
      if (names) names->push_back(v.name + (joint ? "-joint" : "-triplet"));
    }
  }
  return out;
}

std::vector<AblationRow> ablation_suite(const PipelineConfig& base) {
  std::vector<std::string> names;
  const auto grid = ablation_grid(base, &names);
  const auto prepared = prepare_data(base);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    rows.push_back({names[i], grid[i], run_from_prepared(prepared, grid[i])});
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string out = csv_line({"name", "regime", "partition", "M", "lambda", "pair_accuracy", "pair_threshold",
                              "classifier_pair_accuracy", "test_accuracy", "mean_active", "coverage_at_95",
                              "coverage_at_99"});
  for (const auto& r : rows) {
    out += csv_line({r.name, to_string(r.config.regime), r.config.partition, std::to_string(r.config.num_subspaces),
                     fmt_double(r.config.triplet.lambda), fmt_double(r.record.verification.accuracy),
                     fmt_double(r.record.verification.threshold), fmt_double(r.record.classifier_pair_accuracy),
                     fmt_double(r.record.test_accuracy), fmt_double(mean_active(r.record.triplet_log)),
                     fmt_double(r.record.coverage_at_95), fmt_double(r.record.coverage_at_99)});
  }
  return out;
}

void write_ablation(std::span<const AblationRow> rows, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "records");
  write_text(dir / "ablation.csv", ablation_csv(rows));
  ojson timings = ojson::object();
  for (const auto& r : rows) {
    write_text(dir / "records" / (r.name + ".json"), record_to_json(r.record, false) + "\n");
    ojson t = ojson::object();
    for (const auto& [name, secs] : r.record.wall_clock) t[name] = secs;
    timings[r.name] = std::move(t);
  }
  write_text(dir / "timings.json", timings.dump(2) + "\n");
}

// ----------------------------------------------------------------- plots

PlotBundle emit_plots(const std::string& record_json, const std::filesystem::path& dir) {
  const ojson rec = ojson::parse(record_json);
  std::filesystem::create_directories(dir);
  PlotBundle bundle;
  ojson manifest = ojson::array();
  auto emit = [&](const std::string& file, const std::string& curve, const std::vector<std::string>& columns,
                  const std::vector<std::vector<std::string>>& rows) {
    std::string text = csv_line(columns);
    for (const auto& r : rows) text += csv_line(r);
    write_text(dir / file, text);
    bundle.files.push_back(dir / file);
    manifest.push_back({{"file", file}, {"curve", curve}, {"columns", columns}, {"rows", rows.size()}});
  };

  std::vector<std::vector<std::string>> rows;
  for (const auto& p : rec.at("evaluation").at("curve")) {
    rows.push_back({json_num(p.at("threshold")), json_num(p.at("precision")), json_num(p.at("coverage")),
                    json_num(p.at("M")), json_num(p.at("correct"))});
  }
  emit("retrieval_curve.csv", "precision and coverage per confidence threshold",
       {"threshold", "precision", "coverage", "M", "correct"}, rows);

  rows.clear();
  const auto& trip = rec.at("stages").at("triplet");
  const auto& series = trip.at("active_series");
  for (std::size_t i = 0; i < series.size(); ++i) rows.push_back({std::to_string(i), json_num(series[i])});
  emit("active_triplets.csv", "active triplets per training step", {"step", "active"}, rows);

  rows.clear();
  for (const auto& e : trip.at("epochs")) {
    rows.push_back({json_num(e.at("epoch")), json_num(e.at("mean_triplet_loss")), json_num(e.at("mean_softmax_loss")),
                    json_num(e.at("mean_active")), json_num(e.at("mean_candidates"))});
  }
  emit("triplet_epochs.csv", "triplet stage losses per epoch",
       {"epoch", "triplet_loss", "softmax_loss", "active", "candidates"}, rows);

  rows.clear();
  for (const char* stage : {"init_classifier", "classifier"}) {
    for (const auto& e : rec.at("stages").at(stage).at("epochs")) {
      rows.push_back({stage, json_num(e.at("epoch")), json_num(e.at("learning_rate")), json_num(e.at("mean_loss"))});
    }
  }
  emit("classifier_loss.csv", "softmax loss per epoch", {"stage", "epoch", "learning_rate", "loss"}, rows);

  rows.clear();
  const auto& part = rec.at("stages").at("partition");
  if (!part.is_null()) {
    const auto& trace = part.at("objective_trace");
    for (std::size_t i = 0; i < trace.size(); ++i) rows.push_back({std::to_string(i), json_num(trace[i])});
  }
  emit("kmeans_objective.csv", "k-means objective per iteration", {"iteration", "objective"}, rows);

  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  bundle.files.push_back(dir / "manifest.json");

  std::stringstream ss(read_text(dir / "retrieval_curve.csv"));
  std::string line;
  std::getline(ss, line);
  double prev = std::numeric_limits<double>::infinity();
  while (std::getline(ss, line)) {
    std::stringstream ls(line);
    std::string cell;
    for (int i = 0; i < 3; ++i) std::getline(ls, cell, ',');
    const double cov = std::stod(cell);
    if (cov > prev) bundle.coverage_monotone = false;
    prev = cov;
  }
  return bundle;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw FormatError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace tsub

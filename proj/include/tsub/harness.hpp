// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment driver: configuration, data preparation, the staged
// pipeline, pair verification, the ablation grid and plot-data emission.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsub/cleaning.hpp"
#include "tsub/retrieval.hpp"
#include "tsub/synthetic.hpp"
#include "tsub/training.hpp"

namespace tsub {

/// Flat key/value settings. Text form: one `key = value` per line, `#`
/// starts a comment.
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const std::filesystem::path& path);

  /// Applies `key=value`.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

struct PipelineConfig {
  std::uint64_t seed = 0;

  std::string data_source = "synthetic";  ///< "synthetic" or "file"
  std::string train_path;
  std::string test_path;
  std::string unseen_path;
  SyntheticSpec synthetic;

  ClassifierConfig classifier;
  bool cleaning = true;
  double init_subset_fraction = 1.0;
  bool warm_start = false;

  MiningRegime regime = MiningRegime::subspace;
  std::string partition = "kmeans";  ///< "kmeans" or "random"
  std::size_t num_subspaces = 10;
  std::size_t kmeans_max_iter = 100;
  bool renormalize_centroids = false;
  TripletConfig triplet;

  std::size_t verification_pairs = 2000;  ///< per class (same and different)
  double out_of_index_fraction = 0.25;
  ConfidenceMode confidence = ConfidenceMode::identity;

  /// Unknown keys and malformed values throw ConfigError.
  static PipelineConfig from_map(const ConfigMap& map);
  ConfigMap to_map() const;
  void validate() const;
};

/// Seed of one named pipeline stage, derived from the run seed.
std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage);

struct VerificationPair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool same = false;
};

/// n_same pairs of one identity and n_diff pairs of two identities, drawn
/// with replacement over positions of `dataset`.
std::vector<VerificationPair> make_verification_pairs(const LabeledDataset& dataset, std::size_t n_same,
                                                      std::size_t n_diff, std::uint64_t seed);

struct VerificationResult {
  double accuracy = 0.0;
  double threshold = 0.0;  ///< "same" when squared distance <= threshold
  std::size_t pairs = 0;
};

VerificationResult pair_verification(std::span<const Vector> embeddings, std::span<const VerificationPair> pairs);
VerificationResult pair_verification(const Model& model, const LabeledDataset& dataset,
                                     std::span<const VerificationPair> pairs);

/// Everything upstream of triplet training: data, cleaning, classifier,
/// centroids. Shared by every cell of an ablation.
struct PreparedData {
  LabeledDataset train;      ///< as loaded, labels possibly noisy
  LabeledDataset clean;      ///< after the agreement filter
  LabeledDataset test;       ///< may be empty
  LabeledDataset unseen;
  std::vector<bool> noise_flags;  ///< empty without ground truth
  std::vector<EpochReport> init_log;
  std::vector<EpochReport> classifier_log;
  std::optional<CleaningReport> cleaning;
  std::optional<Model> initial_classifier;
  Model classifier;
  std::vector<IdentityCentroid> centroids;
  std::vector<double> stage_seconds;
  std::vector<std::string> stage_names;
};

struct ExperimentRecord {
  PipelineConfig config;
  std::vector<EpochReport> init_log;
  std::vector<EpochReport> classifier_log;
  std::optional<CleaningReport> cleaning;
  std::optional<SubspacePartition> partition;
  std::vector<StepReport> triplet_log;
  double classifier_pair_accuracy = 0.0;
  VerificationResult verification;
  double test_accuracy = 0.0;  ///< closed-set accuracy of the final head, 0 without one
  PrecisionCoverageCurve curve;
  double coverage_at_95 = 0.0;
  double coverage_at_99 = 0.0;
  double flat_agreement = 0.0;  ///< hierarchical vs flat identity agreement
  double mean_hierarchical_ops = 0.0;
  double mean_flat_ops = 0.0;
  std::vector<std::pair<std::string, double>> wall_clock;
  Model model;
  RetrievalIndex index;
};

/// With a checkpoint directory each stage writes its artifacts on success.
PreparedData prepare_data(const PipelineConfig& config, const std::filesystem::path* checkpoint_dir = nullptr);

/// Triplet stage onwards. The prepared data must come from a config that
/// agrees on every data, classifier and cleaning key.
ExperimentRecord run_from_prepared(const PreparedData& prepared, const PipelineConfig& config,
                                   const std::filesystem::path* checkpoint_dir = nullptr);

/// Full pipeline. With an output directory every stage leaves a checkpoint
/// there. Stage failures surface as StageError.
ExperimentRecord run_pipeline(const PipelineConfig& config,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt);

std::string record_to_json(const ExperimentRecord& record, bool include_wall_clock);

struct AblationRow {
  std::string name;
  PipelineConfig config;
  ExperimentRecord record;
};

/// The 12-cell grid: {softmax-only, batch (M=1), random M, kmeans M/2, M,
/// 2M} x {triplet-only, joint}, sharing one prepared prefix.
std::vector<PipelineConfig> ablation_grid(const PipelineConfig& base, std::vector<std::string>* names = nullptr);
std::vector<AblationRow> ablation_suite(const PipelineConfig& base);
std::string ablation_csv(std::span<const AblationRow> rows);
/// Writes ablation.csv, one JSON record per row and timings.json.
void write_ablation(std::span<const AblationRow> rows, const std::filesystem::path& dir);

struct PlotBundle {
  std::vector<std::filesystem::path> files;
  bool coverage_monotone = true;
};

/// One CSV per curve plus manifest.json describing columns. The coverage
/// column is re-read from disk and checked.
PlotBundle emit_plots(const std::string& record_json, const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace tsub

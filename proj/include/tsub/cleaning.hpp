// SPDX-License-Identifier: Apache-2.0
//
// Label-noise removal by classifier agreement, and the fixed-ratio baseline.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tsub/training.hpp"

namespace tsub {

struct CleaningConfig {
  ClassifierConfig classifier;
  /// Share of samples used to train the initial classifier.
  double init_subset_fraction = 1.0;
  /// Start the retrained model from the initial weights instead of scratch.
  bool warm_start = false;
};

struct CleaningReport {
  std::size_t kept = 0;
  std::size_t removed = 0;
  std::vector<std::size_t> removed_per_identity;
  std::optional<double> noise_precision;
  std::optional<double> noise_recall;
};

struct CleaningResult {
  LabeledDataset clean;
  CleaningReport report;
  std::vector<bool> removed_mask;  ///< per input sample
};

Model train_initial_classifier(const LabeledDataset& dataset, const CleaningConfig& config,
                               std::vector<EpochReport>* log = nullptr);

/// Keeps samples whose predicted class equals their label. Noise flags, when
/// given, fill in precision and recall of the removal.
CleaningResult filter_by_agreement(const LabeledDataset& dataset, const Model& classifier,
                                   const std::vector<bool>* noise_flags = nullptr);

/// Throws CleaningCollapseError when fewer than two identities survive.
Model retrain_clean(const LabeledDataset& clean, const CleaningConfig& config, const Model* initial = nullptr,
                    std::vector<EpochReport>* log = nullptr);

/// Softmax probability of `label` for one input.
double label_confidence(const Model& classifier, const FeatureVector& features, std::uint32_t label);

/// Per identity, keeps the ceil(ratio * N_c) samples with the highest
/// labeled-class confidence. Survivors keep dataset order.
CleaningResult fixed_ratio_baseline(const LabeledDataset& dataset, const Model& classifier, double ratio,
                                    const std::vector<bool>* noise_flags = nullptr);

CleaningReport make_report(const LabeledDataset& dataset, const std::vector<bool>& removed_mask,
                           const std::vector<bool>* noise_flags);

std::string cleaning_report_to_json(const CleaningReport& report);

}  // namespace tsub

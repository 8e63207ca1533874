// SPDX-License-Identifier: Apache-2.0
#include "tsub/cleaning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

namespace tsub {

namespace {

CleaningResult apply_mask(const LabeledDataset& dataset, std::vector<bool> removed,
                          const std::vector<bool>* noise_flags) {
  CleaningResult out;
  out.clean.num_identities = dataset.num_identities;
  out.clean.d_in = dataset.d_in;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!removed[i]) out.clean.samples.push_back(dataset.samples[i]);
  }
  out.report = make_report(dataset, removed, noise_flags);
  out.removed_mask = std::move(removed);
  return out;
}

}  // namespace

CleaningReport make_report(const LabeledDataset& dataset, const std::vector<bool>& removed_mask,
                           const std::vector<bool>* noise_flags) {
  if (removed_mask.size() != dataset.size()) throw DimensionError("removal mask size differs from dataset");
  CleaningReport r;
  r.removed_per_identity.assign(dataset.num_identities, 0);
  std::size_t hits = 0;
  std::size_t noisy = 0;
  if (noise_flags && noise_flags->size() != dataset.size()) throw DimensionError("noise flags size differs from dataset");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (removed_mask[i]) {
      ++r.removed;
      ++r.removed_per_identity[dataset.samples[i].identity];
    } else {
      ++r.kept;
    }
    if (noise_flags && (*noise_flags)[i]) {
      ++noisy;
      hits += removed_mask[i];
    }
  }
  if (noise_flags) {
    r.noise_precision = r.removed ? static_cast<double>(hits) / static_cast<double>(r.removed) : 1.0;
    r.noise_recall = noisy ? static_cast<double>(hits) / static_cast<double>(noisy) : 1.0;
  }
  return r;
}

Model train_initial_classifier(const LabeledDataset& dataset, const CleaningConfig& config,
                               std::vector<EpochReport>* log) {
  if (dataset.empty()) throw ConfigError("cleaning: empty dataset");
  if (dataset.num_identities < 2) throw ConfigError("cleaning: softmax over a single identity is degenerate");
  const double f = config.init_subset_fraction;
  if (!(f > 0.0 && f <= 1.0)) throw ConfigError("init_subset_fraction must lie in (0, 1]");
  if (f == 1.0) return train_classifier(dataset, config.classifier, log);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.classifier.seed ^ 0x50b5e7ULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<std::size_t>(std::ceil(f * static_cast<double>(dataset.size())));
  order.resize(std::max<std::size_t>(n, 1));
  std::sort(order.begin(), order.end());
  LabeledDataset subset{{}, dataset.num_identities, dataset.d_in};
  for (auto i : order) subset.samples.push_back(dataset.samples[i]);
  return train_classifier(subset, config.classifier, log);
}

CleaningResult filter_by_agreement(const LabeledDataset& dataset, const Model& classifier,
                                   const std::vector<bool>* noise_flags) {
  if (!classifier.has_head() || classifier.architecture().num_classes < dataset.num_identities) {
    throw ConfigError("filter_by_agreement: classifier does not cover every identity");
  }
  std::vector<bool> removed(dataset.size(), false);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    removed[i] = predict_class(classifier, embed(classifier, s.features).values()) != s.identity;
  }
  return apply_mask(dataset, std::move(removed), noise_flags);
}

Model retrain_clean(const LabeledDataset& clean, const CleaningConfig& config, const Model* initial,
                    std::vector<EpochReport>* log) {
  std::set<std::uint32_t> present;
  for (const auto& s : clean.samples) present.insert(s.identity);
  if (present.size() < 2) throw CleaningCollapseError("fewer than two identities survive cleaning");
  if (config.warm_start && initial) {
    Model model = *initial;
    train_softmax(model, clean, config.classifier, log);
    return model;
  }
  return train_classifier(clean, config.classifier, log);
}

double label_confidence(const Model& classifier, const FeatureVector& features, std::uint32_t label) {
  return class_probabilities(classifier, embed(classifier, features).values())[label];
}

CleaningResult fixed_ratio_baseline(const LabeledDataset& dataset, const Model& classifier, double ratio,
                                    const std::vector<bool>* noise_flags) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("fixed ratio must lie in (0, 1]");
  std::vector<bool> removed(dataset.size(), true);
  std::vector<double> conf(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    conf[i] = label_confidence(classifier, dataset.samples[i].features, dataset.samples[i].identity);
  }
  for (auto members : dataset.members_by_identity()) {
    const auto keep = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(members.size()) - 1e-9));
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
    for (std::size_t j = 0; j < std::min(keep, members.size()); ++j) removed[members[j]] = false;
  }
  return apply_mask(dataset, std::move(removed), noise_flags);
}

std::string cleaning_report_to_json(const CleaningReport& report) {
  nlohmann::ordered_json j;
  j["kept"] = report.kept;
  j["removed"] = report.removed;
  j["removed_per_identity"] = report.removed_per_identity;
  if (report.noise_precision) j["noise_precision"] = *report.noise_precision;
  if (report.noise_recall) j["noise_recall"] = *report.noise_recall;
  return j.dump(2);
}

}  // namespace tsub

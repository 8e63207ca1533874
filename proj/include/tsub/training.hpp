// SPDX-License-Identifier: Apache-2.0
//
// Training loops: softmax classification from scratch, and triplet
// fine-tuning under one of the mining regimes. Both use NAG with a list of
// learning rates, each held for a fixed number of epochs.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsub/mining.hpp"
#include "tsub/model.hpp"
#include "tsub/subspace.hpp"

namespace tsub {

struct RateSchedule {
  std::vector<double> rates;
  std::size_t epochs_per_rate = 1;
};

struct ClassifierConfig {
  Architecture architecture;  ///< num_classes is taken from the dataset
  RateSchedule schedule{{1.0, 0.1, 0.01, 0.001}, 3};
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct EpochReport {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
};

/// Fresh model with a C-way head trained with softmax loss only. Throws
/// ConfigError for C < 2 or an empty dataset.
Model train_classifier(const LabeledDataset& dataset, const ClassifierConfig& config,
                       std::vector<EpochReport>* log = nullptr);

/// Continues softmax training of an existing model with a head.
void train_softmax(Model& model, const LabeledDataset& dataset, const ClassifierConfig& config,
                   std::vector<EpochReport>* log = nullptr);

/// Predicted class (argmax probability, ties to the lowest index).
std::uint32_t predict_class(const Model& model, const Vector& embedding);
double classification_accuracy(const Model& model, const LabeledDataset& dataset);

enum class MiningRegime {
  none,       ///< no triplet training
  ohnm,       ///< hinge filter over pre-sampled random triplets
  batch,      ///< batch OHNM over the whole dataset
  subspace,   ///< batch OHNM inside each subspace of a partition
};

std::string to_string(MiningRegime regime);
MiningRegime mining_regime_from_string(const std::string& text);

struct TripletConfig {
  MiningRegime regime = MiningRegime::batch;
  MiningConfig mining;
  RateSchedule schedule{{0.1, 0.01, 0.001}, 10};
  double momentum = 0.9;
  /// Joint softmax weight; 0 trains with the triplet loss alone.
  double lambda = 1.0;
  bool reinit_head = false;
  std::uint64_t seed = 0;
};

struct StepReport {
  std::size_t step = 0;
  std::string scope;
  LossReport loss;
};

/// Fine-tunes the model in place. For MiningRegime::subspace a partition is
/// required; batches follow subspace_schedule(). One epoch is
/// ceil(C / batch_size) batches.
void train_triplet(Model& model, const LabeledDataset& dataset, const TripletConfig& config,
                   const SubspacePartition* partition = nullptr, std::vector<StepReport>* log = nullptr);

}  // namespace tsub

// SPDX-License-Identifier: Apache-2.0
//
// Hierarchically clustered synthetic identities: supercluster means on the
// unit sphere, identity means scattered around them, samples scattered
// around identity means, and optional label flips with ground truth kept.
#pragma once

#include <cstdint>
#include <vector>

#include "tsub/embedding.hpp"

namespace tsub {

enum class NoiseMode { uniform, concentrated };

struct SyntheticSpec {
  std::size_t num_identities = 1000;
  std::size_t samples_min = 20;
  std::size_t samples_max = 20;
  std::size_t d_in = 32;
  std::size_t num_superclusters = 10;
  double within_identity_sigma = 0.04;
  double identity_spread_sigma = 0.05;
  double label_flip_rate = 0.0;
  NoiseMode noise_mode = NoiseMode::uniform;
  /// Share of identities that receive all flips in concentrated mode.
  double noisy_identity_fraction = 0.0;
  /// Clean extra samples per training identity for closed-set evaluation.
  std::size_t test_per_identity = 5;
  /// Identities absent from training, used for verification pairs.
  std::size_t unseen_identities = 200;
  std::size_t unseen_samples = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  LabeledDataset train;  ///< labels possibly flipped
  LabeledDataset test;   ///< clean labels, same identities as train
  LabeledDataset unseen; ///< disjoint identities, labels 0..unseen-1
  /// Generator identity of each training sample.
  std::vector<std::uint32_t> true_identity;
  /// Supercluster of each training identity, and of each unseen identity.
  std::vector<std::uint32_t> supercluster;
  std::vector<std::uint32_t> unseen_supercluster;
  std::vector<Vector> identity_means;

  std::vector<bool> noise_flags() const;
  std::size_t noise_count() const;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace tsub

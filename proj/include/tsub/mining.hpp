// SPDX-License-Identifier: Apache-2.0
//
// Triplet generation: OHNM over pre-sampled triplets, batch OHNM with an
// in-batch top-k negative search, and batch OHNM restricted to a subspace.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsub/embedding.hpp"
#include "tsub/subspace.hpp"

namespace tsub {

using Rng = std::mt19937_64;

struct MiningConfig {
  double margin = 0.4;
  std::size_t top_k = 3;
  std::size_t batch_size = 32;
  /// Keep only negatives with d_an > d_ap before taking the top-k.
  bool semi_hard = false;
};

/// Dataset positions grouped by identity, computed once per dataset.
class IdentityGroups {
 public:
  explicit IdentityGroups(const LabeledDataset& dataset);

  const LabeledDataset& dataset() const noexcept { return *dataset_; }
  std::size_t num_identities() const noexcept { return groups_.size(); }
  const std::vector<std::size_t>& members(std::uint32_t identity) const { return groups_.at(identity); }
  /// Identities of the scope with at least two samples, ascending.
  std::vector<std::uint32_t> eligible(std::span<const std::uint32_t> scope) const;
  std::vector<std::uint32_t> all_identities() const;

 private:
  const LabeledDataset* dataset_;
  std::vector<std::vector<std::size_t>> groups_;
};

struct AnchorPositivePair {
  std::uint32_t identity = 0;
  std::size_t anchor = 0;    ///< dataset position
  std::size_t positive = 0;  ///< dataset position
  std::uint64_t anchor_id = 0;
  std::uint64_t positive_id = 0;
};

/// |B| pairs over distinct identities. Batch member 2i is pair i's anchor
/// and member 2i+1 its positive.
struct AnchorPositiveBatch {
  std::vector<AnchorPositivePair> pairs;
  /// Subspace the batch was drawn from; empty for whole-dataset scope.
  std::optional<std::size_t> subspace;
  bool fallback_used = false;

  std::size_t num_members() const noexcept { return 2 * pairs.size(); }
  std::size_t member_position(std::size_t member) const {
    const auto& p = pairs.at(member / 2);
    return member % 2 == 0 ? p.anchor : p.positive;
  }
  std::uint32_t member_identity(std::size_t member) const { return pairs.at(member / 2).identity; }
  std::uint64_t member_sample_id(std::size_t member) const {
    const auto& p = pairs.at(member / 2);
    return member % 2 == 0 ? p.anchor_id : p.positive_id;
  }
};

/// Anchor, positive and negative as batch member indices (or dataset
/// positions for pre-sampled triplets).
struct Triplet {
  std::size_t anchor = 0, positive = 0, negative = 0;
  double d_ap = 0.0, d_an = 0.0, loss = 0.0;
};

/// Draws batch_size distinct eligible identities from the scope, then an
/// anchor and a different positive within each. Throws ScopeTooSmallError
/// when fewer than batch_size identities have two samples.
AnchorPositiveBatch sample_batch(const IdentityGroups& groups, std::span<const std::uint32_t> scope,
                                 std::size_t batch_size, Rng& rng);

/// Triplets whose hinge is strictly positive, in input order.
std::vector<Triplet> ohnm_filter(std::span<const Triplet> triplets, double margin);

/// Every anchor paired with its top_k nearest differently-labeled batch
/// members (ties by lowest sample_id), before hinge filtering.
std::vector<Triplet> batch_ohnm_candidates(const AnchorPositiveBatch& batch,
                                           std::span<const Embedding> member_embeddings,
                                           const MiningConfig& config);

/// batch_ohnm_candidates followed by ohnm_filter.
std::vector<Triplet> batch_ohnm_select(const AnchorPositiveBatch& batch,
                                       std::span<const Embedding> member_embeddings,
                                       const MiningConfig& config);

/// Batch drawn inside subspace m. If the subspace has fewer than
/// batch_size eligible identities, the batch is topped up with random
/// identities from the nearest other subspaces by center distance.
AnchorPositiveBatch sample_subspace_batch(const SubspacePartition& partition, std::size_t m,
                                          const IdentityGroups& groups, std::size_t batch_size, Rng& rng);

struct MinedBatch {
  AnchorPositiveBatch batch;
  std::vector<Triplet> triplets;    ///< after the hinge filter
  std::size_t candidate_count = 0;  ///< k * |B| before the filter
};

/// Embeddings of the batch members gathered from precomputed per-sample
/// embeddings (dataset order).
std::vector<Embedding> gather_embeddings(const AnchorPositiveBatch& batch, std::span<const Embedding> dataset_embeddings);

/// Batch OHNM over the whole dataset at a fixed embedding snapshot.
MinedBatch global_batch_ohnm(const IdentityGroups& groups, std::span<const Embedding> dataset_embeddings,
                             const MiningConfig& config, Rng& rng);

/// Batch OHNM scoped to subspace m at a fixed embedding snapshot.
MinedBatch subspace_batch_ohnm(const SubspacePartition& partition, std::size_t m, const IdentityGroups& groups,
                               std::span<const Embedding> dataset_embeddings, const MiningConfig& config, Rng& rng);

/// Pre-sampled triplets (anchor/positive from distinct identities, negative
/// from a uniformly drawn other identity), indexed by dataset position.
std::vector<Triplet> sample_random_triplets(const IdentityGroups& groups, std::size_t count, Rng& rng);

/// Fills d_ap, d_an and loss of each triplet from per-position embeddings.
void score_triplets(std::span<Triplet> triplets, std::span<const Embedding> embeddings, double margin);

struct ActiveCount {
  std::size_t active = 0;
  double mean_loss = 0.0;  ///< over all given triplets
};
ActiveCount count_active(std::span<const Triplet> triplets);

/// One JSON line: {step, scope, active_triplets, mean_loss, batch_size, top_k}.
std::string mining_diagnostic_json(std::size_t step, const std::string& scope, const ActiveCount& count,
                                   std::size_t batch_size, std::size_t top_k);

}  // namespace tsub

// SPDX-License-Identifier: Apache-2.0
//
// Identity centroids clustered into M subspaces of similar identities, plus
// the per-subspace batch schedule used during triplet training.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsub/embedding.hpp"
#include "tsub/model.hpp"

namespace tsub {

struct SubspacePartition {
  std::size_t M = 0;
  std::uint64_t seed = 0;
  /// identity -> subspace index in [0, M)
  std::vector<std::uint32_t> assignment;
  /// Mean of the member identity representations; may be empty for a
  /// partition that was not built from points.
  std::vector<Vector> cluster_centers;
  std::vector<std::size_t> sizes;
  std::vector<double> objective_trace;

  std::size_t num_identities() const noexcept { return assignment.size(); }
  /// Identities of each subspace in ascending order.
  std::vector<std::vector<std::uint32_t>> members() const;
  /// Every identity assigned once, sizes consistent, no empty subspace.
  void validate() const;
};

struct KMeansTrace {
  std::vector<double> objective;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  SubspacePartition partition;
  KMeansTrace trace;
};

/// One centroid per identity (identity order), from model-forward
/// embeddings. Throws EmptyIdentityError if an identity has no sample.
std::vector<IdentityCentroid> build_identity_centroids(const LabeledDataset& dataset, const Model& model,
                                                       bool renormalize = false);

/// Lloyd's algorithm with k-means++ seeding. Assignment ties go to the
/// lowest cluster index; an empty cluster takes the point farthest from
/// its center in the largest cluster.
KMeansResult kmeans(std::span<const Vector> points, std::size_t M, std::size_t max_iter, std::uint64_t seed);
KMeansResult kmeans(std::span<const IdentityCentroid> centroids, std::size_t M, std::size_t max_iter,
                    std::uint64_t seed);

/// Sum over points of the squared distance to their subspace center.
double partition_objective(const SubspacePartition& partition, std::span<const Vector> points);

/// Shuffles identities and deals them round-robin into M groups.
SubspacePartition random_partition(std::size_t num_identities, std::size_t M, std::uint64_t seed);

/// Fills cluster_centers with the mean point of each subspace.
void assign_centers(SubspacePartition& partition, std::span<const Vector> points);

/// Subspace index per training batch. Counts are proportional to subspace
/// sizes (largest remainder) and interleaved evenly across subspaces.
std::vector<std::size_t> subspace_schedule(const SubspacePartition& partition, std::size_t total_batches);

/// Re-clusters with fresh centroids from the given model.
KMeansResult refresh_partition(const LabeledDataset& dataset, const Model& model, std::size_t M,
                               std::size_t max_iter, std::uint64_t seed, bool renormalize = false);

std::string partition_to_json(const SubspacePartition& partition);
SubspacePartition partition_from_json(const std::string& text);
void save_partition(const std::filesystem::path& path, const SubspacePartition& partition);
SubspacePartition load_partition(const std::filesystem::path& path);

}  // namespace tsub

// SPDX-License-Identifier: Apache-2.0
//
// Shared numeric substrate: unit-norm embeddings, squared distances,
// identity centroids and two-model fusion.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tsub/errors.hpp"

namespace tsub {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raw input features of one sample (synthetic or precomputed).
using FeatureVector = Vector;

/// Tolerance on | ||e|| - 1 | for every constructed Embedding.
inline constexpr double kUnitNormTolerance = 1e-6;

/// A d-dimensional vector with unit L2 norm. Only constructible through
/// l2_normalize() or from_unit(), which checks the norm.
class Embedding {
 public:
  Embedding() = default;

  /// Adopts an already-normalized vector; throws NormalizationError when
  /// the norm is off by more than kUnitNormTolerance.
  static Embedding from_unit(Vector values);

  const Vector& values() const noexcept { return values_; }
  Eigen::Index dim() const noexcept { return values_.size(); }
  double operator[](Eigen::Index i) const { return values_[i]; }

  friend bool operator==(const Embedding& a, const Embedding& b) {
    return a.values_ == b.values_;
  }

 private:
  explicit Embedding(Vector values) : values_(std::move(values)) {}
  friend Embedding l2_normalize(const Vector& v);

  Vector values_;
};

struct Sample {
  std::uint64_t sample_id = 0;
  std::uint32_t identity = 0;
  FeatureVector features;
};

/// Ordered samples with C identities and a fixed feature width.
struct LabeledDataset {
  std::vector<Sample> samples;
  std::size_t num_identities = 0;
  std::size_t d_in = 0;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  /// Sample positions grouped by identity label, each list in dataset order.
  std::vector<std::vector<std::size_t>> members_by_identity() const;

  /// Checks labels < C, feature widths, finiteness and unique sample ids.
  void validate() const;
};

/// Plain mean of an identity's member vectors. Not renormalized.
struct IdentityCentroid {
  std::uint32_t identity = 0;
  Vector centroid;
  std::size_t member_count = 0;
};

/// v / ||v||; throws NormalizationError for a zero or non-finite norm.
Embedding l2_normalize(const Vector& v);

/// ||a - b||^2; throws DimensionError on mismatched sizes.
double squared_distance(const Vector& a, const Vector& b);
inline double squared_distance(const Embedding& a, const Embedding& b) {
  return squared_distance(a.values(), b.values());
}

IdentityCentroid identity_centroid(std::uint32_t identity, std::span<const Embedding> members);
IdentityCentroid identity_centroid(std::uint32_t identity, std::span<const Vector> members);

/// Elementwise (a + b) / 2, not renormalized.
Vector fuse_embeddings(const Vector& a, const Vector& b);
inline Vector fuse_embeddings(const Embedding& a, const Embedding& b) {
  return fuse_embeddings(a.values(), b.values());
}

/// Returns a copy of the centroid scaled to unit norm (zero centroids are
/// returned unchanged). Used only behind the renormalize_centroids flag.
Vector renormalized(const Vector& centroid);

/// Position of the centroid nearest to the query; ties go to the lowest
/// identity label, so the result does not depend on list order.
std::size_t nearest_centroid(std::span<const IdentityCentroid> centroids, const Vector& query);

}  // namespace tsub

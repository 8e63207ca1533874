// SPDX-License-Identifier: Apache-2.0
#include "tsub/embedding.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace tsub {

Embedding Embedding::from_unit(Vector values) {
  const double norm = values.norm();
  if (!std::isfinite(norm) || std::abs(norm - 1.0) > kUnitNormTolerance) {
    throw NormalizationError("vector is not unit norm (norm=" + std::to_string(norm) + ")");
  }
  return Embedding(std::move(values));
}

Embedding l2_normalize(const Vector& v) {
  const double norm = v.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw NormalizationError("cannot normalize a vector with norm " + std::to_string(norm));
  }
  return Embedding(v / norm);
}

double squared_distance(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw DimensionError("squared_distance: dimension " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  return (a - b).squaredNorm();
}

namespace {

template <typename Range, typename Get>
IdentityCentroid mean_of(std::uint32_t identity, const Range& members, Get get) {
  if (members.empty()) {
    throw EmptyIdentityError("identity " + std::to_string(identity) + " has no members");
  }
  const auto d = get(members.front()).size();
  Vector sum = Vector::Zero(d);
  for (const auto& m : members) {
    const Vector& v = get(m);
    if (v.size() != d) throw DimensionError("identity_centroid: ragged member dimensions");
    sum += v;
  }
  return {identity, sum / static_cast<double>(members.size()), members.size()};
}

}  // namespace

IdentityCentroid identity_centroid(std::uint32_t identity, std::span<const Embedding> members) {
  return mean_of(identity, members, [](const Embedding& e) -> const Vector& { return e.values(); });
}

IdentityCentroid identity_centroid(std::uint32_t identity, std::span<const Vector> members) {
  return mean_of(identity, members, [](const Vector& v) -> const Vector& { return v; });
}

Vector fuse_embeddings(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("fuse_embeddings: dimension mismatch");
  return (a + b) * 0.5;
}

Vector renormalized(const Vector& centroid) {
  const double norm = centroid.norm();
  return norm > 0.0 ? Vector(centroid / norm) : centroid;
}

std::size_t nearest_centroid(std::span<const IdentityCentroid> centroids, const Vector& query) {
  if (centroids.empty()) throw EmptyIndexError("nearest_centroid: no centroids");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    const double d = squared_distance(centroids[i].centroid, query);
    if (d < best_d || (d == best_d && centroids[i].identity < centroids[best].identity)) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

std::vector<std::vector<std::size_t>> LabeledDataset::members_by_identity() const {
  std::vector<std::vector<std::size_t>> groups(num_identities);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto id = samples[i].identity;
    if (id >= num_identities) throw LabelError("identity label out of range");
    groups[id].push_back(i);
  }
  return groups;
}

void LabeledDataset::validate() const {
  std::unordered_set<std::uint64_t> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.identity >= num_identities) {
      throw LabelError("sample " + std::to_string(s.sample_id) + " has identity " +
                       std::to_string(s.identity) + " >= C=" + std::to_string(num_identities));
    }
    if (static_cast<std::size_t>(s.features.size()) != d_in) {
      throw DimensionError("sample " + std::to_string(s.sample_id) + " has wrong feature width");
    }
    if (!s.features.allFinite()) {
      throw NumericalError("sample " + std::to_string(s.sample_id) + " has non-finite features");
    }
    if (!ids.insert(s.sample_id).second) {
      throw ConfigError("duplicate sample_id " + std::to_string(s.sample_id));
    }
  }
}

}  // namespace tsub

// SPDX-License-Identifier: Apache-2.0
//
// Two-layer retrieval: nearest identity centroid, then nearest member of that
// identity. A flat exhaustive scan serves as the reference. Precision and
// coverage over a confidence threshold summarize open-set behaviour.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tsub/model.hpp"

namespace tsub {

struct IndexMember {
  std::uint64_t sample_id = 0;
  Vector embedding;
};

struct RetrievalIndex {
  /// One entry per identity that has members, ascending by identity.
  std::vector<IdentityCentroid> centroids;
  /// members[i] belongs to centroids[i], in dataset order.
  std::vector<std::vector<IndexMember>> members;
  std::string model_tag;

  std::size_t num_identities() const noexcept { return centroids.size(); }
  std::size_t num_members() const noexcept;
  std::size_t dim() const noexcept { return centroids.empty() ? 0 : static_cast<std::size_t>(centroids[0].centroid.size()); }
  void validate() const;
};

enum class ConfidenceMode { identity, sample };

struct QueryResult {
  std::uint32_t predicted_identity = 0;
  std::uint64_t nearest_sample_id = 0;
  /// Squared distance to the predicted identity's centroid. The flat scan
  /// has no centroid stage and reports the sample distance here.
  double identity_distance = 0.0;
  double sample_distance = 0.0;
  double confidence = 0.0;
  std::size_t distance_ops = 0;
};

/// Throws EmptyIndexError for an empty dataset.
RetrievalIndex build_index(const LabeledDataset& dataset, const Model& model, std::string model_tag = {});
/// embeddings[i] belongs to dataset.samples[i].
RetrievalIndex build_index(const LabeledDataset& dataset, std::span<const Vector> embeddings,
                           std::string model_tag = {});

QueryResult retrieve_flat(const RetrievalIndex& index, const Vector& query);
QueryResult retrieve_hierarchical(const RetrievalIndex& index, const Vector& query,
                                  ConfidenceMode mode = ConfidenceMode::identity);

/// 1 - d/4 on the identity distance (default) or the sample distance.
double confidence(const QueryResult& result, ConfidenceMode mode = ConfidenceMode::identity);

/// Elementwise average of two indices built over the same samples. Throws
/// IndexMismatchError otherwise.
RetrievalIndex fused_index(const RetrievalIndex& a, const RetrievalIndex& b);

struct ScoredResult {
  double confidence = 0.0;
  bool correct = false;
};

struct CurvePoint {
  double threshold = 0.0;
  double precision = 1.0;
  double coverage = 0.0;
  std::size_t answered = 0;
  std::size_t correct = 0;
  bool undefined = false;  ///< nothing answered; precision reported as 1
};

struct PrecisionCoverageCurve {
  std::vector<CurvePoint> points;
  std::size_t total = 0;
};

/// A result is answered when confidence >= threshold. Thresholds must be
/// ascending. Throws ConfigError for an empty result set.
PrecisionCoverageCurve precision_coverage(std::span<const ScoredResult> results, std::span<const double> thresholds);

/// Distinct confidences in ascending order, then one value above the maximum
/// so the curve ends at zero coverage. A nonzero max_points keeps that many
/// evenly spaced distinct values (always including the smallest).
std::vector<double> threshold_grid(std::span<const ScoredResult> results, std::size_t max_points = 0);

/// Largest coverage among points with precision >= p, or 0.
double coverage_at_precision(const PrecisionCoverageCurve& curve, double p);

/// Header `threshold,precision,coverage,M,correct`.
std::string curve_to_csv(const PrecisionCoverageCurve& curve);

std::string query_results_to_json(std::span<const QueryResult> results, std::span<const std::uint64_t> query_ids);

inline constexpr std::uint32_t kIndexFormatVersion = 1;

/// TFIX: "TFIX", u32 version, tag, u32 dim, u64 identity count, centroid
/// block (u32 identity, u64 member_count, f64 x dim), member block (per
/// identity u64 count, then u64 sample_id and f64 x dim per member).
void write_index(std::ostream& os, const RetrievalIndex& index);
RetrievalIndex read_index(std::istream& is);
void save_index(const std::filesystem::path& path, const RetrievalIndex& index);
RetrievalIndex load_index(const std::filesystem::path& path);

}  // namespace tsub

// SPDX-License-Identifier: Apache-2.0
#include "tsub/retrieval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"

namespace tsub {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::size_t RetrievalIndex::num_members() const noexcept {
  std::size_t n = 0;
  for (const auto& m : members) n += m.size();
  return n;
}

void RetrievalIndex::validate() const {
  if (centroids.empty()) throw EmptyIndexError("index has no identities");
  if (members.size() != centroids.size()) throw FormatError("index: centroid and member lists differ in length");
  const auto d = static_cast<Eigen::Index>(dim());
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    if (i > 0 && centroids[i].identity <= centroids[i - 1].identity) throw FormatError("index: identities not ascending");
    if (members[i].empty() || members[i].size() != centroids[i].member_count) {
      throw FormatError("index: member count mismatch");
    }
    if (centroids[i].centroid.size() != d) throw DimensionError("index: centroid width mismatch");
    for (const auto& m : members[i]) {
      if (m.embedding.size() != d) throw DimensionError("index: member width mismatch");
    }
  }
}

RetrievalIndex build_index(const LabeledDataset& dataset, std::span<const Vector> embeddings, std::string model_tag) {
  if (dataset.empty()) throw EmptyIndexError("cannot index an empty dataset");
  if (embeddings.size() != dataset.size()) throw DimensionError("one embedding per sample required");
  RetrievalIndex index;
  index.model_tag = std::move(model_tag);
  const auto groups = dataset.members_by_identity();
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].empty()) continue;
    std::vector<Vector> vs;
    std::vector<IndexMember> ms;
    for (auto pos : groups[c]) {
      vs.push_back(embeddings[pos]);
      ms.push_back({dataset.samples[pos].sample_id, embeddings[pos]});
    }
    index.centroids.push_back(identity_centroid(static_cast<std::uint32_t>(c), std::span<const Vector>(vs)));
    index.members.push_back(std::move(ms));
  }
  index.validate();
  return index;
}

RetrievalIndex build_index(const LabeledDataset& dataset, const Model& model, std::string model_tag) {
  if (dataset.empty()) throw EmptyIndexError("cannot index an empty dataset");
  std::vector<Vector> emb;
  emb.reserve(dataset.size());
  for (const auto& s : dataset.samples) emb.push_back(embed(model, s.features).values());
  return build_index(dataset, std::span<const Vector>(emb), std::move(model_tag));
}

double confidence(const QueryResult& result, ConfidenceMode mode) {
  const double d = mode == ConfidenceMode::identity ? result.identity_distance : result.sample_distance;
  return 1.0 - d / 4.0;
}

QueryResult retrieve_flat(const RetrievalIndex& index, const Vector& query) {
  if (index.centroids.empty()) throw EmptyIndexError("query against an empty index");
  QueryResult r;
  bool first = true;
  for (std::size_t i = 0; i < index.members.size(); ++i) {
    for (const auto& m : index.members[i]) {
      const double d = squared_distance(query, m.embedding);
      ++r.distance_ops;
      if (first || d < r.sample_distance || (d == r.sample_distance && m.sample_id < r.nearest_sample_id)) {
        first = false;
        r.sample_distance = d;
        r.nearest_sample_id = m.sample_id;
        r.predicted_identity = index.centroids[i].identity;
      }
    }
  }
  r.identity_distance = r.sample_distance;
  r.confidence = confidence(r, ConfidenceMode::sample);
  return r;
}

QueryResult retrieve_hierarchical(const RetrievalIndex& index, const Vector& query, ConfidenceMode mode) {
  if (index.centroids.empty()) throw EmptyIndexError("query against an empty index");
  QueryResult r;
  std::size_t best = 0;
  for (std::size_t i = 0; i < index.centroids.size(); ++i) {
    const double d = squared_distance(query, index.centroids[i].centroid);
    ++r.distance_ops;
    if (i == 0 || d < r.identity_distance) {
      r.identity_distance = d;
      best = i;
    }
  }
  r.predicted_identity = index.centroids[best].identity;
  bool first = true;
  for (const auto& m : index.members[best]) {
    const double d = squared_distance(query, m.embedding);
    ++r.distance_ops;
    if (first || d < r.sample_distance || (d == r.sample_distance && m.sample_id < r.nearest_sample_id)) {
      first = false;
      r.sample_distance = d;
      r.nearest_sample_id = m.sample_id;
    }
  }
  r.confidence = confidence(r, mode);
  return r;
}

RetrievalIndex fused_index(const RetrievalIndex& a, const RetrievalIndex& b) {
  if (a.centroids.size() != b.centroids.size() || a.dim() != b.dim()) {
    throw IndexMismatchError("indices differ in identities or width");
  }
  RetrievalIndex out;
  out.model_tag = "fused(" + a.model_tag + "," + b.model_tag + ")";
  for (std::size_t i = 0; i < a.centroids.size(); ++i) {
    const auto& ca = a.centroids[i];
    const auto& cb = b.centroids[i];
    if (ca.identity != cb.identity || a.members[i].size() != b.members[i].size()) {
      throw IndexMismatchError("indices differ in identity membership");
    }
    std::vector<IndexMember> ms;
    for (std::size_t j = 0; j < a.members[i].size(); ++j) {
      const auto& ma = a.members[i][j];
      const auto& mb = b.members[i][j];
      if (ma.sample_id != mb.sample_id) throw IndexMismatchError("indices differ in sample ids");
      ms.push_back({ma.sample_id, fuse_embeddings(ma.embedding, mb.embedding)});
    }
    out.centroids.push_back({ca.identity, fuse_embeddings(ca.centroid, cb.centroid), ca.member_count});
    out.members.push_back(std::move(ms));
  }
  return out;
}

PrecisionCoverageCurve precision_coverage(std::span<const ScoredResult> results, std::span<const double> thresholds) {
  if (results.empty()) throw ConfigError("precision_coverage: empty evaluation set");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw ConfigError("thresholds must be ascending");
  std::vector<ScoredResult> sorted(results.begin(), results.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& x, const auto& y) { return x.confidence > y.confidence; });
  PrecisionCoverageCurve curve;
  curve.total = results.size();
  // Walk thresholds from the tightest down so the answered prefix only grows.
  std::vector<CurvePoint> rev;
  std::size_t answered = 0;
  std::size_t correct = 0;
  for (auto t = thresholds.rbegin(); t != thresholds.rend(); ++t) {
    while (answered < sorted.size() && sorted[answered].confidence >= *t) correct += sorted[answered++].correct;
    CurvePoint p;
    p.threshold = *t;
    p.answered = answered;
    p.correct = correct;
    p.coverage = static_cast<double>(answered) / static_cast<double>(curve.total);
    p.undefined = answered == 0;
    p.precision = p.undefined ? 1.0 : static_cast<double>(correct) / static_cast<double>(answered);
    rev.push_back(p);
  }
  curve.points.assign(rev.rbegin(), rev.rend());
  return curve;
}

std::vector<double> threshold_grid(std::span<const ScoredResult> results, std::size_t max_points) {
  std::vector<double> t;
  for (const auto& r : results) t.push_back(r.confidence);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  const double top = t.empty() ? 1.0 : t.back() + 1.0;
  if (max_points > 0 && t.size() > max_points) {
    std::vector<double> picked;
    for (std::size_t i = 0; i < max_points; ++i) picked.push_back(t[i * t.size() / max_points]);
    t = std::move(picked);
  }
  t.push_back(top);
  return t;
}

double coverage_at_precision(const PrecisionCoverageCurve& curve, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("target precision must lie in (0, 1]");
  double best = 0.0;
  for (const auto& pt : curve.points) {
    if (pt.precision >= p) best = std::max(best, pt.coverage);
  }
  return best;
}

std::string curve_to_csv(const PrecisionCoverageCurve& curve) {
  std::string out = "threshold,precision,coverage,M,correct\n";
  for (const auto& p : curve.points) {
    out += num(p.threshold) + ',' + num(p.precision) + ',' + num(p.coverage) + ',' + std::to_string(p.answered) + ',' +
           std::to_string(p.correct) + '\n';
  }
  return out;
}

std::string query_results_to_json(std::span<const QueryResult> results, std::span<const std::uint64_t> query_ids) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    nlohmann::ordered_json j;
    if (i < query_ids.size()) j["query_id"] = query_ids[i];
    j["predicted_identity"] = r.predicted_identity;
    j["nearest_sample_id"] = r.nearest_sample_id;
    j["identity_distance"] = r.identity_distance;
    j["sample_distance"] = r.sample_distance;
    j["confidence"] = r.confidence;
    j["distance_ops"] = r.distance_ops;
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

void write_index(std::ostream& os, const RetrievalIndex& index) {
  index.validate();
  io::write_magic(os, "TFIX");
  io::write_le<std::uint32_t>(os, kIndexFormatVersion);
  io::write_string(os, index.model_tag);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(index.dim()));
  io::write_le<std::uint64_t>(os, index.centroids.size());
  for (const auto& c : index.centroids) {
    io::write_le<std::uint32_t>(os, c.identity);
    io::write_le<std::uint64_t>(os, c.member_count);
    for (Eigen::Index k = 0; k < c.centroid.size(); ++k) io::write_le<double>(os, c.centroid[k]);
  }
  for (const auto& ms : index.members) {
    io::write_le<std::uint64_t>(os, ms.size());
    for (const auto& m : ms) {
      io::write_le<std::uint64_t>(os, m.sample_id);
      for (Eigen::Index k = 0; k < m.embedding.size(); ++k) io::write_le<double>(os, m.embedding[k]);
    }
  }
  if (!os) throw FormatError("write_index: stream failure");
}

RetrievalIndex read_index(std::istream& is) {
  io::expect_magic(is, "TFIX");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kIndexFormatVersion) throw FormatError("unsupported TFIX version " + std::to_string(version));
  RetrievalIndex index;
  index.model_tag = io::read_string(is);
  const auto d = io::read_le<std::uint32_t>(is);
  const auto n = io::read_le<std::uint64_t>(is);
  if (d == 0 || n == 0) throw FormatError("TFIX: empty index");
  auto read_vec = [&] {
    Vector v(d);
    for (std::uint32_t k = 0; k < d; ++k) v[k] = io::read_le<double>(is);
    return v;
  };
  for (std::uint64_t i = 0; i < n; ++i) {
    IdentityCentroid c;
    c.identity = io::read_le<std::uint32_t>(is);
    c.member_count = io::read_le<std::uint64_t>(is);
    c.centroid = read_vec();
    index.centroids.push_back(std::move(c));
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto count = io::read_le<std::uint64_t>(is);
    std::vector<IndexMember> ms;
    for (std::uint64_t j = 0; j < count; ++j) {
      const auto id = io::read_le<std::uint64_t>(is);
      ms.push_back({id, read_vec()});
    }
    index.members.push_back(std::move(ms));
  }
  index.validate();
  return index;
}

void save_index(const std::filesystem::path& path, const RetrievalIndex& index) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_index(os, index);
}

RetrievalIndex load_index(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_index(is);
}

}  // namespace tsub

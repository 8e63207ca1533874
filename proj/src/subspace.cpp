// SPDX-License-Identifier: Apache-2.0
#include "tsub/subspace.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace tsub {

std::vector<std::vector<std::uint32_t>> SubspacePartition::members() const {
  std::vector<std::vector<std::uint32_t>> out(M);
  for (std::uint32_t id = 0; id < assignment.size(); ++id) out.at(assignment[id]).push_back(id);
  return out;
}

void SubspacePartition::validate() const {
  if (M == 0) throw ConfigError("partition: M must be positive");
  std::vector<std::size_t> counted(M, 0);
  for (auto s : assignment) {
    if (s >= M) throw ConfigError("partition: subspace index out of range");
    ++counted[s];
  }
  if (counted != sizes) throw ConfigError("partition: sizes do not match assignment");
  for (auto c : counted) {
    if (c == 0) throw ConfigError("partition: empty subspace");
  }
}

std::vector<IdentityCentroid> build_identity_centroids(const LabeledDataset& dataset, const Model& model,
                                                       bool renormalize) {
  const auto groups = dataset.members_by_identity();
  std::vector<IdentityCentroid> out;
  out.reserve(groups.size());
  for (std::uint32_t id = 0; id < groups.size(); ++id) {
    std::vector<Embedding> emb;
    emb.reserve(groups[id].size());
    for (auto pos : groups[id]) emb.push_back(embed(model, dataset.samples[pos].features));
    auto c = identity_centroid(id, std::span<const Embedding>(emb));
    if (renormalize) c.centroid = renormalized(c.centroid);
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

std::size_t nearest_center(const std::vector<Vector>& centers, const Vector& p) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < centers.size(); ++j) {
    const double d = (centers[j] - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

std::vector<Vector> kmeanspp(std::span<const Vector> points, std::size_t M, std::mt19937_64& rng) {
  const std::size_t n = points.size();
  std::vector<Vector> centers;
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  const std::size_t f = first(rng);
  centers.push_back(points[f]);
  chosen[f] = true;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (points[i] - centers[0]).squaredNorm();
  while (centers.size() < M) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
    std::size_t pick = n;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      const double r = u(rng);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i] || d2[i] <= 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > r) break;
      }
    }
    if (pick == n) {
      // All remaining points coincide with a center; take the first unused.
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
    }
    chosen[pick] = true;
    centers.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], (points[i] - centers.back()).squaredNorm());
  }
  return centers;
}

void repair_empty(std::span<const Vector> points, std::vector<std::uint32_t>& assign, std::vector<Vector>& centers) {
  const std::size_t M = centers.size();
  for (;;) {
    std::vector<std::size_t> sizes(M, 0);
    for (auto a : assign) ++sizes[a];
    const auto empty = std::find(sizes.begin(), sizes.end(), 0);
    if (empty == sizes.end()) return;
    const auto largest = static_cast<std::uint32_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    std::size_t far = points.size();
    double far_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (assign[i] != largest) continue;
      const double d = (points[i] - centers[largest]).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    const auto target = static_cast<std::uint32_t>(empty - sizes.begin());
    assign[far] = target;
    centers[target] = points[far];
  }
}

std::vector<Vector> cluster_means(std::span<const Vector> points, const std::vector<std::uint32_t>& assign,
                                  std::size_t M) {
  const auto d = points.front().size();
  std::vector<Vector> sums(M, Vector::Zero(d));
  std::vector<std::size_t> counts(M, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    sums[assign[i]] += points[i];
    ++counts[assign[i]];
  }
  for (std::size_t j = 0; j < M; ++j) {
    if (counts[j] > 0) sums[j] /= static_cast<double>(counts[j]);
  }
  return sums;
}

double objective_of(std::span<const Vector> points, const std::vector<std::uint32_t>& assign,
                    const std::vector<Vector>& centers) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) total += (points[i] - centers[assign[i]]).squaredNorm();
  return total;
}

}  // namespace

KMeansResult kmeans(std::span<const Vector> points, std::size_t M, std::size_t max_iter, std::uint64_t seed) {
  if (M == 0) throw ConfigError("kmeans: M must be positive");
  if (M > points.size()) {
    throw ConfigError("kmeans: M=" + std::to_string(M) + " exceeds the number of points " +
                      std::to_string(points.size()));
  }
  if (max_iter == 0) throw ConfigError("kmeans: max_iter must be positive");
  std::mt19937_64 rng(seed);
  std::vector<Vector> centers = kmeanspp(points, M, rng);

  auto assign_all = [&](const std::vector<Vector>& cs) {
    std::vector<std::uint32_t> a(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) a[i] = static_cast<std::uint32_t>(nearest_center(cs, points[i]));
    return a;
  };

  KMeansResult result;
  result.trace.seed = seed;
  std::vector<std::uint32_t> assign = assign_all(centers);
  repair_empty(points, assign, centers);
  for (std::size_t it = 0; it < max_iter; ++it) {
    centers = cluster_means(points, assign, M);
    result.trace.objective.push_back(objective_of(points, assign, centers));
    result.trace.iterations = it + 1;
    auto next = assign_all(centers);
    repair_empty(points, next, centers);
    if (next == assign) break;
    assign = std::move(next);
  }

  auto& part = result.partition;
  part.M = M;
  part.seed = seed;
  part.assignment = std::move(assign);
  part.cluster_centers = cluster_means(points, part.assignment, M);
  part.sizes.assign(M, 0);
  for (auto a : part.assignment) ++part.sizes[a];
  part.objective_trace = result.trace.objective;
  return result;
}

KMeansResult kmeans(std::span<const IdentityCentroid> centroids, std::size_t M, std::size_t max_iter,
                    std::uint64_t seed) {
  std::vector<Vector> points;
  points.reserve(centroids.size());
  for (const auto& c : centroids) points.push_back(c.centroid);
  return kmeans(std::span<const Vector>(points), M, max_iter, seed);
}

double partition_objective(const SubspacePartition& partition, std::span<const Vector> points) {
  if (points.size() != partition.assignment.size()) throw DimensionError("partition_objective: size mismatch");
  return objective_of(points, partition.assignment, cluster_means(points, partition.assignment, partition.M));
}

SubspacePartition random_partition(std::size_t num_identities, std::size_t M, std::uint64_t seed) {
  if (M == 0 || M > num_identities) throw ConfigError("random_partition: need 1 <= M <= C");
  std::vector<std::uint32_t> order(num_identities);
  std::iota(order.begin(), order.end(), 0u);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SubspacePartition p;
  p.M = M;
  p.seed = seed;
  p.assignment.assign(num_identities, 0);
  p.sizes.assign(M, 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    p.assignment[order[i]] = static_cast<std::uint32_t>(i % M);
    ++p.sizes[i % M];
  }
  return p;
}

void assign_centers(SubspacePartition& partition, std::span<const Vector> points) {
  if (points.size() != partition.assignment.size()) throw DimensionError("assign_centers: size mismatch");
  partition.cluster_centers = cluster_means(points, partition.assignment, partition.M);
}

std::vector<std::size_t> subspace_schedule(const SubspacePartition& partition, std::size_t total_batches) {
  partition.validate();
  const std::size_t M = partition.M;
  const std::size_t C = partition.num_identities();
  std::vector<std::size_t> counts(M, 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t given = 0;
  for (std::size_t m = 0; m < M; ++m) {
    const double exact = static_cast<double>(total_batches) * static_cast<double>(partition.sizes[m]) /
                         static_cast<double>(C);
    counts[m] = static_cast<std::size_t>(exact);
    given += counts[m];
    remainders.emplace_back(exact - static_cast<double>(counts[m]), m);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; given < total_batches; ++i, ++given) ++counts[remainders[i % M].second];

  struct Slot {
    double key;
    std::size_t subspace;
  };
  std::vector<Slot> slots;
  slots.reserve(total_batches);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t j = 0; j < counts[m]; ++j) {
      slots.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(counts[m]), m});
    }
  }
  std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
    return a.key != b.key ? a.key < b.key : a.subspace < b.subspace;
  });
  std::vector<std::size_t> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.push_back(s.subspace);
  return out;
}

KMeansResult refresh_partition(const LabeledDataset& dataset, const Model& model, std::size_t M,
                               std::size_t max_iter, std::uint64_t seed, bool renormalize) {
  const auto centroids = build_identity_centroids(dataset, model, renormalize);
  return kmeans(std::span<const IdentityCentroid>(centroids), M, max_iter, seed);
}

std::string partition_to_json(const SubspacePartition& p) {
  nlohmann::ordered_json j;
  j["M"] = p.M;
  j["seed"] = p.seed;
  j["assignment"] = p.assignment;
  j["sizes"] = p.sizes;
  j["objective_trace"] = p.objective_trace;
  auto centers = nlohmann::ordered_json::array();
  for (const auto& c : p.cluster_centers) centers.push_back(std::vector<double>(c.data(), c.data() + c.size()));
  j["cluster_centers"] = std::move(centers);
  return j.dump(2);
}

SubspacePartition partition_from_json(const std::string& text) {
  SubspacePartition p;
  try {
    const auto j = nlohmann::json::parse(text);
    p.M = j.at("M").get<std::size_t>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.assignment = j.at("assignment").get<std::vector<std::uint32_t>>();
    p.sizes = j.at("sizes").get<std::vector<std::size_t>>();
    p.objective_trace = j.value("objective_trace", std::vector<double>{});
    for (const auto& c : j.value("cluster_centers", nlohmann::json::array())) {
      const auto v = c.get<std::vector<double>>();
      p.cluster_centers.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("partition json: ") + e.what());
  }
  p.validate();
  return p;
}

void save_partition(const std::filesystem::path& path, const SubspacePartition& partition) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << partition_to_json(partition) << '\n';
}

SubspacePartition load_partition(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return partition_from_json(ss.str());
}

}  // namespace tsub

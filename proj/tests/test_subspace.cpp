#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "test_util.hpp"
#include "tsub/subspace.hpp"

using namespace tsub;
using tsub::testing::vec;

namespace {

double brute_force_best_2_partition(const std::vector<Vector>& pts) {
  const std::size_t n = pts.size();
  double best = std::numeric_limits<double>::infinity();
  // point 0 fixed in group A; every non-empty group B
  for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {
    Vector ma = Vector::Zero(pts[0].size()), mb = ma;
    std::size_t na = 0, nb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_b = i > 0 && ((mask >> (i - 1)) & 1u);
      (in_b ? mb : ma) += pts[i];
      ++(in_b ? nb : na);
    }
    ma /= static_cast<double>(na);
    mb /= static_cast<double>(nb);
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_b = i > 0 && ((mask >> (i - 1)) & 1u);
      cost += (pts[i] - (in_b ? mb : ma)).squaredNorm();
    }
    best = std::min(best, cost);
  }
  return best;
}

}  // namespace

TEST_CASE("build_identity_centroids") {
  LabeledDataset ds;
  ds.num_identities = 3;
  ds.d_in = 3;
  ds.samples = {{0, 0, vec({1, 0, 0})}, {1, 1, vec({0, 2, 0})}, {2, 1, vec({0, 0, 3})},
                {3, 2, vec({1, 1, 0})}, {4, 2, vec({0, 1, 1})}, {5, 2, vec({1, 0, 1})}};
  const Model m = Model::identity_linear(3);
  const auto cs = build_identity_centroids(ds, m);
  REQUIRE(cs.size() == 3);
  CHECK(cs[0].centroid == vec({1, 0, 0}));
  CHECK(cs[0].member_count == 1);
  for (const auto& c : cs) {
    Vector sum = Vector::Zero(3);
    std::size_t count = 0;
    for (const auto& s : ds.samples) {
      if (s.identity != c.identity) continue;
      sum += s.features / s.features.norm();
      ++count;
    }
    CHECK(c.member_count == count);
    CHECK((c.centroid - sum / static_cast<double>(count)).cwiseAbs().maxCoeff() <= 1e-15);
  }

  auto big = tsub::testing::blob_dataset(5, 40, 6, 1.0, 0.5, 2);
  const Model r = Model::random({6, {8}, 4, 0}, 1);
  const auto before = build_identity_centroids(big, r);
  std::mt19937_64 rng(3);
  std::shuffle(big.samples.begin(), big.samples.end(), rng);
  const auto after = build_identity_centroids(big, r);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK((before[i].centroid - after[i].centroid).cwiseAbs().maxCoeff() <= 1e-9);
  }

  ds.num_identities = 4;  // identity 3 has no samples
  CHECK_THROWS_AS(build_identity_centroids(ds, m), EmptyIdentityError);
}

TEST_CASE("kmeans degenerate cases") {
  std::mt19937_64 rng(8);
  std::vector<Vector> pts;
  for (int i = 0; i < 30; ++i) pts.push_back(tsub::testing::random_vector(rng, 4));

  const auto one = kmeans(pts, 1, 100, 5);
  Vector mean = Vector::Zero(4);
  for (const auto& p : pts) mean += p;
  mean /= 30.0;
  double variance = 0.0;
  for (const auto& p : pts) variance += (p - mean).squaredNorm();
  CHECK(one.partition.sizes == std::vector<std::size_t>{30});
  CHECK(one.trace.objective.back() == doctest::Approx(variance).epsilon(1e-12));

  const auto all = kmeans(pts, 30, 100, 5);
  CHECK(all.trace.objective.back() == 0.0);
  CHECK(std::all_of(all.partition.sizes.begin(), all.partition.sizes.end(), [](auto s) { return s == 1; }));

  CHECK_THROWS_AS(kmeans(pts, 31, 100, 5), ConfigError);
  CHECK_THROWS_AS(kmeans(pts, 0, 100, 5), ConfigError);
}

TEST_CASE("kmeans recovers two separated blobs and the brute-force optimum") {
  std::mt19937_64 rng(42);
  std::vector<Vector> pts;
  const Vector ca = vec({5, 5, 0}), cb = vec({-5, 0, 5});
  for (int i = 0; i < 12; ++i) pts.push_back((i < 6 ? ca : cb) + tsub::testing::random_vector(rng, 3, 0.5));
  const auto res = kmeans(pts, 2, 100, 1);
  for (int i = 1; i < 6; ++i) CHECK(res.partition.assignment[i] == res.partition.assignment[0]);
  for (int i = 7; i < 12; ++i) CHECK(res.partition.assignment[i] == res.partition.assignment[6]);
  CHECK(res.partition.assignment[0] != res.partition.assignment[6]);
  CHECK(res.trace.objective.back() == doctest::Approx(brute_force_best_2_partition(pts)).epsilon(1e-12));
}

TEST_CASE("kmeans objective never increases and is seeded") {
  for (int inst = 0; inst < 50; ++inst) {
    std::mt19937_64 rng(1000 + inst);
    const std::size_t n = 20 + inst * 3;
    std::vector<Vector> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back(tsub::testing::random_vector(rng, 5));
    const std::size_t M = 2 + inst % 9;
    const auto res = kmeans(pts, M, 100, inst);
    for (std::size_t i = 1; i < res.trace.objective.size(); ++i) {
      CHECK(res.trace.objective[i] <= res.trace.objective[i - 1] + 1e-9);
    }
    res.partition.validate();
    const auto again = kmeans(pts, M, 100, inst);
    CHECK(again.partition.assignment == res.partition.assignment);
    CHECK(again.trace.objective == res.trace.objective);
  }
}

TEST_CASE("empty clusters are repaired") {
  // five copies of one point and one outlier: kmeans++ can only pick two
  // distinct locations, so M=3 forces the repair path.
  std::vector<Vector> pts(5, vec({0, 0}));
  pts.push_back(vec({10, 0}));
  const auto res = kmeans(pts, 3, 100, 0);
  res.partition.validate();
  CHECK(std::accumulate(res.partition.sizes.begin(), res.partition.sizes.end(), std::size_t{0}) == 6);
}

TEST_CASE("random_partition") {
  auto p = random_partition(10, 2, 1);
  CHECK(p.sizes == std::vector<std::size_t>{5, 5});
  p = random_partition(11, 2, 1);
  CHECK(p.sizes == std::vector<std::size_t>{6, 5});
  p.validate();
  CHECK(random_partition(50, 7, 3).assignment == random_partition(50, 7, 3).assignment);
  CHECK(random_partition(50, 7, 3).assignment != random_partition(50, 7, 4).assignment);
  CHECK_THROWS_AS(random_partition(3, 4, 0), ConfigError);
}

TEST_CASE("subspace_schedule") {
  auto equal = random_partition(9, 3, 0);
  const auto s = subspace_schedule(equal, 6);
  CHECK(s == std::vector<std::size_t>{0, 1, 2, 0, 1, 2});

  auto single = random_partition(5, 1, 0);
  const auto c = subspace_schedule(single, 4);
  CHECK(std::all_of(c.begin(), c.end(), [](auto m) { return m == 0; }));

  SubspacePartition uneven;
  uneven.M = 2;
  uneven.assignment.assign(400, 1);
  std::fill(uneven.assignment.begin(), uneven.assignment.begin() + 100, 0);
  uneven.sizes = {100, 300};
  const auto u = subspace_schedule(uneven, 40);
  CHECK(std::count(u.begin(), u.end(), 0) == 10);
  CHECK(std::count(u.begin(), u.end(), 1) == 30);
  // interleaved rather than blocked
  CHECK(u[0] == 1);
  CHECK(std::find(u.begin(), u.end(), 0) - u.begin() < 4);
}

TEST_CASE("refresh_partition") {
  const auto ds = tsub::testing::blob_dataset(40, 5, 6, 3.0, 0.2, 9);
  const Model a = Model::random({6, {8}, 4, 0}, 1);
  const Model b = Model::random({6, {8}, 4, 0}, 2);
  const auto first = refresh_partition(ds, a, 4, 100, 7);
  CHECK(refresh_partition(ds, a, 4, 100, 7).partition.assignment == first.partition.assignment);
  CHECK(refresh_partition(ds, a, 6, 100, 7).partition.M == 6);

  const auto fresh = refresh_partition(ds, b, 4, 100, 7);
  const auto centroids_b = build_identity_centroids(ds, b);
  std::vector<Vector> pts;
  for (const auto& c : centroids_b) pts.push_back(c.centroid);
  CHECK(partition_objective(fresh.partition, pts) <= partition_objective(first.partition, pts));
}

TEST_CASE("partition json round trip") {
  std::mt19937_64 rng(4);
  std::vector<Vector> pts;
  for (int i = 0; i < 15; ++i) pts.push_back(tsub::testing::random_vector(rng, 3));
  const auto res = kmeans(pts, 3, 100, 2);
  const auto back = partition_from_json(partition_to_json(res.partition));
  CHECK(back.M == 3);
  CHECK(back.assignment == res.partition.assignment);
  CHECK(back.sizes == res.partition.sizes);
  CHECK(back.objective_trace == res.partition.objective_trace);
  CHECK(back.cluster_centers.size() == 3);
  CHECK_THROWS_AS(partition_from_json("{\"M\": 2}"), FormatError);
}

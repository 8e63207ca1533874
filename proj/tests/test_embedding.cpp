#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "test_util.hpp"
#include "tsub/dataset_io.hpp"
#include "tsub/embedding.hpp"

using namespace tsub;
using tsub::testing::vec;

TEST_CASE("l2_normalize") {
  CHECK(l2_normalize(vec({1, 0, 0, 0})).values() == vec({1, 0, 0, 0}));
  const auto e = l2_normalize(vec({3, 4}));
  CHECK(e[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS_AS(l2_normalize(vec({0, 0})), NormalizationError);
  CHECK_THROWS_AS(Embedding::from_unit(vec({1, 1})), NormalizationError);

  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto v = tsub::testing::random_vector(rng, 16, 10.0);
    const auto u = l2_normalize(v);
    CHECK(std::abs(u.values().norm() - 1.0) <= kUnitNormTolerance);
    CHECK(u.values().dot(v) == doctest::Approx(v.norm()));  // direction preserved
  }
}

TEST_CASE("squared_distance") {
  const auto a = l2_normalize(vec({1, 0}));
  const auto b = l2_normalize(vec({-1, 0}));
  const auto c = l2_normalize(vec({0, 1}));
  CHECK(squared_distance(a, a) == 0.0);
  CHECK(squared_distance(a, b) == 4.0);
  CHECK(squared_distance(a, c) == doctest::Approx(2.0));
  CHECK_THROWS_AS(squared_distance(vec({1, 0}), vec({1, 0, 0})), DimensionError);
}

TEST_CASE("squared distance of unit vectors equals 2 - 2<a,b>") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto a = tsub::testing::random_unit(rng, 16);
    const auto b = tsub::testing::random_unit(rng, 16);
    const double d = squared_distance(a, b);
    CHECK(std::abs(d - (2.0 - 2.0 * a.values().dot(b.values()))) <= 1e-9);
    CHECK(d == squared_distance(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 4.0 + 1e-12);
  }
}

TEST_CASE("identity_centroid") {
  const std::vector<Embedding> one{l2_normalize(vec({1, 0}))};
  auto c = identity_centroid(3, std::span<const Embedding>(one));
  CHECK(c.identity == 3);
  CHECK(c.member_count == 1);
  CHECK(c.centroid == vec({1, 0}));

  const std::vector<Embedding> two{l2_normalize(vec({1, 0})), l2_normalize(vec({0, 1}))};
  c = identity_centroid(0, std::span<const Embedding>(two));
  CHECK(c.member_count == 2);
  CHECK(c.centroid == vec({0.5, 0.5}));  // not renormalized

  CHECK_THROWS_AS(identity_centroid(0, std::span<const Embedding>()), EmptyIdentityError);

  SUBCASE("naive per-coordinate sum oracle") {
    std::mt19937_64 rng(11);
    std::vector<Embedding> five;
    for (int i = 0; i < 5; ++i) five.push_back(tsub::testing::random_unit(rng, 8));
    const auto got = identity_centroid(1, std::span<const Embedding>(five));
    for (Eigen::Index j = 0; j < 8; ++j) {
      double s = 0.0;
      for (const auto& e : five) s += e[j];
      CHECK(std::abs(got.centroid[j] - s / 5.0) <= 1e-15);
    }
  }

  SUBCASE("k copies of e give e") {
    std::mt19937_64 rng(12);
    for (int k = 1; k <= 50; k += 7) {
      const auto e = tsub::testing::random_unit(rng, 16);
      const std::vector<Embedding> copies(static_cast<std::size_t>(k), e);
      const auto got = identity_centroid(0, std::span<const Embedding>(copies));
      CHECK((got.centroid - e.values()).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("fuse_embeddings") {
  const auto x = l2_normalize(vec({1, 0}));
  const auto y = l2_normalize(vec({0, 1}));
  const auto z = l2_normalize(vec({-1, 0}));
  CHECK(fuse_embeddings(x, x) == vec({1, 0}));
  CHECK(fuse_embeddings(x, y) == vec({0.5, 0.5}));
  CHECK(fuse_embeddings(x, z) == vec({0, 0}));
  CHECK(squared_distance(fuse_embeddings(x, z), x.values()) == 1.0);
  CHECK_THROWS_AS(fuse_embeddings(vec({1}), vec({1, 2})), DimensionError);
}

TEST_CASE("nearest_centroid is invariant to list order and breaks ties by identity") {
  std::mt19937_64 rng(5);
  std::vector<IdentityCentroid> cs;
  for (std::uint32_t i = 0; i < 20; ++i) cs.push_back({i, tsub::testing::random_vector(rng, 4), 1});
  cs.push_back({40, cs[3].centroid, 1});  // exact duplicate of identity 3
  for (int trial = 0; trial < 100; ++trial) {
    const Vector q = trial % 4 == 0 ? cs[3].centroid : tsub::testing::random_vector(rng, 4);
    const auto expected = cs[nearest_centroid(cs, q)].identity;
    auto shuffled = cs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(shuffled[nearest_centroid(shuffled, q)].identity == expected);
    if (trial % 4 == 0) CHECK(expected == 3);
  }
}

TEST_CASE("dataset TFDS and CSV formats") {
  auto ds = tsub::testing::blob_dataset(3, 4, 5, 1.0, 0.1, 3);
  round_features_to_float(ds);
  std::stringstream bin;
  write_dataset(bin, ds);
  const std::string bytes = bin.str();
  CHECK(bytes.substr(0, 4) == "TFDS");
  CHECK(bytes.size() == 4 + 4 + 8 + 8 + 4 + ds.size() * (8 + 4 + 5 * 4));
  const auto back = read_dataset(bin);
  REQUIRE(back.size() == ds.size());
  CHECK(back.num_identities == 3);
  CHECK(back.d_in == 5);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.samples[i].sample_id == ds.samples[i].sample_id);
    CHECK(back.samples[i].identity == ds.samples[i].identity);
    CHECK(back.samples[i].features == ds.samples[i].features);
  }

  std::istringstream bad("TFDX....");
  CHECK_THROWS_AS(read_dataset(bad), FormatError);

  std::istringstream csv("sample_id,identity,f0,f1\n7,0,1.5,-2\n9,2,0.25,3e-1\n");
  const auto imported = import_csv(csv);
  CHECK(imported.size() == 2);
  CHECK(imported.num_identities == 3);
  CHECK(imported.d_in == 2);
  CHECK(imported.samples[1].sample_id == 9);
  CHECK(imported.samples[1].features == vec({0.25, 0.3}));

  std::istringstream dup("sample_id,identity,f0\n1,0,1\n1,0,2\n");
  CHECK_THROWS_AS(import_csv(dup), ConfigError);
  std::istringstream ragged("sample_id,identity,f0\n1,0\n");
  CHECK_THROWS_AS(import_csv(ragged), FormatError);
}

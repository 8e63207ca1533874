// SPDX-License-Identifier: Apache-2.0
#include "tsub/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tsub/dataset_io.hpp"

namespace tsub {

void SyntheticSpec::validate() const {
  if (num_identities < 2) throw ConfigError("synthetic: need at least two identities");
  if (num_superclusters == 0 || num_superclusters > num_identities) {
    throw ConfigError("synthetic: need 1 <= superclusters <= identities");
  }
  if (samples_min == 0 || samples_min > samples_max) throw ConfigError("synthetic: bad samples-per-identity range");
  if (d_in == 0) throw ConfigError("synthetic: d_in must be positive");
  if (!(within_identity_sigma > 0.0) || !(identity_spread_sigma > 0.0)) {
    throw ConfigError("synthetic: sigmas must be positive");
  }
  if (label_flip_rate < 0.0 || label_flip_rate >= 1.0) throw ConfigError("synthetic: flip rate must lie in [0, 1)");
  if (noise_mode == NoiseMode::concentrated && !(noisy_identity_fraction > 0.0 && noisy_identity_fraction <= 1.0)) {
    throw ConfigError("synthetic: concentrated noise needs a noisy identity fraction in (0, 1]");
  }
}

std::vector<bool> SyntheticData::noise_flags() const {
  std::vector<bool> flags(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) flags[i] = train.samples[i].identity != true_identity[i];
  return flags;
}

std::size_t SyntheticData::noise_count() const {
  const auto f = noise_flags();
  return static_cast<std::size_t>(std::count(f.begin(), f.end(), true));
}

namespace {

using Rng = std::mt19937_64;

Vector gaussian(Rng& rng, std::size_t d, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  Vector v(static_cast<Eigen::Index>(d));
  for (auto& x : v) x = n(rng);
  return v;
}

std::size_t uniform_below(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

// First k entries become a uniform k-subset of the positions.
std::vector<std::size_t> choose(Rng& rng, std::vector<std::size_t> pool, std::size_t k) {
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_below(rng, pool.size() - i)]);
  pool.resize(k);
  return pool;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t C = spec.num_identities;
  const std::size_t S = spec.num_superclusters;

  std::vector<Vector> super_means;
  for (std::size_t s = 0; s < S; ++s) super_means.push_back(l2_normalize(gaussian(rng, spec.d_in, 1.0)).values());

  SyntheticData out;
  out.supercluster.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    out.supercluster[c] = static_cast<std::uint32_t>(c % S);
    out.identity_means.push_back(super_means[c % S] + gaussian(rng, spec.d_in, spec.identity_spread_sigma));
  }

  for (auto* ds : {&out.train, &out.test}) {
    ds->num_identities = C;
    ds->d_in = spec.d_in;
  }
  std::uint64_t next_id = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t n = spec.samples_min + uniform_below(rng, spec.samples_max - spec.samples_min + 1);
    for (std::size_t i = 0; i < n; ++i) {
      out.train.samples.push_back({next_id++, static_cast<std::uint32_t>(c),
                                   out.identity_means[c] + gaussian(rng, spec.d_in, spec.within_identity_sigma)});
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < spec.test_per_identity; ++i) {
      out.test.samples.push_back({next_id++, static_cast<std::uint32_t>(c),
                                  out.identity_means[c] + gaussian(rng, spec.d_in, spec.within_identity_sigma)});
    }
  }
  out.unseen.num_identities = spec.unseen_identities;
  out.unseen.d_in = spec.d_in;
  for (std::size_t u = 0; u < spec.unseen_identities; ++u) {
    const auto s = static_cast<std::uint32_t>(uniform_below(rng, S));
    out.unseen_supercluster.push_back(s);
    const Vector mean = super_means[s] + gaussian(rng, spec.d_in, spec.identity_spread_sigma);
    for (std::size_t i = 0; i < spec.unseen_samples; ++i) {
      out.unseen.samples.push_back(
          {next_id++, static_cast<std::uint32_t>(u), mean + gaussian(rng, spec.d_in, spec.within_identity_sigma)});
    }
  }

  out.true_identity.reserve(out.train.size());
  for (const auto& s : out.train.samples) out.true_identity.push_back(s.identity);

  const auto N = out.train.size();
  const auto flips = static_cast<std::size_t>(std::llround(spec.label_flip_rate * static_cast<double>(N)));
  if (flips > 0) {
    std::vector<std::size_t> pool;
    if (spec.noise_mode == NoiseMode::uniform) {
      pool.resize(N);
      std::iota(pool.begin(), pool.end(), std::size_t{0});
    } else {
      const auto noisy = static_cast<std::size_t>(
          std::max<long long>(1, std::llround(spec.noisy_identity_fraction * static_cast<double>(C))));
      std::vector<std::size_t> ids(C);
      std::iota(ids.begin(), ids.end(), std::size_t{0});
      auto chosen = choose(rng, ids, noisy);
      std::sort(chosen.begin(), chosen.end());
      std::vector<bool> is_noisy(C, false);
      for (auto c : chosen) is_noisy[c] = true;
      for (std::size_t i = 0; i < N; ++i) {
        if (is_noisy[out.train.samples[i].identity]) pool.push_back(i);
      }
      if (pool.size() < flips) {
        throw ConfigError("synthetic: noisy identities hold fewer samples than the requested flips");
      }
    }
    auto victims = choose(rng, pool, flips);
    std::sort(victims.begin(), victims.end());
    for (auto i : victims) {
      auto& label = out.train.samples[i].identity;
      std::uint32_t next = static_cast<std::uint32_t>(uniform_below(rng, C - 1));
      if (next >= label) ++next;
      label = next;
    }
  }

  round_features_to_float(out.train);
  round_features_to_float(out.test);
  round_features_to_float(out.unseen);
  return out;
}

}  // namespace tsub

// SPDX-License-Identifier: Apache-2.0
#include "tsub/mining.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

namespace tsub {

IdentityGroups::IdentityGroups(const LabeledDataset& dataset)
    : dataset_(&dataset), groups_(dataset.members_by_identity()) {}

std::vector<std::uint32_t> IdentityGroups::eligible(std::span<const std::uint32_t> scope) const {
  std::vector<std::uint32_t> out;
  for (auto id : scope) {
    if (id < groups_.size() && groups_[id].size() >= 2) out.push_back(id);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::uint32_t> IdentityGroups::all_identities() const {
  std::vector<std::uint32_t> ids(groups_.size());
  std::iota(ids.begin(), ids.end(), 0u);
  return ids;
}

namespace {

std::size_t uniform_below(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Partial Fisher-Yates: the first k entries become a uniform k-subset.
void choose_prefix(std::vector<std::uint32_t>& ids, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_below(rng, ids.size() - i);
    std::swap(ids[i], ids[j]);
  }
}

AnchorPositivePair draw_pair(const IdentityGroups& groups, std::uint32_t id, Rng& rng) {
  const auto& m = groups.members(id);
  const std::size_t a = uniform_below(rng, m.size());
  std::size_t p = uniform_below(rng, m.size() - 1);
  if (p >= a) ++p;
  const auto& samples = groups.dataset().samples;
  return {id, m[a], m[p], samples[m[a]].sample_id, samples[m[p]].sample_id};
}

}  // namespace

AnchorPositiveBatch sample_batch(const IdentityGroups& groups, std::span<const std::uint32_t> scope,
                                 std::size_t batch_size, Rng& rng) {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  auto ids = groups.eligible(scope);
  if (ids.size() < batch_size) {
    throw ScopeTooSmallError("scope has " + std::to_string(ids.size()) + " eligible identities, batch needs " +
                             std::to_string(batch_size));
  }
  choose_prefix(ids, batch_size, rng);
  AnchorPositiveBatch batch;
  batch.pairs.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) batch.pairs.push_back(draw_pair(groups, ids[i], rng));
  return batch;
}

std::vector<Triplet> ohnm_filter(std::span<const Triplet> triplets, double margin) {
  std::vector<Triplet> out;
  for (const auto& t : triplets) {
    if (t.d_ap - t.d_an + margin > 0.0) out.push_back(t);
  }
  return out;
}

std::vector<Triplet> batch_ohnm_candidates(const AnchorPositiveBatch& batch,
                                           std::span<const Embedding> member_embeddings,
                                           const MiningConfig& config) {
  const std::size_t members = batch.num_members();
  if (member_embeddings.size() != members) throw DimensionError("batch_ohnm: one embedding per batch member required");
  if (config.top_k == 0) throw ConfigError("top_k must be at least 1");
  const std::size_t pool = members >= 2 ? members - 2 : 0;
  if (config.top_k > pool) {
    throw ConfigError("top_k=" + std::to_string(config.top_k) + " exceeds the candidate pool of " +
                      std::to_string(pool));
  }
  std::vector<Triplet> out;
  out.reserve(batch.pairs.size() * config.top_k);
  struct Candidate {
    double d;
    std::uint64_t sample_id;
    std::size_t member;
  };
  std::vector<Candidate> cands;
  cands.reserve(pool);
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const std::size_t a = 2 * i, p = 2 * i + 1;
    const auto& ea = member_embeddings[a];
    const double d_ap = squared_distance(ea, member_embeddings[p]);
    cands.clear();
    for (std::size_t j = 0; j < members; ++j) {
      if (batch.member_identity(j) == batch.pairs[i].identity) continue;
      const double d = squared_distance(ea, member_embeddings[j]);
      if (config.semi_hard && !(d > d_ap)) continue;
      cands.push_back({d, batch.member_sample_id(j), j});
    }
    const std::size_t k = std::min(config.top_k, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end(),
                      [](const Candidate& x, const Candidate& y) {
                        return x.d != y.d ? x.d < y.d : x.sample_id < y.sample_id;
                      });
    for (std::size_t r = 0; r < k; ++r) {
      Triplet t{a, p, cands[r].member, d_ap, cands[r].d, 0.0};
      t.loss = std::max(0.0, t.d_ap - t.d_an + config.margin);
      out.push_back(t);
    }
  }
  return out;
}

std::vector<Triplet> batch_ohnm_select(const AnchorPositiveBatch& batch,
                                       std::span<const Embedding> member_embeddings,
                                       const MiningConfig& config) {
  const auto candidates = batch_ohnm_candidates(batch, member_embeddings, config);
  return ohnm_filter(candidates, config.margin);
}

AnchorPositiveBatch sample_subspace_batch(const SubspacePartition& partition, std::size_t m,
                                          const IdentityGroups& groups, std::size_t batch_size, Rng& rng) {
  if (m >= partition.M) throw ConfigError("subspace index out of range");
  if (partition.num_identities() != groups.num_identities()) {
    throw DimensionError("partition and dataset disagree on the number of identities");
  }
  const auto members = partition.members();
  try {
    auto batch = sample_batch(groups, members[m], batch_size, rng);
    batch.subspace = m;
    return batch;
  } catch (const ScopeTooSmallError&) {
    // fall through to the top-up policy
  }

  auto own = groups.eligible(members[m]);
  std::vector<std::size_t> order;
  for (std::size_t j = 0; j < partition.M; ++j) {
    if (j != m) order.push_back(j);
  }
  if (partition.cluster_centers.size() == partition.M) {
    const Vector& center = partition.cluster_centers[m];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return (partition.cluster_centers[x] - center).squaredNorm() <
             (partition.cluster_centers[y] - center).squaredNorm();
    });
  }
  std::vector<std::uint32_t> chosen = own;
  std::shuffle(chosen.begin(), chosen.end(), rng);
  for (std::size_t j : order) {
    if (chosen.size() >= batch_size) break;
    auto extra = groups.eligible(members[j]);
    const std::size_t need = std::min(batch_size - chosen.size(), extra.size());
    choose_prefix(extra, need, rng);
    chosen.insert(chosen.end(), extra.begin(), extra.begin() + static_cast<std::ptrdiff_t>(need));
  }
  if (chosen.size() < batch_size) {
    throw ScopeTooSmallError("dataset has fewer than " + std::to_string(batch_size) + " eligible identities");
  }
  AnchorPositiveBatch batch;
  batch.subspace = m;
  batch.fallback_used = true;
  for (auto id : chosen) batch.pairs.push_back(draw_pair(groups, id, rng));
  return batch;
}

std::vector<Embedding> gather_embeddings(const AnchorPositiveBatch& batch,
                                         std::span<const Embedding> dataset_embeddings) {
  std::vector<Embedding> out;
  out.reserve(batch.num_members());
  for (std::size_t j = 0; j < batch.num_members(); ++j) out.push_back(dataset_embeddings[batch.member_position(j)]);
  return out;
}

namespace {

MinedBatch mine(AnchorPositiveBatch batch, std::span<const Embedding> dataset_embeddings, const MiningConfig& config) {
  MinedBatch out;
  const auto emb = gather_embeddings(batch, dataset_embeddings);
  const auto candidates = batch_ohnm_candidates(batch, emb, config);
  out.candidate_count = candidates.size();
  out.triplets = ohnm_filter(candidates, config.margin);
  out.batch = std::move(batch);
  return out;
}

}  // namespace

MinedBatch global_batch_ohnm(const IdentityGroups& groups, std::span<const Embedding> dataset_embeddings,
                             const MiningConfig& config, Rng& rng) {
  const auto all = groups.all_identities();
  return mine(sample_batch(groups, all, config.batch_size, rng), dataset_embeddings, config);
}

MinedBatch subspace_batch_ohnm(const SubspacePartition& partition, std::size_t m, const IdentityGroups& groups,
                               std::span<const Embedding> dataset_embeddings, const MiningConfig& config, Rng& rng) {
  return mine(sample_subspace_batch(partition, m, groups, config.batch_size, rng), dataset_embeddings, config);
}

std::vector<Triplet> sample_random_triplets(const IdentityGroups& groups, std::size_t count, Rng& rng) {
  const auto all = groups.all_identities();
  const auto batch = sample_batch(groups, all, count, rng);
  const std::size_t C = groups.num_identities();
  std::vector<Triplet> out;
  out.reserve(count);
  for (const auto& pair : batch.pairs) {
    std::uint32_t neg_id = 0;
    do {
      neg_id = static_cast<std::uint32_t>(uniform_below(rng, C));
    } while (neg_id == pair.identity || groups.members(neg_id).empty());
    const auto& m = groups.members(neg_id);
    out.push_back({pair.anchor, pair.positive, m[uniform_below(rng, m.size())], 0.0, 0.0, 0.0});
  }
  return out;
}

void score_triplets(std::span<Triplet> triplets, std::span<const Embedding> embeddings, double margin) {
  for (auto& t : triplets) {
    t.d_ap = squared_distance(embeddings[t.anchor], embeddings[t.positive]);
    t.d_an = squared_distance(embeddings[t.anchor], embeddings[t.negative]);
    t.loss = std::max(0.0, t.d_ap - t.d_an + margin);
  }
}

ActiveCount count_active(std::span<const Triplet> triplets) {
  ActiveCount out;
  double sum = 0.0;
  for (const auto& t : triplets) {
    if (t.loss > 0.0) ++out.active;
    sum += t.loss;
  }
  out.mean_loss = triplets.empty() ? 0.0 : sum / static_cast<double>(triplets.size());
  return out;
}

std::string mining_diagnostic_json(std::size_t step, const std::string& scope, const ActiveCount& count,
                                   std::size_t batch_size, std::size_t top_k) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["scope"] = scope;
  j["active_triplets"] = count.active;
  j["mean_loss"] = count.mean_loss;
  j["batch_size"] = batch_size;
  j["top_k"] = top_k;
  return j.dump();
}

}  // namespace tsub

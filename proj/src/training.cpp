// SPDX-License-Identifier: Apache-2.0
#include "tsub/training.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace tsub {

namespace {

void check_schedule(const RateSchedule& s) {
  if (s.rates.empty()) throw ConfigError("learning-rate schedule is empty");
  for (double r : s.rates) {
    if (!(r > 0.0)) throw ConfigError("learning rates must be positive");
  }
}

}  // namespace

void train_softmax(Model& model, const LabeledDataset& dataset, const ClassifierConfig& config,
                   std::vector<EpochReport>* log) {
  if (dataset.empty()) throw ConfigError("train_softmax: empty dataset");
  if (!model.has_head()) throw ConfigError("train_softmax: model has no head");
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  check_schedule(config.schedule);
  Rng rng(config.seed ^ 0x5eedc1a55ULL);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  NagState state = make_nag_state(model, config.schedule.rates.front(), config.momentum);
  const LossOptions options{0.0, 1.0, false, true};
  Model lookahead = model;
  std::size_t epoch = 0;
  for (double rate : config.schedule.rates) {
    state.learning_rate = rate;
    for (std::size_t e = 0; e < config.schedule.epochs_per_rate; ++e, ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        TrainingBatch batch;
        for (std::size_t i = start; i < end; ++i) {
          batch.inputs.push_back(dataset.samples[order[i]].features);
          batch.labels.push_back(dataset.samples[order[i]].identity);
        }
        lookahead.set_parameters(nag_lookahead(model.parameters(), state));
        const auto result = evaluate_batch(lookahead, batch, options);
        nag_step(model, result.gradient, state);
        loss_sum += result.report.softmax_loss;
        ++batches;
      }
      if (log) log->push_back({epoch, rate, loss_sum / static_cast<double>(batches)});
    }
  }
}

Model train_classifier(const LabeledDataset& dataset, const ClassifierConfig& config, std::vector<EpochReport>* log) {
  if (dataset.num_identities < 2) throw ConfigError("classifier needs at least two identities");
  if (dataset.empty()) throw ConfigError("train_classifier: empty dataset");
  Architecture arch = config.architecture;
  arch.d_in = dataset.d_in;
  arch.num_classes = dataset.num_identities;
  Model model = Model::random(arch, config.seed);
  train_softmax(model, dataset, config, log);
  return model;
}

std::uint32_t predict_class(const Model& model, const Vector& embedding) {
  const Vector logits = model.head_weight() * embedding + model.head_bias();
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<std::uint32_t>(best);
}

double classification_accuracy(const Model& model, const LabeledDataset& dataset) {
  if (dataset.empty()) throw ConfigError("classification_accuracy: empty dataset");
  std::size_t correct = 0;
  for (const auto& s : dataset.samples) correct += predict_class(model, embed(model, s.features).values()) == s.identity;
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::string to_string(MiningRegime regime) {
  switch (regime) {
    case MiningRegime::none: return "none";
    case MiningRegime::ohnm: return "ohnm";
    case MiningRegime::batch: return "batch";
    case MiningRegime::subspace: return "subspace";
  }
  return "none";
}

MiningRegime mining_regime_from_string(const std::string& text) {
  if (text == "none") return MiningRegime::none;
  if (text == "ohnm") return MiningRegime::ohnm;
  if (text == "batch") return MiningRegime::batch;
  if (text == "subspace") return MiningRegime::subspace;
  throw ConfigError("unknown mining regime '" + text + "'");
}

void train_triplet(Model& model, const LabeledDataset& dataset, const TripletConfig& config,
                   const SubspacePartition* partition, std::vector<StepReport>* log) {
  if (config.regime == MiningRegime::none) return;
  check_schedule(config.schedule);
  if (config.regime == MiningRegime::subspace) {
    if (!partition) throw ConfigError("subspace mining needs a partition");
    partition->validate();
  }
  if (config.reinit_head && model.has_head()) model.reset_head(model.architecture().num_classes, config.seed + 17);
  const bool joint = config.lambda > 0.0 && model.has_head();
  const LossOptions options{config.mining.margin, config.lambda, true, joint};

  const IdentityGroups groups(dataset);
  const auto all = groups.all_identities();
  const std::size_t B = config.mining.batch_size;
  const std::size_t per_epoch = (dataset.num_identities + B - 1) / B;
  Rng rng(config.seed ^ 0x7219e7ULL);
  NagState state = make_nag_state(model, config.schedule.rates.front(), config.momentum);
  Model lookahead = model;
  std::size_t step = 0;

  for (double rate : config.schedule.rates) {
    state.learning_rate = rate;
    const std::size_t total = per_epoch * config.schedule.epochs_per_rate;
    std::vector<std::size_t> plan;
    if (config.regime == MiningRegime::subspace) plan = subspace_schedule(*partition, total);
    for (std::size_t i = 0; i < total; ++i, ++step) {
      lookahead.set_parameters(nag_lookahead(model.parameters(), state));
      TrainingBatch batch;
      StepReport report;
      report.step = step;
      if (config.regime == MiningRegime::ohnm) {
        report.scope = "all";
        auto triplets = sample_random_triplets(groups, B, rng);
        std::vector<std::size_t> positions;
        for (const auto& t : triplets) positions.insert(positions.end(), {t.anchor, t.positive, t.negative});
        std::vector<Embedding> emb;
        for (auto pos : positions) emb.push_back(embed(lookahead, dataset.samples[pos].features));
        for (std::size_t j = 0; j < positions.size(); ++j) {
          batch.inputs.push_back(dataset.samples[positions[j]].features);
          batch.labels.push_back(dataset.samples[positions[j]].identity);
        }
        std::vector<Triplet> local;
        for (std::size_t j = 0; j < triplets.size(); ++j) local.push_back({3 * j, 3 * j + 1, 3 * j + 2, 0, 0, 0});
        score_triplets(local, emb, config.mining.margin);
        for (const auto& t : ohnm_filter(local, config.mining.margin)) {
          batch.triplets.push_back({t.anchor, t.positive, t.negative});
        }
        report.loss.candidate_triplets = local.size();
      } else {
        AnchorPositiveBatch ap;
        if (config.regime == MiningRegime::subspace) {
          ap = sample_subspace_batch(*partition, plan[i], groups, B, rng);
          report.scope = "subspace:" + std::to_string(plan[i]);
        } else {
          ap = sample_batch(groups, all, B, rng);
          report.scope = "all";
        }
        std::vector<Embedding> emb;
        emb.reserve(ap.num_members());
        for (std::size_t j = 0; j < ap.num_members(); ++j) {
          const auto& s = dataset.samples[ap.member_position(j)];
          emb.push_back(embed(lookahead, s.features));
          batch.inputs.push_back(s.features);
          batch.labels.push_back(s.identity);
        }
        for (const auto& t : batch_ohnm_select(ap, emb, config.mining)) {
          batch.triplets.push_back({t.anchor, t.positive, t.negative});
        }
        report.loss.fallback_used = ap.fallback_used;
        report.loss.candidate_triplets = ap.pairs.size() * config.mining.top_k;
      }
      const auto result = evaluate_batch(lookahead, batch, options);
      nag_step(model, result.gradient, state);
      if (log) {
        const auto mined = report.loss;
        report.loss = result.report;
        report.loss.fallback_used = mined.fallback_used;
        report.loss.candidate_triplets = mined.candidate_triplets;
        log->push_back(std::move(report));
      }
    }
  }
}

}  // namespace tsub

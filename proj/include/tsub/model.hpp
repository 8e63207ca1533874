// SPDX-License-Identifier: Apache-2.0
//
// Small trainable embedding network: d_in -> [tanh hidden]* -> d -> L2 norm,
// with an optional softmax head on the normalized embedding. Gradients are
// derived by hand; grad_check() compares them with central differences.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsub/embedding.hpp"

namespace tsub {

struct Architecture {
  std::size_t d_in = 32;
  std::vector<std::size_t> hidden{64};
  std::size_t d = 16;
  /// Softmax head width C; 0 means no head.
  std::size_t num_classes = 0;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using VectorMap = Eigen::Map<Vector>;
using ConstVectorMap = Eigen::Map<const Vector>;

/// Embedding layers followed by the optional softmax head, all stored in one
/// flat parameter vector so optimizers and gradient checks see a single
/// array. Every mutable accessor stamps a fresh version, which forward
/// traces use to detect staleness.
class Model {
 public:
  Model() = default;
  explicit Model(Architecture arch);

  /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases.
  static Model random(Architecture arch, std::uint64_t seed);
  /// Linear d -> d identity map without a head.
  static Model identity_linear(std::size_t d);

  const Architecture& architecture() const noexcept { return arch_; }
  std::size_t num_layers() const noexcept { return arch_.hidden.size() + 1; }
  std::size_t num_parameters() const noexcept { return static_cast<std::size_t>(values_.size()); }
  /// Parameters belonging to the embedding layers (the head follows them).
  std::size_t num_embedding_parameters() const noexcept { return head_offset_; }
  bool has_head() const noexcept { return arch_.num_classes > 0; }

  ConstMatrixMap weight(std::size_t layer) const;
  ConstVectorMap bias(std::size_t layer) const;
  MatrixMap weight(std::size_t layer);
  VectorMap bias(std::size_t layer);

  ConstMatrixMap head_weight() const;
  ConstVectorMap head_bias() const;
  MatrixMap head_weight();
  VectorMap head_bias();

  const Vector& parameters() const noexcept { return values_; }
  Vector& mutable_parameters();
  void set_parameters(const Vector& values);

  /// Replaces (or adds) the softmax head with a freshly initialized one.
  void reset_head(std::size_t num_classes, std::uint64_t seed);
  void drop_head();

  std::uint64_t version() const noexcept { return version_; }

 private:
  struct Block {
    Eigen::Index rows = 0, cols = 0, weight_offset = 0, bias_offset = 0;
  };
  void layout();
  void touch();

  Architecture arch_;
  std::vector<Block> blocks_;
  std::size_t head_offset_ = 0;
  Vector values_;
  std::uint64_t version_ = 0;
};

/// Everything needed to backpropagate one sample through the network.
struct ForwardTrace {
  std::uint64_t model_version = 0;
  /// activations[0] is the input; activations[i + 1] is the output of layer
  /// i (tanh for hidden layers, the pre-normalization vector for the last).
  std::vector<Vector> activations;
  double norm = 0.0;
  Embedding embedding;
};

ForwardTrace forward(const Model& model, const FeatureVector& x);
Embedding embed(const Model& model, const FeatureVector& x);
std::vector<Embedding> embed_all(const Model& model, const LabeledDataset& dataset);

/// Accumulates d(loss)/d(params) into grad, given d(loss)/d(embedding).
/// Throws TraceError if the model changed since the trace was taken.
void backward(const Model& model, const ForwardTrace& trace, const Vector& grad_embedding, Vector& grad);

/// max(0, ||a-p||^2 - ||a-n||^2 + margin).
double triplet_loss(const Embedding& a, const Embedding& p, const Embedding& n, double margin);

/// Gradient of triplet_loss w.r.t. all parameters (zero when the hinge is
/// not strictly positive).
Vector triplet_backward(const Model& model, const ForwardTrace& a, const ForwardTrace& p,
                        const ForwardTrace& n, double margin);

/// Cross-entropy of the head's logits on e, log-sum-exp stabilized.
double softmax_loss(const Model& model, const Vector& e, std::uint32_t label);

struct SoftmaxGradient {
  double loss = 0.0;
  Vector head;       ///< d/d(head weight, head bias), head-local layout
  Vector embedding;  ///< d/d(e)
};
SoftmaxGradient softmax_backward(const Model& model, const Vector& e, std::uint32_t label);

/// Predicted class probabilities for one embedding.
Vector class_probabilities(const Model& model, const Vector& e);

/// mean(triplet_terms) + lambda * mean(softmax_terms); an empty list
/// contributes zero.
double joint_loss(std::span<const double> triplet_terms, std::span<const double> softmax_terms,
                  double lambda);

struct TripletRef {
  std::size_t anchor = 0, positive = 0, negative = 0;
};

/// Inputs for one optimization step. Triplets index into inputs; softmax
/// terms are taken over every input with its label.
struct TrainingBatch {
  std::vector<FeatureVector> inputs;
  std::vector<std::uint32_t> labels;
  std::vector<TripletRef> triplets;
};

struct LossOptions {
  double margin = 0.4;
  double lambda = 1.0;
  bool use_triplet = true;
  bool use_softmax = true;
};

struct LossReport {
  double triplet_loss = 0.0;
  double softmax_loss = 0.0;
  std::size_t active_triplets = 0;
  std::size_t candidate_triplets = 0;
  std::size_t batch_size = 0;
  bool fallback_used = false;
};

struct LossAndGradient {
  double loss = 0.0;
  LossReport report;
  Vector gradient;  ///< full flat layout of the model
};

/// Joint loss of the batch and its exact gradient.
LossAndGradient evaluate_batch(const Model& model, const TrainingBatch& batch, const LossOptions& options);
/// Loss only, without traces.
double batch_loss(const Model& model, const TrainingBatch& batch, const LossOptions& options);

/// Max over parameters of |analytic - fd| / max(|analytic|, |fd|, floor)
/// with central differences of step h.
double grad_check(const Model& model, const TrainingBatch& batch, const LossOptions& options, double h,
                  double floor = 1e-4);

struct NagState {
  Vector velocity;
  double momentum = 0.9;
  double learning_rate = 0.01;
};

NagState make_nag_state(const Model& model, double learning_rate, double momentum);

/// theta + momentum * v: where the caller must evaluate the gradient.
Vector nag_lookahead(const Vector& params, const NagState& state);

/// v <- mu v - eta g(lookahead); theta <- theta + v.
void nag_step(Vector& params, const Vector& grad_at_lookahead, NagState& state);
void nag_step(Model& model, const Vector& grad_at_lookahead, NagState& state);

/// Writes "TFMD" binary (version, layer count, per-layer shapes and float64
/// values, optional head block).
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);
void write_model(std::ostream& os, const Model& model);
Model read_model(std::istream& is);
/// Human-readable description of a checkpoint: format, version, shapes.
std::string model_sidecar_json(const Model& model, const std::string& tag = {});

}  // namespace tsub

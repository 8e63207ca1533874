// SPDX-License-Identifier: Apache-2.0
#include "tsub/model.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "binary_io.hpp"

namespace tsub {

namespace {

std::uint64_t next_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

constexpr std::uint32_t kModelFormatVersion = 1;

}  // namespace

Model::Model(Architecture arch) : arch_(std::move(arch)) {
  if (arch_.d_in == 0 || arch_.d == 0) throw ConfigError("model dimensions must be positive");
  for (auto h : arch_.hidden) {
    if (h == 0) throw ConfigError("hidden layer width must be positive");
  }
  layout();
  values_ = Vector::Zero(static_cast<Eigen::Index>(values_.size()));
  touch();
}

void Model::layout() {
  blocks_.clear();
  Eigen::Index offset = 0;
  std::size_t in = arch_.d_in;
  auto add = [&](std::size_t rows, std::size_t cols) {
    Block b;
    b.rows = static_cast<Eigen::Index>(rows);
    b.cols = static_cast<Eigen::Index>(cols);
    b.weight_offset = offset;
    offset += b.rows * b.cols;
    b.bias_offset = offset;
    offset += b.rows;
    blocks_.push_back(b);
  };
  for (auto h : arch_.hidden) {
    add(h, in);
    in = h;
  }
  add(arch_.d, in);
  head_offset_ = static_cast<std::size_t>(offset);
  if (arch_.num_classes > 0) add(arch_.num_classes, arch_.d);
  values_.resize(offset);
}

void Model::touch() { version_ = next_version(); }

Model Model::random(Architecture arch, std::uint64_t seed) {
  Model m(std::move(arch));
  std::mt19937_64 rng(seed);
  for (const auto& b : m.blocks_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < b.rows * b.cols + b.rows; ++i) m.values_[b.weight_offset + i] = dist(rng);
  }
  m.touch();
  return m;
}

Model Model::identity_linear(std::size_t d) {
  Model m(Architecture{d, {}, d, 0});
  m.weight(0).setIdentity();
  return m;
}

ConstMatrixMap Model::weight(std::size_t layer) const {
  const auto& b = blocks_.at(layer);
  return {values_.data() + b.weight_offset, b.rows, b.cols};
}
ConstVectorMap Model::bias(std::size_t layer) const {
  const auto& b = blocks_.at(layer);
  return {values_.data() + b.bias_offset, b.rows};
}
MatrixMap Model::weight(std::size_t layer) {
  touch();
  const auto& b = blocks_.at(layer);
  return {values_.data() + b.weight_offset, b.rows, b.cols};
}
VectorMap Model::bias(std::size_t layer) {
  touch();
  const auto& b = blocks_.at(layer);
  return {values_.data() + b.bias_offset, b.rows};
}

ConstMatrixMap Model::head_weight() const {
  if (!has_head()) throw ConfigError("model has no softmax head");
  return weight(num_layers());
}
ConstVectorMap Model::head_bias() const {
  if (!has_head()) throw ConfigError("model has no softmax head");
  return bias(num_layers());
}
MatrixMap Model::head_weight() {
  if (!has_head()) throw ConfigError("model has no softmax head");
  return weight(num_layers());
}
VectorMap Model::head_bias() {
  if (!has_head()) throw ConfigError("model has no softmax head");
  return bias(num_layers());
}

Vector& Model::mutable_parameters() {
  touch();
  return values_;
}

void Model::set_parameters(const Vector& values) {
  if (values.size() != values_.size()) throw DimensionError("set_parameters: size mismatch");
  values_ = values;
  touch();
}

void Model::reset_head(std::size_t num_classes, std::uint64_t seed) {
  Vector embedding_part = values_.head(static_cast<Eigen::Index>(head_offset_));
  arch_.num_classes = num_classes;
  layout();
  values_.head(static_cast<Eigen::Index>(head_offset_)) = embedding_part;
  if (num_classes > 0) {
    const auto& b = blocks_.back();
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < b.rows * b.cols + b.rows; ++i) values_[b.weight_offset + i] = dist(rng);
  }
  touch();
}

void Model::drop_head() { reset_head(0, 0); }

ForwardTrace forward(const Model& model, const FeatureVector& x) {
  const auto& arch = model.architecture();
  if (static_cast<std::size_t>(x.size()) != arch.d_in) {
    throw DimensionError("forward: input has width " + std::to_string(x.size()) + ", model expects " +
                         std::to_string(arch.d_in));
  }
  ForwardTrace t;
  t.model_version = model.version();
  t.activations.reserve(model.num_layers() + 1);
  t.activations.push_back(x);
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    Vector z = model.weight(i) * t.activations.back() + model.bias(i);
    if (i + 1 < model.num_layers()) z = z.array().tanh().matrix();
    t.activations.push_back(std::move(z));
  }
  const Vector& pre = t.activations.back();
  if (!pre.allFinite()) throw NumericalError("forward: non-finite activation");
  t.norm = pre.norm();
  if (!(t.norm > 0.0)) throw NumericalError("forward: zero pre-normalization activation");
  t.embedding = Embedding::from_unit(pre / t.norm);
  return t;
}

Embedding embed(const Model& model, const FeatureVector& x) { return forward(model, x).embedding; }

std::vector<Embedding> embed_all(const Model& model, const LabeledDataset& dataset) {
  std::vector<Embedding> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset.samples) out.push_back(embed(model, s.features));
  return out;
}

void backward(const Model& model, const ForwardTrace& trace, const Vector& grad_embedding, Vector& grad) {
  if (trace.model_version != model.version()) {
    throw TraceError("backward: trace was taken with different model parameters");
  }
  if (static_cast<std::size_t>(grad.size()) != model.num_parameters()) {
    throw DimensionError("backward: gradient buffer has the wrong size");
  }
  const Vector& e = trace.embedding.values();
  // d e / d z = (I - e e^T) / ||z||
  Vector g = (grad_embedding - e * e.dot(grad_embedding)) / trace.norm;
  Eigen::Index offset = 0;
  std::vector<Eigen::Index> offsets;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    offsets.push_back(offset);
    const auto w = model.weight(i);
    offset += w.rows() * w.cols() + w.rows();
  }
  for (std::size_t i = model.num_layers(); i-- > 0;) {
    const auto w = model.weight(i);
    const Vector& input = trace.activations[i];
    MatrixMap gw(grad.data() + offsets[i], w.rows(), w.cols());
    gw.noalias() += g * input.transpose();
    VectorMap(grad.data() + offsets[i] + w.rows() * w.cols(), w.rows()) += g;
    if (i == 0) break;
    Vector ga = w.transpose() * g;
    g = ga.array() * (1.0 - input.array().square());
  }
}

double triplet_loss(const Embedding& a, const Embedding& p, const Embedding& n, double margin) {
  return std::max(0.0, squared_distance(a, p) - squared_distance(a, n) + margin);
}

Vector triplet_backward(const Model& model, const ForwardTrace& a, const ForwardTrace& p,
                        const ForwardTrace& n, double margin) {
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(model.num_parameters()));
  const Vector& ea = a.embedding.values();
  const Vector& ep = p.embedding.values();
  const Vector& en = n.embedding.values();
  for (const auto* t : {&a, &p, &n}) {
    if (t->model_version != model.version()) throw TraceError("triplet_backward: stale trace");
  }
  if (squared_distance(ea, ep) - squared_distance(ea, en) + margin <= 0.0) return grad;
  backward(model, a, 2.0 * (en - ep), grad);
  backward(model, p, -2.0 * (ea - ep), grad);
  backward(model, n, 2.0 * (ea - en), grad);
  return grad;
}

namespace {

Vector logits_of(const Model& model, const Vector& e) {
  if (static_cast<std::size_t>(e.size()) != model.architecture().d) {
    throw DimensionError("softmax: embedding width mismatch");
  }
  return model.head_weight() * e + model.head_bias();
}

void check_label(const Model& model, std::uint32_t label) {
  if (!model.has_head()) throw ConfigError("softmax: model has no head");
  if (label >= model.architecture().num_classes) {
    throw LabelError("label " + std::to_string(label) + " out of range for C=" +
                     std::to_string(model.architecture().num_classes));
  }
}

}  // namespace

Vector class_probabilities(const Model& model, const Vector& e) {
  const Vector logits = logits_of(model, e);
  const double mx = logits.maxCoeff();
  Vector p = (logits.array() - mx).exp().matrix();
  return p / p.sum();
}

double softmax_loss(const Model& model, const Vector& e, std::uint32_t label) {
  check_label(model, label);
  const Vector logits = logits_of(model, e);
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits[label];
}

SoftmaxGradient softmax_backward(const Model& model, const Vector& e, std::uint32_t label) {
  check_label(model, label);
  const Vector logits = logits_of(model, e);
  const double mx = logits.maxCoeff();
  Vector prob = (logits.array() - mx).exp().matrix();
  const double z = prob.sum();
  prob /= z;
  SoftmaxGradient out;
  out.loss = mx + std::log(z) - logits[label];
  Vector g = prob;
  g[label] -= 1.0;
  const auto c = static_cast<Eigen::Index>(model.architecture().num_classes);
  const auto d = e.size();
  out.head.resize(c * d + c);
  MatrixMap(out.head.data(), c, d).noalias() = g * e.transpose();
  out.head.tail(c) = g;
  out.embedding = model.head_weight().transpose() * g;
  return out;
}

double joint_loss(std::span<const double> triplet_terms, std::span<const double> softmax_terms,
                  double lambda) {
  if (lambda < 0.0) throw ConfigError("joint_loss: lambda must be >= 0");
  auto mean = [](std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
  };
  return mean(triplet_terms) + lambda * mean(softmax_terms);
}

namespace {

void check_batch(const TrainingBatch& batch) {
  if (batch.labels.size() != batch.inputs.size()) throw DimensionError("batch: labels/inputs size mismatch");
  for (const auto& t : batch.triplets) {
    if (t.anchor >= batch.inputs.size() || t.positive >= batch.inputs.size() ||
        t.negative >= batch.inputs.size()) {
      throw DimensionError("batch: triplet index out of range");
    }
  }
}

}  // namespace

LossAndGradient evaluate_batch(const Model& model, const TrainingBatch& batch, const LossOptions& options) {
  check_batch(batch);
  if (options.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  const bool use_softmax = options.use_softmax && options.lambda > 0.0 && model.has_head();
  const bool use_triplet = options.use_triplet && !batch.triplets.empty();

  std::vector<ForwardTrace> traces;
  traces.reserve(batch.inputs.size());
  for (const auto& x : batch.inputs) traces.push_back(forward(model, x));

  const auto d = static_cast<Eigen::Index>(model.architecture().d);
  std::vector<Vector> grad_e(batch.inputs.size(), Vector::Zero(d));
  LossAndGradient out;
  out.gradient = Vector::Zero(static_cast<Eigen::Index>(model.num_parameters()));
  out.report.batch_size = batch.inputs.size();
  out.report.candidate_triplets = options.use_triplet ? batch.triplets.size() : 0;

  if (use_triplet) {
    const double scale = 1.0 / static_cast<double>(batch.triplets.size());
    double sum = 0.0;
    for (const auto& t : batch.triplets) {
      const Vector& a = traces[t.anchor].embedding.values();
      const Vector& p = traces[t.positive].embedding.values();
      const Vector& n = traces[t.negative].embedding.values();
      const double v = squared_distance(a, p) - squared_distance(a, n) + options.margin;
      if (v <= 0.0) continue;
      sum += v;
      ++out.report.active_triplets;
      grad_e[t.anchor] += scale * 2.0 * (n - p);
      grad_e[t.positive] -= scale * 2.0 * (a - p);
      grad_e[t.negative] += scale * 2.0 * (a - n);
    }
    out.report.triplet_loss = sum * scale;
  }

  if (use_softmax) {
    const double scale = options.lambda / static_cast<double>(batch.inputs.size());
    const auto head_size = static_cast<Eigen::Index>(model.num_parameters() - model.num_embedding_parameters());
    auto head_grad = out.gradient.tail(head_size);
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
      auto sg = softmax_backward(model, traces[i].embedding.values(), batch.labels[i]);
      sum += sg.loss;
      head_grad += scale * sg.head;
      grad_e[i] += scale * sg.embedding;
    }
    out.report.softmax_loss = sum / static_cast<double>(batch.inputs.size());
  }

  for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
    if (grad_e[i].isZero(0.0)) continue;
    backward(model, traces[i], grad_e[i], out.gradient);
  }
  out.loss = out.report.triplet_loss + (use_softmax ? options.lambda * out.report.softmax_loss : 0.0);
  return out;
}

double batch_loss(const Model& model, const TrainingBatch& batch, const LossOptions& options) {
  check_batch(batch);
  const bool use_softmax = options.use_softmax && options.lambda > 0.0 && model.has_head();
  std::vector<Embedding> emb;
  emb.reserve(batch.inputs.size());
  for (const auto& x : batch.inputs) emb.push_back(embed(model, x));
  std::vector<double> trip, soft;
  if (options.use_triplet) {
    for (const auto& t : batch.triplets) {
      trip.push_back(triplet_loss(emb[t.anchor], emb[t.positive], emb[t.negative], options.margin));
    }
  }
  if (use_softmax) {
    for (std::size_t i = 0; i < emb.size(); ++i) soft.push_back(softmax_loss(model, emb[i].values(), batch.labels[i]));
  }
  return joint_loss(trip, soft, use_softmax ? options.lambda : 0.0);
}

double grad_check(const Model& model, const TrainingBatch& batch, const LossOptions& options, double h,
                  double floor) {
  if (!(h > 0.0)) throw ConfigError("grad_check: h must be positive");
  const Vector analytic = evaluate_batch(model, batch, options).gradient;
  Model probe = model;
  const Vector base = model.parameters();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    Vector shifted = base;
    shifted[i] = base[i] + h;
    probe.set_parameters(shifted);
    const double up = batch_loss(probe, batch, options);
    shifted[i] = base[i] - h;
    probe.set_parameters(shifted);
    const double down = batch_loss(probe, batch, options);
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd), floor});
    worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
  }
  return worst;
}

NagState make_nag_state(const Model& model, double learning_rate, double momentum) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  return {Vector::Zero(static_cast<Eigen::Index>(model.num_parameters())), momentum, learning_rate};
}

Vector nag_lookahead(const Vector& params, const NagState& state) {
  if (params.size() != state.velocity.size()) throw DimensionError("nag_lookahead: shape mismatch");
  return params + state.momentum * state.velocity;
}

void nag_step(Vector& params, const Vector& grad_at_lookahead, NagState& state) {
  if (params.size() != state.velocity.size() || grad_at_lookahead.size() != params.size()) {
    throw DimensionError("nag_step: shape mismatch");
  }
  Vector velocity = state.momentum * state.velocity - state.learning_rate * grad_at_lookahead;
  if (!velocity.allFinite()) throw NumericalError("nag_step: non-finite update");
  state.velocity = std::move(velocity);
  params += state.velocity;
}

void nag_step(Model& model, const Vector& grad_at_lookahead, NagState& state) {
  nag_step(model.mutable_parameters(), grad_at_lookahead, state);
}

void write_model(std::ostream& os, const Model& model) {
  io::write_magic(os, "TFMD");
  io::write_le<std::uint32_t>(os, kModelFormatVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.num_layers()));
  auto write_block = [&](ConstMatrixMap w, ConstVectorMap b) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.rows()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.cols()));
    for (Eigen::Index i = 0; i < w.size(); ++i) io::write_le<double>(os, w.data()[i]);
    for (Eigen::Index i = 0; i < b.size(); ++i) io::write_le<double>(os, b[i]);
  };
  for (std::size_t i = 0; i < model.num_layers(); ++i) write_block(model.weight(i), model.bias(i));
  io::write_le<std::uint8_t>(os, model.has_head() ? 1 : 0);
  if (model.has_head()) write_block(model.head_weight(), model.head_bias());
  if (!os) throw FormatError("write_model: stream failure");
}

Model read_model(std::istream& is) {
  io::expect_magic(is, "TFMD");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kModelFormatVersion) throw FormatError("unsupported TFMD version " + std::to_string(version));
  const auto layers = io::read_le<std::uint32_t>(is);
  if (layers == 0) throw FormatError("TFMD: zero layers");
  std::vector<Vector> blocks;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
  auto read_block = [&] {
    const auto rows = io::read_le<std::uint32_t>(is);
    const auto cols = io::read_le<std::uint32_t>(is);
    Vector v(static_cast<Eigen::Index>(rows) * cols + rows);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = io::read_le<double>(is);
    shapes.emplace_back(rows, cols);
    blocks.push_back(std::move(v));
  };
  for (std::uint32_t i = 0; i < layers; ++i) read_block();
  const bool head = io::read_le<std::uint8_t>(is) != 0;
  if (head) read_block();

  Architecture arch;
  arch.d_in = shapes.front().second;
  arch.hidden.clear();
  for (std::uint32_t i = 0; i + 1 < layers; ++i) arch.hidden.push_back(shapes[i].first);
  arch.d = shapes[layers - 1].first;
  for (std::uint32_t i = 1; i < layers; ++i) {
    if (shapes[i].second != shapes[i - 1].first) throw FormatError("TFMD: layer shapes do not chain");
  }
  if (head) {
    if (shapes.back().second != arch.d) throw FormatError("TFMD: head width does not match d");
    arch.num_classes = shapes.back().first;
  }
  Model m(arch);
  Vector flat(static_cast<Eigen::Index>(m.num_parameters()));
  Eigen::Index offset = 0;
  for (const auto& b : blocks) {
    flat.segment(offset, b.size()) = b;
    offset += b.size();
  }
  m.set_parameters(flat);
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_model(os, model);
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_model(is);
}

std::string model_sidecar_json(const Model& model, const std::string& tag) {
  const auto& a = model.architecture();
  nlohmann::ordered_json j;
  j["format"] = "TFMD";
  j["version"] = kModelFormatVersion;
  j["tag"] = tag;
  j["d_in"] = a.d_in;
  j["hidden"] = a.hidden;
  j["d"] = a.d;
  j["num_classes"] = a.num_classes;
  j["num_parameters"] = model.num_parameters();
  j["num_embedding_parameters"] = model.num_embedding_parameters();
  return j.dump(2);
}

}  // namespace tsub

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "tsub/model.hpp"

using namespace tsub;
using tsub::testing::vec;

namespace {

// Straight-line forward pass used as an independent oracle.
Vector naive_forward(const Model& m, const Vector& x) {
  std::vector<double> a(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const auto w = m.weight(l);
    const auto b = m.bias(l);
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = b[r];
      for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * a[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(r)] = l + 1 < m.num_layers() ? std::tanh(s) : s;
    }
    a = z;
  }
  double n2 = 0.0;
  for (double v : a) n2 += v * v;
  Vector out(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) out[static_cast<Eigen::Index>(i)] = a[i] / std::sqrt(n2);
  return out;
}

double hinge_value(const Model& m, const TrainingBatch& b, const TripletRef& t, double margin) {
  const auto ea = embed(m, b.inputs[t.anchor]);
  const auto ep = embed(m, b.inputs[t.positive]);
  const auto en = embed(m, b.inputs[t.negative]);
  return squared_distance(ea, ep) - squared_distance(ea, en) + margin;
}

// Random batch whose triplets are all either clearly active or clearly
// inactive, so central differences never straddle a hinge kink.
TrainingBatch random_batch(const Model& m, std::size_t n_inputs, std::size_t n_triplets, double margin,
                           std::mt19937_64& rng, bool want_active) {
  const auto d_in = static_cast<Eigen::Index>(m.architecture().d_in);
  const auto C = std::max<std::size_t>(m.architecture().num_classes, 1);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    TrainingBatch b;
    for (std::size_t i = 0; i < n_inputs; ++i) {
      b.inputs.push_back(tsub::testing::random_vector(rng, d_in));
      b.labels.push_back(static_cast<std::uint32_t>(rng() % C));
    }
    bool ok = true;
    for (std::size_t t = 0; t < n_triplets && ok; ++t) {
      TripletRef r{(3 * t) % n_inputs, (3 * t + 1) % n_inputs, (3 * t + 2) % n_inputs};
      const double v = hinge_value(m, b, r, margin);
      ok = want_active ? v > 1e-2 : v < -1e-2;
      b.triplets.push_back(r);
    }
    if (ok) return b;
  }
  FAIL("could not build a batch away from hinge kinks");
  return {};
}

}  // namespace

TEST_CASE("forward") {
  const Model id = Model::identity_linear(6);
  const auto e = embed(id, vec({3, 4, 0, 0, 0, 0}));
  CHECK(e[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS_AS(embed(id, vec({0, 0, 0, 0, 0, 0})), NumericalError);
  CHECK_THROWS_AS(embed(id, vec({1, 2})), DimensionError);

  std::mt19937_64 rng(21);
  for (int i = 0; i < 20; ++i) {
    const Model m = Model::random({7, {9, 5}, 4, 0}, 100 + i);
    const Vector x = tsub::testing::random_vector(rng, 7);
    const auto t = forward(m, x);
    CHECK(std::abs(t.embedding.values().norm() - 1.0) <= kUnitNormTolerance);
    CHECK((t.embedding.values() - naive_forward(m, x)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("random init is seeded and bounded") {
  const Architecture arch{32, {64}, 16, 10};
  const Model a = Model::random(arch, 5);
  const Model b = Model::random(arch, 5);
  const Model c = Model::random(arch, 6);
  CHECK(a.parameters() == b.parameters());
  CHECK(a.parameters() != c.parameters());
  CHECK(a.weight(0).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(32.0));
  CHECK(a.weight(1).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(64.0));
  CHECK(a.head_weight().rows() == 10);
  CHECK(a.num_parameters() == 64 * 32 + 64 + 16 * 64 + 16 + 10 * 16 + 10);
}

TEST_CASE("triplet_loss") {
  const auto x = l2_normalize(vec({1, 0}));
  const auto y = l2_normalize(vec({0, 1}));
  const auto z = l2_normalize(vec({-1, 0}));
  CHECK(triplet_loss(x, x, y, 0.4) == 0.0);  // d_an = 2
  CHECK(triplet_loss(x, x, x, 0.4) == 0.4);
  CHECK(triplet_loss(x, y, z, 0.4) == 0.0);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    const auto a = tsub::testing::random_unit(rng, 5);
    const auto p = tsub::testing::random_unit(rng, 5);
    const auto n = tsub::testing::random_unit(rng, 5);
    CHECK(triplet_loss(a, p, n, 0.4) >= 0.0);
  }
}

TEST_CASE("triplet_backward") {
  std::mt19937_64 rng(31);
  const double margin = 0.4;

  SUBCASE("inactive hinge gives zero gradient") {
    const Model m = Model::identity_linear(3);
    const auto ta = forward(m, vec({1, 0, 0}));
    const auto tp = forward(m, vec({2, 0, 0}));
    const auto tn = forward(m, vec({-1, 0, 0}));
    CHECK(triplet_backward(m, ta, tp, tn, margin).isZero(0.0));
  }

  SUBCASE("active triplets match central differences") {
    for (int cfg = 0; cfg < 10; ++cfg) {
      const Model m = Model::random({5, {6}, 4, 0}, 40 + cfg);
      const auto b = random_batch(m, 3, 1, margin, rng, true);
      const Vector g = triplet_backward(m, forward(m, b.inputs[0]), forward(m, b.inputs[1]), forward(m, b.inputs[2]),
                                        margin);
      LossOptions opt{margin, 0.0, true, false};
      // batch_loss averages over one triplet, so it is the triplet loss.
      CHECK(grad_check(m, b, opt, 1e-5) <= 1e-5);
      CHECK((g - evaluate_batch(m, b, opt).gradient).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }

  SUBCASE("batch gradient is the sum of per-triplet gradients") {
    const Model m = Model::random({5, {6}, 4, 0}, 77);
    const auto b = random_batch(m, 9, 3, margin, rng, true);
    Vector sum = Vector::Zero(static_cast<Eigen::Index>(m.num_parameters()));
    for (const auto& t : b.triplets) {
      sum += triplet_backward(m, forward(m, b.inputs[t.anchor]), forward(m, b.inputs[t.positive]),
                              forward(m, b.inputs[t.negative]), margin);
    }
    const Vector batched = evaluate_batch(m, b, {margin, 0.0, true, false}).gradient * 3.0;
    CHECK((sum - batched).cwiseAbs().maxCoeff() <= 1e-10);
  }

  SUBCASE("stale trace") {
    Model m = Model::random({3, {}, 3, 0}, 1);
    const auto t = forward(m, vec({1, 2, 3}));
    m.bias(0)[0] += 0.1;
    CHECK_THROWS_AS(triplet_backward(m, t, t, t, margin), TraceError);
    Vector g = Vector::Zero(static_cast<Eigen::Index>(m.num_parameters()));
    CHECK_THROWS_AS(backward(m, t, vec({1, 0, 0}), g), TraceError);
  }
}

TEST_CASE("softmax loss and gradient") {
  Model m = Model::random({3, {}, 2, 2}, 3);
  m.head_weight().setZero();
  m.head_bias().setZero();
  const Vector e = l2_normalize(vec({1, 1})).values();
  CHECK(softmax_loss(m, e, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK_THROWS_AS(softmax_loss(m, e, 2), LabelError);

  m.head_bias()[1] = 20.0;
  CHECK(softmax_loss(m, e, 1) < 1e-8);
  CHECK(softmax_loss(m, e, 1) > 0.0);

  std::mt19937_64 rng(4);
  for (int cfg = 0; cfg < 10; ++cfg) {
    const Model r = Model::random({4, {5}, 3, 6}, 500 + cfg);
    const auto b = random_batch(r, 4, 0, 0.4, rng, true);
    CHECK(grad_check(r, b, {0.4, 1.0, false, true}, 1e-5) <= 1e-5);
    // embedding gradient against differences taken directly on e
    const Vector ev = embed(r, b.inputs[0]).values();
    const auto sg = softmax_backward(r, ev, b.labels[0]);
    for (Eigen::Index j = 0; j < ev.size(); ++j) {
      Vector up = ev, dn = ev;
      up[j] += 1e-6;
      dn[j] -= 1e-6;
      const double fd = (softmax_loss(r, up, b.labels[0]) - softmax_loss(r, dn, b.labels[0])) / 2e-6;
      CHECK(std::abs(fd - sg.embedding[j]) <= 1e-7 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("joint_loss") {
  const std::vector<double> t{0.2, 0.6}, s{0.5};
  CHECK(joint_loss(t, s, 0.0) == doctest::Approx(0.4));
  CHECK(joint_loss(std::vector<double>{0.5}, std::vector<double>{0.5}, 1.0) == 1.0);
  CHECK(joint_loss({}, {}, 1.0) == 0.0);
  CHECK_THROWS_AS(joint_loss(t, s, -1.0), ConfigError);

  std::mt19937_64 rng(9);
  const Model m = Model::random({4, {5}, 3, 4}, 8);
  const auto b = random_batch(m, 6, 2, 0.4, rng, true);
  const double lambda = 0.7;
  const Vector joint = evaluate_batch(m, b, {0.4, lambda, true, true}).gradient;
  const Vector trip = evaluate_batch(m, b, {0.4, lambda, true, false}).gradient;
  const Vector soft = evaluate_batch(m, b, {0.4, 1.0, false, true}).gradient;
  CHECK((joint - (trip + lambda * soft)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("grad_check") {
  std::mt19937_64 rng(15);
  SUBCASE("linear model, two triplets, lambda 1") {
    const Model m = Model::random({4, {}, 3, 3}, 2);
    const auto b = random_batch(m, 6, 2, 0.4, rng, true);
    CHECK(grad_check(m, b, {0.4, 1.0, true, true}, 1e-5) <= 1e-5);
  }
  SUBCASE("hinge-inactive batch") {
    const Model m = Model::random({4, {}, 3, 0}, 3);
    const auto b = random_batch(m, 3, 1, 0.4, rng, false);
    const LossOptions opt{0.4, 0.0, true, false};
    CHECK(evaluate_batch(m, b, opt).gradient.isZero(0.0));
    // with every analytic entry zero, the floor-relative error bounds |fd|
    CHECK(grad_check(m, b, opt, 1e-5, 1.0) <= 1e-9);
  }
  SUBCASE("tanh hidden layer of 8 units") {
    const Model m = Model::random({6, {8}, 4, 5}, 4);
    const auto b = random_batch(m, 6, 2, 0.4, rng, true);
    CHECK(grad_check(m, b, {0.4, 1.0, true, true}, 1e-5) <= 1e-4);
  }
}

TEST_CASE("nag_step") {
  SUBCASE("zero momentum is SGD") {
    Model m = Model::random({3, {}, 2, 0}, 1);
    auto st = make_nag_state(m, 0.05, 0.0);
    const Vector g = Vector::LinSpaced(static_cast<Eigen::Index>(m.num_parameters()), -1.0, 1.0);
    const Vector before = m.parameters();
    CHECK(nag_lookahead(before, st) == before);
    nag_step(m, g, st);
    CHECK(m.parameters() == Vector(before - 0.05 * g));
  }
  SUBCASE("hand arithmetic on f = theta^2 / 2") {
    Vector theta = vec({1.0});
    NagState st{vec({0.0}), 0.9, 0.1};
    const Vector look = nag_lookahead(theta, st);
    CHECK(look[0] == 1.0);
    nag_step(theta, look, st);  // gradient of f at the lookahead is the lookahead
    CHECK(st.velocity[0] == doctest::Approx(-0.1).epsilon(1e-15));
    CHECK(theta[0] == doctest::Approx(0.9).epsilon(1e-15));
  }
  SUBCASE("non-finite update") {
    Vector theta = vec({1.0});
    NagState st{vec({0.0}), 0.5, 0.1};
    CHECK_THROWS_AS(nag_step(theta, vec({std::nan("")}), st), NumericalError);
  }
  SUBCASE("random convex quadratics") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
      const Eigen::Index n = 6;
      Matrix q = Matrix::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) q(i, j) = std::normal_distribution<double>()(rng);
      Eigen::HouseholderQR<Matrix> qr(q);
      const Matrix Q = qr.householderQ();
      Vector diag(n);
      for (Eigen::Index i = 0; i < n; ++i) diag[i] = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
      const Matrix A = Q * diag.asDiagonal() * Q.transpose();
      auto f = [&](const Vector& t) { return 0.5 * t.dot(A * t); };

      Vector theta = tsub::testing::random_vector(rng, n);
      Vector oracle_theta = theta, oracle_v = Vector::Zero(n);
      NagState st{Vector::Zero(n), 0.2, 0.2};
      const double f0 = f(theta);
      double prev = f0;
      for (int step = 1; step <= 200; ++step) {
        nag_step(theta, Vector(A * nag_lookahead(theta, st)), st);
        // independent restatement of the update
        const Vector g = A * (oracle_theta + 0.2 * oracle_v);
        oracle_v = 0.2 * oracle_v - 0.2 * g;
        oracle_theta = oracle_theta + oracle_v;
        CHECK((theta - oracle_theta).cwiseAbs().maxCoeff() <= 1e-14);
        const double cur = f(theta);
        if (step > 10) CHECK(cur <= prev);
        prev = cur;
      }
      CHECK(prev < 1e-6 * f0);
    }
  }
}

TEST_CASE("twenty random configurations pass the gradient check") {
  std::mt19937_64 rng(123);
  for (int cfg = 0; cfg < 20; ++cfg) {
    const std::size_t d_in = 3 + cfg % 4, d = 2 + cfg % 3, C = 2 + cfg % 5;
    std::vector<std::size_t> hidden;
    if (cfg % 2 == 1) hidden.push_back(4 + cfg % 5);
    const Model m = Model::random({d_in, hidden, d, C}, 1000 + cfg);
    const auto b = random_batch(m, 6, 2, 0.4, rng, true);
    CHECK(grad_check(m, b, {0.4, 1.0, true, true}, 1e-5) <= 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  const Model m = Model::random({5, {7, 3}, 4, 6}, 9);
  std::stringstream ss;
  write_model(ss, m);
  CHECK(ss.str().substr(0, 4) == "TFMD");
  const Model back = read_model(ss);
  CHECK(back.architecture() == m.architecture());
  CHECK(back.parameters() == m.parameters());

  Model headless = m;
  headless.drop_head();
  CHECK_FALSE(headless.has_head());
  CHECK(headless.parameters() == m.parameters().head(static_cast<Eigen::Index>(m.num_embedding_parameters())));
  std::stringstream ss2;
  write_model(ss2, headless);
  CHECK(read_model(ss2).parameters() == headless.parameters());
}

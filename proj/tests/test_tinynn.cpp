#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tsclab/errors.hpp"
#include "tsclab/tinynn.hpp"

using namespace tsclab;
using namespace tsclab::nn;

TEST_CASE("zero net outputs zero") {
  DenseNet net({3, 5, 2});
  CHECK(net.num_params() == (3 + 1) * 5 + (5 + 1) * 2);
  const Vec y = net.predict(Vec::Constant(3, 1.7));
  CHECK(y == Vec::Zero(2));
}

TEST_CASE("single identity layer passes input through") {
  DenseNet net({4, 4});
  net.weight(0) = Mat::Identity(4, 4);
  Vec x(4);
  x << -1.0, 0.5, 2.0, -3.0;
  CHECK(net.predict(x) == x);  // no activation on the output layer
}

TEST_CASE("forward matches a straight-line recomputation") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    DenseNet net({4, 8, 2}, rng);
    Vec x(4);
    for (int i = 0; i < 4; ++i) x[i] = rng.uniform(-2.0, 2.0);
    // element-by-element oracle reading the flat parameter layout directly
    const double* p = net.params().data();
    double h[8];
    for (int j = 0; j < 8; ++j) {
      double z = p[4 * 8 + j];
      for (int i = 0; i < 4; ++i) z += p[i * 8 + j] * x[i];
      h[j] = z > 0.0 ? z : 0.0;
    }
    const double* q = p + 5 * 8;
    const Vec y = net.predict(x);
    for (int o = 0; o < 2; ++o) {
      double z = q[8 * 2 + o];
      for (int j = 0; j < 8; ++j) z += q[j * 2 + o] * h[j];
      CHECK(std::abs(y[o] - z) < 1e-12);
    }
  }
}

TEST_CASE("forward rejects a wrong input size") {
  DenseNet net({3, 2});
  CHECK_THROWS_AS(net.predict(Vec::Zero(4)), std::invalid_argument);
}

TEST_CASE("initialisation bounds") {
  Rng rng(1);
  DenseNet net({16, 64, 3}, rng);
  CHECK(net.weight(0).cwiseAbs().maxCoeff() <= 0.25);
  CHECK(net.weight(1).cwiseAbs().maxCoeff() <= 0.125);
  CHECK(net.weight(0).cwiseAbs().maxCoeff() > 0.2);
  Rng again(1);
  CHECK(DenseNet({16, 64, 3}, again) == net);
}

TEST_CASE("backward with zero upstream gradient") {
  Rng rng(2);
  DenseNet net({3, 6, 2}, rng);
  DenseNet::Cache cache;
  const Mat x = Mat::Random(3, 5);
  net.forward(x, &cache);
  Vec grad;
  const Mat dx = net.backward(cache, Mat::Zero(2, 5), grad);
  CHECK(grad == Vec::Zero(static_cast<Eigen::Index>(net.num_params())));
  CHECK(dx == Mat::Zero(3, 5));
}

TEST_CASE("backward of a scalar linear map") {
  DenseNet net({3, 1});
  net.weight(0) << 0.3, -0.2, 0.9;
  Vec x(3);
  x << 1.5, -2.0, 4.0;
  DenseNet::Cache cache;
  net.forward(Mat(x), &cache);
  Vec grad;
  const Mat dx = net.backward(cache, Mat::Ones(1, 1), grad);
  CHECK(grad.head(3) == x);
  CHECK(grad[3] == 1.0);
  CHECK(dx.col(0) == net.weight(0).transpose());
}

TEST_CASE("analytic gradients match central finite differences") {
  Rng rng(17);
  double worst = 0.0;
  std::size_t skipped = 0;
  std::size_t checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int in = 1 + static_cast<int>(rng.below(6));
    const int hid = 1 + static_cast<int>(rng.below(10));
    const int out = 1 + static_cast<int>(rng.below(4));
    const int depth = 1 + static_cast<int>(rng.below(3));
    std::vector<int> sizes{in};
    for (int d = 0; d < depth; ++d) sizes.push_back(hid);
    sizes.push_back(out);
    const DenseNet net(sizes, rng);
    const Mat x = Mat::NullaryExpr(in, 3, [&] { return rng.uniform(-1.0, 1.0); });
    const Mat w = Mat::NullaryExpr(out, 3, [&] { return rng.uniform(-1.0, 1.0); });

    auto loss = [&](const Vec& p) {
      DenseNet n = net;
      n.params() = p;
      return (n.forward(x).cwiseProduct(w)).sum();
    };
    DenseNet::Cache cache;
    net.forward(x, &cache);
    Vec grad;
    net.backward(cache, w, grad);
    const auto r = gradcheck::compare(loss, net.params(), grad, 1e-5,
                                      [&](const Vec& p) { return gradcheck::relu_pattern(net, p, x); });
    worst = std::max(worst, r.max_rel_error);
    skipped += r.skipped;
    checked += r.checked;

    // input gradient, same oracle
    auto loss_x = [&](const Vec& xv) {
      return (net.forward(Mat(Eigen::Map<const Mat>(xv.data(), in, 3))).cwiseProduct(w)).sum();
    };
    Vec gx;
    const Mat dx = net.backward(cache, w, gx);
    const Vec flat_x = Eigen::Map<const Vec>(x.data(), x.size());
    const Vec flat_dx = Eigen::Map<const Vec>(dx.data(), dx.size());
    const auto rx = gradcheck::compare(loss_x, flat_x, flat_dx, 1e-5, [&](const Vec& xv) {
      return gradcheck::relu_pattern(net, net.params(), Eigen::Map<const Mat>(xv.data(), in, 3));
    });
    worst = std::max(worst, rx.max_rel_error);
  }
  CHECK(worst < 1e-4);
  CHECK(skipped * 100 < checked);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Vec p = Vec::LinSpaced(5, -1.0, 1.0);
  const Vec before = p;
  AdamState s(5);
  for (int k = 0; k < 10; ++k) adam_step(p, Vec::Zero(5), s, 0.01);
  CHECK(p == before);
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  // at t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
  for (double g : {3.0, -0.02, 1e-3}) {
    Vec p = Vec::Zero(1);
    AdamState s(1);
    adam_step(p, Vec::Constant(1, g), s, 0.0005);
    const double expected = -0.0005 * g / (std::abs(g) + 1e-8);
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("adam minimises a quadratic") {
  Vec x = Vec::Zero(1);
  AdamState s(1);
  for (int k = 0; k < 2000; ++k) adam_step(x, Vec::Constant(1, 2.0 * (x[0] - 3.0)), s, 0.05);
  CHECK(std::abs(x[0] - 3.0) < 0.01);
}

TEST_CASE("adam defaults") {
  const AdamState s;
  CHECK(s.beta1 == 0.9);
  CHECK(s.beta2 == 0.999);
  CHECK(s.eps == 1e-8);
}

TEST_CASE("clip_grad_norm") {
  Vec g(2);
  g << 3.0, 4.0;
  CHECK(clip_grad_norm(g, 10.0) == 5.0);
  CHECK(g[0] == 3.0);
  CHECK(clip_grad_norm(g, 1.0) == 5.0);
  CHECK(g.norm() == doctest::Approx(1.0));
}

TEST_CASE("softmax") {
  Mat logits(2, 2);
  logits << 0.0, 1000.0, 0.0, -1000.0;
  const Mat p = softmax(logits);
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK(p(0, 1) == doctest::Approx(1.0));
  CHECK(std::isfinite(log_softmax(logits)(1, 1)));
  CHECK(std::abs(p.col(0).sum() - 1.0) < 1e-12);
}

TEST_CASE("serialization round-trips bit-exactly") {
  Rng rng(9);
  const DenseNet net({7, 64, 64, 3}, rng);
  const DenseNet back = DenseNet::from_json(nlohmann::json::parse(net.to_json().dump()));
  CHECK(back == net);

  AdamState s(4);
  Vec p = Vec::Random(4);
  adam_step(p, Vec::Random(4), s, 0.1);
  const AdamState sb = AdamState::from_json(nlohmann::json::parse(s.to_json().dump()));
  CHECK(sb.m == s.m);
  CHECK(sb.v == s.v);
  CHECK(sb.t == 1);

  nlohmann::json bad = net.to_json();
  bad["params"].erase(0);
  CHECK_THROWS_AS(DenseNet::from_json(bad), ParseError);
}

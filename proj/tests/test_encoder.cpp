#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fcl/encoder.hpp"

using namespace fcl;

namespace {

ParamVector random_params(const Layout& layout, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(layout_size(layout));
  for (double& x : v) x = g(rng);
  return ParamVector(layout, std::move(v));
}

Layout flat_layout(std::size_t n) { return Layout{{"w", {n}}}; }

SliceSample random_slice(int h, int w, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (double& v : img.values()) v = u(rng);
  return SliceSample{img, 3, 7, 5, 1};
}

}  // namespace

TEST_CASE("encoder and predictor layouts") {
  const ModelDims dims;
  const Layout enc = encoder_layout(dims);
  REQUIRE(enc.size() == 4);
  CHECK(enc[0].shape == Shape{256, 64});
  CHECK(enc[1].shape == Shape{64});
  CHECK(enc[2].shape == Shape{64, 32});
  CHECK(enc[3].shape == Shape{32});
  CHECK(layout_size(enc) == 256 * 64 + 64 + 64 * 32 + 32);
  CHECK(layout_size(predictor_layout(dims)) == 32 * 32 + 32 + 32 * 32 + 32);
  CHECK_THROWS_AS((ModelDims{0, 64, 32, 32}.validate()), std::invalid_argument);
}

TEST_CASE("ParamVector length must match its layout") {
  CHECK_THROWS(ParamVector(flat_layout(3), std::vector<double>(4)));
  const ParamVector p(Layout{{"a", {2, 3}}, {"b", {3}}}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(p.layer(1).values() == std::vector<double>{7, 8, 9});
  CHECK(p.layer(0).shape() == Shape{2, 3});
}

TEST_CASE("forward_embed returns a unit embedding tagged with the slice metadata") {
  Rng rng = make_rng(5, {});
  const ModelDims dims{64, 16, 8, 8};
  for (int trial = 0; trial < 20; ++trial) {
    const ParamVector enc = init_encoder(dims, rng);
    const SliceSample s = random_slice(8, 8, rng);
    const FeatureVector f = forward_embed(enc, s);
    CHECK(std::abs(l2_norm(f.embedding) - 1.0) < 1e-9);
    CHECK(f.client_id == 3);
    CHECK(f.volume_id == 7);
    CHECK(f.partition == 1);
    CHECK(forward_embed(enc, s) == f);
  }
}

TEST_CASE("forward_embed with zero weights is degenerate") {
  Rng rng = make_rng(6, {});
  const ModelDims dims{16, 4, 3, 3};
  const ParamVector zero(encoder_layout(dims));
  CHECK_THROWS_AS(forward_embed(zero, random_slice(4, 4, rng)), DegenerateVectorError);
}

TEST_CASE("forward_embed rejects a mismatched image") {
  Rng rng = make_rng(7, {});
  const ParamVector enc = init_encoder(ModelDims{64, 8, 4, 4}, rng);
  CHECK_THROWS_AS(forward_embed(enc, random_slice(4, 4, rng)), ShapeError);
}

TEST_CASE("ema_update endpoints and arithmetic") {
  const ParamVector ones(flat_layout(4), {1, 1, 1, 1});
  const ParamVector zeros(flat_layout(4));
  CHECK(ema_update(ones, zeros, 1.0) == ones);
  const ParamVector mixed = ema_update(ones, zeros, 0.99);
  for (double v : mixed.values()) CHECK(v == doctest::Approx(0.99).epsilon(1e-15));
  CHECK_THROWS(ema_update(ones, zeros, 0.0));
  CHECK_THROWS(ema_update(ones, zeros, 1.5));
  CHECK_THROWS_AS(ema_update(ones, ParamVector(flat_layout(3)), 0.5), LayoutMismatchError);
}

TEST_CASE("ema_update_inplace agrees with ema_update") {
  Rng rng = make_rng(8, {});
  const ParamVector a = random_params(flat_layout(50), rng);
  const ParamVector b = random_params(flat_layout(50), rng);
  ParamVector in_place = a;
  ema_update_inplace(in_place, b, 0.9);
  CHECK(in_place == ema_update(a, b, 0.9));
}

TEST_CASE("param_l1_distance") {
  const ParamVector a(flat_layout(2), {1, 3});
  const ParamVector b(flat_layout(2), {2, 5});
  CHECK(param_l1_distance(a, b) == 1.5);
  CHECK(param_l1_distance(a, a) == 0.0);
  CHECK_THROWS_AS(param_l1_distance(a, ParamVector(Layout{{"v", {2}}})), LayoutMismatchError);

  Rng rng = make_rng(9, {});
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector x = random_params(flat_layout(20), rng);
    const ParamVector y = random_params(flat_layout(20), rng);
    const ParamVector z = random_params(flat_layout(20), rng);
    CHECK(param_l1_distance(x, y) == param_l1_distance(y, x));
    CHECK(param_l1_distance(x, z) <= param_l1_distance(x, y) + param_l1_distance(y, z) + 1e-15);
  }
}

TEST_CASE("EMA contracts the distance to the online parameters by exactly m") {
  Rng rng = make_rng(10, {});
  std::uniform_real_distribution<double> um(0.05, 0.999);
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector xi = random_params(flat_layout(40), rng);
    const ParamVector theta = random_params(flat_layout(40), rng);
    const double m = um(rng);
    const double before = param_l1_distance(xi, theta);
    const double after = param_l1_distance(ema_update(xi, theta, m), theta);
    CHECK(std::abs(after - m * before) <= 1e-12 * std::max(1.0, before));
  }
}

TEST_CASE("aggregate-then-EMA equals EMA-then-aggregate") {
  Rng rng = make_rng(11, {});
  const double m = 0.97;
  const double w[3] = {0.2, 0.5, 0.3};
  ParamVector xs[3], ts[3];
  for (int i = 0; i < 3; ++i) {
    xs[i] = random_params(flat_layout(30), rng);
    ts[i] = random_params(flat_layout(30), rng);
  }
  auto mix = [&](const ParamVector* p) {
    ParamVector out(flat_layout(30));
    for (int i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 30; ++j) out.values()[j] += w[i] * p[i].values()[j];
    }
    return out;
  };
  ParamVector emas[3];
  for (int i = 0; i < 3; ++i) emas[i] = ema_update(xs[i], ts[i], m);
  const ParamVector lhs = ema_update(mix(xs), mix(ts), m);
  const ParamVector rhs = mix(emas);
  for (std::size_t j = 0; j < 30; ++j) CHECK(std::abs(lhs.values()[j] - rhs.values()[j]) < 1e-12);
}

TEST_CASE("parameter checkpoints round-trip through float32") {
  Rng rng = make_rng(12, {});
  const ParamVector p = init_encoder(ModelDims{16, 5, 3, 3}, rng);
  std::stringstream buf;
  write_params(buf, p);
  const std::string bytes = buf.str();
  CHECK(bytes.size() > wire_bytes(p));
  const ParamVector back = read_params(buf);
  CHECK(back.layout() == p.layout());
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(back.values()[i] == static_cast<double>(static_cast<float>(p.values()[i])));
  }
  std::stringstream bad("nope");
  CHECK_THROWS(read_params(bad));
}

TEST_CASE("wire size is four bytes per value") {
  const ParamVector p(flat_layout(10));
  CHECK(wire_bytes(p) == 40);
}

TEST_CASE("traced MLP gradient matches finite differences") {
  Rng rng = make_rng(13, {});
  const ModelDims dims{10, 12, 5, 5};
  ParamVector enc = init_encoder(dims, rng);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (double& v : enc.values()) v += jitter(rng);
  Tensor images({4, 10});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : images.values()) v = u(rng);
  Tensor probe({4, 5});
  for (double& v : probe.values()) v = u(rng) - 0.5;

  const Objective f = [&](const Tensor& point, Tensor* g) {
    const ParamVector params(enc.layout(), point.values());
    GradTape tape;
    const MlpTrace trace = trace_mlp(tape, params, tape.constant(images), true);
    const Tensor& out = tape.value(trace.output);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
    if (g) {
      tape.backward(trace.output, probe);
      const ParamVector grad = gather_gradient(tape, trace, params);
      std::copy(grad.values().begin(), grad.values().end(), g->values().begin());
    }
    return s;
  };
  CHECK(grad_check(f, Tensor::vector({enc.values().begin(), enc.values().end()})) < 1e-4);
}

TEST_CASE("embed_batch agrees with forward_embed row by row") {
  Rng rng = make_rng(14, {});
  const ParamVector enc = init_encoder(ModelDims{16, 8, 4, 4}, rng);
  std::vector<Tensor> imgs;
  std::vector<SliceSample> samples;
  for (int i = 0; i < 3; ++i) {
    samples.push_back(random_slice(4, 4, rng));
    imgs.push_back(samples.back().image);
  }
  const Tensor batch = embed_batch(enc, stack_images(imgs));
  for (std::size_t i = 0; i < 3; ++i) {
    const FeatureVector f = forward_embed(enc, samples[i]);
    for (std::size_t j = 0; j < 4; ++j) CHECK(batch.at(i, j) == doctest::Approx(f.embedding[j]).epsilon(1e-14));
  }
}

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "fcl/protocol.hpp"
#include "oracles.hpp"

using namespace fcl;

namespace {

FederationSetup small_setup(Variant v, int rounds = 4) {
  FederationSetup s;
  s.data = DataConfig{.n_clients = 3, .volumes_per_client = 3, .depth = 8, .height = 8, .width = 8, .partitions = 4};
  s.protocol.variant = v;
  s.protocol.rounds = rounds;
  s.loss.bank_size = 16;
  s.hidden = 16;
  s.feat = 8;
  s.predictor_hidden = 8;
  return s;
}

ParamVector random_params(std::size_t n, Rng& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return ParamVector(Layout{{"w", {n}}}, std::move(v));
}

std::string csv_of(const CommLedger& l) {
  std::ostringstream out;
  l.write_csv(out);
  return out.str();
}

}  // namespace

TEST_CASE("variant names round-trip") {
  for (Variant v : kAllVariants) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS(parse_variant("simclr"));
  CHECK(is_moco_family(Variant::kFCL));
  CHECK(is_moco_family(Variant::kFedMoCo));
  CHECK_FALSE(is_moco_family(Variant::kFCLOptPTNU));
}

TEST_CASE("protocol defaults") {
  const ProtocolConfig p;
  CHECK(p.momentum == 0.99);
  CHECK(p.ptnu_momentum == 0.995);
  CHECK(p.calibration_period == 10);
  CHECK(p.local_epochs == 1);
  CHECK(p.participation == 1.0);
  CHECK(LossConfig{}.temperature == 0.1);
  CHECK(default_learning_rate(Variant::kFCL) == 0.05);
  CHECK(default_learning_rate(Variant::kFedMoCo) == 0.05);
  CHECK(default_learning_rate(Variant::kFCLOpt) > 0.0);
  CHECK(ProtocolConfig{.learning_rate = 0.3}.effective_learning_rate() == 0.3);
}

TEST_CASE("protocol validation") {
  CHECK_THROWS(ProtocolConfig{.momentum = 1.0}.validate());
  CHECK_THROWS(ProtocolConfig{.ptnu_momentum = 1.2}.validate());
  CHECK_THROWS(ProtocolConfig{.local_epochs = 0}.validate());
  CHECK_THROWS(ProtocolConfig{.participation = 0.0}.validate());
  CHECK_THROWS(ProtocolConfig{.calibration_period = 0}.validate());
  CHECK_NOTHROW(ProtocolConfig{}.validate());
}

TEST_CASE("cosine learning rate schedule") {
  CHECK(cosine_learning_rate(0.5, 1, 30) == 0.5);
  CHECK(cosine_learning_rate(0.5, 16, 30) == doctest::Approx(0.25));
  double prev = 1.0;
  for (int r = 1; r <= 30; ++r) {
    const double lr = cosine_learning_rate(1.0, r, 30);
    CHECK(lr <= prev);
    CHECK(lr > 0.0);
    prev = lr;
  }
}

TEST_CASE("aggregate_params weighted mean") {
  const Layout l{{"w", {1}}};
  const ParamVector a(l, {0.0}), b(l, {4.0});
  const ParamVector m = aggregate_params(std::vector<ParamVector>{a, b}, std::vector<double>{1, 3});
  CHECK(m.values()[0] == 3.0);
  CHECK_THROWS(aggregate_params(std::vector<ParamVector>{a, b}, std::vector<double>{1}));
  CHECK_THROWS(aggregate_params(std::vector<ParamVector>{a, b}, std::vector<double>{0, 0}));
  CHECK_THROWS_AS(aggregate_params(std::vector<ParamVector>{a, ParamVector(Layout{{"v", {1}}})},
                                   std::vector<double>{1, 1}),
                  LayoutMismatchError);
}

TEST_CASE("aggregating copies of one model is bit-identical") {
  Rng rng = make_rng(31, {});
  for (int trial = 0; trial < 20; ++trial) {
    const ParamVector p = random_params(40, rng);
    const std::vector<ParamVector> copies(7, p);
    const std::vector<double> counts = {1, 5, 2, 9, 3, 3, 16};
    CHECK(aggregate_params(copies, counts) == p);
  }
}

TEST_CASE("aggregation commutes with scaling") {
  Rng rng = make_rng(32, {});
  std::vector<ParamVector> models, scaled;
  for (int i = 0; i < 4; ++i) {
    models.push_back(random_params(10, rng));
    ParamVector s = models.back();
    for (double& x : s.values()) x *= 2.5;
    scaled.push_back(s);
  }
  const std::vector<double> counts = {3, 1, 4, 1};
  const ParamVector a = aggregate_params(models, counts);
  const ParamVector b = aggregate_params(scaled, counts);
  for (std::size_t i = 0; i < 10; ++i) CHECK(b.values()[i] == doctest::Approx(2.5 * a.values()[i]).epsilon(1e-14));
}

TEST_CASE("ptnu worked example and loop guard") {
  const Layout l{{"w", {3}}};
  const ParamVector theta(l, {0, 0, 0});
  const ParamVector xi(l, {1, 1, 1});
  const PtnuResult r = ptnu(theta, xi, 0.2, 0.5);
  CHECK(r.iterations == 3);
  CHECK(r.distance == 0.125);
  for (double v : r.target.values()) CHECK(v == 0.125);

  const PtnuResult none = ptnu(theta, xi, 1.0, 0.5);
  CHECK(none.iterations == 0);
  CHECK(none.target == xi);

  CHECK_THROWS(ptnu(theta, xi, -0.1, 0.5));
  CHECK_THROWS(ptnu(theta, xi, 0.1, 1.0));
  CHECK_THROWS(ptnu(theta, ParamVector(l, {std::nan(""), 0, 0}), 0.1, 0.5));
  CHECK_THROWS_AS(ptnu(theta, ParamVector(Layout{{"w", {2}}}), 0.1, 0.5), LayoutMismatchError);
  CHECK_THROWS_AS(ptnu(theta, xi, 0.0, 0.5, 100), std::runtime_error);
}

TEST_CASE("ptnu contracts geometrically and stops at the first step below target") {
  Rng rng = make_rng(33, {});
  std::uniform_real_distribution<double> um(0.5, 0.99), uf(0.01, 0.9);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector theta = random_params(25, rng);
    ParamVector xi = random_params(25, rng);
    const double m = um(rng);
    const double d0 = param_l1_distance(theta, xi);
    for (int k = 1; k <= 10; ++k) {
      ema_update_inplace(xi, theta, m);
      CHECK(std::abs(param_l1_distance(theta, xi) - std::pow(m, k) * d0) < 1e-12);
    }
    const ParamVector start = random_params(25, rng);
    const double d_start = param_l1_distance(theta, start);
    const double target = uf(rng) * d_start;
    const PtnuResult r = ptnu(theta, start, target, m);
    CHECK(r.iterations == oracle::ptnu_steps(d_start, target, m));
    CHECK(r.distance <= target);
  }
}

TEST_CASE("distance prediction and calibration arithmetic") {
  CHECK(predict_distance(std::vector<double>{2.5}, 0.8) == 2.0);
  CHECK(predict_distance(std::vector<double>{1, 3}, 0.9) == doctest::Approx(1.8));
  CHECK_THROWS(predict_distance(std::vector<double>{}, 1.0));
  CHECK_THROWS(predict_distance(std::vector<double>{1.0}, 0.0));
  CHECK(calibrate_alpha(2.0, 2.0, 0.5) == 1.0);
  CHECK(calibrate_alpha(1.8, 2.0, 1.0) == doctest::Approx(0.9));
  CHECK(calibrate_alpha(0.0, 0.0, 0.7) == 0.7);
  CHECK_THROWS(calibrate_alpha(0.1, 0.0, 1.0));
  const double a = calibrate_alpha(1.234, 3.21, 1.0);
  CHECK(a * 3.21 == doctest::Approx(1.234).epsilon(1e-15));
}

TEST_CASE("exact distance to the averaged target never exceeds the mean client distance") {
  Rng rng = make_rng(34, {});
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector theta = random_params(30, rng);
    std::vector<ParamVector> targets;
    std::vector<double> dp;
    for (int c = 0; c < 5; ++c) {
      targets.push_back(random_params(30, rng));
      dp.push_back(client_distance(theta, targets.back()));
    }
    const ParamVector mean = aggregate_params(targets, std::vector<double>(5, 1.0));
    CHECK(param_l1_distance(theta, mean) <= predict_distance(dp, 1.0) + 1e-12);
  }
}

TEST_CASE("select_clients") {
  Rng rng = make_rng(35, {});
  CHECK(select_clients(4, 1.0, rng) == std::vector<int>{0, 1, 2, 3});
  for (int t = 0; t < 20; ++t) {
    const auto s = select_clients(10, 0.3, rng);
    CHECK(s.size() == 3);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::set<int>(s.begin(), s.end()).size() == 3);
  }
  CHECK(select_clients(10, 0.01, rng).size() == 1);
}

TEST_CASE("fclopt_client_train with zero learning rate only moves the target") {
  const FederationSetup s = small_setup(Variant::kFCLOpt);
  const Cohort cohort = generate_cohort(s.data);
  Federation fed = make_federation(s, cohort);
  Rng rng = make_rng(36, {});
  const TargetNetwork start{init_encoder(s.dims(), rng)};
  auto& client = fed.clients[0];
  const double d0 = param_l1_distance(fed.server.global_online.encoder, start.encoder);
  fclopt_client_train(client, fed.server.global_online, start, fed.ctx, 0.0);
  CHECK(client.online == fed.server.global_online);
  const int steps = static_cast<int>((client.n_samples + 7) / 8);
  const double d1 = param_l1_distance(client.online.encoder, client.target.encoder);
  CHECK(d1 == doctest::Approx(std::pow(fed.ctx.protocol.momentum, steps) * d0).epsilon(1e-10));

  RoundContext frozen = fed.ctx;
  frozen.protocol.momentum = 1.0;
  fclopt_client_train(client, fed.server.global_online, start, frozen, 0.05);
  CHECK(client.target == start);
  CHECK_FALSE(client.online == fed.server.global_online);
}

TEST_CASE("a small step along the BYOL gradient lowers the batch loss") {
  Rng rng = make_rng(37, {});
  const ModelDims dims{64, 16, 8, 8};
  const ParamVector enc = init_encoder(dims, rng);
  const ParamVector pred = init_predictor(dims, rng);
  const ParamVector target = init_encoder(dims, rng);
  const Cohort cohort = generate_cohort(DataConfig{.n_clients = 1, .depth = 8, .height = 8, .width = 8});
  std::vector<Tensor> online_views, target_views;
  for (int i = 0; i < 8; ++i) {
    auto [a, b] = augment(cohort[0][static_cast<std::size_t>(i % 4)].slice(i), rng);
    online_views.push_back(a);
    target_views.push_back(b);
  }
  const Tensor targets = embed_batch(target, stack_images(target_views));
  auto loss_and_grad = [&](const ParamVector& e, ParamVector* grad) {
    GradTape tape;
    const MlpTrace t = trace_mlp(tape, e, tape.constant(stack_images(online_views)), true);
    const MlpTrace p = trace_mlp(tape, pred, t.output, false);
    const Tensor& z = tape.value(p.output);
    Tensor seed(z.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const LossResult r = byol_loss(z.row(i), targets.row(i));
      loss += r.loss / 8;
      for (std::size_t j = 0; j < r.grad.size(); ++j) seed.at(i, j) = r.grad[j] / 8;
    }
    if (grad) {
      tape.backward(p.output, seed);
      *grad = gather_gradient(tape, t, e);
    }
    return loss;
  };
  ParamVector g;
  const double before = loss_and_grad(enc, &g);
  ParamVector stepped = enc;
  for (std::size_t i = 0; i < stepped.size(); ++i) stepped.values()[i] -= 1e-3 * g.values()[i];
  CHECK(loss_and_grad(stepped, nullptr) < before);
}

TEST_CASE("FedMoCo rounds move no feature bytes; FCL feature bytes follow the closed form") {
  for (Variant v : {Variant::kFedMoCo, Variant::kFCL}) {
    const FederationSetup s = small_setup(v, 2);
    const FederationResult res = run_federation(s);
    const std::uint64_t n = 3;
    const std::uint64_t bank = 12 + 16 * (8 + 8 * 4);
    for (int r = 1; r <= 2; ++r) {
      const std::uint64_t up = res.ledger.round_total(r, Direction::kUp, Component::kFeatures);
      const std::uint64_t down = res.ledger.round_total(r, Direction::kDown, Component::kFeatures);
      if (v == Variant::kFedMoCo) {
        CHECK(up + down == 0);
      } else {
        CHECK(up == n * bank);
        CHECK(down == n * (n - 1) * bank);
      }
    }
  }
}

TEST_CASE("ledger totals match the message-walk oracle for every variant") {
  for (Variant v : kAllVariants) {
    FederationSetup s = small_setup(v, 12);
    s.protocol.calibration_period = 5;
    const FederationResult res = run_federation(s);
    const auto z = oracle::sizes_for(s);
    CHECK(res.ledger.total() == oracle::total_bytes(v, 12, 3, z, 5));
    std::uint64_t per_round_sum = 0;
    for (const auto& rr : res.rounds) {
      CHECK(rr.bytes == oracle::round_bytes(v, rr.round, 3, z, 5));
      CHECK(rr.bytes == projected_round_bytes(v, rr.round, 3, z.encoder_values, z.predictor_values, z.bank_entries,
                                              z.d_feat, 5));
      per_round_sum += rr.bytes;
    }
    CHECK(per_round_sum == res.ledger.total());
  }
}

TEST_CASE("PTNU never downloads targets and keeps every client within the distance") {
  const FederationResult res = run_federation(small_setup(Variant::kFCLOptPTNU, 6));
  CHECK(res.ledger.total(Direction::kDown, Component::kTargetNet) == 0);
  CHECK(res.rounds.front().ptnu_iterations == std::vector<int>{0, 0, 0});
  for (const auto& r : res.rounds) {
    REQUIRE(r.d_pred.has_value());
    for (double d : r.ptnu_distances) CHECK(d <= *r.d_pred);
  }
}

TEST_CASE("DP uploads targets only on calibration rounds and calibrates exactly") {
  FederationSetup s = small_setup(Variant::kFCLOptPTNUDP, 9);
  s.protocol.calibration_period = 3;
  const FederationResult res = run_federation(s);
  CHECK(res.ledger.total(Direction::kDown, Component::kTargetNet) == 0);
  std::set<int> upload_rounds;
  for (const auto& e : res.ledger.entries()) {
    if (e.component == Component::kTargetNet) upload_rounds.insert(e.round);
  }
  CHECK(upload_rounds == std::set<int>{3, 6, 9});
  CHECK(res.rounds.front().d_pred == 0.0);
  for (const auto& r : res.rounds) {
    CHECK(r.calibration.has_value() == (r.round % 3 == 0));
    if (r.calibration) {
      CHECK(std::abs(r.calibration->alpha * r.calibration->dp - r.calibration->d_exact) <= 1e-12);
      CHECK(r.calibration->alpha <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("client distances use the previous round's local target") {
  const FederationSetup s = small_setup(Variant::kFCLOptPTNUDP, 2);
  const Cohort cohort = generate_cohort(s.data);
  Federation fed = make_federation(s, cohort);
  const RoundResult r1 = run_round(fed);
  CHECK(r1.client_distances == std::vector<double>{0.0, 0.0, 0.0});
  std::vector<double> expected;
  for (const auto& c : fed.clients) expected.push_back(param_l1_distance(fed.server.global_online.encoder, c.target.encoder));
  const RoundResult r2 = run_round(fed);
  CHECK(r2.client_distances == expected);
  CHECK(*r2.d_pred == doctest::Approx(fed.server.alpha * (expected[0] + expected[1] + expected[2]) / 3));
}

TEST_CASE("FedBYOL clients keep their own targets") {
  const FederationSetup s = small_setup(Variant::kFedBYOL, 2);
  const Cohort cohort = generate_cohort(s.data);
  Federation fed = make_federation(s, cohort);
  run_round(fed);
  CHECK_FALSE(fed.clients[0].target == fed.clients[1].target);
  CHECK(fed.ledger.total(Component::kTargetNet) == 0);
}

TEST_CASE("runs are deterministic and thread-count independent") {
  for (Variant v : {Variant::kFCL, Variant::kFCLOptPTNUDP}) {
    FederationSetup s = small_setup(v, 3);
    const FederationResult a = run_federation(s);
    s.protocol.threads = 3;
    const FederationResult b = run_federation(s);
    CHECK(csv_of(a.ledger) == csv_of(b.ledger));
    CHECK(a.final_online == b.final_online);
    CHECK(a.final_target == b.final_target);
    for (std::size_t i = 0; i < a.rounds.size(); ++i) CHECK(a.rounds[i].loss_mean == b.rounds[i].loss_mean);
  }
}

TEST_CASE("partial participation trains only the sampled clients") {
  FederationSetup s = small_setup(Variant::kFCLOpt, 3);
  s.data.n_clients = 5;
  s.protocol.participation = 0.4;
  const FederationResult res = run_federation(s);
  for (const auto& r : res.rounds) {
    CHECK(r.active_clients.size() == 2);
    std::set<int> ledger_clients;
    for (const auto& e : res.ledger.entries()) {
      if (e.round == r.round) ledger_clients.insert(e.client);
    }
    CHECK(ledger_clients == std::set<int>(r.active_clients.begin(), r.active_clients.end()));
  }
}

TEST_CASE("round functions reject the other family") {
  const FederationSetup s = small_setup(Variant::kFCL, 1);
  const Cohort cohort = generate_cohort(s.data);
  Federation fed = make_federation(s, cohort);
  CHECK_THROWS(fclopt_round(fed.clients, fed.server, fed.ctx, fed.ledger, fed.server_rng));
  fed.ctx.protocol.variant = Variant::kFCLOpt;
  CHECK_THROWS(fcl_round(fed.clients, fed.server, fed.ctx, fed.ledger, fed.server_rng));
}

TEST_CASE("default sizes order the variants as FCL > FCLOpt > PTNU > DP") {
  const FederationSetup s;
  const auto z = oracle::sizes_for(s);
  const auto total = [&](Variant v) { return oracle::total_bytes(v, 30, 10, z, 10); };
  CHECK(total(Variant::kFCL) > total(Variant::kFCLOpt));
  CHECK(total(Variant::kFCLOpt) > total(Variant::kFCLOptPTNU));
  CHECK(total(Variant::kFCLOptPTNU) > total(Variant::kFCLOptPTNUDP));
}

TEST_CASE("linear probe: deterministic, above chance when trained, near chance on shuffled labels") {
  const Cohort cohort = generate_cohort(DataConfig{.seed = 777});
  Rng rng = make_rng(38, {});
  const ParamVector enc = init_encoder(ModelDims{}, rng);
  const double a = linear_probe(enc, cohort, 4, 5);
  CHECK(a == linear_probe(enc, cohort, 4, 5));
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
  const double shuffled = linear_probe(enc, cohort, 4, 5, ProbeConfig{.shuffle_labels = true});
  CHECK(std::abs(shuffled - 0.25) <= 0.1);
}

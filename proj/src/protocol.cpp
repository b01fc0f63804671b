#include "fcl/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>

namespace fcl {

namespace {

constexpr std::uint64_t kServerStream = 0x5E21;
constexpr std::uint64_t kClientStream = 0xC11E;

std::size_t steps_per_epoch(const ClientState& client, int batch_size) {
  const auto b = static_cast<std::size_t>(batch_size);
  return std::max<std::size_t>(1, (client.n_samples + b - 1) / b);
}

// Heavy-ball SGD with L2 weight decay: v <- mu v + g + wd p; p <- p - lr v.
void sgd_step(ParamVector& params, ParamVector& velocity, const ParamVector& grad, double lr,
              const ProtocolConfig& proto) {
  if (velocity.size() != params.size()) velocity = ParamVector(params.layout());
  auto p = params.values();
  auto v = velocity.values();
  const auto g = grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = proto.sgd_momentum * v[i] + g[i] + proto.weight_decay * p[i];
    p[i] -= lr * v[i];
  }
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

SliceSample sample_any_slice(const ClientState& client, int partitions, Rng& rng) {
  std::uniform_int_distribution<int> pick_volume(0, static_cast<int>(client.data.size()) - 1);
  const int v = pick_volume(rng);
  const Volume& vol = client.data[static_cast<std::size_t>(v)];
  std::uniform_int_distribution<int> pick_slice(0, vol.depth - 1);
  const int z = pick_slice(rng);
  return SliceSample{vol.slice(z), vol.client_id, vol.subject_id, z, partition_of(z, vol.depth, partitions)};
}

std::vector<double> sample_counts(const std::vector<ClientState>& clients, std::span<const int> active) {
  std::vector<double> counts;
  for (int c : active) counts.push_back(static_cast<double>(clients[static_cast<std::size_t>(c)].n_samples));
  return counts;
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kFedMoCo: return "fedmoco";
    case Variant::kFedBYOL: return "fedbyol";
    case Variant::kFCL: return "fcl";
    case Variant::kFCLOpt: return "fclopt";
    case Variant::kFCLOptPTNU: return "fclopt-ptnu";
    case Variant::kFCLOptPTNUDP: return "fclopt-ptnu-dp";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

bool is_moco_family(Variant v) { return v == Variant::kFedMoCo || v == Variant::kFCL; }

// The BYOL family's usual 0.5 collapses the desk-scale MLP; 0.2 is the largest stable value.
double default_learning_rate(Variant v) { return is_moco_family(v) ? 0.05 : 0.2; }

double ProtocolConfig::effective_learning_rate() const {
  return learning_rate.value_or(default_learning_rate(variant));
}

void ProtocolConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (rounds < 1) fail("protocol.rounds must be >= 1");
  if (local_epochs < 1) fail("protocol.local_epochs must be >= 1");
  if (batch_size < 2) fail("protocol.batch_size must be >= 2");
  if (learning_rate && !(*learning_rate >= 0.0 && std::isfinite(*learning_rate))) {
    fail("protocol.learning_rate must be finite and >= 0");
  }
  if (!(momentum > 0.0 && momentum < 1.0)) fail("protocol.momentum must be in (0,1)");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) fail("protocol.sgd_momentum must be in [0,1)");
  if (!(weight_decay >= 0.0 && std::isfinite(weight_decay))) fail("protocol.weight_decay must be >= 0");
  if (!(ptnu_momentum > 0.0 && ptnu_momentum < 1.0)) fail("protocol.ptnu_momentum must be in (0,1)");
  if (calibration_period < 1) fail("protocol.calibration_period must be >= 1");
  if (!(participation > 0.0 && participation <= 1.0)) fail("protocol.participation must be in (0,1]");
  if (!(initial_alpha > 0.0 && std::isfinite(initial_alpha))) fail("protocol.initial_alpha must be > 0");
  if (threads < 1) fail("protocol.threads must be >= 1");
}

double cosine_learning_rate(double base, int round, int rounds) {
  const double progress = static_cast<double>(round - 1) / static_cast<double>(std::max(rounds, 1));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// --- aggregation and distance math ---

ParamVector aggregate_params(std::span<const ParamVector> models, std::span<const double> counts) {
  if (models.empty() || models.size() != counts.size()) {
    throw std::invalid_argument("aggregate_params: need one sample count per model");
  }
  double n = 0.0;
  for (double c : counts) n += c;
  if (!(n > 0.0)) throw std::invalid_argument("aggregate_params: total sample count must be > 0");
  for (const auto& m : models) require_compatible(models.front(), m, "aggregate_params");

  // Identical inputs must come back bit-identical, so skip the arithmetic.
  const bool all_same = std::all_of(models.begin(), models.end(), [&](const ParamVector& m) {
    return std::equal(m.values().begin(), m.values().end(), models.front().values().begin());
  });
  if (all_same) return models.front();

  ParamVector out(models.front().layout());
  auto acc = out.values();
  for (std::size_t c = 0; c < models.size(); ++c) {
    const double w = counts[c] / n;
    const auto v = models[c].values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * v[i];
  }
  return out;
}

OnlineNetwork aggregate_online(std::span<const OnlineNetwork> models, std::span<const double> counts) {
  std::vector<ParamVector> enc, pred;
  for (const auto& m : models) {
    enc.push_back(m.encoder);
    pred.push_back(m.predictor);
  }
  return OnlineNetwork{aggregate_params(enc, counts), aggregate_params(pred, counts)};
}

PtnuResult ptnu(const ParamVector& online, ParamVector target, double d_target, double m_d, int max_iterations) {
  require_compatible(online, target, "ptnu");
  if (!(d_target >= 0.0) || !std::isfinite(d_target)) throw std::invalid_argument("ptnu: d_target must be >= 0");
  if (!(m_d > 0.0 && m_d < 1.0)) throw std::invalid_argument("ptnu: m_d must be in (0,1)");
  require_finite(online.values(), "ptnu online parameters");
  require_finite(target.values(), "ptnu target parameters");

  PtnuResult result;
  result.distance = param_l1_distance(online, target);
  while (result.distance > d_target) {
    if (result.iterations == max_iterations) {
      throw std::runtime_error("ptnu: distance " + std::to_string(result.distance) + " did not reach " +
                               std::to_string(d_target) + " within the iteration cap");
    }
    ema_update_inplace(target, online, m_d);
    result.distance = param_l1_distance(online, target);
    ++result.iterations;
  }
  result.target = std::move(target);
  return result;
}

double client_distance(const ParamVector& global_online_encoder, const ParamVector& previous_target) {
  return param_l1_distance(global_online_encoder, previous_target);
}

double predict_distance(std::span<const double> dp, double alpha) {
  if (dp.empty()) throw std::invalid_argument("predict_distance: no client distances");
  if (!(alpha > 0.0)) throw std::invalid_argument("predict_distance: alpha must be > 0");
  return alpha * mean_of(dp);
}

double calibrate_alpha(double d_exact, double dp, double current_alpha) {
  if (dp == 0.0) {
    if (d_exact == 0.0) return current_alpha;
    throw std::domain_error("calibrate_alpha: predicted distance is 0 but the exact distance is not");
  }
  if (!(dp > 0.0)) throw std::invalid_argument("calibrate_alpha: predicted distance must be > 0");
  return d_exact / dp;
}

// --- client training ---

double moco_client_train(ClientState& client, std::span<const MemoryBank> remote, const RoundContext& ctx,
                         double learning_rate) {
  const auto& proto = ctx.protocol;
  const bool structural = proto.variant == Variant::kFCL;
  const int S = ctx.partitions;
  const int pairs = std::max(1, proto.batch_size / 2);
  const std::size_t steps = steps_per_epoch(client, proto.batch_size);

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (int epoch = 0; epoch < proto.local_epochs; ++epoch) {
    for (std::size_t step = 0; step < steps; ++step) {
      // Two images per partition pair; each gets a query view and a key view.
      std::vector<Tensor> query_views, key_views;
      std::vector<SliceSample> meta;
      for (int p = 0; p < pairs; ++p) {
        const int s = static_cast<int>((step * pairs + static_cast<std::size_t>(p)) % static_cast<std::size_t>(S));
        auto [a, b] = sample_partition_pair(client.data, s, S, client.rng);
        for (SliceSample* x : {&a, &b}) {
          auto [tq, tk] = augment(x->image, client.rng, ctx.augment);
          query_views.push_back(std::move(tq));
          key_views.push_back(std::move(tk));
          meta.push_back(SliceSample{Tensor(), x->client_id, x->volume_id, x->slice_index, x->partition});
        }
      }
      const std::size_t batch = query_views.size();

      const Tensor keys = embed_batch(client.momentum_encoder, stack_images(key_views));
      std::vector<FeatureVector> fresh;
      for (std::size_t i = 0; i < batch; ++i) {
        const auto row = keys.row(i);
        fresh.push_back(FeatureVector{{row.begin(), row.end()}, meta[i].client_id, meta[i].volume_id, meta[i].partition});
      }

      GradTape tape;
      const Var input = tape.constant(stack_images(query_views));
      const MlpTrace trace = trace_mlp(tape, client.online.encoder, input, true);
      const Tensor& queries = tape.value(trace.output);

      const FeaturePool pool = aggregate_banks(client.local_bank, remote);
      const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(ctx.loss.bank_size), pool.size());

      Tensor seed(queries.shape());
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t pair_base = i - i % 2;
        const FeatureVector positives[2] = {fresh[pair_base], fresh[pair_base + 1]};
        const FeaturePool negatives = sample_negatives(pool, k, client.rng);
        LossResult r;
        if (structural) {
          const FeaturePool lambda = remote_positives(meta[i].partition, negatives);
          r = gsm_loss(queries.row(i), positives, lambda, negatives, ctx.loss);
        } else {
          r = local_contrastive_loss(queries.row(i), positives, negatives, ctx.loss);
        }
        batch_loss += r.loss;
        auto g = seed.row(i);
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = r.grad[j] / static_cast<double>(batch);
      }
      tape.backward(trace.output, seed);
      sgd_step(client.online.encoder, client.encoder_velocity, gather_gradient(tape, trace, client.online.encoder),
               learning_rate, proto);
      ema_update_inplace(client.momentum_encoder, client.online.encoder, proto.momentum);
      for (auto& f : fresh) client.local_bank.push(std::move(f));

      loss_sum += batch_loss / static_cast<double>(batch);
      ++loss_count;
    }
  }
  return loss_sum / static_cast<double>(loss_count);
}

double fclopt_client_train(ClientState& client, const OnlineNetwork& global, const TargetNetwork& target_init,
                           const RoundContext& ctx, double learning_rate) {
  require_compatible(global.encoder, target_init.encoder, "fclopt_client_train");
  const auto& proto = ctx.protocol;
  client.online = global;
  client.target = target_init;
  const std::size_t steps = steps_per_epoch(client, proto.batch_size);
  const auto batch = static_cast<std::size_t>(proto.batch_size);

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (int epoch = 0; epoch < proto.local_epochs; ++epoch) {
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<Tensor> online_views, target_views;
      for (std::size_t b = 0; b < batch; ++b) {
        const SliceSample x = sample_any_slice(client, ctx.partitions, client.rng);
        auto [t, t_prime] = augment(x.image, client.rng, ctx.augment);
        online_views.push_back(std::move(t));
        target_views.push_back(std::move(t_prime));
      }
      const Tensor targets = embed_batch(client.target.encoder, stack_images(target_views));

      GradTape tape;
      const Var input = tape.constant(stack_images(online_views));
      const MlpTrace enc = trace_mlp(tape, client.online.encoder, input, true);
      const MlpTrace pred = trace_mlp(tape, client.online.predictor, enc.output, false);
      const Tensor& z = tape.value(pred.output);

      Tensor seed(z.shape());
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < batch; ++i) {
        const LossResult r = byol_loss(z.row(i), targets.row(i));
        batch_loss += r.loss;
        auto g = seed.row(i);
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = r.grad[j] / static_cast<double>(batch);
      }
      tape.backward(pred.output, seed);
      sgd_step(client.online.encoder, client.encoder_velocity, gather_gradient(tape, enc, client.online.encoder),
               learning_rate, proto);
      sgd_step(client.online.predictor, client.predictor_velocity, gather_gradient(tape, pred, client.online.predictor),
               learning_rate, proto);
      ema_update_inplace(client.target.encoder, client.online.encoder, proto.momentum);

      loss_sum += batch_loss / static_cast<double>(batch);
      ++loss_count;
    }
  }
  return loss_sum / static_cast<double>(loss_count);
}

// --- rounds ---

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<int> select_clients(std::size_t n_clients, double participation, Rng& server_rng) {
  std::vector<int> active;
  if (participation >= 1.0) {
    for (std::size_t c = 0; c < n_clients; ++c) active.push_back(static_cast<int>(c));
    return active;
  }
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(participation * static_cast<double>(n_clients))), 1, n_clients);
  for (std::size_t i : sample_indices(n_clients, k, server_rng)) active.push_back(static_cast<int>(i));
  std::sort(active.begin(), active.end());
  return active;
}

RoundResult fcl_round(std::vector<ClientState>& clients, ServerState& server, const RoundContext& ctx,
                      CommLedger& ledger, Rng& server_rng) {
  const auto& proto = ctx.protocol;
  if (!is_moco_family(proto.variant)) throw std::invalid_argument("fcl_round: variant must be fedmoco or fcl");
  RoundResult result;
  result.round = ++server.round;
  result.variant = proto.variant;
  result.alpha = server.alpha;
  result.active_clients = select_clients(clients.size(), proto.participation, server_rng);
  const auto& active = result.active_clients;
  const int r = result.round;
  const std::uint64_t enc_bytes = wire_bytes(server.global_online.encoder);
  const double lr = cosine_learning_rate(proto.effective_learning_rate(), r, proto.rounds);

  for (int c : active) {
    auto& client = clients[static_cast<std::size_t>(c)];
    ledger.record(r, c, Direction::kDown, Component::kOnlineNet, enc_bytes);
    ledger.record(r, c, Direction::kDown, Component::kTargetNet, enc_bytes);
    client.online.encoder = server.global_online.encoder;
    client.momentum_encoder = server.global_target.encoder;
  }

  // Feature exchange: each client uploads its bank once; the server relays every
  // other active client's bank to it.
  std::vector<std::vector<MemoryBank>> remote(active.size());
  if (proto.variant == Variant::kFCL) {
    std::vector<std::vector<std::uint8_t>> messages;
    for (int c : active) {
      messages.push_back(encode_bank(c, clients[static_cast<std::size_t>(c)].local_bank, ctx.d_feat));
      ledger.record(r, c, Direction::kUp, Component::kFeatures, messages.back().size());
    }
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = 0; j < active.size(); ++j) {
        if (i == j) continue;
        ledger.record(r, active[i], Direction::kDown, Component::kFeatures, messages[j].size());
        remote[i].push_back(decode_bank(messages[j], static_cast<std::size_t>(ctx.loss.bank_size)));
      }
    }
  }

  std::vector<double> losses(active.size());
  parallel_for(active.size(), proto.threads, [&](std::size_t i) {
    losses[i] = moco_client_train(clients[static_cast<std::size_t>(active[i])], remote[i], ctx, lr);
  });

  std::vector<ParamVector> encoders, momentum;
  for (int c : active) {
    const auto& client = clients[static_cast<std::size_t>(c)];
    ledger.record(r, c, Direction::kUp, Component::kOnlineNet, enc_bytes);
    ledger.record(r, c, Direction::kUp, Component::kTargetNet, enc_bytes);
    encoders.push_back(client.online.encoder);
    momentum.push_back(client.momentum_encoder);
  }
  const auto counts = sample_counts(clients, active);
  server.global_online.encoder = aggregate_params(encoders, counts);
  server.global_target.encoder = aggregate_params(momentum, counts);

  result.loss_mean = mean_of(losses);
  result.bytes = ledger.round_total(r);
  return result;
}

RoundResult fclopt_round(std::vector<ClientState>& clients, ServerState& server, const RoundContext& ctx,
                         CommLedger& ledger, Rng& server_rng) {
  const auto& proto = ctx.protocol;
  const Variant v = proto.variant;
  if (is_moco_family(v)) throw std::invalid_argument("fclopt_round: variant must be BYOL-based");
  RoundResult result;
  result.round = ++server.round;
  result.variant = v;
  result.alpha = server.alpha;
  result.active_clients = select_clients(clients.size(), proto.participation, server_rng);
  const auto& active = result.active_clients;
  const int r = result.round;
  const std::uint64_t enc_bytes = wire_bytes(server.global_online.encoder);
  const std::uint64_t pred_bytes = wire_bytes(server.global_online.predictor);
  const double lr = cosine_learning_rate(proto.effective_learning_rate(), r, proto.rounds);
  const bool uses_ptnu = v == Variant::kFCLOptPTNU || v == Variant::kFCLOptPTNUDP;
  const bool calibration_round = v == Variant::kFCLOptPTNUDP && r % proto.calibration_period == 0;

  // Download the global online network.
  for (int c : active) {
    ledger.record(r, c, Direction::kDown, Component::kOnlineNet, enc_bytes);
    ledger.record(r, c, Direction::kDown, Component::kPredictor, pred_bytes);
  }

  // Target distance for PTNU: exact from the server, or predicted from client reports.
  double d_target = 0.0;
  if (v == Variant::kFCLOptPTNU) {
    d_target = server.distance;
    for (int c : active) ledger.record(r, c, Direction::kDown, Component::kScalar, kScalarWireBytes);
    result.d_pred = d_target;
  } else if (v == Variant::kFCLOptPTNUDP) {
    for (int c : active) {
      const auto& client = clients[static_cast<std::size_t>(c)];
      result.client_distances.push_back(client_distance(server.global_online.encoder, client.target.encoder));
      ledger.record(r, c, Direction::kUp, Component::kScalar, kScalarWireBytes);
    }
    d_target = predict_distance(result.client_distances, server.alpha);
    for (int c : active) ledger.record(r, c, Direction::kDown, Component::kScalar, kScalarWireBytes);
    result.d_pred = d_target;
  } else if (v == Variant::kFCLOpt) {
    for (int c : active) ledger.record(r, c, Direction::kDown, Component::kTargetNet, enc_bytes);
  }

  std::vector<TargetNetwork> target_init(active.size());
  result.ptnu_distances.assign(active.size(), 0.0);
  result.ptnu_iterations.assign(active.size(), 0);
  std::vector<double> losses(active.size());
  parallel_for(active.size(), proto.threads, [&](std::size_t i) {
    auto& client = clients[static_cast<std::size_t>(active[i])];
    if (v == Variant::kFCLOpt) {
      target_init[i] = server.global_target;
    } else if (uses_ptnu) {
      PtnuResult p = ptnu(server.global_online.encoder, client.target.encoder, d_target, proto.ptnu_momentum);
      result.ptnu_distances[i] = p.distance;
      result.ptnu_iterations[i] = p.iterations;
      target_init[i] = TargetNetwork{std::move(p.target)};
    } else {
      target_init[i] = client.target;
    }
    losses[i] = fclopt_client_train(client, server.global_online, target_init[i], ctx, lr);
  });

  const bool upload_targets = v == Variant::kFCLOpt || v == Variant::kFCLOptPTNU || calibration_round;
  std::vector<OnlineNetwork> online;
  std::vector<ParamVector> targets;
  for (int c : active) {
    const auto& client = clients[static_cast<std::size_t>(c)];
    ledger.record(r, c, Direction::kUp, Component::kOnlineNet, enc_bytes);
    ledger.record(r, c, Direction::kUp, Component::kPredictor, pred_bytes);
    online.push_back(client.online);
    if (upload_targets) {
      ledger.record(r, c, Direction::kUp, Component::kTargetNet, enc_bytes);
      targets.push_back(client.target.encoder);
    }
  }
  const auto counts = sample_counts(clients, active);
  server.global_online = aggregate_online(online, counts);

  if (upload_targets) {
    server.global_target.encoder = aggregate_params(targets, counts);
    const double d_exact = param_l1_distance(server.global_online.encoder, server.global_target.encoder);
    server.distance = d_exact;
    result.d_exact = d_exact;
    if (calibration_round) {
      std::vector<double> dp;
      for (const auto& t : targets) dp.push_back(client_distance(server.global_online.encoder, t));
      const double dp_mean = mean_of(dp);
      server.alpha = calibrate_alpha(d_exact, dp_mean, server.alpha);
      result.calibration = Calibration{dp_mean, d_exact, server.alpha};
    }
  }

  result.loss_mean = mean_of(losses);
  result.bytes = ledger.round_total(r);
  return result;
}

// --- federation driver ---

ModelDims FederationSetup::dims() const {
  return ModelDims{data.height * data.width, hidden, feat, predictor_hidden};
}

void FederationSetup::validate() const {
  data.validate();
  protocol.validate();
  loss.validate();
  augment.validate();
  dims().validate();
}

Federation make_federation(const FederationSetup& setup, const Cohort& cohort) {
  setup.validate();
  if (cohort.size() != static_cast<std::size_t>(setup.data.n_clients)) {
    throw std::invalid_argument("make_federation: cohort has " + std::to_string(cohort.size()) + " clients");
  }
  Federation fed;
  fed.ctx = RoundContext{setup.protocol, setup.loss, setup.augment, setup.data.partitions,
                         static_cast<std::size_t>(setup.feat)};
  fed.server_rng = make_rng(setup.seed, {kServerStream});

  const ModelDims dims = setup.dims();
  fed.server.global_online.encoder = init_encoder(dims, fed.server_rng);
  fed.server.global_online.predictor = init_predictor(dims, fed.server_rng);
  fed.server.global_target.encoder = fed.server.global_online.encoder;
  fed.server.alpha = setup.protocol.initial_alpha;

  const bool moco = is_moco_family(setup.protocol.variant);
  for (int c = 0; c < setup.data.n_clients; ++c) {
    ClientState client;
    client.id = c;
    client.data = cohort[static_cast<std::size_t>(c)];
    for (const auto& vol : client.data) client.n_samples += static_cast<std::size_t>(vol.depth);
    client.rng = make_rng(setup.seed, {kClientStream, static_cast<std::uint64_t>(c)});
    client.online = fed.server.global_online;
    client.target = fed.server.global_target;
    client.momentum_encoder = fed.server.global_online.encoder;
    if (moco) {
      client.local_bank = MemoryBank(static_cast<std::size_t>(setup.loss.bank_size));
      for (int i = 0; i < setup.loss.bank_size; ++i) {
        const int s = i % setup.data.partitions;
        std::uniform_int_distribution<int> pick(0, static_cast<int>(client.data.size()) - 1);
        const SliceSample x = sample_slice(client.data, pick(client.rng), s, setup.data.partitions, client.rng);
        SliceSample view = x;
        view.image = augment_view(x.image, setup.augment, client.rng);
        client.local_bank.push(forward_embed(client.momentum_encoder, view));
      }
    }
    fed.clients.push_back(std::move(client));
  }
  return fed;
}

RoundResult run_round(Federation& fed) {
  if (is_moco_family(fed.ctx.protocol.variant)) {
    return fcl_round(fed.clients, fed.server, fed.ctx, fed.ledger, fed.server_rng);
  }
  return fclopt_round(fed.clients, fed.server, fed.ctx, fed.ledger, fed.server_rng);
}

std::uint64_t projected_round_bytes(Variant v, int round, std::size_t n_clients, std::size_t encoder_values,
                                    std::size_t predictor_values, std::size_t bank_entries, std::size_t d_feat,
                                    int calibration_period) {
  const std::uint64_t n = n_clients;
  const std::uint64_t enc = encoder_values * kWireBytesPerValue;
  const std::uint64_t pred = predictor_values * kWireBytesPerValue;
  const std::uint64_t bank = bank_wire_bytes(bank_entries, d_feat);
  switch (v) {
    case Variant::kFedMoCo: return n * 4 * enc;
    case Variant::kFCL: return n * 4 * enc + n * n * bank;
    case Variant::kFedBYOL: return n * 2 * (enc + pred);
    case Variant::kFCLOpt: return n * 2 * (2 * enc + pred);
    case Variant::kFCLOptPTNU: return n * (2 * (enc + pred) + enc + kScalarWireBytes);
    case Variant::kFCLOptPTNUDP: {
      const bool calibration = round % calibration_period == 0;
      return n * (2 * (enc + pred) + 2 * kScalarWireBytes + (calibration ? enc : 0));
    }
  }
  return 0;
}

FederationResult run_federation(const FederationSetup& setup) {
  const Cohort cohort = generate_cohort(setup.data);
  Federation fed = make_federation(setup, cohort);
  FederationResult out;
  out.initial_online = fed.server.global_online;
  for (int r = 0; r < setup.protocol.rounds; ++r) out.rounds.push_back(run_round(fed));
  out.final_online = fed.server.global_online;
  out.final_target = fed.server.global_target;
  out.ledger = std::move(fed.ledger);
  const ModelDims dims = setup.dims();
  for (int r = 1; r <= setup.protocol.rounds; ++r) {
    out.fcl_reference_bytes += projected_round_bytes(
        Variant::kFCL, r, static_cast<std::size_t>(setup.data.n_clients), layout_size(encoder_layout(dims)),
        layout_size(predictor_layout(dims)), static_cast<std::size_t>(setup.loss.bank_size),
        static_cast<std::size_t>(setup.feat), setup.protocol.calibration_period);
  }
  return out;
}

}  // namespace fcl

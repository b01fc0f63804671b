#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fcl/contrastive.hpp"
#include "fcl/data.hpp"
#include "fcl/encoder.hpp"
#include "fcl/ledger.hpp"

namespace fcl {

enum class Variant { kFedMoCo, kFedBYOL, kFCL, kFCLOpt, kFCLOptPTNU, kFCLOptPTNUDP };

inline constexpr std::array<Variant, 6> kAllVariants = {Variant::kFedMoCo, Variant::kFedBYOL,    Variant::kFCL,
                                                        Variant::kFCLOpt,  Variant::kFCLOptPTNU, Variant::kFCLOptPTNUDP};

/// Lower-case CLI names: fedmoco, fedbyol, fcl, fclopt, fclopt-ptnu, fclopt-ptnu-dp.
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

/// FedMoCo and FCL train a MoCo-style main/momentum encoder pair; the rest are BYOL-style.
bool is_moco_family(Variant v);

struct ProtocolConfig {
  Variant variant = Variant::kFCL;
  int rounds = 30;
  int local_epochs = 1;
  int batch_size = 8;
  /// Unset means the family default (see default_learning_rate).
  std::optional<double> learning_rate;
  double momentum = 0.99;        ///< m, EMA of target / momentum encoder
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  double ptnu_momentum = 0.995;  ///< m_d
  int calibration_period = 10;   ///< R_cal
  double participation = 1.0;
  double initial_alpha = 1.0;
  int threads = 1;

  double effective_learning_rate() const;
  void validate() const;
  bool operator==(const ProtocolConfig&) const = default;
};

/// Base learning rate per family before cosine decay.
double default_learning_rate(Variant v);

/// base * 0.5 * (1 + cos(pi * (round - 1) / rounds)), rounds counted from 1.
double cosine_learning_rate(double base, int round, int rounds);

struct ClientState {
  int id = 0;
  OnlineNetwork online;          ///< theta; predictor unused by the MoCo family
  TargetNetwork target;          ///< xi_c (BYOL family)
  ParamVector momentum_encoder;  ///< MoCo family
  MemoryBank local_bank;
  /// SGD velocity for the online encoder and predictor; local, never communicated.
  ParamVector encoder_velocity;
  ParamVector predictor_velocity;
  std::vector<Volume> data;
  std::size_t n_samples = 0;
  Rng rng;
};

struct ServerState {
  OnlineNetwork global_online;
  /// F_xi; for the MoCo family the aggregated momentum encoder.
  TargetNetwork global_target;
  double alpha = 1.0;
  int round = 0;
  /// d(F_theta, F_xi) broadcast to PTNU clients at the start of the next round.
  double distance = 0.0;
};

struct Calibration {
  double dp = 0.0;       ///< mean_c d(F_theta, xi_c) over the uploaded targets
  double d_exact = 0.0;  ///< d(F_theta, aggregated F_xi)
  double alpha = 0.0;    ///< recalibrated value
};

struct RoundResult {
  int round = 0;
  Variant variant = Variant::kFCL;
  double loss_mean = 0.0;
  std::optional<double> d_exact;
  std::optional<double> d_pred;
  double alpha = 1.0;  ///< alpha in force when d_pred was formed
  std::uint64_t bytes = 0;
  std::optional<Calibration> calibration;
  std::vector<int> active_clients;
  std::vector<double> client_distances;  ///< dp_c reported this round (DP variant)
  std::vector<double> ptnu_distances;    ///< d(F_theta, xi_c) after PTNU, per active client
  std::vector<int> ptnu_iterations;
};

/// Everything a round needs besides the mutable client and server state.
struct RoundContext {
  ProtocolConfig protocol;
  LossConfig loss;
  AugmentConfig augment;
  int partitions = 4;
  std::size_t d_feat = 32;
};

// --- aggregation and distance math ---

/// sum_c (n_c / n) f_c.
ParamVector aggregate_params(std::span<const ParamVector> models, std::span<const double> counts);
OnlineNetwork aggregate_online(std::span<const OnlineNetwork> models, std::span<const double> counts);

struct PtnuResult {
  ParamVector target;
  int iterations = 0;
  double distance = 0.0;
};

/// Repeats xi <- m_d xi + (1 - m_d) theta while d(theta, xi) > d_target.
PtnuResult ptnu(const ParamVector& online, ParamVector target, double d_target, double m_d,
                int max_iterations = 1'000'000);

/// dp_c = d(F_theta^r, f_xi_c^{r-1}).
double client_distance(const ParamVector& global_online_encoder, const ParamVector& previous_target);

/// alpha * mean(dp).
double predict_distance(std::span<const double> dp, double alpha);

/// d_exact / dp. With dp == 0 and d_exact == 0 the current alpha is kept.
double calibrate_alpha(double d_exact, double dp, double current_alpha);

// --- client training ---

/// MoCo-family local training: the local contrastive loss for FedMoCo, the
/// structural-matching loss for FCL. `remote` holds banks received this round. Returns the mean loss.
double moco_client_train(ClientState& client, std::span<const MemoryBank> remote, const RoundContext& ctx,
                         double learning_rate);

/// BYOL-family local training from the downloaded online network and the
/// given target initialization. Returns the mean loss.
double fclopt_client_train(ClientState& client, const OnlineNetwork& global, const TargetNetwork& target_init,
                           const RoundContext& ctx, double learning_rate);

// --- rounds ---

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Clients active in the next round (all of them at participation 1.0), in id order.
std::vector<int> select_clients(std::size_t n_clients, double participation, Rng& server_rng);

RoundResult fcl_round(std::vector<ClientState>& clients, ServerState& server, const RoundContext& ctx,
                      CommLedger& ledger, Rng& server_rng);

RoundResult fclopt_round(std::vector<ClientState>& clients, ServerState& server, const RoundContext& ctx,
                         CommLedger& ledger, Rng& server_rng);

// --- federation driver ---

struct FederationSetup {
  DataConfig data;
  ProtocolConfig protocol;
  LossConfig loss;
  AugmentConfig augment;
  int hidden = 64;
  int feat = 32;
  int predictor_hidden = 32;
  std::uint64_t seed = 1;

  ModelDims dims() const;
  void validate() const;
};

struct Federation {
  RoundContext ctx;
  std::vector<ClientState> clients;
  ServerState server;
  CommLedger ledger;
  Rng server_rng;
};

/// Builds clients from the cohort, initializes the global networks, and
/// warm-starts every local bank with momentum features so each bank is full from round 1.
Federation make_federation(const FederationSetup& setup, const Cohort& cohort);

RoundResult run_round(Federation& fed);

/// Bytes per round of each variant in closed form, assuming full participation.
std::uint64_t projected_round_bytes(Variant v, int round, std::size_t n_clients, std::size_t encoder_values,
                                    std::size_t predictor_values, std::size_t bank_entries, std::size_t d_feat,
                                    int calibration_period);

struct FederationResult {
  std::vector<RoundResult> rounds;
  /// Global online network before round 1, the paired random-init baseline.
  OnlineNetwork initial_online;
  OnlineNetwork final_online;
  TargetNetwork final_target;
  CommLedger ledger;
  /// Projected total of this run's sizes under FCL, for normalizing.
  std::uint64_t fcl_reference_bytes = 0;
};

FederationResult run_federation(const FederationSetup& setup);

/// Desk-scale proxy for fine-tuning: a softmax classifier over frozen
/// embeddings predicting the partition index, scored on held-out volumes.
struct ProbeConfig {
  int iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  bool shuffle_labels = false;
};

double linear_probe(const ParamVector& encoder, const Cohort& cohort, int partitions, std::uint64_t seed,
                    const ProbeConfig& cfg = {});

}  // namespace fcl

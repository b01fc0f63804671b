#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fcl/protocol.hpp"

namespace fcl {

/// Bad key, bad value or inconsistent settings. The message starts with the key path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  FederationSetup setup;
  std::filesystem::path output_dir = "fcl-out";
  /// The probe runs on a separate cohort generated with this seed.
  std::uint64_t probe_seed = 777;
  ProbeConfig probe;

  void validate() const;
  bool operator==(const ExperimentConfig&) const;
};

/// Every recognised key in render order, e.g. "protocol.ptnu_momentum".
std::vector<std::string> config_keys();

/// Sets one dotted key. Throws ConfigError naming the key.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);

/// Parses `key = value` lines; '#' starts a comment, blank lines are ignored.
/// Later lines win. Unset keys keep their defaults.
ExperimentConfig parse_config(std::string_view text, std::string_view origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies `key=value` overrides in order on top of `cfg`.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides);

/// Canonical text form; parse_config(render_config(c)) == c.
std::string render_config(const ExperimentConfig& cfg);

struct ExperimentOutcome {
  Variant variant = Variant::kFCL;
  std::uint64_t total_bytes = 0;
  std::uint64_t fcl_reference_bytes = 0;
  double probe_accuracy = 0.0;
  double random_init_probe_accuracy = 0.0;
  std::filesystem::path rounds_csv;
  std::filesystem::path ledger_csv;
};

/// round,variant,loss_mean,d_exact,d_pred,alpha,total_bytes. Unset values are empty.
void write_round_results_csv(std::ostream& out, const std::vector<RoundResult>& rounds);

/// Trains one variant and writes <variant>_rounds.csv, <variant>_ledger.csv,
/// <variant>_online.ckpt, <variant>_predictor.ckpt and <variant>_target.ckpt.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

struct LedgerSummaryRow {
  std::string label;
  std::uint64_t total = 0;
  std::map<Component, std::uint64_t> by_component;
  double ratio = 1.0;  ///< total / reference total
};

/// Rows in input order. The reference is the row labelled "fcl" if present, else the first.
/// Throws std::runtime_error when the ledgers were produced with different model sizes.
std::vector<LedgerSummaryRow> summarize_ledgers(const std::vector<std::pair<std::string, CommLedger>>& ledgers);

void write_summary_csv(std::ostream& out, const std::vector<LedgerSummaryRow>& rows);
void write_summary_table(std::ostream& out, const std::vector<LedgerSummaryRow>& rows);

/// Runs each variant with otherwise identical settings and writes compare.csv:
/// variant,total_bytes,normalized_bytes,probe_accuracy,random_init_probe_accuracy.
/// normalized_bytes is relative to the FCL projection for the same sizes.
std::vector<ExperimentOutcome> compare_variants(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                                                std::ostream* table = nullptr);

struct GradCheckCase {
  std::string name;
  int instances = 0;
  double max_rel_error = 0.0;
};

/// Finite-difference checks of the local contrastive, structural-matching and
/// BYOL losses, each against the query directly and end to end through a small
/// encoder. Cases: local/query, gsm/query, byol/query, local/encoder, gsm/encoder, byol/encoder.
std::vector<GradCheckCase> run_grad_check_suite(int instances, std::uint64_t seed,
                                                const GradCheckOptions& options = {});

}  // namespace fcl

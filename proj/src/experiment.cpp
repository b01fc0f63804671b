#include "fcl/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

namespace fcl {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view why) {
  throw ConfigError(std::string(key) + ": " + std::string(why) + " (got '" + std::string(value) + "')");
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc{} || res.ptr != end) {
    bad_value(key, value, std::is_integral_v<T> ? "expected an integer" : "expected a number");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) bad_value(key, value, "must be finite");
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view key, std::string_view value)> set;
};

enum class Range { kAny, kPositive, kNonNegative, kOpenUnit, kHalfOpenUnit, kUnitInterval, kUpToOne };

void check_range(std::string_view key, std::string_view value, double v, Range r) {
  switch (r) {
    case Range::kAny: return;
    case Range::kPositive:
      if (!(v > 0)) bad_value(key, value, "must be > 0");
      return;
    case Range::kNonNegative:
      if (!(v >= 0)) bad_value(key, value, "must be >= 0");
      return;
    case Range::kOpenUnit:
      if (!(v > 0 && v < 1)) bad_value(key, value, "must be in (0,1)");
      return;
    case Range::kHalfOpenUnit:
      if (!(v >= 0 && v < 1)) bad_value(key, value, "must be in [0,1)");
      return;
    case Range::kUnitInterval:
      if (!(v >= 0 && v <= 1)) bad_value(key, value, "must be in [0,1]");
      return;
    case Range::kUpToOne:
      if (!(v > 0 && v <= 1)) bad_value(key, value, "must be in (0,1]");
      return;
  }
}

template <typename T, typename Access>
Field number_field(std::string key, Access access, Range range = Range::kAny, T min_int = 0) {
  Field f;
  f.key = std::move(key);
  f.get = [access](const ExperimentConfig& c) {
    const T v = access(const_cast<ExperimentConfig&>(c));
    if constexpr (std::is_floating_point_v<T>) {
      return format_double(v);
    } else {
      return std::to_string(v);
    }
  };
  f.set = [access, range, min_int](ExperimentConfig& c, std::string_view k, std::string_view value) {
    const T v = parse_number<T>(k, value);
    if constexpr (std::is_integral_v<T>) {
      if (v < min_int) bad_value(k, value, "must be >= " + std::to_string(min_int));
    } else {
      check_range(k, value, v, range);
    }
    access(c) = v;
  };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using C = ExperimentConfig;
    std::vector<Field> t;
    t.push_back(number_field<std::uint64_t>("seed", [](C& c) -> auto& { return c.setup.seed; }));
    t.push_back(Field{"output.dir", [](const C& c) { return c.output_dir.string(); },
                      [](C& c, std::string_view k, std::string_view v) {
                        if (v.empty()) bad_value(k, v, "must not be empty");
                        c.output_dir = std::string(v);
                      }});

    t.push_back(number_field<int>("data.n_clients", [](C& c) -> auto& { return c.setup.data.n_clients; },
                                  Range::kAny, 1));
    t.push_back(number_field<int>("data.volumes_per_client",
                                  [](C& c) -> auto& { return c.setup.data.volumes_per_client; }, Range::kAny, 2));
    t.push_back(number_field<int>("data.depth", [](C& c) -> auto& { return c.setup.data.depth; }, Range::kAny, 2));
    t.push_back(number_field<int>("data.height", [](C& c) -> auto& { return c.setup.data.height; }, Range::kAny, 2));
    t.push_back(number_field<int>("data.width", [](C& c) -> auto& { return c.setup.data.width; }, Range::kAny, 2));
    t.push_back(number_field<int>("data.partitions", [](C& c) -> auto& { return c.setup.data.partitions; },
                                  Range::kAny, 2));
    t.push_back(number_field<std::uint64_t>("data.seed", [](C& c) -> auto& { return c.setup.data.seed; }));

    t.push_back(number_field<int>("model.hidden", [](C& c) -> auto& { return c.setup.hidden; }, Range::kAny, 1));
    t.push_back(number_field<int>("model.feat", [](C& c) -> auto& { return c.setup.feat; }, Range::kAny, 1));
    t.push_back(number_field<int>("model.predictor_hidden", [](C& c) -> auto& { return c.setup.predictor_hidden; },
                                  Range::kAny, 1));

    t.push_back(Field{"protocol.variant", [](const C& c) { return std::string(to_string(c.setup.protocol.variant)); },
                      [](C& c, std::string_view k, std::string_view v) {
                        try {
                          c.setup.protocol.variant = parse_variant(v);
                        } catch (const std::invalid_argument&) {
                          bad_value(k, v, "expected one of fedmoco, fedbyol, fcl, fclopt, fclopt-ptnu, fclopt-ptnu-dp");
                        }
                      }});
    t.push_back(number_field<int>("protocol.rounds", [](C& c) -> auto& { return c.setup.protocol.rounds; },
                                  Range::kAny, 1));
    t.push_back(number_field<int>("protocol.local_epochs",
                                  [](C& c) -> auto& { return c.setup.protocol.local_epochs; }, Range::kAny, 1));
    t.push_back(number_field<int>("protocol.batch_size", [](C& c) -> auto& { return c.setup.protocol.batch_size; },
                                  Range::kAny, 2));
    t.push_back(Field{"protocol.learning_rate",
                      [](const C& c) {
                        const auto& lr = c.setup.protocol.learning_rate;
                        return lr ? format_double(*lr) : std::string("default");
                      },
                      [](C& c, std::string_view k, std::string_view v) {
                        if (v == "default") {
                          c.setup.protocol.learning_rate.reset();
                          return;
                        }
                        const double lr = parse_number<double>(k, v);
                        check_range(k, v, lr, Range::kNonNegative);
                        c.setup.protocol.learning_rate = lr;
                      }});
    t.push_back(number_field<double>("protocol.momentum", [](C& c) -> auto& { return c.setup.protocol.momentum; },
                                     Range::kOpenUnit));
    t.push_back(number_field<double>("protocol.sgd_momentum",
                                     [](C& c) -> auto& { return c.setup.protocol.sgd_momentum; },
                                     Range::kHalfOpenUnit));
    t.push_back(number_field<double>("protocol.weight_decay",
                                     [](C& c) -> auto& { return c.setup.protocol.weight_decay; },
                                     Range::kNonNegative));
    t.push_back(number_field<double>("protocol.ptnu_momentum",
                                     [](C& c) -> auto& { return c.setup.protocol.ptnu_momentum; },
                                     Range::kOpenUnit));
    t.push_back(number_field<int>("protocol.calibration_period",
                                  [](C& c) -> auto& { return c.setup.protocol.calibration_period; }, Range::kAny, 1));
    t.push_back(number_field<double>("protocol.participation",
                                     [](C& c) -> auto& { return c.setup.protocol.participation; }, Range::kUpToOne));
    t.push_back(number_field<double>("protocol.initial_alpha",
                                     [](C& c) -> auto& { return c.setup.protocol.initial_alpha; }, Range::kPositive));
    t.push_back(number_field<int>("protocol.threads", [](C& c) -> auto& { return c.setup.protocol.threads; },
                                  Range::kAny, 1));

    t.push_back(number_field<double>("loss.temperature", [](C& c) -> auto& { return c.setup.loss.temperature; },
                                     Range::kPositive));
    t.push_back(number_field<int>("loss.bank_size", [](C& c) -> auto& { return c.setup.loss.bank_size; },
                                  Range::kAny, 1));

    t.push_back(number_field<double>("augment.min_crop_scale",
                                     [](C& c) -> auto& { return c.setup.augment.min_crop_scale; }, Range::kUpToOne));
    t.push_back(number_field<double>("augment.max_crop_scale",
                                     [](C& c) -> auto& { return c.setup.augment.max_crop_scale; }, Range::kUpToOne));
    t.push_back(number_field<double>("augment.flip_probability",
                                     [](C& c) -> auto& { return c.setup.augment.flip_probability; },
                                     Range::kUnitInterval));
    t.push_back(number_field<double>("augment.noise_sigma",
                                     [](C& c) -> auto& { return c.setup.augment.noise_sigma; }, Range::kNonNegative));

    t.push_back(number_field<std::uint64_t>("probe.seed", [](C& c) -> auto& { return c.probe_seed; }));
    t.push_back(number_field<int>("probe.iterations", [](C& c) -> auto& { return c.probe.iterations; },
                                  Range::kAny, 1));
    t.push_back(number_field<double>("probe.learning_rate", [](C& c) -> auto& { return c.probe.learning_rate; },
                                     Range::kPositive));
    t.push_back(number_field<double>("probe.l2", [](C& c) -> auto& { return c.probe.l2; }, Range::kNonNegative));
    return t;
  }();
  return table;
}

void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body,
                bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  body(out);
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

void write_outcomes_csv(std::ostream& out, const std::vector<ExperimentOutcome>& outcomes) {
  out << "variant,total_bytes,normalized_bytes,probe_accuracy,random_init_probe_accuracy\n";
  for (const auto& o : outcomes) {
    const double norm = static_cast<double>(o.total_bytes) / static_cast<double>(o.fcl_reference_bytes);
    out << to_string(o.variant) << ',' << o.total_bytes << ',' << std::fixed << std::setprecision(3) << norm << ','
        << std::setprecision(4) << o.probe_accuracy << ',' << o.random_init_probe_accuracy << '\n';
    out.unsetf(std::ios::floatfield);
  }
}

// Per-message sizes of one component; a single value when every message has the same size.
std::set<std::uint64_t> message_sizes(const CommLedger& ledger, Component component) {
  std::set<std::uint64_t> sizes;
  for (const auto& e : ledger.entries()) {
    if (e.component == component) sizes.insert(e.bytes);
  }
  return sizes;
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    setup.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (output_dir.empty()) throw ConfigError("output.dir: must not be empty");
  if (probe.iterations < 1) throw ConfigError("probe.iterations: must be >= 1");
  if (!(probe.learning_rate > 0)) throw ConfigError("probe.learning_rate: must be > 0");
  if (!(probe.l2 >= 0)) throw ConfigError("probe.l2: must be >= 0");
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return setup.data == o.setup.data && setup.protocol == o.setup.protocol && setup.loss == o.setup.loss &&
         setup.augment == o.setup.augment && setup.dims() == o.setup.dims() && setup.seed == o.setup.seed &&
         output_dir == o.output_dir && probe_seed == o.probe_seed && probe.iterations == o.probe.iterations &&
         probe.learning_rate == o.probe.learning_rate && probe.l2 == o.probe.l2 &&
         probe.shuffle_labels == o.probe.shuffle_labels;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError(std::string(key) + ": unknown key");
}

ExperimentConfig parse_config(std::string_view text, std::string_view origin) {
  ExperimentConfig cfg;
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "': expected key=value");
    set_config_value(cfg, trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
  }
  cfg.validate();
}

std::string render_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = dot == std::string::npos ? std::string() : f.key.substr(0, dot);
    if (s != section && !out.empty()) out += '\n';
    section = s;
    out += f.key + " = " + f.get(cfg) + '\n';
  }
  return out;
}

void write_round_results_csv(std::ostream& out, const std::vector<RoundResult>& rounds) {
  out << "round,variant,loss_mean,d_exact,d_pred,alpha,total_bytes\n";
  for (const auto& r : rounds) {
    out << r.round << ',' << to_string(r.variant) << ',' << format_double(r.loss_mean) << ','
        << optional_cell(r.d_exact) << ',' << optional_cell(r.d_pred) << ',' << format_double(r.alpha) << ','
        << r.bytes << '\n';
  }
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + cfg.output_dir.string() + ": " + ec.message());

  const FederationResult result = run_federation(cfg.setup);
  const std::string stem = std::string(to_string(cfg.setup.protocol.variant));
  const auto dir = cfg.output_dir;

  ExperimentOutcome outcome;
  outcome.variant = cfg.setup.protocol.variant;
  outcome.total_bytes = result.ledger.total();
  outcome.fcl_reference_bytes = result.fcl_reference_bytes;
  outcome.rounds_csv = dir / (stem + "_rounds.csv");
  outcome.ledger_csv = dir / (stem + "_ledger.csv");

  write_file(outcome.rounds_csv, [&](std::ostream& o) { write_round_results_csv(o, result.rounds); });
  write_file(outcome.ledger_csv, [&](std::ostream& o) { result.ledger.write_csv(o); });
  write_file(dir / (stem + "_online.ckpt"), [&](std::ostream& o) { write_params(o, result.final_online.encoder); },
             true);
  write_file(dir / (stem + "_predictor.ckpt"),
             [&](std::ostream& o) { write_params(o, result.final_online.predictor); }, true);
  write_file(dir / (stem + "_target.ckpt"), [&](std::ostream& o) { write_params(o, result.final_target.encoder); },
             true);

  DataConfig probe_data = cfg.setup.data;
  probe_data.seed = cfg.probe_seed;
  const Cohort probe_cohort = generate_cohort(probe_data);
  const int s = cfg.setup.data.partitions;
  outcome.probe_accuracy = linear_probe(result.final_online.encoder, probe_cohort, s, cfg.probe_seed, cfg.probe);
  outcome.random_init_probe_accuracy =
      linear_probe(result.initial_online.encoder, probe_cohort, s, cfg.probe_seed, cfg.probe);

  write_file(dir / (stem + "_summary.csv"), [&](std::ostream& o) { write_outcomes_csv(o, {outcome}); });
  return outcome;
}

std::vector<LedgerSummaryRow> summarize_ledgers(const std::vector<std::pair<std::string, CommLedger>>& ledgers) {
  if (ledgers.empty()) throw std::invalid_argument("summarize: no ledgers given");
  std::optional<std::uint64_t> encoder_bytes;
  std::optional<std::uint64_t> predictor_bytes;
  auto check = [](std::optional<std::uint64_t>& expected, const std::set<std::uint64_t>& sizes,
                  const std::string& label, std::string_view what) {
    if (sizes.size() > 1) throw std::runtime_error("summarize: " + label + " has " + std::string(what) +
                                                   " messages of differing sizes");
    if (sizes.empty()) return;
    if (expected && *expected != *sizes.begin()) {
      throw std::runtime_error("summarize: " + label + " was produced with a different model size (" +
                               std::string(what) + " message " + std::to_string(*sizes.begin()) + " bytes, expected " +
                               std::to_string(*expected) + ")");
    }
    expected = *sizes.begin();
  };

  std::vector<LedgerSummaryRow> rows;
  for (const auto& [label, ledger] : ledgers) {
    check(encoder_bytes, message_sizes(ledger, Component::kOnlineNet), label, "online_net");
    check(encoder_bytes, message_sizes(ledger, Component::kTargetNet), label, "target_net");
    check(predictor_bytes, message_sizes(ledger, Component::kPredictor), label, "predictor");
    LedgerSummaryRow row;
    row.label = label;
    row.total = ledger.total();
    for (Component c : kAllComponents) row.by_component[c] = ledger.total(c);
    rows.push_back(std::move(row));
  }

  std::size_t ref = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].label == "fcl") {
      ref = i;
      break;
    }
  }
  if (rows[ref].total == 0) throw std::runtime_error("summarize: reference ledger '" + rows[ref].label + "' is empty");
  for (auto& row : rows) row.ratio = static_cast<double>(row.total) / static_cast<double>(rows[ref].total);
  return rows;
}

void write_summary_csv(std::ostream& out, const std::vector<LedgerSummaryRow>& rows) {
  out << "variant,total_bytes";
  for (Component c : kAllComponents) out << ',' << to_string(c);
  out << ",ratio\n";
  for (const auto& row : rows) {
    out << row.label << ',' << row.total;
    for (Component c : kAllComponents) out << ',' << row.by_component.at(c);
    out << ',' << std::fixed << std::setprecision(3) << row.ratio << '\n';
    out.unsetf(std::ios::floatfield);
  }
}

void write_summary_table(std::ostream& out, const std::vector<LedgerSummaryRow>& rows) {
  out << std::left << std::setw(16) << "variant" << std::right << std::setw(14) << "total";
  for (Component c : kAllComponents) out << std::setw(14) << to_string(c);
  out << std::setw(9) << "ratio" << '\n';
  for (const auto& row : rows) {
    out << std::left << std::setw(16) << row.label << std::right << std::setw(14) << row.total;
    for (Component c : kAllComponents) out << std::setw(14) << row.by_component.at(c);
    out << std::setw(9) << std::fixed << std::setprecision(3) << row.ratio << '\n';
    out.unsetf(std::ios::floatfield);
  }
}

std::vector<ExperimentOutcome> compare_variants(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                                                std::ostream* table) {
  if (variants.empty()) throw ConfigError("compare: no variants given");
  std::vector<ExperimentOutcome> outcomes;
  for (Variant v : variants) {
    ExperimentConfig run = cfg;
    run.setup.protocol.variant = v;
    outcomes.push_back(run_experiment(run));
  }
  write_file(cfg.output_dir / "compare.csv", [&](std::ostream& o) { write_outcomes_csv(o, outcomes); });
  if (table) {
    *table << std::left << std::setw(16) << "variant" << std::right << std::setw(14) << "total_bytes"
           << std::setw(12) << "normalized" << std::setw(10) << "probe" << std::setw(13) << "random_init" << '\n';
    for (const auto& o : outcomes) {
      const double norm = static_cast<double>(o.total_bytes) / static_cast<double>(o.fcl_reference_bytes);
      *table << std::left << std::setw(16) << to_string(o.variant) << std::right << std::setw(14) << o.total_bytes
             << std::fixed << std::setprecision(3) << std::setw(12) << norm << std::setw(10) << o.probe_accuracy
             << std::setw(13) << o.random_init_probe_accuracy << '\n';
      table->unsetf(std::ios::floatfield);
    }
  }
  return outcomes;
}

}  // namespace fcl

namespace fcl {

namespace {

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(d);
  double n = 0.0;
  while (!(n > 1e-3)) {
    for (double& x : v) x = g(rng);
    n = l2_norm(v);
  }
  for (double& x : v) x /= n;
  return v;
}

struct LossInstance {
  FeaturePool positives, negatives, remote;
  std::vector<double> target;
  LossConfig loss;
  int partition = 0;
};

LossInstance random_instance(std::size_t d, Rng& rng) {
  std::uniform_int_distribution<int> count(1, 8);
  std::uniform_int_distribution<int> part(0, 3);
  std::uniform_real_distribution<double> tau(0.05, 1.0);
  LossInstance inst;
  inst.loss.temperature = tau(rng);
  inst.partition = part(rng);
  const int n_pos = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int i = 0; i < n_pos; ++i) inst.positives.push_back(FeatureVector{random_unit(d, rng), 0, i, inst.partition});
  const int n_neg = count(rng);
  for (int i = 0; i < n_neg; ++i) inst.negatives.push_back(FeatureVector{random_unit(d, rng), 1 + i, i, part(rng)});
  inst.remote = remote_positives(inst.partition, inst.negatives);
  if (inst.remote.empty()) {
    inst.negatives.front().partition = inst.partition;
    inst.remote = remote_positives(inst.partition, inst.negatives);
  }
  inst.target = random_unit(d, rng);
  return inst;
}

LossResult evaluate(std::string_view loss, const LossInstance& inst, std::span<const double> q) {
  if (loss == "local") return local_contrastive_loss(q, inst.positives, inst.negatives, inst.loss);
  if (loss == "gsm") return gsm_loss(q, inst.positives, inst.remote, inst.negatives, inst.loss);
  return byol_loss(q, inst.target);
}

}  // namespace

std::vector<GradCheckCase> run_grad_check_suite(int instances, std::uint64_t seed, const GradCheckOptions& options) {
  if (instances < 1) throw std::invalid_argument("grad-check: instances must be >= 1");
  const ModelDims dims{12, 16, 6, 6};
  const std::size_t d = static_cast<std::size_t>(dims.feat);
  constexpr std::size_t kBatch = 3;
  const std::string_view losses[] = {"local", "gsm", "byol"};

  std::vector<GradCheckCase> cases;
  for (std::string_view target : {"query", "encoder"}) {
    for (std::string_view loss : losses) {
      GradCheckCase c{std::string(loss) + "/" + std::string(target), instances, 0.0};
      Rng rng = make_rng(seed, {cases.size()});
      for (int i = 0; i < instances; ++i) {
        const LossInstance inst = random_instance(d, rng);
        double err = 0.0;
        if (target == "query") {
          std::normal_distribution<double> g(0.0, 1.0);
          Tensor q = Tensor::vector(std::vector<double>(d));
          for (double& x : q.values()) x = g(rng);
          err = grad_check(
              [&](const Tensor& point, Tensor* grad) {
                const LossResult r = evaluate(loss, inst, point.data());
                if (grad) std::copy(r.grad.begin(), r.grad.end(), grad->values().begin());
                return r.loss;
              },
              q, options);
        } else {
          // Jitter every parameter so biases are nonzero as they would be after training.
          ParamVector encoder = init_encoder(dims, rng);
          std::normal_distribution<double> jitter(0.0, 0.1);
          for (double& x : encoder.values()) x += jitter(rng);
          const ParamVector predictor = init_predictor(dims, rng);
          std::uniform_real_distribution<double> pixel(0.0, 1.0);
          Tensor images({kBatch, static_cast<std::size_t>(dims.input)});
          for (double& x : images.values()) x = pixel(rng);
          err = grad_check(
              [&](const Tensor& point, Tensor* grad) {
                const ParamVector params(encoder.layout(), point.values());
                GradTape tape;
                const MlpTrace enc = trace_mlp(tape, params, tape.constant(images), true);
                Var out = enc.output;
                if (loss == "byol") out = trace_mlp(tape, predictor, enc.output, false).output;
                const Tensor& z = tape.value(out);
                Tensor seed_grad(z.shape());
                double total = 0.0;
                for (std::size_t b = 0; b < kBatch; ++b) {
                  const LossResult r = evaluate(loss, inst, z.row(b));
                  total += r.loss / kBatch;
                  auto g = seed_grad.row(b);
                  for (std::size_t j = 0; j < g.size(); ++j) g[j] = r.grad[j] / kBatch;
                }
                if (grad) {
                  tape.backward(out, seed_grad);
                  const ParamVector g = gather_gradient(tape, enc, params);
                  std::copy(g.values().begin(), g.values().end(), grad->values().begin());
                }
                return total;
              },
              Tensor::vector({encoder.values().begin(), encoder.values().end()}), options);
        }
        c.max_rel_error = std::max(c.max_rel_error, err);
      }
      cases.push_back(std::move(c));
    }
  }
  return cases;
}

}  // namespace fcl

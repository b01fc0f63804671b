// fclsim: run, compare and summarize federated contrastive pretraining variants.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error
// (including a failed grad-check).

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "fcl/experiment.hpp"

namespace {

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string variant;
  std::string rounds;
  std::string seed;
  std::string out;
  std::string threads;

  void attach(CLI::App* app, bool with_variant) {
    app->add_option("-c,--config", config_path, "Config file of 'section.key = value' lines");
    app->add_option("-s,--set", overrides, "Override one key, e.g. --set protocol.rounds=10 (repeatable)");
    if (with_variant) app->add_option("--variant", variant, "fedmoco, fedbyol, fcl, fclopt, fclopt-ptnu, fclopt-ptnu-dp");
    app->add_option("--rounds", rounds, "Shorthand for protocol.rounds");
    app->add_option("--seed", seed, "Shorthand for seed");
    app->add_option("-o,--out", out, "Shorthand for output.dir");
    app->add_option("--threads", threads, "Shorthand for protocol.threads");
  }

  fcl::ExperimentConfig resolve() const {
    fcl::ExperimentConfig cfg = config_path.empty() ? fcl::ExperimentConfig{} : fcl::load_config(config_path);
    std::vector<std::string> all;
    if (!variant.empty()) all.push_back("protocol.variant=" + variant);
    if (!rounds.empty()) all.push_back("protocol.rounds=" + rounds);
    if (!seed.empty()) all.push_back("seed=" + seed);
    if (!out.empty()) all.push_back("output.dir=" + out);
    if (!threads.empty()) all.push_back("protocol.threads=" + threads);
    all.insert(all.end(), overrides.begin(), overrides.end());
    fcl::apply_overrides(cfg, all);
    return cfg;
  }
};

std::vector<fcl::Variant> parse_variant_list(const std::string& list) {
  std::vector<fcl::Variant> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto comma = list.find(',', start);
    const std::string name = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      out.push_back(fcl::parse_variant(name));
    } catch (const std::invalid_argument&) {
      throw fcl::ConfigError("--variants: unknown variant '" + name + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string label_of(const std::string& path) {
  std::string stem = std::filesystem::path(path).stem().string();
  const std::string suffix = "_ledger";
  if (stem.size() > suffix.size() && stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
  return stem;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated contrastive pretraining simulator"};
  app.require_subcommand(1);

  ConfigFlags run_flags;
  bool dump_config = false;
  auto* run = app.add_subcommand("run", "Train one variant and write round results, ledger and checkpoints");
  run_flags.attach(run, true);
  run->add_flag("--print-config", dump_config, "Print the resolved config and exit");

  ConfigFlags compare_flags;
  std::string variants = "fcl,fclopt,fclopt-ptnu,fclopt-ptnu-dp";
  auto* compare = app.add_subcommand("compare", "Run several variants and tabulate bytes and probe accuracy");
  compare_flags.attach(compare, false);
  compare->add_option("--variants", variants, "Comma-separated variant list")->capture_default_str();

  std::vector<std::string> ledgers;
  std::string summary_csv;
  auto* summarize = app.add_subcommand("summarize", "Compare ledger CSVs: totals, component breakdown, ratio vs fcl");
  summarize->add_option("ledgers", ledgers, "Ledger CSV files; labels come from file names")->required();
  summarize->add_option("--csv", summary_csv, "Also write the table as CSV");

  int gc_instances = 50;
  unsigned long long gc_seed = 1;
  double gc_step = 1e-5;
  double gc_tolerance = 1e-4;
  auto* grad = app.add_subcommand("grad-check", "Compare analytic loss gradients with central differences");
  grad->add_option("--instances", gc_instances, "Random instances per case")->capture_default_str();
  grad->add_option("--seed", gc_seed)->capture_default_str();
  grad->add_option("--step", gc_step)->capture_default_str();
  grad->add_option("--tolerance", gc_tolerance, "Max relative error")->capture_default_str();

  ConfigFlags probe_flags;
  std::string checkpoint;
  bool shuffle_labels = false;
  auto* probe = app.add_subcommand("probe", "Partition linear probe of an encoder checkpoint");
  probe_flags.attach(probe, false);
  probe->add_option("--checkpoint", checkpoint, "Encoder checkpoint; random init when omitted");
  probe->add_flag("--shuffle-labels", shuffle_labels, "Chance-level sanity run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) {
      const fcl::ExperimentConfig cfg = run_flags.resolve();
      if (dump_config) {
        std::cout << fcl::render_config(cfg);
        return 0;
      }
      const auto outcome = fcl::run_experiment(cfg);
      std::cout << "variant        " << fcl::to_string(outcome.variant) << '\n'
                << "total bytes    " << outcome.total_bytes << '\n'
                << "normalized     " << std::fixed << std::setprecision(3)
                << static_cast<double>(outcome.total_bytes) / static_cast<double>(outcome.fcl_reference_bytes) << '\n'
                << "probe          " << outcome.probe_accuracy << '\n'
                << "random init    " << outcome.random_init_probe_accuracy << '\n'
                << "rounds csv     " << outcome.rounds_csv.string() << '\n'
                << "ledger csv     " << outcome.ledger_csv.string() << '\n';
    } else if (*compare) {
      const fcl::ExperimentConfig cfg = compare_flags.resolve();
      fcl::compare_variants(cfg, parse_variant_list(variants), &std::cout);
    } else if (*summarize) {
      std::vector<std::pair<std::string, fcl::CommLedger>> loaded;
      for (const auto& path : ledgers) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot read " + path);
        loaded.emplace_back(label_of(path), fcl::CommLedger::read_csv(in));
      }
      const auto rows = fcl::summarize_ledgers(loaded);
      fcl::write_summary_table(std::cout, rows);
      if (!summary_csv.empty()) {
        std::ofstream out(summary_csv);
        fcl::write_summary_csv(out, rows);
        if (!out) throw std::runtime_error("write failed: " + summary_csv);
      }
    } else if (*grad) {
      if (gc_instances < 1) throw fcl::ConfigError("--instances: must be >= 1");
      if (!(gc_step >= 1e-7 && gc_step <= 1e-3)) throw fcl::ConfigError("--step: must lie in [1e-7, 1e-3]");
      fcl::GradCheckOptions options;
      options.step = gc_step;
      bool ok = true;
      for (const auto& c : fcl::run_grad_check_suite(gc_instances, gc_seed, options)) {
        const bool pass = c.max_rel_error < gc_tolerance;
        ok = ok && pass;
        std::cout << std::left << std::setw(16) << c.name << " instances=" << c.instances
                  << " max_rel_error=" << std::scientific << std::setprecision(3) << c.max_rel_error << "  "
                  << (pass ? "ok" : "FAIL") << '\n';
      }
      return ok ? 0 : 2;
    } else if (*probe) {
      fcl::ExperimentConfig cfg = probe_flags.resolve();
      const fcl::ModelDims dims = cfg.setup.dims();
      fcl::ParamVector encoder;
      if (checkpoint.empty()) {
        fcl::Rng rng = fcl::make_rng(cfg.setup.seed, {0x1417});
        encoder = fcl::init_encoder(dims, rng);
      } else {
        std::ifstream in(checkpoint, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read " + checkpoint);
        encoder = fcl::read_params(in);
        if (encoder.layout() != fcl::encoder_layout(dims)) {
          throw std::runtime_error(checkpoint + ": layout does not match model.* settings");
        }
      }
      fcl::DataConfig data = cfg.setup.data;
      data.seed = cfg.probe_seed;
      cfg.probe.shuffle_labels = shuffle_labels;
      const double acc =
          fcl::linear_probe(encoder, fcl::generate_cohort(data), data.partitions, cfg.probe_seed, cfg.probe);
      std::cout << "probe accuracy " << std::fixed << std::setprecision(4) << acc << '\n';
    }
  } catch (const fcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

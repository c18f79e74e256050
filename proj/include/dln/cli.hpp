#pragma once

// Command-line front end: train / sweep / infer / report. Kept in a
// header (the binary in tools/ is a two-liner) so the argument handling
// and exit-code mapping are testable in-process.
//
// Exit codes: 0 success, 2 configuration error (bad flags, bad config
// file, missing run artifacts), 3 backend failure, 4 data error.
// Anything else unexpected exits 1.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dln/config.hpp"
#include "dln/runner.hpp"

namespace dln {
namespace cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitBackend = 3;
inline constexpr int kExitData = 4;

namespace detail {

// --set key=value overrides, same keys as the sweep axes.
inline void apply_cli_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_override(cfg.hp, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
}

inline RunConfig load_cli_config(const std::string& config_path,
                                 const std::vector<std::string>& sets,
                                 const std::vector<std::uint64_t>& seeds) {
  RunConfig cfg = load_config(config_path);
  if (!seeds.empty()) cfg.seeds = seeds;
  apply_cli_overrides(cfg, sets);
  return cfg;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"prompt-layer stack trainer"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  std::string run_path;
  std::string input;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  std::optional<std::uint64_t> infer_seed;

  auto add_config_options = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config YAML")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--output-dir", output_dir,
                    "where to write the run directory (default: config output_dir)");
    cmd->add_option("--seeds", seeds, "override the config seed list")->delimiter(',');
    cmd->add_option("--set", sets,
                    "hyperparameter override, key=value (repeatable; same keys as sweep axes)");
  };

  CLI::App* train = app.add_subcommand("train", "train the configured stack, one run per seed");
  add_config_options(train);
  CLI::App* sweep = app.add_subcommand("sweep", "grid search over the config's sweep axes");
  add_config_options(sweep);

  CLI::App* infer = app.add_subcommand("infer", "temperature-0 forward pass with trained prompts");
  infer->add_option("--run", run_path, "run directory or a result.json inside one")->required();
  infer->add_option("--input", input, "input text")->required();
  infer->add_option("--seed", infer_seed, "use this seed's result instead of the best one");

  CLI::App* report = app.add_subcommand("report", "usage, cost and validation trajectory");
  report->add_option("--run", run_path, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) {
      const RunConfig cfg = detail::load_cli_config(config_path, sets, seeds);
      const auto run_dir =
          output_dir.empty() ? cfg.resolve(cfg.output_dir) : std::filesystem::path(output_dir);
      const auto aggregate = runner::run_train(cfg, run_dir);
      out << "run directory: " << run_dir.string() << "\n"
          << aggregate.dump(2) << "\n";
      return kExitOk;
    }
    if (sweep->parsed()) {
      const RunConfig cfg = detail::load_cli_config(config_path, sets, seeds);
      const auto sweep_dir =
          output_dir.empty() ? cfg.resolve(cfg.output_dir) : std::filesystem::path(output_dir);
      const auto doc = runner::run_sweep(cfg, sweep_dir);
      out << "sweep directory: " << sweep_dir.string() << "\n"
          << doc.dump(2) << "\n";
      return kExitOk;
    }
    if (infer->parsed()) {
      const auto result = runner::run_infer(run_path, input, infer_seed);
      for (std::size_t l = 0; l < result.hiddens.size(); ++l)
        out << "hidden " << (l + 1) << ": " << result.hiddens[l] << "\n";
      out << result.output << "\n";
      return kExitOk;
    }
    if (report->parsed()) {
      out << runner::run_report(run_path).dump(2) << "\n";
      return kExitOk;
    }
    err << "no subcommand\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TemplateError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BatchError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace cli
}  // namespace dln

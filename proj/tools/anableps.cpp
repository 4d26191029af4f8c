// SPDX-License-Identifier: Apache-2.0
//
// anableps <mode> --config <path> [--seed N] [--out DIR] [--policy NAME]
//          [--ablation full|s|c] [--print-config]
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "anableps/common.hpp"
#include "anableps/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace anableps;
  CLI::App app{"Anableps bitrate adaptation simulator and trainer"};
  std::string mode;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> policy;
  std::optional<std::string> ablation;
  bool print_config = false;
  app.add_option("mode", mode,
                 "simulate | train-cbpn | train-abrn | evaluate | compare | gen-traces");
  app.add_option("--config", config_path, "INI configuration file");
  app.add_option("--seed", seed, "master seed (overrides experiment.seed)");
  app.add_option("--out", out, "output directory (overrides experiment.out_dir)");
  app.add_option("--policy", policy, "gcc | fixed | oracle | random | anableps[-full|-c|-s]");
  app.add_option("--ablation", ablation, "full | s | c");
  app.add_flag("--print-config", print_config, "print the effective configuration and exit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    harness::ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = harness::load_config(config_path);
    } else if (!print_config) {
      throw ConfigError("--config is required");
    }
    if (!mode.empty()) cfg.mode = harness::parse_mode(mode);
    if (seed) cfg.seed = *seed;
    // Command-line paths are relative to the working directory.
    if (out) cfg.out_dir = std::filesystem::absolute(*out);
    if (policy) cfg.policy = *policy;
    if (ablation) cfg.ablation = abrn::parse_ablation(*ablation);
    if (print_config) {
      std::cout << harness::format_config(cfg);
      return 0;
    }
    if (mode.empty()) throw ConfigError("missing mode");
    const auto summary = harness::run_experiment(cfg);
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

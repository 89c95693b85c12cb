// Command-line driver: duality verification, collapse checks, order sweeps,
// effective-field agreement, and sampling runs.
#include <cstdlib>
#include <functional>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "z2/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run(const Options& opts, const std::function<z2::CommandResult(const z2::ExperimentConfig&)>& command) {
  z2::ExperimentConfig cfg;
  try {
    cfg = opts.config.empty() ? z2::default_config() : z2::load_config(opts.config);
  } catch (const z2::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return z2::kExitConfig;
  }
  if (opts.seed) cfg.seed = *opts.seed;
  if (!opts.out.empty()) cfg.output = opts.out;
  try {
    const auto result = command(cfg);
    std::cout << result.report;
    z2::write_artifacts(result, cfg.output);
    return result.exit_code;
  } catch (const z2::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return z2::kExitConfig;
  } catch (const z2::ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return z2::kExitAssertion;
  } catch (const z2::DualityViolation& e) {
    std::cerr << "duality violation: " << e.what() << "\n";
    return z2::kExitAssertion;
  } catch (const z2::InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return z2::kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided zigzag sampling toolkit"};
  app.require_subcommand(1);
  Options opts;
  int exit_code = z2::kExitOk;

  auto add = [&](const char* name, const char* help, auto command) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "JSON experiment configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "Override the configured seed");
    sub->add_option("--out", opts.out, "Output prefix for .steps.csv, .fit.csv and .summary.json");
    sub->callback([&, command] { exit_code = run(opts, command); });
  };
  add("verify-duality", "Check A^-1 B + C = 0 and A C + B = 0 on every step", z2::cmd_verify_duality);
  add("collapse-check", "Randomized checks of the implicit collapse identities", z2::cmd_collapse_check);
  add("order-sweep", "Fit surrogate-error and local-truncation-error orders in h", z2::cmd_order_sweep);
  add("bea-check", "Compare discrete trajectories with the flow of the effective field", z2::cmd_bea_check);
  add("sample", "Run seeded trajectories and report NFE, timing and quality proxy", z2::cmd_sample);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : z2::kExitConfig;
  }
  return exit_code;
}

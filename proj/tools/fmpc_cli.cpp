// Command-line front end.
//
//   fmpc run <config> [--seed N]
//   fmpc compare <configA> <configB> --metric <m> [--seed N]
//   fmpc sweep <config> --param <section.key> --values <v1,v2,...> [--seed N]
//
// Outputs go below $FMPC_OUTPUT_ROOT (default ./output).

#include "fmpc/experiments.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

std::filesystem::path output_root() {
  const char* env = std::getenv("FMPC_OUTPUT_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("output");
}

fmpc::Scenario load(const std::string& path, const std::optional<std::uint64_t>& seed) {
  fmpc::Scenario sc = fmpc::load_scenario(path);
  if (seed) sc.seed = *seed;
  return sc;
}

void report(const std::string& label, const fmpc::ScenarioOutcome& o) {
  std::cout << label << ": exit " << o.exit_code << ", outputs in " << o.directory.string()
            << "\n";
  for (const auto& name : fmpc::comparison_metrics()) {
    const double v = o.metric(name);
    if (v == v) std::cout << "  " << name << " = " << fmpc::format_number(v) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Funnel control, sampled-data funnel control and Funnel-MPC experiments"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "override the scenario seed");

  std::string run_config;
  auto* run = app.add_subcommand("run", "run one scenario");
  run->add_option("config", run_config, "scenario file")->required();

  std::string cmp_a, cmp_b, metric;
  auto* compare = app.add_subcommand("compare", "run two scenarios and compare one metric");
  compare->add_option("config_a", cmp_a, "first scenario")->required();
  compare->add_option("config_b", cmp_b, "second scenario")->required();
  compare->add_option("--metric", metric, "performance, min_margin, control_range or coarsest_feasible_tau")
      ->required();

  std::string sweep_config, param;
  std::vector<std::string> values;
  auto* sweep = app.add_subcommand("sweep", "re-run a scenario over values of one setting");
  sweep->add_option("config", sweep_config, "scenario file")->required();
  sweep->add_option("--param", param, "setting as section.key, e.g. zoh.tau")->required();
  sweep->add_option("--values", values, "comma separated values")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fmpc::kExitConfig;
  }

  const std::filesystem::path root = output_root();
  try {
    if (*run) {
      const fmpc::Scenario sc = load(run_config, seed);
      const auto out = fmpc::run_scenario(sc, fmpc::output_directory(root, sc));
      report(sc.name, out);
      return out.exit_code;
    }
    if (*compare) {
      const fmpc::Scenario a = load(cmp_a, seed);
      const fmpc::Scenario b = load(cmp_b, seed);
      const auto dir = root / ("compare_" + a.name + "_vs_" + b.name);
      const fmpc::Comparison c = fmpc::compare_scenarios(a, b, metric, root, dir);
      std::cout << c.metric << ": " << c.scenario_a << " = " << fmpc::format_number(c.value_a)
                << ", " << c.scenario_b << " = " << fmpc::format_number(c.value_b)
                << ", ratio = " << fmpc::format_number(c.ratio) << "\n"
                << "written to " << (dir / "compare.csv").string() << "\n";
      return fmpc::kExitOk;
    }
    if (*sweep) {
      const auto tree = fmpc::read_scenario_tree(sweep_config);
      const auto entries = fmpc::sweep_scenario(
          tree, std::filesystem::path(sweep_config).stem().string(), param, values, root, seed);
      int code = fmpc::kExitOk;
      for (const auto& e : entries) {
        report(param + " = " + e.value, e.outcome);
        code = std::max(code, e.outcome.exit_code);
      }
      return code;
    }
  } catch (const fmpc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return fmpc::kExitConfig;
  } catch (const fmpc::IncomparableScenarios& e) {
    std::cerr << "error: " << e.what() << "\n";
    return fmpc::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return fmpc::kExitInfeasible;
  }
  return fmpc::kExitOk;
}

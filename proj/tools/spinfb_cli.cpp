// spinfb: runs one simulation scenario from a key-value configuration.
//
//   spinfb rabi --config presets/rabi_q.cfg --out runs/rabi
//   spinfb validate --config presets/latency_sweep.cfg
//
// Exit status: 0 pass, 1 acceptance fail, 2 configuration error, 3 runtime error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "spinfb/scenarios.hpp"

namespace {

bool g_quiet = false;

void quiet_warning(std::string_view) {}

void print_report(const spinfb::ScenarioReport& rep) {
  const auto& a = rep.aggregate;
  std::cout << a.scenario;
  if (rep.runs.size() > 1) std::cout << " (" << rep.runs.size() << " seeds, means)";
  std::cout << '\n';
  for (const auto& [k, v] : a.results) std::printf("  %-28s %.6g\n", k.c_str(), v);
  for (const auto& c : a.checks)
    std::printf("  [%s] %s = %.6g, band %s\n", c.pass ? "PASS" : "FAIL", c.band.key.c_str(), c.value,
                c.band.describe().c_str());
  if (!a.error.empty()) std::cout << "  error: " << a.error << '\n';
  if (a.partial) std::cout << "  outputs are partial\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spin-qubit feedback and noise simulator"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> shots;
  std::string out;

  std::vector<CLI::App*> subs;
  for (const auto& name : spinfb::scenario_names()) subs.push_back(app.add_subcommand(name, "run the " + name + " scenario"));
  auto* validate = app.add_subcommand("validate", "check a configuration without running it");
  subs.push_back(validate);
  for (auto* s : subs) {
    s->add_option("--config", config, "configuration file")->required()->check(CLI::ExistingFile);
    s->add_flag("--quiet", g_quiet, "suppress warnings and the console report");
    if (s == validate) continue;
    s->add_option("--seed", seed, "run a single seed instead of [run] seeds");
    s->add_option("--out", out, "output directory (default: no files)");
    s->add_option("--shots", shots, "override the scenario's shot count")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (g_quiet) spinfb::set_warning_handler(&quiet_warning);

  CLI::App* chosen = app.get_subcommands().front();
  const std::string scenario = chosen == validate ? std::string{} : chosen->get_name();

  if (chosen == validate) {
    const auto report = spinfb::validate_config(config);
    if (!report.empty()) {
      std::cerr << report << '\n';
      return 2;
    }
    if (!g_quiet) std::cout << config << ": ok\n";
    return 0;
  }

  spinfb::ScenarioConfig sc;
  try {
    sc = spinfb::load_scenario_config(config, scenario);
    if (shots) spinfb::override_shots(sc, *shots);
    if (seed) sc.seeds = {*seed};
  } catch (const spinfb::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  }

  spinfb::ScenarioReport rep;
  try {
    rep = spinfb::run_scenario(sc, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  if (!g_quiet) print_report(rep);
  if (!rep.aggregate.error.empty()) std::cerr << "error: " << rep.aggregate.error << '\n';
  return rep.exit_code();
}

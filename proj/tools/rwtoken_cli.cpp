// Command-line driver: simulate, analyze, tune, sweep.
#include <iostream>

#include "CLI11.hpp"
#include "rwtoken/harness.hpp"

namespace h = rwtoken::harness;

int main(int argc, char** argv) {
  CLI::App app{"Random-walk token circulation: simulation and analysis"};
  app.require_subcommand(1);

  std::string scenario;
  auto* simulate = app.add_subcommand("simulate", "Run every seed of a scenario file");
  simulate->add_option("scenario", scenario, "Scenario JSON file")->required();

  h::AnalyzeOptions an;
  std::size_t dist_t = 0;
  std::int64_t target = -1;
  auto* analyze = app.add_subcommand("analyze", "Hitting times, variances and return statistics");
  analyze->add_option("graph", an.graph_path, "Graph JSON file")->required();
  analyze->add_flag("--hitting", an.hitting, "Expected hitting-time matrix");
  analyze->add_flag("--variance", an.variance, "Hitting-time variances");
  auto* dist_opt = analyze->add_option("--distribution", dist_t, "Hitting-time CDF up to t_max");
  analyze->add_flag("--return", an.return_stats, "Return times and their variances");
  analyze->add_option("--target", target, "Target node")->check(CLI::NonNegativeNumber);
  analyze->add_option("-o,--output-dir", an.output_dir, "Directory for CSV outputs");

  h::TuneOptions tu;
  double variance = 0.0, return_h = 0.0;
  std::string graph_path;
  std::int64_t node = -1;
  auto* tune = app.add_subcommand("tune", "Recommend a timeout T_m for a loss probability");
  auto* var_opt = tune->add_option("--variance,-V", variance, "Return-time variance");
  auto* h_opt = tune->add_option("--return-time", return_h, "Expected return time");
  auto* graph_opt = tune->add_option("--graph", graph_path, "Graph JSON file (with --node)");
  tune->add_option("--node", node, "Node whose return statistics are used")->check(CLI::NonNegativeNumber);
  tune->add_option("-p,--loss", tu.p, "Per-step token loss probability")->required();
  tune->add_option("-e,--epsilon", tu.epsilon, "Accepted error probability");
  tune->add_option("--method", tu.method, "scan or closed")->check(CLI::IsMember({"scan", "closed"}));
  tune->add_option("--capacity", tu.capacity, "Token table capacity");
  tune->add_option("--t-cap", tu.t_cap, "Largest t scanned");
  std::string tune_out;
  auto* tune_out_opt = tune->add_option("-o,--output-dir", tune_out, "Directory for bound_curve.csv and tune.json");

  h::SweepOptions sw;
  auto* sweep = app.add_subcommand("sweep", "Run a seed range and parameter grid");
  sweep->add_option("scenario", sw.scenario_path, "Scenario JSON file")->required();
  sweep->add_option("-j,--jobs", sw.jobs, "Worker threads (0: all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : h::kSchemaError;
  }

  if (*simulate) return h::cmd_simulate(scenario, std::cout, std::cerr);
  if (*analyze) {
    if (*dist_opt) an.distribution_t_max = dist_t;
    if (target >= 0) an.target = static_cast<rwtoken::NodeId>(target);
    return h::cmd_analyze(an, std::cout, std::cerr);
  }
  if (*tune) {
    if (*var_opt) tu.variance = variance;
    if (*h_opt) tu.return_h = return_h;
    if (*graph_opt) tu.graph_path = graph_path;
    if (node >= 0) tu.node = static_cast<rwtoken::NodeId>(node);
    if (*tune_out_opt) tu.output_dir = tune_out;
    return h::cmd_tune(tu, std::cout, std::cerr);
  }
  return h::cmd_sweep(sw, std::cout, std::cerr);
}

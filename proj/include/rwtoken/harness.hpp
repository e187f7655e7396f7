#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rwtoken/graph.hpp"
#include "rwtoken/sim.hpp"

namespace rwtoken::harness {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kOk = 0, kCellFailed = 1, kSchemaError = 2, kRuntimeError = 3 };

/// Raised for malformed scenario or graph files (exit code 2).
class SchemaError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

/// Parses `{"n", "edges"}`, `{"family", "n"}` or a dynamic process
/// `{"n", "states": [...], "transitions": [[...]]}`. A static graph becomes a
/// one-state process.
DynamicGraphProcess parse_graph(const nlohmann::json& j);
DynamicGraphProcess load_graph_file(const std::filesystem::path& path);

nlohmann::json graph_to_json(const StaticGraph& g);

/// One point of a parameter grid: (parameter name, value) pairs.
using GridCell = std::vector<std::pair<std::string, nlohmann::json>>;

struct ScenarioFile {
  nlohmann::json source;  // as parsed; keys are kept sorted
  std::string hash;       // FNV-1a 64 of the canonical dump, hex
  Scenario base;          // seed filled per run
  std::vector<std::uint64_t> seeds;
  bool timeout_auto = false;
  std::optional<double> epsilon;
  std::filesystem::path output_dir = ".";
  bool message_log = false;
  bool write_traces = true;
  std::optional<std::vector<GridCell>> grid;  // absent when the file has no "grid"
};

/// Validates the schema and every scenario invariant. Throws SchemaError.
ScenarioFile parse_scenario(const nlohmann::json& j);
ScenarioFile load_scenario_file(const std::filesystem::path& path);

/// Applies grid values ("T_m", "capacity", "token_loss_p", "initial_tokens",
/// "horizon", "table_mode", "timer_mode") to the base scenario and
/// re-validates. An "auto" timeout is recomputed for the cell.
Scenario apply_cell(const ScenarioFile& file, const GridCell& cell);

/// Timeout from the return-time variance: max(capacity + 2, scan(V_max, p, eps)).
int auto_timeout(const DynamicGraphProcess& process, std::size_t capacity, double loss_p, double eps);

struct RunRow {
  std::size_t cell = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  RunMetrics metrics;  // legitimacy_timeline is dropped
};

/// Per-run rows plus aggregates recomputable from them.
struct SummaryReport {
  std::string scenario_hash;
  std::vector<GridCell> cells;
  std::vector<RunRow> rows;

  std::size_t failures() const;
  double lc_fraction() const;  // sum of LC rounds / sum of rounds
  std::optional<double> mean_convergence_round() const;
  std::optional<double> median_convergence_round() const;
  double converged_fraction() const;  // runs that reached LC and stayed
  std::size_t undue_creations() const;

  nlohmann::json to_json() const;
};

std::string fnv1a_hex(std::string_view text);

/// Writes through a temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

struct AnalyzeOptions {
  std::filesystem::path graph_path;
  bool hitting = false;
  bool variance = false;
  std::optional<std::size_t> distribution_t_max;
  bool return_stats = false;
  std::optional<NodeId> target;
  std::filesystem::path output_dir = ".";
};

struct TuneOptions {
  std::optional<double> variance;
  std::optional<double> return_h;
  std::optional<std::filesystem::path> graph_path;
  std::optional<NodeId> node;
  double p = 0.0;
  double epsilon = 0.05;
  std::string method = "scan";
  std::size_t capacity = 0;
  std::size_t t_cap = 100000;
  std::optional<std::filesystem::path> output_dir;
};

struct SweepOptions {
  std::filesystem::path scenario_path;
  std::size_t jobs = 0;  // 0: hardware concurrency
};

int cmd_simulate(const std::filesystem::path& scenario_path, std::ostream& out, std::ostream& err);
int cmd_analyze(const AnalyzeOptions& opts, std::ostream& out, std::ostream& err);
int cmd_tune(const TuneOptions& opts, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepOptions& opts, std::ostream& out, std::ostream& err);

}  // namespace rwtoken::harness

#include "rwtoken/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "rwtoken/analysis.hpp"

namespace rwtoken::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void schema_fail(const std::string& what) { throw SchemaError(what); }

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) schema_fail(where + ": expected an object");
}

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) schema_fail(where + ": unknown key \"" + k + "\"");
  }
}

std::int64_t get_int(const json& j, const std::string& where) {
  if (!j.is_number_integer()) schema_fail(where + ": expected an integer");
  return j.get<std::int64_t>();
}

std::int64_t get_nonneg(const json& j, const std::string& where) {
  std::int64_t v = get_int(j, where);
  if (v < 0) schema_fail(where + ": must be non-negative");
  return v;
}

double get_number(const json& j, const std::string& where) {
  if (!j.is_number()) schema_fail(where + ": expected a number");
  return j.get<double>();
}

bool get_bool(const json& j, const std::string& where) {
  if (!j.is_boolean()) schema_fail(where + ": expected a boolean");
  return j.get<bool>();
}

std::string get_string(const json& j, const std::string& where) {
  if (!j.is_string()) schema_fail(where + ": expected a string");
  return j.get<std::string>();
}

Edge parse_edge(const json& j, std::size_t n, const std::string& where) {
  if (!j.is_array() || j.size() != 2) schema_fail(where + ": edge must be [i, j]");
  auto a = get_nonneg(j[0], where);
  auto b = get_nonneg(j[1], where);
  if (static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) {
    schema_fail(where + ": node id out of range");
  }
  return Edge(static_cast<NodeId>(a), static_cast<NodeId>(b));
}

StaticGraph parse_static(const json& j, std::optional<std::size_t> n_hint, const std::string& where) {
  require_object(j, where);
  reject_unknown(j, where, {"n", "edges", "family", "extra_p", "seed"});
  std::size_t n = 0;
  if (j.contains("n")) {
    auto v = get_int(j["n"], where + ".n");
    if (v < 1) schema_fail(where + ".n: must be at least 1");
    n = static_cast<std::size_t>(v);
  } else if (n_hint) {
    n = *n_hint;
  } else {
    schema_fail(where + ": missing \"n\"");
  }
  if (n_hint && n != *n_hint) schema_fail(where + ": node count differs from the process");

  if (j.contains("family")) {
    if (j.contains("edges")) schema_fail(where + ": give either \"family\" or \"edges\"");
    std::string family = get_string(j["family"], where + ".family");
    if (family == "complete") return complete_graph(n);
    if (family == "path") return path_graph(n);
    if (family == "cycle") return cycle_graph(n);
    if (family == "random") {
      double extra = j.contains("extra_p") ? get_number(j["extra_p"], where + ".extra_p") : 0.3;
      auto seed = j.contains("seed") ? get_nonneg(j["seed"], where + ".seed") : 0;
      Rng rng = make_rng(static_cast<std::uint64_t>(seed));
      return random_connected_graph(n, extra, rng);
    }
    schema_fail(where + ".family: unknown family \"" + family + "\"");
  }
  if (!j.contains("edges")) schema_fail(where + ": missing \"edges\"");
  if (!j["edges"].is_array()) schema_fail(where + ".edges: expected an array");
  std::vector<Edge> edges;
  for (const auto& e : j["edges"]) edges.push_back(parse_edge(e, n, where + ".edges"));
  return StaticGraph(n, edges);
}

std::vector<std::uint64_t> parse_seeds(const json& j) {
  std::vector<std::uint64_t> seeds;
  if (j.is_number_integer()) {
    seeds.push_back(static_cast<std::uint64_t>(get_nonneg(j, "seeds")));
  } else if (j.is_array()) {
    for (const auto& s : j) seeds.push_back(static_cast<std::uint64_t>(get_nonneg(s, "seeds[]")));
  } else if (j.is_object()) {
    reject_unknown(j, "seeds", {"from", "to"});
    if (!j.contains("from") || !j.contains("to")) schema_fail("seeds: range needs \"from\" and \"to\"");
    auto from = get_nonneg(j["from"], "seeds.from");
    auto to = get_nonneg(j["to"], "seeds.to");
    for (auto s = from; s <= to; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  } else {
    schema_fail("seeds: expected an integer, an array or {\"from\", \"to\"}");
  }
  return seeds;
}

TableMode parse_table_mode(const json& j) {
  auto s = get_string(j, "faults.table_mode");
  if (s == "fresh") return TableMode::fresh;
  if (s == "random-corrupt") return TableMode::random_corrupt;
  schema_fail("faults.table_mode: expected \"fresh\" or \"random-corrupt\"");
}

TimerMode parse_timer_mode(const json& j) {
  auto s = get_string(j, "faults.timer_mode");
  if (s == "full") return TimerMode::full;
  if (s == "random") return TimerMode::uniform_random;
  schema_fail("faults.timer_mode: expected \"full\" or \"random\"");
}

FaultModel parse_faults(const json& j, std::size_t n) {
  require_object(j, "faults");
  reject_unknown(j, "faults",
                 {"token_loss_p", "initial_tokens", "table_mode", "timer_mode", "link_dynamics", "events"});
  FaultModel f;
  if (j.contains("token_loss_p")) f.token_loss_p = get_number(j["token_loss_p"], "faults.token_loss_p");
  if (j.contains("initial_tokens")) {
    f.initial_tokens = static_cast<std::size_t>(get_nonneg(j["initial_tokens"], "faults.initial_tokens"));
  }
  if (j.contains("table_mode")) f.table_mode = parse_table_mode(j["table_mode"]);
  if (j.contains("timer_mode")) f.timer_mode = parse_timer_mode(j["timer_mode"]);
  if (j.contains("link_dynamics")) f.link_dynamics = get_bool(j["link_dynamics"], "faults.link_dynamics");
  if (j.contains("events")) {
    if (!j["events"].is_array()) schema_fail("faults.events: expected an array");
    for (const auto& e : j["events"]) {
      require_object(e, "faults.events[]");
      reject_unknown(e, "faults.events[]", {"round", "kind", "edge", "tree_edge"});
      if (!e.contains("round") || !e.contains("kind")) {
        schema_fail("faults.events[]: needs \"round\" and \"kind\"");
      }
      ScheduledFault sf;
      sf.round = get_nonneg(e["round"], "faults.events[].round");
      try {
        sf.fault.kind = parse_fault_kind(get_string(e["kind"], "faults.events[].kind"));
      } catch (const InvalidInput& ex) {
        schema_fail(std::string("faults.events[].kind: ") + ex.what());
      }
      if (e.contains("edge")) sf.fault.edge = parse_edge(e["edge"], n, "faults.events[].edge");
      if (e.contains("tree_edge")) sf.fault.tree_edge = get_bool(e["tree_edge"], "faults.events[].tree_edge");
      f.events.push_back(sf);
    }
  }
  return f;
}

std::vector<GridCell> expand_grid(const json& g) {
  require_object(g, "grid");
  static const std::set<std::string> known = {"T_m", "capacity", "token_loss_p", "initial_tokens",
                                              "horizon", "table_mode", "timer_mode"};
  std::vector<std::pair<std::string, std::vector<json>>> axes;
  for (const auto& [k, v] : g.items()) {  // nlohmann keeps keys sorted
    if (!known.contains(k)) schema_fail("grid: unknown parameter \"" + k + "\"");
    if (!v.is_array()) schema_fail("grid." + k + ": expected an array");
    axes.emplace_back(k, std::vector<json>(v.begin(), v.end()));
  }
  std::vector<GridCell> cells;
  if (axes.empty()) return cells;
  for (const auto& a : axes) {
    if (a.second.empty()) return cells;
  }
  std::vector<std::size_t> idx(axes.size(), 0);
  while (true) {
    GridCell cell;
    for (std::size_t a = 0; a < axes.size(); ++a) cell.emplace_back(axes[a].first, axes[a].second[idx[a]]);
    cells.push_back(std::move(cell));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
      if (a == 0) return cells;
    }
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_text(const std::string& text, const fs::path& path) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

std::string fmt_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string matrix_csv(const Eigen::MatrixXd& m) {
  std::ostringstream out;
  out << "source";
  for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << c;
  out << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << fmt_number(m(r, c));
    out << '\n';
  }
  return out.str();
}

json cell_json(const GridCell& cell) {
  json j = json::object();
  for (const auto& [k, v] : cell) j[k] = v;
  return j;
}

json opt_json(const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const RunMetrics& m) {
  return json{{"convergence_round", opt_json(m.convergence_round)},
              {"cover_round", opt_json(m.cover_round)},
              {"r2_creations", m.r2_creations},
              {"r2_after_cover", m.r2_after_cover},
              {"undue_creations", m.undue_creations},
              {"undue_creations_after_a3", m.undue_creations_after_a3},
              {"merges", m.merges},
              {"wave_launches", m.wave_launches},
              {"tokens_lost", m.tokens_lost},
              {"failed_wave_sends", m.failed_wave_sends},
              {"undetected_failed_wave_sends", m.undetected_failed_wave_sends},
              {"rounds", m.rounds},
              {"lc_rounds", m.lc_rounds},
              {"lc_exits", m.lc_exits},
              {"lc_fraction", m.lc_fraction()}};
}

// Message-log observer: one JSON line per round listing the in-flight messages.
struct MessageLog : RunObserver {
  std::ostringstream out;
  void on_round(const Configuration& c, const Classification&, const StepEvents&) override {
    write_message_log_line(out, c);
  }
};

std::string run_label(std::size_t cell, bool with_cell, std::uint64_t seed) {
  std::string s = "seed" + std::to_string(seed);
  if (with_cell) s = "cell" + std::to_string(cell) + "_" + s;
  return s;
}

// Executes one run and writes its per-run files. Never throws.
RunRow execute(const ScenarioFile& file, const Scenario& scenario, std::size_t cell, bool with_cell,
               std::uint64_t seed) {
  RunRow row;
  row.cell = cell;
  row.seed = seed;
  try {
    Scenario s = scenario;
    s.seed = seed;
    MessageLog log;
    RunResult res = run(s, file.message_log ? &log : nullptr);
    row.metrics = std::move(res.metrics);
    row.metrics.legitimacy_timeline.clear();

    std::string header = "# scenario_hash=" + file.hash + " seed=" + std::to_string(seed);
    if (with_cell) header += " cell=" + std::to_string(cell);
    header += '\n';
    std::string label = run_label(cell, with_cell, seed);
    if (file.write_traces) {
      std::ostringstream csv;
      csv << header;
      write_trace_csv(csv, res.trace);
      write_file_atomic(file.output_dir / ("trace_" + label + ".csv"), csv.str());
    }
    if (file.message_log) {
      write_file_atomic(file.output_dir / ("messages_" + label + ".jsonl"), header + log.out.str());
    }
  } catch (const std::exception& e) {
    row.failed = true;
    row.error = e.what();
  }
  return row;
}

int load_or_report(const fs::path& path, ScenarioFile& out_file, std::ostream& err) {
  try {
    out_file = load_scenario_file(path);
    return kOk;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kSchemaError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

void write_summary(const ScenarioFile& file, const SummaryReport& report) {
  fs::create_directories(file.output_dir);
  write_file_atomic(file.output_dir / "summary.json", report.to_json().dump(2) + "\n");
}

}  // namespace

DynamicGraphProcess parse_graph(const json& j) {
  require_object(j, "graph");
  try {
    if (!j.contains("states")) return DynamicGraphProcess::constant(parse_static(j, std::nullopt, "graph"));

    reject_unknown(j, "process", {"n", "states", "transitions"});
    if (!j.contains("n")) schema_fail("process: missing \"n\"");
    auto n = get_int(j["n"], "process.n");
    if (n < 1) schema_fail("process.n: must be at least 1");
    if (!j["states"].is_array() || j["states"].empty()) schema_fail("process.states: expected a non-empty array");
    std::vector<StaticGraph> states;
    for (const auto& s : j["states"]) {
      states.push_back(parse_static(s, static_cast<std::size_t>(n), "process.states[]"));
    }
    if (!j.contains("transitions") || !j["transitions"].is_array()) {
      schema_fail("process: missing \"transitions\" matrix");
    }
    const auto& t = j["transitions"];
    const auto k = states.size();
    if (t.size() != k) schema_fail("process.transitions: expected one row per state");
    Eigen::MatrixXd m(k, k);
    for (std::size_t r = 0; r < k; ++r) {
      if (!t[r].is_array() || t[r].size() != k) schema_fail("process.transitions: rows must have one entry per state");
      for (std::size_t c = 0; c < k; ++c) m(r, c) = get_number(t[r][c], "process.transitions");
    }
    return DynamicGraphProcess(std::move(states), std::move(m));
  } catch (const SchemaError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw SchemaError(e.what());
  }
}

DynamicGraphProcess load_graph_file(const fs::path& path) {
  return parse_graph(parse_json_text(read_file(path), path));
}

json graph_to_json(const StaticGraph& g) {
  json edges = json::array();
  for (const auto& e : g.edges()) edges.push_back({e.a, e.b});
  return json{{"n", g.node_count()}, {"edges", edges}};
}

int auto_timeout(const DynamicGraphProcess& process, std::size_t capacity, double loss_p, double eps) {
  Eigen::MatrixXd p;
  std::optional<StaticGraph> g;
  if (process.state_count() == 1) {
    g = process.state(0);
    if (!validate_graph(*g).connected) throw InvalidInput("auto T_m: graph is disconnected");
    p = walk_matrix(*g);
  } else {
    p = averaged_transition_matrix(process, stationary_distribution(process));
  }
  HittingMatrix h = hitting_times(p);
  if (!h.all_reachable()) throw InvalidInput("auto T_m: some node is not reached almost surely");
  Eigen::MatrixXd var = variance_matrix(p, h);
  ReturnStats rs = g ? return_stats(*g, p, h, var) : return_stats(p, h, var);
  double v_max = rs.return_variance.maxCoeff();
  auto t = tune_timeout_scan(v_max, loss_p, eps, 1000000);
  return static_cast<int>(std::max<std::size_t>(t, capacity + 2));
}

ScenarioFile parse_scenario(const json& j) {
  require_object(j, "scenario");
  reject_unknown(j, "scenario",
                 {"graph", "process", "params", "faults", "horizon", "seeds", "outputs", "grid"});
  ScenarioFile f;
  f.source = j;
  f.hash = fnv1a_hex(j.dump());

  if (j.contains("graph") == j.contains("process")) schema_fail("scenario: give exactly one of \"graph\" or \"process\"");
  const json& gj = j.contains("graph") ? j["graph"] : j["process"];
  f.base.process = parse_graph(gj);
  const std::size_t n = f.base.process.node_count();

  if (!j.contains("params")) schema_fail("scenario: missing \"params\"");
  const json& pj = j["params"];
  require_object(pj, "params");
  reject_unknown(pj, "params", {"capacity", "T_m", "epsilon", "reload_wave"});
  f.base.params.capacity =
      pj.contains("capacity") ? static_cast<std::size_t>(get_nonneg(pj["capacity"], "params.capacity")) : n;
  if (pj.contains("epsilon")) f.epsilon = get_number(pj["epsilon"], "params.epsilon");
  if (pj.contains("reload_wave")) f.base.params.reload_wave = get_bool(pj["reload_wave"], "params.reload_wave");
  if (!pj.contains("T_m")) schema_fail("params: missing \"T_m\"");

  if (j.contains("faults")) f.base.faults = parse_faults(j["faults"], n);
  // a process that never moves is almost certainly a mistake; opt out explicitly
  if (j.contains("process") && !(j.contains("faults") && j["faults"].contains("link_dynamics"))) {
    f.base.faults.link_dynamics = true;
  }

  if (pj["T_m"].is_string()) {
    if (pj["T_m"].get<std::string>() != "auto") schema_fail("params.T_m: expected an integer or \"auto\"");
    f.timeout_auto = true;
    if (!(f.base.faults.token_loss_p > 0.0)) schema_fail("params.T_m \"auto\" requires faults.token_loss_p > 0");
    if (!f.epsilon) schema_fail("params.T_m \"auto\" requires params.epsilon");
  } else {
    auto tm = get_int(pj["T_m"], "params.T_m");
    if (tm > 1000000000 || tm < -1000000000) schema_fail("params.T_m: out of range");
    f.base.params.timeout = static_cast<int>(tm);
  }

  if (!j.contains("horizon")) schema_fail("scenario: missing \"horizon\"");
  f.base.horizon = get_int(j["horizon"], "horizon");

  if (!j.contains("seeds")) schema_fail("scenario: missing \"seeds\"");
  f.seeds = parse_seeds(j["seeds"]);

  if (j.contains("outputs")) {
    const json& oj = j["outputs"];
    require_object(oj, "outputs");
    reject_unknown(oj, "outputs", {"dir", "messages", "traces"});
    if (oj.contains("dir")) f.output_dir = get_string(oj["dir"], "outputs.dir");
    if (oj.contains("messages")) f.message_log = get_bool(oj["messages"], "outputs.messages");
    if (oj.contains("traces")) f.write_traces = get_bool(oj["traces"], "outputs.traces");
  }

  if (j.contains("grid")) f.grid = expand_grid(j["grid"]);

  try {
    if (f.timeout_auto) {
      f.base.params.timeout =
          auto_timeout(f.base.process, f.base.params.capacity, f.base.faults.token_loss_p, *f.epsilon);
    }
    f.base.validate();
    if (f.grid) {
      for (const auto& cell : *f.grid) apply_cell(f, cell);
    }
  } catch (const SchemaError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw SchemaError(e.what());
  }
  return f;
}

ScenarioFile load_scenario_file(const fs::path& path) {
  return parse_scenario(parse_json_text(read_file(path), path));
}

Scenario apply_cell(const ScenarioFile& file, const GridCell& cell) {
  Scenario s = file.base;
  bool timeout_set = false;
  for (const auto& [key, v] : cell) {
    const std::string where = "grid." + key;
    if (key == "T_m") {
      s.params.timeout = static_cast<int>(get_int(v, where));
      timeout_set = true;
    } else if (key == "capacity") {
      s.params.capacity = static_cast<std::size_t>(get_nonneg(v, where));
    } else if (key == "token_loss_p") {
      s.faults.token_loss_p = get_number(v, where);
    } else if (key == "initial_tokens") {
      s.faults.initial_tokens = static_cast<std::size_t>(get_nonneg(v, where));
    } else if (key == "horizon") {
      s.horizon = get_int(v, where);
    } else if (key == "table_mode") {
      s.faults.table_mode = parse_table_mode(v);
    } else if (key == "timer_mode") {
      s.faults.timer_mode = parse_timer_mode(v);
    } else {
      schema_fail("grid: unknown parameter \"" + key + "\"");
    }
  }
  if (file.timeout_auto && !timeout_set) {
    if (!(s.faults.token_loss_p > 0.0)) schema_fail("T_m \"auto\" requires token_loss_p > 0");
    s.params.timeout = auto_timeout(s.process, s.params.capacity, s.faults.token_loss_p, *file.epsilon);
  }
  s.validate();
  return s;
}

std::size_t SummaryReport::failures() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const RunRow& r) { return r.failed; }));
}

double SummaryReport::lc_fraction() const {
  std::size_t lc = 0, total = 0;
  for (const auto& r : rows) {
    if (r.failed) continue;
    lc += r.metrics.lc_rounds;
    total += r.metrics.rounds;
  }
  return total == 0 ? 0.0 : static_cast<double>(lc) / static_cast<double>(total);
}

static std::vector<double> convergence_values(const std::vector<RunRow>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (!r.failed && r.metrics.convergence_round) v.push_back(static_cast<double>(*r.metrics.convergence_round));
  }
  return v;
}

std::optional<double> SummaryReport::mean_convergence_round() const {
  auto v = convergence_values(rows);
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::optional<double> SummaryReport::median_convergence_round() const {
  auto v = convergence_values(rows);
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  auto mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

double SummaryReport::converged_fraction() const {
  if (rows.empty()) return 0.0;
  auto ok = std::count_if(rows.begin(), rows.end(),
                          [](const RunRow& r) { return !r.failed && r.metrics.converged_and_closed(); });
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

std::size_t SummaryReport::undue_creations() const {
  std::size_t s = 0;
  for (const auto& r : rows) s += r.failed ? 0 : r.metrics.undue_creations;
  return s;
}

json SummaryReport::to_json() const {
  json seeds = json::array(), conv = json::array(), r2 = json::array(), cover = json::array(),
       lc = json::array(), runs = json::array();
  for (const auto& r : rows) {
    seeds.push_back(r.seed);
    conv.push_back(r.failed ? json(nullptr) : opt_json(r.metrics.convergence_round));
    r2.push_back(r.failed ? json(nullptr) : json(r.metrics.r2_creations));
    cover.push_back(r.failed ? json(nullptr) : opt_json(r.metrics.cover_round));
    lc.push_back(r.failed ? json(nullptr) : json(r.metrics.lc_fraction()));
    json run = {{"cell", r.cell}, {"seed", r.seed}, {"failed", r.failed}};
    if (r.failed) {
      run["error"] = r.error;
    } else {
      run["metrics"] = metrics_json(r.metrics);
    }
    runs.push_back(std::move(run));
  }
  json cells_j = json::array();
  for (const auto& c : cells) cells_j.push_back(cell_json(c));
  auto opt_d = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{{"scenario_hash", scenario_hash},
              {"seeds", seeds},
              {"convergence_rounds", conv},
              {"lc_fraction", lc_fraction()},
              {"r2_creations", r2},
              {"cover_rounds", cover},
              {"run_lc_fractions", lc},
              {"cells", cells_j},
              {"runs", runs},
              {"aggregates",
               {{"runs", rows.size()},
                {"failures", failures()},
                {"mean_convergence_round", opt_d(mean_convergence_round())},
                {"median_convergence_round", opt_d(median_convergence_round())},
                {"converged_fraction", converged_fraction()},
                {"lc_fraction", lc_fraction()},
                {"undue_creations", undue_creations()}}}};
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

int cmd_simulate(const fs::path& scenario_path, std::ostream& out, std::ostream& err) {
  ScenarioFile file;
  if (int rc = load_or_report(scenario_path, file, err); rc != kOk) return rc;
  if (file.seeds.empty()) {
    err << "error: no seeds to run\n";
    return kSchemaError;
  }
  SummaryReport report;
  report.scenario_hash = file.hash;
  for (auto seed : file.seeds) {
    RunRow row = execute(file, file.base, 0, false, seed);
    if (row.failed) {
      err << "error: seed " << seed << ": " << row.error << '\n';
      return kRuntimeError;
    }
    const auto& m = row.metrics;
    out << "seed=" << seed << " convergence_round="
        << (m.convergence_round ? std::to_string(*m.convergence_round) : "none")
        << " r2_creations=" << m.r2_creations << " lc_fraction=" << fmt_number(m.lc_fraction()) << '\n';
    report.rows.push_back(std::move(row));
  }
  try {
    write_summary(file, report);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int cmd_sweep(const SweepOptions& opts, std::ostream& out, std::ostream& err) {
  ScenarioFile file;
  if (int rc = load_or_report(opts.scenario_path, file, err); rc != kOk) return rc;
  std::vector<GridCell> cells = file.grid ? *file.grid : std::vector<GridCell>{GridCell{}};
  if (cells.empty() || file.seeds.empty()) {
    err << "error: empty grid\n";
    return kSchemaError;
  }
  const bool with_cell = file.grid.has_value();
  std::vector<Scenario> scenarios;
  for (const auto& c : cells) scenarios.push_back(apply_cell(file, c));

  const std::size_t total = cells.size() * file.seeds.size();
  std::vector<RunRow> rows(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < total; k = next++) {
      std::size_t cell = k / file.seeds.size();
      rows[k] = execute(file, scenarios[cell], cell, with_cell, file.seeds[k % file.seeds.size()]);
    }
  };
  std::size_t jobs = opts.jobs ? opts.jobs : std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, total);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  SummaryReport report;
  report.scenario_hash = file.hash;
  report.cells = cells;
  report.rows = std::move(rows);
  try {
    write_summary(file, report);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    SummaryReport part;
    for (const auto& r : report.rows) {
      if (r.cell == c) part.rows.push_back(r);
    }
    auto mean = part.mean_convergence_round();
    out << "cell=" << c << ' ' << cell_json(cells[c]).dump() << " runs=" << part.rows.size()
        << " failures=" << part.failures() << " converged_fraction=" << fmt_number(part.converged_fraction())
        << " mean_convergence_round=" << (mean ? fmt_number(*mean) : "none") << '\n';
  }
  for (const auto& r : report.rows) {
    if (r.failed) err << "cell " << r.cell << " seed " << r.seed << " failed: " << r.error << '\n';
  }
  return report.failures() ? kCellFailed : kOk;
}

int cmd_analyze(const AnalyzeOptions& opts, std::ostream& out, std::ostream& err) {
  DynamicGraphProcess process = DynamicGraphProcess::constant(StaticGraph(1));
  try {
    process = load_graph_file(opts.graph_path);
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kSchemaError;
  }
  if (!opts.hitting && !opts.variance && !opts.distribution_t_max && !opts.return_stats) {
    err << "error: nothing requested (use --hitting, --variance, --distribution or --return)\n";
    return kSchemaError;
  }
  const std::size_t n = process.node_count();
  if (opts.target && *opts.target >= n) {
    err << "error: target out of range\n";
    return kSchemaError;
  }
  try {
    Eigen::MatrixXd p;
    std::optional<StaticGraph> g;
    if (process.state_count() == 1) {
      g = process.state(0);
      if (!validate_graph(*g).connected) {
        err << "error: graph is disconnected\n";
        return kRuntimeError;
      }
      p = walk_matrix(*g);
    } else {
      p = averaged_transition_matrix(process, stationary_distribution(process));
    }
    HittingMatrix h = hitting_times(p);
    auto emit = [&](const std::string& name, const std::string& csv) {
      write_file_atomic(opts.output_dir / name, csv);
      out << "## " << name << '\n' << csv;
    };

    if (opts.hitting) emit("hitting.csv", matrix_csv(h.h));
    if (opts.variance || opts.return_stats) {
      if (!h.all_reachable()) throw NumericalError("some target is not reached almost surely");
    }
    if (opts.variance) {
      if (opts.target) {
        Eigen::VectorXd v = variance_hitting(p, h, *opts.target);
        std::ostringstream csv;
        csv << "source,variance\n";
        for (Eigen::Index i = 0; i < v.size(); ++i) csv << i << ',' << fmt_number(v(i)) << '\n';
        emit("variance_target" + std::to_string(*opts.target) + ".csv", csv.str());
      } else {
        emit("variance.csv", matrix_csv(variance_matrix(p, h)));
      }
    }
    if (opts.distribution_t_max) {
      std::vector<NodeId> targets;
      if (opts.target) {
        targets.push_back(*opts.target);
      } else {
        for (NodeId j = 0; j < n; ++j) targets.push_back(j);
      }
      for (NodeId j : targets) {
        HittingDistribution d = hitting_distribution(p, j, *opts.distribution_t_max);
        std::ostringstream csv;
        csv << "t";
        for (std::size_t i = 0; i < n; ++i) csv << ",source" << i;
        csv << '\n';
        for (Eigen::Index t = 0; t < d.cdf.rows(); ++t) {
          csv << t;
          for (Eigen::Index i = 0; i < d.cdf.cols(); ++i) csv << ',' << fmt_number(d.cdf(t, i));
          csv << '\n';
        }
        emit("distribution_target" + std::to_string(j) + ".csv", csv.str());
      }
    }
    if (opts.return_stats) {
      Eigen::MatrixXd var = variance_matrix(p, h);
      ReturnStats rs = g ? return_stats(*g, p, h, var) : return_stats(p, h, var);
      std::ostringstream csv;
      csv << "node,return_h,return_h_first_step,return_variance\n";
      for (Eigen::Index i = 0; i < rs.return_h.size(); ++i) {
        csv << i << ',' << fmt_number(rs.return_h(i)) << ',' << fmt_number(rs.return_h_first_step(i)) << ','
            << fmt_number(rs.return_variance(i)) << '\n';
      }
      emit("return.csv", csv.str());
    }
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kSchemaError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int cmd_tune(const TuneOptions& opts, std::ostream& out, std::ostream& err) {
  try {
    double v = 0.0;
    std::optional<double> h = opts.return_h;
    if (opts.graph_path) {
      if (!opts.node) {
        err << "error: --node is required with --graph\n";
        return kSchemaError;
      }
      DynamicGraphProcess process = load_graph_file(*opts.graph_path);
      if (*opts.node >= process.node_count()) {
        err << "error: node out of range\n";
        return kSchemaError;
      }
      Eigen::MatrixXd p;
      std::optional<StaticGraph> g;
      if (process.state_count() == 1) {
        g = process.state(0);
        if (!validate_graph(*g).connected) {
          err << "error: graph is disconnected\n";
          return kRuntimeError;
        }
        p = walk_matrix(*g);
      } else {
        p = averaged_transition_matrix(process, stationary_distribution(process));
      }
      HittingMatrix hm = hitting_times(p);
      if (!hm.all_reachable()) throw NumericalError("some target is not reached almost surely");
      Eigen::MatrixXd var = variance_matrix(p, hm);
      ReturnStats rs = g ? return_stats(*g, p, hm, var) : return_stats(p, hm, var);
      v = rs.return_variance(*opts.node);
      h = rs.return_h(*opts.node);
    } else if (opts.variance) {
      v = *opts.variance;
    } else {
      err << "error: give --variance or --graph with --node\n";
      return kSchemaError;
    }

    std::size_t recommended = 0;
    json result = {{"inputs",
                    {{"variance", v},
                     {"p", opts.p},
                     {"epsilon", opts.epsilon},
                     {"method", opts.method},
                     {"capacity", opts.capacity}}}};
    if (h) result["inputs"]["return_h"] = *h;

    if (opts.method == "scan") {
      recommended = tune_timeout_scan(v, opts.p, opts.epsilon, opts.t_cap);
      out << "t=" << recommended << '\n';
      result["t"] = recommended;
    } else if (opts.method == "closed") {
      if (!h) {
        err << "error: the closed form needs --return-time or --graph\n";
        return kSchemaError;
      }
      double t = tune_timeout_closed_form(v, *h, opts.p, opts.epsilon);
      out << "t=" << fmt_number(t) << '\n';
      err << "warning: the closed-form timeout is conservative; the scan result is authoritative\n";
      result["t"] = t;
      recommended = static_cast<std::size_t>(std::ceil(t));
    } else {
      err << "error: unknown method \"" << opts.method << "\"\n";
      return kSchemaError;
    }
    std::size_t tm = std::max(recommended, opts.capacity + 2);
    out << "T_m=" << tm << '\n';
    result["recommended_T_m"] = tm;

    std::ostringstream curve;
    curve << "t,bound\n";
    json samples = json::array();
    for (std::size_t t = 1; t <= 2 * recommended; ++t) {
      double b = lost_probability_bound(v, opts.p, static_cast<double>(t));
      curve << t << ',' << fmt_number(b) << '\n';
      samples.push_back({t, b});
    }
    result["bound_curve"] = samples;
    if (opts.output_dir) {
      write_file_atomic(*opts.output_dir / "bound_curve.csv", curve.str());
      write_file_atomic(*opts.output_dir / "tune.json", result.dump(2) + "\n");
    }
  } catch (const TuningCapExceeded& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kSchemaError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace rwtoken::harness

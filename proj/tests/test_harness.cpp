#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "rwtoken/analysis.hpp"
#include "rwtoken/harness.hpp"

using namespace rwtoken;
using namespace rwtoken::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("rwtoken_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_json(const fs::path& path, const json& j) {
  std::ofstream(path) << j.dump(2);
  return path;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json k3_scenario(const fs::path& out) {
  return json{{"graph", {{"family", "complete"}, {"n", 3}}},
              {"params", {{"capacity", 3}, {"T_m", 10}}},
              {"faults", {{"initial_tokens", 1}}},
              {"horizon", 2000},
              {"seeds", {1, 2}},
              {"outputs", {{"dir", out.string()}}}};
}

struct Cmd {
  int rc;
  std::string out, err;
};

Cmd simulate(const fs::path& p) {
  std::ostringstream o, e;
  int rc = cmd_simulate(p, o, e);
  return {rc, o.str(), e.str()};
}

Cmd sweep(const fs::path& p, std::size_t jobs = 2) {
  std::ostringstream o, e;
  int rc = cmd_sweep(SweepOptions{p, jobs}, o, e);
  return {rc, o.str(), e.str()};
}

Cmd analyze(const AnalyzeOptions& a) {
  std::ostringstream o, e;
  int rc = cmd_analyze(a, o, e);
  return {rc, o.str(), e.str()};
}

Cmd tune(const TuneOptions& t) {
  std::ostringstream o, e;
  int rc = cmd_tune(t, o, e);
  return {rc, o.str(), e.str()};
}

}  // namespace

TEST_CASE("graph parsing") {
  auto p = parse_graph(json{{"n", 3}, {"edges", {{0, 1}, {1, 2}}}});
  CHECK(p.state_count() == 1);
  CHECK(p.state(0) == path_graph(3));
  CHECK(parse_graph(json{{"family", "cycle"}, {"n", 5}}).state(0) == cycle_graph(5));

  auto dyn = parse_graph(json::parse(R"({"n": 3,
      "states": [{"edges": [[0,1],[1,2],[0,2]]}, {"edges": [[0,1],[1,2]]}],
      "transitions": [[0.7, 0.3], [0.6, 0.4]]})"));
  CHECK(dyn.state_count() == 2);
  CHECK(dyn.transitions()(0, 1) == 0.3);

  CHECK_THROWS_AS(parse_graph(json{{"n", 3}, {"edges", {{0, 3}}}}), SchemaError);
  CHECK_THROWS_AS(parse_graph(json{{"n", 3}, {"edges", {{0, 0}}}}), SchemaError);
  CHECK_THROWS_AS(parse_graph(json{{"n", 3}}), SchemaError);
  CHECK_THROWS_AS(parse_graph(json{{"n", 3}, {"edges", json::array()}, {"colour", 1}}), SchemaError);
  CHECK_THROWS_AS(parse_graph(json::parse(R"({"n": 3, "states": [{"edges": []}], "transitions": [[0.5]]})")),
                  SchemaError);

  auto round = parse_graph(graph_to_json(cycle_graph(4)));
  CHECK(round.state(0) == cycle_graph(4));
}

TEST_CASE("scenario parsing") {
  fs::path dir = scratch("parse");
  json base = k3_scenario(dir);
  ScenarioFile f = parse_scenario(base);
  CHECK(f.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(f.base.params.timeout == 10);
  CHECK_FALSE(f.grid);
  CHECK(f.hash.size() == 16);
  CHECK(f.hash == parse_scenario(base).hash);

  json range = base;
  range["seeds"] = {{"from", 3}, {"to", 6}};
  CHECK(parse_scenario(range).seeds == std::vector<std::uint64_t>{3, 4, 5, 6});
  range["seeds"] = 9;
  CHECK(parse_scenario(range).seeds == std::vector<std::uint64_t>{9});
  CHECK(parse_scenario(range).hash != f.hash);

  json bad = base;
  bad["params"]["T_m"] = 4;
  CHECK_THROWS_WITH_AS(parse_scenario(bad), doctest::Contains("T_m must exceed capacity+1"), SchemaError);
  bad = base;
  bad["speed"] = 1;
  CHECK_THROWS_AS(parse_scenario(bad), SchemaError);
  bad = base;
  bad["faults"]["table_mode"] = "shuffled";
  CHECK_THROWS_AS(parse_scenario(bad), SchemaError);
  bad = base;
  bad.erase("horizon");
  CHECK_THROWS_AS(parse_scenario(bad), SchemaError);
  bad = base;
  bad["params"]["T_m"] = "auto";
  CHECK_THROWS_WITH_AS(parse_scenario(bad), doctest::Contains("token_loss_p"), SchemaError);
  bad["faults"]["token_loss_p"] = 0.1;
  CHECK_THROWS_WITH_AS(parse_scenario(bad), doctest::Contains("epsilon"), SchemaError);
  bad["params"]["epsilon"] = 0.05;
  ScenarioFile autof = parse_scenario(bad);
  CHECK(autof.timeout_auto);
  // K3 return variance is 2; the scan result is below capacity + 2 here
  CHECK(autof.base.params.timeout ==
        std::max<int>(5, static_cast<int>(tune_timeout_scan(2.0, 0.1, 0.05, 1000))));

  json grid = base;
  grid["grid"] = {{"T_m", {20, 30}}, {"initial_tokens", {0, 1, 2}}};
  ScenarioFile g = parse_scenario(grid);
  REQUIRE(g.grid);
  CHECK(g.grid->size() == 6);
  CHECK((*g.grid)[0][0].first == "T_m");
  CHECK((*g.grid)[1][1].second == 1);
  Scenario cell = apply_cell(g, (*g.grid)[5]);
  CHECK(cell.params.timeout == 30);
  CHECK(cell.faults.initial_tokens == 2);
  grid["grid"] = {{"T_m", {3}}};
  CHECK_THROWS_AS(parse_scenario(grid), SchemaError);
  grid["grid"] = {{"colour", {3}}};
  CHECK_THROWS_AS(parse_scenario(grid), SchemaError);
}

TEST_CASE("process scenarios move the graph unless told not to") {
  json j = k3_scenario(scratch("process"));
  j.erase("graph");
  json blink = {{"n", 3}, {"edges", {{0, 1}, {1, 2}}}};
  j["process"] = {{"n", 3},
                  {"states", {{{"edges", {{0, 1}, {1, 2}, {0, 2}}}}, blink}},
                  {"transitions", {{0.5, 0.5}, {0.5, 0.5}}}};
  ScenarioFile f = parse_scenario(j);
  CHECK(f.base.process.state_count() == 2);
  CHECK(f.base.faults.link_dynamics);
  j["faults"]["link_dynamics"] = false;
  CHECK_FALSE(parse_scenario(j).base.faults.link_dynamics);
}

TEST_CASE("simulate: legitimate K3 creates nothing") {
  fs::path dir = scratch("sim_k3");
  fs::path sc = write_json(dir / "k3.json", k3_scenario(dir / "out"));
  Cmd c = simulate(sc);
  REQUIRE(c.rc == kOk);
  json summary = json::parse(slurp(dir / "out" / "summary.json"));
  for (const auto& key : {"scenario_hash", "seeds", "convergence_rounds", "lc_fraction", "r2_creations", "cover_rounds"}) {
    CHECK(summary.contains(key));
  }
  CHECK(summary["r2_creations"] == json({0, 0}));
  CHECK(summary["seeds"] == json({1, 2}));

  // LC residency is the ratio of the summed counters
  double lc = 0, rounds = 0;
  for (const auto& r : summary["runs"]) {
    lc += r["metrics"]["lc_rounds"].get<double>();
    rounds += r["metrics"]["rounds"].get<double>();
  }
  CHECK(summary["lc_fraction"].get<double>() == lc / rounds);

  std::string trace = slurp(dir / "out" / "trace_seed1.csv");
  std::string first = trace.substr(0, trace.find('\n'));
  CHECK(first == "# scenario_hash=" + summary["scenario_hash"].get<std::string>() + " seed=1");
  CHECK(trace.find("round,class,token_count,wave_msgs,r2_total,graph_state\n") != std::string::npos);
}

TEST_CASE("simulate is reproducible") {
  fs::path dir = scratch("sim_repro");
  json s = k3_scenario(dir / "out");
  s["faults"] = {{"initial_tokens", 3}, {"table_mode", "random-corrupt"}, {"timer_mode", "random"},
                 {"token_loss_p", 0.01}};
  s["outputs"]["messages"] = true;
  s["horizon"] = 300;
  fs::path sc = write_json(dir / "s.json", s);
  REQUIRE(simulate(sc).rc == kOk);
  std::vector<std::string> first;
  for (auto name : {"summary.json", "trace_seed1.csv", "trace_seed2.csv", "messages_seed2.jsonl"}) {
    first.push_back(slurp(dir / "out" / name));
  }
  REQUIRE(simulate(sc).rc == kOk);
  int k = 0;
  for (auto name : {"summary.json", "trace_seed1.csv", "trace_seed2.csv", "messages_seed2.jsonl"}) {
    CHECK(slurp(dir / "out" / name) == first[k++]);
  }
  CHECK(first[3].rfind("# scenario_hash=", 0) == 0);
}

TEST_CASE("simulate exit codes") {
  fs::path dir = scratch("sim_codes");
  json bad = k3_scenario(dir / "out");
  bad["params"]["T_m"] = 4;
  Cmd c = simulate(write_json(dir / "bad.json", bad));
  CHECK(c.rc == kSchemaError);
  CHECK(c.err.find("T_m must exceed capacity+1") != std::string::npos);
  CHECK(std::count(c.err.begin(), c.err.end(), '\n') == 1);

  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(simulate(dir / "broken.json").rc == kSchemaError);
  CHECK(simulate(dir / "missing.json").rc == kSchemaError);

  json runtime = k3_scenario(dir / "out");
  runtime["faults"] = {{"initial_tokens", 0}, {"events", {{{"round", 3}, {"kind", "delete-token"}}}}};
  Cmd r = simulate(write_json(dir / "runtime.json", runtime));
  CHECK(r.rc == kRuntimeError);
  CHECK(r.err.find("no token") != std::string::npos);
}

TEST_CASE("analyze") {
  fs::path dir = scratch("analyze");
  fs::path k3 = write_json(dir / "k3.json", json{{"family", "complete"}, {"n", 3}});
  fs::path p3 = write_json(dir / "p3.json", json{{"n", 3}, {"edges", {{0, 1}, {1, 2}}}});

  AnalyzeOptions a;
  a.graph_path = k3;
  a.output_dir = dir / "k3";
  a.hitting = true;
  a.return_stats = true;
  Cmd c = analyze(a);
  REQUIRE(c.rc == kOk);
  CHECK(slurp(dir / "k3" / "hitting.csv") == "source,0,1,2\n0,0,2,2\n1,2,0,2\n2,2,2,0\n");
  CHECK(slurp(dir / "k3" / "return.csv") ==
        "node,return_h,return_h_first_step,return_variance\n0,3,3,2\n1,3,3,2\n2,3,3,2\n");

  AnalyzeOptions v;
  v.graph_path = p3;
  v.output_dir = dir / "p3";
  v.variance = true;
  v.target = 2;
  v.distribution_t_max = 5;
  REQUIRE(analyze(v).rc == kOk);
  CHECK(slurp(dir / "p3" / "variance_target2.csv") == "source,variance\n0,8\n1,8\n2,0\n");
  std::string dist = slurp(dir / "p3" / "distribution_target2.csv");
  CHECK(dist.rfind("t,source0,source1,source2\n0,0,0,1\n", 0) == 0);

  fs::path dis = write_json(dir / "dis.json", json{{"n", 4}, {"edges", {{0, 1}, {2, 3}}}});
  AnalyzeOptions d;
  d.graph_path = dis;
  d.output_dir = dir / "dis";
  d.hitting = true;
  CHECK(analyze(d).rc == kRuntimeError);

  AnalyzeOptions none;
  none.graph_path = k3;
  CHECK(analyze(none).rc == kSchemaError);
}

TEST_CASE("tune") {
  TuneOptions t;
  t.variance = 51;
  t.p = 0.1;
  t.epsilon = 0.05;
  fs::path dir = scratch("tune");
  t.output_dir = dir;
  Cmd c = tune(t);
  REQUIRE(c.rc == kOk);
  CHECK(c.out == "t=23\nT_m=23\n");
  std::string curve = slurp(dir / "bound_curve.csv");
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 1 + 46);
  json j = json::parse(slurp(dir / "tune.json"));
  CHECK(j["recommended_T_m"] == 23);
  CHECK(j["inputs"]["variance"] == 51.0);
  CHECK(j["bound_curve"].size() == 46);

  t.epsilon = 0.01;
  t.output_dir.reset();
  CHECK(tune(t).out == "t=32\nT_m=32\n");

  t.capacity = 40;
  CHECK(tune(t).out == "t=32\nT_m=42\n");
  t.capacity = 0;

  t.method = "closed";
  t.return_h = 5;
  Cmd closed = tune(t);
  REQUIRE(closed.rc == kOk);
  CHECK(closed.out.rfind("t=84.638", 0) == 0);
  CHECK(closed.err.find("scan result is authoritative") != std::string::npos);

  TuneOptions g;
  g.graph_path = write_json(dir / "k3.json", json{{"family", "complete"}, {"n", 3}});
  g.node = 0;
  g.p = 0.1;
  CHECK(tune(g).out == "t=" + std::to_string(tune_timeout_scan(2.0, 0.1, 0.05, 1000)) + "\n" + "T_m=" +
                           std::to_string(tune_timeout_scan(2.0, 0.1, 0.05, 1000)) + "\n");

  TuneOptions zero;
  zero.variance = 51;
  zero.p = 0.0;
  Cmd z = tune(zero);
  CHECK(z.rc == kSchemaError);
  CHECK(z.err.find("cannot be lost") != std::string::npos);

  TuneOptions cap;
  cap.variance = 1e12;
  cap.p = 0.001;
  cap.epsilon = 0.001;
  cap.t_cap = 5;
  CHECK(tune(cap).rc == kRuntimeError);
}

TEST_CASE("sweep: convergence grows with T_m on a no-token start") {
  fs::path dir = scratch("sweep_tm");
  json s = {{"graph", {{"family", "complete"}, {"n", 4}}},
            {"params", {{"T_m", 20}}},
            {"faults", {{"initial_tokens", 0}}},
            {"horizon", 3000},
            {"seeds", {{"from", 0}, {"to", 19}}},
            {"grid", {{"T_m", {20, 30, 50}}}},
            {"outputs", {{"dir", (dir / "out").string()}, {"traces", false}}}};
  Cmd c = sweep(write_json(dir / "s.json", s), 3);
  REQUIRE(c.rc == kOk);
  json summary = json::parse(slurp(dir / "out" / "summary.json"));
  std::vector<double> mean(3, 0.0);
  for (const auto& r : summary["runs"]) {
    REQUIRE(!r["metrics"]["convergence_round"].is_null());
    mean[r["cell"].get<std::size_t>()] += r["metrics"]["convergence_round"].get<double>() / 20;
  }
  CHECK(mean[0] < mean[1]);
  CHECK(mean[1] < mean[2]);
  for (std::size_t k = 0; k < 3; ++k) CHECK(mean[k] >= std::vector<double>{20, 30, 50}[k]);
}

TEST_CASE("sweep: duplicated tokens merge on K3") {
  fs::path dir = scratch("sweep_dup");
  json s = {{"graph", {{"family", "complete"}, {"n", 3}}},
            {"params", {{"T_m", 10}}},
            {"faults", {{"initial_tokens", 1}, {"events", {{{"round", 0}, {"kind", "duplicate-token"}}}}}},
            {"horizon", 10000},
            {"seeds", {{"from", 0}, {"to", 99}}},
            {"outputs", {{"dir", (dir / "out").string()}, {"traces", false}}}};
  Cmd c = sweep(write_json(dir / "s.json", s), 4);
  REQUIRE(c.rc == kOk);
  json summary = json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(summary["aggregates"]["converged_fraction"].get<double>() >= 0.99);
  CHECK(summary["runs"].size() == 100);
}

TEST_CASE("sweep is independent of the worker count") {
  fs::path dir = scratch("sweep_jobs");
  json s = {{"graph", {{"family", "cycle"}, {"n", 5}}},
            {"params", {{"T_m", 12}}},
            {"faults", {{"initial_tokens", 2}, {"table_mode", "random-corrupt"}}},
            {"horizon", 500},
            {"seeds", {{"from", 0}, {"to", 7}}},
            {"grid", {{"initial_tokens", {1, 3}}}},
            {"outputs", {{"dir", (dir / "out").string()}}}};
  fs::path sc = write_json(dir / "s.json", s);
  REQUIRE(sweep(sc, 1).rc == kOk);
  std::string one = slurp(dir / "out" / "summary.json");
  std::string trace = slurp(dir / "out" / "trace_cell1_seed3.csv");
  CHECK(trace.rfind("# scenario_hash=", 0) == 0);
  CHECK(trace.substr(0, trace.find('\n')).find("seed=3 cell=1") != std::string::npos);
  REQUIRE(sweep(sc, 4).rc == kOk);
  CHECK(slurp(dir / "out" / "summary.json") == one);
  CHECK(slurp(dir / "out" / "trace_cell1_seed3.csv") == trace);
}

TEST_CASE("sweep exit codes") {
  fs::path dir = scratch("sweep_codes");
  json s = k3_scenario(dir / "out");
  s["grid"] = json::object();
  CHECK(sweep(write_json(dir / "empty.json", s)).rc == kSchemaError);
  s["grid"] = {{"T_m", json::array()}};
  CHECK(sweep(write_json(dir / "empty2.json", s)).rc == kSchemaError);
  s["grid"] = {{"initial_tokens", {0, 1}}};
  s["faults"] = {{"events", {{{"round", 5}, {"kind", "delete-token"}}}}};
  s["horizon"] = 20;
  Cmd c = sweep(write_json(dir / "partial.json", s));
  CHECK(c.rc == kCellFailed);
  json summary = json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(summary["aggregates"]["failures"] == 2);
  CHECK(summary["runs"].size() == 4);
}

TEST_CASE("fnv1a and atomic writes") {
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
  fs::path dir = scratch("atomic");
  write_file_atomic(dir / "sub" / "x.txt", "hello");
  CHECK(slurp(dir / "sub" / "x.txt") == "hello");
  CHECK_FALSE(fs::exists(dir / "sub" / "x.txt.tmp"));
}

TEST_CASE("command-line binary") {
  const char* cli = std::getenv("RWTOKEN_CLI");
  if (!cli) return;
  fs::path dir = scratch("cli");
  auto rc = [](const std::string& cmd) {
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const std::string quiet = " >" + (dir / "out.txt").string() + " 2>&1";
  CHECK(rc(std::string(cli) + " tune -V 51 -p 0.1 -e 0.05" + quiet) == 0);
  CHECK(slurp(dir / "out.txt") == "t=23\nT_m=23\n");
  CHECK(rc(std::string(cli) + " tune -V 51 -p 0" + quiet) == 2);
  CHECK(rc(std::string(cli) + " frobnicate" + quiet) == 2);
  write_json(dir / "dis.json", json{{"n", 4}, {"edges", {{0, 1}, {2, 3}}}});
  CHECK(rc(std::string(cli) + " analyze " + (dir / "dis.json").string() + " --hitting -o " + dir.string() + quiet) == 3);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>
#include <sstream>

#include "json.hpp"
#include "rwtoken/sim.hpp"

using namespace rwtoken;

namespace {

Scenario make_scenario(StaticGraph g, int timeout, std::size_t tokens, std::int64_t horizon,
                       std::uint64_t seed = 1) {
  Scenario s;
  s.params.capacity = g.node_count();
  s.params.timeout = timeout;
  s.process = DynamicGraphProcess::constant(std::move(g));
  s.faults.initial_tokens = tokens;
  s.horizon = horizon;
  s.seed = seed;
  return s;
}

// Nodes k with an incorrect entry in some token.
std::set<std::size_t> incorrect_entries(const Configuration& c) {
  std::set<std::size_t> out;
  for (const auto& t : c.tokens) {
    for (NodeId k = 0; k < t.msg.table.size(); ++k) {
      const auto& e = t.msg.table[k];
      if (!e || *e == k) continue;
      if (k >= c.graph.node_count()) continue;
      if (!c.graph.has_edge(k, *e)) out.insert(k);
    }
  }
  return out;
}

struct Recorder : RunObserver {
  std::vector<Classification> classes;
  std::vector<std::size_t> counts;
  void on_round(const Configuration& c, const Classification& cls, const StepEvents&) override {
    classes.push_back(cls);
    counts.push_back(c.token_count());
  }
};

}  // namespace

TEST_CASE("scenario validation") {
  Scenario s = make_scenario(complete_graph(3), 4, 1, 10);
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("T_m must exceed capacity+1"), InvalidInput);
  s.params.timeout = 5;
  CHECK_NOTHROW(s.validate());
  s.horizon = 0;
  CHECK_THROWS_AS(s.validate(), InvalidInput);
  s.horizon = 10;
  s.params.capacity = 2;
  s.params.timeout = 10;
  CHECK_THROWS_AS(s.validate(), InvalidInput);
  s.params.capacity = 3;
  s.faults.token_loss_p = 1.5;
  CHECK_THROWS_AS(s.validate(), InvalidInput);
  CHECK(parse_fault_kind("remove-link") == FaultKind::remove_link);
  CHECK_THROWS_AS(parse_fault_kind("explode"), InvalidInput);
}

TEST_CASE("initial configurations") {
  SUBCASE("canonical start") {
    Scenario s = make_scenario(complete_graph(4), 20, 1, 10);
    Rng rng = make_rng(1);
    Configuration c = init_configuration(s, rng);
    CHECK(c.round == 0);
    CHECK(c.token_count() == 1);
    for (const auto& n : c.nodes) CHECK(n.timer == 20);
    const auto& t = c.tokens[0].msg;
    CHECK(t.table[t.emitter] == t.emitter);
    CHECK(c.graph.has_edge(t.emitter, t.recipient));
    CHECK(classify(c, c.graph).cls == LegitimacyClass::a1_a2);
  }
  SUBCASE("no token") {
    Scenario s = make_scenario(complete_graph(4), 20, 0, 10);
    Rng rng = make_rng(1);
    Configuration c = init_configuration(s, rng);
    CHECK(c.token_count() == 0);
    CHECK(classify(c, c.graph).cls == LegitimacyClass::a1);
  }
  SUBCASE("corrupt start is reproducible") {
    Scenario s = make_scenario(complete_graph(5), 30, 3, 10, 7);
    s.faults.table_mode = TableMode::random_corrupt;
    s.faults.timer_mode = TimerMode::uniform_random;
    Rng a = make_rng(7), b = make_rng(7);
    Configuration x = init_configuration(s, a), y = init_configuration(s, b);
    CHECK(x.token_count() == 3);
    REQUIRE(x.tokens.size() == y.tokens.size());
    for (std::size_t k = 0; k < x.tokens.size(); ++k) CHECK(x.tokens[k].msg == y.tokens[k].msg);
    CHECK(x.nodes == y.nodes);
    for (const auto& n : x.nodes) {
      CHECK(n.timer >= 0);
      CHECK(n.timer <= 30);
    }
  }
}

TEST_CASE("a single token on a ring of three stays single") {
  Scenario s = make_scenario(cycle_graph(3), 10, 1, 1);
  Rng rng = make_rng(2);
  Configuration c = init_configuration(s, rng);
  for (int r = 0; r < 500; ++r) {
    advance(c, s, rng);
    REQUIRE(c.token_count() == 1);
    CHECK(c.round == r + 1);
  }
}

TEST_CASE("equal timers and no token: the burst comes at round T_m") {
  const int tm = 12;
  Scenario s = make_scenario(complete_graph(5), tm, 0, 40);
  RunResult res = run(s);
  for (int r = 0; r < tm; ++r) CHECK(res.trace[r].r2_total == 0);
  CHECK(res.trace[tm].r2_total == 5);
  CHECK(res.trace[tm].token_count == 5);
  for (std::size_t r = tm; r < res.trace.size(); ++r) CHECK(res.trace[r].token_count >= 1);
}

TEST_CASE("no-token start converges after T_m") {
  Scenario s = make_scenario(complete_graph(5), 15, 0, 3000);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    RunResult res = run(s);
    REQUIRE(res.metrics.convergence_round.has_value());
    CHECK(*res.metrics.convergence_round >= 15);
    CHECK(res.metrics.converged_and_closed());
  }
}

TEST_CASE("token on a removed link is dropped") {
  Scenario s = make_scenario(complete_graph(4), 20, 1, 10);
  Rng rng = make_rng(3);
  Configuration c = init_configuration(s, rng);
  const auto t = c.tokens[0].msg;
  FaultSpec f;
  f.kind = FaultKind::remove_link;
  f.edge = Edge(t.emitter, t.recipient);
  c = inject_fault(std::move(c), f, s.params.capacity, rng);
  CHECK(c.token_count() == 1);
  StepEvents ev;
  c = step(std::move(c), s, rng, &ev);
  CHECK(c.token_count() == 0);
  CHECK(ev.messages_dropped == 1);
}

TEST_CASE("link dynamics drop messages on vanished links") {
  // state 1 lacks every link at node 0; always switch
  StaticGraph full = complete_graph(3);
  StaticGraph cut(3);
  cut.add_edge(1, 2);
  Eigen::MatrixXd t(2, 2);
  t << 0, 1, 1, 0;
  Scenario s;
  s.process = DynamicGraphProcess({full, cut}, t);
  s.params.capacity = 3;
  s.params.timeout = 30;
  s.faults.link_dynamics = true;
  s.horizon = 200;
  Rng rng = make_rng(4);
  Configuration c = init_configuration(s, rng);
  std::size_t dropped = 0;
  for (int r = 0; r < 200; ++r) {
    auto ev = advance(c, s, rng);
    dropped += ev.messages_dropped;
    CHECK(c.graph_state == static_cast<std::size_t>((r + 1) % 2));
    for (const auto& tok : c.tokens) {
      if (!tok.msg.stalled()) CHECK(c.graph.has_edge(tok.msg.emitter, tok.msg.recipient));
    }
  }
  CHECK(dropped > 0);
}

TEST_CASE("isolated node keeps a stalled token") {
  StaticGraph g(3);
  g.add_edge(1, 2);
  Scenario s = make_scenario(g, 10, 0, 5);
  Rng rng = make_rng(5);
  Configuration c = init_configuration(s, rng);
  TokenMsg t;
  t.emitter = 0;
  t.recipient = 0;
  t.table = ParentTable{0, std::nullopt, std::nullopt};
  t.hop = 2;
  t.trace_id = c.next_trace_id++;
  c.visited[t.trace_id] = std::vector<bool>(3, false);
  c.tokens.push_back({t, 0});
  s.faults.token_loss_p = 1.0;  // stalled tokens do not hop, so are never lost
  for (int r = 0; r < 5; ++r) {
    advance(c, s, rng);
    bool held = false;
    for (const auto& tok : c.tokens) {
      if (tok.msg.recipient == 0) {
        held = true;
        CHECK(tok.msg.stalled());
        CHECK(tok.msg.hop == 2);
      }
    }
    CHECK(held);
    CHECK(c.nodes[0].timer == 10);
  }
}

TEST_CASE("classification") {
  Scenario s = make_scenario(path_graph(3), 10, 1, 5);
  Rng rng = make_rng(6);
  Configuration c = init_configuration(s, rng);
  auto& t = c.tokens[0].msg;
  t.table = {2, std::nullopt, std::nullopt};  // (0, 2) is not a link
  CHECK(classify(c, c.graph).cls == LegitimacyClass::not_a1);
  t.table = {std::nullopt, 1, std::nullopt};
  c.visited[t.trace_id] = {true, true, true};
  auto cls = classify(c, c.graph);
  CHECK(cls.cls == LegitimacyClass::lc);
  CHECK(cls.lc);
  CHECK(to_string(cls.cls) == "LC");
  c.tokens.push_back(c.tokens[0]);
  CHECK(classify(c, c.graph).cls == LegitimacyClass::a3);
  c.tokens.clear();
  CHECK(classify(c, c.graph).cls == LegitimacyClass::a1);
}

TEST_CASE("fault injection") {
  Scenario s = make_scenario(complete_graph(5), 20, 1, 10);
  Rng rng = make_rng(8);
  Configuration c = init_configuration(s, rng);

  SUBCASE("delete the only token") {
    FaultSpec f{FaultKind::delete_token, std::nullopt, false};
    Configuration d = inject_fault(c, f, 5, rng);
    CHECK(d.token_count() == 0);
    CHECK_FALSE(classify(d, d.graph).a2);
    CHECK_THROWS_AS(inject_fault(d, f, 5, rng), InvalidInput);
  }
  SUBCASE("duplicate, then merge back") {
    FaultSpec f{FaultKind::duplicate_token, std::nullopt, false};
    Configuration d = inject_fault(c, f, 5, rng);
    REQUIRE(d.token_count() == 2);
    CHECK(d.tokens[0].msg.trace_id != d.tokens[1].msg.trace_id);
    CHECK(d.visited.at(d.tokens[0].msg.trace_id) == d.visited.at(d.tokens[1].msg.trace_id));
    for (int r = 0; r < 2000 && d.token_count() > 1; ++r) advance(d, s, rng);
    CHECK(d.token_count() == 1);
  }
  SUBCASE("corrupt table") {
    FaultSpec f{FaultKind::corrupt_table, std::nullopt, false};
    Configuration d = inject_fault(c, f, 5, rng);
    CHECK(d.tokens[0].msg.table.size() == 5);
  }
  SUBCASE("add and remove links") {
    FaultSpec add{FaultKind::add_link, std::nullopt, false};
    CHECK_THROWS_AS(inject_fault(c, add, 5, rng), InvalidInput);
    FaultSpec rm{FaultKind::remove_link, Edge(0, 1), false};
    Configuration d = inject_fault(c, rm, 5, rng);
    CHECK_FALSE(d.graph.has_edge(0, 1));
    CHECK_THROWS_AS(inject_fault(d, rm, 5, rng), InvalidInput);
    add.edge = Edge(0, 1);
    d = inject_fault(d, add, 5, rng);
    CHECK(d.graph.has_edge(0, 1));
  }
  SUBCASE("removing a tree link raises the local flag") {
    for (int r = 0; r < 50; ++r) advance(c, s, rng);
    FaultSpec f{FaultKind::remove_link, std::nullopt, true};
    Configuration d = inject_fault(c, f, 5, rng);
    auto cls = classify(d, d.graph);
    bool any = false;
    for (std::size_t i = 0; i < 5; ++i) {
      if (!cls.father_lost[i]) continue;
      any = true;
      CHECK_FALSE(d.graph.has_edge(static_cast<NodeId>(i), *d.nodes[i].father));
    }
    CHECK(any);
  }
}

TEST_CASE("runs are deterministic") {
  Scenario s = make_scenario(complete_graph(6), 25, 3, 2000, 42);
  s.faults.table_mode = TableMode::random_corrupt;
  s.faults.timer_mode = TimerMode::uniform_random;
  s.faults.token_loss_p = 0.01;
  RunResult a = run(s), b = run(s);
  CHECK(a.trace == b.trace);
  std::ostringstream x, y;
  write_trace_csv(x, a.trace);
  write_trace_csv(y, b.trace);
  CHECK(x.str() == y.str());
  CHECK(x.str().rfind("round,class,token_count,wave_msgs,r2_total,graph_state\n", 0) == 0);
  s.seed = 43;
  CHECK_FALSE(run(s).trace == a.trace);
}

TEST_CASE("legitimate start on K3 never creates a token") {
  Scenario s = make_scenario(complete_graph(3), 10, 1, 100000, 3);
  Recorder rec;
  RunResult res = run(s, &rec);
  CHECK(res.metrics.r2_creations == 0);
  bool single = true;
  for (auto n : rec.counts) single = single && n == 1;
  CHECK(single);
  CHECK(res.metrics.converged_and_closed());
  CHECK(res.metrics.wave_launches > 0);
}

TEST_CASE("static invariants along corrupt runs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng g_rng = make_rng(seed, 1);
    StaticGraph g = random_connected_graph(3 + uniform_index(g_rng, 6), 0.4, g_rng);
    Scenario s = make_scenario(g, static_cast<int>(g.node_count()) + 30, 1 + seed % 4, 3000, seed);
    s.params.capacity = g.node_count() + 1;
    s.params.timeout += 1;
    s.faults.table_mode = TableMode::random_corrupt;
    s.faults.timer_mode = TimerMode::uniform_random;
    Rng rng = make_rng(seed);
    Configuration c = init_configuration(s, rng);
    auto inc = incorrect_entries(c);
    bool was_a1 = classify(c, c.graph).a1;
    for (int r = 0; r < 3000; ++r) {
      const std::size_t before = c.token_count();
      advance(c, s, rng);
      auto cls = classify(c, c.graph);
      auto now = incorrect_entries(c);
      REQUIRE(std::includes(inc.begin(), inc.end(), now.begin(), now.end()));
      inc = std::move(now);
      if (was_a1) REQUIRE(cls.a1);
      if (before >= 1) REQUIRE(c.token_count() >= 1);
      for (const auto& n : c.nodes) {
        REQUIRE(n.timer >= 0);
        REQUIRE(n.timer <= s.params.timeout);
      }
      was_a1 = cls.a1;
    }
  }
}

TEST_CASE("token count does not grow once A3 holds with static links and no loss") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Scenario s = make_scenario(complete_graph(5), 40, 3, 4000, seed);
    s.faults.table_mode = TableMode::random_corrupt;
    Rng rng = make_rng(seed);
    Configuration c = init_configuration(s, rng);
    bool a3 = false;
    for (int r = 0; r < 4000; ++r) {
      const std::size_t before = c.token_count();
      advance(c, s, rng);
      if (a3) REQUIRE(c.token_count() <= before);
      a3 = a3 || classify(c, c.graph).a3;
    }
  }
}

TEST_CASE("visited sets of a legitimate token span a tree") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng g_rng = make_rng(seed, 2);
    StaticGraph g = random_connected_graph(4 + uniform_index(g_rng, 6), 0.3, g_rng);
    Scenario s = make_scenario(g, 200, 1, 2000, seed);
    Rng rng = make_rng(seed);
    Configuration c = init_configuration(s, rng);
    for (int r = 0; r < 2000; ++r) {
      advance(c, s, rng);
      for (const auto& t : c.tokens) {
        REQUIRE(is_spanning_tree(t.msg.table, c.visited.at(t.msg.trace_id), g));
      }
    }
  }
}

TEST_CASE("run metrics bookkeeping") {
  Scenario s = make_scenario(complete_graph(4), 12, 0, 500, 9);
  Recorder rec;
  RunResult res = run(s, &rec);
  const auto& m = res.metrics;
  CHECK(m.rounds == 500);
  CHECK(m.legitimacy_timeline.size() == 500);
  std::size_t lc = 0;
  for (auto cls : m.legitimacy_timeline) lc += cls == LegitimacyClass::lc;
  CHECK(lc == m.lc_rounds);
  CHECK(m.lc_fraction() == doctest::Approx(double(lc) / 500));
  REQUIRE(m.convergence_round);
  CHECK(m.legitimacy_timeline[*m.convergence_round] == LegitimacyClass::lc);
  CHECK(m.r2_creations == res.trace.back().r2_total);
  CHECK(rec.classes.size() == 500);
}

TEST_CASE("scheduled faults fire at their round") {
  Scenario s = make_scenario(complete_graph(4), 20, 1, 30, 2);
  s.faults.events.push_back({10, FaultSpec{FaultKind::delete_token, std::nullopt, false}});
  RunResult res = run(s);
  CHECK(res.trace[9].token_count == 1);
  CHECK(res.trace[10].token_count == 0);
}

TEST_CASE("message log lines are JSON") {
  Scenario s = make_scenario(complete_graph(3), 10, 1, 3);
  Rng rng = make_rng(1);
  Configuration c = init_configuration(s, rng);
  std::ostringstream out;
  write_message_log_line(out, c);
  auto j = nlohmann::json::parse(out.str());
  CHECK(j["tokens"].size() == 1);
  CHECK(j["round"] == 0);
}

TEST_CASE("walk samplers") {
  Rng rng = make_rng(10);
  StaticGraph k3 = complete_graph(3);
  CHECK(*sample_hitting_time(k3, 1, 1, rng) == 0);
  CHECK(*sample_return_time(complete_graph(2), 0, rng) == 2);
  StaticGraph two(2);
  CHECK_FALSE(sample_hitting_time(two, 0, 1, rng, 100).has_value());

  double sum = 0;
  const int trials = 100000;
  for (int k = 0; k < trials; ++k) sum += static_cast<double>(*sample_return_time(k3, 0, rng));
  CHECK(std::abs(sum / trials - 3.0) < 4 * std::sqrt(2.0 / trials));
}

#include "rwtoken/sim.hpp"

#include <algorithm>
#include <ostream>
#include <string>

#include "json.hpp"

namespace rwtoken {

namespace {

std::vector<bool> no_nodes(std::size_t n) { return std::vector<bool>(n, false); }

ParentTable random_table(std::size_t capacity, Rng& rng) {
  ParentTable table(capacity);
  for (auto& entry : table) {
    if (bernoulli(rng, 0.5)) entry = static_cast<NodeId>(uniform_index(rng, capacity));
  }
  return table;
}

// A blocked wave only matters if the child has not handled a token since the
// wave was launched; otherwise its timer is already newer than the wave.
void record_blocked(const Configuration& c, NodeId child, std::int64_t launch_round,
                    StepEvents& ev) {
  if (child >= c.nodes.size()) return;
  if (c.last_token_round[child] >= launch_round) return;
  ++ev.failed_wave_sends;
  if (!father_lost(c.nodes[child], c.graph.neighbors(child))) ++ev.undetected_failed_wave_sends;
}

void drop_unsupported_messages(Configuration& c, StepEvents& ev) {
  auto& tokens = c.tokens;
  for (auto it = tokens.begin(); it != tokens.end();) {
    const TokenMsg& t = it->msg;
    if (!t.stalled() && !c.graph.has_edge(t.emitter, t.recipient)) {
      c.visited.erase(t.trace_id);
      it = tokens.erase(it);
      ++ev.messages_dropped;
    } else {
      ++it;
    }
  }
  auto& waves = c.waves;
  for (auto it = waves.begin(); it != waves.end();) {
    if (!c.graph.has_edge(it->msg.sender, it->msg.recipient)) {
      record_blocked(c, it->msg.recipient, it->launch_round, ev);
      it = waves.erase(it);
      ++ev.messages_dropped;
    } else {
      ++it;
    }
  }
}

void place_token(Configuration& c, NodeId emitter, ParentTable table, int hop, Rng& rng) {
  auto nbrs = c.graph.neighbors(emitter);
  TokenMsg t;
  t.emitter = emitter;
  t.recipient = nbrs.empty() ? emitter : nbrs[uniform_index(rng, nbrs.size())];
  t.table = std::move(table);
  t.hop = hop;
  t.trace_id = c.next_trace_id++;
  c.visited.emplace(t.trace_id, no_nodes(c.nodes.size()));
  c.tokens.push_back(InFlightToken{std::move(t), c.round});
}

}  // namespace

std::string_view to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::delete_token: return "delete-token";
    case FaultKind::duplicate_token: return "duplicate-token";
    case FaultKind::corrupt_table: return "corrupt-table";
    case FaultKind::remove_link: return "remove-link";
    case FaultKind::add_link: return "add-link";
  }
  return "unknown";
}

FaultKind parse_fault_kind(std::string_view name) {
  for (auto k : {FaultKind::delete_token, FaultKind::duplicate_token, FaultKind::corrupt_table,
                 FaultKind::remove_link, FaultKind::add_link}) {
    if (to_string(k) == name) return k;
  }
  throw InvalidInput("unknown fault kind '" + std::string(name) + "'");
}

std::string_view to_string(LegitimacyClass c) {
  switch (c) {
    case LegitimacyClass::not_a1: return "notA1";
    case LegitimacyClass::a1: return "A1";
    case LegitimacyClass::a1_a2: return "A1A2";
    case LegitimacyClass::a3: return "A3";
    case LegitimacyClass::lc: return "LC";
  }
  return "unknown";
}

void FaultModel::validate() const {
  if (!(token_loss_p >= 0.0 && token_loss_p <= 1.0)) {
    throw InvalidInput("token_loss_p must lie in [0, 1]");
  }
  for (const auto& e : events) {
    if (e.round < 0) throw InvalidInput("fault events need a non-negative round");
    const bool needs_token = e.fault.kind == FaultKind::delete_token ||
                             e.fault.kind == FaultKind::duplicate_token ||
                             e.fault.kind == FaultKind::corrupt_table;
    if (needs_token && e.round == 0 && initial_tokens == 0) {
      throw InvalidInput(std::string(to_string(e.fault.kind)) + " at round 0 needs initial_tokens > 0");
    }
  }
}

void Scenario::validate() const {
  params.validate();
  faults.validate();
  if (horizon <= 0) throw InvalidInput("horizon must be positive");
  if (process.node_count() > params.capacity) {
    throw InvalidInput("graph has " + std::to_string(process.node_count()) +
                       " nodes but capacity is " + std::to_string(params.capacity));
  }
}

Classification classify(const Configuration& c, const StaticGraph& g) {
  const std::size_t n = g.node_count();
  Classification out;
  out.token_count = c.tokens.size();
  out.a1 = std::all_of(c.tokens.begin(), c.tokens.end(),
                       [&](const InFlightToken& t) { return is_correct(t.msg, g); });
  out.a2 = out.token_count >= 1;

  std::vector<bool> seen(n, false);
  for (const auto& t : c.tokens) {
    auto it = c.visited.find(t.msg.trace_id);
    if (it == c.visited.end()) continue;
    for (std::size_t k = 0; k < n && k < it->second.size(); ++k) {
      if (it->second[k]) seen[k] = true;
    }
  }
  out.covered = n > 0 && std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
  out.a3 = out.a1 && out.a2 && out.covered;
  out.lc = out.a3 && out.token_count == 1;

  if (!out.a1) {
    out.cls = LegitimacyClass::not_a1;
  } else if (!out.a2) {
    out.cls = LegitimacyClass::a1;
  } else if (!out.covered) {
    out.cls = LegitimacyClass::a1_a2;
  } else if (!out.lc) {
    out.cls = LegitimacyClass::a3;
  } else {
    out.cls = LegitimacyClass::lc;
  }

  out.father_lost.resize(c.nodes.size());
  for (std::size_t i = 0; i < c.nodes.size(); ++i) {
    out.father_lost[i] = i < n && father_lost(c.nodes[i], g.neighbors(static_cast<NodeId>(i)));
  }
  return out;
}

Configuration init_configuration(const Scenario& s, Rng& rng) {
  s.validate();
  const std::size_t n = s.process.node_count();
  Configuration c;
  c.graph_state = 0;
  c.graph = s.process.state(0);
  c.nodes.resize(n);
  c.last_token_round.assign(n, -1);
  for (NodeId i = 0; i < n; ++i) {
    c.nodes[i].id = i;
    c.nodes[i].timer = s.faults.timer_mode == TimerMode::full
                           ? s.params.timeout
                           : static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.params.timeout) + 1));
  }
  for (std::size_t k = 0; k < s.faults.initial_tokens; ++k) {
    const auto emitter = static_cast<NodeId>(uniform_index(rng, n));
    if (s.faults.table_mode == TableMode::fresh) {
      ParentTable table = empty_table(s.params.capacity);
      table[emitter] = emitter;
      place_token(c, emitter, std::move(table), 0, rng);
    } else {
      ParentTable table = random_table(s.params.capacity, rng);
      const int hop = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(s.params.timeout) + 1));
      place_token(c, emitter, std::move(table), hop, rng);
    }
  }
  return c;
}

Configuration inject_fault(Configuration c, const FaultSpec& fault, std::size_t capacity, Rng& rng) {
  const std::size_t n = c.graph.node_count();
  auto pick_token = [&]() -> std::size_t {
    if (c.tokens.empty()) {
      throw InvalidInput("no token to " + std::string(to_string(fault.kind)));
    }
    return uniform_index(rng, c.tokens.size());
  };

  switch (fault.kind) {
    case FaultKind::delete_token: {
      const std::size_t k = pick_token();
      c.visited.erase(c.tokens[k].msg.trace_id);
      c.tokens.erase(c.tokens.begin() + static_cast<std::ptrdiff_t>(k));
      break;
    }
    case FaultKind::duplicate_token: {
      const std::size_t k = pick_token();
      InFlightToken copy = c.tokens[k];
      const TraceId original = copy.msg.trace_id;
      copy.msg.trace_id = c.next_trace_id++;
      auto it = c.visited.find(original);
      c.visited[copy.msg.trace_id] = it != c.visited.end() ? it->second : no_nodes(n);
      c.tokens.push_back(std::move(copy));
      break;
    }
    case FaultKind::corrupt_table: {
      const std::size_t k = pick_token();
      c.tokens[k].msg.table = random_table(capacity, rng);
      break;
    }
    case FaultKind::remove_link: {
      Edge target;
      if (fault.edge) {
        target = *fault.edge;
        if (!c.graph.has_edge(target.a, target.b)) throw InvalidInput("remove-link: link is absent");
      } else {
        std::vector<Edge> candidates;
        if (fault.tree_edge) {
          for (const auto& node : c.nodes) {
            if (node.father && c.graph.has_edge(node.id, *node.father)) {
              candidates.emplace_back(node.id, *node.father);
            }
          }
          std::sort(candidates.begin(), candidates.end());
          candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
        } else {
          candidates = c.graph.edges();
        }
        if (candidates.empty()) throw InvalidInput("remove-link: no candidate link");
        target = candidates[uniform_index(rng, candidates.size())];
      }
      c.graph.remove_edge(target.a, target.b);
      break;
    }
    case FaultKind::add_link: {
      Edge target;
      if (fault.edge) {
        target = *fault.edge;
        if (target.a == target.b || target.b >= n) throw InvalidInput("add-link: invalid pair");
        if (c.graph.has_edge(target.a, target.b)) throw InvalidInput("add-link: link already present");
      } else {
        std::vector<Edge> absent;
        for (NodeId i = 0; i < n; ++i) {
          for (NodeId j = i + 1; j < n; ++j) {
            if (!c.graph.has_edge(i, j)) absent.emplace_back(i, j);
          }
        }
        if (absent.empty()) throw InvalidInput("add-link: graph is complete");
        target = absent[uniform_index(rng, absent.size())];
      }
      c.graph.add_edge(target.a, target.b);
      break;
    }
  }
  return c;
}

StepEvents advance(Configuration& c, const Scenario& s, Rng& rng) {
  const std::int64_t r = c.round;
  const std::size_t n = c.nodes.size();
  const ProtocolParams& params = s.params;
  StepEvents ev;

  for (const auto& e : s.faults.events) {
    if (e.round == r) c = inject_fault(std::move(c), e.fault, params.capacity, rng);
  }

  // 1. topology
  if (s.faults.link_dynamics && s.process.state_count() > 1) {
    c.graph_state = sample_next_graph(s.process, c.graph_state, rng);
    c.graph = s.process.state(c.graph_state);
  }
  drop_unsupported_messages(c, ev);

  std::vector<bool> processed(n, false);
  std::vector<InFlightWave> next_waves;
  std::vector<InFlightToken> next_tokens;

  // 2. reloading waves
  std::vector<InFlightWave> waves;
  waves.swap(c.waves);
  for (auto& w : waves) {
    if (w.deliver_round > r) {
      next_waves.push_back(std::move(w));
      continue;
    }
    const NodeId i = w.msg.recipient;
    R3Result res = apply_r3(c.nodes[i], w.msg, params, c.graph.neighbors(i));
    c.nodes[i] = res.node;
    processed[i] = true;
    for (NodeId child : res.blocked_children) record_blocked(c, child, w.launch_round, ev);
    for (auto& f : res.forwards) next_waves.push_back(InFlightWave{std::move(f), r + 1, w.launch_round});
  }

  // 3. tokens, one R1 set per node; loss is drawn per hop at delivery
  std::vector<std::vector<TokenMsg>> arrivals(n);
  for (auto& t : c.tokens) {
    if (t.deliver_round > r) {
      next_tokens.push_back(std::move(t));
      continue;
    }
    if (!t.msg.stalled() && bernoulli(rng, s.faults.token_loss_p)) {
      c.visited.erase(t.msg.trace_id);
      ++ev.tokens_lost;
      continue;
    }
    arrivals[t.msg.recipient].push_back(std::move(t.msg));
  }
  c.tokens.clear();

  for (NodeId i = 0; i < n; ++i) {
    auto& received = arrivals[i];
    if (received.empty()) continue;
    R1Result res = apply_r1(c.nodes[i], received, params, c.graph.neighbors(i), rng);
    c.nodes[i] = res.node;
    processed[i] = true;
    c.last_token_round[i] = r;
    ev.merges += received.size() - 1;

    std::vector<bool> seen = no_nodes(n);
    for (const auto& t : received) {
      auto it = c.visited.find(t.trace_id);
      if (it == c.visited.end()) continue;
      for (std::size_t k = 0; k < n; ++k) {
        if (it->second[k]) seen[k] = true;
      }
      c.visited.erase(it);
    }
    seen[i] = true;
    c.visited[res.token.trace_id] = std::move(seen);

    if (res.wave_launched) ++ev.wave_launches;
    for (NodeId child : res.blocked_children) record_blocked(c, child, r, ev);
    for (auto& w : res.waves) next_waves.push_back(InFlightWave{std::move(w), r + 1, r});
    next_tokens.push_back(InFlightToken{std::move(res.token), r + 1});
  }

  // 4. expired timers
  const std::size_t existing = next_tokens.size();
  for (NodeId i = 0; i < n; ++i) {
    if (processed[i] || c.nodes[i].timer != 0) continue;
    R2Result res = apply_r2(c.nodes[i], params, c.graph.neighbors(i), rng);
    c.nodes[i] = res.node;
    processed[i] = true;
    c.last_token_round[i] = r;
    res.token.trace_id = c.next_trace_id++;
    c.visited.emplace(res.token.trace_id, no_nodes(n));
    next_tokens.push_back(InFlightToken{std::move(res.token), r + 1});
    ++ev.r2_creations;
    if (existing > 0) ++ev.undue_creations;
  }

  // 5. clock ticks
  for (NodeId i = 0; i < n; ++i) {
    if (!processed[i]) c.nodes[i] = apply_r4(c.nodes[i]);
  }

  c.tokens = std::move(next_tokens);
  c.waves = std::move(next_waves);
  c.round = r + 1;
  return ev;
}

Configuration step(Configuration c, const Scenario& s, Rng& rng, StepEvents* events) {
  StepEvents ev = advance(c, s, rng);
  if (events) *events = ev;
  return c;
}

RunResult run_from(const Scenario& s, Configuration c, Rng& rng, RunObserver* observer) {
  RunResult out;
  RunMetrics& m = out.metrics;
  const auto remaining = static_cast<std::size_t>(std::max<std::int64_t>(0, s.horizon - c.round));
  m.legitimacy_timeline.reserve(remaining);
  out.trace.reserve(remaining);

  Classification prev = classify(c, c.graph);
  while (c.round < s.horizon) {
    const std::int64_t r = c.round;
    const StepEvents ev = advance(c, s, rng);
    const Classification cls = classify(c, c.graph);

    m.r2_creations += ev.r2_creations;
    if (m.cover_round) m.r2_after_cover += ev.r2_creations;
    if (prev.a3) m.undue_creations_after_a3 += ev.r2_creations;
    m.undue_creations += ev.undue_creations;
    m.merges += ev.merges;
    m.wave_launches += ev.wave_launches;
    m.tokens_lost += ev.tokens_lost;
    m.failed_wave_sends += ev.failed_wave_sends;
    m.undetected_failed_wave_sends += ev.undetected_failed_wave_sends;
    ++m.rounds;
    if (cls.covered && !m.cover_round) m.cover_round = r;
    if (cls.lc) {
      ++m.lc_rounds;
      if (!m.convergence_round) m.convergence_round = r;
    } else if (prev.lc) {
      ++m.lc_exits;
    }
    m.legitimacy_timeline.push_back(cls.cls);
    out.trace.push_back(TraceRecord{r, cls.cls, cls.token_count, c.waves.size(), m.r2_creations,
                                    c.graph_state});
    if (observer) observer->on_round(c, cls, ev);
    prev = cls;
  }
  return out;
}

RunResult run(const Scenario& s, RunObserver* observer) {
  Rng rng = make_rng(s.seed);
  Configuration c = init_configuration(s, rng);
  return run_from(s, std::move(c), rng, observer);
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& trace) {
  out << "round,class,token_count,wave_msgs,r2_total,graph_state\n";
  for (const auto& t : trace) {
    out << t.round << ',' << to_string(t.cls) << ',' << t.token_count << ',' << t.wave_msgs << ','
        << t.r2_total << ',' << t.graph_state << '\n';
  }
}

void write_message_log_line(std::ostream& out, const Configuration& c) {
  auto table_json = [](const ParentTable& table) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : table) arr.push_back(e ? nlohmann::json(*e) : nlohmann::json(nullptr));
    return arr;
  };
  nlohmann::json line;
  line["round"] = c.round;
  line["graph_state"] = c.graph_state;
  line["tokens"] = nlohmann::json::array();
  for (const auto& t : c.tokens) {
    line["tokens"].push_back({{"trace", t.msg.trace_id},
                              {"emitter", t.msg.emitter},
                              {"recipient", t.msg.recipient},
                              {"hop", t.msg.hop},
                              {"deliver", t.deliver_round},
                              {"table", table_json(t.msg.table)}});
  }
  line["waves"] = nlohmann::json::array();
  for (const auto& w : c.waves) {
    line["waves"].push_back({{"sender", w.msg.sender},
                             {"recipient", w.msg.recipient},
                             {"launched", w.launch_round},
                             {"table", table_json(w.msg.table)}});
  }
  out << line.dump() << '\n';
}

std::optional<std::uint64_t> sample_hitting_time(const StaticGraph& g, NodeId source, NodeId target,
                                                 Rng& rng, std::uint64_t cap) {
  NodeId at = source;
  std::uint64_t steps = 0;
  while (at != target) {
    if (steps == cap) return std::nullopt;
    auto nbrs = g.neighbors(at);
    if (!nbrs.empty()) at = nbrs[uniform_index(rng, nbrs.size())];
    ++steps;
  }
  return steps;
}

std::optional<std::uint64_t> sample_return_time(const StaticGraph& g, NodeId node, Rng& rng,
                                                std::uint64_t cap) {
  auto nbrs = g.neighbors(node);
  if (nbrs.empty()) return 1;
  if (cap == 0) return std::nullopt;
  const NodeId first = nbrs[uniform_index(rng, nbrs.size())];
  auto rest = sample_hitting_time(g, first, node, rng, cap - 1);
  if (!rest) return std::nullopt;
  return *rest + 1;
}

std::optional<std::uint64_t> sample_dynamic_hitting_time(const DynamicGraphProcess& process,
                                                         const GraphDistribution& initial,
                                                         NodeId source, NodeId target, Rng& rng,
                                                         std::uint64_t cap) {
  // Initial graph state from `initial`.
  std::size_t state = 0;
  {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (std::size_t k = 0; k < initial.size(); ++k) {
      if (initial[k] <= 0.0) continue;
      acc += initial[k];
      state = k;
      if (u < acc) break;
    }
  }
  NodeId at = source;
  std::uint64_t steps = 0;
  while (at != target) {
    if (steps == cap) return std::nullopt;
    auto nbrs = process.state(state).neighbors(at);
    if (!nbrs.empty()) at = nbrs[uniform_index(rng, nbrs.size())];
    ++steps;
    state = sample_next_graph(process, state, rng);
  }
  return steps;
}

}  // namespace rwtoken

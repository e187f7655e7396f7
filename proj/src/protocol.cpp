#include "rwtoken/protocol.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace rwtoken {

namespace {

bool contains(std::span<const NodeId> sorted, NodeId v) {
  return std::binary_search(sorted.begin(), sorted.end(), v);
}

// Children of `self` in `table`, split by whether the link still exists.
void collect_children(const ParentTable& table, NodeId self, std::span<const NodeId> neighbors,
                      std::vector<NodeId>& reachable, std::vector<NodeId>& blocked) {
  for (NodeId j = 0; j < table.size(); ++j) {
    if (j == self || table[j] != self) continue;
    (contains(neighbors, j) ? reachable : blocked).push_back(j);
  }
}

NodeId pick_neighbor(std::span<const NodeId> neighbors, Rng& rng) {
  return neighbors[uniform_index(rng, neighbors.size())];
}

}  // namespace

void ProtocolParams::validate() const {
  if (capacity == 0) throw InvalidInput("capacity must be positive");
  if (timeout <= static_cast<int>(capacity) + 1) {
    throw InvalidInput("T_m must exceed capacity+1 (T_m=" + std::to_string(timeout) +
                       ", capacity=" + std::to_string(capacity) + ")");
  }
}

ParentTable empty_table(std::size_t capacity) { return ParentTable(capacity); }

TokenMsg merge_tokens(const TokenMsg& t1, const TokenMsg& t2) {
  if (t1.table.size() != t2.table.size()) {
    throw InvalidInput("cannot merge tokens with tables of length " +
                       std::to_string(t1.table.size()) + " and " + std::to_string(t2.table.size()));
  }
  TokenMsg out = t1;
  for (std::size_t k = 0; k < out.table.size(); ++k) {
    if (!out.table[k] && t2.table[k]) out.table[k] = t2.table[k];
  }
  out.hop = std::max(t1.hop, t2.hop);
  return out;
}

R1Result apply_r1(const NodeState& node, std::span<const TokenMsg> received,
                  const ProtocolParams& params, std::span<const NodeId> neighbors, Rng& rng) {
  if (received.empty()) throw InvalidInput("R1 needs at least one token");
  const NodeId self = node.id;
  const bool stalled = neighbors.empty();

  // a: update every received token.
  std::vector<TokenMsg> tokens(received.begin(), received.end());
  for (auto& t : tokens) {
    if (t.table.size() != params.capacity) throw InvalidInput("token table length != capacity");
    if (self >= t.table.size() || t.emitter >= t.table.size()) {
      throw InvalidInput("node id exceeds token table capacity");
    }
    t.table[self] = self;
    t.table[t.emitter] = self;
    if (!stalled) ++t.hop;
  }

  // b: merge in ascending (emitter, trace_id) order.
  std::sort(tokens.begin(), tokens.end(), [](const TokenMsg& x, const TokenMsg& y) {
    return std::pair(x.emitter, x.trace_id) < std::pair(y.emitter, y.trace_id);
  });
  TokenMsg merged = tokens.front();
  for (std::size_t k = 1; k < tokens.size(); ++k) merged = merge_tokens(merged, tokens[k]);
  // The first token's entries take precedence during the merge; every sender
  // still hangs below this node.
  for (const auto& t : tokens) merged.table[t.emitter] = self;
  merged.table[self] = self;

  R1Result out;
  out.node = node;
  out.node.timer = params.timeout;  // e

  if (stalled) {
    merged.emitter = self;
    merged.recipient = self;
    out.token = std::move(merged);
    out.stalled = true;
    return out;
  }

  // c: reloading wave.
  if (merged.hop >= params.wave_threshold()) {
    merged.hop = 0;
    if (params.reload_wave) {
      out.wave_launched = true;
      std::vector<NodeId> children;
      collect_children(merged.table, self, neighbors, children, out.blocked_children);
      out.waves.reserve(children.size());
      for (NodeId j : children) out.waves.push_back(WaveMsg{self, j, merged.table});
    }
  }

  // d: forward to a random neighbor.
  const NodeId next = pick_neighbor(neighbors, rng);
  merged.emitter = self;
  merged.recipient = next;
  out.node.father = next;
  out.token = std::move(merged);
  return out;
}

R2Result apply_r2(const NodeState& node, const ProtocolParams& params,
                  std::span<const NodeId> neighbors, Rng& rng) {
  if (node.timer != 0) throw InvalidInput("R2 requires an expired timer");
  const NodeId self = node.id;
  if (self >= params.capacity) throw InvalidInput("node id exceeds capacity");

  R2Result out;
  out.node = node;
  out.node.timer = params.timeout;
  out.token.table = empty_table(params.capacity);
  out.token.table[self] = self;
  out.token.hop = 0;
  out.token.emitter = self;
  if (neighbors.empty()) {
    out.token.recipient = self;
    out.stalled = true;
    return out;
  }
  const NodeId next = pick_neighbor(neighbors, rng);
  out.token.recipient = next;
  out.node.father = next;
  return out;
}

R3Result apply_r3(const NodeState& node, const WaveMsg& wave, const ProtocolParams& params,
                  std::span<const NodeId> neighbors) {
  const NodeId self = node.id;
  R3Result out;
  out.node = node;
  out.node.timer = params.timeout;

  ParentTable table = wave.table;
  if (self < table.size()) table[self].reset();
  std::vector<NodeId> children;
  collect_children(table, self, neighbors, children, out.blocked_children);
  out.forwards.reserve(children.size());
  for (NodeId j : children) out.forwards.push_back(WaveMsg{self, j, table});
  return out;
}

NodeState apply_r4(const NodeState& node) {
  if (node.timer <= 0) throw InvalidInput("R4 on an expired timer; R2 must fire instead");
  NodeState out = node;
  --out.timer;
  return out;
}

std::vector<std::pair<NodeId, NodeId>> induced_tree(const ParentTable& table) {
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId k = 0; k < table.size(); ++k) {
    if (table[k] && *table[k] != k) edges.emplace_back(k, *table[k]);
  }
  return edges;
}

bool is_correct(const ParentTable& table, const StaticGraph& g) {
  // Slots past the node count name no node; nothing can ever clear them.
  const std::size_t n = std::min(table.size(), g.node_count());
  for (NodeId k = 0; k < n; ++k) {
    if (!table[k] || *table[k] == k) continue;
    if (!g.has_edge(k, *table[k])) return false;
  }
  return true;
}

bool is_correct(const TokenMsg& token, const StaticGraph& g) { return is_correct(token.table, g); }

bool is_spanning_tree(const ParentTable& table, const std::vector<bool>& marked,
                      const StaticGraph& g) {
  const std::size_t n = marked.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };

  std::size_t members = 0;
  for (std::size_t k = 0; k < n; ++k) members += marked[k] ? 1 : 0;
  std::size_t unions = 0;
  for (auto [child, up] : induced_tree(table)) {
    if (child >= n || up >= n || !marked[child] || !marked[up]) continue;
    if (!g.has_edge(child, up)) return false;
    const auto a = find(child);
    const auto b = find(up);
    if (a == b) return false;  // cycle
    parent[a] = b;
    ++unions;
  }
  return members == 0 || unions + 1 == members;
}

bool father_lost(const NodeState& node, std::span<const NodeId> neighbors) {
  return node.father && !contains(neighbors, *node.father);
}

}  // namespace rwtoken

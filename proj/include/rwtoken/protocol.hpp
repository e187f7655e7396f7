#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "rwtoken/common.hpp"
#include "rwtoken/graph.hpp"

namespace rwtoken {

/// Parent table carried by tokens and reloading waves, indexed by node id up
/// to the capacity bound. An empty slot means "undefined".
using ParentTable = std::vector<std::optional<NodeId>>;

struct ProtocolParams {
  std::size_t capacity = 0;  // upper bound on the node count
  int timeout = 0;           // T_m, in rounds
  bool reload_wave = true;   // test-only switch; disabling it breaks closure

  /// Hop count at which the holder launches a reloading wave.
  int wave_threshold() const { return timeout - static_cast<int>(capacity) - 1; }

  /// Throws InvalidInput("T_m must exceed capacity+1") and similar.
  void validate() const;
};

struct TokenMsg {
  NodeId emitter = 0;
  NodeId recipient = 0;
  ParentTable table;
  int hop = 0;
  TraceId trace_id = 0;  // simulator bookkeeping, not protocol state

  /// A token kept by an isolated node is addressed to itself.
  bool stalled() const { return emitter == recipient; }

  friend bool operator==(const TokenMsg&, const TokenMsg&) = default;
};

struct WaveMsg {
  NodeId sender = 0;
  NodeId recipient = 0;
  ParentTable table;

  friend bool operator==(const WaveMsg&, const WaveMsg&) = default;
};

struct NodeState {
  NodeId id = 0;
  int timer = 0;
  std::optional<NodeId> father;  // last node this one sent a token to

  friend bool operator==(const NodeState&, const NodeState&) = default;
};

struct R1Result {
  TokenMsg token;  // outgoing, or retained when `stalled`
  bool stalled = false;
  bool wave_launched = false;
  std::vector<WaveMsg> waves;
  /// Tree children (table[j] == node) that are not current neighbors; the
  /// wave cannot reach them.
  std::vector<NodeId> blocked_children;
  NodeState node;
};

struct R2Result {
  TokenMsg token;
  bool stalled = false;
  NodeState node;
};

struct R3Result {
  std::vector<WaveMsg> forwards;
  std::vector<NodeId> blocked_children;
  NodeState node;
};

ParentTable empty_table(std::size_t capacity);

/// Entry-wise merge: t1's defined entries win, t2 fills the gaps, hop is the
/// max. Identity (emitter, recipient, trace) is t1's.
TokenMsg merge_tokens(const TokenMsg& t1, const TokenMsg& t2);

/// Token reception. `received` must be non-empty. With no neighbors the merged
/// token is retained by the node with its hop frozen.
R1Result apply_r1(const NodeState& node, std::span<const TokenMsg> received,
                  const ProtocolParams& params, std::span<const NodeId> neighbors, Rng& rng);

/// Timer expiry: creates a fresh token rooted at the node.
R2Result apply_r2(const NodeState& node, const ProtocolParams& params,
                  std::span<const NodeId> neighbors, Rng& rng);

/// Reloading wave reception: clears the node's own entry and forwards to
/// every child that is still a neighbor.
R3Result apply_r3(const NodeState& node, const WaveMsg& wave, const ProtocolParams& params,
                  std::span<const NodeId> neighbors);

/// Clock tick. Throws InvalidInput when the timer is already 0.
NodeState apply_r4(const NodeState& node);

/// Directed edges (child, parent) = {(k, table[k]) : table[k] defined, != k}.
std::vector<std::pair<NodeId, NodeId>> induced_tree(const ParentTable& table);

/// Every defined entry of a node of g is either a root (table[k] == k) or an
/// edge of g. Slots beyond the node count are ignored.
bool is_correct(const ParentTable& table, const StaticGraph& g);
bool is_correct(const TokenMsg& token, const StaticGraph& g);

/// The induced tree restricted to `marked` is acyclic, uses only edges of g
/// and connects every marked node.
bool is_spanning_tree(const ParentTable& table, const std::vector<bool>& marked,
                      const StaticGraph& g);

/// Local detection flag: the node's father is no longer a neighbor.
bool father_lost(const NodeState& node, std::span<const NodeId> neighbors);

}  // namespace rwtoken

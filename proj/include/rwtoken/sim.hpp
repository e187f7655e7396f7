#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rwtoken/common.hpp"
#include "rwtoken/graph.hpp"
#include "rwtoken/protocol.hpp"

namespace rwtoken {

enum class TableMode { fresh, random_corrupt };
enum class TimerMode { full, uniform_random };
enum class FaultKind { delete_token, duplicate_token, corrupt_table, remove_link, add_link };

std::string_view to_string(FaultKind kind);
/// Accepts "delete-token", "duplicate-token", "corrupt-table", "remove-link", "add-link".
FaultKind parse_fault_kind(std::string_view name);

/// One fault injection. For remove-link, `edge` names the link; otherwise a
/// random link is chosen, restricted to tree links (i, father_i) when
/// `tree_edge` is set. For add-link an absent pair is chosen at random.
struct FaultSpec {
  FaultKind kind = FaultKind::delete_token;
  std::optional<Edge> edge;
  bool tree_edge = false;
};

struct ScheduledFault {
  std::int64_t round = 0;
  FaultSpec fault;
};

struct FaultModel {
  double token_loss_p = 0.0;
  std::size_t initial_tokens = 1;
  TableMode table_mode = TableMode::fresh;
  TimerMode timer_mode = TimerMode::full;
  std::vector<ScheduledFault> events;
  bool link_dynamics = false;

  void validate() const;
};

struct Scenario {
  DynamicGraphProcess process = DynamicGraphProcess::constant(StaticGraph(1));
  ProtocolParams params;
  FaultModel faults;
  std::int64_t horizon = 1;
  std::uint64_t seed = 0;

  /// Throws InvalidInput on any violated invariant.
  void validate() const;
};

struct InFlightToken {
  TokenMsg msg;
  std::int64_t deliver_round = 0;
};

struct InFlightWave {
  WaveMsg msg;
  std::int64_t deliver_round = 0;
  std::int64_t launch_round = 0;  // round the originating R1 launched the wave
};

/// Global snapshot. `round` is the next round to execute.
struct Configuration {
  std::int64_t round = 0;
  std::size_t graph_state = 0;
  StaticGraph graph;  // current topology (process state, possibly altered by faults)
  std::vector<NodeState> nodes;
  std::vector<InFlightToken> tokens;  // includes tokens stalled at isolated nodes
  std::vector<InFlightWave> waves;
  std::map<TraceId, std::vector<bool>> visited;  // nodes that received each token
  std::vector<std::int64_t> last_token_round;     // last R1/R2 per node, -1 if none
  TraceId next_trace_id = 1;

  std::size_t token_count() const { return tokens.size(); }
};

enum class LegitimacyClass { not_a1, a1, a1_a2, a3, lc };

std::string_view to_string(LegitimacyClass c);

struct Classification {
  LegitimacyClass cls = LegitimacyClass::not_a1;
  bool a1 = false;  // every token correct
  bool a2 = false;  // at least one token
  bool a3 = false;  // a1, a2 and the visited sets cover V
  bool lc = false;  // a3 and exactly one token
  bool covered = false;  // union of visited sets is V
  std::size_t token_count = 0;
  std::vector<bool> father_lost;  // per node: father_i not in N_i
};

Classification classify(const Configuration& c, const StaticGraph& g);

/// Events produced by one round.
struct StepEvents {
  std::size_t r2_creations = 0;
  std::size_t undue_creations = 0;  // R2 while another token existed
  std::size_t merges = 0;
  std::size_t wave_launches = 0;
  std::size_t tokens_lost = 0;
  std::size_t messages_dropped = 0;
  /// Wave messages that could not reach a child (missing link) which had not
  /// seen the token since the wave was launched.
  std::size_t failed_wave_sends = 0;
  std::size_t undetected_failed_wave_sends = 0;  // ... and whose father_lost flag was clear
};

struct RunMetrics {
  std::optional<std::int64_t> convergence_round;  // first round classified LC
  std::optional<std::int64_t> cover_round;        // first round the visited sets cover V
  std::size_t r2_creations = 0;
  std::size_t r2_after_cover = 0;
  std::size_t undue_creations = 0;
  std::size_t undue_creations_after_a3 = 0;
  std::size_t merges = 0;
  std::size_t wave_launches = 0;
  std::size_t tokens_lost = 0;
  std::size_t failed_wave_sends = 0;
  std::size_t undetected_failed_wave_sends = 0;
  std::size_t rounds = 0;
  std::size_t lc_rounds = 0;
  std::size_t lc_exits = 0;  // LC -> not LC transitions
  std::vector<LegitimacyClass> legitimacy_timeline;

  double lc_fraction() const {
    return rounds == 0 ? 0.0 : static_cast<double>(lc_rounds) / static_cast<double>(rounds);
  }
  /// LC reached and never left until the horizon.
  bool converged_and_closed() const { return convergence_round.has_value() && lc_exits == 0; }
};

struct TraceRecord {
  std::int64_t round = 0;
  LegitimacyClass cls = LegitimacyClass::not_a1;
  std::size_t token_count = 0;
  std::size_t wave_msgs = 0;
  std::size_t r2_total = 0;
  std::size_t graph_state = 0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct RunResult {
  RunMetrics metrics;
  std::vector<TraceRecord> trace;
};

/// Initial configuration drawn from the fault model (token count, table and timer modes).
Configuration init_configuration(const Scenario& s, Rng& rng);

/// Executes round `c.round` in place and advances the round counter.
StepEvents advance(Configuration& c, const Scenario& s, Rng& rng);

/// Value form of `advance`.
Configuration step(Configuration c, const Scenario& s, Rng& rng, StepEvents* events = nullptr);

/// Applies one transient or topological fault. Throws InvalidInput when the
/// fault has no target (no token to delete, no link to remove, ...).
Configuration inject_fault(Configuration c, const FaultSpec& fault, std::size_t capacity, Rng& rng);

/// Per-run hooks for tests and the message log. Called after every round.
struct RunObserver {
  virtual ~RunObserver() = default;
  virtual void on_round(const Configuration& c, const Classification& cls, const StepEvents& ev) = 0;
};

/// Runs `s.horizon` rounds from `init_configuration`, seeded by `s.seed`.
RunResult run(const Scenario& s, RunObserver* observer = nullptr);
/// Runs from a caller-provided configuration.
RunResult run_from(const Scenario& s, Configuration c, Rng& rng, RunObserver* observer = nullptr);

/// CSV trace: round,class,token_count,wave_msgs,r2_total,graph_state.
void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& trace);

/// One JSON object per in-flight message, for debugging.
void write_message_log_line(std::ostream& out, const Configuration& c);

// Random-walk samplers used as Monte Carlo oracles for the analysis module.

/// Steps of a simple random walk on g from `source` until it first enters
/// `target` (0 if equal). Returns nullopt past `cap` steps.
std::optional<std::uint64_t> sample_hitting_time(const StaticGraph& g, NodeId source, NodeId target,
                                                 Rng& rng, std::uint64_t cap = UINT64_MAX);

/// First return time to `node` (at least one step).
std::optional<std::uint64_t> sample_return_time(const StaticGraph& g, NodeId node, Rng& rng,
                                                std::uint64_t cap = UINT64_MAX);

/// Hitting time on a Markov-evolving graph: the initial state is drawn from
/// `initial`, the token moves on the current state, then the state advances.
std::optional<std::uint64_t> sample_dynamic_hitting_time(const DynamicGraphProcess& process,
                                                         const GraphDistribution& initial,
                                                         NodeId source, NodeId target, Rng& rng,
                                                         std::uint64_t cap = UINT64_MAX);

}  // namespace rwtoken

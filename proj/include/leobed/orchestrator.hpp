#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "leobed/experiment.hpp"
#include "leobed/net.hpp"

namespace leobed::orchestrator {

enum class Health { Healthy, Stale, Down };
std::string_view to_string(Health h);

struct HealthPolicy {
  UnixMs heartbeat_interval_ms = 10'000;
  int stale_after_intervals = 3;
  int down_after_intervals = 10;
};

// A schedule queued for one node, re-sent on every heartbeat until acknowledged.
struct Assignment {
  std::uint64_t seq = 0;
  ExperimentSpec spec;  // windows already narrowed to this node's slots
  int attempt = 0;
};

struct NodeRecord {
  std::string node_id;
  NodeRole role = NodeRole::Client;
  UnixMs registered_ms = 0;
  std::optional<UnixMs> last_heartbeat_ms;
  std::deque<Assignment> pending;
  std::uint64_t acked_seq = 0;
};

struct RunRecord {
  std::string experiment_id;
  std::string node_id;
  UnixMs slot_ms = 0;  // scheduled start; names the results directory
  std::optional<UnixMs> started_ms;
  std::optional<UnixMs> ended_ms;
  RunState state = RunState::Pending;
  int attempt = 0;
  std::string preemption_reason;
  std::string result_path;
  std::optional<int> exit_code;
};

// A node-time slot held by a fixed-window experiment; used for conflict checks.
struct Reservation {
  std::string experiment_id;
  std::string node_id;
  TimeWindow window;
  OverheadClass overhead = OverheadClass::NoOverhead;
};

struct OrchestratorConfig {
  HealthPolicy health;
  std::string state_dir;  // empty: in-memory only
  std::string results_root;
  UnixMs reschedule_delay_ms = 60'000;
  std::size_t snapshot_every = 1000;  // log entries between automatic snapshots; 0 disables
};

class Orchestrator {
 public:
  using Clock = std::function<UnixMs()>;

  explicit Orchestrator(OrchestratorConfig cfg = {}, Clock clock = {});

  void register_user(const std::string& name);
  void register_node(const std::string& node_id, NodeRole role);

  // Returns the accepted id. Throws ConflictError, UnknownNode, BadTrigger or InvalidSpec.
  std::string submit(const ExperimentSpec& spec);

  // payload: {"ack_seq": n, "runs": [run status...]}; response: {"schedules": [...]}.
  Json heartbeat(const std::string& node_id, const Json& payload);

  // manifest must carry "slot_ms" (or "run_start") when the experiment has several runs.
  void record_completion(const std::string& experiment_id, const std::string& node_id, const Json& manifest);

  Health health(const std::string& node_id) const;
  std::vector<std::string> flagged_experiments() const;

  // Wire entry point: {"type": SUBMIT|HEARTBEAT|COMPLETE|QUERY, ...}. Never throws.
  Json handle(const Json& request);
  Json query(const std::string& experiment_id = "") const;

  // Canonical tables, used to compare instances (e.g. after log replay).
  Json tables() const;
  void snapshot();

  std::vector<RunRecord> runs(const std::string& experiment_id = "") const;
  std::optional<ExperimentSpec> experiment(const std::string& id) const;
  std::optional<NodeRecord> node(const std::string& node_id) const;
  std::vector<Reservation> reservations() const;
  const OrchestratorConfig& config() const { return cfg_; }
  UnixMs now() const { return clock_(); }

 private:
  // Mutations with explicit time so the log replays deterministically.
  void apply_user(const std::string& name);
  void apply_node(UnixMs now, const std::string& node_id, NodeRole role);
  std::string apply_submit(UnixMs now, const ExperimentSpec& spec);
  Json apply_heartbeat(UnixMs now, const std::string& node_id, const Json& payload);
  void apply_completion(UnixMs now, const std::string& experiment_id, const std::string& node_id,
                        const Json& manifest);

  std::vector<std::string> clashes(const std::vector<std::string>& nodes, const std::vector<TimeWindow>& windows,
                                   OverheadClass overhead, const std::string& ignore_id = "") const;
  void enqueue(const std::string& node_id, ExperimentSpec spec, int attempt);
  void reenqueue_once(UnixMs now, RunRecord& run);
  RunRecord* find_run(const std::string& experiment_id, const std::string& node_id, UnixMs slot);
  NodeRecord& node_ref(const std::string& node_id);
  Health health_at(const NodeRecord& n, UnixMs now) const;

  void log(const Json& entry);
  void load();
  void replay(const Json& entry);
  Json full_state() const;
  void restore(const Json& state);

  OrchestratorConfig cfg_;
  Clock clock_;
  mutable std::mutex mu_;

  std::set<std::string> users_;
  std::map<std::string, NodeRecord> nodes_;
  std::map<std::string, ExperimentSpec> experiments_;
  std::vector<std::string> submission_order_;
  std::vector<RunRecord> runs_;
  std::vector<Reservation> reservations_;
  std::uint64_t next_seq_ = 1;

  std::ofstream log_;
  std::size_t log_entries_ = 0;
  bool replaying_ = false;
};

// Agent-side wrapper around an in-process orchestrator.
class LocalChannel final : public net::Channel {
 public:
  explicit LocalChannel(Orchestrator& o) : o_(o) {}
  Json call(const Json& request) override { return o_.handle(request); }

 private:
  Orchestrator& o_;
};

// Results store: <root>/<experiment_id>/<node_id>/<run_start_iso8601>/
class ResultsStore {
 public:
  explicit ResultsStore(std::filesystem::path root);

  std::filesystem::path run_dir(const std::string& experiment_id, const std::string& node_id, UnixMs slot_ms) const;
  std::filesystem::path relative_run_dir(const std::string& experiment_id, const std::string& node_id,
                                         UnixMs slot_ms) const;
  // Copies every regular file of local_dir into the run directory.
  std::filesystem::path store(const std::filesystem::path& local_dir, const std::string& experiment_id,
                              const std::string& node_id, UnixMs slot_ms) const;
  // Mirrors <root>/<experiment_id> into dest/<experiment_id>; returns the number of files copied.
  std::size_t fetch(const std::string& experiment_id, const std::filesystem::path& dest) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

Json error_json(const std::exception& e);

}  // namespace leobed::orchestrator

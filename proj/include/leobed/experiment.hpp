#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "leobed/common.hpp"
#include "leobed/triggers.hpp"

namespace leobed {

using Json = nlohmann::json;

enum class ExperimentKind { Ping, Hping, Traceroute, BulkFlow, Custom };
enum class OverheadClass { Overhead, NoOverhead };
enum class NodeRole { Client, Server };
enum class RunState { Pending, Running, Preempted, Completed, Failed, Killed };

std::string_view to_string(ExperimentKind k);
std::string_view to_string(OverheadClass c);
std::string_view to_string(NodeRole r);
std::string_view to_string(RunState s);
ExperimentKind parse_kind(std::string_view s);
OverheadClass parse_overhead(std::string_view s);
NodeRole parse_role(std::string_view s);
RunState parse_run_state(std::string_view s);

bool is_terminal(RunState s);
// PENDING->RUNNING->{COMPLETED,FAILED,KILLED,PREEMPTED}; PREEMPTED->PENDING;
// PENDING->FAILED when the window closes before the run could start.
bool legal_transition(RunState from, RunState to);

// Half-open [start, end).
struct TimeWindow {
  UnixMs start_ms = 0;
  UnixMs end_ms = 0;

  UnixMs duration_ms() const { return end_ms - start_ms; }
  bool overlaps(const TimeWindow& o) const { return start_ms < o.end_ms && o.start_ms < end_ms; }
  bool contains(UnixMs t) const { return start_ms <= t && t < end_ms; }
  bool operator==(const TimeWindow&) const = default;
};

struct TriggerSchedule {
  std::string trigger;
  double max_runtime_s = 60;
  double cooldown_s = 0;
  int budget = 1;
  bool stop_on_hold = false;

  bool operator==(const TriggerSchedule&) const = default;
  triggers::TriggerBinding binding(const std::string& experiment_id) const;
};

struct ExperimentSpec {
  std::string id;
  ExperimentKind kind = ExperimentKind::Ping;
  OverheadClass overhead = OverheadClass::NoOverhead;
  std::vector<std::string> clients;
  std::vector<std::string> servers;
  std::vector<TimeWindow> windows;
  std::optional<TriggerSchedule> trigger;
  Json params = Json::object();
  std::string artifact_ref;
  std::string owner;

  // Structural checks only (InvalidSpec); the trigger text is checked by the orchestrator.
  void validate() const;
  std::vector<std::string> nodes() const;  // clients then servers, de-duplicated
  bool operator==(const ExperimentSpec&) const = default;
};

// Windows are [[start, end], ...] with ISO-8601 UTC strings or epoch milliseconds.
Json to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const Json& j);
ExperimentSpec load_spec(const std::string& path);

// Typed access to params with a default.
double param_double(const ExperimentSpec& spec, const std::string& key, double fallback);
std::string param_string(const ExperimentSpec& spec, const std::string& key, const std::string& fallback);

}  // namespace leobed

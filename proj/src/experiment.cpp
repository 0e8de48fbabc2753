#include "leobed/experiment.hpp"

#include <algorithm>
#include <array>

#include "leobed/error.hpp"

namespace leobed {
namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& all, const char* what) {
  for (E e : all) {
    if (to_string(e) == s) return e;
  }
  fail(ErrorCode::InvalidSpec, std::string("unknown ") + what + " '" + std::string(s) + "'");
}

UnixMs time_from_json(const Json& j) {
  if (j.is_number_integer()) return j.get<UnixMs>();
  if (j.is_string()) {
    try {
      return parse_iso8601_utc(j.get<std::string>());
    } catch (const Error& e) {
      fail(ErrorCode::InvalidSpec, e.what());
    }
  }
  fail(ErrorCode::InvalidSpec, "window bounds must be ISO-8601 strings or epoch milliseconds");
}

std::vector<std::string> string_list(const Json& j, const char* key) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  if (!j[key].is_array()) fail(ErrorCode::InvalidSpec, std::string(key) + " must be a list of node ids");
  for (const auto& v : j[key]) {
    if (!v.is_string()) fail(ErrorCode::InvalidSpec, std::string(key) + " must be a list of node ids");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Ping: return "PING";
    case ExperimentKind::Hping: return "HPING";
    case ExperimentKind::Traceroute: return "TRACEROUTE";
    case ExperimentKind::BulkFlow: return "BULK_FLOW";
    case ExperimentKind::Custom: return "CUSTOM";
  }
  return "?";
}

std::string_view to_string(OverheadClass c) { return c == OverheadClass::Overhead ? "OVERHEAD" : "NO_OVERHEAD"; }

std::string_view to_string(NodeRole r) { return r == NodeRole::Client ? "CLIENT" : "SERVER"; }

std::string_view to_string(RunState s) {
  switch (s) {
    case RunState::Pending: return "PENDING";
    case RunState::Running: return "RUNNING";
    case RunState::Preempted: return "PREEMPTED";
    case RunState::Completed: return "COMPLETED";
    case RunState::Failed: return "FAILED";
    case RunState::Killed: return "KILLED";
  }
  return "?";
}

ExperimentKind parse_kind(std::string_view s) {
  return parse_enum(s, std::array{ExperimentKind::Ping, ExperimentKind::Hping, ExperimentKind::Traceroute,
                                  ExperimentKind::BulkFlow, ExperimentKind::Custom},
                    "experiment kind");
}

OverheadClass parse_overhead(std::string_view s) {
  return parse_enum(s, std::array{OverheadClass::Overhead, OverheadClass::NoOverhead}, "overhead class");
}

NodeRole parse_role(std::string_view s) {
  return parse_enum(s, std::array{NodeRole::Client, NodeRole::Server}, "node role");
}

RunState parse_run_state(std::string_view s) {
  return parse_enum(s, std::array{RunState::Pending, RunState::Running, RunState::Preempted,
                                  RunState::Completed, RunState::Failed, RunState::Killed},
                    "run state");
}

bool is_terminal(RunState s) {
  return s == RunState::Completed || s == RunState::Failed || s == RunState::Killed;
}

bool legal_transition(RunState from, RunState to) {
  switch (from) {
    case RunState::Pending: return to == RunState::Running || to == RunState::Failed;
    case RunState::Running:
      return to == RunState::Completed || to == RunState::Failed || to == RunState::Killed ||
             to == RunState::Preempted;
    case RunState::Preempted: return to == RunState::Pending;
    default: return false;
  }
}

triggers::TriggerBinding TriggerSchedule::binding(const std::string& experiment_id) const {
  auto b = triggers::TriggerBinding::make(experiment_id, trigger, max_runtime_s, cooldown_s, budget);
  b.stop_on_hold = stop_on_hold;
  return b;
}

void ExperimentSpec::validate() const {
  if (id.empty()) fail(ErrorCode::InvalidSpec, "experiment id is empty");
  if (id.find('/') != std::string::npos || id == "." || id == "..") {
    fail(ErrorCode::InvalidSpec, "experiment id must be a single path component");
  }
  if (clients.empty()) fail(ErrorCode::InvalidSpec, "experiment needs at least one client");
  if (windows.empty() == !trigger.has_value()) {
    fail(ErrorCode::InvalidSpec, "schedule needs either windows or a trigger, not both");
  }
  for (const auto& w : windows) {
    if (!(w.start_ms < w.end_ms)) fail(ErrorCode::InvalidSpec, "window start must precede end");
  }
  if (trigger) {
    if (!(trigger->max_runtime_s > 0) || trigger->budget < 1 || trigger->cooldown_s < 0) {
      fail(ErrorCode::InvalidSpec, "trigger needs max_runtime_s > 0, budget >= 1, cooldown_s >= 0");
    }
  }
  if (!params.is_object()) fail(ErrorCode::InvalidSpec, "params must be an object");
}

std::vector<std::string> ExperimentSpec::nodes() const {
  std::vector<std::string> out;
  for (const auto* list : {&clients, &servers}) {
    for (const auto& n : *list) {
      if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    }
  }
  return out;
}

Json to_json(const ExperimentSpec& spec) {
  Json j;
  j["id"] = spec.id;
  j["kind"] = std::string(to_string(spec.kind));
  j["overhead"] = std::string(to_string(spec.overhead));
  j["clients"] = spec.clients;
  j["servers"] = spec.servers;
  Json schedule = Json::object();
  if (spec.trigger) {
    schedule["trigger"] = spec.trigger->trigger;
    schedule["max_runtime_s"] = spec.trigger->max_runtime_s;
    schedule["cooldown_s"] = spec.trigger->cooldown_s;
    schedule["budget"] = spec.trigger->budget;
    if (spec.trigger->stop_on_hold) schedule["stop_on_hold"] = true;
  } else {
    Json windows = Json::array();
    for (const auto& w : spec.windows) windows.push_back({iso8601_utc(w.start_ms), iso8601_utc(w.end_ms)});
    schedule["windows"] = windows;
  }
  j["schedule"] = schedule;
  j["params"] = spec.params;
  if (!spec.artifact_ref.empty()) j["artifact_ref"] = spec.artifact_ref;
  if (!spec.owner.empty()) j["owner"] = spec.owner;
  return j;
}

ExperimentSpec spec_from_json(const Json& j) {
  if (!j.is_object()) fail(ErrorCode::InvalidSpec, "experiment spec must be a JSON object");
  ExperimentSpec s;
  try {
    s.id = j.at("id").get<std::string>();
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.overhead = parse_overhead(j.value("overhead", std::string("NO_OVERHEAD")));
    s.clients = string_list(j, "clients");
    s.servers = string_list(j, "servers");
    const Json& sched = j.at("schedule");
    if (sched.contains("windows")) {
      for (const auto& w : sched["windows"]) {
        if (!w.is_array() || w.size() != 2) fail(ErrorCode::InvalidSpec, "each window is [start, end]");
        s.windows.push_back({time_from_json(w[0]), time_from_json(w[1])});
      }
    }
    if (sched.contains("trigger")) {
      TriggerSchedule t;
      t.trigger = sched["trigger"].get<std::string>();
      t.max_runtime_s = sched.value("max_runtime_s", 60.0);
      t.cooldown_s = sched.value("cooldown_s", 0.0);
      t.budget = sched.value("budget", 1);
      t.stop_on_hold = sched.value("stop_on_hold", false);
      s.trigger = t;
    }
    if (j.contains("params")) s.params = j["params"];
    s.artifact_ref = j.value("artifact_ref", std::string());
    s.owner = j.value("owner", std::string());
  } catch (const Json::exception& e) {
    fail(ErrorCode::InvalidSpec, std::string("malformed experiment spec: ") + e.what());
  }
  s.validate();
  return s;
}

ExperimentSpec load_spec(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    fail(ErrorCode::InvalidSpec, std::string("spec file is not JSON: ") + e.what());
  }
  return spec_from_json(j);
}

double param_double(const ExperimentSpec& spec, const std::string& key, double fallback) {
  if (!spec.params.contains(key)) return fallback;
  const Json& v = spec.params[key];
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    try {
      return std::stod(v.get<std::string>());
    } catch (const std::exception&) {
    }
  }
  fail(ErrorCode::InvalidSpec, "param '" + key + "' is not a number");
}

std::string param_string(const ExperimentSpec& spec, const std::string& key, const std::string& fallback) {
  if (!spec.params.contains(key)) return fallback;
  const Json& v = spec.params[key];
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace leobed

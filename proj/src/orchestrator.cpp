#include "leobed/orchestrator.hpp"

#include <algorithm>
#include <chrono>

#include <spdlog/spdlog.h>

#include "leobed/error.hpp"

namespace leobed::orchestrator {
namespace fs = std::filesystem;

namespace {

UnixMs system_now() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

Json window_json(const TimeWindow& w) { return Json::array({w.start_ms, w.end_ms}); }
TimeWindow window_from(const Json& j) { return {j.at(0).get<UnixMs>(), j.at(1).get<UnixMs>()}; }

template <typename T>
Json opt_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> opt_from(const Json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<T>();
}

Json run_json(const RunRecord& r) {
  return {{"experiment_id", r.experiment_id},
          {"node_id", r.node_id},
          {"slot_ms", r.slot_ms},
          {"run_start", iso8601_utc(r.slot_ms)},
          {"started_ms", opt_json(r.started_ms)},
          {"ended_ms", opt_json(r.ended_ms)},
          {"state", std::string(to_string(r.state))},
          {"attempt", r.attempt},
          {"preemption_reason", r.preemption_reason},
          {"result_path", r.result_path},
          {"exit_code", opt_json(r.exit_code)}};
}

RunRecord run_from(const Json& j) {
  RunRecord r;
  r.experiment_id = j.at("experiment_id").get<std::string>();
  r.node_id = j.at("node_id").get<std::string>();
  r.slot_ms = j.at("slot_ms").get<UnixMs>();
  r.started_ms = opt_from<UnixMs>(j, "started_ms");
  r.ended_ms = opt_from<UnixMs>(j, "ended_ms");
  r.state = parse_run_state(j.at("state").get<std::string>());
  r.attempt = j.value("attempt", 0);
  r.preemption_reason = j.value("preemption_reason", std::string());
  r.result_path = j.value("result_path", std::string());
  r.exit_code = opt_from<int>(j, "exit_code");
  return r;
}

Json assignment_json(const Assignment& a) {
  return {{"seq", a.seq}, {"attempt", a.attempt}, {"spec", to_json(a.spec)}};
}

Assignment assignment_from(const Json& j) {
  return {j.at("seq").get<std::uint64_t>(), spec_from_json(j.at("spec")), j.value("attempt", 0)};
}

}  // namespace

std::string_view to_string(Health h) {
  switch (h) {
    case Health::Healthy: return "HEALTHY";
    case Health::Stale: return "STALE";
    case Health::Down: return "DOWN";
  }
  return "?";
}

Json error_json(const std::exception& e) {
  Json err;
  if (const auto* le = dynamic_cast<const Error*>(&e)) {
    err["code"] = std::string(le->name());
    if (const auto* ce = dynamic_cast<const ConflictError*>(&e)) err["clashing_ids"] = ce->clashing_ids();
    if (const auto* se = dynamic_cast<const SyntaxError*>(&e)) err["position"] = se->position();
  } else if (dynamic_cast<const Json::exception*>(&e)) {
    err["code"] = "ParseError";
  } else {
    err["code"] = "InternalError";
  }
  err["message"] = e.what();
  return {{"ok", false}, {"error", err}};
}

Orchestrator::Orchestrator(OrchestratorConfig cfg, Clock clock) : cfg_(std::move(cfg)), clock_(std::move(clock)) {
  if (!clock_) clock_ = system_now;
  if (cfg_.health.heartbeat_interval_ms <= 0 || cfg_.health.stale_after_intervals < 1 ||
      cfg_.health.down_after_intervals < cfg_.health.stale_after_intervals) {
    fail(ErrorCode::InvalidArgument, "invalid health policy");
  }
  load();
}

// Public API: lock, mutate, then log what was applied.

void Orchestrator::register_user(const std::string& name) {
  std::lock_guard lock(mu_);
  apply_user(name);
  log({{"op", "user"}, {"name", name}});
}

void Orchestrator::register_node(const std::string& node_id, NodeRole role) {
  std::lock_guard lock(mu_);
  const UnixMs now = clock_();
  apply_node(now, node_id, role);
  log({{"op", "node"}, {"now", now}, {"node_id", node_id}, {"role", std::string(to_string(role))}});
}

std::string Orchestrator::submit(const ExperimentSpec& spec) {
  std::lock_guard lock(mu_);
  const UnixMs now = clock_();
  auto id = apply_submit(now, spec);
  log({{"op", "submit"}, {"now", now}, {"spec", to_json(spec)}});
  return id;
}

Json Orchestrator::heartbeat(const std::string& node_id, const Json& payload) {
  std::lock_guard lock(mu_);
  const UnixMs now = clock_();
  auto resp = apply_heartbeat(now, node_id, payload);
  Json slim = payload;
  slim.erase("type");
  log({{"op", "heartbeat"}, {"now", now}, {"node_id", node_id}, {"payload", slim}});
  return resp;
}

void Orchestrator::record_completion(const std::string& experiment_id, const std::string& node_id,
                                     const Json& manifest) {
  std::lock_guard lock(mu_);
  const UnixMs now = clock_();
  apply_completion(now, experiment_id, node_id, manifest);
  log({{"op", "complete"}, {"now", now}, {"experiment_id", experiment_id}, {"node_id", node_id},
       {"manifest", manifest}});
}

Health Orchestrator::health(const std::string& node_id) const {
  std::lock_guard lock(mu_);
  auto it = nodes_.find(node_id);
  if (it == nodes_.end()) fail(ErrorCode::UnknownNode, "unknown node " + node_id);
  return health_at(it->second, clock_());
}

Health Orchestrator::health_at(const NodeRecord& n, UnixMs now) const {
  const UnixMs base = n.last_heartbeat_ms.value_or(n.registered_ms);
  const UnixMs age = now - base;
  const UnixMs iv = cfg_.health.heartbeat_interval_ms;
  if (age > cfg_.health.down_after_intervals * iv) return Health::Down;
  if (age < cfg_.health.stale_after_intervals * iv) return Health::Healthy;
  return Health::Stale;
}

std::vector<std::string> Orchestrator::flagged_experiments() const {
  std::lock_guard lock(mu_);
  const UnixMs now = clock_();
  std::vector<std::string> out;
  for (const auto& id : submission_order_) {
    const auto& spec = experiments_.at(id);
    bool live = spec.trigger.has_value();
    for (const auto& r : runs_) {
      if (r.experiment_id == id && !is_terminal(r.state)) live = true;
    }
    if (!live) continue;
    for (const auto& n : spec.nodes()) {
      if (health_at(nodes_.at(n), now) != Health::Healthy) {
        out.push_back(id);
        break;
      }
    }
  }
  return out;
}

void Orchestrator::apply_user(const std::string& name) {
  if (name.empty()) fail(ErrorCode::InvalidArgument, "empty user name");
  users_.insert(name);
}

void Orchestrator::apply_node(UnixMs now, const std::string& node_id, NodeRole role) {
  if (node_id.empty() || node_id.find('/') != std::string::npos) {
    fail(ErrorCode::InvalidArgument, "node id must be a non-empty path component");
  }
  auto [it, inserted] = nodes_.try_emplace(node_id);
  if (inserted) {
    it->second.node_id = node_id;
    it->second.registered_ms = now;
  }
  it->second.role = role;
}

NodeRecord& Orchestrator::node_ref(const std::string& node_id) {
  auto it = nodes_.find(node_id);
  if (it == nodes_.end()) fail(ErrorCode::UnknownNode, "unknown node " + node_id);
  return it->second;
}

std::vector<std::string> Orchestrator::clashes(const std::vector<std::string>& nodes,
                                               const std::vector<TimeWindow>& windows, OverheadClass overhead,
                                               const std::string& ignore_id) const {
  std::vector<std::string> out;
  if (overhead != OverheadClass::Overhead) return out;
  for (const auto& r : reservations_) {
    if (r.overhead != OverheadClass::Overhead || r.experiment_id == ignore_id) continue;
    if (std::find(nodes.begin(), nodes.end(), r.node_id) == nodes.end()) continue;
    for (const auto& w : windows) {
      if (w.overlaps(r.window) && std::find(out.begin(), out.end(), r.experiment_id) == out.end()) {
        out.push_back(r.experiment_id);
      }
    }
  }
  return out;
}

std::string Orchestrator::apply_submit(UnixMs now, const ExperimentSpec& spec) {
  spec.validate();
  if (experiments_.count(spec.id)) fail(ErrorCode::InvalidSpec, "experiment id '" + spec.id + "' already exists");
  if (!spec.owner.empty() && !users_.empty() && !users_.count(spec.owner)) {
    fail(ErrorCode::InvalidSpec, "unknown user '" + spec.owner + "'");
  }
  const auto nodes = spec.nodes();
  for (const auto& n : nodes) node_ref(n);
  for (const auto& n : spec.servers) {
    if (std::find(spec.clients.begin(), spec.clients.end(), n) != spec.clients.end()) {
      fail(ErrorCode::InvalidSpec, "node " + n + " is listed as both client and server");
    }
  }
  if (spec.trigger) {
    try {
      spec.trigger->binding(spec.id);
    } catch (const Error& e) {
      throw Error(ErrorCode::BadTrigger, std::string("trigger rejected (") + std::string(e.name()) + "): " + e.what());
    }
  }
  for (std::size_t i = 0; i < spec.windows.size(); ++i) {
    for (std::size_t k = i + 1; k < spec.windows.size(); ++k) {
      if (spec.windows[i].overlaps(spec.windows[k])) fail(ErrorCode::InvalidSpec, "experiment windows overlap");
    }
  }
  if (auto c = clashes(nodes, spec.windows, spec.overhead); !c.empty()) {
    std::string ids;
    for (const auto& id : c) ids += (ids.empty() ? "" : ", ") + id;
    throw ConflictError(c, "OVERHEAD window clashes with " + ids);
  }

  experiments_[spec.id] = spec;
  submission_order_.push_back(spec.id);
  for (const auto& n : nodes) {
    for (const auto& w : spec.windows) reservations_.push_back({spec.id, n, w, spec.overhead});
  }
  for (const auto& c : spec.clients) {
    for (const auto& w : spec.windows) {
      RunRecord r;
      r.experiment_id = spec.id;
      r.node_id = c;
      r.slot_ms = w.start_ms;
      runs_.push_back(r);
    }
  }
  for (const auto& n : nodes) enqueue(n, spec, 0);
  return spec.id;
}

void Orchestrator::enqueue(const std::string& node_id, ExperimentSpec spec, int attempt) {
  nodes_.at(node_id).pending.push_back({next_seq_++, std::move(spec), attempt});
}

RunRecord* Orchestrator::find_run(const std::string& experiment_id, const std::string& node_id, UnixMs slot) {
  for (auto& r : runs_) {
    if (r.experiment_id == experiment_id && r.node_id == node_id && r.slot_ms == slot) return &r;
  }
  return nullptr;
}

void Orchestrator::reenqueue_once(UnixMs now, RunRecord& run) {
  if (run.attempt >= 1) return;
  const auto& spec = experiments_.at(run.experiment_id);
  UnixMs duration = static_cast<UnixMs>(spec.trigger ? spec.trigger->max_runtime_s * 1000 : 0);
  for (const auto& w : spec.windows) {
    if (w.start_ms == run.slot_ms) duration = w.duration_ms();
  }
  if (duration <= 0) return;
  TimeWindow w{now + cfg_.reschedule_delay_ms, now + cfg_.reschedule_delay_ms + duration};
  // Slide forward past any clashing OVERHEAD reservation on this node.
  for (bool moved = true; moved;) {
    moved = false;
    for (const auto& r : reservations_) {
      if (r.node_id == run.node_id && r.overhead == OverheadClass::Overhead &&
          spec.overhead == OverheadClass::Overhead && r.window.overlaps(w)) {
        w = {r.window.end_ms, r.window.end_ms + duration};
        moved = true;
      }
    }
  }
  ExperimentSpec retry = spec;
  retry.trigger.reset();
  retry.windows = {w};
  retry.clients = {run.node_id};
  retry.servers.clear();
  reservations_.push_back({spec.id, run.node_id, w, spec.overhead});
  RunRecord r;
  r.experiment_id = spec.id;
  r.node_id = run.node_id;
  r.slot_ms = w.start_ms;
  r.attempt = run.attempt + 1;
  enqueue(run.node_id, std::move(retry), r.attempt);
  runs_.push_back(r);
  spdlog::info("re-enqueued preempted run {} on {} at {}", spec.id, run.node_id, iso8601_utc(w.start_ms));
}

Json Orchestrator::apply_heartbeat(UnixMs now, const std::string& node_id, const Json& payload) {
  NodeRecord& node = node_ref(node_id);
  node.last_heartbeat_ms = now;
  const auto ack = payload.value("ack_seq", std::uint64_t{0});
  node.acked_seq = std::max(node.acked_seq, ack);
  while (!node.pending.empty() && node.pending.front().seq <= node.acked_seq) node.pending.pop_front();

  if (payload.contains("runs")) {
    for (const auto& st : payload["runs"]) {
      const auto exp_id = st.at("experiment_id").get<std::string>();
      if (!experiments_.count(exp_id)) continue;
      const auto slot = st.at("slot_ms").get<UnixMs>();
      const auto state = parse_run_state(st.at("state").get<std::string>());
      RunRecord* run = find_run(exp_id, node_id, slot);
      if (!run) {
        RunRecord r;
        r.experiment_id = exp_id;
        r.node_id = node_id;
        r.slot_ms = slot;
        r.attempt = st.value("attempt", 0);
        runs_.push_back(r);
        run = &runs_.back();
      }
      if (is_terminal(run->state) || run->state == state) continue;
      const bool newly_preempted = state == RunState::Preempted && run->state != RunState::Preempted;
      run->state = state;
      if (auto v = opt_from<UnixMs>(st, "started_ms")) run->started_ms = v;
      if (auto v = opt_from<UnixMs>(st, "ended_ms")) run->ended_ms = v;
      if (auto v = opt_from<int>(st, "exit_code")) run->exit_code = v;
      run->preemption_reason = st.value("reason", run->preemption_reason);
      if (newly_preempted && !st.value("rescheduled", false)) {
        RunRecord copy = *run;
        reenqueue_once(now, copy);
      }
    }
  }

  Json schedules = Json::array();
  for (const auto& a : node.pending) schedules.push_back(assignment_json(a));
  return {{"ok", true}, {"schedules", schedules}, {"server_time_ms", now}};
}

void Orchestrator::apply_completion(UnixMs now, const std::string& experiment_id, const std::string& node_id,
                                    const Json& manifest) {
  if (!experiments_.count(experiment_id)) fail(ErrorCode::UnknownRun, "unknown experiment " + experiment_id);
  std::optional<UnixMs> slot = opt_from<UnixMs>(manifest, "slot_ms");
  if (!slot && manifest.contains("run_start")) slot = parse_iso8601_utc(manifest["run_start"].get<std::string>());

  RunRecord* run = nullptr;
  if (slot) {
    run = find_run(experiment_id, node_id, *slot);
    // Trigger runs are created by the agent and may finish before any heartbeat mentions them.
    const auto& spec = experiments_.at(experiment_id);
    if (!run && spec.trigger &&
        std::find(spec.clients.begin(), spec.clients.end(), node_id) != spec.clients.end()) {
      RunRecord r;
      r.experiment_id = experiment_id;
      r.node_id = node_id;
      r.slot_ms = *slot;
      r.state = RunState::Running;
      runs_.push_back(r);
      run = &runs_.back();
    }
  } else {
    for (auto& r : runs_) {
      if (r.experiment_id != experiment_id || r.node_id != node_id) continue;
      if (!run || (is_terminal(run->state) && !is_terminal(r.state))) run = &r;
    }
  }
  if (!run) fail(ErrorCode::UnknownRun, "no run of " + experiment_id + " on " + node_id);
  if (is_terminal(run->state)) return;

  run->state = manifest.contains("state") ? parse_run_state(manifest["state"].get<std::string>()) : RunState::Completed;
  if (!is_terminal(run->state)) run->state = RunState::Completed;
  run->ended_ms = opt_from<UnixMs>(manifest, "ended_ms").value_or(now);
  if (auto v = opt_from<UnixMs>(manifest, "started_ms")) run->started_ms = v;
  if (auto v = opt_from<int>(manifest, "exit_code")) run->exit_code = v;
  run->result_path = manifest.value(
      "path", ResultsStore(cfg_.results_root).relative_run_dir(experiment_id, node_id, run->slot_ms).string());

  // Release server stubs once every client run of this slot is done.
  const UnixMs s = run->slot_ms;
  const bool all_done = std::all_of(runs_.begin(), runs_.end(), [&](const RunRecord& r) {
    return r.experiment_id != experiment_id || r.slot_ms != s || is_terminal(r.state);
  });
  if (all_done) {
    const auto& spec = experiments_.at(experiment_id);
    std::erase_if(reservations_, [&](const Reservation& r) {
      return r.experiment_id == experiment_id && r.window.start_ms == s &&
             std::find(spec.servers.begin(), spec.servers.end(), r.node_id) != spec.servers.end();
    });
  }
}

Json Orchestrator::handle(const Json& request) {
  try {
    const auto type = request.at("type").get<std::string>();
    if (type == "SUBMIT") {
      const auto id = submit(spec_from_json(request.at("spec")));
      return {{"ok", true}, {"id", id}};
    }
    if (type == "HEARTBEAT") return heartbeat(request.at("node_id").get<std::string>(), request);
    if (type == "COMPLETE") {
      record_completion(request.at("experiment_id").get<std::string>(), request.at("node_id").get<std::string>(),
                        request.value("manifest", Json::object()));
      return {{"ok", true}};
    }
    if (type == "QUERY") return query(request.value("experiment_id", std::string()));
    fail(ErrorCode::ParseError, "unknown message type '" + type + "'");
  } catch (const std::exception& e) {
    return error_json(e);
  }
}

Json Orchestrator::query(const std::string& experiment_id) const {
  const auto flagged = flagged_experiments();
  std::lock_guard lock(mu_);
  const UnixMs now = clock_();
  if (!experiment_id.empty() && !experiments_.count(experiment_id)) {
    fail(ErrorCode::UnknownRun, "unknown experiment " + experiment_id);
  }
  Json exps = Json::array(), runs = Json::array(), nodes = Json::array();
  for (const auto& id : submission_order_) {
    if (!experiment_id.empty() && id != experiment_id) continue;
    Json e = to_json(experiments_.at(id));
    e["flagged"] = std::find(flagged.begin(), flagged.end(), id) != flagged.end();
    exps.push_back(e);
  }
  for (const auto& r : runs_) {
    if (experiment_id.empty() || r.experiment_id == experiment_id) runs.push_back(run_json(r));
  }
  for (const auto& [id, n] : nodes_) {
    nodes.push_back({{"node_id", id},
                     {"role", std::string(to_string(n.role))},
                     {"health", std::string(to_string(health_at(n, now)))},
                     {"last_heartbeat_ms", opt_json(n.last_heartbeat_ms)},
                     {"pending", n.pending.size()}});
  }
  return {{"ok", true}, {"experiments", exps}, {"runs", runs}, {"nodes", nodes}, {"server_time_ms", now}};
}

std::vector<RunRecord> Orchestrator::runs(const std::string& experiment_id) const {
  std::lock_guard lock(mu_);
  std::vector<RunRecord> out;
  for (const auto& r : runs_) {
    if (experiment_id.empty() || r.experiment_id == experiment_id) out.push_back(r);
  }
  return out;
}

std::optional<ExperimentSpec> Orchestrator::experiment(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = experiments_.find(id);
  if (it == experiments_.end()) return std::nullopt;
  return it->second;
}

std::optional<NodeRecord> Orchestrator::node(const std::string& node_id) const {
  std::lock_guard lock(mu_);
  auto it = nodes_.find(node_id);
  if (it == nodes_.end()) return std::nullopt;
  return it->second;
}

std::vector<Reservation> Orchestrator::reservations() const {
  std::lock_guard lock(mu_);
  return reservations_;
}

// Persistence.

Json Orchestrator::full_state() const {
  Json nodes = Json::array();
  for (const auto& [id, n] : nodes_) {
    Json pending = Json::array();
    for (const auto& a : n.pending) pending.push_back(assignment_json(a));
    nodes.push_back({{"node_id", id},
                     {"role", std::string(to_string(n.role))},
                     {"registered_ms", n.registered_ms},
                     {"last_heartbeat_ms", opt_json(n.last_heartbeat_ms)},
                     {"acked_seq", n.acked_seq},
                     {"pending", pending}});
  }
  Json exps = Json::array();
  for (const auto& id : submission_order_) exps.push_back(to_json(experiments_.at(id)));
  Json runs = Json::array();
  for (const auto& r : runs_) runs.push_back(run_json(r));
  Json res = Json::array();
  for (const auto& r : reservations_) {
    res.push_back({{"experiment_id", r.experiment_id},
                   {"node_id", r.node_id},
                   {"window", window_json(r.window)},
                   {"overhead", std::string(to_string(r.overhead))}});
  }
  return {{"users", users_},     {"nodes", nodes},          {"experiments", exps},
          {"runs", runs},        {"reservations", res},     {"next_seq", next_seq_}};
}

Json Orchestrator::tables() const {
  std::lock_guard lock(mu_);
  return full_state();
}

void Orchestrator::restore(const Json& s) {
  users_ = s.at("users").get<std::set<std::string>>();
  nodes_.clear();
  for (const auto& n : s.at("nodes")) {
    NodeRecord r;
    r.node_id = n.at("node_id").get<std::string>();
    r.role = parse_role(n.at("role").get<std::string>());
    r.registered_ms = n.at("registered_ms").get<UnixMs>();
    r.last_heartbeat_ms = opt_from<UnixMs>(n, "last_heartbeat_ms");
    r.acked_seq = n.at("acked_seq").get<std::uint64_t>();
    for (const auto& a : n.at("pending")) r.pending.push_back(assignment_from(a));
    nodes_[r.node_id] = std::move(r);
  }
  experiments_.clear();
  submission_order_.clear();
  for (const auto& e : s.at("experiments")) {
    auto spec = spec_from_json(e);
    submission_order_.push_back(spec.id);
    experiments_[spec.id] = std::move(spec);
  }
  runs_.clear();
  for (const auto& r : s.at("runs")) runs_.push_back(run_from(r));
  reservations_.clear();
  for (const auto& r : s.at("reservations")) {
    reservations_.push_back({r.at("experiment_id").get<std::string>(), r.at("node_id").get<std::string>(),
                             window_from(r.at("window")), parse_overhead(r.at("overhead").get<std::string>())});
  }
  next_seq_ = s.at("next_seq").get<std::uint64_t>();
}

void Orchestrator::replay(const Json& e) {
  const auto op = e.at("op").get<std::string>();
  if (op == "user") {
    apply_user(e.at("name").get<std::string>());
  } else if (op == "node") {
    apply_node(e.at("now").get<UnixMs>(), e.at("node_id").get<std::string>(),
               parse_role(e.at("role").get<std::string>()));
  } else if (op == "submit") {
    apply_submit(e.at("now").get<UnixMs>(), spec_from_json(e.at("spec")));
  } else if (op == "heartbeat") {
    apply_heartbeat(e.at("now").get<UnixMs>(), e.at("node_id").get<std::string>(), e.at("payload"));
  } else if (op == "complete") {
    apply_completion(e.at("now").get<UnixMs>(), e.at("experiment_id").get<std::string>(),
                     e.at("node_id").get<std::string>(), e.at("manifest"));
  } else {
    fail(ErrorCode::ParseError, "unknown log op '" + op + "'");
  }
}

void Orchestrator::load() {
  if (cfg_.state_dir.empty()) return;
  const fs::path dir(cfg_.state_dir);
  fs::create_directories(dir);
  if (fs::exists(dir / "snapshot.json")) {
    try {
      restore(Json::parse(read_file((dir / "snapshot.json").string())));
    } catch (const Json::exception& e) {
      fail(ErrorCode::ParseError, std::string("corrupt orchestrator snapshot: ") + e.what());
    }
  }
  if (fs::exists(dir / "log.jsonl")) {
    replaying_ = true;
    std::size_t lineno = 0;
    for (const auto& line : split(read_file((dir / "log.jsonl").string()), '\n')) {
      ++lineno;
      if (trim(line).empty()) continue;
      try {
        replay(Json::parse(line));
        ++log_entries_;
      } catch (const Json::exception&) {
        // A torn final write is expected after a crash; anything earlier is corruption.
        spdlog::warn("ignoring unreadable orchestrator log line {}", lineno);
      }
    }
    replaying_ = false;
  }
  log_.open(dir / "log.jsonl", std::ios::app);
  if (!log_) fail(ErrorCode::IoError, "cannot open orchestrator log in " + cfg_.state_dir);
}

void Orchestrator::log(const Json& entry) {
  if (replaying_ || !log_.is_open()) return;
  log_ << entry.dump() << '\n';
  log_.flush();
  if (cfg_.snapshot_every && ++log_entries_ >= cfg_.snapshot_every) {
    const fs::path dir(cfg_.state_dir);
    write_file((dir / "snapshot.json.tmp").string(), full_state().dump());
    fs::rename(dir / "snapshot.json.tmp", dir / "snapshot.json");
    log_.close();
    log_.open(dir / "log.jsonl", std::ios::trunc);
    log_entries_ = 0;
  }
}

void Orchestrator::snapshot() {
  std::lock_guard lock(mu_);
  if (cfg_.state_dir.empty()) return;
  const fs::path dir(cfg_.state_dir);
  write_file((dir / "snapshot.json.tmp").string(), full_state().dump());
  fs::rename(dir / "snapshot.json.tmp", dir / "snapshot.json");
  log_.close();
  log_.open(dir / "log.jsonl", std::ios::trunc);
  log_entries_ = 0;
}

// Results store.

ResultsStore::ResultsStore(fs::path root) : root_(std::move(root)) {}

fs::path ResultsStore::relative_run_dir(const std::string& experiment_id, const std::string& node_id,
                                        UnixMs slot_ms) const {
  return fs::path(experiment_id) / node_id / iso8601_utc(slot_ms);
}

fs::path ResultsStore::run_dir(const std::string& experiment_id, const std::string& node_id, UnixMs slot_ms) const {
  return root_ / relative_run_dir(experiment_id, node_id, slot_ms);
}

fs::path ResultsStore::store(const fs::path& local_dir, const std::string& experiment_id,
                             const std::string& node_id, UnixMs slot_ms) const {
  const auto dest = run_dir(experiment_id, node_id, slot_ms);
  try {
    fs::create_directories(dest);
    for (const auto& entry : fs::directory_iterator(local_dir)) {
      if (entry.is_regular_file()) {
        fs::copy_file(entry.path(), dest / entry.path().filename(), fs::copy_options::overwrite_existing);
      }
    }
  } catch (const fs::filesystem_error& e) {
    fail(ErrorCode::UploadFailure, std::string("results store write failed: ") + e.what());
  }
  return dest;
}

std::size_t ResultsStore::fetch(const std::string& experiment_id, const fs::path& dest) const {
  const auto src = root_ / experiment_id;
  if (!fs::exists(src)) fail(ErrorCode::UnknownRun, "no results for " + experiment_id);
  std::size_t copied = 0;
  for (const auto& entry : fs::recursive_directory_iterator(src)) {
    const auto rel = fs::relative(entry.path(), root_);
    if (entry.is_directory()) {
      fs::create_directories(dest / rel);
    } else if (entry.is_regular_file()) {
      fs::create_directories((dest / rel).parent_path());
      fs::copy_file(entry.path(), dest / rel, fs::copy_options::overwrite_existing);
      ++copied;
    }
  }
  return copied;
}

}  // namespace leobed::orchestrator

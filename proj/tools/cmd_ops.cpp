#include <filesystem>
#include <iostream>
#include <memory>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cli.hpp"
#include "leobed/agent.hpp"
#include "leobed/experiment.hpp"
#include "leobed/orbital.hpp"
#include "leobed/orchestrator.hpp"
#include "leobed/terminal_sim.hpp"

namespace leobed::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint16_t kOrchestratorPort = 7400;
constexpr std::uint16_t kTerminalPort = 7401;
constexpr UnixMs kRecordStartMs = 1'704'067'200'000;  // 2024-01-01T00:00:00Z

// "a:b:c" -> numbers.
std::vector<double> colon_fields(const std::string& text, std::size_t n, const std::string& what) {
  std::vector<double> out;
  for (const auto& p : split(text, ':')) {
    try {
      out.push_back(std::stod(p));
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidArgument, fmt::format("bad {} '{}'", what, text));
    }
  }
  if (out.size() != n) fail(ErrorCode::InvalidArgument, fmt::format("{} needs {} fields: '{}'", what, n, text));
  return out;
}

std::string opt_iso(const std::optional<UnixMs>& t) { return t ? iso8601_utc(*t) : "-"; }

net::LineServer make_server(const std::string& bind, std::uint16_t port, std::function<Json(const Json&)> handle) {
  return net::LineServer(bind, port, [handle](const std::string& line) {
    Json reply;
    try {
      reply = handle(Json::parse(line));
    } catch (const std::exception& e) {
      reply = orchestrator::error_json(e);
    }
    return reply.dump();
  });
}

struct SiteOptions {
  double lat = 41.39, lon = 2.17, alt = 50;
  orbital::GroundSite site() const {
    orbital::GroundSite s{lat, lon, alt};
    orbital::validate(s);
    return s;
  }
};

void add_site(CLI::App* c, SiteOptions& s) {
  c->add_option("--lat", s.lat, "site latitude, degrees")->capture_default_str();
  c->add_option("--lon", s.lon, "site longitude, degrees")->capture_default_str();
  c->add_option("--alt-m", s.alt, "site altitude, metres")->capture_default_str();
}

// ---- orchestrate ----

struct OrchestrateOptions {
  std::string bind = "127.0.0.1";
  int port = -1;
  std::string port_file;
  std::string state_dir;
  std::vector<std::string> nodes;  // id:role
  std::vector<std::string> users;
  double heartbeat_interval_s = 10;
  double run_for_s = 0;
};

void run_orchestrate(const Globals& g, const OrchestrateOptions& o) {
  const SimClock clock = SimClock::from(g);
  orchestrator::OrchestratorConfig cfg;
  cfg.state_dir = o.state_dir;
  cfg.results_root = g.results_root;
  cfg.health.heartbeat_interval_ms = static_cast<UnixMs>(o.heartbeat_interval_s * 1000);
  orchestrator::Orchestrator orch(cfg, [clock] { return clock.now(); });

  std::vector<std::pair<std::string, NodeRole>> nodes;
  if (g.config.contains("nodes")) {
    for (const auto& n : g.config["nodes"]) {
      nodes.emplace_back(n.at("node_id").get<std::string>(), parse_role(n.value("role", std::string("CLIENT"))));
    }
  }
  for (const auto& n : o.nodes) {
    const auto parts = split(n, ':');
    nodes.emplace_back(parts.at(0), parts.size() > 1 ? parse_role(parts[1]) : NodeRole::Client);
  }
  for (const auto& [id, role] : nodes) orch.register_node(id, role);
  for (const auto& u : o.users) orch.register_user(u);

  const auto [_, default_port] = net::parse_endpoint(g.endpoint, kOrchestratorPort);
  const auto port = static_cast<std::uint16_t>(o.port >= 0 ? o.port : default_port);
  auto server = make_server(o.bind, port, [&orch](const Json& req) { return orch.handle(req); });
  server.start();
  spdlog::info("orchestrator listening on {}:{} with {} nodes", o.bind, server.port(), nodes.size());
  write_port_file(o.port_file, server.port());
  wait_for_shutdown(o.run_for_s);
  server.stop();
  if (!o.state_dir.empty()) orch.snapshot();
}

// ---- terminal-sim ----

struct TerminalOptions {
  std::string bind = "127.0.0.1";
  int port = -1;
  std::string port_file;
  SiteOptions site;
  std::vector<std::string> spikes;        // offset_s:quanta:multiplier
  std::vector<std::string> user_traffic;  // offset_s:duration_s:mbps
  double p_bad_handover = -1;
  double base_latency_ms = -1;
  int record_s = 0;
  std::string out;
  std::string spikes_out;
  UnixMs start_ms = 0;
  double run_for_s = 0;
};

terminal::TerminalSim make_terminal(const Globals& g, const TerminalOptions& o, UnixMs start) {
  terminal::TerminalModelConfig cfg;
  cfg.rng_seed = g.seed;
  if (o.p_bad_handover >= 0) cfg.p_bad_handover = o.p_bad_handover;
  if (o.base_latency_ms > 0) cfg.base_latency_ms = o.base_latency_ms;
  cfg.validate();
  const auto site = o.site.site();
  auto sim = g.tle_catalog.empty()
                 ? terminal::TerminalSim(cfg, site, start)
                 : terminal::TerminalSim(cfg, site, orbital::load_catalog(g.tle_catalog), start);
  for (const auto& s : o.spikes) {
    const auto f = colon_fields(s, 3, "--spike");
    sim.force_spike(start + static_cast<UnixMs>(f[0] * 1000), static_cast<int>(f[1]), f[2]);
  }
  for (const auto& u : o.user_traffic) {
    const auto f = colon_fields(u, 3, "--user-traffic");
    sim.inject_user_traffic(f[2] * 1e6, start + static_cast<UnixMs>(f[0] * 1000), static_cast<UnixMs>(f[1] * 1000));
  }
  return sim;
}

void write_spikes(const std::string& path, const std::vector<terminal::SpikeEvent>& spikes) {
  if (path.empty()) return;
  std::string csv = "start_ms,end_ms,quanta,multiplier,forced\n";
  for (const auto& s : spikes) {
    csv += fmt::format("{},{},{},{:.3f},{}\n", s.start_ms, s.end_ms, s.quanta, s.multiplier, s.forced ? 1 : 0);
  }
  write_file(path, csv);
}

void run_terminal(const Globals& g, const TerminalOptions& o) {
  if (!g.tle_catalog.empty()) require_path(g.tle_catalog, "TLE catalog");
  if (o.record_s > 0) {
    if (o.out.empty()) fail(ErrorCode::InvalidArgument, "--record-s needs --out");
    auto sim = make_terminal(g, o, o.start_ms ? o.start_ms : kRecordStartMs);
    const auto samples = sim.run(o.record_s);
    terminal::write_jsonl(o.out, samples);
    write_spikes(o.spikes_out, sim.spikes());
    emit(g, {{"ok", true}, {"samples", samples.size()}, {"spikes", sim.spikes().size()}, {"out", o.out}}, [&] {
      std::cout << fmt::format("wrote {} samples ({} spikes) to {}\n", samples.size(), sim.spikes().size(), o.out);
    });
    return;
  }
  const SimClock clock = SimClock::from(g);
  const UnixMs start = o.start_ms ? o.start_ms : clock.now() / kMsPerSecond * kMsPerSecond;
  agent::SharedTerminal shared(make_terminal(g, o, start));
  const auto [_, default_port] = net::parse_endpoint(g.terminal_endpoint, kTerminalPort);
  const auto port = static_cast<std::uint16_t>(o.port >= 0 ? o.port : default_port);
  auto server = make_server(o.bind, port, [&shared](const Json& req) { return shared.handle(req); });
  server.start();
  spdlog::info("terminal simulator on {}:{}, start {}", o.bind, server.port(), iso8601_utc(start));
  write_port_file(o.port_file, server.port());
  wait_for_shutdown(o.run_for_s);
  server.stop();
  write_spikes(o.spikes_out, shared.spikes());
}

// ---- agent ----

struct AgentOptions {
  std::string node_id;
  std::string role = "CLIENT";
  std::string work_dir;
  double heartbeat_interval_s = 10;
  bool no_scavenger = false;
  SiteOptions site;
  double run_for_s = 0;
};

void run_agent(const Globals& g, const AgentOptions& o) {
  const SimClock clock = SimClock::from(g);
  agent::AgentConfig cfg;
  cfg.node_id = o.node_id;
  cfg.role = parse_role(o.role);
  cfg.work_dir = o.work_dir.empty() ? fs::path("agent-" + o.node_id) : fs::path(o.work_dir);
  cfg.heartbeat_interval_ms = static_cast<UnixMs>(o.heartbeat_interval_s * 1000);
  cfg.scavenger = !o.no_scavenger;
  cfg.seed = g.seed;

  std::shared_ptr<const orbital::OrbitalContext> orbital;
  if (!g.tle_catalog.empty()) {
    require_path(g.tle_catalog, "TLE catalog");
    auto ctx = std::make_shared<orbital::OrbitalContext>();
    ctx->site = o.site.site();
    ctx->catalog = orbital::load_catalog(g.tle_catalog);
    orbital = ctx;
  }
  auto orch = connect(g.endpoint, kOrchestratorPort);
  auto term = std::make_shared<agent::RemoteTerminal>(connect(g.terminal_endpoint, kTerminalPort));
  auto uploader = std::make_shared<agent::StoreUploader>(g.results_root);
  agent::Agent a(cfg, orch, term, uploader, orbital);
  agent::AgentDaemon daemon(a, clock.speedup, clock.now());
  daemon.start();
  spdlog::info("agent {} running, work dir {}", o.node_id, cfg.work_dir.string());
  wait_for_shutdown(o.run_for_s);
  daemon.stop();
}

// ---- submit / status / results ----

void run_submit(const Globals& g, const std::string& path) {
  require_path(path, "experiment spec");
  const ExperimentSpec spec = load_spec(path);
  auto ch = connect(g.endpoint, kOrchestratorPort);
  const Json reply = call(*ch, {{"type", "SUBMIT"}, {"spec", to_json(spec)}});
  emit(g, reply, [&] { std::cout << reply.at("id").get<std::string>() << '\n'; });
}

void run_status(const Globals& g, const std::string& experiment) {
  auto ch = connect(g.endpoint, kOrchestratorPort);
  Json req = {{"type", "QUERY"}};
  if (!experiment.empty()) req["experiment_id"] = experiment;
  const Json reply = call(*ch, req);
  emit(g, reply, [&] {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : reply.at("runs")) {
      const auto ms = [&](const char* k) {
        return r.contains(k) && !r[k].is_null() ? opt_iso(r[k].get<UnixMs>()) : std::string("-");
      };
      rows.push_back({r.value("experiment_id", ""), r.value("node_id", ""), ms("slot_ms"), r.value("state", ""),
                      std::to_string(r.value("attempt", 0)), ms("started_ms"), ms("ended_ms"),
                      r.value("result_path", "")});
    }
    print_table({"EXPERIMENT", "NODE", "SLOT", "STATE", "ATTEMPT", "STARTED", "ENDED", "RESULT"}, rows);
    if (experiment.empty()) {
      std::vector<std::vector<std::string>> nodes;
      for (const auto& n : reply.at("nodes")) {
        nodes.push_back({n.value("node_id", ""), n.value("role", ""), n.value("health", ""),
                         std::to_string(n.value("pending", 0))});
      }
      std::cout << '\n';
      print_table({"NODE", "ROLE", "HEALTH", "PENDING"}, nodes);
    }
  });
}

void run_fetch(const Globals& g, const std::string& id, const std::string& dest) {
  require_path(g.results_root, "results store");
  const orchestrator::ResultsStore store(g.results_root);
  const auto n = store.fetch(id, dest);
  const auto where = (fs::path(dest) / id).string();
  emit(g, {{"ok", true}, {"experiment_id", id}, {"files", n}, {"dest", where}},
       [&] { std::cout << fmt::format("fetched {} files into {}\n", n, where); });
}

}  // namespace

void register_ops(CLI::App& app, Globals& g) {
  {
    auto o = std::make_shared<OrchestrateOptions>();
    auto* c = app.add_subcommand("orchestrate", "run the orchestrator daemon");
    c->add_option("--bind", o->bind, "listen address")->capture_default_str();
    c->add_option("--port", o->port, "listen port (default: the endpoint's; 0 picks one)");
    c->add_option("--port-file", o->port_file, "write the bound port here");
    c->add_option("--state-dir", o->state_dir, "durable log and snapshots");
    c->add_option("--node", o->nodes, "node to register, id[:CLIENT|SERVER]");
    c->add_option("--user", o->users, "user to register");
    c->add_option("--heartbeat-interval-s", o->heartbeat_interval_s)->capture_default_str();
    c->add_option("--run-for-s", o->run_for_s, "exit after this many wall seconds");
    c->callback([&g, o] {
      apply_logging(g);
      run_orchestrate(g, *o);
    });
  }
  {
    auto o = std::make_shared<TerminalOptions>();
    auto* c = app.add_subcommand("terminal-sim", "run the terminal simulator, or record a trace");
    c->add_option("--bind", o->bind, "listen address")->capture_default_str();
    c->add_option("--port", o->port, "listen port (default: the terminal endpoint's; 0 picks one)");
    c->add_option("--port-file", o->port_file, "write the bound port here");
    add_site(c, o->site);
    c->add_option("--spike", o->spikes, "forced spike offset_s:quanta:multiplier");
    c->add_option("--user-traffic", o->user_traffic, "user traffic offset_s:duration_s:mbps");
    c->add_option("--p-bad-handover", o->p_bad_handover, "per-handover spike probability");
    c->add_option("--base-latency-ms", o->base_latency_ms, "median PoP latency");
    c->add_option("--start-ms", o->start_ms, "first sample time (epoch ms)");
    c->add_option("--record-s", o->record_s, "record this many seconds offline instead of serving");
    c->add_option("--out", o->out, "telemetry JSONL for --record-s");
    c->add_option("--spikes-out", o->spikes_out, "ground-truth spike CSV");
    c->add_option("--run-for-s", o->run_for_s, "exit after this many wall seconds");
    c->callback([&g, o] {
      apply_logging(g);
      run_terminal(g, *o);
    });
  }
  {
    auto o = std::make_shared<AgentOptions>();
    auto* c = app.add_subcommand("agent", "run a node agent");
    c->add_option("--node-id", o->node_id, "node id")->required();
    c->add_option("--role", o->role, "CLIENT or SERVER")->capture_default_str();
    c->add_option("--work-dir", o->work_dir, "local working directory");
    c->add_option("--heartbeat-interval-s", o->heartbeat_interval_s)->capture_default_str();
    c->add_flag("--no-scavenger", o->no_scavenger, "never preempt OVERHEAD runs");
    add_site(c, o->site);
    c->add_option("--run-for-s", o->run_for_s, "exit after this many wall seconds");
    c->callback([&g, o] {
      apply_logging(g);
      run_agent(g, *o);
    });
  }
  {
    auto path = std::make_shared<std::string>();
    auto* c = app.add_subcommand("submit", "submit an experiment spec");
    c->add_option("--spec", *path, "spec JSON")->required();
    c->callback([&g, path] {
      apply_logging(g);
      run_submit(g, *path);
    });
  }
  {
    auto id = std::make_shared<std::string>();
    auto* c = app.add_subcommand("status", "runs and node health");
    c->add_option("--experiment", *id, "only this experiment");
    c->callback([&g, id] {
      apply_logging(g);
      run_status(g, *id);
    });
  }
  {
    auto* results = app.add_subcommand("results", "results store");
    results->require_subcommand(1);
    auto id = std::make_shared<std::string>();
    auto dest = std::make_shared<std::string>(".");
    auto* c = results->add_subcommand("fetch", "mirror an experiment's results locally");
    c->add_option("experiment_id", *id)->required();
    c->add_option("--dest", *dest, "destination directory")->capture_default_str();
    c->callback([&g, id, dest] {
      apply_logging(g);
      run_fetch(g, *id, *dest);
    });
  }
}

}  // namespace leobed::cli

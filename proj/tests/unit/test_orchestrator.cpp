#include <random>
#include <set>

#include "leobed/orchestrator.hpp"
#include "support.hpp"

using namespace leobed;
using namespace leobed::orchestrator;

namespace {

constexpr UnixMs kT0 = 1'709'251'200'000;  // 2024-03-01T00:00:00Z

struct ManualClock {
  UnixMs now = kT0;
  Orchestrator::Clock fn() {
    return [this] { return now; };
  }
};

ExperimentSpec fixed(const std::string& id, OverheadClass oh, std::vector<std::string> clients, UnixMs s, UnixMs e,
                     ExperimentKind kind = ExperimentKind::BulkFlow) {
  ExperimentSpec spec;
  spec.id = id;
  spec.kind = kind;
  spec.overhead = oh;
  spec.clients = std::move(clients);
  spec.windows = {{kT0 + s * 1000, kT0 + e * 1000}};
  return spec;
}

void add_nodes(Orchestrator& o, const std::vector<std::string>& ids) {
  for (const auto& n : ids) o.register_node(n, n[0] == 's' ? NodeRole::Server : NodeRole::Client);
}

}  // namespace

TEST_CASE("conflict rule examples") {
  Orchestrator o;
  add_nodes(o, {"c1", "c2", "s1"});
  o.submit(fixed("bulk-a", OverheadClass::Overhead, {"c1"}, 0, 60));
  try {
    o.submit(fixed("bulk-b", OverheadClass::Overhead, {"c1"}, 30, 90));
    FAIL("expected a conflict");
  } catch (const ConflictError& e) {
    CHECK(e.clashing_ids() == std::vector<std::string>{"bulk-a"});
  }
  CHECK_NOTHROW(o.submit(fixed("ping", OverheadClass::NoOverhead, {"c1"}, 0, 60, ExperimentKind::Ping)));
  CHECK_NOTHROW(o.submit(fixed("bulk-c", OverheadClass::Overhead, {"c1"}, 60, 120)));
  CHECK_NOTHROW(o.submit(fixed("bulk-d", OverheadClass::Overhead, {"c2"}, 30, 90)));

  auto shared_server = fixed("bulk-e", OverheadClass::Overhead, {"c2"}, 200, 260);
  shared_server.servers = {"s1"};
  o.submit(shared_server);
  auto other = fixed("bulk-f", OverheadClass::Overhead, {"c1"}, 250, 300);
  other.servers = {"s1"};
  CHECK_THROWS_CODE(o.submit(other), ErrorCode::ConflictError);
}

TEST_CASE("half-open windows against an exhaustive oracle") {
  // Every pair of windows with endpoints in 0..6; the oracle paints unit cells.
  for (int a = 0; a <= 6; ++a) {
    for (int b = a + 1; b <= 6; ++b) {
      for (int c = 0; c <= 6; ++c) {
        for (int d = c + 1; d <= 6; ++d) {
          Orchestrator o;
          add_nodes(o, {"c1"});
          o.submit(fixed("first", OverheadClass::Overhead, {"c1"}, a, b));
          bool shared_cell = false;
          for (int t = 0; t < 6; ++t) shared_cell |= (a <= t && t < b) && (c <= t && t < d);
          bool rejected = false;
          try {
            o.submit(fixed("second", OverheadClass::Overhead, {"c1"}, c, d));
          } catch (const ConflictError&) {
            rejected = true;
          }
          CHECK(rejected == shared_cell);
        }
      }
    }
  }
}

TEST_CASE("submission validation") {
  Orchestrator o;
  add_nodes(o, {"c1"});
  CHECK_THROWS_CODE(o.submit(fixed("x", OverheadClass::Overhead, {"ghost"}, 0, 10)), ErrorCode::UnknownNode);

  auto trig = fixed("t", OverheadClass::NoOverhead, {"c1"}, 0, 10);
  trig.windows.clear();
  trig.trigger = TriggerSchedule{"latency_ms > banana", 10, 0, 1};
  CHECK_THROWS_CODE(o.submit(trig), ErrorCode::BadTrigger);
  trig.trigger->trigger = "latency_ms >";
  CHECK_THROWS_CODE(o.submit(trig), ErrorCode::BadTrigger);
  trig.trigger->trigger = "latency_ms >= 2*mavg(latency_ms,5)";
  CHECK(o.submit(trig) == "t");
  CHECK_THROWS_CODE(o.submit(trig), ErrorCode::InvalidSpec);

  auto both = fixed("both", OverheadClass::NoOverhead, {"c1"}, 0, 10);
  both.trigger = TriggerSchedule{"latency_ms > 1", 10, 0, 1};
  CHECK_THROWS_CODE(o.submit(both), ErrorCode::InvalidSpec);
  auto backwards = fixed("back", OverheadClass::NoOverhead, {"c1"}, 10, 10);
  CHECK_THROWS_CODE(o.submit(backwards), ErrorCode::InvalidSpec);
}

TEST_CASE("randomized submissions never double-book a node") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> start(0, 500), len(1, 80), node(0, 3), coin(0, 2);
  const std::vector<std::string> ids{"c0", "c1", "c2", "c3"};
  for (int trial = 0; trial < 30; ++trial) {
    Orchestrator o;
    add_nodes(o, ids);
    for (int k = 0; k < 40; ++k) {
      const int s = start(rng);
      std::vector<std::string> cl{ids[node(rng)]};
      if (coin(rng) == 0) cl.push_back(ids[node(rng)]);
      std::sort(cl.begin(), cl.end());
      cl.erase(std::unique(cl.begin(), cl.end()), cl.end());
      try {
        o.submit(fixed("e" + std::to_string(k), coin(rng) ? OverheadClass::Overhead : OverheadClass::NoOverhead, cl, s,
                       s + len(rng)));
      } catch (const ConflictError&) {
      }
    }
    const auto res = o.reservations();
    for (int t = 0; t < 600; ++t) {
      const UnixMs at = kT0 + t * 1000;
      for (const auto& n : ids) {
        int active = 0;
        for (const auto& r : res) {
          active += r.node_id == n && r.overhead == OverheadClass::Overhead && r.window.contains(at);
        }
        CHECK(active <= 1);
      }
    }
  }
}

TEST_CASE("heartbeats piggyback schedules") {
  ManualClock clock;
  Orchestrator o(OrchestratorConfig{}, clock.fn());
  add_nodes(o, {"c1"});
  auto resp = o.heartbeat("c1", {{"ack_seq", 0}});
  CHECK(resp["schedules"].empty());
  CHECK_THROWS_CODE(o.heartbeat("ghost", Json::object()), ErrorCode::UnknownNode);

  o.submit(fixed("p", OverheadClass::NoOverhead, {"c1"}, 100, 160, ExperimentKind::Ping));
  clock.now += 10'000;
  resp = o.heartbeat("c1", {{"ack_seq", 0}});
  REQUIRE(resp["schedules"].size() == 1);
  const auto seq = resp["schedules"][0]["seq"].get<std::uint64_t>();
  CHECK(spec_from_json(resp["schedules"][0]["spec"]).id == "p");
  clock.now += 10'000;
  CHECK(o.heartbeat("c1", {{"ack_seq", 0}})["schedules"].size() == 1);  // not yet acknowledged
  clock.now += 10'000;
  CHECK(o.heartbeat("c1", {{"ack_seq", seq}})["schedules"].empty());
}

TEST_CASE("lossy channel still executes each schedule exactly once") {
  ManualClock clock;
  Orchestrator o(OrchestratorConfig{}, clock.fn());
  add_nodes(o, {"c1"});
  std::mt19937_64 rng(99);
  std::bernoulli_distribution drop(0.35);

  // Minimal agent: acknowledges the highest seq seen and runs each seq once.
  std::uint64_t ack = 0;
  std::set<std::uint64_t> executed_seq;
  std::multiset<std::string> executions;
  int submitted = 0;
  for (int round = 0; round < 400; ++round) {
    if (round % 5 == 0 && submitted < 60) {
      o.submit(fixed("exp" + std::to_string(submitted), OverheadClass::NoOverhead, {"c1"}, 1000 + submitted * 10,
                     1000 + submitted * 10 + 5, ExperimentKind::Ping));
      ++submitted;
    }
    clock.now += 10'000;
    if (drop(rng)) continue;  // request lost
    const auto resp = o.heartbeat("c1", {{"ack_seq", ack}});
    if (drop(rng)) continue;  // response lost
    for (const auto& s : resp["schedules"]) {
      const auto seq = s["seq"].get<std::uint64_t>();
      if (executed_seq.insert(seq).second) executions.insert(s["spec"]["id"].get<std::string>());
      ack = std::max(ack, seq);
    }
  }
  CHECK(submitted == 60);
  CHECK(executions.size() == 60);
  for (int k = 0; k < 60; ++k) CHECK(executions.count("exp" + std::to_string(k)) == 1);
  CHECK(o.node("c1")->pending.empty());
}

TEST_CASE("every schedule arrives within two heartbeat intervals on a lossless channel") {
  ManualClock clock;
  Orchestrator o(OrchestratorConfig{}, clock.fn());
  add_nodes(o, {"c1", "c2"});
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<UnixMs> jitter(0, 9'999);
  std::map<std::string, UnixMs> submitted_at;
  std::map<std::string, UnixMs> delivered_at;
  std::uint64_t ack1 = 0, ack2 = 0;
  UnixMs next_hb = kT0;
  for (int k = 0; k < 50; ++k) {
    const UnixMs submit_time = kT0 + k * 7'000 + jitter(rng);
    while (next_hb <= submit_time) {
      clock.now = next_hb;
      for (auto* pair : {&ack1, &ack2}) {
        const std::string n = pair == &ack1 ? "c1" : "c2";
        const Json reply = o.heartbeat(n, {{"ack_seq", *pair}});
        for (const auto& s : reply["schedules"]) {
          delivered_at.try_emplace(s["spec"]["id"].get<std::string>() + "@" + n, next_hb);
          *pair = std::max(*pair, s["seq"].get<std::uint64_t>());
        }
      }
      next_hb += 10'000;
    }
    clock.now = submit_time;
    const std::string id = "x" + std::to_string(k);
    o.submit(fixed(id, OverheadClass::NoOverhead, {"c1", "c2"}, 5000 + k * 10, 5005 + k * 10, ExperimentKind::Ping));
    submitted_at[id] = submit_time;
  }
  for (int extra = 0; extra < 3; ++extra) {
    clock.now = next_hb;
    for (auto* pair : {&ack1, &ack2}) {
      const std::string n = pair == &ack1 ? "c1" : "c2";
      const Json reply = o.heartbeat(n, {{"ack_seq", *pair}});
      for (const auto& s : reply["schedules"]) {
        delivered_at.try_emplace(s["spec"]["id"].get<std::string>() + "@" + n, next_hb);
        *pair = std::max(*pair, s["seq"].get<std::uint64_t>());
      }
    }
    next_hb += 10'000;
  }
  for (const auto& [id, t] : submitted_at) {
    for (const char* n : {"c1", "c2"}) {
      REQUIRE(delivered_at.count(id + "@" + n));
      CHECK(delivered_at[id + "@" + n] - t <= 20'000);
    }
  }
}

TEST_CASE("node health follows heartbeat age") {
  ManualClock clock;
  Orchestrator o(OrchestratorConfig{}, clock.fn());
  add_nodes(o, {"c1"});
  o.submit(fixed("p", OverheadClass::NoOverhead, {"c1"}, 1000, 1060, ExperimentKind::Ping));
  o.heartbeat("c1", Json::object());
  CHECK(o.health("c1") == Health::Healthy);
  clock.now += 29'999;
  CHECK(o.health("c1") == Health::Healthy);
  CHECK(o.flagged_experiments().empty());
  clock.now += 1;
  CHECK(o.health("c1") == Health::Stale);
  CHECK(o.flagged_experiments() == std::vector<std::string>{"p"});
  clock.now = kT0 + 100'000;
  CHECK(o.health("c1") == Health::Stale);
  clock.now += 1;
  CHECK(o.health("c1") == Health::Down);
  o.heartbeat("c1", Json::object());
  CHECK(o.health("c1") == Health::Healthy);
}

TEST_CASE("completion bookkeeping") {
  ManualClock clock;
  TempDir tmp;
  OrchestratorConfig cfg;
  cfg.results_root = tmp.str();
  Orchestrator o(cfg, clock.fn());
  add_nodes(o, {"c1", "s1"});
  auto spec = fixed("bulk", OverheadClass::Overhead, {"c1"}, 0, 60);
  spec.servers = {"s1"};
  o.submit(spec);
  CHECK(o.reservations().size() == 2);
  o.record_completion("bulk", "c1", {{"slot_ms", kT0}});
  auto runs = o.runs("bulk");
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].state == RunState::Completed);
  CHECK(runs[0].result_path == "bulk/c1/2024-03-01T00:00:00Z");
  CHECK(o.reservations().size() == 1);  // server stub released
  const auto before = o.tables();
  o.record_completion("bulk", "c1", {{"slot_ms", kT0}});
  CHECK(o.tables() == before);
  CHECK_THROWS_CODE(o.record_completion("nope", "c1", Json::object()), ErrorCode::UnknownRun);
  CHECK_THROWS_CODE(o.record_completion("bulk", "c1", {{"slot_ms", kT0 + 5}}), ErrorCode::UnknownRun);
}

TEST_CASE("preempted runs are re-enqueued once") {
  ManualClock clock;
  Orchestrator o(OrchestratorConfig{}, clock.fn());
  add_nodes(o, {"c1"});
  o.submit(fixed("bulk", OverheadClass::Overhead, {"c1"}, 0, 60));
  o.submit(fixed("other", OverheadClass::Overhead, {"c1"}, 100, 200));
  clock.now = kT0 + 20'000;
  Json run = {{"experiment_id", "bulk"}, {"slot_ms", kT0}, {"state", "PREEMPTED"}, {"rescheduled", false},
              {"reason", "USER_TRAFFIC"}};
  auto resp = o.heartbeat("c1", {{"ack_seq", 2}, {"runs", {run}}});
  REQUIRE(resp["schedules"].size() == 1);
  const auto retry = spec_from_json(resp["schedules"][0]["spec"]);
  // The 60 s delay lands inside "other"; the retry slides to its end.
  CHECK(retry.windows == std::vector<TimeWindow>{{kT0 + 200'000, kT0 + 260'000}});
  CHECK(resp["schedules"][0]["attempt"] == 1);
  auto runs = o.runs("bulk");
  REQUIRE(runs.size() == 2);
  CHECK(runs[0].state == RunState::Preempted);
  CHECK(runs[0].preemption_reason == "USER_TRAFFIC");

  // A second preemption of the retry is not re-enqueued again.
  Json again = {{"experiment_id", "bulk"}, {"slot_ms", kT0 + 200'000}, {"state", "PREEMPTED"}, {"rescheduled", false}};
  resp = o.heartbeat("c1", {{"ack_seq", resp["schedules"][0]["seq"]}, {"runs", {again}}});
  CHECK(resp["schedules"].empty());
  CHECK(o.runs("bulk").size() == 2);

  // Locally rescheduled preemptions are only recorded.
  o.submit(fixed("bulk2", OverheadClass::Overhead, {"c1"}, 1000, 1060));
  Json local = {{"experiment_id", "bulk2"}, {"slot_ms", kT0 + 1'000'000}, {"state", "PREEMPTED"}, {"rescheduled", true}};
  resp = o.heartbeat("c1", {{"ack_seq", 100}, {"runs", {local}}});
  CHECK(resp["schedules"].empty());
}

TEST_CASE("log replay reconstructs identical tables") {
  TempDir tmp;
  ManualClock clock;
  OrchestratorConfig cfg;
  cfg.state_dir = (tmp.path / "state").string();
  cfg.snapshot_every = 0;
  std::mt19937_64 rng(5);
  Json expected;
  {
    Orchestrator o(cfg, clock.fn());
    add_nodes(o, {"c1", "c2", "s1"});
    o.register_user("alice");
    std::uniform_int_distribution<int> start(0, 300), len(5, 60), pick(0, 5);
    for (int k = 0; k < 80; ++k) {
      clock.now += 1000;
      try {
        switch (pick(rng)) {
          case 0:
          case 1:
            o.submit(fixed("e" + std::to_string(k), pick(rng) % 2 ? OverheadClass::Overhead : OverheadClass::NoOverhead,
                           {pick(rng) % 2 ? "c1" : "c2"}, start(rng), start(rng) + 301));
            break;
          case 2:
            o.heartbeat("c1", {{"ack_seq", k / 2}});
            break;
          case 3:
            o.heartbeat("c2", Json::object());
            break;
          case 4:
            o.record_completion("e" + std::to_string(k - 3), "c1", Json::object());
            break;
          default:
            if (k == 40) o.snapshot();
        }
      } catch (const Error&) {
      }
    }
    expected = o.tables();
  }
  Orchestrator replayed(cfg, clock.fn());
  CHECK(replayed.tables() == expected);
  CHECK(!expected["experiments"].empty());
}

TEST_CASE("automatic snapshots compact the log") {
  TempDir tmp;
  ManualClock clock;
  OrchestratorConfig cfg;
  cfg.state_dir = tmp.str();
  cfg.snapshot_every = 7;
  Json expected;
  {
    Orchestrator o(cfg, clock.fn());
    add_nodes(o, {"c1"});
    for (int k = 0; k < 20; ++k) {
      clock.now += 500;
      o.submit(fixed("n" + std::to_string(k), OverheadClass::NoOverhead, {"c1"}, k, k + 1, ExperimentKind::Ping));
      o.heartbeat("c1", {{"ack_seq", k}});
    }
    expected = o.tables();
  }
  CHECK(std::filesystem::exists(tmp.path / "snapshot.json"));
  CHECK(Orchestrator(cfg, clock.fn()).tables() == expected);
}

TEST_CASE("wire protocol") {
  ManualClock clock;
  Orchestrator o(OrchestratorConfig{}, clock.fn());
  add_nodes(o, {"c1"});
  auto ok = o.handle({{"type", "SUBMIT"}, {"spec", to_json(fixed("a", OverheadClass::Overhead, {"c1"}, 0, 60))}});
  CHECK(ok["ok"] == true);
  CHECK(ok["id"] == "a");
  auto clash = o.handle({{"type", "SUBMIT"}, {"spec", to_json(fixed("b", OverheadClass::Overhead, {"c1"}, 10, 20))}});
  CHECK(clash["ok"] == false);
  CHECK(clash["error"]["code"] == "ConflictError");
  CHECK(clash["error"]["clashing_ids"] == Json::array({"a"}));
  CHECK(o.handle({{"type", "BOGUS"}})["error"]["code"] == "ParseError");
  CHECK(o.handle({{"type", "SUBMIT"}})["error"]["code"] == "ParseError");
  CHECK(o.handle({{"type", "COMPLETE"}, {"experiment_id", "zzz"}, {"node_id", "c1"}})["error"]["code"] == "UnknownRun");
  const auto q = o.handle({{"type", "QUERY"}});
  CHECK(q["experiments"].size() == 1);
  CHECK(q["nodes"][0]["health"] == "HEALTHY");
  CHECK(q["runs"][0]["state"] == "PENDING");

  SUBCASE("over TCP") {
    net::LineServer server("127.0.0.1", 0, [&](const std::string& line) {
      try {
        return o.handle(Json::parse(line)).dump();
      } catch (const std::exception& e) {
        return error_json(e).dump();
      }
    });
    server.start();
    net::TcpChannel ch("127.0.0.1", server.port());
    CHECK(ch.call({{"type", "HEARTBEAT"}, {"node_id", "c1"}})["schedules"].size() == 1);
    CHECK(ch.call({{"type", "QUERY"}, {"experiment_id", "a"}})["experiments"][0]["id"] == "a");
    server.stop();
    CHECK_THROWS_CODE(ch.call({{"type", "QUERY"}}), ErrorCode::Unavailable);
  }
}

TEST_CASE("spec JSON round trip") {
  auto spec = fixed("rt", OverheadClass::Overhead, {"c1", "c2"}, 0, 60);
  spec.servers = {"s1"};
  spec.params = {{"rate_mbps", 20}, {"dst", "8.8.8.8"}};
  spec.windows.push_back({kT0 + 120'500, kT0 + 180'000});
  CHECK(spec_from_json(to_json(spec)) == spec);
  CHECK(to_json(spec)["schedule"]["windows"][0][0] == "2024-03-01T00:00:00Z");
  CHECK(param_double(spec, "rate_mbps", 0) == 20);
  CHECK(param_string(spec, "dst", "") == "8.8.8.8");

  auto trig = spec;
  trig.windows.clear();
  trig.trigger = TriggerSchedule{"latency_ms >= 2*mavg(latency_ms,5)", 30, 60, 3, false};
  CHECK(spec_from_json(to_json(trig)) == trig);
  CHECK(to_json(trig)["schedule"]["trigger"] == "latency_ms >= 2*mavg(latency_ms,5)");
  CHECK_THROWS_CODE(spec_from_json(Json::parse(R"({"id":"x"})")), ErrorCode::InvalidSpec);
  CHECK_THROWS_CODE(spec_from_json(Json::parse(R"({"id":"x","kind":"TELEPORT","clients":["c"],"schedule":{"windows":[[0,1]]}})")),
                    ErrorCode::InvalidSpec);
}

TEST_CASE("results store layout") {
  TempDir store_root, local, mirror;
  ResultsStore store(store_root.path);
  write_file((local.path / "stdout.log").string(), "hello\n");
  write_file((local.path / "manifest.json").string(), "{}");
  const auto dir = store.store(local.path, "exp", "c1", kT0 + 5000);
  CHECK(dir == store_root.path / "exp" / "c1" / "2024-03-01T00:00:05Z");
  CHECK(std::filesystem::exists(dir / "stdout.log"));
  CHECK(store.fetch("exp", mirror.path) == 2);
  CHECK(read_file((mirror.path / "exp" / "c1" / "2024-03-01T00:00:05Z" / "stdout.log").string()) == "hello\n");
  CHECK_THROWS_CODE(store.fetch("missing", mirror.path), ErrorCode::UnknownRun);
}

TEST_CASE("run state machine") {
  CHECK(legal_transition(RunState::Pending, RunState::Running));
  CHECK(legal_transition(RunState::Running, RunState::Preempted));
  CHECK(legal_transition(RunState::Preempted, RunState::Pending));
  CHECK(legal_transition(RunState::Pending, RunState::Failed));
  CHECK(!legal_transition(RunState::Pending, RunState::Completed));
  CHECK(!legal_transition(RunState::Completed, RunState::Running));
  CHECK(!legal_transition(RunState::Preempted, RunState::Running));
}

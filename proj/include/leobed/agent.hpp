#pragma once

#include <atomic>
#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "leobed/experiment.hpp"
#include "leobed/net.hpp"
#include "leobed/orbital.hpp"
#include "leobed/orchestrator.hpp"
#include "leobed/telemetry.hpp"
#include "leobed/terminal_sim.hpp"
#include "leobed/triggers.hpp"

namespace leobed::agent {

using terminal::TelemetrySample;

// How an agent sees its terminal: samples by time, and the experiment traffic it injects.
class TerminalLink {
 public:
  virtual ~TerminalLink() = default;
  // The 1 Hz sample for floor(now) or nullopt if unavailable.
  virtual std::optional<TelemetrySample> sample(UnixMs now_ms) = 0;
  virtual void set_experiment_traffic(const std::string& node_id, double rate_bps, UnixMs from_ms) = 0;
};

// A TerminalSim shared by several readers that may lag each other by a few seconds.
class SharedTerminal final : public TerminalLink {
 public:
  explicit SharedTerminal(terminal::TerminalSim sim, std::size_t history = 3600);

  std::optional<TelemetrySample> sample(UnixMs now_ms) override;
  // Traffic from several nodes behind the same terminal is summed.
  void set_experiment_traffic(const std::string& node_id, double rate_bps, UnixMs from_ms) override;
  void inject_user_traffic(double rate_bps, UnixMs start_ms, UnixMs duration_ms);

  // Wire handler: {"type":"SAMPLE","now_ms"} and {"type":"TRAFFIC","node_id","rate_bps","from_ms"}.
  Json handle(const Json& request);
  std::vector<terminal::SpikeEvent> spikes() const;

 private:
  mutable std::mutex mu_;
  terminal::TerminalSim sim_;
  std::size_t history_cap_;
  std::deque<TelemetrySample> history_;
  std::map<std::string, double> node_rates_;
};

// TerminalLink over the JSON-lines protocol served by SharedTerminal::handle.
class RemoteTerminal final : public TerminalLink {
 public:
  explicit RemoteTerminal(std::shared_ptr<net::Channel> channel) : channel_(std::move(channel)) {}
  std::optional<TelemetrySample> sample(UnixMs now_ms) override;
  void set_experiment_traffic(const std::string& node_id, double rate_bps, UnixMs from_ms) override;

 private:
  std::shared_ptr<net::Channel> channel_;
};

class Uploader {
 public:
  virtual ~Uploader() = default;
  // Returns the path of the stored run relative to the store root. Throws UploadFailure.
  virtual std::string upload(const std::filesystem::path& local_dir, const std::string& experiment_id,
                             const std::string& node_id, UnixMs slot_ms) = 0;
};

class StoreUploader final : public Uploader {
 public:
  explicit StoreUploader(std::filesystem::path root) : store_(std::move(root)) {}
  std::string upload(const std::filesystem::path& local_dir, const std::string& experiment_id,
                     const std::string& node_id, UnixMs slot_ms) override;

 private:
  orchestrator::ResultsStore store_;
};

struct StatusReport {
  RunState state = RunState::Pending;
  UnixMs at_ms = 0;
  bool rescheduled = false;
};

struct LocalRun {
  std::string experiment_id;
  UnixMs slot_ms = 0;        // identity of the run; names the results directory
  UnixMs not_before_ms = 0;  // moves forward on local reschedule
  UnixMs deadline_ms = 0;
  UnixMs duration_ms = 0;
  ExperimentSpec spec;
  bool triggered = false;
  int attempt = 0;

  RunState state = RunState::Pending;
  std::optional<UnixMs> started_ms;
  std::optional<UnixMs> ended_ms;
  std::optional<int> exit_code;
  std::string preemption_reason;
  bool rescheduled = false;

  std::deque<StatusReport> unreported;
  bool uploaded = false;
  bool completion_sent = false;
  std::string result_path;
  int upload_failures = 0;
  UnixMs next_upload_ms = 0;
  long pid = 0;  // CUSTOM child, process group leader

  // Throws IllegalTransition.
  void transition(RunState to, UnixMs now_ms);
  OverheadClass overhead() const { return spec.overhead; }
};

Json to_json(const LocalRun& r);
LocalRun local_run_from_json(const Json& j);

// One running experiment. Built-in kinds are driven once per second from telemetry;
// CUSTOM wraps a child process.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual void on_tick(UnixMs now_ms, const std::optional<TelemetrySample>& s) = 0;
  // Exit code once the experiment ended on its own.
  virtual std::optional<int> finished() { return std::nullopt; }
  // Terminates and releases files. Returns the exit code if a child was killed.
  virtual std::optional<int> stop() = 0;
  // Experiment traffic put on the terminal during the last tick.
  virtual double traffic_bps() const { return 0; }
  virtual long pid() const { return 0; }
  // Forget the child without killing it.
  virtual void detach() {}
};

std::unique_ptr<Backend> make_backend(const ExperimentSpec& spec, const std::filesystem::path& run_dir,
                                      const terminal::PathModel& path, std::uint64_t seed);

// Data file written by a built-in kind ("ping.csv", ...); empty for CUSTOM.
std::string data_file_name(ExperimentKind kind);

// Bulk flow throughput from the loss/RTT square-root law, capped at the target rate.
double bulk_goodput_bps(double rtt_ms, double loss, double target_bps, int streams);

struct AgentConfig {
  std::string node_id;
  NodeRole role = NodeRole::Client;
  std::filesystem::path work_dir;
  UnixMs heartbeat_interval_ms = 10'000;
  bool scavenger = true;
  telemetry::DetectorConfig detector;
  int counter_shift_s = 1;
  bool local_reschedule = true;
  UnixMs upload_backoff_ms = 1'000;
  UnixMs upload_backoff_max_ms = 60'000;
  terminal::PathModel path;
  std::uint64_t seed = 1;
  std::size_t window_capacity = 3600;
};

struct PreemptionEvent {
  std::string experiment_id;
  UnixMs slot_ms = 0;
  UnixMs at_ms = 0;
};

class Agent {
 public:
  Agent(AgentConfig cfg, std::shared_ptr<net::Channel> orchestrator, std::shared_ptr<TerminalLink> terminal,
        std::shared_ptr<Uploader> uploader, std::shared_ptr<const orbital::OrbitalContext> orbital = nullptr);
  ~Agent();
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  // poll() every second plus heartbeat() whenever one is due.
  void tick(UnixMs now_ms);
  // Telemetry ingest, scavenger, trigger evaluation and executor supervision.
  void poll(UnixMs now_ms);
  // Returns false if the orchestrator was unreachable.
  bool heartbeat(UnixMs now_ms);

  // Leaves children running and state on disk, as a crash would.
  void abandon();

  std::vector<LocalRun> runs() const;
  std::optional<LocalRun> run(const std::string& experiment_id, UnixMs slot_ms) const;
  std::vector<PreemptionEvent> preemptions() const;
  std::vector<telemetry::DetectorEvent> detector_events() const;
  std::vector<std::string> bindings() const;
  bool user_traffic() const;
  std::uint64_t last_seq() const;
  // Trigger fires held back by the local overhead rule.
  std::size_t deferrals() const;
  const AgentConfig& config() const { return cfg_; }

 private:
  struct Binding {
    ExperimentSpec spec;
    triggers::TriggerBinding binding;
    triggers::TriggerGate gate;
  };

  void accept_schedule(const Json& assignment, UnixMs now_ms);
  void ingest(UnixMs now_ms);
  void on_detector(const telemetry::DetectorEvent& e, UnixMs now_ms);
  void evaluate_triggers(UnixMs now_ms);
  void supervise(UnixMs now_ms);
  void start(LocalRun& r, UnixMs now_ms);
  void finish(LocalRun& r, RunState state, UnixMs now_ms, std::optional<int> exit_code, std::string reason = "");
  void deliver(LocalRun& r, UnixMs now_ms);
  void update_traffic(UnixMs now_ms);
  bool overhead_running() const;
  std::filesystem::path run_dir(const LocalRun& r) const;
  LocalRun* find(const std::string& experiment_id, UnixMs slot_ms);
  void report(LocalRun& r, UnixMs now_ms);
  void save() const;
  void load(UnixMs now_ms);

  AgentConfig cfg_;
  std::shared_ptr<net::Channel> orchestrator_;
  std::shared_ptr<TerminalLink> terminal_;
  std::shared_ptr<Uploader> uploader_;
  std::shared_ptr<const orbital::OrbitalContext> orbital_;
  mutable std::mutex mu_;

  std::vector<LocalRun> runs_;
  std::map<std::string, std::unique_ptr<Backend>> backends_;  // keyed by run key
  std::map<std::string, Binding> bindings_;
  std::uint64_t last_seq_ = 0;
  std::optional<UnixMs> last_heartbeat_ms_;
  bool loaded_ = false;

  telemetry::TelemetryWindow window_;
  telemetry::ConsumptionDifferencer differencer_;
  telemetry::UserTrafficDetector detector_;
  std::optional<UnixMs> last_sample_ts_;
  std::optional<TelemetrySample> current_;
  bool fresh_ = false;  // current_ arrived during this poll
  std::optional<UnixMs> last_tick_s_;
  std::map<UnixMs, double> own_rate_;  // per-second experiment traffic we put on the terminal
  std::set<UnixMs> own_edges_;         // seconds where our traffic switched on or off
  double offset_bps_ = 0;
  double last_rate_ = 0;
  bool user_traffic_ = false;
  std::vector<telemetry::DetectorEvent> events_;
  std::vector<PreemptionEvent> preemptions_;
  std::size_t deferrals_ = 0;
  bool abandoned_ = false;
  mutable std::string saved_;
};

// Runs an Agent on the wall clock (optionally accelerated) with separate heartbeat and
// poll threads.
class AgentDaemon {
 public:
  AgentDaemon(Agent& agent, double speedup = 1.0, UnixMs origin_ms = 0);
  ~AgentDaemon();
  void start();
  void stop();
  UnixMs now() const;

 private:
  Agent& agent_;
  double speedup_;
  UnixMs origin_ms_;
  std::chrono::steady_clock::time_point real_origin_;
  std::atomic<bool> running_{false};
  std::thread poll_thread_, heartbeat_thread_;
};

}  // namespace leobed::agent

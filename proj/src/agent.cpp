#include "leobed/agent.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "leobed/error.hpp"

namespace leobed::agent {

namespace fs = std::filesystem;

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string run_key(const std::string& experiment_id, UnixMs slot_ms) {
  return experiment_id + "@" + std::to_string(slot_ms);
}

UnixMs floor_second(UnixMs t) { return t - ((t % kMsPerSecond) + kMsPerSecond) % kMsPerSecond; }

template <typename T>
Json opt_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> opt_from(const Json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<T>();
}

bool is_child_alive(long pid) { return pid > 0 && ::kill(static_cast<pid_t>(pid), 0) == 0; }

// ---- built-in backends ----

class CsvBackend : public Backend {
 public:
  CsvBackend(const fs::path& dir, const std::string& file, const std::string& header, std::uint64_t seed)
      : data_(dir / file, std::ios::trunc), log_(dir / "stdout.log", std::ios::app), rng_(seed) {
    if (!data_ || !log_) fail(ErrorCode::LaunchFailure, "cannot open output files in " + dir.string());
    data_ << header << '\n';
  }
  std::optional<int> stop() override {
    data_.close();
    log_.close();
    return std::nullopt;
  }

 protected:
  std::ofstream data_, log_;
  std::mt19937_64 rng_;
};

class PingBackend final : public CsvBackend {
 public:
  PingBackend(const fs::path& dir, const std::string& file, const terminal::PathModel& path, std::uint64_t seed,
              int interval_s)
      : CsvBackend(dir, file, "ts_ms,rtt_ms,lost", seed), path_(path), interval_s_(std::max(1, interval_s)) {}

  void on_tick(UnixMs now, const std::optional<TelemetrySample>& s) override {
    if (ticks_++ % interval_s_ != 0) return;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto hops = s ? path_.probe(*s, rng_) : std::vector<terminal::PathHop>{};
    const bool lost = hops.empty() || u(rng_) < s->pop_drop_rate;
    if (lost) {
      data_ << now << ",,1\n";
    } else {
      data_ << now << ',' << fmt::format("{:.3f}", hops.back().rtt_ms) << ",0\n";
    }
  }

 private:
  terminal::PathModel path_;
  int interval_s_;
  long ticks_ = 0;
};

class TracerouteBackend final : public CsvBackend {
 public:
  TracerouteBackend(const fs::path& dir, const terminal::PathModel& path, std::uint64_t seed, int interval_s)
      : CsvBackend(dir, "traceroute.csv", "ts_ms,hop_index,hop_addr,rtt_ms", seed),
        path_(path),
        interval_s_(std::max(1, interval_s)) {}

  void on_tick(UnixMs now, const std::optional<TelemetrySample>& s) override {
    if (ticks_++ % interval_s_ != 0) return;
    const auto hops = s ? path_.probe(*s, rng_) : std::vector<terminal::PathHop>{};
    if (hops.empty()) log_ << now << " no route to " << path_.destination << '\n';
    for (const auto& h : hops) data_ << now << ',' << h.index << ',' << h.addr << ',' << fmt::format("{:.3f}", h.rtt_ms) << '\n';
  }

 private:
  terminal::PathModel path_;
  int interval_s_;
  long ticks_ = 0;
};

class BulkFlowBackend final : public CsvBackend {
 public:
  BulkFlowBackend(const fs::path& dir, const terminal::PathModel& path, std::uint64_t seed, double target_bps,
                  int streams)
      : CsvBackend(dir, "bulk_flow.csv", "ts_ms,goodput_bps,rtt_ms,retrans", seed),
        path_(path),
        target_bps_(target_bps),
        streams_(std::max(1, streams)) {}

  void on_tick(UnixMs now, const std::optional<TelemetrySample>& s) override {
    const auto hops = s ? path_.probe(*s, rng_) : std::vector<terminal::PathHop>{};
    if (hops.empty()) {
      rate_ = 0;
      data_ << now << ",0,,0\n";
      return;
    }
    const double rtt = hops.back().rtt_ms;
    const double loss = s->pop_drop_rate;
    rate_ = bulk_goodput_bps(rtt, loss, target_bps_, streams_);
    const double packets = rate_ / (1448.0 * 8.0);
    std::poisson_distribution<long> retrans(packets * loss);
    data_ << now << ',' << std::llround(rate_) << ',' << fmt::format("{:.3f}", rtt) << ',' << retrans(rng_) << '\n';
  }
  std::optional<int> stop() override {
    rate_ = 0;
    return CsvBackend::stop();
  }
  double traffic_bps() const override { return rate_; }

 private:
  terminal::PathModel path_;
  double target_bps_;
  int streams_;
  double rate_ = 0;
};

class ProcessBackend final : public Backend {
 public:
  ProcessBackend(const ExperimentSpec& spec, const fs::path& dir) {
    std::string command = param_string(spec, "command", spec.artifact_ref);
    if (command.empty()) fail(ErrorCode::LaunchFailure, "CUSTOM experiment " + spec.id + " has no command");

    std::vector<std::string> env_store;
    for (char** e = environ; *e; ++e) env_store.emplace_back(*e);
    env_store.push_back("LEOBED_RUN_DIR=" + dir.string());
    env_store.push_back("LEOBED_EXPERIMENT_ID=" + spec.id);
    std::vector<char*> envp;
    for (auto& e : env_store) envp.push_back(e.data());
    envp.push_back(nullptr);
    std::string sh = "/bin/sh", dash_c = "-c";
    std::vector<char*> argv{sh.data(), dash_c.data(), command.data(), nullptr};
    const std::string dir_s = dir.string();
    const std::string log_path = (dir / "stdout.log").string();
    const auto mem_mb = static_cast<rlim_t>(param_double(spec, "memory_limit_mb", 0));
    const auto cpu_s = static_cast<rlim_t>(param_double(spec, "cpu_limit_s", 0));

    int pipefd[2];
    if (::pipe2(pipefd, O_CLOEXEC) != 0) fail(ErrorCode::LaunchFailure, std::string("pipe: ") + std::strerror(errno));
    const pid_t pid = ::fork();
    if (pid < 0) {
      ::close(pipefd[0]);
      ::close(pipefd[1]);
      fail(ErrorCode::LaunchFailure, std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
      // Only async-signal-safe calls from here on.
      ::setpgid(0, 0);
      int err = 0;
      if (::chdir(dir_s.c_str()) != 0) err = errno;
      const int fd = err ? -1 : ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
      if (!err && fd < 0) err = errno;
      if (!err) {
        ::dup2(fd, 1);
        ::dup2(fd, 2);
        const int devnull = ::open("/dev/null", O_RDONLY);
        if (devnull >= 0) ::dup2(devnull, 0);
        rlimit core{0, 0};
        ::setrlimit(RLIMIT_CORE, &core);
        if (mem_mb > 0) {
          rlimit as{mem_mb << 20, mem_mb << 20};
          ::setrlimit(RLIMIT_AS, &as);
        }
        if (cpu_s > 0) {
          rlimit cpu{cpu_s, cpu_s};
          ::setrlimit(RLIMIT_CPU, &cpu);
        }
        ::execve(argv[0], argv.data(), envp.data());
        err = errno;
      }
      [[maybe_unused]] auto n = ::write(pipefd[1], &err, sizeof err);
      ::_exit(127);
    }
    ::close(pipefd[1]);
    int child_err = 0;
    const auto n = ::read(pipefd[0], &child_err, sizeof child_err);
    ::close(pipefd[0]);
    if (n == static_cast<ssize_t>(sizeof child_err)) {
      ::waitpid(pid, nullptr, 0);
      fail(ErrorCode::LaunchFailure, "cannot launch '" + command + "': " + std::strerror(child_err));
    }
    pid_ = pid;
  }
  ~ProcessBackend() override { stop(); }

  void on_tick(UnixMs, const std::optional<TelemetrySample>&) override {}

  std::optional<int> finished() override {
    if (!pid_) return exit_code_;
    int status = 0;
    if (::waitpid(static_cast<pid_t>(pid_), &status, WNOHANG) == pid_) {
      pid_ = 0;
      exit_code_ = decode(status);
    }
    return exit_code_;
  }

  std::optional<int> stop() override {
    if (!pid_) return exit_code_;
    ::kill(-static_cast<pid_t>(pid_), SIGKILL);
    int status = 0;
    ::waitpid(static_cast<pid_t>(pid_), &status, 0);
    pid_ = 0;
    exit_code_ = decode(status);
    return exit_code_;
  }

  long pid() const override { return pid_; }
  void detach() override { pid_ = 0; }

 private:
  static int decode(int status) {
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
    return -1;
  }
  long pid_ = 0;
  std::optional<int> exit_code_;
};

}  // namespace

// ---- terminal access ----

SharedTerminal::SharedTerminal(terminal::TerminalSim sim, std::size_t history)
    : sim_(std::move(sim)), history_cap_(std::max<std::size_t>(history, 1)) {}

std::optional<TelemetrySample> SharedTerminal::sample(UnixMs now_ms) {
  std::lock_guard lock(mu_);
  if (now_ms < sim_.start_ms()) return std::nullopt;
  const UnixMs t = sim_.start_ms() + (now_ms - sim_.start_ms()) / kMsPerSecond * kMsPerSecond;
  if (!history_.empty() && t <= history_.back().ts_ms) {
    for (auto it = history_.rbegin(); it != history_.rend(); ++it) {
      if (it->ts_ms == t) return *it;
      if (it->ts_ms < t) break;
    }
    return std::nullopt;
  }
  history_.push_back(sim_.step(t));
  if (history_.size() > history_cap_) history_.pop_front();
  return history_.back();
}

void SharedTerminal::set_experiment_traffic(const std::string& node_id, double rate_bps, UnixMs from_ms) {
  std::lock_guard lock(mu_);
  node_rates_[node_id] = rate_bps;
  double total = 0;
  for (const auto& [_, r] : node_rates_) total += r;
  sim_.set_experiment_traffic(total, from_ms, terminal::Direction::Up);
}

void SharedTerminal::inject_user_traffic(double rate_bps, UnixMs start_ms, UnixMs duration_ms) {
  std::lock_guard lock(mu_);
  sim_.inject_user_traffic(rate_bps, start_ms, duration_ms, terminal::Direction::Down);
}

std::vector<terminal::SpikeEvent> SharedTerminal::spikes() const {
  std::lock_guard lock(mu_);
  return sim_.spikes();
}

Json SharedTerminal::handle(const Json& request) {
  try {
    const auto type = request.at("type").get<std::string>();
    if (type == "SAMPLE") {
      const auto s = sample(request.at("now_ms").get<UnixMs>());
      return {{"ok", true}, {"sample", s ? Json::parse(terminal::to_json_line(*s)) : Json(nullptr)}};
    }
    if (type == "TRAFFIC") {
      set_experiment_traffic(request.at("node_id").get<std::string>(), request.at("rate_bps").get<double>(),
                             request.at("from_ms").get<UnixMs>());
      return {{"ok", true}};
    }
    if (type == "USER_TRAFFIC") {
      inject_user_traffic(request.at("rate_bps").get<double>(), request.at("start_ms").get<UnixMs>(),
                          request.at("duration_ms").get<UnixMs>());
      return {{"ok", true}};
    }
    fail(ErrorCode::ParseError, "unknown message type '" + type + "'");
  } catch (const std::exception& e) {
    return orchestrator::error_json(e);
  }
}

std::optional<TelemetrySample> RemoteTerminal::sample(UnixMs now_ms) {
  const Json reply = channel_->call({{"type", "SAMPLE"}, {"now_ms", now_ms}});
  if (!reply.value("ok", false)) return std::nullopt;
  if (reply["sample"].is_null()) return std::nullopt;
  return terminal::from_json_line(reply["sample"].dump());
}

void RemoteTerminal::set_experiment_traffic(const std::string& node_id, double rate_bps, UnixMs from_ms) {
  const Json reply =
      channel_->call({{"type", "TRAFFIC"}, {"node_id", node_id}, {"rate_bps", rate_bps}, {"from_ms", from_ms}});
  if (!reply.value("ok", false)) {
    fail(ErrorCode::Unavailable, "terminal rejected traffic update: " + reply.dump());
  }
}

std::string StoreUploader::upload(const fs::path& local_dir, const std::string& experiment_id,
                                  const std::string& node_id, UnixMs slot_ms) {
  store_.store(local_dir, experiment_id, node_id, slot_ms);
  return store_.relative_run_dir(experiment_id, node_id, slot_ms).string();
}

// ---- runs ----

void LocalRun::transition(RunState to, UnixMs now_ms) {
  if (!legal_transition(state, to)) {
    fail(ErrorCode::IllegalTransition, experiment_id + ": " + std::string(to_string(state)) + " -> " +
                                           std::string(to_string(to)));
  }
  state = to;
  if (!is_terminal(to)) unreported.push_back({to, now_ms, rescheduled});
}

Json to_json(const LocalRun& r) {
  Json reports = Json::array();
  for (const auto& u : r.unreported) {
    reports.push_back({{"state", std::string(to_string(u.state))}, {"at_ms", u.at_ms}, {"rescheduled", u.rescheduled}});
  }
  return {{"experiment_id", r.experiment_id},
          {"slot_ms", r.slot_ms},
          {"not_before_ms", r.not_before_ms},
          {"deadline_ms", r.deadline_ms},
          {"duration_ms", r.duration_ms},
          {"spec", to_json(r.spec)},
          {"triggered", r.triggered},
          {"attempt", r.attempt},
          {"state", std::string(to_string(r.state))},
          {"started_ms", opt_json(r.started_ms)},
          {"ended_ms", opt_json(r.ended_ms)},
          {"exit_code", opt_json(r.exit_code)},
          {"reason", r.preemption_reason},
          {"rescheduled", r.rescheduled},
          {"unreported", reports},
          {"uploaded", r.uploaded},
          {"completion_sent", r.completion_sent},
          {"result_path", r.result_path},
          {"upload_failures", r.upload_failures},
          {"next_upload_ms", r.next_upload_ms},
          {"pid", r.pid}};
}

LocalRun local_run_from_json(const Json& j) {
  LocalRun r;
  r.experiment_id = j.at("experiment_id").get<std::string>();
  r.slot_ms = j.at("slot_ms").get<UnixMs>();
  r.not_before_ms = j.at("not_before_ms").get<UnixMs>();
  r.deadline_ms = j.at("deadline_ms").get<UnixMs>();
  r.duration_ms = j.at("duration_ms").get<UnixMs>();
  r.spec = spec_from_json(j.at("spec"));
  r.triggered = j.value("triggered", false);
  r.attempt = j.value("attempt", 0);
  r.state = parse_run_state(j.at("state").get<std::string>());
  r.started_ms = opt_from<UnixMs>(j, "started_ms");
  r.ended_ms = opt_from<UnixMs>(j, "ended_ms");
  r.exit_code = opt_from<int>(j, "exit_code");
  r.preemption_reason = j.value("reason", "");
  r.rescheduled = j.value("rescheduled", false);
  for (const auto& u : j.value("unreported", Json::array())) {
    r.unreported.push_back({parse_run_state(u.at("state").get<std::string>()), u.at("at_ms").get<UnixMs>(),
                            u.value("rescheduled", false)});
  }
  r.uploaded = j.value("uploaded", false);
  r.completion_sent = j.value("completion_sent", false);
  r.result_path = j.value("result_path", "");
  r.upload_failures = j.value("upload_failures", 0);
  r.next_upload_ms = j.value("next_upload_ms", UnixMs{0});
  r.pid = j.value("pid", 0L);
  return r;
}

std::string data_file_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Ping: return "ping.csv";
    case ExperimentKind::Hping: return "hping.csv";
    case ExperimentKind::Traceroute: return "traceroute.csv";
    case ExperimentKind::BulkFlow: return "bulk_flow.csv";
    case ExperimentKind::Custom: return "";
  }
  return "";
}

double bulk_goodput_bps(double rtt_ms, double loss, double target_bps, int streams) {
  if (!(rtt_ms > 0)) return 0;
  const double p = std::max(loss, 1e-6);
  const double per_stream = 1448.0 * 8.0 / (rtt_ms / 1000.0) * std::sqrt(1.5 / p);
  return std::min(target_bps, per_stream * std::max(1, streams));
}

std::unique_ptr<Backend> make_backend(const ExperimentSpec& spec, const fs::path& run_dir,
                                      const terminal::PathModel& path, std::uint64_t seed) {
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) fail(ErrorCode::LaunchFailure, "cannot create " + run_dir.string() + ": " + ec.message());
  terminal::PathModel p = path;
  p.destination = param_string(spec, "destination", p.destination);
  const int interval = static_cast<int>(param_double(spec, "interval_s", 1));
  switch (spec.kind) {
    case ExperimentKind::Ping:
    case ExperimentKind::Hping:
      return std::make_unique<PingBackend>(run_dir, data_file_name(spec.kind), p, seed, interval);
    case ExperimentKind::Traceroute:
      return std::make_unique<TracerouteBackend>(run_dir, p, seed, interval);
    case ExperimentKind::BulkFlow:
      return std::make_unique<BulkFlowBackend>(run_dir, p, seed, param_double(spec, "rate_bps", 40e6),
                                               static_cast<int>(param_double(spec, "streams", 8)));
    case ExperimentKind::Custom:
      return std::make_unique<ProcessBackend>(spec, run_dir);
  }
  fail(ErrorCode::LaunchFailure, "unsupported experiment kind");
}

// ---- agent ----

Agent::Agent(AgentConfig cfg, std::shared_ptr<net::Channel> orchestrator, std::shared_ptr<TerminalLink> terminal,
             std::shared_ptr<Uploader> uploader, std::shared_ptr<const orbital::OrbitalContext> orbital)
    : cfg_(std::move(cfg)),
      orchestrator_(std::move(orchestrator)),
      terminal_(std::move(terminal)),
      uploader_(std::move(uploader)),
      orbital_(std::move(orbital)),
      window_(cfg_.window_capacity),
      differencer_(cfg_.counter_shift_s),
      detector_(cfg_.detector) {
  if (cfg_.node_id.empty()) fail(ErrorCode::InvalidArgument, "agent needs a node id");
  if (cfg_.work_dir.empty()) fail(ErrorCode::InvalidArgument, "agent needs a work directory");
  fs::create_directories(cfg_.work_dir / "runs");
}

Agent::~Agent() {
  std::lock_guard lock(mu_);
  for (auto& [_, b] : backends_) {
    if (abandoned_) {
      b->detach();
    } else {
      b->stop();
    }
  }
  if (!abandoned_ && loaded_) save();
}

void Agent::abandon() {
  std::lock_guard lock(mu_);
  if (loaded_) save();
  abandoned_ = true;
}

void Agent::tick(UnixMs now_ms) {
  poll(now_ms);
  bool due;
  {
    std::lock_guard lock(mu_);
    due = !last_heartbeat_ms_ || now_ms - *last_heartbeat_ms_ >= cfg_.heartbeat_interval_ms;
  }
  if (due) heartbeat(now_ms);
}

void Agent::poll(UnixMs now_ms) {
  std::lock_guard lock(mu_);
  if (abandoned_) return;
  if (!loaded_) load(now_ms);
  ingest(now_ms);
  evaluate_triggers(now_ms);
  supervise(now_ms);
  update_traffic(now_ms);
  save();
}

bool Agent::heartbeat(UnixMs now_ms) {
  Json payload;
  std::map<std::string, std::size_t> sent;
  {
    std::lock_guard lock(mu_);
    if (abandoned_) return false;
    if (!loaded_) load(now_ms);
    Json reports = Json::array();
    for (const auto& r : runs_) {
      for (const auto& u : r.unreported) {
        reports.push_back({{"experiment_id", r.experiment_id},
                           {"slot_ms", r.slot_ms},
                           {"state", std::string(to_string(u.state))},
                           {"at_ms", u.at_ms},
                           {"started_ms", opt_json(r.started_ms)},
                           {"ended_ms", u.state == RunState::Preempted ? opt_json(r.ended_ms) : Json(nullptr)},
                           {"reason", r.preemption_reason},
                           {"rescheduled", u.rescheduled},
                           {"attempt", r.attempt}});
      }
      if (!r.unreported.empty()) sent[run_key(r.experiment_id, r.slot_ms)] = r.unreported.size();
    }
    payload = {{"type", "HEARTBEAT"}, {"node_id", cfg_.node_id}, {"ack_seq", last_seq_}, {"runs", reports}};
  }

  Json reply;
  try {
    reply = orchestrator_->call(payload);
  } catch (const Error& e) {
    spdlog::warn("{}: heartbeat failed: {}", cfg_.node_id, e.what());
    return false;
  }
  if (!reply.value("ok", false)) {
    spdlog::warn("{}: heartbeat rejected: {}", cfg_.node_id, reply.dump());
    return false;
  }

  std::lock_guard lock(mu_);
  last_heartbeat_ms_ = now_ms;
  for (auto& r : runs_) {
    auto it = sent.find(run_key(r.experiment_id, r.slot_ms));
    if (it == sent.end()) continue;
    for (std::size_t i = 0; i < it->second && !r.unreported.empty(); ++i) r.unreported.pop_front();
  }
  for (const auto& a : reply.value("schedules", Json::array())) {
    const auto seq = a.at("seq").get<std::uint64_t>();
    if (seq <= last_seq_) continue;  // already executed; the ack was lost
    try {
      accept_schedule(a, now_ms);
    } catch (const std::exception& e) {
      spdlog::error("{}: dropping schedule seq {}: {}", cfg_.node_id, seq, e.what());
    }
    last_seq_ = seq;
  }
  save();
  return true;
}

void Agent::accept_schedule(const Json& a, UnixMs) {
  ExperimentSpec spec = spec_from_json(a.at("spec"));
  const int attempt = a.value("attempt", 0);
  if (std::find(spec.clients.begin(), spec.clients.end(), cfg_.node_id) == spec.clients.end()) {
    spdlog::info("{}: serving {} ({})", cfg_.node_id, spec.id, to_string(spec.kind));
    return;
  }
  if (spec.trigger) {
    if (bindings_.count(spec.id)) return;
    auto b = spec.trigger->binding(spec.id);
    triggers::TriggerGate gate(b);
    bindings_.emplace(spec.id, Binding{spec, std::move(b), std::move(gate)});
    spdlog::info("{}: trigger binding {} '{}'", cfg_.node_id, spec.id, spec.trigger->trigger);
    return;
  }
  for (const auto& w : spec.windows) {
    if (find(spec.id, w.start_ms)) continue;
    LocalRun r;
    r.experiment_id = spec.id;
    r.slot_ms = w.start_ms;
    r.not_before_ms = w.start_ms;
    r.deadline_ms = w.end_ms;
    r.duration_ms = w.duration_ms();
    r.spec = spec;
    r.attempt = attempt;
    runs_.push_back(std::move(r));
  }
}

void Agent::ingest(UnixMs now_ms) {
  fresh_ = false;
  std::optional<TelemetrySample> s;
  try {
    s = terminal_->sample(now_ms);
  } catch (const Error& e) {
    spdlog::warn("{}: telemetry unavailable: {}", cfg_.node_id, e.what());
    return;
  }
  if (!s || (last_sample_ts_ && s->ts_ms <= *last_sample_ts_)) return;
  last_sample_ts_ = s->ts_ms;
  current_ = s;
  fresh_ = true;
  window_.push(*s);
  if (!cfg_.scavenger) return;

  const auto rate_at = [this](UnixMs t) {
    auto it = own_rate_.upper_bound(t);
    if (it == own_rate_.begin()) return 0.0;
    return std::prev(it)->second;
  };
  auto d = differencer_.push(*s, rate_at);
  if (!d) return;
  // Our own traffic switching on or off moves the terminal-side header overhead; fold
  // that step into the offset instead of treating it as user traffic.
  if (own_edges_.count(d->ts_ms)) offset_bps_ += d->diff_change_bps;
  d->diff_bps -= offset_bps_;
  if (auto e = detector_.push(*d)) on_detector(*e, now_ms);

  const UnixMs horizon = now_ms - 600 * kMsPerSecond;
  while (!own_edges_.empty() && *own_edges_.begin() < horizon) own_edges_.erase(own_edges_.begin());
  while (own_rate_.size() > 1 && std::next(own_rate_.begin())->first < horizon) own_rate_.erase(own_rate_.begin());
}

void Agent::on_detector(const telemetry::DetectorEvent& e, UnixMs now_ms) {
  events_.push_back(e);
  user_traffic_ = e.user_traffic;
  if (e.user_traffic) {
    for (auto& r : runs_) {
      if (r.state != RunState::Running || r.overhead() != OverheadClass::Overhead) continue;
      const auto key = run_key(r.experiment_id, r.slot_ms);
      if (auto it = backends_.find(key); it != backends_.end()) {
        it->second->stop();
        backends_.erase(it);
      }
      r.preemption_reason = "user traffic";
      r.ended_ms = now_ms;
      r.rescheduled = cfg_.local_reschedule;
      r.pid = 0;
      r.transition(RunState::Preempted, now_ms);
      preemptions_.push_back({r.experiment_id, r.slot_ms, now_ms});
      spdlog::info("{}: preempted {} (user traffic)", cfg_.node_id, r.experiment_id);
    }
    return;
  }
  if (!cfg_.local_reschedule) return;
  for (auto& r : runs_) {
    if (r.state != RunState::Preempted || !r.rescheduled) continue;
    r.transition(RunState::Pending, now_ms);
    r.attempt += 1;
    r.not_before_ms = now_ms;
    r.deadline_ms = now_ms + r.duration_ms;
    r.started_ms.reset();
    r.ended_ms.reset();
    spdlog::info("{}: rescheduled {} at {}", cfg_.node_id, r.experiment_id, iso8601_utc(now_ms));
  }
}

void Agent::evaluate_triggers(UnixMs now_ms) {
  if (!fresh_ || bindings_.empty()) return;
  triggers::EvalContext ctx{&window_, orbital_.get(), nullptr, current_->ts_ms};
  for (auto& [id, b] : bindings_) {
    const auto verdict = triggers::evaluate(*b.binding.expr, ctx);
    LocalRun* active = nullptr;
    for (auto& r : runs_) {
      if (r.triggered && r.experiment_id == id && r.state == RunState::Running) active = &r;
    }
    if (verdict == triggers::Verdict::Hold && active && b.binding.stop_on_hold) {
      finish(*active, RunState::Completed, now_ms, 0, "trigger released");
      continue;
    }
    if (verdict != triggers::Verdict::Fire || active || !b.gate.may_fire(now_ms)) continue;
    if (b.spec.overhead == OverheadClass::Overhead && (overhead_running() || user_traffic_)) {
      ++deferrals_;
      spdlog::debug("{}: deferred trigger {} (overhead busy)", cfg_.node_id, id);
      continue;
    }
    LocalRun r;
    r.experiment_id = id;
    r.slot_ms = now_ms;
    r.not_before_ms = now_ms;
    r.duration_ms = static_cast<UnixMs>(std::llround(b.binding.max_runtime_s * 1000.0));
    r.deadline_ms = now_ms + r.duration_ms;
    r.spec = b.spec;
    r.triggered = true;
    b.gate.record_fire(now_ms);
    runs_.push_back(std::move(r));
    start(runs_.back(), now_ms);
  }
}

void Agent::supervise(UnixMs now_ms) {
  const UnixMs second = floor_second(now_ms);
  const bool new_second = !last_tick_s_ || second > *last_tick_s_;
  last_tick_s_ = second;
  for (auto& r : runs_) {
    if (r.state == RunState::Pending) {
      if (now_ms >= r.deadline_ms) {
        finish(r, RunState::Failed, now_ms, std::nullopt, "window closed before start");
      } else if (now_ms >= r.not_before_ms &&
                 !(r.overhead() == OverheadClass::Overhead && (overhead_running() || user_traffic_))) {
        start(r, now_ms);
      }
    }
    if (r.state != RunState::Running) continue;
    auto it = backends_.find(run_key(r.experiment_id, r.slot_ms));
    if (it == backends_.end()) continue;
    Backend& b = *it->second;
    if (now_ms >= r.deadline_ms) {
      const bool custom = r.spec.kind == ExperimentKind::Custom;
      auto code = b.finished();
      if (code) {
        finish(r, *code == 0 ? RunState::Completed : RunState::Failed, now_ms, code);
      } else {
        finish(r, custom ? RunState::Killed : RunState::Completed, now_ms, custom ? b.stop() : std::optional<int>(0),
               custom ? "wall-clock limit" : "");
      }
      continue;
    }
    if (new_second) b.on_tick(now_ms, current_ && current_->ts_ms == second ? current_ : std::nullopt);
    if (auto code = b.finished()) finish(r, *code == 0 ? RunState::Completed : RunState::Failed, now_ms, code);
  }
  for (auto& r : runs_) {
    if (is_terminal(r.state) && !r.completion_sent) deliver(r, now_ms);
  }
}

void Agent::start(LocalRun& r, UnixMs now_ms) {
  r.started_ms = now_ms;
  r.transition(RunState::Running, now_ms);
  const auto dir = run_dir(r);
  const std::uint64_t seed =
      fnv1a(r.experiment_id + "/" + std::to_string(r.slot_ms) + "/" + std::to_string(r.attempt), cfg_.seed);
  try {
    fs::remove_all(dir);
    auto backend = make_backend(r.spec, dir, cfg_.path, seed);
    r.pid = backend->pid();
    backends_[run_key(r.experiment_id, r.slot_ms)] = std::move(backend);
    std::ofstream(dir / "stdout.log", std::ios::app)
        << iso8601_utc(now_ms) << " start " << r.experiment_id << " attempt " << r.attempt << '\n';
    spdlog::info("{}: started {} ({})", cfg_.node_id, r.experiment_id, to_string(r.spec.kind));
  } catch (const Error& e) {
    spdlog::error("{}: launch of {} failed: {}", cfg_.node_id, r.experiment_id, e.what());
    finish(r, RunState::Failed, now_ms, std::nullopt, e.what());
  }
}

void Agent::finish(LocalRun& r, RunState state, UnixMs now_ms, std::optional<int> exit_code, std::string reason) {
  const auto key = run_key(r.experiment_id, r.slot_ms);
  if (auto it = backends_.find(key); it != backends_.end()) {
    auto code = it->second->stop();
    if (!exit_code) exit_code = code;
    backends_.erase(it);
  }
  r.transition(state, now_ms);
  r.ended_ms = now_ms;
  r.exit_code = exit_code;
  r.pid = 0;
  if (!reason.empty()) r.preemption_reason = std::move(reason);
  r.next_upload_ms = now_ms;

  const auto dir = run_dir(r);
  fs::create_directories(dir);
  std::ofstream(dir / "stdout.log", std::ios::app)
      << iso8601_utc(now_ms) << " end " << to_string(state) << (r.preemption_reason.empty() ? "" : " (" + r.preemption_reason + ")")
      << '\n';
  Json files = Json::array();
  for (const auto& f : fs::directory_iterator(dir)) {
    if (f.is_regular_file()) files.push_back(f.path().filename().string());
  }
  files.push_back("manifest.json");
  const Json manifest = {{"experiment_id", r.experiment_id},
                         {"node_id", cfg_.node_id},
                         {"kind", std::string(to_string(r.spec.kind))},
                         {"overhead", std::string(to_string(r.spec.overhead))},
                         {"slot_ms", r.slot_ms},
                         {"run_start", iso8601_utc(r.slot_ms)},
                         {"state", std::string(to_string(r.state))},
                         {"started_ms", opt_json(r.started_ms)},
                         {"ended_ms", opt_json(r.ended_ms)},
                         {"exit_code", opt_json(r.exit_code)},
                         {"attempt", r.attempt},
                         {"triggered", r.triggered},
                         {"reason", r.preemption_reason},
                         {"files", files}};
  write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  spdlog::info("{}: {} {}", cfg_.node_id, r.experiment_id, to_string(state));
}

void Agent::deliver(LocalRun& r, UnixMs now_ms) {
  if (!r.uploaded) {
    if (now_ms < r.next_upload_ms) return;
    const auto dir = run_dir(r);
    try {
      r.result_path = uploader_->upload(dir, r.experiment_id, cfg_.node_id, r.slot_ms);
      r.uploaded = true;
      std::error_code ec;
      fs::remove_all(dir, ec);
      // Drop empty per-experiment directories as well.
      if (fs::is_empty(dir.parent_path(), ec)) fs::remove(dir.parent_path(), ec);
    } catch (const Error& e) {
      r.upload_failures += 1;
      const UnixMs backoff =
          std::min(cfg_.upload_backoff_max_ms, cfg_.upload_backoff_ms << std::min(r.upload_failures - 1, 20));
      r.next_upload_ms = now_ms + backoff;
      spdlog::warn("{}: upload of {} failed ({}), retry in {} ms", cfg_.node_id, r.experiment_id, e.what(), backoff);
      return;
    }
  }
  const Json manifest = {{"slot_ms", r.slot_ms},
                         {"state", std::string(to_string(r.state))},
                         {"started_ms", opt_json(r.started_ms)},
                         {"ended_ms", opt_json(r.ended_ms)},
                         {"exit_code", opt_json(r.exit_code)},
                         {"path", r.result_path}};
  try {
    const Json reply = orchestrator_->call(
        {{"type", "COMPLETE"}, {"experiment_id", r.experiment_id}, {"node_id", cfg_.node_id}, {"manifest", manifest}});
    if (!reply.value("ok", false)) {
      spdlog::warn("{}: completion of {} rejected: {}", cfg_.node_id, r.experiment_id, reply.dump());
    }
    r.completion_sent = true;
  } catch (const Error& e) {
    spdlog::warn("{}: completion of {} not delivered: {}", cfg_.node_id, r.experiment_id, e.what());
  }
}

void Agent::update_traffic(UnixMs now_ms) {
  double total = 0;
  for (const auto& [_, b] : backends_) total += b->traffic_bps();
  const UnixMs t = floor_second(now_ms);
  if (total != last_rate_) {
    try {
      terminal_->set_experiment_traffic(cfg_.node_id, total, t);
    } catch (const Error& e) {
      spdlog::warn("{}: cannot report traffic to terminal: {}", cfg_.node_id, e.what());
    }
    if ((total > 0) != (last_rate_ > 0)) own_edges_.insert(t);
    last_rate_ = total;
  }
  own_rate_[t] = total;
}

bool Agent::overhead_running() const {
  return std::any_of(runs_.begin(), runs_.end(), [](const LocalRun& r) {
    return r.state == RunState::Running && r.overhead() == OverheadClass::Overhead;
  });
}

fs::path Agent::run_dir(const LocalRun& r) const {
  return cfg_.work_dir / "runs" / r.experiment_id / iso8601_utc(r.slot_ms);
}

LocalRun* Agent::find(const std::string& experiment_id, UnixMs slot_ms) {
  for (auto& r : runs_) {
    if (r.experiment_id == experiment_id && r.slot_ms == slot_ms) return &r;
  }
  return nullptr;
}

void Agent::save() const {
  Json runs = Json::array();
  for (const auto& r : runs_) {
    // Fully delivered runs are history; keep the file small.
    if (r.completion_sent) continue;
    Json j = to_json(r);
    if (auto it = backends_.find(run_key(r.experiment_id, r.slot_ms)); it != backends_.end()) j["pid"] = it->second->pid();
    runs.push_back(std::move(j));
  }
  Json bindings = Json::array();
  for (const auto& [id, b] : bindings_) {
    bindings.push_back({{"spec", to_json(b.spec)},
                        {"fires", Json(std::vector<UnixMs>(b.gate.recent_fires().begin(), b.gate.recent_fires().end()))}});
  }
  const Json state = {{"node_id", cfg_.node_id}, {"last_seq", last_seq_}, {"runs", runs}, {"bindings", bindings}};
  const std::string text = state.dump();
  if (text == saved_) return;
  const auto path = cfg_.work_dir / "state.json";
  write_file((cfg_.work_dir / "state.json.tmp").string(), text);
  fs::rename(cfg_.work_dir / "state.json.tmp", path);
  saved_ = text;
}

void Agent::load(UnixMs now_ms) {
  loaded_ = true;
  const auto path = cfg_.work_dir / "state.json";
  if (!fs::exists(path)) return;
  const Json state = Json::parse(read_file(path.string()));
  last_seq_ = state.value("last_seq", std::uint64_t{0});
  for (const auto& b : state.value("bindings", Json::array())) {
    ExperimentSpec spec = spec_from_json(b.at("spec"));
    auto binding = spec.trigger->binding(spec.id);
    triggers::TriggerGate gate(binding);
    for (const auto& t : b.value("fires", Json::array())) gate.record_fire(t.get<UnixMs>());
    bindings_.emplace(spec.id, Binding{spec, std::move(binding), std::move(gate)});
  }
  for (const auto& j : state.value("runs", Json::array())) {
    LocalRun r = local_run_from_json(j);
    if (r.state == RunState::Running) {
      if (is_child_alive(r.pid)) {
        spdlog::warn("{}: killing orphaned child {} of {}", cfg_.node_id, r.pid, r.experiment_id);
        ::kill(-static_cast<pid_t>(r.pid), SIGKILL);
        ::kill(static_cast<pid_t>(r.pid), SIGKILL);
        ::waitpid(static_cast<pid_t>(r.pid), nullptr, 0);
      }
      runs_.push_back(std::move(r));
      finish(runs_.back(), RunState::Failed, now_ms, std::nullopt, "orphaned by agent restart");
      continue;
    }
    runs_.push_back(std::move(r));
  }
}

std::vector<LocalRun> Agent::runs() const {
  std::lock_guard lock(mu_);
  return runs_;
}

std::optional<LocalRun> Agent::run(const std::string& experiment_id, UnixMs slot_ms) const {
  std::lock_guard lock(mu_);
  for (const auto& r : runs_) {
    if (r.experiment_id == experiment_id && r.slot_ms == slot_ms) return r;
  }
  return std::nullopt;
}

std::vector<PreemptionEvent> Agent::preemptions() const {
  std::lock_guard lock(mu_);
  return preemptions_;
}

std::vector<telemetry::DetectorEvent> Agent::detector_events() const {
  std::lock_guard lock(mu_);
  return events_;
}

std::vector<std::string> Agent::bindings() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : bindings_) out.push_back(id);
  return out;
}

bool Agent::user_traffic() const {
  std::lock_guard lock(mu_);
  return user_traffic_;
}

std::uint64_t Agent::last_seq() const {
  std::lock_guard lock(mu_);
  return last_seq_;
}

std::size_t Agent::deferrals() const {
  std::lock_guard lock(mu_);
  return deferrals_;
}

// ---- daemon ----

AgentDaemon::AgentDaemon(Agent& agent, double speedup, UnixMs origin_ms)
    : agent_(agent), speedup_(speedup > 0 ? speedup : 1.0), origin_ms_(origin_ms) {}

AgentDaemon::~AgentDaemon() { stop(); }

UnixMs AgentDaemon::now() const {
  const auto real = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - real_origin_).count();
  return origin_ms_ + static_cast<UnixMs>(real * speedup_);
}

void AgentDaemon::start() {
  if (running_.exchange(true)) return;
  real_origin_ = std::chrono::steady_clock::now();
  if (origin_ms_ == 0) {
    origin_ms_ = std::chrono::duration_cast<std::chrono::milliseconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
  }
  const auto sleep_sim = [this](UnixMs sim_ms) {
    const auto real = std::chrono::duration<double, std::milli>(static_cast<double>(sim_ms) / speedup_);
    const auto until = std::chrono::steady_clock::now() + real;
    while (running_ && std::chrono::steady_clock::now() < until) {
      std::this_thread::sleep_for(std::min<std::chrono::duration<double, std::milli>>(
          until - std::chrono::steady_clock::now(), std::chrono::milliseconds(20)));
    }
  };
  poll_thread_ = std::thread([this, sleep_sim] {
    while (running_) {
      const UnixMs t = now();
      try {
        agent_.poll(t);
      } catch (const std::exception& e) {
        spdlog::error("{}: poll failed: {}", agent_.config().node_id, e.what());
      }
      sleep_sim(kMsPerSecond - ((t % kMsPerSecond) + kMsPerSecond) % kMsPerSecond);
    }
  });
  heartbeat_thread_ = std::thread([this, sleep_sim] {
    while (running_) {
      try {
        agent_.heartbeat(now());
      } catch (const std::exception& e) {
        spdlog::error("{}: heartbeat failed: {}", agent_.config().node_id, e.what());
      }
      sleep_sim(agent_.config().heartbeat_interval_ms);
    }
  });
}

void AgentDaemon::stop() {
  if (!running_.exchange(false)) return;
  if (poll_thread_.joinable()) poll_thread_.join();
  if (heartbeat_thread_.joinable()) heartbeat_thread_.join();
}

}  // namespace leobed::agent

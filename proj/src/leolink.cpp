#include "leobed/leolink.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <queue>
#include <random>

#include <fmt/format.h>

#include "leobed/error.hpp"

namespace leobed::leolink {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMssBytes = kMss;
constexpr double kInitCwnd = 10 * kMssBytes;
constexpr double kMinCwnd = 4 * kMssBytes;

double fmt_check(double v, const char* what) {
  if (!std::isfinite(v)) fail(ErrorCode::ParseError, std::string("non-finite ") + what);
  return v;
}

}  // namespace

// ---- profiles ----

void LinkProfile::validate() const {
  if (rows.empty()) fail(ErrorCode::InvalidArgument, "link profile has no rows");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (i > 0 && r.ts_ms <= rows[i - 1].ts_ms) fail(ErrorCode::InvalidArgument, "profile ts must strictly increase");
    if (!(r.owd_ms > 0)) fail(ErrorCode::InvalidArgument, "profile owd must be positive");
    if (!(r.capacity_bps >= 0)) fail(ErrorCode::InvalidArgument, "profile capacity must be >= 0");
    if (!(r.loss_prob >= 0 && r.loss_prob <= 0.1)) fail(ErrorCode::InvalidArgument, "profile loss must be in [0, 0.1]");
  }
}

double LinkProfile::covered_s() const {
  if (rows.empty()) return 0;
  const UnixMs last_len = rows.size() > 1 ? rows.back().ts_ms - rows[rows.size() - 2].ts_ms : 1000;
  return static_cast<double>(rows.back().ts_ms + last_len - rows.front().ts_ms) / 1000.0;
}

const ProfileRow& LinkProfile::at(double t_s) const {
  const double ms = static_cast<double>(rows.front().ts_ms) + t_s * 1000.0;
  const auto it = std::upper_bound(rows.begin(), rows.end(), ms,
                                   [](double v, const ProfileRow& r) { return v < static_cast<double>(r.ts_ms); });
  return it == rows.begin() ? rows.front() : *(it - 1);
}

double LinkProfile::mean_capacity_bps() const {
  double s = 0;
  for (const auto& r : rows) s += r.capacity_bps;
  return rows.empty() ? 0 : s / static_cast<double>(rows.size());
}

double LinkProfile::mean_owd_ms() const {
  double s = 0;
  for (const auto& r : rows) s += r.owd_ms;
  return rows.empty() ? 0 : s / static_cast<double>(rows.size());
}

std::uint64_t LinkProfile::effective_buffer() const {
  if (buffer_bytes > 0) return buffer_bytes;
  const double bdp = mean_capacity_bps() / 8.0 * 2.0 * mean_owd_ms() / 1000.0;
  return std::max<std::uint64_t>(static_cast<std::uint64_t>(bdp), 4 * kMss);
}

LinkProfile parse_profile_csv(std::string_view text) {
  const auto t = parse_csv(text);
  const auto c_ts = t.column("ts_ms"), c_owd = t.column("owd_ms"), c_cap = t.column("capacity_bps"),
             c_loss = t.column("loss_prob");
  LinkProfile p;
  for (const auto& row : t.rows) {
    if (row.size() <= std::max({c_ts, c_owd, c_cap, c_loss})) fail(ErrorCode::ParseError, "short profile row");
    try {
      ProfileRow r;
      r.ts_ms = std::stoll(row[c_ts]);
      r.owd_ms = fmt_check(std::stod(row[c_owd]), "owd");
      r.capacity_bps = fmt_check(std::stod(row[c_cap]), "capacity");
      r.loss_prob = fmt_check(std::stod(row[c_loss]), "loss");
      p.rows.push_back(r);
    } catch (const std::invalid_argument&) {
      fail(ErrorCode::ParseError, "bad number in profile row");
    } catch (const std::out_of_range&) {
      fail(ErrorCode::ParseError, "number out of range in profile row");
    }
  }
  p.validate();
  return p;
}

LinkProfile read_profile_csv(const std::string& path) { return parse_profile_csv(read_file(path)); }

void write_profile_csv(std::ostream& out, const LinkProfile& p) {
  out << "ts_ms,owd_ms,capacity_bps,loss_prob\n";
  for (const auto& r : p.rows) {
    out << r.ts_ms << ',' << fmt::format("{:.4f}", r.owd_ms) << ',' << fmt::format("{:.0f}", r.capacity_bps) << ','
        << fmt::format("{:.6f}", r.loss_prob) << '\n';
  }
}

LinkProfile constant_profile(double owd_ms, double capacity_bps, double loss_prob, double duration_s) {
  LinkProfile p;
  const auto n = std::max<long>(1, static_cast<long>(std::ceil(duration_s)));
  for (long i = 0; i < n; ++i) p.rows.push_back({i * 1000, owd_ms, capacity_bps, loss_prob});
  p.validate();
  return p;
}

LinkProfile synthetic_leo_profile(const SyntheticLeoConfig& cfg, std::uint64_t seed) {
  if (cfg.slot_s < 1 || !(cfg.duration_s > 0)) fail(ErrorCode::InvalidArgument, "bad synthetic profile config");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> owd(cfg.owd_lo_ms, cfg.owd_hi_ms), cap(cfg.capacity_lo_bps, cfg.capacity_hi_bps),
      loss(cfg.loss_lo, cfg.loss_hi), mult(cfg.spike_mult_lo, cfg.spike_mult_hi), jitter(-0.5, 0.5);
  std::bernoulli_distribution spike(cfg.p_spike);
  LinkProfile p;
  const auto n = static_cast<long>(std::ceil(cfg.duration_s));
  double slot_owd = 0, slot_cap = 0, slot_loss = 0, slot_mult = 1;
  for (long i = 0; i < n; ++i) {
    if (i % cfg.slot_s == 0) {
      slot_owd = owd(rng);
      slot_cap = cap(rng);
      slot_loss = loss(rng);
      slot_mult = spike(rng) ? mult(rng) : 1.0;
    }
    p.rows.push_back({i * 1000, std::max(1.0, slot_owd * slot_mult + jitter(rng)), slot_cap,
                      std::clamp(slot_loss, 0.0, 0.1)});
  }
  p.validate();
  return p;
}

LinkProfile profile_from_telemetry(const std::vector<terminal::TelemetrySample>& samples,
                                   const TelemetryProfileConfig& cfg) {
  if (samples.empty()) fail(ErrorCode::EmptyInput, "no telemetry samples");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> eps(0.0, 1.0);
  LinkProfile p;
  double walk = 0, last_owd = 20.0;
  const double phi = 0.9;
  for (const auto& s : samples) {
    walk = phi * walk + std::sqrt(1 - phi * phi) * eps(rng);
    ProfileRow r;
    r.ts_ms = s.ts_ms;
    if (s.pop_latency_ms) {
      last_owd = *s.pop_latency_ms / 2.0 + cfg.extra_owd_ms;
      r.capacity_bps = std::max(0.0, cfg.capacity_bps * (1.0 + cfg.capacity_jitter * walk));
    } else {
      r.capacity_bps = 0;
    }
    r.owd_ms = last_owd;
    r.loss_prob = std::clamp(s.pop_drop_rate, 0.0, 0.1);
    p.rows.push_back(r);
  }
  p.validate();
  return p;
}

// ---- congestion control ----

std::string_view to_string(CcKind k) {
  switch (k) {
    case CcKind::Reno: return "reno";
    case CcKind::Cubic: return "cubic";
    case CcKind::Bbr2: return "bbr2";
  }
  return "?";
}

CcKind parse_cc_kind(std::string_view s) {
  if (s == "reno" || s == "newreno") return CcKind::Reno;
  if (s == "cubic") return CcKind::Cubic;
  if (s == "bbr2" || s == "bbrv2" || s == "bbr") return CcKind::Bbr2;
  fail(ErrorCode::InvalidArgument, "unknown congestion control '" + std::string(s) + "'");
}

void CcParams::validate() const {
  if (!(probe_rtt_win_ms > 0)) fail(ErrorCode::InvalidArgument, "alpha (probe_rtt_win_ms) must be positive");
  if (!(loss_thresh > 0 && loss_thresh < 0.5)) fail(ErrorCode::InvalidArgument, "beta (loss_thresh) must be in (0, 0.5)");
}

std::string_view to_string(BbrState s) {
  switch (s) {
    case BbrState::Startup: return "STARTUP";
    case BbrState::Drain: return "DRAIN";
    case BbrState::ProbeBwDown: return "PROBE_BW_DOWN";
    case BbrState::ProbeBwCruise: return "PROBE_BW_CRUISE";
    case BbrState::ProbeBwUp: return "PROBE_BW_UP";
    case BbrState::ProbeRtt: return "PROBE_RTT";
  }
  return "?";
}

double FlowStats::mean_tput_after(double skip_s) const {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : seconds) {
    if (r.second < skip_s) continue;
    s += r.goodput_bps;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0;
}

namespace {

struct AckSample {
  double now = 0;
  double rtt_s = 0;
  double srtt_s = 0;
  double acked_bytes = 0;
  double rate_bps = 0;  // 0 when no valid sample
  double inflight = 0;
  bool round_start = false;
};

class Cc {
 public:
  virtual ~Cc() = default;
  virtual void on_ack(const AckSample& s) = 0;
  virtual void on_loss(double now, double bytes, double sent_s, double inflight) = 0;
  virtual void on_rto(double now) = 0;
  virtual double cwnd() const = 0;
  virtual double pacing_bps() const { return 0; }  // 0: ack-clocked bursts
};

class Reno final : public Cc {
 public:
  void on_ack(const AckSample& s) override {
    if (cwnd_ < ssthresh_) {
      cwnd_ += s.acked_bytes;
    } else {
      cwnd_ += kMssBytes * s.acked_bytes / cwnd_;
    }
  }
  void on_loss(double now, double, double sent_s, double) override {
    if (sent_s <= recovery_) return;
    recovery_ = now;
    cwnd_ = std::max(2 * kMssBytes, cwnd_ / 2);
    ssthresh_ = cwnd_;
  }
  void on_rto(double now) override {
    ssthresh_ = std::max(2 * kMssBytes, cwnd_ / 2);
    cwnd_ = kMssBytes;
    recovery_ = now;
  }
  double cwnd() const override { return cwnd_; }

 private:
  double cwnd_ = kInitCwnd, ssthresh_ = kInf, recovery_ = -1;
};

class Cubic final : public Cc {
 public:
  void on_ack(const AckSample& s) override {
    min_rtt_ = std::min(min_rtt_, s.rtt_s);
    if (cwnd_ < ssthresh_) {
      cwnd_ += s.acked_bytes;
      return;
    }
    if (epoch_ < 0) {
      epoch_ = s.now;
      w_est_ = cwnd_;
      if (cwnd_ < w_max_) {
        k_ = std::cbrt((w_max_ - cwnd_) / kMssBytes / kC);
        origin_ = w_max_;
      } else {
        k_ = 0;
        origin_ = cwnd_;
      }
    }
    const double t = s.now - epoch_ + (std::isfinite(min_rtt_) ? min_rtt_ : 0);
    const double target = origin_ + kC * std::pow(t - k_, 3) * kMssBytes;
    if (target > cwnd_) {
      cwnd_ += (target - cwnd_) * s.acked_bytes / cwnd_;
    } else {
      cwnd_ += 0.01 * kMssBytes * s.acked_bytes / cwnd_;
    }
    w_est_ += 3 * (1 - kBeta) / (1 + kBeta) * kMssBytes * s.acked_bytes / cwnd_;
    if (w_est_ > cwnd_) cwnd_ += (w_est_ - cwnd_) * s.acked_bytes / cwnd_;
  }
  void on_loss(double now, double, double sent_s, double) override {
    if (sent_s <= recovery_) return;
    recovery_ = now;
    epoch_ = -1;
    w_max_ = (cwnd_ < w_max_) ? cwnd_ * (1 + kBeta) / 2 : cwnd_;
    cwnd_ = std::max(2 * kMssBytes, cwnd_ * kBeta);
    ssthresh_ = cwnd_;
  }
  void on_rto(double now) override {
    ssthresh_ = std::max(2 * kMssBytes, cwnd_ * kBeta);
    w_max_ = cwnd_;
    cwnd_ = kMssBytes;
    epoch_ = -1;
    recovery_ = now;
  }
  double cwnd() const override { return cwnd_; }

 private:
  static constexpr double kC = 0.4, kBeta = 0.7;
  double cwnd_ = kInitCwnd, ssthresh_ = kInf, recovery_ = -1;
  double epoch_ = -1, k_ = 0, origin_ = 0, w_max_ = 0, w_est_ = 0, min_rtt_ = kInf;
};

// Reduced BBRv2: windowed max bandwidth, min RTT refreshed by PROBE_RTT every alpha,
// gain cycle DOWN / CRUISE / UP, per-round loss response and UP abort above beta.
class Bbr2 final : public Cc {
 public:
  Bbr2(const CcParams& p, double start, FlowStats& stats, std::uint64_t seed)
      : p_(p), next_probe_rtt_(start + p.probe_rtt_win_ms / 1000.0), round_start_t_(start), stats_(stats),
        rng_(seed) {}

  void on_ack(const AckSample& s) override {
    inflight_ = s.inflight;
    min_rtt_ = std::min(min_rtt_, s.rtt_s);
    if (state_ == BbrState::ProbeRtt) probe_min_ = std::min(probe_min_, s.rtt_s);
    if (s.round_start) end_round(s.now);
    delivered_round_ += s.acked_bytes;
    if (s.rate_bps > 0) update_bw(s.rate_bps);

    if (state_ != BbrState::ProbeRtt && s.now >= next_probe_rtt_) {
      state_ = BbrState::ProbeRtt;
      next_probe_rtt_ = s.now + p_.probe_rtt_win_ms / 1000.0;
      probe_min_ = s.rtt_s;
      probe_exit_ = -1;
      stats_.probe_rtt_entries_s.push_back(s.now);
      stats_.srtt_at_probe_rtt_ms.push_back(s.srtt_s * 1000.0);
    }
    advance(s);
    if (state_ == BbrState::Startup && !full_) cwnd_ += s.acked_bytes;
    update_control();
  }

  void on_loss(double now, double bytes, double, double inflight) override {
    lost_round_ += bytes;
    if (state_ == BbrState::ProbeBwUp && loss_too_high()) {
      inflight_hi_ = std::max({kMinCwnd, inflight + bytes, kLossBeta * bdp()});
      enter(BbrState::ProbeBwDown, now);
      update_control();
    }
  }

  void on_rto(double) override {}
  double cwnd() const override { return cwnd_; }
  double pacing_bps() const override { return pacing_; }

 private:
  static constexpr double kStartupGain = 2.885;
  static constexpr double kLossBeta = 0.7;
  static constexpr double kProbeWaitLo = 2.0, kProbeWaitHi = 3.0;
  static constexpr int kBwWindow = 10;

  double bdp() const {
    if (bw_ <= 0 || !std::isfinite(min_rtt_)) return kInitCwnd;
    return bw_ / 8.0 * min_rtt_;
  }

  bool loss_too_high() const {
    const double total = lost_round_ + delivered_round_;
    return total >= 10 * kMssBytes && lost_round_ > p_.loss_thresh * total;
  }

  void update_bw(double rate) {
    const auto slot = static_cast<std::size_t>(round_ % kBwWindow);
    if (bw_round_[slot] != round_ || !bw_seen_[slot]) {
      bw_round_[slot] = round_;
      bw_seen_[slot] = true;
      bw_slot_[slot] = rate;
    } else {
      bw_slot_[slot] = std::max(bw_slot_[slot], rate);
    }
    bw_ = 0;
    for (std::size_t i = 0; i < kBwWindow; ++i) {
      if (bw_seen_[i] && bw_round_[i] + kBwWindow > round_) bw_ = std::max(bw_, bw_slot_[i]);
    }
  }

  void enter(BbrState s, double now) {
    // The next UP is scheduled when a probe ends (or startup drains); PROBE_RTT keeps it.
    if (s == BbrState::ProbeBwDown && (state_ == BbrState::ProbeBwUp || state_ == BbrState::Drain)) {
      std::uniform_real_distribution<double> wait(kProbeWaitLo, kProbeWaitHi);
      probe_at_ = now + wait(rng_);
    }
    if (s == BbrState::ProbeBwUp) up_growth_ = kMssBytes;
    state_ = s;
    phase_rounds_ = 0;
  }

  void end_round(double now) {
    const double total = lost_round_ + delivered_round_;
    const bool lossy = loss_too_high();
    if (total >= 10 * kMssBytes) loss_ewma_ = 0.75 * loss_ewma_ + 0.25 * lost_round_ / total;
    if (state_ == BbrState::Startup) {
      if (bw_ >= full_bw_ * 1.25) {
        full_bw_ = bw_;
        full_cnt_ = 0;
      } else {
        ++full_cnt_;
      }
      if (full_cnt_ >= 3 || (lossy && lost_round_ >= 8 * kMssBytes)) {
        full_ = true;
        if (lossy) inflight_hi_ = std::max(bdp(), inflight_);
        enter(BbrState::Drain, now);
      }
    } else if (loss_ewma_ > p_.loss_thresh && state_ != BbrState::ProbeBwUp && state_ != BbrState::ProbeRtt) {
      const double dt = now - round_start_t_;
      const double bw_latest = dt > 0 ? delivered_round_ * 8.0 / dt : bw_;
      bw_lo_ = std::max(bw_latest, kLossBeta * (std::isfinite(bw_lo_) ? bw_lo_ : bw_));
      inflight_lo_ = std::max(delivered_round_, kLossBeta * (std::isfinite(inflight_lo_) ? inflight_lo_ : cwnd_));
    } else if (state_ == BbrState::ProbeBwUp && std::isfinite(inflight_hi_)) {
      inflight_hi_ += up_growth_;
      up_growth_ *= 2;
    }
    ++round_;
    ++phase_rounds_;
    lost_round_ = 0;
    delivered_round_ = 0;
    round_start_t_ = now;
  }

  void advance(const AckSample& s) {
    switch (state_) {
      case BbrState::Startup: break;
      case BbrState::Drain:
        if (inflight_ <= bdp()) enter(BbrState::ProbeBwDown, s.now);
        break;
      case BbrState::ProbeBwDown:
        if (inflight_ <= bdp()) enter(BbrState::ProbeBwCruise, s.now);
        break;
      case BbrState::ProbeBwCruise:
        if (phase_rounds_ >= 1 && s.now >= probe_at_) {
          enter(BbrState::ProbeBwUp, s.now);
          bw_lo_ = inflight_lo_ = kInf;
        }
        break;
      case BbrState::ProbeBwUp:
        // Keeps probing while the inflight_hi ceiling, not the model, is what binds.
        if ((phase_rounds_ >= 1 && inflight_ >= 1.25 * bdp()) ||
            (phase_rounds_ >= 3 && inflight_hi_ >= 1.25 * bdp())) {
          enter(BbrState::ProbeBwDown, s.now);
        }
        break;
      case BbrState::ProbeRtt: {
        const double target = std::max(kMinCwnd, 0.5 * bdp());
        if (probe_exit_ < 0 && inflight_ <= target) {
          probe_exit_ = s.now + std::max(0.2, std::isfinite(min_rtt_) ? min_rtt_ : 0.0);
          probe_round_ = round_ + 1;
        }
        if (probe_exit_ >= 0 && s.now >= probe_exit_ && round_ >= probe_round_) {
          if (std::isfinite(probe_min_)) min_rtt_ = probe_min_;
          bw_lo_ = inflight_lo_ = kInf;
          enter(full_ ? BbrState::ProbeBwDown : BbrState::Startup, s.now);
        }
        break;
      }
    }
  }

  void update_control() {
    double pg = 1.0, cg = 2.0;
    switch (state_) {
      case BbrState::Startup: pg = kStartupGain; cg = kStartupGain; break;
      case BbrState::Drain: pg = 1.0 / kStartupGain; break;
      case BbrState::ProbeBwDown: pg = 0.75; break;
      case BbrState::ProbeBwCruise: pg = 1.0; break;
      case BbrState::ProbeBwUp: pg = 1.25; cg = 2.25; break;
      case BbrState::ProbeRtt: pg = 1.0; break;
    }
    const double rate = std::min(bw_, bw_lo_);
    pacing_ = rate > 0 ? pg * rate : 0;
    if (state_ == BbrState::ProbeRtt) {
      cwnd_ = std::max(kMinCwnd, 0.5 * bdp());
      return;
    }
    if (state_ == BbrState::Startup && !full_) {
      cwnd_ = std::max(cwnd_, kInitCwnd);
      return;
    }
    double c = cg * bdp();
    c = std::min({c, inflight_hi_, inflight_lo_});
    cwnd_ = std::max(c, kMinCwnd);
  }

  CcParams p_;
  BbrState state_ = BbrState::Startup;
  double cwnd_ = kInitCwnd, pacing_ = 0, inflight_ = 0;
  double min_rtt_ = kInf, probe_min_ = kInf, next_probe_rtt_, probe_exit_ = -1;
  std::uint64_t probe_round_ = 0;
  std::array<double, kBwWindow> bw_slot_{};
  std::array<std::uint64_t, kBwWindow> bw_round_{};
  std::array<bool, kBwWindow> bw_seen_{};
  double bw_ = 0, full_bw_ = 0;
  int full_cnt_ = 0;
  bool full_ = false;
  double bw_lo_ = kInf, inflight_lo_ = kInf, inflight_hi_ = kInf;
  std::uint64_t round_ = 0;
  int phase_rounds_ = 0;
  double probe_at_ = 0, up_growth_ = kMssBytes, loss_ewma_ = 0;
  double lost_round_ = 0, delivered_round_ = 0, round_start_t_;
  FlowStats& stats_;
  std::mt19937_64 rng_;
};

// ---- simulator ----

enum class Ev : std::uint8_t { Start, Send, LinkDone, Ack, Rto };

struct Event {
  double t;
  std::uint64_t order;
  Ev type;
  int flow;
  std::uint64_t pkt;
  bool operator>(const Event& o) const { return t != o.t ? t > o.t : order > o.order; }
};

struct Packet {
  int flow;
  std::uint64_t seq;
  std::uint32_t size;
};

struct SentRec {
  std::uint64_t seq;
  double sent;
  double delivered;
  double delivered_time;
  double first_sent;
  bool acked = false, lost = false;
};

struct Flow {
  FlowSpec spec;
  std::unique_ptr<Cc> cc;
  FlowStats stats;
  std::deque<SentRec> out;
  std::uint64_t next_seq = 0;
  double inflight = 0, delivered = 0, delivered_time = 0, first_sent_time = 0;
  double srtt = 0, rttvar = 0;
  bool have_rtt = false;
  double next_send = 0;
  bool send_pending = false;
  double rto_deadline = kInf;
  bool rto_pending = false;
  double backoff = 1;
  double next_round_delivered = 0;
  bool started = false;
  std::vector<double> rtts, egress_bytes, srtt_sec;
  std::vector<int> losses;
};

class Sim {
 public:
  Sim(const std::vector<FlowSpec>& specs, const LinkProfile& profile, double duration, std::uint64_t seed,
      const SimOptions& opt)
      : profile_(profile), duration_(duration), rng_(seed), opt_(opt), buffer_(profile.effective_buffer()) {
    const auto secs = static_cast<std::size_t>(std::ceil(duration));
    flows_.resize(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
      auto& f = flows_[i];
      f.spec = specs[i];
      f.stats.kind = specs[i].kind;
      f.stats.params = specs[i].params;
      switch (specs[i].kind) {
        case CcKind::Reno: f.cc = std::make_unique<Reno>(); break;
        case CcKind::Cubic: f.cc = std::make_unique<Cubic>(); break;
        case CcKind::Bbr2: f.cc = std::make_unique<Bbr2>(specs[i].params, specs[i].start_s, f.stats, seed * 1000003ULL + i);
          break;
      }
      f.egress_bytes.assign(secs, 0);
      f.srtt_sec.assign(secs, -1);
      f.losses.assign(secs, 0);
      push(specs[i].start_s, Ev::Start, static_cast<int>(i), 0);
    }
  }

  SimResult run() {
    while (!events_.empty()) {
      const Event e = events_.top();
      if (e.t >= duration_) break;
      events_.pop();
      now_ = e.t;
      auto& f = flows_[static_cast<std::size_t>(std::max(e.flow, 0))];
      switch (e.type) {
        case Ev::Start:
          f.started = true;
          f.delivered_time = f.first_sent_time = now_;
          try_send(e.flow);
          break;
        case Ev::Send:
          f.send_pending = false;
          try_send(e.flow);
          break;
        case Ev::LinkDone: link_done(); break;
        case Ev::Ack: on_ack(e.flow, e.pkt); break;
        case Ev::Rto: on_rto(e.flow); break;
      }
      if (opt_.check_invariants) check();
    }
    return finish();
  }

 private:
  void push(double t, Ev type, int flow, std::uint64_t pkt) { events_.push({t, order_++, type, flow, pkt}); }

  std::size_t sec(double t) const {
    return std::min(static_cast<std::size_t>(std::max(0.0, t)), flows_.front().egress_bytes.size() - 1);
  }

  double rto(const Flow& f) const {
    const double base = f.have_rtt ? f.srtt + 4 * f.rttvar : 1.0;
    return std::clamp(base * f.backoff, 0.2, 60.0);
  }

  void arm_rto(int fi) {
    auto& f = flows_[static_cast<std::size_t>(fi)];
    if (f.out.empty()) {
      f.rto_deadline = kInf;
      return;
    }
    f.rto_deadline = now_ + rto(f);
    if (!f.rto_pending) {
      f.rto_pending = true;
      push(f.rto_deadline, Ev::Rto, fi, 0);
    }
  }

  void try_send(int fi) {
    auto& f = flows_[static_cast<std::size_t>(fi)];
    if (!f.started) return;
    while (f.inflight == 0 || f.inflight + kMssBytes <= f.cc->cwnd()) {
      const double pace = f.cc->pacing_bps();
      if (pace > 0 && f.next_send > now_ + 1e-12) {
        if (!f.send_pending) {
          f.send_pending = true;
          push(f.next_send, Ev::Send, fi, 0);
        }
        break;
      }
      send_packet(fi);
      if (pace > 0) f.next_send = std::max(f.next_send, now_) + kMssBytes * 8.0 / pace;
    }
  }

  void send_packet(int fi) {
    auto& f = flows_[static_cast<std::size_t>(fi)];
    if (f.out.empty()) f.first_sent_time = f.delivered_time = now_;
    const bool was_idle = f.out.empty();
    f.out.push_back({f.next_seq, now_, f.delivered, f.delivered_time, f.first_sent_time});
    f.inflight += kMssBytes;
    ++f.stats.sent;
    enqueue({fi, f.next_seq, kMss});
    ++f.next_seq;
    if (was_idle || !std::isfinite(f.rto_deadline)) arm_rto(fi);
  }

  void enqueue(const Packet& p) {
    ++link_.injected;
    if (busy_ && queue_bytes_ + p.size > buffer_) {
      ++link_.dropped_queue;
      return;
    }
    queue_.push_back(p);
    queue_bytes_ += p.size;
    ++link_.queued;
    if (!busy_) start_service();
  }

  void start_service() {
    serving_ = queue_.front();
    queue_.pop_front();
    queue_bytes_ -= serving_.size;
    --link_.queued;
    ++link_.in_service;
    busy_ = true;
    double t = now_;
    double cap = profile_.at(t).capacity_bps;
    while (cap <= 0) {
      // Wait for the next row that carries capacity.
      const double ms = static_cast<double>(profile_.rows.front().ts_ms) + t * 1000.0;
      const auto it = std::upper_bound(profile_.rows.begin(), profile_.rows.end(), ms,
                                       [](double v, const ProfileRow& r) { return v < static_cast<double>(r.ts_ms); });
      if (it == profile_.rows.end()) {
        t = kInf;
        break;
      }
      t = static_cast<double>(it->ts_ms - profile_.rows.front().ts_ms) / 1000.0;
      cap = it->capacity_bps;
    }
    if (std::isfinite(t)) push(t + serving_.size * 8.0 / cap, Ev::LinkDone, -1, 0);
  }

  void link_done() {
    busy_ = false;
    --link_.in_service;
    const auto& row = profile_.at(now_);
    std::bernoulli_distribution lose(row.loss_prob);
    if (row.loss_prob > 0 && lose(rng_)) {
      ++link_.dropped_random;
    } else {
      ++link_.delivered;
      auto& f = flows_[static_cast<std::size_t>(serving_.flow)];
      f.egress_bytes[sec(now_)] += serving_.size;
      const double arrive = now_ + row.owd_ms / 1000.0;
      const double ack = std::max(arrive + profile_.at(arrive).owd_ms / 1000.0, last_ack_);
      last_ack_ = ack;
      push(ack, Ev::Ack, serving_.flow, serving_.seq);
    }
    if (!queue_.empty()) start_service();
  }

  void on_ack(int fi, std::uint64_t seq) {
    auto& f = flows_[static_cast<std::size_t>(fi)];
    if (f.out.empty() || seq < f.out.front().seq) return;
    const auto idx = static_cast<std::size_t>(seq - f.out.front().seq);
    if (idx >= f.out.size() || f.out[idx].lost || f.out[idx].acked) return;
    auto& rec = f.out[idx];
    rec.acked = true;
    f.inflight -= kMssBytes;
    f.delivered += kMssBytes;
    ++f.stats.acked;
    f.backoff = 1;

    const double rtt = now_ - rec.sent;
    if (!f.have_rtt) {
      f.srtt = rtt;
      f.rttvar = rtt / 2;
      f.have_rtt = true;
    } else {
      f.rttvar = 0.75 * f.rttvar + 0.25 * std::abs(f.srtt - rtt);
      f.srtt = 0.875 * f.srtt + 0.125 * rtt;
    }
    f.rtts.push_back(rtt);
    f.srtt_sec[sec(now_)] = f.srtt;

    const double send_elapsed = rec.sent - rec.first_sent;
    const double ack_elapsed = now_ - rec.delivered_time;
    const double interval = std::max(send_elapsed, ack_elapsed);
    const double rate = interval > 0 ? (f.delivered - rec.delivered) * 8.0 / interval : 0;
    f.first_sent_time = rec.sent;
    f.delivered_time = now_;
    const bool round_start = rec.delivered >= f.next_round_delivered;
    if (round_start) f.next_round_delivered = f.delivered;

    // FIFO path: anything older still outstanding was dropped.
    for (std::size_t j = 0; j < idx; ++j) {
      auto& o = f.out[j];
      if (o.acked || o.lost) continue;
      o.lost = true;
      f.inflight -= kMssBytes;
      ++f.stats.lost;
      ++f.losses[sec(now_)];
      f.cc->on_loss(now_, kMssBytes, o.sent, f.inflight);
    }
    while (!f.out.empty() && (f.out.front().acked || f.out.front().lost)) f.out.pop_front();

    AckSample s;
    s.now = now_;
    s.rtt_s = rtt;
    s.srtt_s = f.srtt;
    s.acked_bytes = kMssBytes;
    s.rate_bps = (rate > 0 && interval >= 0.5 * rtt) ? rate : 0;
    s.inflight = f.inflight;
    s.round_start = round_start;
    f.cc->on_ack(s);
    arm_rto(fi);
    try_send(fi);
  }

  void on_rto(int fi) {
    auto& f = flows_[static_cast<std::size_t>(fi)];
    f.rto_pending = false;
    if (!std::isfinite(f.rto_deadline)) return;
    if (now_ < f.rto_deadline - 1e-12) {
      f.rto_pending = true;
      push(f.rto_deadline, Ev::Rto, fi, 0);
      return;
    }
    for (auto& o : f.out) {
      if (o.acked || o.lost) continue;
      o.lost = true;
      ++f.stats.lost;
      ++f.losses[sec(now_)];
    }
    f.out.clear();
    f.inflight = 0;
    f.cc->on_rto(now_);
    f.backoff = std::min(f.backoff * 2, 64.0);
    f.rto_deadline = kInf;
    try_send(fi);
  }

  void check() const {
    const auto total = link_.delivered + link_.dropped_queue + link_.dropped_random + link_.queued + link_.in_service;
    if (total != link_.injected) fail(ErrorCode::InvalidArgument, "packet conservation violated");
    std::uint64_t sent = 0;
    for (const auto& f : flows_) sent += f.stats.sent;
    if (sent != link_.injected) fail(ErrorCode::InvalidArgument, "sender/link injection mismatch");
  }

  SimResult finish() {
    SimResult r;
    r.link = link_;
    const auto secs = flows_.front().egress_bytes.size();
    for (std::size_t s = 0; s < secs; ++s) {
      double cap = 0;
      for (int k = 0; k < 20; ++k) cap += profile_.at(static_cast<double>(s) + (k + 0.5) / 20.0).capacity_bps;
      r.capacity_bps.push_back(cap / 20.0);
    }
    for (auto& f : flows_) {
      double srtt = 0;
      const auto first = static_cast<std::size_t>(std::floor(f.spec.start_s));
      for (std::size_t s = first; s < secs; ++s) {
        if (f.srtt_sec[s] >= 0) srtt = f.srtt_sec[s];
        f.stats.seconds.push_back({static_cast<int>(s), f.egress_bytes[s] * 8.0, srtt * 1000.0, f.losses[s]});
      }
      f.stats.mean_tput_bps = f.stats.mean_tput_after(0);
      if (!f.rtts.empty()) {
        std::sort(f.rtts.begin(), f.rtts.end());
        f.stats.p95_rtt_ms = nearest_rank(f.rtts, 95) * 1000.0;
      }
      r.flows.push_back(std::move(f.stats));
    }
    return r;
  }

  const LinkProfile& profile_;
  double duration_;
  std::mt19937_64 rng_;
  SimOptions opt_;
  std::uint64_t buffer_;
  std::vector<Flow> flows_;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
  std::uint64_t order_ = 0;
  double now_ = 0;

  std::deque<Packet> queue_;
  std::uint64_t queue_bytes_ = 0;
  bool busy_ = false;
  Packet serving_{};
  double last_ack_ = 0;
  LinkCounters link_;
};

}  // namespace

SimResult simulate(const std::vector<FlowSpec>& flows, const LinkProfile& profile, double duration_s,
                   std::uint64_t seed, const SimOptions& opt) {
  if (flows.empty()) fail(ErrorCode::InvalidArgument, "no flows");
  if (!(duration_s > 0)) fail(ErrorCode::InvalidArgument, "duration must be positive");
  profile.validate();
  for (const auto& f : flows) {
    f.params.validate();
    if (f.start_s < 0 || f.start_s >= duration_s) fail(ErrorCode::InvalidArgument, "flow start outside the run");
  }
  if (profile.covered_s() + 1e-9 < duration_s) {
    fail(ErrorCode::ProfileExhausted,
         fmt::format("profile covers {:.1f} s, run needs {:.1f} s", profile.covered_s(), duration_s));
  }
  Sim sim(flows, profile, duration_s, seed, opt);
  return sim.run();
}

FlowStats run_flow(CcKind kind, const CcParams& params, const LinkProfile& profile, double duration_s,
                   std::uint64_t seed) {
  return simulate({FlowSpec{kind, params, 0}}, profile, duration_s, seed).flows.front();
}

// ---- sweep ----

const SweepCell& SweepResult::cell(double alpha_ms, double beta) const {
  for (const auto& c : cells) {
    if (c.alpha_ms == alpha_ms && c.beta == beta) return c;
  }
  fail(ErrorCode::InvalidArgument, fmt::format("no sweep cell alpha={} beta={}", alpha_ms, beta));
}

SweepResult sweep(const std::vector<double>& alphas_ms, const std::vector<double>& betas,
                  const std::vector<LinkProfile>& profiles, const SweepOptions& opt) {
  if (alphas_ms.empty() || betas.empty()) fail(ErrorCode::EmptyGrid, "sweep grid is empty");
  if (profiles.empty()) fail(ErrorCode::EmptyGrid, "sweep needs at least one profile");
  if (opt.seeds.empty()) fail(ErrorCode::EmptyGrid, "sweep needs at least one seed");
  opt.baseline.validate();

  // Cell 0 is the baseline; grid cells that equal it reuse its runs.
  std::vector<CcParams> configs{opt.baseline};
  std::vector<std::size_t> cell_config;
  for (double a : alphas_ms) {
    for (double b : betas) {
      CcParams p{a, b};
      p.validate();
      const auto it = std::find(configs.begin(), configs.end(), p);
      cell_config.push_back(static_cast<std::size_t>(it - configs.begin()));
      if (it == configs.end()) configs.push_back(p);
    }
  }
  const std::size_t runs_per = profiles.size() * opt.seeds.size();
  std::vector<FlowStats> results(configs.size() * runs_per);
  parallel_for(results.size(), opt.threads, [&](std::size_t i) {
    const auto c = i / runs_per, r = i % runs_per;
    const auto& prof = profiles[r / opt.seeds.size()];
    results[i] = run_flow(CcKind::Bbr2, configs[c], prof, opt.duration_s, opt.seeds[r % opt.seeds.size()]);
  });

  auto summarize = [&](std::size_t c, const CcParams& p) {
    SweepCell cell;
    cell.alpha_ms = p.probe_rtt_win_ms;
    cell.beta = p.loss_thresh;
    cell.is_default = c == 0;
    for (std::size_t r = 0; r < runs_per; ++r) {
      const auto& x = results[c * runs_per + r];
      const auto& base = results[r];
      cell.mean_tput_bps += x.mean_tput_bps;
      cell.p95_rtt_ms += x.p95_rtt_ms;
      if (base.mean_tput_bps > 0) {
        cell.tput_improvement_pct += (x.mean_tput_bps - base.mean_tput_bps) / base.mean_tput_bps * 100.0;
      }
      if (base.p95_rtt_ms > 0) {
        cell.p95_rtt_inflation_pct += (x.p95_rtt_ms - base.p95_rtt_ms) / base.p95_rtt_ms * 100.0;
      }
    }
    const double n = static_cast<double>(runs_per);
    cell.mean_tput_bps /= n;
    cell.p95_rtt_ms /= n;
    cell.tput_improvement_pct /= n;
    cell.p95_rtt_inflation_pct /= n;
    return cell;
  };

  SweepResult out;
  out.baseline = summarize(0, opt.baseline);
  for (std::size_t i = 0; i < cell_config.size(); ++i) {
    out.cells.push_back(summarize(cell_config[i], configs[cell_config[i]]));
    if (out.cells.back().is_default) {
      out.cells.back().alpha_ms = alphas_ms[i / betas.size()];
      out.cells.back().beta = betas[i % betas.size()];
    }
  }
  for (const auto& c : out.cells) {
    if (c.p95_rtt_inflation_pct >= opt.inflation_limit_pct) continue;
    if (!out.best || c.tput_improvement_pct > out.best->tput_improvement_pct) out.best = c;
  }
  return out;
}

void write_sweep_csv(std::ostream& out, const SweepResult& r) {
  out << "alpha_ms,beta_pct,tput_improvement_pct,p95_rtt_inflation_pct\n";
  for (const auto& c : r.cells) {
    out << fmt::format("{:.0f},{:g},{:.3f},{:.3f}\n", c.alpha_ms, c.beta * 100.0, c.tput_improvement_pct,
                       c.p95_rtt_inflation_pct);
  }
}

// ---- fairness ----

FairnessResult fairness(const FairnessConfig& cfg, const LinkProfile& profile) {
  if (cfg.n_a < 1 || cfg.n_b < 1) fail(ErrorCode::InvalidArgument, "fairness needs at least one flow per group");
  if (cfg.seeds.empty()) fail(ErrorCode::InvalidArgument, "fairness needs at least one seed");
  std::vector<std::vector<double>> per_seed(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.threads, [&](std::size_t i) {
    std::mt19937_64 rng(cfg.seeds[i] ^ 0x5eedULL);
    std::uniform_real_distribution<double> jitter(0.0, 0.1);
    std::vector<FlowSpec> flows;
    for (int k = 0; k < cfg.n_a; ++k) flows.push_back({cfg.a_kind, cfg.a_params, jitter(rng)});
    for (int k = 0; k < cfg.n_b; ++k) flows.push_back({cfg.b_kind, cfg.b_params, jitter(rng)});
    const auto r = simulate(flows, profile, cfg.duration_s, cfg.seeds[i]);
    const auto secs = r.capacity_bps.size();
    for (std::size_t s = 0; s < secs; ++s) {
      if (static_cast<double>(s) < cfg.warmup_s) continue;
      double a = 0, b = 0;
      for (std::size_t f = 0; f < r.flows.size(); ++f) {
        double g = 0;
        for (const auto& row : r.flows[f].seconds) {
          if (row.second == static_cast<int>(s)) g = row.goodput_bps;
        }
        (f < static_cast<std::size_t>(cfg.n_a) ? a : b) += g;
      }
      if (b > 0) per_seed[i].push_back(a / b);
    }
  });
  FairnessResult out;
  for (const auto& v : per_seed) out.ratios.insert(out.ratios.end(), v.begin(), v.end());
  if (!out.ratios.empty()) {
    auto sorted = out.ratios;
    std::sort(sorted.begin(), sorted.end());
    out.median = nearest_rank(sorted, 50);
  }
  return out;
}

}  // namespace leobed::leolink

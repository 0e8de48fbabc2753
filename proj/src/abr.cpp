#include "leobed/abr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "leobed/error.hpp"

namespace leobed::abr {

namespace {

constexpr double kMinRate = 1e-9;

// Seconds to pull `kbits` through the trace starting at absolute time t.
double download_time(const Trace& tr, double t, double kbits) {
  double remaining = kbits;
  double now = t;
  while (true) {
    const auto slot = static_cast<std::size_t>(std::floor(now));
    if (slot >= tr.kbps.size()) {
      fail(ErrorCode::TraceTooShort, fmt::format("trace ends at {:.0f} s during a download", tr.duration_s()));
    }
    const double cap = tr.kbps[slot];
    const double dt = static_cast<double>(slot + 1) - now;
    if (cap * dt >= remaining) {
      if (cap > 0) now += remaining / cap;
      return now - t;
    }
    remaining -= cap * dt;
    now = static_cast<double>(slot + 1);
  }
}

// Time-weighted mean of per-second values v (v[0] covers [first, first+1)) over [a, b).
double window_mean(std::span<const double> v, int first, double a, double b) {
  if (v.empty() || b <= a) return 0;
  double acc = 0, w = 0;
  for (auto s = static_cast<long>(std::floor(a)); static_cast<double>(s) < b; ++s) {
    const double lo = std::max(a, static_cast<double>(s)), hi = std::min(b, static_cast<double>(s + 1));
    if (hi <= lo) continue;
    const long idx = std::clamp<long>(s - first, 0, static_cast<long>(v.size()) - 1);
    acc += v[static_cast<std::size_t>(idx)] * (hi - lo);
    w += hi - lo;
  }
  return w > 0 ? acc / w : 0;
}

}  // namespace

// ---- video and traces ----

void VideoSpec::validate() const {
  if (ladder_kbps.empty()) fail(ErrorCode::InvalidArgument, "empty bitrate ladder");
  for (std::size_t i = 0; i < ladder_kbps.size(); ++i) {
    if (!(ladder_kbps[i] > 0)) fail(ErrorCode::InvalidArgument, "ladder bitrates must be positive");
    if (i == 0) continue;
    const double r = ladder_kbps[i] / ladder_kbps[i - 1];
    if (r < 1.4 || r > 1.6) {
      fail(ErrorCode::InvalidArgument, fmt::format("adjacent ladder ratio {:.3f} outside [1.4, 1.6]", r));
    }
  }
  if (!(chunk_s > 0) || !(duration_s >= chunk_s)) fail(ErrorCode::InvalidArgument, "bad chunk or video duration");
  const double n = duration_s / chunk_s;
  if (std::abs(n - std::round(n)) > 1e-9) fail(ErrorCode::InvalidArgument, "chunk duration must divide the video");
}

int VideoSpec::n_chunks() const { return static_cast<int>(std::lround(duration_s / chunk_s)); }

VideoSpec VideoSpec::scaled(double multiplier) const {
  if (!(multiplier > 0)) fail(ErrorCode::InvalidArgument, "ladder multiplier must be positive");
  VideoSpec v = *this;
  for (auto& b : v.ladder_kbps) b *= multiplier;
  return v;
}

double Trace::mean_kbps(double a, double b) const { return window_mean(kbps, 0, a, b); }

Trace parse_trace_csv(std::string_view text) {
  const auto t = parse_csv(text);
  const auto c_ts = t.column("ts_ms"), c_v = t.column("tput_kbps");
  Trace tr;
  UnixMs prev = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    if (row.size() <= std::max(c_ts, c_v)) fail(ErrorCode::ParseError, "short trace row");
    UnixMs ts = 0;
    double v = 0;
    try {
      ts = std::stoll(row[c_ts]);
      v = std::stod(row[c_v]);
    } catch (const std::exception&) {
      fail(ErrorCode::ParseError, fmt::format("bad number in trace row {}", i + 1));
    }
    if (!std::isfinite(v) || v < 0) fail(ErrorCode::ParseError, "trace throughput must be finite and >= 0");
    if (i == 0) {
      tr.start_ms = ts;
    } else if (ts - prev != kMsPerSecond) {
      fail(ErrorCode::InvalidArgument, "trace rows must be 1 s apart");
    }
    prev = ts;
    tr.kbps.push_back(v);
  }
  if (tr.kbps.empty()) fail(ErrorCode::EmptyInput, "trace has no rows");
  return tr;
}

Trace read_trace_csv(const std::string& path) { return parse_trace_csv(read_file(path)); }

void write_trace_csv(std::ostream& out, const Trace& t) {
  out << "ts_ms,tput_kbps\n";
  for (std::size_t i = 0; i < t.kbps.size(); ++i) {
    out << t.start_ms + static_cast<UnixMs>(i) * kMsPerSecond << ',' << fmt::format("{:.3f}", t.kbps[i]) << '\n';
  }
}

Trace trace_from_telemetry(std::span<const terminal::TelemetrySample> samples) {
  if (samples.empty()) fail(ErrorCode::EmptyInput, "no telemetry samples");
  const auto m = predict::metric_series(samples, predict::Target::ThroughputKbps);
  Trace tr;
  tr.start_ms = samples.front().ts_ms;
  for (const auto& v : m) tr.kbps.push_back(v.value_or(0.0));
  return tr;
}

Trace synthetic_trace(const SyntheticTraceConfig& cfg, std::uint64_t seed) {
  if (cfg.slot_s < 1 || !(cfg.duration_s > 0) || cfg.level_lo_kbps > cfg.level_hi_kbps) {
    fail(ErrorCode::InvalidArgument, "bad synthetic trace config");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> level(cfg.level_lo_kbps, cfg.level_hi_kbps);
  std::bernoulli_distribution dip(cfg.p_dip);
  std::normal_distribution<double> eps(0.0, 1.0);
  Trace tr;
  const auto n = static_cast<long>(std::ceil(cfg.duration_s));
  double slot_level = 0, e = 0;
  const double innov = std::sqrt(1 - cfg.ar_phi * cfg.ar_phi);
  for (long i = 0; i < n; ++i) {
    if (i % cfg.slot_s == 0) {
      slot_level = level(rng);
      if (dip(rng)) slot_level *= cfg.dip_factor;
    }
    e = cfg.ar_phi * e + innov * eps(rng);
    tr.kbps.push_back(std::max(0.0, slot_level * (1 + cfg.noise_rel * e)));
  }
  return tr;
}

Trace white_noise_trace(double mean_kbps, double sd_kbps, double duration_s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(mean_kbps, sd_kbps);
  Trace tr;
  for (long i = 0; i < static_cast<long>(std::ceil(duration_s)); ++i) tr.kbps.push_back(std::max(1.0, d(rng)));
  return tr;
}

predict::Dataset trace_dataset(std::span<const Trace> traces, int k) {
  predict::Dataset d;
  d.layout = predict::Layout{k};
  d.target = predict::Target::ThroughputKbps;
  for (const auto& tr : traces) {
    for (std::size_t t = predict::kHistory; t < tr.kbps.size(); ++t) {
      std::vector<double> recent;
      for (std::size_t lag = 1; lag <= predict::kHistory; ++lag) recent.push_back(tr.kbps[t - lag]);
      d.add(predict::history_features(recent, tr.start_ms + static_cast<UnixMs>(t) * kMsPerSecond, k), tr.kbps[t]);
    }
  }
  return d;
}

// ---- MPC ----

namespace {

// Download seconds for `kbits` starting at time t over a per-second series.
struct SeriesRate {
  std::span<const double> kbps;
  int first;

  double download(double t, double kbits) const {
    double remaining = kbits, now = t;
    for (int guard = 0; guard < 1'000'000; ++guard) {
      const auto slot = static_cast<long>(std::floor(now));
      const long idx = std::clamp<long>(slot - first, 0, static_cast<long>(kbps.size()) - 1);
      const double cap = std::max(kbps[static_cast<std::size_t>(idx)], kMinRate);
      if (idx == static_cast<long>(kbps.size()) - 1 && slot - first >= idx) return now - t + remaining / cap;
      const double dt = static_cast<double>(slot + 1) - now;
      if (cap * dt >= remaining) return now + remaining / cap - t;
      remaining -= cap * dt;
      now = static_cast<double>(slot + 1);
    }
    return std::numeric_limits<double>::infinity();
  }
};

// Depth-first over all quality sequences; Time(step, t, kbits) gives the download time.
template <class Time>
struct Planner {
  const VideoSpec& video;
  const QoeParams& qoe;
  Time time;
  int depth;
  double best = -std::numeric_limits<double>::infinity();
  int best_first = 0;

  void search(int step, double t, double buffer, int last, double acc, int first) {
    if (step == depth) {
      if (acc > best) {
        best = acc;
        best_first = first;
      }
      return;
    }
    for (int q = 0; q < video.n_qualities(); ++q) {
      const double d = time(step, t, video.chunk_kbits(q));
      const double stall = std::max(0.0, d - buffer);
      const double next_buffer = std::max(0.0, buffer - d) + video.chunk_s;
      const double smooth = last >= 0 ? std::abs(video.utility(q) - video.utility(last)) : 0.0;
      const double v = acc + video.utility(q) - qoe.rebuffer_penalty * stall - smooth;
      search(step + 1, t + d, next_buffer, q, v, step == 0 ? q : first);
    }
  }
};

template <class Time>
int plan(const MpcState& state, double now, Time time, const VideoSpec& video, const QoeParams& qoe, int horizon) {
  if (horizon < 1) fail(ErrorCode::InvalidArgument, "horizon must be >= 1");
  if (state.chunks_left < 1) fail(ErrorCode::InvalidArgument, "no chunks left");
  Planner<Time> p{video, qoe, time, std::min(horizon, state.chunks_left)};
  p.search(0, now, state.buffer_s, state.last_quality, 0.0, 0);
  return p.best_first;
}

}  // namespace

int mpc_decide(const MpcState& state, std::span<const double> pred_kbps, const VideoSpec& video,
               const QoeParams& qoe, int horizon) {
  if (pred_kbps.empty()) fail(ErrorCode::InvalidArgument, "mpc needs at least one prediction");
  const auto time = [pred_kbps](int step, double, double kbits) {
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(step), pred_kbps.size() - 1);
    return kbits / std::max(pred_kbps[i], kMinRate);
  };
  return plan(state, 0.0, time, video, qoe, horizon);
}

int mpc_decide_series(const MpcState& state, std::span<const double> kbps_per_second, int first_second,
                      double now_s, const VideoSpec& video, const QoeParams& qoe, int horizon) {
  if (kbps_per_second.empty()) fail(ErrorCode::InvalidArgument, "mpc needs at least one prediction");
  const SeriesRate rate{kbps_per_second, first_second};
  const auto time = [&rate](int, double t, double kbits) { return rate.download(t, kbits); };
  return plan(state, now_s, time, video, qoe, horizon);
}

std::vector<double> HarmonicForecaster::forecast(const SessionView& v, int n) {
  double est = fallback_;
  if (!v.chunk_tput_kbps.empty()) {
    const std::size_t n = std::min<std::size_t>(5, v.chunk_tput_kbps.size());
    double inv = 0;
    for (std::size_t i = v.chunk_tput_kbps.size() - n; i < v.chunk_tput_kbps.size(); ++i) {
      inv += 1.0 / std::max(v.chunk_tput_kbps[i], kMinRate);
    }
    est = static_cast<double>(n) / inv;
  }
  prev_ = est;
  return std::vector<double>(static_cast<std::size_t>(std::max(n, 1)), est);
}

std::optional<double> HarmonicForecaster::last_error(const SessionView& v) {
  if (prev_ < 0 || v.chunk_tput_kbps.empty()) return std::nullopt;
  const double actual = std::max(v.chunk_tput_kbps.back(), kMinRate);
  return std::abs(prev_ - actual) / actual;
}

std::vector<double> SeriesForecaster::forecast(const SessionView& v, int n) {
  prev_first_ = static_cast<int>(std::floor(v.now_s));
  prev_ = seconds(v, prev_first_, std::max(n, 1));
  return prev_;
}

std::optional<double> SeriesForecaster::last_error(const SessionView& v) {
  if (prev_.empty()) return std::nullopt;
  // Compare over the whole seconds that completed since the last forecast.
  const int end = std::min(static_cast<int>(v.observed_kbps.size()), prev_first_ + static_cast<int>(prev_.size()));
  if (end <= prev_first_) return std::nullopt;
  double pred = 0, actual = 0;
  for (int s = prev_first_; s < end; ++s) {
    pred += prev_[static_cast<std::size_t>(s - prev_first_)];
    actual += v.observed_kbps[static_cast<std::size_t>(s)];
  }
  if (actual <= 0) return std::nullopt;
  return std::abs(pred - actual) / actual;
}

void SeriesForecaster::reset() {
  prev_.clear();
  prev_first_ = 0;
}

std::vector<double> OracleForecaster::seconds(const SessionView& v, int first_second, int n) {
  if (!v.trace || v.trace->kbps.empty()) fail(ErrorCode::InvalidArgument, "oracle needs the trace");
  std::vector<double> out;
  const auto& k = v.trace->kbps;
  for (int s = first_second; s < first_second + n; ++s) {
    out.push_back(k[std::min<std::size_t>(static_cast<std::size_t>(std::max(s, 0)), k.size() - 1)]);
  }
  return out;
}

ModelForecaster::ModelForecaster(std::shared_ptr<const predict::Model> model, double fallback_kbps)
    : model_(std::move(model)), fallback_(fallback_kbps) {
  if (!model_) fail(ErrorCode::InvalidArgument, "model forecaster needs a model");
}

std::vector<double> ModelForecaster::seconds(const SessionView& v, int first_second, int n) {
  const auto& obs = v.observed_kbps;
  if (obs.size() < static_cast<std::size_t>(predict::kHistory)) {
    return std::vector<double>(static_cast<std::size_t>(n), obs.empty() ? fallback_ : obs.back());
  }
  std::vector<double> recent;  // newest first
  for (std::size_t lag = 1; lag <= static_cast<std::size_t>(predict::kHistory); ++lag) {
    recent.push_back(obs[obs.size() - lag]);
  }
  const UnixMs t0 = v.trace ? v.trace->start_ms : 0;
  const int k = model_->layout().k;
  std::vector<double> out;
  for (int j = 0; j < n; ++j) {
    const auto f = predict::history_features(recent, t0 + static_cast<UnixMs>(first_second + j) * kMsPerSecond, k);
    const double p = std::max(0.0, model_->predict(f));
    out.push_back(p);
    recent.insert(recent.begin(), p);
    recent.pop_back();
  }
  return out;
}

int FixedController::decide(const SessionView& v, const VideoSpec& video, const QoeParams&) {
  if (q_.empty()) fail(ErrorCode::InvalidArgument, "fixed controller has no qualities");
  const int q = q_[std::min<std::size_t>(static_cast<std::size_t>(v.chunk), q_.size() - 1)];
  if (q < 0 || q >= video.n_qualities()) fail(ErrorCode::InvalidArgument, "fixed quality out of range");
  return q;
}

MpcController::MpcController(std::string name, std::unique_ptr<Forecaster> f, bool robust, int horizon)
    : name_(std::move(name)), f_(std::move(f)), robust_(robust), horizon_(horizon) {
  if (!f_) fail(ErrorCode::InvalidArgument, "mpc needs a forecaster");
}

int MpcController::decide(const SessionView& v, const VideoSpec& video, const QoeParams& qoe) {
  if (const auto e = f_->last_error(v)) {
    errors_.push_back(*e);
    if (errors_.size() > 5) errors_.erase(errors_.begin());
  }
  const int h = std::min(horizon_, v.chunks_left);
  // Enough seconds to cover the horizon at the lowest quality; the last value repeats.
  const int n = static_cast<int>(std::ceil(2 * h * video.chunk_s)) + 1;
  auto series = f_->forecast(v, n);
  if (robust_ && !errors_.empty()) {
    const double worst = *std::max_element(errors_.begin(), errors_.end());
    for (auto& p : series) p /= 1.0 + worst;
  }
  return mpc_decide_series({v.buffer_s, v.last_quality, v.chunks_left}, series, static_cast<int>(std::floor(v.now_s)),
                           v.now_s, video, qoe, horizon_);
}

void MpcController::reset() {
  errors_.clear();
  f_->reset();
}

std::unique_ptr<Controller> make_mpc_d(const VideoSpec& video) {
  return std::make_unique<MpcController>("MPC-D", std::make_unique<HarmonicForecaster>(video.ladder_kbps.front()),
                                         true);
}

std::unique_ptr<Controller> make_mpc_l(std::shared_ptr<const predict::Model> model, const VideoSpec& video) {
  return std::make_unique<MpcController>(
      "MPC-L", std::make_unique<ModelForecaster>(std::move(model), video.ladder_kbps.front()), true);
}

std::unique_ptr<Controller> make_mpc_o() {
  return std::make_unique<MpcController>("MPC-O", std::make_unique<OracleForecaster>(), false);
}

// ---- session ----

SessionResult simulate_session(const Trace& trace, const VideoSpec& video, Controller& controller,
                               const QoeParams& qoe, double start_s) {
  video.validate();
  if (start_s < 0) fail(ErrorCode::InvalidArgument, "negative session start");
  if (trace.duration_s() - start_s < video.duration_s) {
    fail(ErrorCode::TraceTooShort, fmt::format("trace covers {:.0f} s after the start, video needs {:.0f} s",
                                               trace.duration_s() - start_s, video.duration_s));
  }
  controller.reset();
  SessionResult r;
  std::vector<double> chunk_tput;
  double t = start_s, buffer = 0;
  int last = -1;
  const int n = video.n_chunks();
  for (int k = 0; k < n; ++k) {
    SessionView v;
    v.chunk = k;
    v.now_s = t;
    v.buffer_s = buffer;
    v.last_quality = last;
    v.chunks_left = n - k;
    v.chunk_tput_kbps = chunk_tput;
    v.observed_kbps = std::span<const double>(trace.kbps.data(),
                                              std::min(trace.kbps.size(), static_cast<std::size_t>(std::floor(t))));
    v.trace = &trace;
    v.start_s = start_s;
    const int q = controller.decide(v, video, qoe);
    if (q < 0 || q >= video.n_qualities()) fail(ErrorCode::InvalidArgument, "controller chose an invalid quality");

    const double kbits = video.chunk_kbits(q);
    const double d = download_time(trace, t, kbits);
    const double stall = std::max(0.0, d - buffer);
    buffer = std::max(0.0, buffer - d) + video.chunk_s;
    t += d;
    if (buffer > qoe.buffer_cap_s) {
      t += buffer - qoe.buffer_cap_s;
      buffer = qoe.buffer_cap_s;
    }
    chunk_tput.push_back(d > 0 ? kbits / d : std::numeric_limits<double>::max());

    r.chunks.push_back({k, q, d * 1000.0, stall * 1000.0, buffer});
    if (k == 0) {
      r.qoe.startup_s = stall;
    } else {
      r.qoe.rebuffer_s += stall;
    }
    r.qoe.utility += video.utility(q);
    if (last >= 0) r.qoe.smoothness += std::abs(video.utility(q) - video.utility(last));
    last = q;
  }
  r.qoe.qoe = r.qoe.utility - qoe.rebuffer_penalty * (r.qoe.rebuffer_s + r.qoe.startup_s) - r.qoe.smoothness;
  return r;
}

void write_chunk_log_csv(std::ostream& out, const std::vector<ChunkLog>& chunks) {
  out << "chunk_idx,quality,download_ms,rebuffer_ms,buffer_s\n";
  for (const auto& c : chunks) {
    out << fmt::format("{},{},{:.3f},{:.3f},{:.3f}\n", c.chunk_idx, c.quality, c.download_ms, c.rebuffer_ms,
                       c.buffer_s);
  }
}

std::vector<VariantQoe> compare_variants(const std::vector<Trace>& traces, const VideoSpec& video,
                                         std::shared_ptr<const predict::Model> model, const CompareOptions& opt) {
  if (traces.empty()) fail(ErrorCode::EmptyInput, "no traces to compare on");
  std::vector<VariantQoe> out{{"MPC-D", {}, 0}};
  if (model) out.push_back({"MPC-L", {}, 0});
  out.push_back({"MPC-O", {}, 0});
  for (auto& v : out) v.qoe.assign(traces.size(), 0);
  parallel_for(traces.size(), opt.threads, [&](std::size_t i) {
    std::vector<std::unique_ptr<Controller>> ctrls;
    ctrls.push_back(make_mpc_d(video));
    if (model) ctrls.push_back(make_mpc_l(model, video));
    ctrls.push_back(make_mpc_o());
    for (std::size_t c = 0; c < ctrls.size(); ++c) {
      out[c].qoe[i] = simulate_session(traces[i], video, *ctrls[c], opt.qoe).qoe.qoe;
    }
  });
  for (auto& v : out) v.median = median_of(v.qoe);
  return out;
}

}  // namespace leobed::abr

#include "leobed/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "leobed/error.hpp"

namespace leobed::telemetry {

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::LatencyMs: return "latency_ms";
    case Metric::LossRate: return "loss_rate";
    case Metric::AzDeg: return "az_deg";
    case Metric::ElDeg: return "el_deg";
  }
  return "?";
}

std::optional<Metric> parse_metric(std::string_view name) {
  for (Metric m : {Metric::LatencyMs, Metric::LossRate, Metric::AzDeg, Metric::ElDeg}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

std::optional<double> metric_value(const TelemetrySample& s, Metric m) {
  switch (m) {
    case Metric::LatencyMs: return s.pop_latency_ms;
    case Metric::LossRate: return s.pop_drop_rate;
    case Metric::AzDeg: return s.azimuth_deg;
    case Metric::ElDeg: return s.elevation_deg;
  }
  return std::nullopt;
}

double moving_avg(std::span<const double> values, std::size_t n) {
  if (n == 0) fail(ErrorCode::InvalidArgument, "moving average needs n >= 1");
  if (values.size() < n) fail(ErrorCode::InsufficientHistory, "not enough samples for moving average");
  const auto tail = values.last(n);
  return std::accumulate(tail.begin(), tail.end(), 0.0) / static_cast<double>(n);
}

TelemetryWindow::TelemetryWindow(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) fail(ErrorCode::InvalidArgument, "window capacity must be positive");
}

void TelemetryWindow::push(const TelemetrySample& s) {
  if (!samples_.empty() && s.ts_ms <= samples_.back().ts_ms) {
    fail(ErrorCode::ClockRegression, "telemetry samples out of order");
  }
  samples_.push_back(s);
  while (samples_.size() > capacity_) samples_.pop_front();
}

const TelemetrySample& TelemetryWindow::latest() const {
  if (samples_.empty()) fail(ErrorCode::InsufficientHistory, "empty telemetry window");
  return samples_.back();
}

double TelemetryWindow::moving_avg(Metric m, std::size_t n, std::size_t skip) const {
  if (n == 0) fail(ErrorCode::InvalidArgument, "moving average needs n >= 1");
  if (samples_.size() < n + skip) fail(ErrorCode::InsufficientHistory, "not enough samples for moving average");
  double sum = 0;
  const std::size_t end = samples_.size() - skip;
  for (std::size_t i = end - n; i < end; ++i) {
    const auto v = metric_value(samples_[i], m);
    if (!v) fail(ErrorCode::InsufficientHistory, "window contains samples without the metric");
    sum += *v;
  }
  return sum / static_cast<double>(n);
}

std::optional<ConsumptionDelta> ConsumptionDifferencer::push(const TelemetrySample& s,
                                                            const RateFn& experiment_rate) {
  std::optional<TelemetrySample> prev = std::exchange(prev_, s);
  if (!prev) return std::nullopt;
  const UnixMs dt = s.ts_ms - prev->ts_ms;
  if (dt != kMsPerSecond) {
    prev_diff_.reset();
    return std::nullopt;
  }
  const auto total = [](const TelemetrySample& x) { return x.bytes_down + x.bytes_up; };
  if (total(s) < total(*prev)) {
    spdlog::warn("terminal counter went backwards at {}; dropping interval", s.ts_ms);
    prev_diff_.reset();
    return std::nullopt;
  }
  ConsumptionDelta d;
  d.ts_ms = prev->ts_ms - shift_s_ * kMsPerSecond;
  d.terminal_rate_bps = static_cast<double>(total(s) - total(*prev)) * 8.0;
  d.experiment_rate_bps = std::max(0.0, experiment_rate(d.ts_ms));
  d.diff_bps = d.terminal_rate_bps - d.experiment_rate_bps;
  d.diff_change_bps = prev_diff_ ? d.diff_bps - *prev_diff_ : 0.0;
  prev_diff_ = d.diff_bps;
  return d;
}

void ConsumptionDifferencer::reset() {
  prev_.reset();
  prev_diff_.reset();
}

std::vector<double> counter_rates_bps(const std::vector<TelemetrySample>& samples) {
  std::vector<double> out;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const auto a = samples[i - 1].bytes_down + samples[i - 1].bytes_up;
    const auto b = samples[i].bytes_down + samples[i].bytes_up;
    if (b < a) {
      spdlog::warn("terminal counter went backwards at {}; dropping interval", samples[i].ts_ms);
      continue;
    }
    const double dt = static_cast<double>(samples[i].ts_ms - samples[i - 1].ts_ms) / 1000.0;
    out.push_back(static_cast<double>(b - a) * 8.0 / dt);
  }
  return out;
}

TimeShiftEstimate estimate_time_shift(std::span<const double> terminal_series,
                                      std::span<const double> ground_truth, int max_shift_s) {
  constexpr std::size_t kMinSeries = 60;
  if (terminal_series.size() < kMinSeries || ground_truth.size() < kMinSeries) {
    fail(ErrorCode::SeriesTooShort, "time-shift estimation needs at least 60 s of both series");
  }
  const std::size_t n = std::min(terminal_series.size(), ground_truth.size());
  if (max_shift_s < 0 || static_cast<std::size_t>(max_shift_s) * 2 > n) {
    fail(ErrorCode::InvalidArgument, "max shift must be in [0, len/2]");
  }
  TimeShiftEstimate est;
  for (int s = 0; s <= max_shift_s; ++s) {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i + static_cast<std::size_t>(s) < n; ++i) {
      sum += std::abs(terminal_series[i + static_cast<std::size_t>(s)] - ground_truth[i]);
      ++count;
    }
    est.mae.push_back(sum / static_cast<double>(count));
  }
  const auto best = std::min_element(est.mae.begin(), est.mae.end());
  est.shift_s = static_cast<int>(best - est.mae.begin());
  if (est.mae.size() == 1) {
    est.confident = true;
  } else {
    const double others = (std::accumulate(est.mae.begin(), est.mae.end(), 0.0) - *best) /
                          static_cast<double>(est.mae.size() - 1);
    est.confident = others > 0 && (others - *best) / others >= 0.05;
  }
  return est;
}

UserTrafficDetector::UserTrafficDetector(DetectorConfig cfg) : cfg_(cfg) {
  if (cfg_.hold_s < 1 || !(cfg_.change_threshold_bps > 0)) {
    fail(ErrorCode::InvalidArgument, "detector needs hold_s >= 1 and a positive threshold");
  }
}

void UserTrafficDetector::rebaseline() {
  baseline_.reset();
  asserted_ = false;
  run_ = 0;
}

std::optional<DetectorEvent> UserTrafficDetector::push(const ConsumptionDelta& d) {
  if (!baseline_) {
    baseline_ = d.diff_bps;
    run_ = 0;
    return std::nullopt;
  }
  const bool above = d.diff_bps - *baseline_ > cfg_.change_threshold_bps;
  run_ = above != asserted_ ? run_ + 1 : 0;
  if (run_ < cfg_.hold_s) return std::nullopt;
  run_ = 0;
  asserted_ = !asserted_;
  if (!asserted_) baseline_ = d.diff_bps;
  return DetectorEvent{d.ts_ms + kMsPerSecond, asserted_};
}

std::vector<DetectorEvent> detect_user_traffic(const std::vector<ConsumptionDelta>& deltas,
                                               DetectorConfig cfg) {
  UserTrafficDetector det(cfg);
  std::vector<DetectorEvent> out;
  for (const auto& d : deltas) {
    if (auto e = det.push(d)) out.push_back(*e);
  }
  return out;
}

}  // namespace leobed::telemetry

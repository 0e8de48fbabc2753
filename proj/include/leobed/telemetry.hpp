#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "leobed/common.hpp"
#include "leobed/terminal_sim.hpp"

namespace leobed::telemetry {

using terminal::TelemetrySample;

enum class Metric { LatencyMs, LossRate, AzDeg, ElDeg };

std::string_view to_string(Metric m);
std::optional<Metric> parse_metric(std::string_view name);
// Absent for latency during an outage.
std::optional<double> metric_value(const TelemetrySample& s, Metric m);

// Mean of the last n values. InsufficientHistory when fewer than n.
double moving_avg(std::span<const double> values, std::size_t n);

class TelemetryWindow {
 public:
  explicit TelemetryWindow(std::size_t capacity = 3600);

  // Samples must arrive in strictly increasing ts order.
  void push(const TelemetrySample& s);
  void clear() { samples_.clear(); }

  std::size_t size() const { return samples_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return samples_.empty(); }
  const TelemetrySample& latest() const;
  const TelemetrySample& at(std::size_t i) const { return samples_.at(i); }
  std::vector<TelemetrySample> snapshot() const { return {samples_.begin(), samples_.end()}; }

  // Mean over the last n samples, optionally ignoring the newest `skip` ones.
  // A sample missing the metric counts as missing history.
  double moving_avg(Metric m, std::size_t n, std::size_t skip = 0) const;

 private:
  std::size_t capacity_;
  std::deque<TelemetrySample> samples_;
};

struct ConsumptionDelta {
  UnixMs ts_ms = 0;  // start of the 1 s interval, after shift correction
  double terminal_rate_bps = 0;
  double experiment_rate_bps = 0;
  double diff_bps = 0;
  double diff_change_bps = 0;
};

// Turns the terminal's cumulative byte counters (down + up) into per-second rates and
// compares them with what the experiment itself sent.
class ConsumptionDifferencer {
 public:
  // experiment_rate(t) is the experiment's own rate over [t, t + 1 s).
  using RateFn = std::function<double(UnixMs)>;

  explicit ConsumptionDifferencer(int shift_s = 1) : shift_s_(shift_s) {}

  // Returns nothing for the first sample, for gaps, and for counter resets.
  std::optional<ConsumptionDelta> push(const TelemetrySample& s, const RateFn& experiment_rate);
  void reset();
  int shift_s() const { return shift_s_; }

 private:
  int shift_s_;
  std::optional<TelemetrySample> prev_;
  std::optional<double> prev_diff_;
};

// Per-second rate series from consecutive cumulative counter readings. Entry i covers
// [ts[i], ts[i+1]). Counter resets yield no entry.
std::vector<double> counter_rates_bps(const std::vector<TelemetrySample>& samples);

struct TimeShiftEstimate {
  int shift_s = 0;
  std::vector<double> mae;  // indexed by shift
  bool confident = false;
};

// Finds the integer shift s minimising mean |terminal[i + s] - truth[i]|.
TimeShiftEstimate estimate_time_shift(std::span<const double> terminal_series,
                                      std::span<const double> ground_truth, int max_shift_s);

struct DetectorConfig {
  double change_threshold_bps = 2e6;
  int hold_s = 2;
};

struct DetectorEvent {
  UnixMs ts_ms = 0;
  bool user_traffic = false;
};

// Flags other users on the terminal: the terminal/experiment difference moving away from
// its baseline by more than the threshold for hold_s consecutive seconds.
class UserTrafficDetector {
 public:
  explicit UserTrafficDetector(DetectorConfig cfg = {});

  std::optional<DetectorEvent> push(const ConsumptionDelta& d);
  // Re-anchor on the next delta. Called when the experiment's own traffic changes so
  // that the fixed header overhead is not mistaken for a user.
  void rebaseline();

  bool asserted() const { return asserted_; }
  std::optional<double> baseline_bps() const { return baseline_; }
  const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  std::optional<double> baseline_;
  bool asserted_ = false;
  int run_ = 0;
};

std::vector<DetectorEvent> detect_user_traffic(const std::vector<ConsumptionDelta>& deltas,
                                               DetectorConfig cfg = {});

}  // namespace leobed::telemetry

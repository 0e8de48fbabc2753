#pragma once

#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "leobed/orbital.hpp"
#include "leobed/telemetry.hpp"

namespace leobed::triggers {

enum class Verdict { Fire, Hold, InsufficientHistory };

std::string_view to_string(Verdict v);

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
  enum class Kind {
    Number,
    Metric,       // latency_ms, loss_rate, az_deg, el_deg
    Mavg,         // mavg(metric, n)
    VisibleSats,  // visible_sats(mask)
    Weather,      // weather(name)
    Neg,
    Add, Sub, Mul, Div,
    Gt, Ge, Lt, Le, Eq, Ne,
    Not, And, Or,
  };

  Kind kind = Kind::Number;
  double number = 0;  // literal value, mavg window, or visibility mask
  telemetry::Metric metric = telemetry::Metric::LatencyMs;
  std::string name;  // weather key
  std::vector<ExprPtr> args;

  bool is_bool() const;
};

bool operator==(const Expr& a, const Expr& b);

// Throws SyntaxError (with character offset), UnknownMetric or TypeError.
ExprPtr parse_trigger(std::string_view text);
std::string to_string(const Expr& e);

class WeatherProvider {
 public:
  virtual ~WeatherProvider() = default;
  virtual std::optional<double> value(std::string_view key, UnixMs now) const = 0;
};

// Has no data; every weather term evaluates to INSUFFICIENT_HISTORY.
class NullWeather final : public WeatherProvider {
 public:
  std::optional<double> value(std::string_view, UnixMs) const override { return std::nullopt; }
};

struct EvalContext {
  const telemetry::TelemetryWindow* window = nullptr;  // newest sample is "now"
  const orbital::OrbitalContext* orbital = nullptr;
  const WeatherProvider* weather = nullptr;
  UnixMs now_ms = 0;
};

// Strict three-valued evaluation: any missing input makes the whole result
// INSUFFICIENT_HISTORY. mavg averages the n samples before the current one.
Verdict evaluate(const Expr& e, const EvalContext& ctx);

// Verdict per sample when the expression is polled once per sample of `trace`.
std::vector<Verdict> evaluate_trace(const Expr& e, const std::vector<telemetry::TelemetrySample>& trace,
                                    const orbital::OrbitalContext* orbital = nullptr,
                                    std::size_t window_capacity = 600);

struct TriggerBinding {
  std::string trigger;  // source text
  ExprPtr expr;
  std::string experiment_id;
  double max_runtime_s = 60;
  double cooldown_s = 0;
  int budget = 1;  // fires per rolling 24 h
  // Experimental: also stop a running run as soon as the trigger stops firing.
  bool stop_on_hold = false;

  static TriggerBinding make(std::string experiment_id, std::string trigger, double max_runtime_s,
                             double cooldown_s, int budget);
  void validate() const;
};

// Budget and cooldown bookkeeping for one binding.
class TriggerGate {
 public:
  explicit TriggerGate(const TriggerBinding& b) : cooldown_ms_(static_cast<UnixMs>(b.cooldown_s * 1000)), budget_(b.budget) {}

  bool may_fire(UnixMs now) const;
  void record_fire(UnixMs now);
  const std::deque<UnixMs>& recent_fires() const { return fires_; }

 private:
  UnixMs cooldown_ms_;
  int budget_;
  std::deque<UnixMs> fires_;  // within the last 24 h
};

struct ActiveInterval {
  UnixMs start_ms = 0;
  UnixMs end_ms = 0;  // exclusive
};

// Offline replay of the agent's trigger loop for one binding over a 1 Hz trace.
std::vector<ActiveInterval> trigger_schedule(const TriggerBinding& b,
                                             const std::vector<telemetry::TelemetrySample>& trace,
                                             const orbital::OrbitalContext* orbital = nullptr);

struct SavingsReport {
  double transferred_bits = 0;        // always-on
  double stored_bits = 0;             // always-on header capture
  double triggered_transferred_bits = 0;
  double triggered_stored_bits = 0;
  double saved_transfer_bits = 0;
  double saved_storage_bits = 0;
  double active_time_s = 0;
};

SavingsReport savings_report(double period_s, double active_time_s, double bitrate_bps,
                             double header_fraction);
// Active time is what the binding can use at most: budget fires per day of max_runtime each.
SavingsReport savings_report(const TriggerBinding& b, double period_s, double bitrate_bps,
                             double header_fraction);

}  // namespace leobed::triggers

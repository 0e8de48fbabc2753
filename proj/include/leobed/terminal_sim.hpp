#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "leobed/common.hpp"
#include "leobed/orbital.hpp"

namespace leobed::terminal {

enum class LinkState { Active, Outage };

std::string_view to_string(LinkState s);

// One 1 Hz reading as published by the terminal. Latency is absent during an outage.
struct TelemetrySample {
  UnixMs ts_ms = 0;
  std::optional<double> pop_latency_ms;
  double pop_drop_rate = 0;
  double azimuth_deg = 0;
  double elevation_deg = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t bytes_up = 0;
  LinkState state = LinkState::Active;

  bool operator==(const TelemetrySample&) const = default;
};

// Line-delimited JSON with keys ts_ms, pop_latency_ms, pop_drop_rate, az_deg, el_deg,
// bytes_down, bytes_up, state. pop_latency_ms is omitted during OUTAGE.
std::string to_json_line(const TelemetrySample& s);
TelemetrySample from_json_line(std::string_view line);
std::vector<TelemetrySample> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<TelemetrySample>& samples);

// Extra latency applied whenever the antenna sits inside a given orientation box.
struct OrientationPenalty {
  double az_lo = 0, az_hi = 0;
  double el_lo = 0, el_hi = 0;
  double extra_ms = 0;
};

struct TerminalModelConfig {
  double base_latency_ms = 35.0;
  double spike_multiplier_min = 2.0;
  double spike_multiplier_max = 3.0;
  int handover_period_s = 15;
  double p_bad_handover = 0.02;
  double spike_quanta_mean = 1.5;
  double noise_ms = 2.0;  // half-width of the uniform jitter
  double base_drop_rate = 0.002;
  double transient_drop_rate = 0.08;
  double p_outage = 0.0;  // per handover
  int outage_quanta = 1;

  double drift_rate_deg_per_s = 1e-4;
  double az_band_lo = 0.2, az_band_hi = 1.8;
  double el_band_lo = 64.5, el_band_hi = 65.4;
  double p_reposition = 0.0;  // per-second chance of jumping to a fresh orientation in the bands
  std::optional<OrientationPenalty> orientation_penalty;

  int counter_lag_s = 1;
  double header_overhead_bps = 5.6e6;  // added on top of experiment traffic by the terminal

  double gateway_distance_km = 600.0;
  double gateway_bearing_deg = 180.0;
  double elevation_mask_deg = orbital::kDefaultElevationMaskDeg;

  std::uint64_t rng_seed = 1;

  void validate() const;
};

enum class Direction { Down, Up };

struct SpikeEvent {
  UnixMs start_ms = 0;
  UnixMs end_ms = 0;  // exclusive
  int quanta = 0;
  double multiplier = 0;
  bool forced = false;
};

struct HandoverEvent {
  UnixMs ts_ms = 0;
  std::string sat_id;
  double range_km = 0;
};

// Simulated user terminal. Not thread-safe: one stepper owns it; share samples
// through TelemetryPublisher.
class TerminalSim {
 public:
  TerminalSim(TerminalModelConfig config, orbital::GroundSite site,
              std::vector<orbital::TleRecord> catalog, UnixMs start_ms);
  // Uses a synthetic 72x22 Walker shell with epoch at start_ms.
  TerminalSim(TerminalModelConfig config, orbital::GroundSite site, UnixMs start_ms);

  // Advances to now_ms (1 Hz cadence) and returns the sample for that second.
  TelemetrySample step(UnixMs now_ms);
  // Convenience: steps once per second for `seconds` samples starting at the next tick.
  std::vector<TelemetrySample> run(int seconds);

  void inject_user_traffic(double rate_bps, UnixMs start_ms, UnixMs duration_ms,
                           Direction dir = Direction::Down);
  // Experiment traffic as seen by the terminal, in effect from `from_ms` until changed.
  void set_experiment_traffic(double rate_bps, UnixMs from_ms, Direction dir = Direction::Up);
  // Schedules a bad handover at a 15 s boundary.
  void force_spike(UnixMs start_ms, int quanta, double multiplier);

  UnixMs start_ms() const { return start_ms_; }
  UnixMs next_tick_ms() const;
  const TerminalModelConfig& config() const { return config_; }
  const orbital::GroundSite& site() const { return site_; }
  const std::vector<orbital::TleRecord>& catalog() const { return catalog_; }
  const std::vector<SpikeEvent>& spikes() const { return spikes_; }
  const std::vector<HandoverEvent>& handovers() const { return handovers_; }
  std::optional<TelemetrySample> latest() const { return latest_; }
  const std::string& serving_sat() const { return serving_id_; }

 private:
  struct Interval {
    UnixMs start, end;
    double rate_bps;
    Direction dir;
  };
  struct RateChange {
    UnixMs from;
    double rate_bps;
    Direction dir;
  };
  struct ForcedSpike {
    UnixMs start;
    int quanta;
    double multiplier;
  };

  void advance_one();
  void on_handover(UnixMs t);
  double bent_pipe_rtt_ms(UnixMs t) const;
  void walk_orientation();
  double traffic_bits(UnixMs a, UnixMs b, Direction dir) const;

  TerminalModelConfig config_;
  orbital::GroundSite site_;
  orbital::GroundSite gateway_;
  std::vector<orbital::TleRecord> catalog_;
  UnixMs start_ms_;
  std::int64_t index_ = -1;  // last simulated second
  UnixMs last_now_ms_ = std::numeric_limits<UnixMs>::min();

  std::mt19937_64 spike_rng_, noise_rng_, orient_rng_;
  double terrestrial_ms_ = 0;

  std::optional<orbital::TleRecord> serving_;
  std::string serving_id_;
  int spike_quanta_left_ = 0;
  double spike_multiplier_ = 1.0;
  bool spike_edge_pending_ = false;
  int outage_quanta_left_ = 0;

  double az_ = 0, el_ = 0;
  std::vector<Interval> injections_;
  std::vector<RateChange> experiment_;
  std::vector<ForcedSpike> forced_;
  std::vector<std::uint64_t> true_down_, true_up_;  // cumulative counters per simulated second

  std::vector<SpikeEvent> spikes_;
  std::vector<HandoverEvent> handovers_;
  std::optional<TelemetrySample> latest_;
};

// Per-hop round-trip model of the end-to-end path behind the terminal, used by the
// built-in PING/TRACEROUTE backends.
struct PathHop {
  int index = 0;
  std::string addr;
  double rtt_ms = 0;
};

struct PathModel {
  double lan_rtt_ms = 0.8;                                  // host -> terminal router
  std::vector<double> starlink_core_rtt_ms{2.5, 2.5, 3.0};  // PoP -> internal hops
  double wan_rtt_ms = 14.0;                                 // last internal hop -> destination
  double hop_jitter_ms = 0.3;
  std::string destination = "8.8.8.8";

  // Hop RTTs for one probe; empty during an outage.
  std::vector<PathHop> probe(const TelemetrySample& s, std::mt19937_64& rng) const;
};

// Single-writer, many-reader handoff of the latest sample.
class TelemetryPublisher {
 public:
  void publish(const TelemetrySample& s);
  std::shared_ptr<const TelemetrySample> latest() const;

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const TelemetrySample> latest_;
};

}  // namespace leobed::terminal

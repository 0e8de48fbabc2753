#include "leobed/terminal_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "leobed/error.hpp"

namespace leobed::terminal {
namespace {

constexpr double kLightKmPerMs = 299.792458;
constexpr double kDeg = std::numbers::pi / 180.0;

// SplitMix64 step, used to derive independent RNG streams from one seed.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

orbital::GroundSite destination_point(const orbital::GroundSite& from, double bearing_deg,
                                      double distance_km) {
  const double delta = distance_km / orbital::kEarthRadiusKm;
  const double phi1 = from.latitude_deg * kDeg, lam1 = from.longitude_deg * kDeg;
  const double theta = bearing_deg * kDeg;
  const double phi2 =
      std::asin(std::sin(phi1) * std::cos(delta) + std::cos(phi1) * std::sin(delta) * std::cos(theta));
  double lam2 = lam1 + std::atan2(std::sin(theta) * std::sin(delta) * std::cos(phi1),
                                  std::cos(delta) - std::sin(phi1) * std::sin(phi2));
  double lon = std::remainder(lam2 / kDeg, 360.0);
  return {phi2 / kDeg, lon, 0.0};
}

double overlap_s(UnixMs a0, UnixMs a1, UnixMs b0, UnixMs b1) {
  const UnixMs lo = std::max(a0, b0), hi = std::min(a1, b1);
  return hi > lo ? static_cast<double>(hi - lo) / 1000.0 : 0.0;
}

}  // namespace

std::string_view to_string(LinkState s) { return s == LinkState::Active ? "ACTIVE" : "OUTAGE"; }

std::string to_json_line(const TelemetrySample& s) {
  nlohmann::json j;
  j["ts_ms"] = s.ts_ms;
  if (s.state == LinkState::Active && s.pop_latency_ms) j["pop_latency_ms"] = *s.pop_latency_ms;
  j["pop_drop_rate"] = s.pop_drop_rate;
  j["az_deg"] = s.azimuth_deg;
  j["el_deg"] = s.elevation_deg;
  j["bytes_down"] = s.bytes_down;
  j["bytes_up"] = s.bytes_up;
  j["state"] = std::string(to_string(s.state));
  return j.dump();
}

TelemetrySample from_json_line(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("bad telemetry line: ") + e.what());
  }
  TelemetrySample s;
  try {
    s.ts_ms = j.at("ts_ms").get<UnixMs>();
    if (j.contains("pop_latency_ms") && !j["pop_latency_ms"].is_null()) {
      s.pop_latency_ms = j["pop_latency_ms"].get<double>();
    }
    s.pop_drop_rate = j.at("pop_drop_rate").get<double>();
    s.azimuth_deg = j.at("az_deg").get<double>();
    s.elevation_deg = j.at("el_deg").get<double>();
    s.bytes_down = j.at("bytes_down").get<std::uint64_t>();
    s.bytes_up = j.at("bytes_up").get<std::uint64_t>();
    const auto state = j.at("state").get<std::string>();
    if (state == "ACTIVE") {
      s.state = LinkState::Active;
    } else if (state == "OUTAGE") {
      s.state = LinkState::Outage;
    } else {
      fail(ErrorCode::ParseError, "unknown telemetry state " + state);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("bad telemetry record: ") + e.what());
  }
  return s;
}

std::vector<TelemetrySample> read_jsonl(const std::string& path) {
  std::vector<TelemetrySample> out;
  for (const auto& line : split(read_file(path), '\n')) {
    if (!trim(line).empty()) out.push_back(from_json_line(line));
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<TelemetrySample>& samples) {
  std::string text;
  for (const auto& s : samples) text += to_json_line(s) + "\n";
  write_file(path, text);
}

void TerminalModelConfig::validate() const {
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCode::InvalidArgument, std::string(what) + " outside [0,1]");
  };
  prob(p_bad_handover, "p_bad_handover");
  prob(p_outage, "p_outage");
  prob(p_reposition, "p_reposition");
  prob(base_drop_rate, "base_drop_rate");
  prob(transient_drop_rate, "transient_drop_rate");
  if (!(az_band_lo < az_band_hi) || !(el_band_lo < el_band_hi)) {
    fail(ErrorCode::InvalidArgument, "orientation bands must be non-empty");
  }
  if (handover_period_s <= 0 || counter_lag_s < 0 || spike_quanta_mean < 1.0 || outage_quanta < 1) {
    fail(ErrorCode::InvalidArgument, "invalid terminal timing parameters");
  }
  if (spike_multiplier_min < 1.0 || spike_multiplier_max < spike_multiplier_min) {
    fail(ErrorCode::InvalidArgument, "invalid spike multiplier range");
  }
  if (base_latency_ms <= 0) fail(ErrorCode::InvalidArgument, "base latency must be positive");
}

TerminalSim::TerminalSim(TerminalModelConfig config, orbital::GroundSite site, UnixMs start_ms)
    : TerminalSim(config, site, orbital::walker_shell(orbital::ShellConfig{}, start_ms), start_ms) {}

TerminalSim::TerminalSim(TerminalModelConfig config, orbital::GroundSite site,
                         std::vector<orbital::TleRecord> catalog, UnixMs start_ms)
    : config_(std::move(config)),
      site_(site),
      catalog_(std::move(catalog)),
      start_ms_(start_ms),
      spike_rng_(mix(config_.rng_seed ^ 0x51)),
      noise_rng_(mix(config_.rng_seed ^ 0xA7)),
      orient_rng_(mix(config_.rng_seed ^ 0x3C)) {
  config_.validate();
  orbital::validate(site_);
  gateway_ = destination_point(site_, config_.gateway_bearing_deg, config_.gateway_distance_km);

  // Calibrate the terrestrial constant so that a zenith pass at 550 km yields base latency.
  const auto s = orbital::site_ecef(site_);
  const double scale = (orbital::kEarthRadiusKm + 550.0) / s.norm();
  const orbital::Vec3 zenith{s.x * scale, s.y * scale, s.z * scale};
  const double nominal =
      2.0 * (550.0 + (zenith - orbital::site_ecef(gateway_)).norm()) / kLightKmPerMs;
  terrestrial_ms_ = config_.base_latency_ms - nominal;
  if (terrestrial_ms_ < 0) terrestrial_ms_ = 0;

  std::uniform_real_distribution<double> az(config_.az_band_lo, config_.az_band_hi);
  std::uniform_real_distribution<double> el(config_.el_band_lo, config_.el_band_hi);
  az_ = az(orient_rng_);
  el_ = el(orient_rng_);
}

UnixMs TerminalSim::next_tick_ms() const { return start_ms_ + (index_ + 1) * kMsPerSecond; }

void TerminalSim::inject_user_traffic(double rate_bps, UnixMs start_ms, UnixMs duration_ms,
                                      Direction dir) {
  if (rate_bps < 0 || duration_ms < 0) fail(ErrorCode::InvalidArgument, "negative traffic injection");
  const UnixMs end = start_ms + duration_ms;
  for (const auto& in : injections_) {
    if (start_ms < in.end && in.start < end) {
      fail(ErrorCode::OverlapRejected, "injection overlaps an existing one");
    }
  }
  injections_.push_back({start_ms, end, rate_bps, dir});
}

void TerminalSim::set_experiment_traffic(double rate_bps, UnixMs from_ms, Direction dir) {
  if (rate_bps < 0) fail(ErrorCode::InvalidArgument, "negative experiment rate");
  auto it = std::find_if(experiment_.begin(), experiment_.end(),
                         [&](const RateChange& c) { return c.from >= from_ms; });
  experiment_.erase(it, experiment_.end());
  experiment_.push_back({from_ms, rate_bps, dir});
}

void TerminalSim::force_spike(UnixMs start_ms, int quanta, double multiplier) {
  const UnixMs period_ms = config_.handover_period_s * kMsPerSecond;
  if ((start_ms - start_ms_) % period_ms != 0) {
    fail(ErrorCode::InvalidArgument, "forced spikes must start on a handover boundary");
  }
  if (quanta < 1 || multiplier < 1.0) fail(ErrorCode::InvalidArgument, "invalid forced spike");
  forced_.push_back({start_ms, quanta, multiplier});
}

double TerminalSim::traffic_bits(UnixMs a, UnixMs b, Direction dir) const {
  double bits = 0;
  for (const auto& in : injections_) {
    if (in.dir == dir) bits += in.rate_bps * overlap_s(a, b, in.start, in.end);
  }
  for (std::size_t k = 0; k < experiment_.size(); ++k) {
    const auto& c = experiment_[k];
    if (c.dir != dir || c.rate_bps <= 0) continue;
    const UnixMs until = k + 1 < experiment_.size() ? experiment_[k + 1].from
                                                    : std::numeric_limits<UnixMs>::max();
    bits += (c.rate_bps + config_.header_overhead_bps) * overlap_s(a, b, c.from, until);
  }
  return bits;
}

double TerminalSim::bent_pipe_rtt_ms(UnixMs t) const {
  const auto pos = orbital::propagate(*serving_, t);
  const double up = (pos - orbital::site_ecef(site_)).norm();
  const double down = (pos - orbital::site_ecef(gateway_)).norm();
  return 2.0 * (up + down) / kLightKmPerMs;
}

void TerminalSim::on_handover(UnixMs t) {
  const auto vis = orbital::visible_sats(site_, catalog_, t, config_.elevation_mask_deg);
  serving_.reset();
  serving_id_.clear();
  if (!vis.empty()) {
    serving_id_ = vis.front().sat_id;
    for (const auto& rec : catalog_) {
      if (rec.id() == serving_id_) {
        serving_ = rec;
        break;
      }
    }
    handovers_.push_back({t, serving_id_, vis.front().range_km});
  }

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double outage_draw = u01(spike_rng_);
  const double spike_draw = u01(spike_rng_);
  const double mult_draw = u01(spike_rng_);
  std::geometric_distribution<int> extra(1.0 / config_.spike_quanta_mean);
  const int quanta_draw = 1 + extra(spike_rng_);

  if (outage_quanta_left_ > 0) --outage_quanta_left_;
  if (outage_quanta_left_ == 0 && outage_draw < config_.p_outage) {
    outage_quanta_left_ = config_.outage_quanta;
  }

  const bool was_spiking = spike_quanta_left_ > 0;
  if (spike_quanta_left_ > 0) --spike_quanta_left_;

  auto forced = std::find_if(forced_.begin(), forced_.end(),
                             [&](const ForcedSpike& f) { return f.start == t; });
  bool started = false;
  if (forced != forced_.end()) {
    spike_quanta_left_ = forced->quanta;
    spike_multiplier_ = forced->multiplier;
    started = true;
    spikes_.push_back({t, t + forced->quanta * config_.handover_period_s * kMsPerSecond,
                       forced->quanta, forced->multiplier, true});
    forced_.erase(forced);
  } else if (spike_quanta_left_ == 0 && spike_draw < config_.p_bad_handover) {
    spike_quanta_left_ = quanta_draw;
    spike_multiplier_ = config_.spike_multiplier_min +
                        mult_draw * (config_.spike_multiplier_max - config_.spike_multiplier_min);
    started = true;
    spikes_.push_back({t, t + quanta_draw * config_.handover_period_s * kMsPerSecond, quanta_draw,
                       spike_multiplier_, false});
  }
  if (started && was_spiking && !spikes_.empty() && spikes_.size() >= 2) {
    // A new spike replaced a running one: close the previous record here.
    auto& prev = spikes_[spikes_.size() - 2];
    if (prev.end_ms > t) {
      prev.end_ms = t;
      prev.quanta = static_cast<int>((t - prev.start_ms) / (config_.handover_period_s * kMsPerSecond));
    }
  }
  const bool spiking = spike_quanta_left_ > 0;
  spike_edge_pending_ = started || (was_spiking && !spiking);
}

void TerminalSim::walk_orientation() {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Median |N(0, s)| is 0.6745 s, so this makes the median per-second step equal the drift rate.
  std::normal_distribution<double> step(0.0, config_.drift_rate_deg_per_s / 0.6744897501960817);
  const double jump = u01(orient_rng_);
  const double jaz = u01(orient_rng_), jel = u01(orient_rng_);
  const double daz = step(orient_rng_), del = step(orient_rng_);
  if (jump < config_.p_reposition) {
    az_ = config_.az_band_lo + jaz * (config_.az_band_hi - config_.az_band_lo);
    el_ = config_.el_band_lo + jel * (config_.el_band_hi - config_.el_band_lo);
    return;
  }
  auto reflect = [](double v, double lo, double hi) {
    if (v < lo) v = lo + (lo - v);
    if (v > hi) v = hi - (v - hi);
    return std::clamp(v, lo, hi);
  };
  az_ = reflect(az_ + daz, config_.az_band_lo, config_.az_band_hi);
  el_ = reflect(el_ + del, config_.el_band_lo, config_.el_band_hi);
}

void TerminalSim::advance_one() {
  ++index_;
  const UnixMs t = start_ms_ + index_ * kMsPerSecond;
  if (index_ % config_.handover_period_s == 0) {
    on_handover(t);
  } else {
    spike_edge_pending_ = false;
  }
  walk_orientation();

  std::uniform_real_distribution<double> jitter(-config_.noise_ms, config_.noise_ms);
  std::uniform_real_distribution<double> drop(0.0, 2.0 * config_.base_drop_rate);
  const double noise = jitter(noise_rng_);
  const double drop_draw = drop(noise_rng_);

  TelemetrySample s;
  s.ts_ms = t;
  s.azimuth_deg = az_;
  s.elevation_deg = el_;
  if (outage_quanta_left_ > 0 || !serving_) {
    s.state = LinkState::Outage;
    s.pop_drop_rate = 1.0;
  } else {
    double latency = bent_pipe_rtt_ms(t) + terrestrial_ms_ + noise;
    if (const auto& p = config_.orientation_penalty) {
      if (az_ >= p->az_lo && az_ <= p->az_hi && el_ >= p->el_lo && el_ <= p->el_hi) {
        latency += p->extra_ms;
      }
    }
    if (spike_quanta_left_ > 0) latency += (spike_multiplier_ - 1.0) * config_.base_latency_ms;
    s.pop_latency_ms = std::max(latency, 0.1);
    s.pop_drop_rate = spike_edge_pending_ ? config_.transient_drop_rate : drop_draw;
  }

  const double prev_down = true_down_.empty() ? 0.0 : static_cast<double>(true_down_.back());
  const double prev_up = true_up_.empty() ? 0.0 : static_cast<double>(true_up_.back());
  if (index_ == 0) {
    true_down_.push_back(0);
    true_up_.push_back(0);
  } else {
    const UnixMs a = t - kMsPerSecond;
    true_down_.push_back(
        static_cast<std::uint64_t>(std::llround(prev_down + traffic_bits(a, t, Direction::Down) / 8.0)));
    true_up_.push_back(
        static_cast<std::uint64_t>(std::llround(prev_up + traffic_bits(a, t, Direction::Up) / 8.0)));
  }
  const std::int64_t lagged = index_ - config_.counter_lag_s;
  if (lagged >= 0) {
    s.bytes_down = true_down_[static_cast<std::size_t>(lagged)];
    s.bytes_up = true_up_[static_cast<std::size_t>(lagged)];
  }
  latest_ = s;
}

TelemetrySample TerminalSim::step(UnixMs now_ms) {
  if (now_ms < last_now_ms_) fail(ErrorCode::ClockRegression, "terminal clock moved backwards");
  last_now_ms_ = now_ms;
  const auto target = static_cast<std::int64_t>(
      std::llround(static_cast<double>(now_ms - start_ms_) / static_cast<double>(kMsPerSecond)));
  if (target < 0) fail(ErrorCode::InvalidArgument, "step before simulation start");
  if (target < index_) fail(ErrorCode::ClockRegression, "terminal clock moved backwards");
  while (index_ < target) advance_one();
  return *latest_;
}

std::vector<TelemetrySample> TerminalSim::run(int seconds) {
  std::vector<TelemetrySample> out;
  out.reserve(static_cast<std::size_t>(seconds));
  for (int i = 0; i < seconds; ++i) out.push_back(step(next_tick_ms()));
  return out;
}

std::vector<PathHop> PathModel::probe(const TelemetrySample& s, std::mt19937_64& rng) const {
  std::vector<PathHop> hops;
  if (s.state != LinkState::Active || !s.pop_latency_ms) return hops;
  std::uniform_real_distribution<double> jitter(0.0, hop_jitter_ms);
  double rtt = lan_rtt_ms;
  hops.push_back({1, "192.168.1.1", rtt + jitter(rng)});
  rtt += *s.pop_latency_ms;
  hops.push_back({2, "100.64.0.1", rtt + jitter(rng)});
  int index = 3;
  for (double core : starlink_core_rtt_ms) {
    rtt += core;
    hops.push_back({index, "149.19.108." + std::to_string(index - 2), rtt + jitter(rng)});
    ++index;
  }
  rtt += wan_rtt_ms;
  hops.push_back({index, destination, rtt + jitter(rng)});
  return hops;
}

void TelemetryPublisher::publish(const TelemetrySample& s) {
  auto next = std::make_shared<const TelemetrySample>(s);
  std::lock_guard lock(mu_);
  latest_ = std::move(next);
}

std::shared_ptr<const TelemetrySample> TelemetryPublisher::latest() const {
  std::lock_guard lock(mu_);
  return latest_;
}

}  // namespace leobed::terminal

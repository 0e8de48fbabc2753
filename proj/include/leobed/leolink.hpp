#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "leobed/common.hpp"
#include "leobed/terminal_sim.hpp"

namespace leobed::leolink {

inline constexpr std::uint32_t kMss = 1500;

struct ProfileRow {
  UnixMs ts_ms = 0;
  double owd_ms = 0;
  double capacity_bps = 0;
  double loss_prob = 0;
};

// Step function over rows; a row holds until the next one. The last row lasts as long
// as the interval before it (1 s for a single row).
struct LinkProfile {
  std::vector<ProfileRow> rows;
  std::uint64_t buffer_bytes = 0;  // 0: one BDP of the mean profile

  // ts strictly increasing, owd > 0, capacity >= 0, loss in [0, 0.1].
  void validate() const;
  double covered_s() const;
  const ProfileRow& at(double t_s) const;
  double mean_capacity_bps() const;
  double mean_owd_ms() const;
  std::uint64_t effective_buffer() const;
};

// CSV: ts_ms,owd_ms,capacity_bps,loss_prob
LinkProfile read_profile_csv(const std::string& path);
LinkProfile parse_profile_csv(std::string_view text);
void write_profile_csv(std::ostream& out, const LinkProfile& p);

LinkProfile constant_profile(double owd_ms, double capacity_bps, double loss_prob, double duration_s);

// Handover-slotted LEO-like link: every slot redraws owd, capacity and loss; some slots
// carry a latency spike.
struct SyntheticLeoConfig {
  double duration_s = 120;
  int slot_s = 15;
  double owd_lo_ms = 12, owd_hi_ms = 30;
  double capacity_lo_bps = 20e6, capacity_hi_bps = 40e6;
  double loss_lo = 0.02, loss_hi = 0.05;
  double p_spike = 0.1;
  double spike_mult_lo = 2.0, spike_mult_hi = 3.0;
};
LinkProfile synthetic_leo_profile(const SyntheticLeoConfig& cfg, std::uint64_t seed);

// One row per telemetry second: owd = half the PoP latency plus a terrestrial share,
// loss from the drop rate (capped at 0.1), capacity an AR(1) walk around the mean. Outage
// seconds keep the previous owd and carry no capacity.
struct TelemetryProfileConfig {
  double capacity_bps = 100e6;
  double capacity_jitter = 0.15;  // relative sd of the walk
  double extra_owd_ms = 2.0;
  std::uint64_t seed = 1;
};
LinkProfile profile_from_telemetry(const std::vector<terminal::TelemetrySample>& samples,
                                   const TelemetryProfileConfig& cfg = {});

enum class CcKind { Reno, Cubic, Bbr2 };
std::string_view to_string(CcKind k);
CcKind parse_cc_kind(std::string_view s);

struct CcParams {
  double probe_rtt_win_ms = 10'000;  // alpha
  double loss_thresh = 0.02;         // beta
  // alpha > 0, beta in (0, 0.5).
  void validate() const;
  bool operator==(const CcParams&) const = default;
};

enum class BbrState { Startup, Drain, ProbeBwDown, ProbeBwCruise, ProbeBwUp, ProbeRtt };
std::string_view to_string(BbrState s);

struct SecondRow {
  int second = 0;
  double goodput_bps = 0;  // bytes leaving the bottleneck intact
  double srtt_ms = 0;
  int loss_events = 0;
};

struct FlowStats {
  CcKind kind = CcKind::Bbr2;
  CcParams params;
  std::vector<SecondRow> seconds;
  double mean_tput_bps = 0;
  double p95_rtt_ms = 0;
  std::vector<double> probe_rtt_entries_s;
  std::vector<double> srtt_at_probe_rtt_ms;
  std::uint64_t sent = 0, acked = 0, lost = 0;  // packets, sender view

  double mean_tput_after(double skip_s) const;
};

// Physical packet accounting at the bottleneck.
struct LinkCounters {
  std::uint64_t injected = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped_queue = 0;
  std::uint64_t dropped_random = 0;
  std::uint64_t queued = 0;
  std::uint64_t in_service = 0;
};

struct FlowSpec {
  CcKind kind = CcKind::Bbr2;
  CcParams params;
  double start_s = 0;
};

struct SimOptions {
  bool check_invariants = false;  // verify conservation after every event (slow)
};

struct SimResult {
  std::vector<FlowStats> flows;
  LinkCounters link;
  std::vector<double> capacity_bps;  // per simulated second, time-averaged
};

// Packet-level run of several flows over one droptail bottleneck. Throws ProfileExhausted
// when the profile is shorter than the run.
SimResult simulate(const std::vector<FlowSpec>& flows, const LinkProfile& profile, double duration_s,
                   std::uint64_t seed, const SimOptions& opt = {});

FlowStats run_flow(CcKind kind, const CcParams& params, const LinkProfile& profile, double duration_s,
                   std::uint64_t seed);

// ---- (alpha, beta) sweep ----

struct SweepCell {
  double alpha_ms = 0;
  double beta = 0;
  double mean_tput_bps = 0;  // averaged over profiles x seeds
  double p95_rtt_ms = 0;
  double tput_improvement_pct = 0;   // mean of per-run (cell - default) / default
  double p95_rtt_inflation_pct = 0;
  bool is_default = false;
};

struct SweepOptions {
  double duration_s = 60;
  std::vector<std::uint64_t> seeds{1};
  unsigned threads = 0;  // 0: hardware concurrency
  double inflation_limit_pct = 10;
  CcParams baseline;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // alpha-major in grid order
  SweepCell baseline;
  std::optional<SweepCell> best;  // max improvement with inflation under the limit

  const SweepCell& cell(double alpha_ms, double beta) const;
};

// Throws EmptyGrid.
SweepResult sweep(const std::vector<double>& alphas_ms, const std::vector<double>& betas,
                  const std::vector<LinkProfile>& profiles, const SweepOptions& opt = {});
// alpha_ms,beta_pct,tput_improvement_pct,p95_rtt_inflation_pct
void write_sweep_csv(std::ostream& out, const SweepResult& r);

// ---- fairness ----

struct FairnessConfig {
  CcKind a_kind = CcKind::Cubic;
  int n_a = 8;
  CcParams a_params;
  CcKind b_kind = CcKind::Bbr2;
  int n_b = 8;
  CcParams b_params;
  double duration_s = 60;
  double warmup_s = 5;
  std::vector<std::uint64_t> seeds{1};
  unsigned threads = 0;
};

struct FairnessResult {
  std::vector<double> ratios;  // sum(a) / sum(b) per second after warmup, all seeds
  double median = 0;
};

FairnessResult fairness(const FairnessConfig& cfg, const LinkProfile& profile);

}  // namespace leobed::leolink

#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "leobed/common.hpp"
#include "leobed/experiment.hpp"
#include "leobed/terminal_sim.hpp"

namespace leobed::dissect {

struct LatencyStats {
  std::size_t count = 0;  // answered probes
  std::size_t lost = 0;
  double min = 0;
  double median = 0;
  double p95 = 0;
  double p99 = 0;
  double max = 0;
};

// Nearest-rank statistics. nullopt entries are lost probes. Throws EmptyInput when
// nothing was answered.
LatencyStats percentiles(const std::vector<std::optional<double>>& samples);
LatencyStats percentiles(const std::vector<double>& samples);
Json to_json(const LatencyStats& s);

struct CdfPoint {
  double value = 0;
  double cum_prob = 0;
};

// Empirical CDF: one point per distinct value, cum_prob = fraction of samples <= value.
std::vector<CdfPoint> cdf(std::vector<double> samples);
void write_cdf_csv(std::ostream& out, const std::vector<CdfPoint>& points);

// ---- agent CSV inputs ----

struct PingRow {
  UnixMs ts_ms = 0;
  std::optional<double> rtt_ms;
};

struct HopRow {
  UnixMs ts_ms = 0;
  int hop_index = 0;
  std::string hop_addr;
  std::optional<double> rtt_ms;  // empty for "*"
};

std::vector<PingRow> read_ping_csv(const std::string& path);
std::vector<HopRow> read_traceroute_csv(const std::string& path);
std::vector<HopRow> parse_traceroute_csv(std::string_view text);

// One traceroute probe: the hops sharing a ts_ms, ordered by hop index.
struct TracerouteRun {
  UnixMs ts_ms = 0;
  std::vector<HopRow> hops;
};
std::vector<TracerouteRun> group_runs(const std::vector<HopRow>& rows);

// ---- segments ----

inline constexpr int kSegments = 6;  // S1 .. S6

// Ordered rules, first match wins. A rule may constrain hop index range, address prefix
// and ASN; unset fields match anything.
struct SegmentRule {
  int segment = 0;  // 1..6
  std::optional<int> hop_lo, hop_hi;
  std::optional<std::string> prefix;
  std::optional<int> asn;
};

class SegmentMap {
 public:
  SegmentMap() = default;
  SegmentMap(std::vector<SegmentRule> rules, std::map<std::string, int> asn_prefixes = {});

  // {"rules":[{"segment":"S2","hop_index":2 | [lo,hi],"prefix":"100.64.","asn":14593}],
  //  "asn_prefixes":{"149.19.108.":14593}}
  static SegmentMap from_json(const Json& j);
  static SegmentMap load(const std::string& path);
  // Layout of the simulated path: router, PoP, three core hops, destination.
  static SegmentMap default_map();

  std::optional<int> segment_of(int hop_index, const std::string& addr) const;
  // Longest matching prefix in the static ASN table.
  std::optional<int> asn_of(const std::string& addr) const;
  const std::vector<SegmentRule>& rules() const { return rules_; }

 private:
  std::vector<SegmentRule> rules_;
  std::map<std::string, int> asn_prefixes_;
};

std::string segment_label(int segment);
int parse_segment_label(std::string_view label);

struct HopMedian {
  int hop_index = 0;
  std::string addr;
  double median_rtt_ms = 0;
  int segment = 0;
};

struct SegmentLatency {
  int segment = 0;
  int last_hop = 0;
  double one_way_ms = 0;
  bool clamped = false;  // the raw difference was negative
};

struct SegmentReport {
  std::vector<HopMedian> hops;
  std::vector<SegmentLatency> segments;  // only segments present on the path, in order
  double end_to_end_one_way_ms = 0;
  std::size_t runs_used = 0;
  std::size_t runs_skipped = 0;  // did not reach the destination

  double share(int segment) const;  // fraction of end-to-end one-way latency
};

// Hop medians across runs first, then one-way latency per segment from the difference of
// the median RTTs at segment boundaries. Throws EmptyInput, UncoveredHop, SegmentOrder.
SegmentReport segment_latencies(const std::vector<TracerouteRun>& runs, const SegmentMap& map);
void write_segments_csv(std::ostream& out, const SegmentReport& r);

// ---- spikes ----

struct SpikeConfig {
  double k_mult = 2.0;
  int min_persist_s = 3;
  int window_s = 120;  // trailing median baseline
  int max_gap_s = 2;   // dips shorter than this do not split an interval
};

struct SpikeInterval {
  UnixMs start_ms = 0;
  UnixMs end_ms = 0;  // exclusive
  double duration_s = 0;
  double quantized_s = 0;  // nearest multiple of 15 s
  double peak_ms = 0;
  double baseline_ms = 0;  // trailing median at onset
};

struct LatencyPoint {
  UnixMs ts_ms = 0;
  std::optional<double> latency_ms;
};

// A spike opens when latency reaches k_mult x the trailing median of non-spike samples and
// stays open while latency holds above (1 + k_mult)/2 x that baseline. Needs at least 60 s
// of series (SeriesTooShort).
std::vector<SpikeInterval> detect_spikes(const std::vector<LatencyPoint>& series, const SpikeConfig& cfg = {});
std::vector<LatencyPoint> latency_series(const std::vector<terminal::TelemetrySample>& samples);
std::vector<LatencyPoint> latency_series(const std::vector<PingRow>& rows);
void write_spikes_csv(std::ostream& out, const std::vector<SpikeInterval>& spikes);

// ---- orientation heatmap ----

struct HeatmapCell {
  double az_bin = 0;  // lower edge
  double el_bin = 0;
  std::size_t count = 0;
  double p95_ms = 0;
  bool low_confidence = false;
};

// Samples without a latency reading are skipped. Cells ordered by (az, el). Throws
// EmptyInput on an empty series.
std::vector<HeatmapCell> orientation_heatmap(const std::vector<terminal::TelemetrySample>& samples,
                                             double az_bin_deg, double el_bin_deg, std::size_t min_count = 30);
void write_heatmap_csv(std::ostream& out, const std::vector<HeatmapCell>& cells);

}  // namespace leobed::dissect

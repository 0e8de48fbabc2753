#include "leobed/dissect.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include <fmt/format.h>

#include "leobed/error.hpp"

namespace leobed::dissect {

namespace {

std::optional<double> parse_rtt(const std::string& field) {
  const std::string f = trim(field);
  if (f.empty() || f == "*") return std::nullopt;
  try {
    return std::stod(f);
  } catch (const std::exception&) {
    fail(ErrorCode::ParseError, "bad rtt value '" + f + "'");
  }
}

UnixMs parse_ts(const std::string& field) {
  try {
    return std::stoll(trim(field));
  } catch (const std::exception&) {
    fail(ErrorCode::ParseError, "bad timestamp '" + field + "'");
  }
}

std::vector<HopRow> hops_from_table(const CsvTable& t) {
  const auto c_ts = t.column("ts_ms"), c_hop = t.column("hop_index"), c_addr = t.column("hop_addr"),
             c_rtt = t.column("rtt_ms");
  std::vector<HopRow> out;
  out.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    if (row.size() <= std::max({c_ts, c_hop, c_addr, c_rtt})) fail(ErrorCode::ParseError, "short traceroute row");
    HopRow h;
    h.ts_ms = parse_ts(row[c_ts]);
    h.hop_index = static_cast<int>(parse_ts(row[c_hop]));
    h.hop_addr = trim(row[c_addr]);
    h.rtt_ms = parse_rtt(row[c_rtt]);
    out.push_back(std::move(h));
  }
  return out;
}

std::string fmt_ms(double v) { return fmt::format("{:.6g}", v); }

}  // namespace

LatencyStats percentiles(const std::vector<std::optional<double>>& samples) {
  std::vector<double> answered;
  answered.reserve(samples.size());
  for (const auto& s : samples) {
    if (s) answered.push_back(*s);
  }
  if (answered.empty()) fail(ErrorCode::EmptyInput, "no answered probes");
  LatencyStats st = percentiles(answered);
  st.lost = samples.size() - answered.size();
  return st;
}

LatencyStats percentiles(const std::vector<double>& samples) {
  if (samples.empty()) fail(ErrorCode::EmptyInput, "no samples");
  std::vector<double> v = samples;
  std::sort(v.begin(), v.end());
  LatencyStats st;
  st.count = v.size();
  st.min = v.front();
  st.median = nearest_rank(v, 50);
  st.p95 = nearest_rank(v, 95);
  st.p99 = nearest_rank(v, 99);
  st.max = v.back();
  return st;
}

Json to_json(const LatencyStats& s) {
  return {{"count", s.count}, {"lost", s.lost},   {"min_ms", s.min}, {"median_ms", s.median},
          {"p95_ms", s.p95},  {"p99_ms", s.p99}, {"max_ms", s.max}};
}

std::vector<CdfPoint> cdf(std::vector<double> samples) {
  if (samples.empty()) fail(ErrorCode::EmptyInput, "no samples");
  std::sort(samples.begin(), samples.end());
  std::vector<CdfPoint> out;
  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i + 1 < samples.size() && samples[i + 1] == samples[i]) continue;
    out.push_back({samples[i], static_cast<double>(i + 1) / n});
  }
  return out;
}

void write_cdf_csv(std::ostream& out, const std::vector<CdfPoint>& points) {
  out << "value,cum_prob\n";
  for (const auto& p : points) out << fmt_ms(p.value) << ',' << fmt::format("{:.6f}", p.cum_prob) << '\n';
}

std::vector<PingRow> read_ping_csv(const std::string& path) {
  const auto t = read_csv(path);
  const auto c_ts = t.column("ts_ms"), c_rtt = t.column("rtt_ms");
  const auto c_lost = t.column("lost");
  std::vector<PingRow> out;
  for (const auto& row : t.rows) {
    if (row.size() <= std::max({c_ts, c_rtt, c_lost})) fail(ErrorCode::ParseError, "short ping row");
    PingRow p;
    p.ts_ms = parse_ts(row[c_ts]);
    if (trim(row[c_lost]) != "1") p.rtt_ms = parse_rtt(row[c_rtt]);
    out.push_back(p);
  }
  return out;
}

std::vector<HopRow> read_traceroute_csv(const std::string& path) { return hops_from_table(read_csv(path)); }

std::vector<HopRow> parse_traceroute_csv(std::string_view text) { return hops_from_table(parse_csv(text)); }

std::vector<TracerouteRun> group_runs(const std::vector<HopRow>& rows) {
  std::map<UnixMs, TracerouteRun> by_ts;
  for (const auto& h : rows) {
    auto& run = by_ts[h.ts_ms];
    run.ts_ms = h.ts_ms;
    run.hops.push_back(h);
  }
  std::vector<TracerouteRun> out;
  for (auto& [_, r] : by_ts) {
    std::stable_sort(r.hops.begin(), r.hops.end(),
                     [](const HopRow& a, const HopRow& b) { return a.hop_index < b.hop_index; });
    out.push_back(std::move(r));
  }
  return out;
}

// ---- segment map ----

SegmentMap::SegmentMap(std::vector<SegmentRule> rules, std::map<std::string, int> asn_prefixes)
    : rules_(std::move(rules)), asn_prefixes_(std::move(asn_prefixes)) {
  for (const auto& r : rules_) {
    if (r.segment < 1 || r.segment > kSegments) fail(ErrorCode::InvalidArgument, "segment must be S1..S6");
  }
}

std::string segment_label(int segment) { return "S" + std::to_string(segment); }

int parse_segment_label(std::string_view label) {
  if (label.size() == 2 && (label[0] == 'S' || label[0] == 's') && label[1] >= '1' && label[1] <= '6') {
    return label[1] - '0';
  }
  fail(ErrorCode::ParseError, "bad segment label '" + std::string(label) + "'");
}

SegmentMap SegmentMap::from_json(const Json& j) {
  try {
    std::vector<SegmentRule> rules;
    for (const auto& r : j.at("rules")) {
      SegmentRule rule;
      rule.segment = parse_segment_label(r.at("segment").get<std::string>());
      if (r.contains("hop_index")) {
        const auto& h = r["hop_index"];
        if (h.is_array()) {
          rule.hop_lo = h.at(0).get<int>();
          if (!h.at(1).is_null()) rule.hop_hi = h.at(1).get<int>();
        } else {
          rule.hop_lo = rule.hop_hi = h.get<int>();
        }
      }
      if (r.contains("prefix")) rule.prefix = r["prefix"].get<std::string>();
      if (r.contains("asn")) rule.asn = r["asn"].get<int>();
      rules.push_back(rule);
    }
    std::map<std::string, int> asn;
    if (j.contains("asn_prefixes")) {
      for (const auto& [prefix, n] : j["asn_prefixes"].items()) asn[prefix] = n.get<int>();
    }
    return SegmentMap(std::move(rules), std::move(asn));
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, std::string("bad segment map: ") + e.what());
  }
}

SegmentMap SegmentMap::load(const std::string& path) {
  try {
    return from_json(Json::parse(read_file(path)));
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, path + ": " + e.what());
  }
}

SegmentMap SegmentMap::default_map() {
  constexpr int kStarlinkAsn = 14593;
  std::vector<SegmentRule> rules{
      {1, 1, 1, std::nullopt, std::nullopt},
      {2, 2, 2, std::nullopt, std::nullopt},
      {3, 3, 3, std::nullopt, kStarlinkAsn},
      {4, 4, 4, std::nullopt, kStarlinkAsn},
      {5, 5, std::nullopt, std::nullopt, kStarlinkAsn},
      {6, 3, std::nullopt, std::nullopt, std::nullopt},
  };
  return SegmentMap(std::move(rules), {{"100.64.", kStarlinkAsn}, {"149.19.108.", kStarlinkAsn}});
}

std::optional<int> SegmentMap::asn_of(const std::string& addr) const {
  std::optional<int> best;
  std::size_t best_len = 0;
  for (const auto& [prefix, asn] : asn_prefixes_) {
    if (addr.starts_with(prefix) && prefix.size() >= best_len) {
      best = asn;
      best_len = prefix.size();
    }
  }
  return best;
}

std::optional<int> SegmentMap::segment_of(int hop_index, const std::string& addr) const {
  for (const auto& r : rules_) {
    if (r.hop_lo && hop_index < *r.hop_lo) continue;
    if (r.hop_hi && hop_index > *r.hop_hi) continue;
    if (r.prefix && !addr.starts_with(*r.prefix)) continue;
    if (r.asn && asn_of(addr) != r.asn) continue;
    return r.segment;
  }
  return std::nullopt;
}

// ---- segments ----

double SegmentReport::share(int segment) const {
  if (!(end_to_end_one_way_ms > 0)) return 0;
  for (const auto& s : segments) {
    if (s.segment == segment) return s.one_way_ms / end_to_end_one_way_ms;
  }
  return 0;
}

SegmentReport segment_latencies(const std::vector<TracerouteRun>& runs, const SegmentMap& map) {
  if (runs.empty()) fail(ErrorCode::EmptyInput, "no traceroute runs");
  int dest_index = 0;
  for (const auto& r : runs) {
    for (const auto& h : r.hops) dest_index = std::max(dest_index, h.hop_index);
  }
  SegmentReport rep;
  std::map<int, std::vector<double>> rtts;
  std::map<int, std::map<std::string, int>> addrs;
  for (const auto& r : runs) {
    const bool reached = std::any_of(r.hops.begin(), r.hops.end(), [&](const HopRow& h) {
      return h.hop_index == dest_index && h.rtt_ms;
    });
    if (!reached) {
      ++rep.runs_skipped;
      continue;
    }
    ++rep.runs_used;
    for (const auto& h : r.hops) {
      if (!h.rtt_ms) continue;
      rtts[h.hop_index].push_back(*h.rtt_ms);
      addrs[h.hop_index][h.hop_addr] += 1;
    }
  }
  if (rep.runs_used == 0) fail(ErrorCode::EmptyInput, "no traceroute run reached the destination");

  int last_segment = 0;
  for (auto& [index, values] : rtts) {
    const auto& seen = addrs[index];
    const auto common = std::max_element(seen.begin(), seen.end(), [](const auto& a, const auto& b) {
      return a.second < b.second;
    });
    HopMedian hm;
    hm.hop_index = index;
    hm.addr = common->first;
    hm.median_rtt_ms = median_of(values);
    const auto seg = map.segment_of(index, hm.addr);
    if (!seg) fail(ErrorCode::UncoveredHop, "hop " + std::to_string(index) + " (" + hm.addr + ") maps to no segment");
    if (*seg < last_segment) {
      fail(ErrorCode::SegmentOrder, "hop " + std::to_string(index) + " maps to " + segment_label(*seg) + " after " +
                                        segment_label(last_segment));
    }
    hm.segment = last_segment = *seg;
    rep.hops.push_back(hm);
  }

  double prev = 0;
  for (std::size_t i = 0; i < rep.hops.size(); ++i) {
    const auto& h = rep.hops[i];
    if (i + 1 < rep.hops.size() && rep.hops[i + 1].segment == h.segment) continue;
    SegmentLatency s;
    s.segment = h.segment;
    s.last_hop = h.hop_index;
    const double diff = (h.median_rtt_ms - prev) / 2.0;
    s.clamped = diff < 0;
    s.one_way_ms = std::max(0.0, diff);
    prev = std::max(prev, h.median_rtt_ms);
    rep.segments.push_back(s);
  }
  rep.end_to_end_one_way_ms = rep.hops.back().median_rtt_ms / 2.0;
  return rep;
}

void write_segments_csv(std::ostream& out, const SegmentReport& r) {
  out << "segment,last_hop,one_way_ms,share,clamped\n";
  for (const auto& s : r.segments) {
    out << segment_label(s.segment) << ',' << s.last_hop << ',' << fmt_ms(s.one_way_ms) << ','
        << fmt::format("{:.4f}", r.share(s.segment)) << ',' << (s.clamped ? 1 : 0) << '\n';
  }
}

// ---- spikes ----

std::vector<LatencyPoint> latency_series(const std::vector<terminal::TelemetrySample>& samples) {
  std::vector<LatencyPoint> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.ts_ms, s.pop_latency_ms});
  return out;
}

std::vector<LatencyPoint> latency_series(const std::vector<PingRow>& rows) {
  std::vector<LatencyPoint> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back({r.ts_ms, r.rtt_ms});
  return out;
}

std::vector<SpikeInterval> detect_spikes(const std::vector<LatencyPoint>& series, const SpikeConfig& cfg) {
  if (cfg.window_s < 2 || cfg.min_persist_s < 1 || cfg.max_gap_s < 0 || !(cfg.k_mult > 1)) {
    fail(ErrorCode::InvalidArgument, "invalid spike detector configuration");
  }
  if (series.size() < 2 || series.back().ts_ms - series.front().ts_ms + kMsPerSecond < 60 * kMsPerSecond) {
    fail(ErrorCode::SeriesTooShort, "spike detection needs at least 60 s of series");
  }
  std::vector<UnixMs> gaps;
  for (std::size_t i = 1; i < series.size(); ++i) gaps.push_back(series[i].ts_ms - series[i - 1].ts_ms);
  std::nth_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2), gaps.end());
  const UnixMs cadence = std::max<UnixMs>(1, gaps[gaps.size() / 2]);

  const UnixMs window = cfg.window_s * kMsPerSecond;
  const std::size_t min_history =
      std::max<std::size_t>(1, static_cast<std::size_t>(window / cadence / 2));
  const UnixMs max_step = (cfg.max_gap_s + 1) * cadence;
  const double exit_mult = (1.0 + cfg.k_mult) / 2.0;

  // Trailing baseline of samples not inside a spike.
  std::deque<std::pair<UnixMs, double>> calm;
  std::vector<double> buf;
  std::vector<SpikeInterval> out;
  std::optional<SpikeInterval> cur;
  UnixMs last_hit = 0;

  auto close = [&] {
    cur->end_ms = last_hit + cadence;
    cur->duration_s = static_cast<double>(cur->end_ms - cur->start_ms) / 1000.0;
    cur->quantized_s = std::max(15.0, std::round(cur->duration_s / 15.0) * 15.0);
    if (cur->duration_s >= cfg.min_persist_s) out.push_back(*cur);
    cur.reset();
  };

  for (const auto& p : series) {
    if (cur && p.ts_ms - last_hit > max_step) close();
    while (!calm.empty() && calm.front().first < p.ts_ms - window) calm.pop_front();
    if (!p.latency_ms) continue;
    const double v = *p.latency_ms;
    if (calm.size() < min_history) {
      calm.emplace_back(p.ts_ms, v);
      continue;
    }
    buf.clear();
    for (const auto& c : calm) buf.push_back(c.second);
    const double baseline = cur ? cur->baseline_ms : median_of(buf);
    if (cur ? v >= exit_mult * baseline : v >= cfg.k_mult * baseline) {
      if (!cur) {
        cur = SpikeInterval{};
        cur->start_ms = p.ts_ms;
        cur->baseline_ms = baseline;
      }
      cur->peak_ms = std::max(cur->peak_ms, v);
      last_hit = p.ts_ms;
    } else {
      calm.emplace_back(p.ts_ms, v);
    }
  }
  if (cur) close();
  return out;
}

void write_spikes_csv(std::ostream& out, const std::vector<SpikeInterval>& spikes) {
  out << "start_ms,end_ms,duration_s,quantized_s,peak_ms,baseline_ms\n";
  for (const auto& s : spikes) {
    out << s.start_ms << ',' << s.end_ms << ',' << fmt_ms(s.duration_s) << ',' << fmt_ms(s.quantized_s) << ','
        << fmt_ms(s.peak_ms) << ',' << fmt_ms(s.baseline_ms) << '\n';
  }
}

// ---- heatmap ----

std::vector<HeatmapCell> orientation_heatmap(const std::vector<terminal::TelemetrySample>& samples,
                                             double az_bin_deg, double el_bin_deg, std::size_t min_count) {
  if (!(az_bin_deg > 0) || !(el_bin_deg > 0)) fail(ErrorCode::InvalidArgument, "bin sizes must be positive");
  if (samples.empty()) fail(ErrorCode::EmptyInput, "no telemetry samples");
  std::map<std::pair<long, long>, std::vector<double>> bins;
  for (const auto& s : samples) {
    if (!s.pop_latency_ms) continue;
    const auto a = static_cast<long>(std::floor(s.azimuth_deg / az_bin_deg));
    const auto e = static_cast<long>(std::floor(s.elevation_deg / el_bin_deg));
    bins[{a, e}].push_back(*s.pop_latency_ms);
  }
  std::vector<HeatmapCell> out;
  for (auto& [key, values] : bins) {
    std::sort(values.begin(), values.end());
    HeatmapCell c;
    c.az_bin = static_cast<double>(key.first) * az_bin_deg;
    c.el_bin = static_cast<double>(key.second) * el_bin_deg;
    c.count = values.size();
    c.p95_ms = nearest_rank(values, 95);
    c.low_confidence = c.count < min_count;
    out.push_back(c);
  }
  return out;
}

void write_heatmap_csv(std::ostream& out, const std::vector<HeatmapCell>& cells) {
  out << "az_bin,el_bin,count,p95_ms\n";
  for (const auto& c : cells) {
    out << fmt_ms(c.az_bin) << ',' << fmt_ms(c.el_bin) << ',' << c.count << ',' << fmt_ms(c.p95_ms) << '\n';
  }
}

}  // namespace leobed::dissect

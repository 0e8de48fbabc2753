#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "leobed/terminal_sim.hpp"
#include "support.hpp"

using namespace leobed;
using namespace leobed::terminal;

namespace {

constexpr UnixMs kStart = 1672574400000;
const orbital::GroundSite kSite{41.39, 2.17, 30.0};

TerminalModelConfig quiet(std::uint64_t seed) {
  TerminalModelConfig c;
  c.rng_seed = seed;
  c.p_bad_handover = 0.0;
  return c;
}

std::vector<double> latencies(const std::vector<TelemetrySample>& v) {
  std::vector<double> out;
  for (const auto& s : v) {
    if (s.pop_latency_ms) out.push_back(*s.pop_latency_ms);
  }
  return out;
}

}  // namespace

TEST_CASE("spike-free two hour run has a 30-50 ms median") {
  TerminalSim sim(quiet(3), kSite, kStart);
  const auto samples = sim.run(7200);
  const double med = median_of(latencies(samples));
  CHECK(med >= 30.0);
  CHECK(med <= 50.0);
  CHECK(sim.spikes().empty());
}

TEST_CASE("forced bad handover gives a >=2x segment lasting a multiple of 15 s") {
  TerminalSim sim(quiet(5), kSite, kStart);
  sim.force_spike(kStart + 600'000, 2, 2.5);
  const auto samples = sim.run(1200);
  const double med = median_of(latencies(samples));
  int longest = 0, current = 0;
  for (const auto& s : samples) {
    if (s.pop_latency_ms && *s.pop_latency_ms >= 2.0 * med) {
      longest = std::max(longest, ++current);
    } else {
      current = 0;
    }
  }
  CHECK(longest == 30);
  REQUIRE(sim.spikes().size() == 1);
  CHECK(sim.spikes()[0].start_ms == kStart + 600'000);
  CHECK(sim.spikes()[0].end_ms == kStart + 630'000);

  SUBCASE("transient loss at both spike edges") {
    const auto at = [&](UnixMs t) { return samples[static_cast<std::size_t>((t - kStart) / 1000)]; };
    CHECK(at(kStart + 600'000).pop_drop_rate == doctest::Approx(0.08));
    CHECK(at(kStart + 630'000).pop_drop_rate == doctest::Approx(0.08));
    CHECK(at(kStart + 615'000).pop_drop_rate < 0.01);
  }
  CHECK_THROWS_CODE(sim.force_spike(kStart + 1'500'500, 1, 2.0), ErrorCode::InvalidArgument);
}

TEST_CASE("zero offered traffic leaves counters flat") {
  TerminalSim sim(TerminalModelConfig{}, kSite, kStart);
  for (const auto& s : sim.run(300)) {
    CHECK(s.bytes_down == 0);
    CHECK(s.bytes_up == 0);
  }
}

TEST_CASE("clock regression is rejected") {
  TerminalSim sim(quiet(1), kSite, kStart);
  sim.step(kStart + 10'000);
  CHECK_THROWS_CODE(sim.step(kStart + 9'000), ErrorCode::ClockRegression);
}

TEST_CASE("user traffic injection") {
  SUBCASE("40 Mbps for 10 s") {
    TerminalSim sim(quiet(1), kSite, kStart);
    sim.inject_user_traffic(40e6, kStart + 20'000, 10'000);
    const auto v = sim.run(60);
    const double delta = static_cast<double>(v.back().bytes_down - v.front().bytes_down);
    CHECK(delta == doctest::Approx(50'000'000.0).epsilon(0.01));
  }
  SUBCASE("rate zero changes nothing") {
    TerminalSim sim(quiet(1), kSite, kStart);
    sim.inject_user_traffic(0.0, kStart + 20'000, 10'000);
    const auto v = sim.run(60);
    CHECK(v.back().bytes_down == 0);
  }
  SUBCASE("disjoint injections add up") {
    TerminalSim a(quiet(1), kSite, kStart), b(quiet(1), kSite, kStart), both(quiet(1), kSite, kStart);
    a.inject_user_traffic(10e6, kStart + 5'000, 7'000);
    b.inject_user_traffic(25e6, kStart + 30'000, 4'500);
    both.inject_user_traffic(10e6, kStart + 5'000, 7'000);
    both.inject_user_traffic(25e6, kStart + 30'000, 4'500);
    const auto ra = a.run(60), rb = b.run(60), rboth = both.run(60);
    const double sum = static_cast<double>(ra.back().bytes_down + rb.back().bytes_down);
    CHECK(static_cast<double>(rboth.back().bytes_down) == doctest::Approx(sum).epsilon(1e-9));
  }
  SUBCASE("overlap is rejected") {
    TerminalSim sim(quiet(1), kSite, kStart);
    sim.inject_user_traffic(1e6, kStart, 10'000);
    CHECK_THROWS_CODE(sim.inject_user_traffic(1e6, kStart + 9'999, 10), ErrorCode::OverlapRejected);
    CHECK_NOTHROW(sim.inject_user_traffic(1e6, kStart + 10'000, 10));
  }
}

TEST_CASE("counters are published one second stale") {
  TerminalSim sim(quiet(2), kSite, kStart);
  const UnixMs t = kStart + 30'000;
  sim.inject_user_traffic(40e6, t, 60'000);
  const auto v = sim.run(120);
  std::optional<UnixMs> first;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i].bytes_down > v[i - 1].bytes_down) {
      first = v[i].ts_ms;
      break;
    }
  }
  REQUIRE(first);
  CHECK(*first >= t + 1000 - 1000);
  CHECK(*first <= t + 1000 + 1000);
  // Steady-state per-second delta is the full 40 Mbps.
  CHECK(static_cast<double>(v[60].bytes_down - v[59].bytes_down) == doctest::Approx(5e6).epsilon(1e-6));
}

TEST_CASE("outage windows drop the latency field") {
  TerminalModelConfig c = quiet(4);
  c.p_outage = 1.0;
  c.outage_quanta = 1;
  TerminalSim sim(c, kSite, kStart);
  const auto s = sim.step(kStart + 5'000);
  CHECK(s.state == LinkState::Outage);
  CHECK(!s.pop_latency_ms);
  const auto j = nlohmann::json::parse(to_json_line(s));
  CHECK(!j.contains("pop_latency_ms"));
  CHECK(j["state"] == "OUTAGE");
}

TEST_CASE("telemetry JSON uses the documented keys") {
  TerminalSim sim(quiet(9), kSite, kStart);
  const auto s = sim.step(kStart + 3'000);
  const auto j = nlohmann::json::parse(to_json_line(s));
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  std::sort(keys.begin(), keys.end());
  CHECK(keys == std::vector<std::string>{"az_deg", "bytes_down", "bytes_up", "el_deg",
                                         "pop_drop_rate", "pop_latency_ms", "state", "ts_ms"});
  CHECK(from_json_line(to_json_line(s)) == s);
}

TEST_CASE("stream invariants") {
  TerminalModelConfig c;
  c.rng_seed = 21;
  c.p_bad_handover = 0.05;
  TerminalSim sim(c, kSite, kStart);
  const auto v = sim.run(3600);

  for (std::size_t i = 1; i < v.size(); ++i) {
    CHECK(v[i].ts_ms - v[i - 1].ts_ms == 1000);
    CHECK(v[i].bytes_down >= v[i - 1].bytes_down);
  }
  for (const auto& h : sim.handovers()) CHECK((h.ts_ms - kStart) % 15'000 == 0);
  REQUIRE(!sim.spikes().empty());
  for (const auto& sp : sim.spikes()) {
    CHECK((sp.end_ms - sp.start_ms) % 15'000 == 0);
    CHECK((sp.start_ms - kStart) % 15'000 == 0);
  }

  std::vector<double> steps;
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(v[i].azimuth_deg >= c.az_band_lo);
    CHECK(v[i].azimuth_deg <= c.az_band_hi);
    CHECK(v[i].elevation_deg >= c.el_band_lo);
    CHECK(v[i].elevation_deg <= c.el_band_hi);
    if (i > 0) steps.push_back(std::abs(v[i].azimuth_deg - v[i - 1].azimuth_deg));
  }
  const double med_step = median_of(steps);
  CHECK(med_step >= c.drift_rate_deg_per_s / 2.0);
  CHECK(med_step <= c.drift_rate_deg_per_s * 2.0);
}

TEST_CASE("same seed gives a bit-identical stream") {
  TerminalModelConfig c;
  c.rng_seed = 77;
  c.p_bad_handover = 0.1;
  TerminalSim a(c, kSite, kStart), b(c, kSite, kStart);
  a.inject_user_traffic(3e6, kStart + 100'000, 50'000);
  b.inject_user_traffic(3e6, kStart + 100'000, 50'000);
  CHECK(a.run(900) == b.run(900));
}

TEST_CASE("skipped seconds are simulated, not dropped") {
  TerminalModelConfig c;
  c.rng_seed = 8;
  TerminalSim a(c, kSite, kStart), b(c, kSite, kStart);
  const auto full = a.run(40);
  const auto jumped = b.step(kStart + 39'000);
  CHECK(jumped == full.back());
}

TEST_CASE("path model places the bent pipe at hop 2") {
  TerminalSim sim(quiet(1), kSite, kStart);
  const auto s = sim.step(kStart);
  std::mt19937_64 rng(1);
  PathModel path;
  const auto hops = path.probe(s, rng);
  REQUIRE(hops.size() == 6);
  CHECK(hops.back().addr == "8.8.8.8");
  for (std::size_t i = 1; i < hops.size(); ++i) CHECK(hops[i].rtt_ms > hops[i - 1].rtt_ms);
  CHECK(hops[1].rtt_ms - hops[0].rtt_ms == doctest::Approx(*s.pop_latency_ms).epsilon(0.05));
}

TEST_CASE("publisher hands out the latest sample") {
  TelemetryPublisher pub;
  CHECK(!pub.latest());
  TelemetrySample s;
  s.ts_ms = 5;
  pub.publish(s);
  auto held = pub.latest();
  s.ts_ms = 6;
  pub.publish(s);
  CHECK(held->ts_ms == 5);
  CHECK(pub.latest()->ts_ms == 6);
}

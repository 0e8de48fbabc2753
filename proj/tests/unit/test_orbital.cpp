#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "leobed/orbital.hpp"
#include "support.hpp"

using namespace leobed;
using namespace leobed::orbital;

namespace {

constexpr UnixMs kFixtureEpoch = 1672574400000;  // 2023-01-01T12:00:00Z

// Values decoded from starlink_1007.tle by the python `sgp4` package (Satrec.twoline2rv).
constexpr double kSgp4MeanMotion = 15.06393012;
constexpr double kSgp4Inclination = 53.0536;
constexpr double kSgp4Raan = 123.4501;
constexpr double kSgp4Ecc = 0.0001473;
constexpr double kSgp4ArgPerigee = 91.4263;
constexpr double kSgp4MeanAnomaly = 268.6887;

const GroundSite kBarcelona{41.4, 2.17, 30.0};

TleRecord circular(double altitude_km, double inc, double raan, double ma, UnixMs epoch) {
  TleRecord r;
  r.name = "TEST";
  r.inclination_deg = inc;
  r.raan_deg = raan;
  r.mean_anomaly_deg = ma;
  r.mean_motion_rev_per_day = mean_motion_for_altitude(altitude_km);
  r.epoch_ms = epoch;
  return r;
}

// Independent elevation: angle between the local vertical and the line of sight.
double elevation_by_dot(const GroundSite& site, const Vec3& sat) {
  const double deg = std::numbers::pi / 180.0;
  const double lat = site.latitude_deg * deg, lon = site.longitude_deg * deg;
  const double R = kEarthRadiusKm + site.altitude_m / 1000.0;
  const Vec3 up{std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)};
  const Vec3 d{sat.x - R * up.x, sat.y - R * up.y, sat.z - R * up.z};
  const double s = (d.x * up.x + d.y * up.y + d.z * up.z) / d.norm();
  return std::asin(s) / deg;
}

}  // namespace

TEST_CASE("parse_tle decodes a committed Starlink element set") {
  const auto rec = parse_tle(read_file(fixture("starlink_1007.tle")));
  CHECK(rec.name == "STARLINK-1007");
  CHECK(rec.catalog_number == 44713);
  CHECK(rec.mean_motion_rev_per_day == doctest::Approx(kSgp4MeanMotion).epsilon(1e-12));
  CHECK(rec.mean_motion_rev_per_day == doctest::Approx(15.06).epsilon(1e-3));
  CHECK(rec.inclination_deg == doctest::Approx(kSgp4Inclination));
  CHECK(rec.raan_deg == doctest::Approx(kSgp4Raan));
  CHECK(rec.eccentricity == doctest::Approx(kSgp4Ecc));
  CHECK(rec.arg_perigee_deg == doctest::Approx(kSgp4ArgPerigee));
  CHECK(rec.mean_anomaly_deg == doctest::Approx(kSgp4MeanAnomaly));
  CHECK(rec.epoch_ms == kFixtureEpoch);
}

TEST_CASE("parse_tle rejects corrupt input") {
  auto text = read_file(fixture("starlink_1007.tle"));
  SUBCASE("wrong checksum digit") {
    const auto pos = text.rfind('\n', text.size() - 2);  // start of line 2
    auto& last = text[text.size() - 2];
    REQUIRE(pos != std::string::npos);
    last = last == '9' ? '0' : static_cast<char>(last + 1);
    CHECK_THROWS_CODE(parse_tle(text), ErrorCode::ChecksumMismatch);
  }
  SUBCASE("empty") { CHECK_THROWS_CODE(parse_tle(""), ErrorCode::MalformedTle); }
  SUBCASE("truncated line") {
    CHECK_THROWS_CODE(parse_tle("1 44713U 19074A\n2 44713  53.0536\n"), ErrorCode::MalformedTle);
  }
}

TEST_CASE("format_tle output reparses to the same elements") {
  auto rec = circular(550, 53, 200.25, 10.5, kFixtureEpoch);
  rec.name = "SYNTH-1";
  rec.catalog_number = 12345;
  const auto back = parse_tle(format_tle(rec));
  CHECK(back.inclination_deg == doctest::Approx(rec.inclination_deg));
  CHECK(back.raan_deg == doctest::Approx(rec.raan_deg));
  CHECK(back.mean_motion_rev_per_day == doctest::Approx(rec.mean_motion_rev_per_day).epsilon(1e-8));
  CHECK(std::abs(back.epoch_ms - rec.epoch_ms) <= 1);
}

TEST_CASE("catalog fixture parses fully") {
  const auto cat = load_catalog(fixture("shell_720.tle"));
  CHECK(cat.size() == 720);
}

TEST_CASE("circular propagation at 550 km") {
  const auto rec = circular(550, 53, 0, 0, kFixtureEpoch);
  const double r = orbit_radius_km(rec);
  CHECK(r == doctest::Approx(6928.137).epsilon(1e-6));
  const double v = orbital_speed_km_s(rec);
  CHECK(v == doctest::Approx(std::sqrt(398600.4418 / 6928.137)));
  CHECK(std::abs(v - 7.5) / 7.5 < 0.02);

  SUBCASE("radius conserved over one period") {
    for (int k = 0; k <= 100; ++k) {
      const auto p = propagate(rec, kFixtureEpoch + k * 57'000);
      CHECK(p.norm() == doctest::Approx(r).epsilon(1e-9));
    }
  }
  SUBCASE("returns to start after one period (inertial frame)") {
    const double period_s = 2.0 * std::numbers::pi * r / v;
    CHECK(period_s / 60.0 == doctest::Approx(95.6).epsilon(0.002));
    const auto a = propagate_inertial(rec, kFixtureEpoch);
    const auto b = propagate_inertial(rec, kFixtureEpoch + static_cast<UnixMs>(period_s * 1000.0));
    CHECK((a - b).norm() < 1.0);
  }
  SUBCASE("norm drift over 24 h") {
    double lo = 1e18, hi = 0;
    for (UnixMs t = kFixtureEpoch; t <= kFixtureEpoch + kMsPerDay; t += 60'000) {
      const double n = propagate(rec, t).norm();
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    CHECK((hi - lo) / r < 1e-3);
  }
  SUBCASE("stale ephemeris") {
    CHECK_THROWS_CODE(propagate(rec, kFixtureEpoch + 8 * kMsPerDay), ErrorCode::StaleEphemeris);
    CHECK_THROWS_CODE(propagate(rec, kFixtureEpoch - 8 * kMsPerDay), ErrorCode::StaleEphemeris);
    CHECK_NOTHROW(propagate(rec, kFixtureEpoch + 7 * kMsPerDay));
  }
}

TEST_CASE("topocentric geometry") {
  const GroundSite site{41.4, 2.17, 0.0};
  const auto s = site_ecef(site);
  const double scale = (kEarthRadiusKm + 550.0) / s.norm();
  const Vec3 zenith{s.x * scale, s.y * scale, s.z * scale};
  const auto geo = topocentric(site, zenith);
  CHECK(geo.elevation_deg == doctest::Approx(90.0).epsilon(1e-9));
  CHECK(geo.range_km == doctest::Approx(550.0).epsilon(1e-9));

  const Vec3 antipode{-zenith.x, -zenith.y, -zenith.z};
  CHECK(topocentric(site, antipode).elevation_deg < 0.0);

  SUBCASE("azimuth is clockwise from north") {
    const GroundSite eq{0, 0, 0};
    const double R = kEarthRadiusKm + 550;
    const double d = 5.0 * std::numbers::pi / 180.0;
    // Satellite slightly north and slightly east of an equatorial site.
    CHECK(topocentric(eq, {R * std::cos(d), 0, R * std::sin(d)}).azimuth_deg == doctest::Approx(0.0));
    CHECK(topocentric(eq, {R * std::cos(d), R * std::sin(d), 0}).azimuth_deg == doctest::Approx(90.0));
    CHECK(topocentric(eq, {R * std::cos(d), -R * std::sin(d), 0}).azimuth_deg ==
          doctest::Approx(270.0));
  }
  CHECK_THROWS_CODE(topocentric(GroundSite{95, 0, 0}, zenith), ErrorCode::InvalidArgument);
}

TEST_CASE("visible_sats over the Barcelona site matches brute force") {
  const auto cat = load_catalog(fixture("shell_720.tle"));
  const UnixMs t = kFixtureEpoch + 3'600'000;
  for (double mask : {0.0, 25.0, 40.0}) {
    const auto vis = visible_sats(kBarcelona, cat, t, mask);
    std::set<std::string> expected;
    for (const auto& rec : cat) {
      if (elevation_by_dot(kBarcelona, propagate(rec, t)) >= mask) expected.insert(rec.id());
    }
    std::set<std::string> got;
    for (const auto& v : vis) got.insert(v.sat_id);
    CHECK(got == expected);
    for (std::size_t i = 1; i < vis.size(); ++i) {
      CHECK(vis[i - 1].elevation_deg >= vis[i].elevation_deg);
    }
  }
  CHECK(!visible_sats(kBarcelona, cat, t, 0.0).empty());
}

TEST_CASE("hand-placed equatorial satellites") {
  const UnixMs t = kFixtureEpoch;
  const double theta = gmst_rad(t) * 180.0 / std::numbers::pi;
  const GroundSite site{0, 0, 0};
  auto at_longitude = [&](const char* name, double lon) {
    auto r = circular(550, 0, 0, std::fmod(lon + theta + 720.0, 360.0), t);
    r.name = name;
    return r;
  };
  const std::vector<TleRecord> cat{at_longitude("A", 0), at_longitude("B", 5),
                                   at_longitude("C", 20), at_longitude("D", 180)};
  // Direct geometry: elevation at central angle g is atan2(cos g - R/r, sin g).
  auto expected_el = [](double g_deg) {
    const double g = g_deg * std::numbers::pi / 180.0;
    return std::atan2(std::cos(g) - kEarthRadiusKm / (kEarthRadiusKm + 550), std::sin(g)) * 180.0 /
           std::numbers::pi;
  };
  const auto vis0 = visible_sats(site, cat, t, 0.0);
  REQUIRE(vis0.size() == 3);
  CHECK(vis0[0].sat_id == "A");
  CHECK(vis0[1].sat_id == "B");
  CHECK(vis0[2].sat_id == "C");
  CHECK(vis0[0].elevation_deg == doctest::Approx(90.0).epsilon(1e-6));
  CHECK(vis0[1].elevation_deg == doctest::Approx(expected_el(5)).epsilon(1e-6));
  CHECK(vis0[2].elevation_deg == doctest::Approx(expected_el(20)).epsilon(1e-6));

  const auto vis25 = visible_sats(site, cat, t, 25.0);
  REQUIRE(vis25.size() == 2);
  CHECK(vis25[0].sat_id == "A");
  CHECK(vis25[1].sat_id == "B");

  const auto vis90 = visible_sats(site, cat, t, 90.0);
  CHECK(vis90.size() <= 1);
}

TEST_CASE("visibility properties on random instants") {
  const auto cat = walker_shell(ShellConfig{}, kFixtureEpoch);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> lat(-60, 60), lon(-180, 180), mask(0, 80);
  std::uniform_int_distribution<UnixMs> dt(0, 2 * kMsPerDay);
  for (int trial = 0; trial < 20; ++trial) {
    const GroundSite site{lat(rng), lon(rng), 100.0};
    const UnixMs t = kFixtureEpoch + dt(rng);
    double m1 = mask(rng), m2 = mask(rng);
    if (m1 > m2) std::swap(m1, m2);
    const auto low = visible_sats(site, cat, t, m1);
    const auto high = visible_sats(site, cat, t, m2);
    std::set<std::string> low_ids;
    for (const auto& v : low) low_ids.insert(v.sat_id);
    for (const auto& v : high) CHECK(low_ids.count(v.sat_id) == 1);
    for (const auto& v : low) {
      // Zenith bound: never closer than the altitude difference.
      CHECK(v.range_km >= 550.0 - 0.1 - 1e-6);
      CHECK(v.azimuth_deg >= 0.0);
      CHECK(v.azimuth_deg < 360.0);
    }
  }
}

TEST_CASE("mask outside [0, 90] is rejected") {
  CHECK_THROWS_CODE(visible_sats(kBarcelona, {}, kFixtureEpoch, -1.0), ErrorCode::InvalidArgument);
  CHECK_THROWS_CODE(visible_sats(kBarcelona, {}, kFixtureEpoch, 91.0), ErrorCode::InvalidArgument);
}

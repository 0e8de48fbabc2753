#include "leobed/orbital.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "leobed/error.hpp"

namespace leobed::orbital {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Column helpers use the 1-based inclusive positions of the TLE layout.
std::string_view cols(std::string_view line, std::size_t first, std::size_t last) {
  return line.substr(first - 1, last - first + 1);
}

double parse_field(std::string_view field, const char* what) {
  const std::string s = trim(field);
  if (s.empty()) fail(ErrorCode::MalformedTle, std::string("empty TLE field: ") + what);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) {
    fail(ErrorCode::MalformedTle, std::string("bad TLE field ") + what + ": '" + s + "'");
  }
  return v;
}

int parse_int_field(std::string_view field, const char* what) {
  const double v = parse_field(field, what);
  if (v != std::floor(v)) fail(ErrorCode::MalformedTle, std::string("non-integer TLE field: ") + what);
  return static_cast<int>(v);
}

UnixMs epoch_from_tle(int two_digit_year, double day_of_year) {
  using namespace std::chrono;
  const int year_full = two_digit_year < 57 ? 2000 + two_digit_year : 1900 + two_digit_year;
  const sys_days jan1{year{year_full} / January / 1};
  const double ms_into_year = (day_of_year - 1.0) * static_cast<double>(kMsPerDay);
  return duration_cast<milliseconds>(jan1.time_since_epoch()).count() +
         static_cast<UnixMs>(std::llround(ms_into_year));
}

void check_line(std::string_view line, char expected_number) {
  if (line.size() < 69) {
    fail(ErrorCode::MalformedTle, "TLE line shorter than 69 columns");
  }
  if (line[0] != expected_number || line[1] != ' ') {
    fail(ErrorCode::MalformedTle, std::string("expected TLE line ") + expected_number);
  }
  const char digit = line[68];
  if (digit < '0' || digit > '9') fail(ErrorCode::MalformedTle, "missing checksum digit");
  if (tle_checksum(line) != digit - '0') {
    fail(ErrorCode::ChecksumMismatch, std::string("checksum mismatch on line ") + expected_number);
  }
}

std::string strip_cr(std::string_view line) {
  std::string s(line);
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

}  // namespace

std::string TleRecord::id() const {
  if (!name.empty()) return name;
  return std::to_string(catalog_number);
}

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

int tle_checksum(std::string_view line) {
  int sum = 0;
  for (std::size_t i = 0; i < std::min<std::size_t>(68, line.size()); ++i) {
    const char c = line[i];
    if (c >= '0' && c <= '9') sum += c - '0';
    if (c == '-') sum += 1;
  }
  return sum % 10;
}

TleRecord parse_tle(std::string_view text) {
  std::vector<std::string> lines;
  for (auto& raw : split(text, '\n')) {
    auto line = strip_cr(raw);
    if (!trim(line).empty()) lines.push_back(std::move(line));
  }
  if (lines.size() != 2 && lines.size() != 3) {
    fail(ErrorCode::MalformedTle, "expected 2 or 3 non-empty lines, got " + std::to_string(lines.size()));
  }
  TleRecord rec;
  std::size_t first = 0;
  if (lines.size() == 3) {
    rec.name = trim(lines[0].rfind("0 ", 0) == 0 ? lines[0].substr(2) : lines[0]);
    first = 1;
  }
  const std::string& l1 = lines[first];
  const std::string& l2 = lines[first + 1];
  check_line(l1, '1');
  check_line(l2, '2');

  rec.catalog_number = parse_int_field(cols(l1, 3, 7), "catalog number");
  if (parse_int_field(cols(l2, 3, 7), "catalog number") != rec.catalog_number) {
    fail(ErrorCode::MalformedTle, "catalog numbers of line 1 and 2 differ");
  }
  const int yy = parse_int_field(cols(l1, 19, 20), "epoch year");
  const double doy = parse_field(cols(l1, 21, 32), "epoch day");
  if (doy < 1.0 || doy >= 367.0) fail(ErrorCode::MalformedTle, "epoch day out of range");
  rec.epoch_ms = epoch_from_tle(yy, doy);

  rec.inclination_deg = parse_field(cols(l2, 9, 16), "inclination");
  rec.raan_deg = parse_field(cols(l2, 18, 25), "raan");
  rec.eccentricity = parse_field("0." + trim(cols(l2, 27, 33)), "eccentricity");
  rec.arg_perigee_deg = parse_field(cols(l2, 35, 42), "argument of perigee");
  rec.mean_anomaly_deg = parse_field(cols(l2, 44, 51), "mean anomaly");
  rec.mean_motion_rev_per_day = parse_field(cols(l2, 53, 63), "mean motion");

  if (rec.inclination_deg < 0 || rec.inclination_deg > 180) {
    fail(ErrorCode::MalformedTle, "inclination outside [0, 180]");
  }
  if (rec.mean_motion_rev_per_day <= 0) fail(ErrorCode::MalformedTle, "mean motion must be positive");
  if (rec.eccentricity < 0 || rec.eccentricity >= 1) {
    fail(ErrorCode::MalformedTle, "eccentricity outside [0, 1)");
  }
  if (rec.name.empty()) rec.name = std::to_string(rec.catalog_number);
  return rec;
}

std::vector<TleRecord> parse_catalog(std::string_view text) {
  std::vector<std::string> lines;
  for (auto& raw : split(text, '\n')) {
    auto line = strip_cr(raw);
    if (!trim(line).empty()) lines.push_back(std::move(line));
  }
  std::vector<TleRecord> out;
  std::size_t i = 0;
  while (i < lines.size()) {
    const bool has_name = !(lines[i].size() >= 2 && lines[i][0] == '1' && lines[i][1] == ' ');
    const std::size_t n = has_name ? 3 : 2;
    if (i + n > lines.size()) fail(ErrorCode::MalformedTle, "truncated record at end of catalog");
    std::string block;
    for (std::size_t k = 0; k < n; ++k) block += lines[i + k] + "\n";
    out.push_back(parse_tle(block));
    i += n;
  }
  return out;
}

std::vector<TleRecord> load_catalog(const std::string& path) { return parse_catalog(read_file(path)); }

std::string format_tle(const TleRecord& rec) {
  using namespace std::chrono;
  const sys_time<milliseconds> tp{milliseconds{rec.epoch_ms}};
  const auto day = floor<days>(tp);
  const year_month_day ymd{day};
  const sys_days jan1{ymd.year() / January / 1};
  const double doy =
      1.0 + static_cast<double>((tp - jan1).count()) / static_cast<double>(kMsPerDay);
  const int yy = static_cast<int>(ymd.year()) % 100;

  char l1[80];
  std::snprintf(l1, sizeof l1, "1 %05dU %-8s %02d%012.8f %10s %8s %8s 0 %4d",
                rec.catalog_number % 100000, "20001A", yy, doy, " .00000000", " 00000-0",
                " 00000-0", 999);
  long ecc = std::lround(rec.eccentricity * 1e7);
  char l2[80];
  std::snprintf(l2, sizeof l2, "2 %05d %8.4f %8.4f %07ld %8.4f %8.4f %11.8f%5d",
                rec.catalog_number % 100000, rec.inclination_deg, rec.raan_deg, ecc,
                rec.arg_perigee_deg, rec.mean_anomaly_deg, rec.mean_motion_rev_per_day, 1);
  std::string s1(l1), s2(l2);
  s1 += static_cast<char>('0' + tle_checksum(s1));
  s2 += static_cast<char>('0' + tle_checksum(s2));
  return rec.name + "\n" + s1 + "\n" + s2 + "\n";
}

double orbit_radius_km(const TleRecord& rec) {
  const double n = rec.mean_motion_rev_per_day * kTwoPi / 86400.0;
  return std::cbrt(kEarthMu / (n * n));
}

double orbital_speed_km_s(const TleRecord& rec) { return std::sqrt(kEarthMu / orbit_radius_km(rec)); }

double orbital_period_s(const TleRecord& rec) { return 86400.0 / rec.mean_motion_rev_per_day; }

double mean_motion_for_altitude(double altitude_km) {
  const double r = kEarthRadiusKm + altitude_km;
  const double n = std::sqrt(kEarthMu / (r * r * r));
  return n * 86400.0 / kTwoPi;
}

double gmst_rad(UnixMs t) {
  const double jd = static_cast<double>(t) / static_cast<double>(kMsPerDay) + 2440587.5;
  double deg = 280.46061837 + kSiderealRateDegPerDay * (jd - 2451545.0);
  deg = std::fmod(deg, 360.0);
  if (deg < 0) deg += 360.0;
  return deg * kDegToRad;
}

Vec3 propagate_inertial(const TleRecord& rec, UnixMs t) {
  const double r = orbit_radius_km(rec);
  const double n = rec.mean_motion_rev_per_day * kTwoPi / 86400.0;
  const double dt = static_cast<double>(t - rec.epoch_ms) / 1000.0;
  const double u = (rec.arg_perigee_deg + rec.mean_anomaly_deg) * kDegToRad + n * dt;
  const double inc = rec.inclination_deg * kDegToRad;
  const double raan = rec.raan_deg * kDegToRad;
  const double cu = std::cos(u), su = std::sin(u);
  const double co = std::cos(raan), so = std::sin(raan);
  const double ci = std::cos(inc), si = std::sin(inc);
  return {r * (co * cu - so * su * ci), r * (so * cu + co * su * ci), r * (su * si)};
}

Vec3 propagate(const TleRecord& rec, UnixMs t) {
  const double age_days =
      std::abs(static_cast<double>(t - rec.epoch_ms)) / static_cast<double>(kMsPerDay);
  if (age_days > kMaxEphemerisAgeDays) {
    fail(ErrorCode::StaleEphemeris, rec.id() + " epoch is " + std::to_string(age_days) + " days away");
  }
  const Vec3 eci = propagate_inertial(rec, t);
  const double theta = gmst_rad(t);
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * eci.x + s * eci.y, -s * eci.x + c * eci.y, eci.z};
}

void validate(const GroundSite& site) {
  if (std::abs(site.latitude_deg) > 90.0 || std::abs(site.longitude_deg) > 180.0) {
    fail(ErrorCode::InvalidArgument, "ground site coordinates out of range");
  }
}

Vec3 site_ecef(const GroundSite& site) {
  const double r = kEarthRadiusKm + site.altitude_m / 1000.0;
  const double lat = site.latitude_deg * kDegToRad;
  const double lon = site.longitude_deg * kDegToRad;
  return {r * std::cos(lat) * std::cos(lon), r * std::cos(lat) * std::sin(lon), r * std::sin(lat)};
}

Topocentric topocentric(const GroundSite& site, const Vec3& sat_ecef) {
  validate(site);
  const Vec3 d = sat_ecef - site_ecef(site);
  const double lat = site.latitude_deg * kDegToRad;
  const double lon = site.longitude_deg * kDegToRad;
  const double sl = std::sin(lat), cl = std::cos(lat);
  const double so = std::sin(lon), co = std::cos(lon);
  const double east = -so * d.x + co * d.y;
  const double north = -sl * co * d.x - sl * so * d.y + cl * d.z;
  const double up = cl * co * d.x + cl * so * d.y + sl * d.z;
  Topocentric out;
  out.range_km = d.norm();
  out.elevation_deg = std::asin(std::clamp(up / out.range_km, -1.0, 1.0)) * kRadToDeg;
  double az = std::atan2(east, north) * kRadToDeg;
  if (az < 0) az += 360.0;
  if (az >= 360.0) az -= 360.0;
  out.azimuth_deg = az;
  return out;
}

std::vector<VisibleSat> visible_sats(const GroundSite& site, const std::vector<TleRecord>& catalog,
                                     UnixMs t, double mask_deg) {
  if (mask_deg < 0.0 || mask_deg > 90.0) {
    fail(ErrorCode::InvalidArgument, "elevation mask must lie in [0, 90]");
  }
  validate(site);
  std::vector<VisibleSat> out;
  for (const auto& rec : catalog) {
    const auto geo = topocentric(site, propagate(rec, t));
    if (geo.elevation_deg >= mask_deg) {
      out.push_back({rec.id(), geo.azimuth_deg, geo.elevation_deg, geo.range_km});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const VisibleSat& a, const VisibleSat& b) {
    return a.elevation_deg > b.elevation_deg;
  });
  return out;
}

std::vector<TleRecord> walker_shell(const ShellConfig& shell, UnixMs epoch) {
  std::vector<TleRecord> out;
  const int total = shell.planes * shell.sats_per_plane;
  out.reserve(static_cast<std::size_t>(total));
  const double mm = mean_motion_for_altitude(shell.altitude_km);
  for (int p = 0; p < shell.planes; ++p) {
    for (int s = 0; s < shell.sats_per_plane; ++s) {
      TleRecord rec;
      const int idx = p * shell.sats_per_plane + s;
      rec.catalog_number = shell.first_catalog_number + idx;
      char name[64];
      std::snprintf(name, sizeof name, "%s-%d", shell.name_prefix.c_str(), rec.catalog_number);
      rec.name = name;
      rec.inclination_deg = shell.inclination_deg;
      rec.raan_deg = 360.0 * p / shell.planes;
      rec.eccentricity = 0.0;
      rec.arg_perigee_deg = 0.0;
      double ma = 360.0 * s / shell.sats_per_plane + 360.0 * shell.phasing * p / total;
      rec.mean_anomaly_deg = std::fmod(ma, 360.0);
      rec.mean_motion_rev_per_day = mm;
      rec.epoch_ms = epoch;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

}  // namespace leobed::orbital

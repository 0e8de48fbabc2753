#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "leobed/common.hpp"

namespace leobed::orbital {

constexpr double kEarthMu = 398600.4418;       // km^3/s^2
constexpr double kEarthRadiusKm = 6378.137;    // spherical earth
constexpr double kSiderealRateDegPerDay = 360.98564736629;
constexpr double kDefaultElevationMaskDeg = 25.0;
constexpr double kMaxEphemerisAgeDays = 7.0;

struct TleRecord {
  std::string name;
  int catalog_number = 0;
  double inclination_deg = 0;
  double raan_deg = 0;
  double eccentricity = 0;
  double arg_perigee_deg = 0;
  double mean_anomaly_deg = 0;
  double mean_motion_rev_per_day = 0;
  UnixMs epoch_ms = 0;

  std::string id() const;
};

struct GroundSite {
  double latitude_deg = 0;
  double longitude_deg = 0;
  double altitude_m = 0;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;

  double norm() const;
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
};

struct Topocentric {
  double azimuth_deg = 0;    // [0, 360), clockwise from north
  double elevation_deg = 0;  // [-90, 90]
  double range_km = 0;
};

struct VisibleSat {
  std::string sat_id;
  double azimuth_deg = 0;
  double elevation_deg = 0;
  double range_km = 0;
};

// Decodes a 2-line or 3-line (name first) element set. Verifies both line checksums.
TleRecord parse_tle(std::string_view text);

// Splits a multi-record TLE file; blank lines are ignored.
std::vector<TleRecord> parse_catalog(std::string_view text);
std::vector<TleRecord> load_catalog(const std::string& path);

// Renders a record back into fixed-column TLE lines (with name line), checksums included.
std::string format_tle(const TleRecord& rec);

int tle_checksum(std::string_view line);

double orbit_radius_km(const TleRecord& rec);
double orbital_speed_km_s(const TleRecord& rec);
double orbital_period_s(const TleRecord& rec);

// Greenwich mean sidereal angle in radians.
double gmst_rad(UnixMs t);

// Circular two-body propagation in the inertial frame.
Vec3 propagate_inertial(const TleRecord& rec, UnixMs t);
// Earth-fixed position; throws StaleEphemeris when |t - epoch| exceeds 7 days.
Vec3 propagate(const TleRecord& rec, UnixMs t);

Vec3 site_ecef(const GroundSite& site);
void validate(const GroundSite& site);

Topocentric topocentric(const GroundSite& site, const Vec3& sat_ecef);

// Satellites at or above the mask, sorted by descending elevation.
std::vector<VisibleSat> visible_sats(const GroundSite& site, const std::vector<TleRecord>& catalog,
                                     UnixMs t, double mask_deg = kDefaultElevationMaskDeg);

// Uniform Walker-delta shell, handy for synthetic catalogs.
struct ShellConfig {
  std::string name_prefix = "STARLINK";
  int planes = 72;
  int sats_per_plane = 22;
  double inclination_deg = 53.0;
  double altitude_km = 550.0;
  int phasing = 17;
  int first_catalog_number = 44000;
};

std::vector<TleRecord> walker_shell(const ShellConfig& shell, UnixMs epoch);

double mean_motion_for_altitude(double altitude_km);

// Site, catalog and mask bundled for consumers that ask "what is overhead now".
struct OrbitalContext {
  GroundSite site;
  std::vector<TleRecord> catalog;
  double mask_deg = kDefaultElevationMaskDeg;

  std::vector<VisibleSat> visible(UnixMs t) const { return visible_sats(site, catalog, t, mask_deg); }
  std::vector<VisibleSat> visible(UnixMs t, double mask) const {
    return visible_sats(site, catalog, t, mask);
  }
};

}  // namespace leobed::orbital

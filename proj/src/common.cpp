#include "leobed/common.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "leobed/error.hpp"

namespace leobed {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MalformedTle: return "MalformedTle";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::StaleEphemeris: return "StaleEphemeris";
    case ErrorCode::ClockRegression: return "ClockRegression";
    case ErrorCode::OverlapRejected: return "OverlapRejected";
    case ErrorCode::Unavailable: return "Unavailable";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::SeriesTooShort: return "SeriesTooShort";
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::UnknownMetric: return "UnknownMetric";
    case ErrorCode::TypeError: return "TypeError";
    case ErrorCode::ConflictError: return "ConflictError";
    case ErrorCode::UnknownNode: return "UnknownNode";
    case ErrorCode::BadTrigger: return "BadTrigger";
    case ErrorCode::UnknownRun: return "UnknownRun";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::LaunchFailure: return "LaunchFailure";
    case ErrorCode::UploadFailure: return "UploadFailure";
    case ErrorCode::IllegalTransition: return "IllegalTransition";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::UncoveredHop: return "UncoveredHop";
    case ErrorCode::SegmentOrder: return "SegmentOrder";
    case ErrorCode::DegenerateDesign: return "DegenerateDesign";
    case ErrorCode::ZeroActual: return "ZeroActual";
    case ErrorCode::ProfileExhausted: return "ProfileExhausted";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::TraceTooShort: return "TraceTooShort";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

std::string iso8601_utc(UnixMs t) {
  using namespace std::chrono;
  const sys_time<milliseconds> tp{milliseconds{t}};
  const auto day = floor<days>(tp);
  const year_month_day ymd{day};
  const hh_mm_ss hms{tp - day};
  char buf[40];
  const auto ms = static_cast<int>(hms.subseconds().count());
  if (ms == 0) {
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                  static_cast<int>(hms.seconds().count()));
  } else {
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ",
                  static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()), static_cast<int>(hms.hours().count()),
                  static_cast<int>(hms.minutes().count()), static_cast<int>(hms.seconds().count()),
                  ms);
  }
  return buf;
}

UnixMs parse_iso8601_utc(std::string_view text) {
  int y = 0;
  unsigned mo = 0, d = 0;
  int h = 0, mi = 0;
  double s = 0;
  const std::string str(text);
  if (std::sscanf(str.c_str(), "%d-%u-%uT%d:%d:%lf", &y, &mo, &d, &h, &mi, &s) != 6) {
    fail(ErrorCode::ParseError, "not an ISO-8601 UTC timestamp: " + str);
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok()) fail(ErrorCode::ParseError, "invalid calendar date: " + str);
  const auto base = sys_days{ymd}.time_since_epoch();
  return duration_cast<milliseconds>(base).count() + (h * 3600LL + mi * 60LL) * 1000 +
         static_cast<UnixMs>(std::llround(s * 1000.0));
}

double nearest_rank(std::span<const double> sorted, double pct) {
  if (sorted.empty()) fail(ErrorCode::EmptyInput, "percentile of empty sample");
  const auto n = static_cast<double>(sorted.size());
  // Multiply first and trim float noise so that e.g. p95 of 100 samples is rank 95, not 96.
  auto rank = static_cast<std::size_t>(std::ceil(pct * n / 100.0 - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

double median_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return nearest_rank(values, 50.0);
}

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  fail(ErrorCode::ParseError, "missing CSV column: " + std::string(name));
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      break;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string trim(std::string_view text) {
  std::size_t b = 0, e = text.size();
  while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
  return std::string(text.substr(b, e - b));
}

CsvTable parse_csv(std::string_view text, bool has_header) {
  CsvTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const auto clean = trim(line);
    if (clean.empty() || clean[0] == '#') continue;
    auto cells = split(clean, ',');
    for (auto& c : cells) c = trim(c);
    if (first && has_header) {
      table.header = std::move(cells);
    } else {
      table.rows.push_back(std::move(cells));
    }
    first = false;
  }
  return table;
}

CsvTable read_csv(const std::string& path, bool has_header) {
  return parse_csv(read_file(path), has_header);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path);
}

}  // namespace leobed

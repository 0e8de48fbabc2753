#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace leobed {

// Unix epoch milliseconds; the single clock unit shared by telemetry, scheduling and runs.
using UnixMs = std::int64_t;

constexpr UnixMs kMsPerSecond = 1000;
constexpr UnixMs kMsPerDay = 86'400'000;

// "2024-03-01T12:00:05Z" (millisecond suffix only when non-zero).
std::string iso8601_utc(UnixMs t);
UnixMs parse_iso8601_utc(std::string_view text);

// Nearest-rank percentile over an ascending-sorted range: the ceil(p/100 * N)-th value.
double nearest_rank(std::span<const double> sorted, double pct);

double median_of(std::vector<double> values);

// Minimal CSV support: comma separated, optional header row, no quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(const std::string& path, bool has_header = true);
CsvTable parse_csv(std::string_view text, bool has_header = true);
std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

// Runs body(i) for i in [0, n) on a small pool; threads == 0 means hardware concurrency.
// The first exception thrown by any task is rethrown after all workers join.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& body) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace leobed

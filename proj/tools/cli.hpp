#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "leobed/common.hpp"
#include "leobed/error.hpp"
#include "leobed/net.hpp"

namespace leobed::cli {

using Json = nlohmann::json;

// Settings shared by every subcommand. Precedence: flag, then LEO_* environment, then the
// JSON config file, then the defaults below.
struct Globals {
  std::string config_path;
  std::string endpoint = "127.0.0.1:7400";
  std::string terminal_endpoint = "127.0.0.1:7401";
  std::string results_root = "results";
  std::string tle_catalog;
  std::string segment_map;
  std::uint64_t seed = 1;
  double speedup = 1.0;
  UnixMs clock_anchor_ms = 0;  // wall time at which simulated and wall clocks agree
  std::string log_level = "warn";
  bool json = false;
  bool table = false;
  Json config = Json::object();  // the whole config file, for subcommand sections
};

// A reply from a daemon that carried {"ok": false, "error": {...}}.
class RemoteError : public std::runtime_error {
 public:
  explicit RemoteError(Json reply) : std::runtime_error(describe(reply)), reply_(std::move(reply)) {}
  const Json& reply() const { return reply_; }
  std::string code() const { return reply_.value("/error/code"_json_pointer, std::string("Unavailable")); }

 private:
  static std::string describe(const Json& r) { return r.value("/error/message"_json_pointer, std::string("remote error")); }
  Json reply_;
};

// Reads --config / LEO_CONFIG from argv before the real parse and applies the file.
void load_config(Globals& g, int argc, char** argv);
void add_global_options(CLI::App& app, Globals& g);
void apply_logging(const Globals& g);

// True when output should be JSON: --json, or stdout is not a terminal unless --table.
bool json_output(const Globals& g);
void emit(const Globals& g, const Json& j, const std::function<void()>& table);
void print_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

// Simulated clock shared by the daemons: anchor + (wall - anchor) * speedup.
struct SimClock {
  UnixMs anchor_ms = 0;
  double speedup = 1.0;
  UnixMs now() const;
  static SimClock from(const Globals& g);
};

// Sends one request and throws RemoteError on an error reply.
Json call(net::Channel& ch, const Json& request);
std::shared_ptr<net::Channel> connect(const std::string& endpoint, std::uint16_t default_port);

// Fails fast with IoError when a configured path does not exist.
void require_path(const std::string& path, const std::string& what);
// Comma-separated numbers.
std::vector<double> parse_list(const std::string& text);

// Blocks until SIGINT/SIGTERM or until run_for_s real seconds elapse (0: no limit).
void wait_for_shutdown(double run_for_s);
void write_port_file(const std::string& path, std::uint16_t port);

void register_ops(CLI::App& app, Globals& g);
void register_analysis(CLI::App& app, Globals& g);

}  // namespace leobed::cli

#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cli.hpp"
#include "leobed/orchestrator.hpp"

namespace leobed::cli {

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

template <class T>
void take(const Json& cfg, const char* key, T& out) {
  if (cfg.contains(key) && !cfg[key].is_null()) out = cfg[key].get<T>();
}

}  // namespace

void load_config(Globals& g, int argc, char** argv) {
  std::string path;
  if (const char* env = std::getenv("LEO_CONFIG")) path = env;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) path = argv[i + 1];
    if (a.rfind("--config=", 0) == 0) path = a.substr(9);
  }
  if (path.empty()) return;
  require_path(path, "config file");
  try {
    g.config = Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    fail(ErrorCode::ParseError, fmt::format("config {}: {}", path, e.what()));
  }
  if (!g.config.is_object()) fail(ErrorCode::ParseError, "config must be a JSON object");
  g.config_path = path;
  const Json& c = g.config;
  take(c, "endpoint", g.endpoint);
  take(c, "terminal_endpoint", g.terminal_endpoint);
  take(c, "results_root", g.results_root);
  take(c, "tle_catalog", g.tle_catalog);
  take(c, "segment_map", g.segment_map);
  take(c, "seed", g.seed);
  take(c, "speedup", g.speedup);
  take(c, "clock_anchor_ms", g.clock_anchor_ms);
  take(c, "log_level", g.log_level);
}

void add_global_options(CLI::App& app, Globals& g) {
  app.add_option("--config", g.config_path, "JSON config file")->envname("LEO_CONFIG");
  app.add_option("--endpoint", g.endpoint, "orchestrator host:port")->envname("LEO_ENDPOINT");
  app.add_option("--terminal-endpoint", g.terminal_endpoint, "terminal simulator host:port")
      ->envname("LEO_TERMINAL_ENDPOINT");
  app.add_option("--results-root", g.results_root, "results store root")->envname("LEO_RESULTS_ROOT");
  app.add_option("--tle", g.tle_catalog, "TLE catalog")->envname("LEO_TLE_CATALOG");
  app.add_option("--segment-map", g.segment_map, "segment map JSON")->envname("LEO_SEGMENT_MAP");
  app.add_option("--seed", g.seed, "random seed")->envname("LEO_SEED");
  app.add_option("--speedup", g.speedup, "simulated seconds per wall second")->envname("LEO_SPEEDUP");
  app.add_option("--clock-anchor-ms", g.clock_anchor_ms, "wall time where the simulated clock starts")
      ->envname("LEO_CLOCK_ANCHOR_MS");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")->envname("LEO_LOG_LEVEL");
  app.add_flag("--json", g.json, "JSON output");
  app.add_flag("--table", g.table, "table output even when piped");
}

void apply_logging(const Globals& g) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("leobed"));
  spdlog::set_level(spdlog::level::from_str(g.log_level));
}

bool json_output(const Globals& g) { return g.json || (!g.table && !::isatty(STDOUT_FILENO)); }

void emit(const Globals& g, const Json& j, const std::function<void()>& table) {
  if (json_output(g)) {
    std::cout << j.dump() << '\n';
  } else {
    table();
  }
}

void print_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
  }
  const auto line = [&](const std::vector<std::string>& r) {
    std::string out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::string cell = i < r.size() ? r[i] : "";
      out += fmt::format("{:<{}}", cell, w[i]);
      if (i + 1 < w.size()) out += "  ";
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    std::cout << out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

UnixMs SimClock::now() const {
  const UnixMs wall =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
          .count();
  if (speedup == 1.0 || anchor_ms == 0) return wall;
  return anchor_ms + static_cast<UnixMs>(static_cast<double>(wall - anchor_ms) * speedup);
}

SimClock SimClock::from(const Globals& g) {
  if (!(g.speedup > 0)) fail(ErrorCode::InvalidArgument, "speedup must be positive");
  if (g.speedup != 1.0 && g.clock_anchor_ms == 0) {
    fail(ErrorCode::InvalidArgument, "--speedup needs --clock-anchor-ms so that all daemons share one clock");
  }
  return {g.clock_anchor_ms, g.speedup};
}

Json call(net::Channel& ch, const Json& request) {
  Json reply = ch.call(request);
  if (reply.is_object() && reply.contains("ok") && !reply["ok"].get<bool>()) throw RemoteError(reply);
  return reply;
}

std::shared_ptr<net::Channel> connect(const std::string& endpoint, std::uint16_t default_port) {
  const auto [host, port] = net::parse_endpoint(endpoint, default_port);
  return std::make_shared<net::TcpChannel>(host, port);
}

void require_path(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::IoError, fmt::format("{} not found: {}", what, path));
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split(text, ',')) {
    const auto t = trim(part);
    if (t.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidArgument, "not a number: " + t);
    }
  }
  if (out.empty()) fail(ErrorCode::InvalidArgument, "empty list");
  return out;
}

void wait_for_shutdown(double run_for_s) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(run_for_s);
  while (!g_stop) {
    if (run_for_s > 0 && std::chrono::steady_clock::now() >= until) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

void write_port_file(const std::string& path, std::uint16_t port) {
  if (path.empty()) return;
  const std::string tmp = path + ".tmp";
  write_file(tmp, std::to_string(port) + "\n");
  std::filesystem::rename(tmp, path);
}

}  // namespace leobed::cli

namespace {

int report_error(const leobed::cli::Json& err, bool conflict) {
  std::cerr << err.dump() << '\n';
  return conflict ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace leobed;
  using namespace leobed::cli;
  Globals g;
  CLI::App app{"LEO broadband measurement testbed"};
  app.set_version_flag("--version", "leobed 0.3.0");
  app.require_subcommand(1);
  app.fallthrough();
  try {
    load_config(g, argc, argv);
    add_global_options(app, g);
    register_ops(app, g);
    register_analysis(app, g);
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error({{"ok", false}, {"error", {{"code", "InvalidArgument"}, {"message", e.what()}}}}, false);
  } catch (const RemoteError& e) {
    return report_error(e.reply(), e.code() == "ConflictError");
  } catch (const Error& e) {
    return report_error(orchestrator::error_json(e), e.code() == ErrorCode::ConflictError);
  } catch (const std::exception& e) {
    return report_error(orchestrator::error_json(e), false);
  }
}

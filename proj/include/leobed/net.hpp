#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

namespace leobed::net {

using Json = nlohmann::json;

// One request line in, one response line out. Must not throw.
using LineHandler = std::function<std::string(const std::string&)>;

// TCP server for newline-delimited messages; one thread per connection.
class LineServer {
 public:
  LineServer(std::string bind_host, std::uint16_t port, LineHandler handler);
  ~LineServer();
  LineServer(const LineServer&) = delete;
  LineServer& operator=(const LineServer&) = delete;

  void start();
  void stop();
  std::uint16_t port() const { return port_; }  // resolved after start() when bound to 0

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string host_;
  std::uint16_t port_;
  LineHandler handler_;
};

// Request/response transport used by agents and the CLI. call() throws Unavailable
// when the peer cannot be reached.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual Json call(const Json& request) = 0;
};

class TcpChannel final : public Channel {
 public:
  TcpChannel(std::string host, std::uint16_t port, int timeout_ms = 5000);
  ~TcpChannel() override;
  Json call(const Json& request) override;

 private:
  struct Impl;
  std::mutex mu_;
  std::unique_ptr<Impl> impl_;
  std::string host_;
  std::uint16_t port_;
  int timeout_ms_;
};

class FunctionChannel final : public Channel {
 public:
  explicit FunctionChannel(std::function<Json(const Json&)> fn) : fn_(std::move(fn)) {}
  Json call(const Json& request) override { return fn_(request); }

 private:
  std::function<Json(const Json&)> fn_;
};

// "host:port" -> parts; port defaults to `default_port`.
std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& endpoint, std::uint16_t default_port);

}  // namespace leobed::net

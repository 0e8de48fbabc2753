#include "leobed/net.hpp"

#include <boost/asio.hpp>
#include <spdlog/spdlog.h>

#include "leobed/error.hpp"

namespace leobed::net {

namespace asio = boost::asio;
using asio::ip::tcp;

struct LineServer::Impl {
  asio::io_context io;
  std::unique_ptr<tcp::acceptor> acceptor;
  std::thread accept_thread;
  std::mutex mu;
  std::vector<std::shared_ptr<tcp::socket>> sockets;
  std::vector<std::thread> workers;
  std::atomic<bool> running{false};
};

LineServer::LineServer(std::string bind_host, std::uint16_t port, LineHandler handler)
    : impl_(std::make_unique<Impl>()), host_(std::move(bind_host)), port_(port), handler_(std::move(handler)) {}

LineServer::~LineServer() { stop(); }

void LineServer::start() {
  if (impl_->running) return;
  try {
    tcp::endpoint ep(asio::ip::make_address(host_), port_);
    impl_->acceptor = std::make_unique<tcp::acceptor>(impl_->io);
    impl_->acceptor->open(ep.protocol());
    impl_->acceptor->set_option(tcp::acceptor::reuse_address(true));
    impl_->acceptor->bind(ep);
    impl_->acceptor->listen();
    port_ = impl_->acceptor->local_endpoint().port();
  } catch (const boost::system::system_error& e) {
    fail(ErrorCode::IoError, "cannot listen on " + host_ + ":" + std::to_string(port_) + ": " + e.what());
  }
  impl_->running = true;
  impl_->accept_thread = std::thread([this] {
    while (impl_->running) {
      auto sock = std::make_shared<tcp::socket>(impl_->io);
      boost::system::error_code ec;
      impl_->acceptor->accept(*sock, ec);
      if (ec || !impl_->running) break;
      std::lock_guard lock(impl_->mu);
      impl_->sockets.push_back(sock);
      impl_->workers.emplace_back([this, sock] {
        asio::streambuf buf;
        boost::system::error_code rec;
        while (impl_->running) {
          asio::read_until(*sock, buf, '\n', rec);
          if (rec) break;
          std::istream in(&buf);
          std::string line;
          std::getline(in, line);
          if (line.empty()) continue;
          std::string reply = handler_(line);
          reply.push_back('\n');
          asio::write(*sock, asio::buffer(reply), rec);
          if (rec) break;
        }
        sock->shutdown(tcp::socket::shutdown_both, rec);
        sock->close(rec);
      });
    }
  });
}

void LineServer::stop() {
  if (!impl_->running.exchange(false)) return;
  boost::system::error_code ec;
  // close() alone does not wake a thread blocked in accept(); shutdown() does.
  ::shutdown(impl_->acceptor->native_handle(), SHUT_RDWR);
  impl_->acceptor->close(ec);
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(impl_->mu);
    // Shutdown wakes any blocked reader; each worker closes its own socket.
    for (auto& s : impl_->sockets) ::shutdown(s->native_handle(), SHUT_RDWR);
    workers.swap(impl_->workers);
    impl_->sockets.clear();
  }
  for (auto& w : workers) w.join();
}

struct TcpChannel::Impl {
  asio::io_context io;
  std::unique_ptr<tcp::socket> socket;
  asio::streambuf buf;
};

TcpChannel::TcpChannel(std::string host, std::uint16_t port, int timeout_ms)
    : impl_(std::make_unique<Impl>()), host_(std::move(host)), port_(port), timeout_ms_(timeout_ms) {}

TcpChannel::~TcpChannel() = default;

Json TcpChannel::call(const Json& request) {
  std::lock_guard lock(mu_);
  auto attempt = [&]() -> Json {
    if (!impl_->socket) {
      tcp::resolver resolver(impl_->io);
      auto eps = resolver.resolve(host_, std::to_string(port_));
      impl_->socket = std::make_unique<tcp::socket>(impl_->io);
      asio::connect(*impl_->socket, eps);
      timeval tv{timeout_ms_ / 1000, (timeout_ms_ % 1000) * 1000};
      ::setsockopt(impl_->socket->native_handle(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
      impl_->buf.consume(impl_->buf.size());
    }
    const std::string line = request.dump() + "\n";
    asio::write(*impl_->socket, asio::buffer(line));
    asio::read_until(*impl_->socket, impl_->buf, '\n');
    std::istream in(&impl_->buf);
    std::string reply;
    std::getline(in, reply);
    return Json::parse(reply);
  };
  // A cached connection may have been closed by the server; retry once on a fresh one.
  for (int i = 0; i < 2; ++i) {
    try {
      return attempt();
    } catch (const boost::system::system_error& e) {
      impl_->socket.reset();
      if (i == 1) fail(ErrorCode::Unavailable, "orchestrator unreachable at " + host_ + ":" + std::to_string(port_) + ": " + e.what());
    } catch (const Json::exception& e) {
      impl_->socket.reset();
      fail(ErrorCode::ParseError, std::string("malformed reply: ") + e.what());
    }
  }
  fail(ErrorCode::Unavailable, "orchestrator unreachable");
}

std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& endpoint, std::uint16_t default_port) {
  const auto colon = endpoint.rfind(':');
  if (colon == std::string::npos) return {endpoint.empty() ? "127.0.0.1" : endpoint, default_port};
  try {
    const int port = std::stoi(endpoint.substr(colon + 1));
    if (port < 0 || port > 65535) throw std::out_of_range("port");
    return {endpoint.substr(0, colon), static_cast<std::uint16_t>(port)};
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, "bad endpoint '" + endpoint + "'");
  }
}

}  // namespace leobed::net

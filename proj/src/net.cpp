#include "sdrad/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <system_error>

namespace sdrad::net {

namespace {

[[noreturn]] void throw_errno(const char* what) {
  throw std::system_error(errno, std::generic_category(), what);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

void Socket::reset() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Socket listen_tcp(const std::string& address, std::uint16_t port, int backlog) {
  Socket sock(::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
  if (!sock.valid()) throw_errno("socket");
  int one = 1;
  ::setsockopt(sock.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) != 1) {
    throw std::system_error(EINVAL, std::generic_category(), "bad listen address " + address);
  }
  if (::bind(sock.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) throw_errno("bind");
  if (::listen(sock.fd(), backlog) != 0) throw_errno("listen");
  return sock;
}

std::uint16_t local_port(const Socket& socket) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(socket.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
    throw_errno("getsockname");
  }
  return ntohs(addr.sin_port);
}

std::optional<Socket> connect_tcp(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const std::string service = std::to_string(port);
  if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &found) != 0) return std::nullopt;

  std::optional<Socket> result;
  for (addrinfo* ai = found; ai != nullptr && !result; ai = ai->ai_next) {
    Socket sock(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!sock.valid()) continue;
    if (::connect(sock.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
      set_nodelay(sock.fd());
      result = std::move(sock);
    }
  }
  ::freeaddrinfo(found);
  return result;
}

bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n > 0) {
      data.remove_prefix(static_cast<std::size_t>(n));
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      pollfd pfd{fd, POLLOUT, 0};
      if (::poll(&pfd, 1, 5000) <= 0) return false;
      continue;
    }
    return false;
  }
  return true;
}

std::optional<Client> Client::connect(const std::string& host, std::uint16_t port) {
  auto sock = connect_tcp(host, port);
  if (!sock) return std::nullopt;
  return Client(std::move(*sock));
}

bool Client::send_line(std::string_view line) {
  if (!socket_.valid()) return false;
  std::string framed(line);
  framed.push_back('\n');
  return send_all(socket_.fd(), framed);
}

bool Client::fill() {
  char chunk[16384];
  while (true) {
    const ssize_t n = ::recv(socket_.fd(), chunk, sizeof chunk, 0);
    if (n > 0) {
      buffer_.append(chunk, static_cast<std::size_t>(n));
      return true;
    }
    if (n < 0 && errno == EINTR) continue;
    return false;
  }
}

std::optional<Response> Client::read_response() {
  if (!socket_.valid()) return std::nullopt;
  std::size_t eol;
  while ((eol = buffer_.find('\n')) == std::string::npos) {
    if (buffer_.size() > 64 || !fill()) {
      close();
      return std::nullopt;
    }
  }
  const std::string_view head(buffer_.data(), eol);
  const auto space = head.find(' ');
  if (space == std::string_view::npos) {
    close();
    return std::nullopt;
  }
  std::size_t len = 0;
  const auto digits = head.substr(space + 1);
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), len);
  if (ec != std::errc{} || ptr != digits.data() + digits.size()) {
    close();
    return std::nullopt;
  }
  Response response{std::string(head.substr(0, space)), {}};
  while (buffer_.size() < eol + 1 + len) {
    if (!fill()) {
      close();
      return std::nullopt;
    }
  }
  response.body = buffer_.substr(eol + 1, len);
  buffer_.erase(0, eol + 1 + len);
  return response;
}

std::optional<Response> Client::request(std::string_view line) {
  if (!send_line(line)) {
    close();
    return std::nullopt;
  }
  return read_response();
}

void Client::set_receive_timeout(std::chrono::milliseconds timeout) {
  if (!socket_.valid()) return;
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(socket_.fd(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
}

}  // namespace sdrad::net

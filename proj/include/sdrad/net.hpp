#pragma once

// Thin POSIX TCP helpers shared by the server, the load generator and tests.

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace sdrad::net {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& other) noexcept : fd_(other.release()) {}
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      reset();
      fd_ = other.release();
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() {
    const int fd = fd_;
    fd_ = -1;
    return fd;
  }
  void reset();

 private:
  int fd_ = -1;
};

// Non-blocking listening socket. Port 0 picks an ephemeral port. Throws
// std::system_error on failure.
Socket listen_tcp(const std::string& address, std::uint16_t port, int backlog = 512);
std::uint16_t local_port(const Socket& socket);

// Blocking connected socket with TCP_NODELAY, or nullopt when the peer
// refuses or is unreachable.
std::optional<Socket> connect_tcp(const std::string& host, std::uint16_t port);

// Writes everything, waiting for writability on non-blocking sockets.
bool send_all(int fd, std::string_view data);

struct Response {
  std::string status;  // "OK" or "ERR"
  std::string body;
};

// Blocking request/response client for the line protocol:
//   request  METHOD SP PATH LF
//   response STATUS SP <len> LF <len bytes>
class Client {
 public:
  static std::optional<Client> connect(const std::string& host, std::uint16_t port);

  bool send_line(std::string_view line);  // appends LF
  // nullopt on EOF, reset or a malformed frame.
  std::optional<Response> read_response();
  std::optional<Response> request(std::string_view line);
  void set_receive_timeout(std::chrono::milliseconds timeout);
  void close() { socket_.reset(); }
  bool connected() const { return socket_.valid(); }

 private:
  explicit Client(Socket socket) : socket_(std::move(socket)) {}
  bool fill();

  Socket socket_;
  std::string buffer_;
};

}  // namespace sdrad::net

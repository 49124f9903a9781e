#include "sdrad/guard_server.hpp"

#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace sdrad::server {

namespace {

bool valid_method(std::string_view method) {
  if (method.empty() || method.size() > 16) return false;
  return std::all_of(method.begin(), method.end(), [](char c) { return c >= 'A' && c <= 'Z'; });
}

bool valid_path(std::string_view path) {
  if (path.empty() || path.front() != '/') return false;
  return std::none_of(path.begin(), path.end(), [](char c) {
    return c == ' ' || static_cast<unsigned char>(c) < 0x20 || c == 0x7f;
  });
}

}  // namespace

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::Baseline:
      return "baseline";
    case Mode::Tlsf:
      return "tlsf";
    case Mode::Domains:
      return "domains";
  }
  return "unknown";
}

std::optional<Mode> parse_mode(std::string_view text) {
  if (text == "baseline") return Mode::Baseline;
  if (text == "tlsf") return Mode::Tlsf;
  if (text == "domains") return Mode::Domains;
  return std::nullopt;
}

std::optional<std::size_t> parse_payload(std::string_view text) {
  if (text == "0k") return 0;
  if (text == "1k") return 1024;
  if (text == "4k") return 4096;
  if (text == "16k") return 16384;
  return std::nullopt;
}

std::string payload_label(std::size_t bytes) {
  if (bytes % 1024 == 0) return std::to_string(bytes / 1024) + "k";
  return std::to_string(bytes) + "b";
}

ParseResult parse_request_line(MemoryArena& arena, std::span<const std::byte> line,
                               const Capability& buf) {
  // Deliberately unchecked copy: the capability is the only guard.
  if (auto fault = arena.store(buf, 0, line)) return *fault;

  std::string text(line.size(), '\0');
  if (auto fault = arena.load_into(buf, 0, std::as_writable_bytes(std::span(text)))) return *fault;

  std::string_view view(text);
  if (view.empty() || view.back() != '\n') return ParseError{"request line not terminated by LF"};
  view.remove_suffix(1);
  if (!view.empty() && view.back() == '\r') view.remove_suffix(1);

  const auto space = view.find(' ');
  if (space == std::string_view::npos) return ParseError{"missing path"};
  const auto method = view.substr(0, space);
  const auto path = view.substr(space + 1);
  if (!valid_method(method)) return ParseError{"bad method"};
  if (!valid_path(path)) return ParseError{"bad path"};
  return RequestLine{std::string(method), std::string(path), line.size()};
}

ParseResult parse_request_line(MemoryArena& arena, std::string_view line, const Capability& buf) {
  return parse_request_line(arena, std::as_bytes(std::span(line.data(), line.size())), buf);
}

std::string frame_response(std::string_view status, std::string_view body) {
  std::string out;
  out.reserve(status.size() + 24 + body.size());
  out.append(status);
  out.push_back(' ');
  out.append(std::to_string(body.size()));
  out.push_back('\n');
  out.append(body);
  return out;
}

std::string make_payload(std::size_t bytes) {
  std::string out(bytes, '\0');
  for (std::size_t i = 0; i < bytes; ++i) out[i] = static_cast<char>('a' + i % 26);
  return out;
}

// -- RequestHandler ----------------------------------------------------------

namespace {

ManagerConfig manager_config_for(const ServerConfig& config) {
  ManagerConfig mc;
  mc.arena_size = config.arena_size;
  mc.heap_size = config.heap_size;
  mc.main_fault = MainFaultPolicy::Throw;
  return mc;
}

}  // namespace

RequestHandler::RequestHandler(const ServerConfig& config)
    : mode_(config.mode),
      header_buf_len_(config.header_buf_len),
      payload_(make_payload(config.payload_size)),
      manager_(manager_config_for(config)) {
  reserved_base_ = manager_.reserved_bytes();
  reserved_high_water_ = reserved_base_;
}

ParseResult RequestHandler::parse_in_current_domain(Manager& m, std::string_view line) {
  auto buf = m.dalloc(header_buf_len_);
  if (!buf) throw std::runtime_error(std::string("parser buffer: ") + tlsf::to_string(buf.error()));
  ParseResult result = parse_request_line(m.arena(), line, *buf);
  if (const auto* fault = std::get_if<FaultRecord>(&result)) m.dispatch(*fault);
  m.dfree(*buf);
  return result;
}

Reply RequestHandler::handle(std::string_view line) {
  ParseResult result;
  bool aborted = false;

  switch (mode_) {
    case Mode::Baseline: {
      const auto region = manager_.arena().reserve(header_buf_len_);
      if (!region) throw std::runtime_error("parser buffer: arena exhausted");
      auto cap = cap_address_set(manager_.root(), region->base);
      auto buf = cap_bounds_set(*cap, header_buf_len_);
      result = parse_request_line(manager_.arena(), line, *buf);
      manager_.arena().release(region->id);
      if (const auto* fault = std::get_if<FaultRecord>(&result)) manager_.dispatch(*fault);
      break;
    }
    case Mode::Tlsf:
      result = parse_in_current_domain(manager_, line);
      break;
    case Mode::Domains: {
      auto outcome = manager_.call(kParserDomain, [this, line](Manager& m) {
        return parse_in_current_domain(m, line);
      });
      if (outcome.is_normal()) {
        result = std::move(outcome.value());
      } else {
        aborted = true;
      }
      break;
    }
  }

  const std::size_t reserved = manager_.reserved_bytes();
  reserved_high_water_ = std::max(reserved_high_water_, reserved);

  if (aborted) {
    stats_.rejected_malicious += 1;
    aborts_ += 1;
    abort_reserved_delta_max_ =
        std::max(abort_reserved_delta_max_, reserved > reserved_base_ ? reserved - reserved_base_ : 0);
    return Reply{ReplyKind::Rejected, {}, true};
  }
  if (const auto* error = std::get_if<ParseError>(&result)) {
    Reply reply{ReplyKind::Malformed, frame_response("ERR", error->reason), false};
    stats_.served += 1;
    stats_.malformed += 1;
    stats_.bytes_out += reply.bytes.size();
    return reply;
  }
  return respond(std::get<RequestLine>(result));
}

Reply RequestHandler::respond(const RequestLine& request) {
  if (request.method == "STATS") {
    return Reply{ReplyKind::Stats, frame_response("OK", stats_reporter ? stats_reporter() : ""), false};
  }
  if (request.method == "SHUTDOWN") return Reply{ReplyKind::Shutdown, frame_response("OK", ""), true};

  Reply reply{ReplyKind::Served, frame_response("OK", payload_), false};
  stats_.served += 1;
  stats_.bytes_out += reply.bytes.size();
  return reply;
}

// -- ServerReport ------------------------------------------------------------

std::string ServerReport::to_text() const {
  std::ostringstream out;
  out << "mode=" << to_string(mode) << '\n'
      << "payload=" << payload_size << '\n'
      << "served=" << served << '\n'
      << "rejected=" << rejected << '\n'
      << "malformed=" << malformed << '\n'
      << "bytes_out=" << bytes_out << '\n'
      << "aborts=" << aborts << '\n'
      << "worker_deaths=" << worker_deaths << '\n'
      << "workers_alive=" << workers_alive << '\n'
      << "reserved_now=" << reserved_now << '\n'
      << "reserved_base=" << reserved_base << '\n'
      << "reserved_high_water=" << reserved_high_water << '\n'
      << "abort_reserved_delta_max=" << abort_reserved_delta_max << '\n';
  return out.str();
}

std::optional<ServerReport> ServerReport::parse(std::string_view text) {
  ServerReport report;
  bool saw_mode = false;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    const auto line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) return std::nullopt;
    const auto key = line.substr(0, eq);
    const auto value = line.substr(eq + 1);
    if (key == "mode") {
      auto mode = parse_mode(value);
      if (!mode) return std::nullopt;
      report.mode = *mode;
      saw_mode = true;
      continue;
    }
    std::uint64_t number = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), number);
    if (ec != std::errc{} || ptr != value.data() + value.size()) return std::nullopt;
    if (key == "payload") report.payload_size = number;
    else if (key == "served") report.served = number;
    else if (key == "rejected") report.rejected = number;
    else if (key == "malformed") report.malformed = number;
    else if (key == "bytes_out") report.bytes_out = number;
    else if (key == "aborts") report.aborts = number;
    else if (key == "worker_deaths") report.worker_deaths = number;
    else if (key == "workers_alive") report.workers_alive = number;
    else if (key == "reserved_now") report.reserved_now = number;
    else if (key == "reserved_base") report.reserved_base = number;
    else if (key == "reserved_high_water") report.reserved_high_water = number;
    else if (key == "abort_reserved_delta_max") report.abort_reserved_delta_max = number;
  }
  if (!saw_mode) return std::nullopt;
  return report;
}

// -- Server ------------------------------------------------------------------

Server::Server(ServerConfig config) : config_(std::move(config)) {
  if (config_.workers == 0) config_.workers = 1;
}

Server::~Server() {
  request_stop();
  wait();
}

std::uint16_t Server::start() {
  listener_ = net::listen_tcp(config_.bind_address, config_.listen_port);
  port_ = net::local_port(listener_);
  workers_.assign(config_.workers, WorkerState{});
  workers_alive_ = config_.workers;
  for (std::size_t i = 0; i < config_.workers; ++i) {
    threads_.emplace_back([this, i] { worker_loop(i); });
  }
  return port_;
}

void Server::request_stop() { stopping_ = true; }

void Server::wait() {
  for (auto& t : threads_) {
    if (t.joinable()) t.join();
  }
  threads_.clear();
  listener_.reset();
}

bool Server::stopped_by_fault() const {
  std::lock_guard lock(stats_mutex_);
  return std::any_of(workers_.begin(), workers_.end(), [](const WorkerState& w) { return w.dead; });
}

void Server::publish(std::size_t index, const RequestHandler& handler) {
  std::lock_guard lock(stats_mutex_);
  WorkerState& w = workers_[index];
  w.stats = handler.stats();
  w.reserved_now = const_cast<RequestHandler&>(handler).manager().reserved_bytes();
  w.reserved_base = handler.reserved_base();
  w.reserved_high_water = handler.reserved_high_water();
  w.abort_reserved_delta_max = handler.abort_reserved_delta_max();
  w.aborts = handler.aborts();
}

ServerReport Server::report() const {
  std::lock_guard lock(stats_mutex_);
  ServerReport r;
  r.mode = config_.mode;
  r.payload_size = config_.payload_size;
  for (const auto& w : workers_) {
    r.served += w.stats.served;
    r.rejected += w.stats.rejected_malicious;
    r.malformed += w.stats.malformed;
    r.bytes_out += w.stats.bytes_out;
    r.aborts += w.aborts;
    r.worker_deaths += w.dead ? 1 : 0;
    r.reserved_now += w.reserved_now;
    r.reserved_base += w.reserved_base;
    r.reserved_high_water += w.reserved_high_water;
    r.abort_reserved_delta_max = std::max<std::uint64_t>(r.abort_reserved_delta_max, w.abort_reserved_delta_max);
  }
  r.workers_alive = workers_alive_.load();
  return r;
}

void Server::worker_loop(std::size_t index) {
  struct Connection {
    net::Socket socket;
    std::string pending;
    bool closed = false;
  };

  std::optional<RequestHandler> handler;
  try {
    handler.emplace(config_);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "sdrad-server: worker %zu failed to start: %s\n", index, e.what());
    std::lock_guard lock(stats_mutex_);
    workers_[index].dead = true;
    workers_alive_ -= 1;
    return;
  }
  handler->stats_reporter = [this] { return report().to_text(); };
  publish(index, *handler);

  std::vector<Connection> conns;
  std::vector<pollfd> fds;
  char chunk[16384];
  bool died = false;

  while (!stopping_ && !died) {
    fds.clear();
    fds.push_back(pollfd{listener_.fd(), POLLIN, 0});
    for (const auto& c : conns) fds.push_back(pollfd{c.socket.fd(), POLLIN, 0});
    const int ready = ::poll(fds.data(), fds.size(), 50);
    if (ready <= 0) continue;

    if (fds[0].revents & POLLIN) {
      while (true) {
        const int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0) break;
        net::Socket socket(fd);
        if (connections_.load() >= config_.max_connections) continue;
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        connections_ += 1;
        conns.push_back(Connection{std::move(socket), {}, false});
      }
    }

    for (std::size_t i = 1; i < fds.size() && !died; ++i) {
      if ((fds[i].revents & (POLLIN | POLLHUP | POLLERR)) == 0) continue;
      Connection& conn = conns[i - 1];
      const ssize_t n = ::recv(conn.socket.fd(), chunk, sizeof chunk, 0);
      if (n == 0 || (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR)) {
        conn.closed = true;
        continue;
      }
      if (n < 0) continue;
      conn.pending.append(chunk, static_cast<std::size_t>(n));

      std::size_t eol;
      while (!conn.closed && (eol = conn.pending.find('\n')) != std::string::npos) {
        const std::string line = conn.pending.substr(0, eol + 1);
        conn.pending.erase(0, eol + 1);
        Reply reply;
        try {
          reply = handler->handle(line);
        } catch (const FatalFault& fault) {
          std::fprintf(stderr, "sdrad-server: worker %zu terminated: %s\n", index, fault.what());
          died = true;
          break;
        }
        publish(index, *handler);
        if (!reply.bytes.empty() && !net::send_all(conn.socket.fd(), reply.bytes)) conn.closed = true;
        if (reply.close_connection) conn.closed = true;
        if (reply.kind == ReplyKind::Shutdown) request_stop();
      }
      if (conn.pending.size() > kMaxPendingLine) conn.closed = true;
    }

    const auto before = conns.size();
    conns.erase(std::remove_if(conns.begin(), conns.end(), [](const Connection& c) { return c.closed; }),
                conns.end());
    connections_ -= before - conns.size();
  }

  {
    std::lock_guard lock(stats_mutex_);
    if (died) workers_[index].dead = true;
  }
  connections_ -= conns.size();
  conns.clear();
  if (workers_alive_.fetch_sub(1) == 1 && died) {
    // Last worker gone: nobody accepts any more, so refuse new connections.
    ::shutdown(listener_.fd(), SHUT_RDWR);
  }
}

}  // namespace sdrad::server

#pragma once

// Line-protocol mini server whose request parser runs inside a nested
// domain. The parser copies the raw request line into a fixed-size
// capability-backed buffer with no length check; an oversized line faults
// at the capability layer, the parse domain is discarded and only that
// connection is dropped.
//
// Wire format:
//   request   METHOD SP PATH LF
//   response  OK SP <len> LF <len bytes>     (ERR for malformed lines)
// Control requests "STATS /" and "SHUTDOWN /" return the server report and
// stop the server respectively.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include "sdrad/cap_mem.hpp"
#include "sdrad/domains.hpp"
#include "sdrad/net.hpp"

namespace sdrad::server {

enum class Mode {
  Baseline,  // arena-level allocation, no domains
  Tlsf,      // TLSF heap of the main domain, no domains
  Domains,   // parse inside the nested parser domain
};

const char* to_string(Mode mode);
std::optional<Mode> parse_mode(std::string_view text);

// "0k" | "1k" | "4k" | "16k" -> bytes.
std::optional<std::size_t> parse_payload(std::string_view text);
std::string payload_label(std::size_t bytes);

inline constexpr std::size_t kDefaultHeaderBufLen = 64;
inline constexpr Udi kParserDomain = 1;
inline constexpr std::size_t kMaxPendingLine = std::size_t{1} << 20;

struct RequestLine {
  std::string method;
  std::string path;
  std::size_t raw_len = 0;
};

struct ParseError {
  std::string reason;
};

using ParseResult = std::variant<RequestLine, FaultRecord, ParseError>;

// Copies `line` into `buf` unchecked, then tokenizes the buffer contents.
// A line longer than the buffer yields the capability fault; nothing beyond
// the buffer's top is written.
ParseResult parse_request_line(MemoryArena& arena, std::span<const std::byte> line,
                               const Capability& buf);
ParseResult parse_request_line(MemoryArena& arena, std::string_view line, const Capability& buf);

struct ServerConfig {
  std::string bind_address = "127.0.0.1";
  std::uint16_t listen_port = 0;
  Mode mode = Mode::Domains;
  std::size_t payload_size = 0;
  std::size_t header_buf_len = kDefaultHeaderBufLen;
  std::size_t max_connections = 1024;
  std::size_t workers = 1;
  std::size_t arena_size = std::size_t{32} << 20;
  std::optional<std::size_t> heap_size;  // unset: APP_HEAP_SIZE or the default
};

struct ConnectionStats {
  std::uint64_t served = 0;
  std::uint64_t rejected_malicious = 0;
  std::uint64_t malformed = 0;  // subset of served: answered with ERR
  std::uint64_t bytes_out = 0;
};

enum class ReplyKind { Served, Malformed, Rejected, Stats, Shutdown };

struct Reply {
  ReplyKind kind = ReplyKind::Served;
  std::string bytes;  // framed response; empty for Rejected
  bool close_connection = false;
};

std::string frame_response(std::string_view status, std::string_view body);
std::string make_payload(std::size_t bytes);

// Per-worker request pipeline. Owns the worker's domain manager.
class RequestHandler {
 public:
  explicit RequestHandler(const ServerConfig& config);

  // Handles one request line (LF included). Throws FatalFault when a fault
  // hits outside any domain (baseline and tlsf modes): the worker dies.
  Reply handle(std::string_view line);

  Manager& manager() { return manager_; }
  Mode mode() const { return mode_; }
  const ConnectionStats& stats() const { return stats_; }
  std::size_t reserved_base() const { return reserved_base_; }
  std::size_t reserved_high_water() const { return reserved_high_water_; }
  std::size_t abort_reserved_delta_max() const { return abort_reserved_delta_max_; }
  std::uint64_t aborts() const { return aborts_; }

  // Optional hook producing the STATS body.
  std::function<std::string()> stats_reporter;

 private:
  ParseResult parse_in_current_domain(Manager& m, std::string_view line);
  Reply respond(const RequestLine& request);

  Mode mode_;
  std::size_t header_buf_len_;
  std::string payload_;
  Manager manager_;
  ConnectionStats stats_;
  std::size_t reserved_base_ = 0;
  std::size_t reserved_high_water_ = 0;
  std::size_t abort_reserved_delta_max_ = 0;
  std::uint64_t aborts_ = 0;
};

struct ServerReport {
  Mode mode = Mode::Domains;
  std::size_t payload_size = 0;
  std::uint64_t served = 0;
  std::uint64_t rejected = 0;
  std::uint64_t malformed = 0;
  std::uint64_t bytes_out = 0;
  std::uint64_t aborts = 0;
  std::uint64_t worker_deaths = 0;
  std::uint64_t workers_alive = 0;
  std::uint64_t reserved_now = 0;
  std::uint64_t reserved_base = 0;
  std::uint64_t reserved_high_water = 0;
  std::uint64_t abort_reserved_delta_max = 0;

  std::string to_text() const;
  static std::optional<ServerReport> parse(std::string_view text);
};

class Server {
 public:
  explicit Server(ServerConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and spawns the workers; returns the bound port. Throws
  // std::system_error when the port cannot be bound.
  std::uint16_t start();
  void request_stop();
  // Blocks until every worker has exited (stop request or death).
  void wait();

  bool alive() const { return workers_alive_.load() > 0 && !stopping_.load(); }
  bool stopped_by_fault() const;
  std::uint16_t port() const { return port_; }
  ServerReport report() const;
  const ServerConfig& config() const { return config_; }

 private:
  struct WorkerState {
    ConnectionStats stats;
    std::size_t reserved_now = 0;
    std::size_t reserved_base = 0;
    std::size_t reserved_high_water = 0;
    std::size_t abort_reserved_delta_max = 0;
    std::uint64_t aborts = 0;
    bool dead = false;
  };

  void worker_loop(std::size_t index);
  void publish(std::size_t index, const RequestHandler& handler);

  ServerConfig config_;
  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::vector<std::thread> threads_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> workers_alive_{0};
  std::atomic<std::size_t> connections_{0};
  mutable std::mutex stats_mutex_;
  std::vector<WorkerState> workers_;
};

}  // namespace sdrad::server

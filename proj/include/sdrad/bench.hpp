#pragma once

// Closed-loop load generator for the guard server, plus the five-request
// resilience demo.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdrad/guard_server.hpp"

namespace sdrad::bench {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BenchConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::size_t connections = 8;
  std::chrono::duration<double> duration{10.0};
  std::string payload = "0k";
  double malicious_ratio = 0.0;
  std::size_t repetitions = 3;
  std::string out_path;
  std::uint64_t seed = 1;
  std::size_t oversize = 200;  // length of the injected path
};

// One repetition. `requests` counts every request the clients completed,
// malicious ones included.
struct RunRow {
  std::size_t run = 0;
  std::uint64_t requests = 0;
  double rps = 0.0;
  std::uint64_t served = 0;    // server-side delta
  std::uint64_t rejected = 0;  // server-side delta
  std::uint64_t malicious_sent = 0;
  double elapsed_s = 0.0;
  bool worker_died = false;
};

struct BenchResult {
  std::string mode;
  std::string payload;
  std::size_t connections = 0;
  double duration_s = 0.0;
  double rps_mean = 0.0;
  double rps_std = 0.0;
  std::uint64_t requests = 0;
  std::uint64_t served = 0;
  std::uint64_t rejected = 0;
  std::uint64_t malicious_sent = 0;
  bool worker_died = false;
  std::vector<RunRow> runs;
  server::ServerReport before;  // server STATS before the first run
  std::optional<server::ServerReport> after;  // unset if the server died
};

// Queries the server report over a fresh connection.
std::optional<server::ServerReport> query_stats(const std::string& host, std::uint16_t port);

// Throws HarnessError when the server cannot be reached or the config is
// invalid.
BenchResult run_workload(const BenchConfig& cfg);

struct OverheadRow {
  std::string mode;
  std::string payload;
  double rps_mean = 0.0;
  double rps_std = 0.0;
  double overhead_pct = 0.0;  // relative to baseline at the same payload
};

// Needs a baseline result for every payload present. Throws HarnessError on
// a missing baseline or on duplicate (mode, payload) cells.
std::vector<OverheadRow> compare_modes(const std::vector<BenchResult>& results);

void write_runs_csv(std::ostream& out, const std::vector<BenchResult>& results);
void write_overhead_csv(std::ostream& out, const std::vector<OverheadRow>& rows);

// Population mean and sample standard deviation of the per-run rps.
std::pair<double, double> mean_std(const std::vector<RunRow>& runs);

struct MatrixConfig {
  std::vector<server::Mode> modes{server::Mode::Baseline, server::Mode::Tlsf, server::Mode::Domains};
  std::vector<std::string> payloads{"0k", "1k", "4k", "16k"};
  BenchConfig load;  // host, port and payload are overridden per cell
  std::size_t workers = 1;
};

// Starts an in-process server per (mode, payload) cell and loads it.
std::vector<BenchResult> run_matrix(const MatrixConfig& cfg);

// -- demo ---------------------------------------------------------------------

inline constexpr std::size_t kDemoBufferLen = 5;

std::vector<std::string> demo_inputs();

struct DemoRun {
  std::string label;
  std::size_t iterations_completed = 0;  // loop iterations that finished
  std::size_t handled = 0;
  std::size_t rejected = 0;
  bool terminated = false;
  std::size_t terminated_at = 0;  // 1-based request index
  std::vector<std::string> transcript;
};

// Demo loop: five inputs read into a five-byte heap buffer, with
// and without a domain around the unchecked copy.
DemoRun demo_in_process(bool use_domains);

// The same five requests sent to a live server in the given mode; the third
// request is oversized.
DemoRun demo_over_server(server::Mode mode);

}  // namespace sdrad::bench

#include "sdrad/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <random>
#include <thread>

#include "sdrad/net.hpp"

namespace sdrad::bench {

namespace {

using Clock = std::chrono::steady_clock;

constexpr const char* kBenignLine = "GET /index";

struct ClientTally {
  std::uint64_t requests = 0;
  std::uint64_t malicious = 0;
  bool lost_server = false;
};

void client_loop(const BenchConfig& cfg, std::uint64_t seed, Clock::time_point deadline,
                 std::atomic<bool>& stop, ClientTally& tally) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution malicious(cfg.malicious_ratio);
  const std::string attack = "GET /" + std::string(cfg.oversize, 'A');
  std::optional<net::Client> client;

  while (!stop.load(std::memory_order_relaxed) && Clock::now() < deadline) {
    if (!client || !client->connected()) {
      client = net::Client::connect(cfg.host, cfg.port);
      if (!client) {
        tally.lost_server = true;
        stop = true;
        return;
      }
      client->set_receive_timeout(std::chrono::seconds(5));
    }
    if (malicious(rng)) {
      // The server answers an oversized line by dropping the connection.
      if (!client->send_line(attack)) {
        client.reset();
        continue;
      }
      auto reply = client->read_response();
      tally.requests += 1;
      tally.malicious += 1;
      if (!reply) client.reset();
      continue;
    }
    auto reply = client->request(kBenignLine);
    if (!reply) {
      // A benign request only goes unanswered when its worker is gone.
      tally.lost_server = true;
      stop = true;
      return;
    }
    tally.requests += 1;
  }
}

}  // namespace

std::optional<server::ServerReport> query_stats(const std::string& host, std::uint16_t port) {
  auto client = net::Client::connect(host, port);
  if (!client) return std::nullopt;
  client->set_receive_timeout(std::chrono::seconds(5));
  auto reply = client->request("STATS /");
  if (!reply || reply->status != "OK") return std::nullopt;
  return server::ServerReport::parse(reply->body);
}

std::pair<double, double> mean_std(const std::vector<RunRow>& runs) {
  if (runs.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (const auto& r : runs) sum += r.rps;
  const double mean = sum / static_cast<double>(runs.size());
  if (runs.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (const auto& r : runs) sq += (r.rps - mean) * (r.rps - mean);
  return {mean, std::sqrt(sq / static_cast<double>(runs.size() - 1))};
}

BenchResult run_workload(const BenchConfig& cfg) {
  if (cfg.connections == 0) throw HarnessError("connections must be at least 1");
  if (!(cfg.duration.count() > 0.0)) throw HarnessError("duration must be positive");
  if (cfg.repetitions == 0) throw HarnessError("repetitions must be at least 1");
  if (!(cfg.malicious_ratio >= 0.0 && cfg.malicious_ratio <= 1.0)) {
    throw HarnessError("malicious ratio must lie in [0, 1]");
  }
  if (!server::parse_payload(cfg.payload)) throw HarnessError("unknown payload " + cfg.payload);

  auto initial = query_stats(cfg.host, cfg.port);
  if (!initial) {
    throw HarnessError("server at " + cfg.host + ":" + std::to_string(cfg.port) + " is not reachable");
  }

  BenchResult result;
  result.mode = server::to_string(initial->mode);
  result.payload = server::payload_label(initial->payload_size);
  result.connections = cfg.connections;
  result.duration_s = cfg.duration.count();
  result.before = *initial;

  server::ServerReport prev = *initial;
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
    std::vector<ClientTally> tallies(cfg.connections);
    std::vector<std::thread> threads;
    std::atomic<bool> stop{false};
    const auto start = Clock::now();
    const auto deadline = start + std::chrono::duration_cast<Clock::duration>(cfg.duration);
    for (std::size_t i = 0; i < cfg.connections; ++i) {
      const std::uint64_t seed = cfg.seed * 0x9E3779B97F4A7C15ULL + rep * 1000003ULL + i;
      threads.emplace_back(client_loop, std::cref(cfg), seed, deadline, std::ref(stop), std::ref(tallies[i]));
    }
    for (auto& t : threads) t.join();
    const double elapsed = std::chrono::duration<double>(Clock::now() - start).count();

    RunRow row;
    row.run = rep + 1;
    row.elapsed_s = elapsed;
    for (const auto& t : tallies) {
      row.requests += t.requests;
      row.malicious_sent += t.malicious;
      row.worker_died = row.worker_died || t.lost_server;
    }
    row.rps = elapsed > 0.0 ? static_cast<double>(row.requests) / elapsed : 0.0;

    auto now = query_stats(cfg.host, cfg.port);
    if (now) {
      row.served = now->served - prev.served;
      row.rejected = now->rejected - prev.rejected;
      row.worker_died = row.worker_died || now->worker_deaths > prev.worker_deaths;
      prev = *now;
    } else {
      row.worker_died = true;
    }
    result.runs.push_back(row);
    if (row.worker_died) break;
  }

  for (const auto& r : result.runs) {
    result.requests += r.requests;
    result.served += r.served;
    result.rejected += r.rejected;
    result.malicious_sent += r.malicious_sent;
    result.worker_died = result.worker_died || r.worker_died;
  }
  std::tie(result.rps_mean, result.rps_std) = mean_std(result.runs);
  if (!result.worker_died) result.after = prev;
  return result;
}

std::vector<OverheadRow> compare_modes(const std::vector<BenchResult>& results) {
  if (results.empty()) return {};
  std::map<std::pair<std::string, std::string>, const BenchResult*> cells;
  for (const auto& r : results) {
    if (r.connections != results.front().connections || r.duration_s != results.front().duration_s) {
      throw HarnessError("results were measured with different connection counts or durations");
    }
    if (!cells.emplace(std::make_pair(r.payload, r.mode), &r).second) {
      throw HarnessError("duplicate result for " + r.mode + " at " + r.payload);
    }
  }

  std::vector<OverheadRow> rows;
  for (const auto& r : results) {
    auto base = cells.find({r.payload, "baseline"});
    if (base == cells.end()) throw HarnessError("no baseline result for payload " + r.payload);
    const double base_rps = base->second->rps_mean;
    OverheadRow row{r.mode, r.payload, r.rps_mean, r.rps_std, 0.0};
    row.overhead_pct = base_rps > 0.0 ? (base_rps - r.rps_mean) / base_rps * 100.0 : 0.0;
    rows.push_back(row);
  }
  return rows;
}

void write_runs_csv(std::ostream& out, const std::vector<BenchResult>& results) {
  out << "mode,payload,run,requests,rps,served,rejected\n";
  char rps[64];
  for (const auto& r : results) {
    for (const auto& run : r.runs) {
      std::snprintf(rps, sizeof rps, "%.2f", run.rps);
      out << r.mode << ',' << r.payload << ',' << run.run << ',' << run.requests << ',' << rps << ','
          << run.served << ',' << run.rejected << '\n';
    }
  }
}

void write_overhead_csv(std::ostream& out, const std::vector<OverheadRow>& rows) {
  out << "mode,payload,rps_mean,rps_std,overhead_pct\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%s,%.2f,%.2f,%.2f\n", r.mode.c_str(), r.payload.c_str(), r.rps_mean,
                  r.rps_std, r.overhead_pct);
    out << line;
  }
}

std::vector<BenchResult> run_matrix(const MatrixConfig& cfg) {
  std::vector<BenchResult> results;
  for (const auto& payload : cfg.payloads) {
    const auto bytes = server::parse_payload(payload);
    if (!bytes) throw HarnessError("unknown payload " + payload);
    for (const auto mode : cfg.modes) {
      server::ServerConfig sc;
      sc.mode = mode;
      sc.payload_size = *bytes;
      sc.workers = cfg.workers;
      server::Server srv(sc);
      BenchConfig load = cfg.load;
      load.host = sc.bind_address;
      load.port = srv.start();
      load.payload = payload;
      results.push_back(run_workload(load));
      srv.request_stop();
      srv.wait();
    }
  }
  return results;
}

// -- demo ---------------------------------------------------------------------

std::vector<std::string> demo_inputs() {
  return {"abc", "road", "AAAAAAAAAAAAAAAAAAAAAAAA", "tree", "xy"};
}

DemoRun demo_in_process(bool use_domains) {
  ManagerConfig mc;
  mc.arena_size = std::size_t{8} << 20;
  mc.heap_size = std::size_t{1} << 20;
  mc.main_fault = MainFaultPolicy::Throw;
  Manager m(mc);

  DemoRun run;
  run.label = use_domains ? "with domains" : "without domains";
  const auto inputs = demo_inputs();

  // scanf("%s") into char buff[5]: the copy includes the terminator and is
  // not length-checked.
  auto get_request = [&](const std::string& input) {
    auto buf = m.dalloc(kDemoBufferLen);
    if (!buf) throw std::runtime_error("demo: heap exhausted");
    auto exact = cap_bounds_set(*buf, kDemoBufferLen);
    run.transcript.push_back("Waiting for the request:");
    run.transcript.push_back("> " + input);
    std::string bytes = input;
    bytes.push_back('\0');
    m.store(*exact, 0, std::as_bytes(std::span(bytes.data(), bytes.size())));
    run.transcript.push_back("Handling the request");
    m.dfree(*buf);
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!use_domains) {
      try {
        get_request(inputs[i]);
      } catch (const FatalFault& fault) {
        run.terminated = true;
        run.terminated_at = i + 1;
        run.transcript.push_back(std::string("In-address space security exception: ") + fault.what());
        break;
      }
      run.handled += 1;
      run.iterations_completed += 1;
      continue;
    }
    m.with_setup(1, [&](StatusCode err) {
      if (err == StatusCode::SUCCESSFUL_INITIALIZE || err == StatusCode::ALREADY_INITIALIZE) {
        m.enter(1);
        get_request(inputs[i]);
        m.exit();
        run.handled += 1;
      } else {
        run.transcript.push_back("Bad input!");
        run.rejected += 1;
      }
    });
    run.iterations_completed += 1;
  }
  return run;
}

DemoRun demo_over_server(server::Mode mode) {
  server::ServerConfig sc;
  sc.mode = mode;
  sc.arena_size = std::size_t{8} << 20;
  sc.heap_size = std::size_t{1} << 20;
  server::Server srv(sc);
  const auto port = srv.start();

  DemoRun run;
  run.label = std::string("server, ") + server::to_string(mode) + " mode";
  std::vector<std::string> lines;
  for (std::size_t i = 1; i <= 5; ++i) {
    lines.push_back(i == 3 ? "GET /" + std::string(sc.header_buf_len * 3, 'A') : "GET /req" + std::to_string(i));
  }

  std::optional<net::Client> client;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (!client || !client->connected()) client = net::Client::connect(sc.bind_address, port);
    if (!client) {
      run.terminated = true;
      run.terminated_at = i + 1;
      run.transcript.push_back("request " + std::to_string(i + 1) + ": connection refused");
      break;
    }
    client->set_receive_timeout(std::chrono::seconds(2));
    auto reply = client->request(lines[i]);
    if (reply) {
      run.handled += 1;
      run.iterations_completed += 1;
      run.transcript.push_back("request " + std::to_string(i + 1) + ": " + reply->status);
      continue;
    }
    client.reset();
    if (srv.report().worker_deaths > 0) {
      run.terminated = true;
      run.terminated_at = i + 1;
      run.transcript.push_back("request " + std::to_string(i + 1) + ": worker terminated by fault");
      break;
    }
    run.rejected += 1;
    run.iterations_completed += 1;
    run.transcript.push_back("request " + std::to_string(i + 1) + ": rejected, connection dropped");
  }
  srv.request_stop();
  srv.wait();
  return run;
}

}  // namespace sdrad::bench

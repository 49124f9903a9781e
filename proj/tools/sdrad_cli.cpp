// sdrad: guard server, load generator, attack client and resilience demo.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "sdrad/bench.hpp"
#include "sdrad/guard_server.hpp"
#include "sdrad/net.hpp"

namespace {

using namespace sdrad;

volatile std::sig_atomic_t g_signalled = 0;

void on_signal(int) { g_signalled = 1; }

int run_serve(const server::ServerConfig& config) {
  server::Server srv(config);
  std::uint16_t port = 0;
  try {
    port = srv.start();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "sdrad serve: %s\n", e.what());
    return 2;
  }
  std::printf("listening on %s:%u mode=%s payload=%s buf-len=%zu workers=%zu\n", config.bind_address.c_str(),
              port, server::to_string(config.mode), server::payload_label(config.payload_size).c_str(),
              config.header_buf_len, config.workers);
  std::fflush(stdout);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (srv.alive() && !g_signalled) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  srv.request_stop();
  srv.wait();

  const auto report = srv.report();
  std::printf("%s", report.to_text().c_str());
  if (report.workers_alive == 0 && report.worker_deaths > 0) {
    std::fprintf(stderr, "sdrad serve: every worker terminated on a protection fault\n");
    return 1;
  }
  return 0;
}

void print_result(const bench::BenchResult& r) {
  std::printf("%-8s %-4s rps=%.1f (sd %.1f) requests=%llu served=%llu rejected=%llu malicious_sent=%llu%s\n",
              r.mode.c_str(), r.payload.c_str(), r.rps_mean, r.rps_std,
              static_cast<unsigned long long>(r.requests), static_cast<unsigned long long>(r.served),
              static_cast<unsigned long long>(r.rejected), static_cast<unsigned long long>(r.malicious_sent),
              r.worker_died ? " WORKER DIED" : "");
}

bool write_file(const std::string& path, const std::function<void(std::ostream&)>& writer) {
  std::ofstream out(path);
  if (!out) {
    std::fprintf(stderr, "sdrad: cannot write %s\n", path.c_str());
    return false;
  }
  writer(out);
  return static_cast<bool>(out);
}

void print_demo(const bench::DemoRun& run) {
  std::printf("== %s ==\n", run.label.c_str());
  for (const auto& line : run.transcript) std::printf("  %s\n", line.c_str());
  if (run.terminated) {
    std::printf("  -> terminated at request %zu after %zu handled\n", run.terminated_at, run.handled);
  } else {
    std::printf("  -> completed %zu iterations: %zu handled, %zu rejected\n", run.iterations_completed,
                run.handled, run.rejected);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-process domain isolation over emulated capabilities"};
  app.require_subcommand(1);

  server::ServerConfig serve_cfg;
  std::string serve_mode = "domains";
  std::string serve_payload = "0k";
  auto* serve = app.add_subcommand("serve", "Run the guard server until SIGINT or a SHUTDOWN request");
  serve->add_option("--port", serve_cfg.listen_port, "TCP port (0 picks one)");
  serve->add_option("--bind", serve_cfg.bind_address, "IPv4 listen address");
  serve->add_option("--mode", serve_mode, "baseline | tlsf | domains")
      ->check(CLI::IsMember({"baseline", "tlsf", "domains"}));
  serve->add_option("--payload", serve_payload, "Response body size")->check(CLI::IsMember({"0k", "1k", "4k", "16k"}));
  serve->add_option("--buf-len", serve_cfg.header_buf_len, "Request line buffer length")->check(CLI::PositiveNumber);
  serve->add_option("--workers", serve_cfg.workers, "Worker threads, one domain manager each")
      ->check(CLI::PositiveNumber);
  serve->add_option("--max-connections", serve_cfg.max_connections, "Connection limit");

  bench::BenchConfig bench_cfg;
  double duration_s = 10.0;
  bool self_host = false;
  std::string summary_path;
  std::size_t bench_workers = 1;
  auto* bench_cmd = app.add_subcommand("bench", "Closed-loop load against a server, or a self-hosted mode matrix");
  bench_cmd->add_option("--host", bench_cfg.host, "Server host");
  bench_cmd->add_option("--port", bench_cfg.port, "Server port");
  bench_cmd->add_option("--connections", bench_cfg.connections, "Concurrent connections")
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--duration", duration_s, "Seconds per repetition")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--payload", bench_cfg.payload, "Payload label recorded for a remote server")
      ->check(CLI::IsMember({"0k", "1k", "4k", "16k"}));
  bench_cmd->add_option("--malicious-ratio", bench_cfg.malicious_ratio, "Fraction of oversized requests")
      ->check(CLI::Range(0.0, 1.0));
  bench_cmd->add_option("--reps", bench_cfg.repetitions, "Repetitions")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--out", bench_cfg.out_path, "Per-run CSV output");
  bench_cmd->add_option("--seed", bench_cfg.seed, "Client RNG seed");
  bench_cmd->add_option("--oversize", bench_cfg.oversize, "Path length of injected requests");
  bench_cmd->add_flag("--self-host", self_host, "Start in-process servers for every mode x payload cell");
  bench_cmd->add_option("--summary", summary_path, "Overhead CSV output (self-host)");
  bench_cmd->add_option("--workers", bench_workers, "Server workers (self-host)")->check(CLI::PositiveNumber);

  std::string attack_host = "127.0.0.1";
  std::uint16_t attack_port = 0;
  std::size_t oversize = 200;
  auto* attack = app.add_subcommand("attack", "Send one oversized request line");
  attack->add_option("--host", attack_host, "Server host");
  attack->add_option("--port", attack_port, "Server port")->required();
  attack->add_option("--oversize", oversize, "Path length")->check(CLI::PositiveNumber);

  auto* demo = app.add_subcommand("demo", "Five requests, the third oversized, with and without domains");

  CLI11_PARSE(app, argc, argv);

  if (serve->parsed()) {
    serve_cfg.mode = *server::parse_mode(serve_mode);
    serve_cfg.payload_size = *server::parse_payload(serve_payload);
    return run_serve(serve_cfg);
  }

  if (bench_cmd->parsed()) {
    bench_cfg.duration = std::chrono::duration<double>(duration_s);
    std::vector<bench::BenchResult> results;
    try {
      if (self_host) {
        bench::MatrixConfig mc;
        mc.load = bench_cfg;
        mc.workers = bench_workers;
        results = bench::run_matrix(mc);
      } else {
        if (bench_cfg.port == 0) {
          std::fprintf(stderr, "sdrad bench: --port is required without --self-host\n");
          return 2;
        }
        results.push_back(bench::run_workload(bench_cfg));
        if (results.back().payload != bench_cfg.payload) {
          std::fprintf(stderr, "sdrad bench: note: server payload is %s\n", results.back().payload.c_str());
        }
      }
    } catch (const bench::HarnessError& e) {
      std::fprintf(stderr, "sdrad bench: %s\n", e.what());
      return 2;
    }
    for (const auto& r : results) print_result(r);
    if (!bench_cfg.out_path.empty() &&
        !write_file(bench_cfg.out_path, [&](std::ostream& o) { bench::write_runs_csv(o, results); })) {
      return 2;
    }
    if (self_host) {
      const auto rows = bench::compare_modes(results);
      bench::write_overhead_csv(std::cout, rows);
      if (!summary_path.empty() &&
          !write_file(summary_path, [&](std::ostream& o) { bench::write_overhead_csv(o, rows); })) {
        return 2;
      }
    }
    return 0;
  }

  if (attack->parsed()) {
    auto client = net::Client::connect(attack_host, attack_port);
    if (!client) {
      std::fprintf(stderr, "sdrad attack: cannot connect to %s:%u\n", attack_host.c_str(), attack_port);
      return 2;
    }
    client->set_receive_timeout(std::chrono::seconds(5));
    auto reply = client->request("GET /" + std::string(oversize, 'A'));
    if (reply) {
      std::printf("server answered %s with %zu bytes\n", reply->status.c_str(), reply->body.size());
    } else {
      std::printf("connection dropped by server\n");
    }
    return 0;
  }

  if (demo->parsed()) {
    const auto plain = bench::demo_in_process(false);
    const auto guarded = bench::demo_in_process(true);
    const auto srv_base = bench::demo_over_server(server::Mode::Baseline);
    const auto srv_dom = bench::demo_over_server(server::Mode::Domains);
    print_demo(plain);
    print_demo(guarded);
    print_demo(srv_base);
    print_demo(srv_dom);
    return 0;
  }
  return 0;
}

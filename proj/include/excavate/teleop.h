#pragma once

// Teleoperation service: one simulator session per TCP connection,
// speaking newline-delimited JSON.
//
//   client -> server
//     {"type":"reset"}
//     {"type":"command","valves":[v1,v2,v3,v4]}
//     {"type":"set_mode","mode":"realtime"|"step"}
//     {"type":"start_record","task":"reach"}
//     {"type":"stop_record"}
//     {"type":"config","joints":[q1,q2,q3,q4]}   initial joints for reset
//   server -> client
//     {"type":"state","t":..,"joints":[4],"bucket":[x,y,z],"recording":bool}
//     {"type":"saved","path":".."}
//     {"type":"error","message":".."}
//
// In step mode each command advances the simulator by one dt and is
// answered with a state. In realtime mode the latest command is held and
// the session advances at 1/dt Hz, sending a state per advance.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "excavate/harness.h"

namespace excavate::teleop {

struct ServiceConfig {
  harness::TaskSpec spec;
  harness::DemoConfig demo;
  JointState initial;  // used by reset until a config message overrides it
  std::filesystem::path record_dir = "recordings";
  std::size_t max_line_bytes = 1 << 16;

  // Service for `task` with a reachable default start pose.
  static ServiceConfig Default(Task task);
};

enum class Mode { kStep, kRealtime };

// Protocol state machine for one connection. Not thread-safe; each
// connection owns one.
class Session {
 public:
  Session(const ServiceConfig& cfg, std::string id);

  // Processes one line and returns the reply lines (without newlines).
  std::vector<std::string> HandleLine(const std::string& line);

  // Realtime advance under the held command. Returns the state line, or
  // nothing in step mode.
  std::optional<std::string> Tick();

  // Flushes an open recording; returns its path if one was written.
  std::optional<std::filesystem::path> Finalize();

  Mode mode() const { return mode_; }
  bool recording() const { return recording_.has_value(); }
  const JointState& state() const { return sim_.state(); }

 private:
  std::string Advance(const ValveCommand& v);
  std::string StateLine() const;
  std::filesystem::path Save();

  const ServiceConfig& cfg_;
  std::string id_;
  harness::Scene scene_;
  JointState initial_;
  Simulator sim_;
  Mode mode_ = Mode::kStep;
  ValveCommand held_;
  std::optional<Episode> recording_;
  int saved_count_ = 0;
};

std::string ErrorLine(const std::string& message);

// TCP listener with a thread per connection.
class Server {
 public:
  explicit Server(ServiceConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and starts accepting; port 0 picks a free port. Throws
  // std::runtime_error on socket errors.
  void Start(const std::string& host, std::uint16_t port);
  std::uint16_t port() const { return port_; }
  // Closes the listener and every connection, finalizing recordings.
  void Stop();
  // Paths of every episode saved so far.
  std::vector<std::filesystem::path> saved() const;

 private:
  void AcceptLoop();
  void Serve(int fd, std::string id);

  ServiceConfig cfg_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  mutable std::mutex mu_;
  std::vector<std::thread> workers_;
  std::vector<int> client_fds_;
  std::vector<std::filesystem::path> saved_;
  std::atomic<int> next_id_{0};
};

// "host:port" -> (host, port); throws std::invalid_argument.
std::pair<std::string, std::uint16_t> ParseBind(const std::string& bind);

}  // namespace excavate::teleop

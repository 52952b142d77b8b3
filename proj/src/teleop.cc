#include "excavate/teleop.h"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "json.hpp"

namespace excavate::teleop {
namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

Float4 ToFloat4(const Joint4& a) {
  return {static_cast<float>(a[0]), static_cast<float>(a[1]), static_cast<float>(a[2]),
          static_cast<float>(a[3])};
}

bool SendAll(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

std::array<double, 4> FourNumbers(const json& msg, const char* field) {
  const auto it = msg.find(field);
  if (it == msg.end() || !it->is_array() || it->size() != 4) {
    throw std::invalid_argument(std::string("'") + field + "' must be an array of 4 numbers");
  }
  std::array<double, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& v = (*it)[i];
    if (!v.is_number()) throw std::invalid_argument(std::string("'") + field + "' must hold numbers");
    out[i] = v.get<double>();
    if (!std::isfinite(out[i])) throw std::invalid_argument(std::string("'") + field + "' must be finite");
  }
  return out;
}

}  // namespace

ServiceConfig ServiceConfig::Default(Task task) {
  ServiceConfig c;
  c.spec = harness::TaskSpec::Default(task);
  if (task == Task::kReach) {
    std::mt19937_64 rng(0);
    c.initial = harness::SampleReachStart(c.spec, c.demo, rng);
  } else {
    const auto scene = harness::MakeScene(c.spec, c.demo.geometry, 0);
    c.initial = harness::PlanDig(scene, c.demo.sim, false).setpoints.front();
  }
  return c;
}

std::string ErrorLine(const std::string& message) {
  return json{{"type", "error"}, {"message", message}}.dump();
}

Session::Session(const ServiceConfig& cfg, std::string id)
    : cfg_(cfg),
      id_(std::move(id)),
      scene_(harness::MakeScene(cfg.spec, cfg.demo.geometry, 0)),
      initial_(cfg.initial),
      sim_(cfg.demo.model, cfg.demo.sim, cfg.initial) {}

std::string Session::StateLine() const {
  const JointState& q = sim_.state();
  const Vec3 tip = ForwardKinematics(q, cfg_.demo.geometry);
  return json{{"type", "state"},
              {"t", q.time},
              {"joints", q.q},
              {"bucket", {tip.x, tip.y, tip.z}},
              {"recording", recording_.has_value()}}
      .dump();
}

std::string Session::Advance(const ValveCommand& v) {
  const JointState q = sim_.state();
  if (recording_) {
    const auto obs = harness::MakeObservation(scene_, q);
    struct Step s;
    // Episode time restarts at zero when a recording starts.
    s.time = static_cast<float>(static_cast<double>(recording_->steps.size()) * recording_->dt);
    s.joints = obs.joints;
    s.camera = obs.camera;
    s.elev_dig = obs.elev_dig;
    s.elev_dump = obs.elev_dump;
    sim_.StepValves(v);
    // Joint-position tasks record where the valves took the arm.
    s.action = ToFloat4(recording_->action_space == ActionSpace::kValve ? v.valves : sim_.state().q);
    recording_->steps.push_back(std::move(s));
  } else {
    sim_.StepValves(v);
  }
  return StateLine();
}

std::vector<std::string> Session::HandleLine(const std::string& line) {
  json msg;
  try {
    msg = json::parse(line);
  } catch (const json::exception&) {
    return {ErrorLine("malformed message: not JSON")};
  }
  if (!msg.is_object()) return {ErrorLine("malformed message: expected an object")};
  const auto type_it = msg.find("type");
  if (type_it == msg.end() || !type_it->is_string()) {
    return {ErrorLine("malformed message: missing string 'type'")};
  }
  const std::string type = type_it->get<std::string>();
  try {
    if (type == "reset") {
      if (recording_) return {ErrorLine("stop the recording before reset")};
      sim_.Reset(initial_);
      held_ = ValveCommand::Neutral();
      return {StateLine()};
    }
    if (type == "command") {
      ValveCommand v;
      v.valves = FourNumbers(msg, "valves");
      for (double x : v.valves) {
        if (x < kValveMin || x > kValveMax) return {ErrorLine("valve command outside [0, 16380]")};
      }
      if (mode_ == Mode::kRealtime) {
        held_ = v;
        return {};
      }
      return {Advance(v)};
    }
    if (type == "set_mode") {
      const auto it = msg.find("mode");
      if (it == msg.end() || !it->is_string()) return {ErrorLine("set_mode needs 'mode'")};
      const std::string m = it->get<std::string>();
      if (m == "step") {
        mode_ = Mode::kStep;
      } else if (m == "realtime") {
        mode_ = Mode::kRealtime;
      } else {
        return {ErrorLine("unknown mode '" + m + "'")};
      }
      return {StateLine()};
    }
    if (type == "start_record") {
      if (recording_) return {ErrorLine("already recording")};
      const auto it = msg.find("task");
      if (it == msg.end() || !it->is_string()) return {ErrorLine("start_record needs 'task'")};
      const Task task = TaskFromName(it->get<std::string>());
      if (task != cfg_.spec.task) {
        return {ErrorLine(std::string("this service records ") + TaskName(cfg_.spec.task))};
      }
      Episode ep;
      ep.task = task;
      ep.action_space = cfg_.spec.action_space;
      ep.dt = cfg_.demo.sim.dt;
      recording_ = std::move(ep);
      return {StateLine()};
    }
    if (type == "stop_record") {
      if (!recording_) return {ErrorLine("not recording")};
      if (recording_->size() < 2) {
        recording_.reset();
        return {ErrorLine("recording discarded: fewer than 2 steps")};
      }
      const auto path = Save();
      return {json{{"type", "saved"}, {"path", path.string()}}.dump()};
    }
    if (type == "config") {
      JointState q;
      q.q = FourNumbers(msg, "joints");
      ValidateJointState(q);
      initial_ = ApplyLimits(q, cfg_.demo.sim);
      return {StateLine()};
    }
  } catch (const std::exception& e) {
    return {ErrorLine(e.what())};
  }
  return {ErrorLine("unknown message type '" + type + "'")};
}

std::optional<std::string> Session::Tick() {
  if (mode_ != Mode::kRealtime) return std::nullopt;
  return Advance(held_);
}

std::filesystem::path Session::Save() {
  std::filesystem::create_directories(cfg_.record_dir);
  const auto path = cfg_.record_dir / (std::string(TaskName(recording_->task)) + "_" + id_ + "_" +
                                       std::to_string(saved_count_++));
  const Episode ep = std::move(*recording_);
  recording_.reset();
  dataset::WriteEpisode(ep, path);
  return path;
}

std::optional<std::filesystem::path> Session::Finalize() {
  if (!recording_) return std::nullopt;
  if (recording_->size() < 2) {
    recording_.reset();
    return std::nullopt;
  }
  return Save();
}

// ---------------------------------------------------------------------------
// Server

Server::Server(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

Server::~Server() { Stop(); }

void Server::Start(const std::string& host, std::uint16_t port) {
  if (running_) throw std::runtime_error("server already running");
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) {
    throw std::runtime_error("cannot resolve bind address " + host);
  }
  listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (listen_fd_ < 0) {
    ::freeaddrinfo(res);
    throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  }
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  const int rc = ::bind(listen_fd_, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 || ::listen(listen_fd_, 16) != 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  std::filesystem::create_directories(cfg_.record_dir);
  running_ = true;
  acceptor_ = std::thread([this] { AcceptLoop(); });
}

void Server::AcceptLoop() {
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    std::lock_guard<std::mutex> lock(mu_);
    if (!running_) {
      ::close(fd);
      break;
    }
    client_fds_.push_back(fd);
    // Session ids name recordings; the pid keeps restarts from reusing them.
    workers_.emplace_back([this, fd, id = std::to_string(::getpid()) + "-" + std::to_string(next_id_++)] {
      Serve(fd, id);
    });
  }
}

void Server::Serve(int fd, std::string id) {
  Session session(cfg_, std::move(id));
  std::string buffer;
  bool discarding = false;  // inside an overlong line
  const auto period = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(cfg_.demo.sim.dt));
  Clock::time_point next_tick = Clock::now() + period;
  bool open = true;
  char chunk[4096];

  while (open && running_) {
    int timeout_ms = 100;
    if (session.mode() == Mode::kRealtime) {
      const auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(next_tick - Clock::now());
      timeout_ms = static_cast<int>(std::clamp<long long>(wait.count(), 0, 100));
    }
    pollfd p{fd, POLLIN, 0};
    const int ready = ::poll(&p, 1, timeout_ms);
    if (ready > 0) {
      const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
      if (n <= 0) {
        if (n < 0 && errno == EINTR) continue;
        break;
      }
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t start = 0;
      for (std::size_t nl; (nl = buffer.find('\n', start)) != std::string::npos; start = nl + 1) {
        if (discarding) {
          discarding = false;
          continue;
        }
        std::string line = buffer.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const bool was_realtime = session.mode() == Mode::kRealtime;
        for (const auto& reply : session.HandleLine(line)) open = open && SendAll(fd, reply + "\n");
        if (!was_realtime && session.mode() == Mode::kRealtime) next_tick = Clock::now() + period;
      }
      buffer.erase(0, start);
      if (buffer.size() > cfg_.max_line_bytes) {
        if (!discarding) open = SendAll(fd, ErrorLine("message too long") + "\n");
        discarding = true;
        buffer.clear();
      }
    }
    if (session.mode() == Mode::kRealtime && Clock::now() >= next_tick) {
      if (auto line = session.Tick()) open = open && SendAll(fd, *line + "\n");
      next_tick += period;
      // Do not try to catch up after a stall.
      if (next_tick < Clock::now()) next_tick = Clock::now() + period;
    }
  }

  std::optional<std::filesystem::path> saved;
  try {
    saved = session.Finalize();
  } catch (const std::exception&) {
  }
  std::lock_guard<std::mutex> lock(mu_);
  if (saved) saved_.push_back(*saved);
  std::erase(client_fds_, fd);
  ::close(fd);
}

void Server::Stop() {
  if (!running_.exchange(false)) return;
  if (acceptor_.joinable()) acceptor_.join();
  ::close(listen_fd_);
  listen_fd_ = -1;
  std::vector<std::thread> workers;
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
    workers.swap(workers_);
  }
  for (auto& w : workers) w.join();
}

std::vector<std::filesystem::path> Server::saved() const {
  std::lock_guard<std::mutex> lock(mu_);
  return saved_;
}

std::pair<std::string, std::uint16_t> ParseBind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == bind.size()) {
    throw std::invalid_argument("bind address must be host:port, got '" + bind + "'");
  }
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(bind.substr(colon + 1), &used);
    if (used != bind.size() - colon - 1) throw std::invalid_argument("port");
  } catch (const std::exception&) {
    throw std::invalid_argument("bad port in '" + bind + "'");
  }
  if (port < 0 || port > 65535) throw std::invalid_argument("port out of range in '" + bind + "'");
  return {bind.substr(0, colon), static_cast<std::uint16_t>(port)};
}

}  // namespace excavate::teleop

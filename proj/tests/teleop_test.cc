#include "excavate/teleop.h"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace excavate::teleop {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

fs::path FreshDir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("excavate_teleop_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

ServiceConfig Config(const fs::path& dir, Task task = Task::kReach) {
  auto cfg = ServiceConfig::Default(task);
  cfg.record_dir = dir;
  return cfg;
}

// Blocking line client.
class Client {
 public:
  explicit Client(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw std::runtime_error("connect failed");
    }
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~Client() { Close(); }
  void Close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  void SendRaw(const std::string& bytes) {
    ASSERT_EQ(::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL), static_cast<ssize_t>(bytes.size()));
  }
  void Send(const json& msg) { SendRaw(msg.dump() + "\n"); }

  // Next line, or empty on timeout/close.
  std::string ReadLine(int timeout_ms = 2000) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    while (true) {
      if (const auto nl = buf_.find('\n'); nl != std::string::npos) {
        std::string line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return "";
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) return "";
      char chunk[4096];
      const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
      if (n <= 0) return "";
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }
  json Read(int timeout_ms = 2000) {
    const auto line = ReadLine(timeout_ms);
    return line.empty() ? json() : json::parse(line);
  }
  json Call(const json& msg) {
    Send(msg);
    return Read();
  }

 private:
  int fd_ = -1;
  std::string buf_;
};

json Command(double a, double b, double c, double d) {
  return {{"type", "command"}, {"valves", {a, b, c, d}}};
}

TEST(Session, ResetAndStep) {
  const auto cfg = Config(FreshDir("session"));
  Session s(cfg, "x");
  const auto r = json::parse(s.HandleLine(R"({"type":"reset"})").at(0));
  EXPECT_EQ(r["type"], "state");
  EXPECT_EQ(r["t"].get<double>(), 0.0);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(r["joints"][j].get<double>(), cfg.initial.q[j]);
  EXPECT_FALSE(r["recording"].get<bool>());

  const auto a = json::parse(s.HandleLine(Command(12000, 8190, 8190, 8190).dump()).at(0));
  EXPECT_NEAR(a["t"].get<double>(), 0.1, 1e-12);
  const double expected = cfg.initial.q[0] + 0.1 * (-2.8227e-6 * 12000 + 2.3118e-2);
  EXPECT_NEAR(a["joints"][0].get<double>(), expected, 1e-12);
  EXPECT_EQ(a["bucket"].size(), 3u);
}

TEST(Session, ErrorsKeepSessionAlive) {
  const auto cfg = Config(FreshDir("errors"));
  Session s(cfg, "x");
  const std::vector<std::string> bad{
      "{not json",
      "[1,2,3]",
      R"({"valves":[1,2,3,4]})",
      R"({"type":"warp"})",
      R"({"type":"command","valves":[1,2,3]})",
      R"({"type":"command","valves":[1,2,3,"x"]})",
      R"({"type":"command","valves":[-1,8190,8190,8190]})",
      R"({"type":"command","valves":[8190,8190,8190,16381]})",
      R"({"type":"set_mode","mode":"turbo"})",
      R"({"type":"start_record","task":"dig_dump"})",
      R"({"type":"start_record","task":"nonsense"})",
      R"({"type":"stop_record"})",
  };
  for (const auto& line : bad) {
    const auto replies = s.HandleLine(line);
    ASSERT_EQ(replies.size(), 1u) << line;
    EXPECT_EQ(json::parse(replies[0])["type"], "error") << line;
  }
  EXPECT_EQ(s.state().time, 0.0);
  // Unknown fields are ignored.
  const auto ok = json::parse(s.HandleLine(R"({"type":"command","valves":[8190,8190,8190,8190],"extra":1})").at(0));
  EXPECT_EQ(ok["type"], "state");
}

TEST(Session, ConfigChangesResetPose) {
  const auto cfg = Config(FreshDir("config"));
  Session s(cfg, "x");
  s.HandleLine(R"({"type":"config","joints":[0.2,0.3,-1.2,-1.0]})");
  const auto r = json::parse(s.HandleLine(R"({"type":"reset"})").at(0));
  EXPECT_DOUBLE_EQ(r["joints"][0].get<double>(), 0.2);
  EXPECT_DOUBLE_EQ(r["joints"][2].get<double>(), -1.2);
}

TEST(Session, RealtimeHoldsCommandAndTicks) {
  const auto cfg = Config(FreshDir("tick"));
  Session s(cfg, "x");
  EXPECT_FALSE(s.Tick().has_value());
  s.HandleLine(R"({"type":"set_mode","mode":"realtime"})");
  EXPECT_TRUE(s.HandleLine(Command(8190, 4000, 8190, 8190).dump()).empty());
  const double boom0 = s.state().q[1];
  for (int i = 0; i < 3; ++i) ASSERT_TRUE(s.Tick().has_value());
  EXPECT_NEAR(s.state().time, 0.3, 1e-12);
  EXPECT_NEAR(s.state().q[1] - boom0, 0.3 * (1.3736e-6 * 4000 - 1.1250e-2), 1e-12);
}

TEST(Session, JointPositionTaskRecordsReachedJoints) {
  const auto dir = FreshDir("jp");
  const auto cfg = Config(dir, Task::kDigDumpReturn);
  Session s(cfg, "x");
  s.HandleLine(R"({"type":"start_record","task":"dig_dump_return"})");
  s.HandleLine(Command(9000, 7000, 8190, 8190).dump());
  s.HandleLine(Command(9000, 7000, 8190, 8190).dump());
  const auto saved = json::parse(s.HandleLine(R"({"type":"stop_record"})").at(0));
  ASSERT_EQ(saved["type"], "saved");
  const auto ep = dataset::ReadEpisode(saved["path"].get<std::string>());
  EXPECT_EQ(ep.action_space, ActionSpace::kJointPosition);
  ASSERT_TRUE(ep.steps[0].elev_dig.has_value());
  EXPECT_EQ(ep.steps[0].action, ep.steps[1].joints);
  fs::remove_all(dir);
}

TEST(Server, RecordsFiftyStepsRoundTrip) {
  const auto dir = FreshDir("record");
  Server server(Config(dir));
  server.Start("127.0.0.1", 0);
  Client c(server.port());
  ASSERT_EQ(c.Call({{"type", "reset"}})["type"], "state");
  ASSERT_TRUE(c.Call({{"type", "start_record"}, {"task", "reach"}})["recording"].get<bool>());

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 16380.0);
  std::vector<std::array<double, 4>> sent;
  std::vector<json> states{c.Call({{"type", "set_mode"}, {"mode", "step"}})};
  for (int i = 0; i < 50; ++i) {
    std::array<double, 4> v{std::round(u(rng)), std::round(u(rng)), 8190.0, std::round(u(rng))};
    sent.push_back(v);
    states.push_back(c.Call(Command(v[0], v[1], v[2], v[3])));
    ASSERT_EQ(states.back()["type"], "state");
  }
  const auto saved = c.Call({{"type", "stop_record"}});
  ASSERT_EQ(saved["type"], "saved");
  const fs::path path = saved["path"].get<std::string>();

  const auto ep = dataset::ReadEpisode(path);
  ASSERT_EQ(ep.size(), 50u);
  EXPECT_EQ(ep.task, Task::kReach);
  for (std::size_t t = 0; t < 50; ++t) {
    for (int j = 0; j < 4; ++j) {
      EXPECT_EQ(ep.steps[t].action[j], static_cast<float>(sent[t][j]));
      EXPECT_EQ(ep.steps[t].joints[j], static_cast<float>(states[t]["joints"][j].get<double>()));
    }
    EXPECT_FLOAT_EQ(ep.steps[t].time, 0.1f * t);
  }
  // Writing what was read gives the same bytes.
  dataset::WriteEpisode(ep, dir / "copy");
  for (const char* f : {"manifest.txt", "joints.f32", "actions.f32", "camera.f32"}) {
    std::ifstream a(path / f, std::ios::binary), b(dir / "copy" / f, std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str()) << f;
  }
  server.Stop();
  fs::remove_all(dir);
}

TEST(Server, DisconnectFinalizesRecording) {
  const auto dir = FreshDir("disconnect");
  Server server(Config(dir));
  server.Start("127.0.0.1", 0);
  {
    Client c(server.port());
    c.Call({{"type", "start_record"}, {"task", "reach"}});
    for (int i = 0; i < 5; ++i) c.Call(Command(8190, 9000, 8190, 8190));
  }
  for (int i = 0; i < 100 && server.saved().empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  const auto saved = server.saved();
  ASSERT_EQ(saved.size(), 1u);
  EXPECT_EQ(dataset::ReadEpisode(saved[0]).size(), 5u);
  server.Stop();
  fs::remove_all(dir);
}

TEST(Server, ConcurrentSessionsAreIndependent) {
  const auto dir = FreshDir("concurrent");
  Server server(Config(dir));
  server.Start("127.0.0.1", 0);
  Client a(server.port());
  Client b(server.port());
  const auto b0 = b.Call({{"type", "reset"}});
  for (int i = 0; i < 20; ++i) a.Call(Command(16380, 0, 16380, 0));
  const auto b1 = b.Call({{"type", "set_mode"}, {"mode", "step"}});
  EXPECT_EQ(b1["joints"], b0["joints"]);
  EXPECT_EQ(b1["t"].get<double>(), 0.0);
  const auto a1 = a.Call({{"type", "set_mode"}, {"mode", "step"}});
  EXPECT_NEAR(a1["t"].get<double>(), 2.0, 1e-9);
  server.Stop();
  fs::remove_all(dir);
}

TEST(Server, SurvivesGarbage) {
  const auto dir = FreshDir("garbage");
  auto cfg = Config(dir);
  cfg.max_line_bytes = 1024;
  Server server(cfg);
  server.Start("127.0.0.1", 0);
  Client c(server.port());
  std::mt19937_64 rng(5);
  std::string junk;
  for (int i = 0; i < 2000; ++i) {
    char ch = static_cast<char>(rng() & 0xff);
    junk.push_back(ch == '\n' ? 'x' : ch);
    if (i % 200 == 199) junk.push_back('\n');
  }
  c.SendRaw(junk);
  int errors = 0;
  for (int i = 0; i < 10; ++i) errors += c.Read()["type"] == "error";
  EXPECT_EQ(errors, 10);
  c.SendRaw(std::string(5000, 'a'));  // overlong, no newline yet
  EXPECT_EQ(c.Read()["type"], "error");
  c.SendRaw("bbb\n");  // tail of the overlong line is dropped
  EXPECT_EQ(c.Call({{"type", "reset"}})["type"], "state");
  server.Stop();
  fs::remove_all(dir);
}

TEST(Server, RealtimeModeRunsAtTenHertz) {
  const auto dir = FreshDir("realtime");
  Server server(Config(dir));
  server.Start("127.0.0.1", 0);
  Client c(server.port());
  c.Call({{"type", "set_mode"}, {"mode", "realtime"}});
  c.Send(Command(8190, 8190, 8190, 12000));
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> times;
  while (times.size() < 10) {
    const auto s = c.Read(1000);
    ASSERT_EQ(s["type"], "state");
    times.push_back(s["t"].get<double>());
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GT(elapsed, 0.8);
  EXPECT_LT(elapsed, 2.0);
  for (std::size_t i = 1; i < times.size(); ++i) EXPECT_NEAR(times[i] - times[i - 1], 0.1, 1e-9);
  server.Stop();
  fs::remove_all(dir);
}

TEST(Server, CommandLatency) {
  const auto dir = FreshDir("latency");
  Server server(Config(dir));
  server.Start("127.0.0.1", 0);
  Client c(server.port());
  std::vector<double> ms;
  for (int i = 0; i < 100; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    ASSERT_EQ(c.Call(Command(8190, 8300, 8190, 8190))["type"], "state");
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(ms.begin(), ms.begin() + 50, ms.end());
  EXPECT_LT(ms[50], 50.0);
  server.Stop();
  fs::remove_all(dir);
}

TEST(ParseBind, Cases) {
  EXPECT_EQ(ParseBind("127.0.0.1:8472"), (std::pair<std::string, std::uint16_t>{"127.0.0.1", 8472}));
  EXPECT_THROW(ParseBind("127.0.0.1"), std::invalid_argument);
  EXPECT_THROW(ParseBind("host:99999"), std::invalid_argument);
  EXPECT_THROW(ParseBind("host:12a"), std::invalid_argument);
}

}  // namespace
}  // namespace excavate::teleop

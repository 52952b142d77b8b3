// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails.
//
//   acceptance [--cache DIR] [--retrain] [--only NAME]
//
// The end-to-end checks train full policies. Trained checkpoints land in
// the cache directory together with a key over every input that shapes
// them (demo seed, split seed, architecture, training config); a matching
// checkpoint is reused and only the evaluation is rerun.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "excavate/act_policy.h"
#include "excavate/dataset.h"
#include "excavate/harness.h"
#include "excavate/sim_core.h"
#include "excavate/sysid.h"
#include "excavate/temporal_ensemble.h"
#include "test_util.h"

namespace fs = std::filesystem;
using namespace excavate;

namespace {

using Clock = std::chrono::steady_clock;

struct Options {
  fs::path cache = "acceptance_cache";
  bool retrain = false;
  std::string only;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

std::string Fmt(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
std::string Fmt(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome NeutralPoint() {
  const auto t0 = Clock::now();
  const auto model = LinearValveModel::Reference();
  const auto qd = ValveToVelocity(model, ValveCommand::Neutral(), SimConfig{});
  const auto np = sysid::NeutralPoint(model);
  double worst_rate = 0.0;
  bool in_range = true;
  for (std::size_t j = 0; j < 4; ++j) {
    worst_rate = std::max(worst_rate, std::abs(qd.qd[j]));
    in_range = in_range && np[j] >= 8188.0 && np[j] <= 8192.0;
  }
  const double secs = Seconds(t0);
  return {worst_rate <= 5e-6 && in_range && secs < 1.0,
          Fmt("max |qdot(8190)| = %.3e rad/s (<= 5e-6); neutral %.2f %.2f %.2f %.2f in [8188, 8192]; %.3fs",
              worst_rate, np[0], np[1], np[2], np[3], secs)};
}

std::vector<sysid::ValveVelocityPair> SyntheticPairs(double sigma, std::uint64_t seed) {
  const auto model = LinearValveModel::Reference();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(kValveMin, kValveMax);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<sysid::ValveVelocityPair> out;
  for (Joint j : kAllJoints) {
    for (int i = 0; i < 2661; ++i) {
      const double v = u(rng);
      const double e = sigma > 0.0 ? sigma * noise(rng) : 0.0;
      out.push_back({j, v, model[j].gain * v + model[j].intercept + e});
    }
  }
  return out;
}

Outcome Sysid() {
  const auto t0 = Clock::now();
  const auto ref = LinearValveModel::Reference();
  auto worst = [&](const sysid::FitResult& fit) {
    double w = 0.0;
    for (Joint j : kAllJoints) {
      w = std::max(w, std::abs(fit.model[j].gain - ref[j].gain) / std::abs(ref[j].gain));
      w = std::max(w, std::abs(fit.model[j].intercept - ref[j].intercept) / std::abs(ref[j].intercept));
    }
    return w;
  };
  const double clean = worst(sysid::FitLinearModel(SyntheticPairs(0.0, 1)));
  const double noisy = worst(sysid::FitLinearModel(SyntheticPairs(1e-4, 42)));
  const double secs = Seconds(t0);
  return {clean < 1e-9 && noisy < 0.01 && secs < 5.0,
          Fmt("noiseless max rel err %.2e (< 1e-9); sigma 1e-4 max rel err %.2e (< 0.01); %.2fs", clean,
              noisy, secs)};
}

Outcome Gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int coords = 0;
  for (std::uint64_t seed : {11, 12, 13}) {
    const auto r = testing::GradCheck(testing::TinyArch(), seed, 50);
    worst = std::max(worst, r.max_rel_error);
    coords += r.coordinates;
  }
  const double secs = Seconds(t0);
  return {worst < 1e-3 && coords >= 150 && secs < 120.0,
          Fmt("max rel err %.2e over 3 draws x 50 coordinates (< 1e-3); %.1fs", worst, secs)};
}

double Kl(double mu, double logvar) {
  ad::Tape<double> tape;
  ad::Matrix<double> m(1, 1), l(1, 1);
  m(0, 0) = mu;
  l(0, 0) = logvar;
  return tape.value(tape.KlDivergence(tape.Constant(m), tape.Constant(l)))(0, 0);
}

Outcome KlClosedForm() {
  const double a = Kl(1.0, 0.0);
  const double b = Kl(0.0, 0.0);
  return {std::abs(a - 0.5) <= 1e-12 && b == 0.0, Fmt("KL(1, 0) = %.17g (0.5 +- 1e-12); KL(0, 0) = %g", a, b)};
}

Outcome TemporalEnsemble() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  auto rows = [](int k, double base) {
    std::vector<Action4> r(k);
    for (int j = 0; j < k; ++j) r[j] = {base + j, base - 2 * j, base * 0.5, 3.0 * j};
    return r;
  };
  {
    ChunkBuffer buf(5, 0.01);
    const auto c = rows(5, 2.0);
    buf.Push(0, c);
    for (int t = 0; t < 5; ++t) {
      const auto e = buf.Ensembled(t);
      for (int d = 0; d < 4; ++d) worst = std::max(worst, std::abs(e[d] - c[t][d]));
    }
  }
  {
    ChunkBuffer buf(4, 0.0);
    const auto a = rows(4, 1.0), b = rows(4, 9.0);
    buf.Push(0, a);
    buf.Push(1, b);
    const auto e = buf.Ensembled(2);
    for (int d = 0; d < 4; ++d) worst = std::max(worst, std::abs(e[d] - 0.5 * (a[2][d] + b[1][d])));
  }
  {
    ChunkBuffer buf(4, 0.01);
    const auto a = rows(4, 1.0), b = rows(4, 9.0);
    buf.Push(0, a);
    buf.Push(1, b);
    const auto e = buf.Ensembled(1);
    const double w = std::exp(-0.01);
    for (int d = 0; d < 4; ++d) worst = std::max(worst, std::abs(e[d] - (a[1][d] + w * b[0][d]) / (1.0 + w)));
  }
  std::mt19937_64 rng(20240601);
  std::normal_distribution<double> n(0.0, 1.0);
  ChunkBuffer buf(30, 0.01);
  double s1 = 0, s2 = 0, r1 = 0, r2 = 0;
  const int steps = 10000;
  for (long t = 0; t < steps; ++t) {
    std::vector<Action4> c(30);
    for (auto& r : c) {
      for (double& v : r) v = n(rng);
    }
    const double raw = c[0][0];
    buf.Push(t, std::move(c));
    const double e = buf.Ensembled(t)[0];
    s1 += e, s2 += e * e, r1 += raw, r2 += raw * raw;
  }
  const double ratio = (s2 / steps - s1 * s1 / steps / steps) / (r2 / steps - r1 * r1 / steps / steps);
  const double secs = Seconds(t0);
  return {worst <= 1e-12 && ratio <= 0.2 && secs < 10.0,
          Fmt("hand-value max err %.1e (<= 1e-12); variance ratio %.4f (<= 0.2); %.2fs", worst, ratio, secs)};
}

Outcome DatasetRoundTrip() {
  const auto dir = fs::temp_directory_path() / ("excavate_acceptance_ds_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto ep = testing::RandomEpisode(Task::kDigDump, 40, 12, 16, 3, true);
  ep.steps[1].action[0] = -0.0f;
  ep.steps[2].joints[3] = 1e-42f;
  dataset::WriteEpisode(ep, dir / "ep");
  const auto back = dataset::ReadEpisode(dir / "ep");
  fs::remove_all(dir);
  bool exact = back.size() == ep.size() && back.task == ep.task && back.dt == ep.dt;
  auto same = [](const void* a, const void* b, std::size_t n) { return std::memcmp(a, b, n) == 0; };
  for (std::size_t t = 0; exact && t < ep.size(); ++t) {
    const auto &x = ep.steps[t], &y = back.steps[t];
    exact = same(&x.time, &y.time, 4) && same(x.joints.data(), y.joints.data(), 16) &&
            same(x.action.data(), y.action.data(), 16) && x.camera.data.size() == y.camera.data.size() &&
            same(x.camera.data.data(), y.camera.data.data(), 4 * x.camera.data.size()) &&
            y.elev_dig && same(x.elev_dig->data.data(), y.elev_dig->data.data(), 4 * x.elev_dig->data.size()) &&
            y.elev_dump && same(x.elev_dump->data.data(), y.elev_dump->data.data(), 4 * x.elev_dump->data.size());
  }

  std::vector<Episode> train;
  for (int i = 0; i < 5; ++i) train.push_back(testing::RandomEpisode(Task::kReach, 3 + 11 * i, 2, 2, 40 + i));
  std::mt19937_64 rng(9);
  int checked = 0, violations = 0;
  const int k = 30;
  while (checked < 10000) {
    const auto b = dataset::SampleBatch(train, k, 64, rng);
    for (std::size_t i = 0; i < b.size() && checked < 10000; ++i, ++checked) {
      const auto [e, t] = b.origins[i];
      const int expected = static_cast<int>(std::min<std::size_t>(k, train[e].size() - t));
      for (int j = 0; j < k; ++j) {
        if (b.valid(i, j) != (j < expected ? 1 : 0)) {
          ++violations;
          break;
        }
      }
    }
  }
  return {exact && violations == 0,
          Fmt("episode round trip %s; %d/%d masks violate the contiguous prefix", exact ? "bit-exact" : "DIFFERS",
              violations, checked)};
}

harness::PolicyHandle ReplayPolicy(const Episode& ep) {
  harness::PolicyHandle h;
  h.action_space = ep.action_space;
  h.chunk_size = 30;
  h.predict = [&ep](const dataset::Observation&, std::size_t t) {
    policy::ActionChunk c;
    for (std::size_t j = t; j < std::min(ep.size(), t + 30); ++j) {
      c.push_back({ep.steps[j].action[0], ep.steps[j].action[1], ep.steps[j].action[2], ep.steps[j].action[3]});
    }
    return c;
  };
  return h;
}

Outcome IntegratorReplay() {
  double worst = 0.0;
  bool pure = true;
  for (Task task : {Task::kReach, Task::kDigDump, Task::kDigDumpReturn}) {
    const auto spec = harness::TaskSpec::Default(task);
    const harness::DemoConfig cfg;
    const auto ep = harness::GenerateDemos(spec, 1, 21)[0];
    const auto ev = harness::EvaluateClosedLoop(ReplayPolicy(ep), ep, spec, cfg);
    pure = pure && ev.state_pure;
    // Independent re-integration of the same actions.
    Simulator sim(cfg.model, cfg.sim, ev.trajectory.front());
    double sq = 0.0;
    for (std::size_t t = 0; t < ep.size(); ++t) {
      Joint4 a{ep.steps[t].action[0], ep.steps[t].action[1], ep.steps[t].action[2], ep.steps[t].action[3]};
      if (ep.action_space == ActionSpace::kValve) {
        ValveCommand v;
        v.valves = a;
        sim.StepValves(ClampValves(v));
      } else {
        JointState target;
        target.q = a;
        sim.StepJointTarget(target);
      }
      for (std::size_t j = 0; j < 4; ++j) sq += std::pow(sim.state().q[j] - ev.trajectory[t + 1].q[j], 2);
    }
    worst = std::max(worst, std::sqrt(sq / (4.0 * ep.size())));
  }
  return {worst < 1e-9 && pure, Fmt("max replay RMSE %.2e rad over 3 tasks (< 1e-9); state purity %s", worst,
                                    pure ? "held" : "BROKEN")};
}

// ---------------------------------------------------------------------------
// End to end

struct Trained {
  policy::Policy<float> policy;
  double train_seconds = 0.0;
  int steps = 0;
  bool stopped_early = false;
  bool cached = false;
};

Trained TrainOrLoad(const Options& opts, const std::string& name, const dataset::Split& split,
                    const policy::ArchConfig& arch, const policy::TrainConfig& tcfg,
                    const std::string& data_key, std::uint64_t split_seed) {
  const auto& train = split.train;
  std::ostringstream key;
  key << data_key << "|" << arch.ToConfig().ToString() << "|" << tcfg.ToConfig().ToString();
  const std::string key_hash = std::to_string(std::hash<std::string>{}(key.str()));
  const fs::path dir = opts.cache / name;
  if (!opts.retrain && fs::exists(dir / "manifest.txt")) {
    try {
      auto ck = policy::LoadCheckpoint(dir);
      if (ck.meta.GetString("key", "") == key_hash) {
        return {std::move(ck.policy), ck.meta.GetDouble("train_seconds"), ck.step,
                ck.meta.GetInt("stopped_early") != 0, true};
      }
    } catch (const std::exception&) {
    }
  }
  std::printf("[%s] training %zu parameters on %zu episodes (up to %d steps)\n", name.c_str(),
              policy::ParamLayout(arch).total(), train.size(), tcfg.steps);
  std::fflush(stdout);
  const auto t0 = Clock::now();
  const int every = 2000;
  auto r = policy::Train(train, arch, tcfg, [&](const policy::LossRecord& rec) {
    if (rec.step % every == 0) {
      std::printf("[%s] step %5d loss %.4f (l1 %.4f kl %.4f) %.0fs\n", name.c_str(), rec.step, rec.loss,
                  rec.recon, rec.kl, Seconds(t0));
      std::fflush(stdout);
    }
  });
  Trained out{std::move(r.policy), Seconds(t0), static_cast<int>(r.curve.size()), r.stopped_early, false};
  KeyValueConfig meta;
  meta.Set("key", key_hash);
  // Same keys as `excavate train`, so `excavate eval` accepts cached checkpoints.
  meta.Set("task", TaskName(train.front().task));
  meta.Set("split_seed", std::to_string(split_seed));
  meta.Set("test_index", std::to_string(split.test_index));
  meta.Set("train_seconds", out.train_seconds);
  meta.Set("stopped_early", out.stopped_early ? "1" : "0");
  policy::SaveCheckpoint(out.policy, tcfg, out.steps, dir, meta);
  policy::WriteLossCurveCsv(r.curve, dir / "loss.csv");
  return out;
}

policy::TrainConfig AcceptanceTrainConfig() {
  policy::TrainConfig t;  // KL weight 10, 30000 steps, lr 1e-5, batch 8
  t.seed = 3;
  t.plateau_window = 1000;
  t.plateau_patience = 3;
  t.plateau_rel_tol = 0.01;
  return t;
}

constexpr std::uint64_t kDemoSeed = 1;
constexpr std::uint64_t kSplitSeed = 7;

Outcome EndToEndReach(const Options& opts) {
  const auto t0 = Clock::now();
  const auto spec = harness::TaskSpec::Default(Task::kReach);
  const harness::DemoConfig cfg;
  const auto eps = harness::GenerateDemos(spec, 8, kDemoSeed, cfg);
  double mean_len = 0.0;
  for (const auto& e : eps) mean_len += e.size();
  mean_len /= eps.size();
  const auto split = dataset::SplitTrainTest(eps, kSplitSeed);

  policy::ArchConfig arch;
  const auto tcfg = AcceptanceTrainConfig();
  const auto trained = TrainOrLoad(opts, "reach", split, arch, tcfg,
                                   Fmt("reach n8 demo%llu split%llu", (unsigned long long)kDemoSeed,
                                       (unsigned long long)kSplitSeed),
                                   kSplitSeed);
  const auto handle = harness::MakePolicyHandle(trained.policy, spec.action_space);
  const auto test = harness::EvaluateClosedLoop(handle, split.test, spec, cfg);
  harness::ExportTraces(test, split.test, cfg.geometry, opts.cache / "reach" / "traces.csv");

  std::mt19937_64 rng(999);
  int ok = 0;
  std::string dists;
  for (int i = 0; i < 8; ++i) {
    const auto start = harness::SampleReachStart(spec, cfg, rng);
    const auto ev = harness::EvaluateFromStart(handle, start, spec, cfg, 300);
    ok += ev.success;
    dists += Fmt("%s%.2f", i ? " " : "", ev.final_distance);
  }
  // Wall time of this run plus, for a reused checkpoint, its recorded training time.
  const double total = Seconds(t0) + (trained.cached ? trained.train_seconds : 0.0);
  const bool lengths_ok = mean_len >= 126.0 && mean_len <= 235.0;
  return {lengths_ok && ok >= 6 && test.action_mae < 400.0 && test.state_pure,
          Fmt("demo mean length %.1f in [126, 235]; %d/8 fresh starts within 0.3 m (>= 6) [final m: %s]; "
              "test valve MAE %.1f (< 400); %d steps%s; %.0fs (target 1800s)%s",
              mean_len, ok, dists.c_str(), test.action_mae, trained.steps,
              trained.stopped_early ? " (plateau)" : "", total, trained.cached ? ", cached checkpoint" : "")};
}

Outcome EndToEndDigDumpReturn(const Options& opts) {
  const auto t0 = Clock::now();
  const auto spec = harness::TaskSpec::Default(Task::kDigDumpReturn);
  const harness::DemoConfig cfg;
  const auto eps = harness::GenerateDemos(spec, 12, kDemoSeed, cfg);
  const auto split = dataset::SplitTrainTest(eps, kSplitSeed);
  policy::ArchConfig arch;
  arch.use_elevation = true;
  const auto tcfg = AcceptanceTrainConfig();
  const auto trained = TrainOrLoad(opts, "dig_dump_return", split, arch, tcfg,
                                   Fmt("dig_dump_return n12 demo%llu split%llu", (unsigned long long)kDemoSeed,
                                       (unsigned long long)kSplitSeed),
                                   kSplitSeed);
  const auto handle = harness::MakePolicyHandle(trained.policy, spec.action_space);
  const auto test = harness::EvaluateClosedLoop(handle, split.test, spec, cfg);
  harness::ExportTraces(test, split.test, cfg.geometry, opts.cache / "dig_dump_return" / "traces.csv");
  const double total = Seconds(t0) + (trained.cached ? trained.train_seconds : 0.0);
  return {test.joint_rmse < 0.05 && test.state_pure,
          Fmt("held-out joint RMSE %.4f rad (< 0.05) over %zu steps; %d steps%s; %.0fs (target 2700s)%s",
              test.joint_rmse, test.steps, trained.steps, trained.stopped_early ? " (plateau)" : "", total,
              trained.cached ? ", cached checkpoint" : "")};
}

}  // namespace

int main(int argc, char** argv) {
  Options opts;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cache" && i + 1 < argc) {
      opts.cache = argv[++i];
    } else if (a == "--retrain") {
      opts.retrain = true;
    } else if (a == "--only" && i + 1 < argc) {
      opts.only = argv[++i];
    } else {
      std::fprintf(stderr, "usage: %s [--cache DIR] [--retrain] [--only NAME]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(opts.cache);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"neutral_point", NeutralPoint},
      {"sysid_recovery", Sysid},
      {"gradient_check", Gradients},
      {"kl_closed_form", KlClosedForm},
      {"temporal_ensemble", TemporalEnsemble},
      {"dataset_round_trip", DatasetRoundTrip},
      {"integrator_replay", IntegratorReplay},
      {"e2e_reach", [&] { return EndToEndReach(opts); }},
      {"e2e_dig_dump_return", [&] { return EndToEndDigDumpReturn(opts); }},
  };
  int failures = 0;
  for (const auto& [name, run] : checks) {
    if (!opts.only.empty() && name != opts.only) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

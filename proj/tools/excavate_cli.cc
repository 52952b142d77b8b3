// excavate: demonstration generation, training, evaluation, system
// identification and the teleoperation service.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "excavate/act_policy.h"
#include "excavate/dataset.h"
#include "excavate/harness.h"
#include "excavate/sysid.h"
#include "excavate/teleop.h"

namespace fs = std::filesystem;
using namespace excavate;

namespace {

volatile std::sig_atomic_t g_stop = 0;
void OnSignal(int) { g_stop = 1; }

int DemoGen(const std::string& task_name, int n, std::uint64_t seed, const fs::path& out, bool csv) {
  const auto spec = harness::TaskSpec::Default(TaskFromName(task_name));
  const auto eps = harness::GenerateDemos(spec, n, seed);
  dataset::WriteDataset(eps, out);
  double mean = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    mean += eps[i].size();
    if (csv) dataset::ExportEpisodeCsv(eps[i], out / ("episode_" + std::to_string(i) + ".csv"));
  }
  std::printf("wrote %zu %s episodes to %s (mean length %.1f steps)\n", eps.size(), task_name.c_str(),
              out.c_str(), mean / eps.size());
  return 0;
}

int Train(const fs::path& data, const std::string& arch_path, const std::string& train_path,
          const fs::path& out, std::uint64_t split_seed) {
  auto eps = dataset::ReadDataset(data);
  if (eps.empty()) throw std::runtime_error("no episodes under " + data.string());
  const Task task = eps.front().task;
  policy::ArchConfig arch;
  arch.use_elevation = TaskInvolvesDigging(task);
  if (!arch_path.empty()) arch = policy::ArchConfig::FromConfig(KeyValueConfig::Load(arch_path));
  arch.image_height = eps.front().steps.front().camera.height;
  arch.image_width = eps.front().steps.front().camera.width;
  arch.Validate();
  policy::TrainConfig tcfg;
  if (!train_path.empty()) tcfg = policy::TrainConfig::FromConfig(KeyValueConfig::Load(train_path));

  const auto split = dataset::SplitTrainTest(eps, split_seed);
  std::printf("task %s: %zu train episodes, test episode %zu; %zu parameters\n", TaskName(task),
              split.train.size(), split.test_index, policy::ParamLayout(arch).total());
  const int every = std::max(1, tcfg.steps / 60);
  const auto result = policy::Train(split.train, arch, tcfg, [every](const policy::LossRecord& r) {
    if (r.step % every == 0) {
      std::printf("step %6d  loss %.5f  l1 %.5f  kl %.5f\n", r.step, r.loss, r.recon, r.kl);
      std::fflush(stdout);
    }
  });
  KeyValueConfig meta;
  meta.Set("task", TaskName(task));
  meta.Set("split_seed", std::to_string(split_seed));
  meta.Set("test_index", std::to_string(split.test_index));
  meta.Set("num_episodes", std::to_string(eps.size()));
  meta.Set("stopped_early", result.stopped_early ? "1" : "0");
  policy::SaveCheckpoint(result.policy, tcfg, static_cast<int>(result.curve.size()), out, meta);
  policy::WriteLossCurveCsv(result.curve, out / "loss.csv");
  std::printf("saved checkpoint to %s after %zu steps%s\n", out.c_str(), result.curve.size(),
              result.stopped_early ? " (plateau)" : "");
  return 0;
}

int Eval(const fs::path& ckpt_dir, const fs::path& data, const fs::path& report_dir, int starts,
         bool ensemble) {
  const auto ckpt = policy::LoadCheckpoint(ckpt_dir);
  const auto eps = dataset::ReadDataset(data);
  const Task task = TaskFromName(ckpt.meta.GetString("task"));
  const auto test_index = static_cast<std::size_t>(ckpt.meta.GetInt("test_index"));
  if (test_index >= eps.size()) throw std::runtime_error("test index outside the dataset");
  const Episode& test = eps[test_index];

  const auto spec = harness::TaskSpec::Default(task);
  const harness::DemoConfig cfg;
  harness::EvalOptions opts;
  opts.temporal_ensemble = ensemble;
  const auto handle = harness::MakePolicyHandle(ckpt.policy, spec.action_space);
  const auto held_out = harness::EvaluateClosedLoop(handle, test, spec, cfg, opts);

  fs::create_directories(report_dir);
  harness::ExportTraces(held_out, test, cfg.geometry, report_dir / "traces.csv");
  KeyValueConfig out;
  out.Set("task", TaskName(task));
  out.Set("test_index", std::to_string(test_index));
  out.Set("test.steps", std::to_string(held_out.steps));
  out.Set("test.action_mae", held_out.action_mae);
  out.Set("test.joint_rmse", held_out.joint_rmse);
  out.Set("test.state_pure", held_out.state_pure ? "1" : "0");
  std::printf("held-out episode %zu: action MAE %.3f, joint RMSE %.5f rad\n", test_index,
              held_out.action_mae, held_out.joint_rmse);
  if (task == Task::kReach) {
    out.Set("test.final_distance", held_out.final_distance);
    // Success rate covers the fresh starts only.
    harness::EvalReport report;
    std::mt19937_64 rng(ckpt.meta.GetInt("split_seed", 0) + 1000);
    for (int i = 0; i < starts; ++i) {
      report.episodes.push_back(
          harness::EvaluateFromStart(handle, harness::SampleReachStart(spec, cfg, rng), spec, cfg, 300, opts));
      const auto& e = report.episodes.back();
      out.Set("start" + std::to_string(i) + ".final_distance", e.final_distance);
      std::printf("start %d: final distance %.3f m %s\n", i, e.final_distance, e.success ? "ok" : "miss");
    }
    report.Aggregate();
    out.Set("mean_final_distance", report.mean_final_distance);
    out.Set("success_rate", report.success_rate);
    std::printf("success rate %.3f\n", report.success_rate);
  }
  out.Save(report_dir / "report.txt");
  return 0;
}

int Teleop(const std::string& bind, const std::string& task_name, const fs::path& record_dir) {
  auto cfg = teleop::ServiceConfig::Default(TaskFromName(task_name));
  cfg.record_dir = record_dir;
  const auto [host, port] = teleop::ParseBind(bind);
  teleop::Server server(cfg);
  server.Start(host, port);
  std::printf("teleop (%s) listening on %s:%u, recordings in %s\n", task_name.c_str(), host.c_str(),
              server.port(), record_dir.c_str());
  std::fflush(stdout);
  std::signal(SIGINT, OnSignal);
  std::signal(SIGTERM, OnSignal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.Stop();
  for (const auto& p : server.saved()) std::printf("saved %s\n", p.c_str());
  return 0;
}

int SysidFit(const fs::path& input, const fs::path& out, double dead_band) {
  const auto pairs = sysid::ReadPairsCsv(input);
  sysid::FitOptions opts;
  if (dead_band > 0.0) opts.exclude_dead_band = dead_band;
  const auto fit = sysid::FitLinearModel(pairs, opts);
  const auto neutral = sysid::NeutralPoint(fit.model);
  for (Joint j : kAllJoints) {
    const auto& r = fit.report[j];
    std::printf("%-7s gain %+.6e  intercept %+.6e  r2 %.6f  rmse %.3e  n %zu  neutral %.2f\n",
                JointName(j), r.gain, r.intercept, r.r_squared, r.rmse, r.n_samples,
                neutral[static_cast<std::size_t>(j)]);
  }
  fit.model.ToConfig().Save(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Excavator imitation learning toolkit"};
  app.require_subcommand(1);

  auto* demo = app.add_subcommand("demo-gen", "Generate scripted-expert demonstrations");
  std::string task = "reach";
  int n = 8;
  std::uint64_t seed = 1;
  std::string out;
  bool csv = false;
  demo->add_option("--task", task, "reach | dig_dump | dig_dump_return")->capture_default_str();
  demo->add_option("--n", n, "Number of episodes")->capture_default_str();
  demo->add_option("--seed", seed, "Seed")->capture_default_str();
  demo->add_option("--out", out, "Output dataset directory")->required();
  demo->add_flag("--csv", csv, "Also export per-episode CSV");

  auto* train = app.add_subcommand("train", "Train a policy on a dataset");
  std::string data, arch_path, train_path;
  std::uint64_t split_seed = 7;
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--arch", arch_path, "Architecture config file");
  train->add_option("--train", train_path, "Training config file");
  train->add_option("--out", out, "Checkpoint directory")->required();
  train->add_option("--split-seed", split_seed, "Seed of the held-out split")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Closed-loop evaluation of a checkpoint");
  std::string ckpt, report;
  int starts = 8;
  bool no_ensemble = false;
  eval->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--report", report, "Report directory")->required();
  eval->add_option("--starts", starts, "Fresh reach start states")->capture_default_str();
  eval->add_flag("--no-ensemble", no_ensemble, "Apply the first chunk row only");

  auto* tele = app.add_subcommand("teleop", "Run the teleoperation service");
  std::string bind = "127.0.0.1:8472";
  std::string record_dir = "recordings";
  tele->add_option("--bind", bind, "host:port")->capture_default_str();
  tele->add_option("--task", task, "Task to record")->capture_default_str();
  tele->add_option("--record-dir", record_dir, "Where recordings go")->capture_default_str();

  auto* sys = app.add_subcommand("sysid", "Valve model identification");
  sys->require_subcommand(1);
  auto* fit = sys->add_subcommand("fit", "Fit the linear valve model to (valve, velocity) pairs");
  std::string input;
  double dead_band = 0.0;
  fit->add_option("--input", input, "CSV with joint,valve,velocity rows")->required();
  fit->add_option("--out", out, "Model config to write")->required();
  fit->add_option("--dead-band", dead_band, "Drop pairs within this many units of neutral");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*demo) return DemoGen(task, n, seed, out, csv);
    if (*train) return Train(data, arch_path, train_path, out, split_seed);
    if (*eval) return Eval(ckpt, data, report, starts, !no_ensemble);
    if (*tele) return Teleop(bind, task, record_dir);
    if (*fit) return SysidFit(input, out, dead_band);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

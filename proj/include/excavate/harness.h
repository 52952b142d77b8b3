#pragma once

// Task definitions, scripted experts, demonstration generation and
// closed-loop evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "excavate/act_policy.h"
#include "excavate/dataset.h"
#include "excavate/elevation.h"
#include "excavate/sim_core.h"
#include "excavate/temporal_ensemble.h"

namespace excavate::harness {

struct Rect {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  double CenterX() const { return 0.5 * (x_min + x_max); }
  double CenterY() const { return 0.5 * (y_min + y_max); }
};

struct TaskSpec {
  Task task = Task::kReach;
  ActionSpace action_space = ActionSpace::kValve;
  Vec3 target{6.70, 1.01, 0.6};  // reach goal for the bucket tip, m
  // Site terrain in the machine frame and the two observation zones.
  elevation::TerrainSpec site;
  elevation::CropRegion dig_crop;
  elevation::CropRegion dump_crop;
  int target_length = 0;  // mean episode length to aim for, steps
  int image_height = 60;
  int image_width = 80;

  static TaskSpec Default(Task task);
  void Validate() const;
  Rect DigRect() const;
  Rect DumpRect() const;
};

struct Scene {
  TaskSpec spec;
  ExcavatorGeometry geometry;
  elevation::ElevationGrid terrain;  // only used by digging tasks
};

Scene MakeScene(const TaskSpec& spec, const ExcavatorGeometry& geom, std::uint64_t terrain_seed);

// Stand-in for the cab camera: a fixed pinhole view from behind the machine.
// Channel 0 draws the arm linkage, channel 1 the reach target, channel 2
// the ground (shaded by terrain height on digging tasks).
ObservationImage RenderCamera(const Scene& scene, const JointState& q);

// Elevation observations of the dig and dump zones.
ObservationImage RenderDigZone(const Scene& scene);
ObservationImage RenderDumpZone(const Scene& scene);

dataset::Observation MakeObservation(const Scene& scene, const JointState& q);

// Planar inverse kinematics: joints placing the bucket tip at radial
// distance r and height z with absolute bucket angle phi. Throws
// std::domain_error when out of reach or outside joint limits.
JointState SolveIk(double swing, double r, double z, double phi, const ExcavatorGeometry& geom,
                   const SimConfig& cfg);

class UnreachableTargetError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct ReachExpertConfig {
  double radial_gain = 0.35;      // 1/s
  double height_gain = 0.35;      // 1/s
  double swing_gain = 0.35;       // 1/s
  double align_tolerance = 0.12;  // m, horizontal error that ends phase 1
  double rate_fraction = 0.9;     // share of max joint rate the expert uses
};

// Phase 1 aligns swing and horizontal reach while holding height, phase 2
// closes the remaining error including height. Desired joint rates are
// mapped to valves through the inverse of the valve model.
ValveCommand ScriptedExpertReach(const JointState& q, const Vec3& target,
                                 const LinearValveModel& model, const ExcavatorGeometry& geom,
                                 const SimConfig& cfg, const ReachExpertConfig& ecfg = {});

// Joint-space plan for digging tasks, one setpoint per step starting at the
// initial pose. Segment durations follow the rate limits.
struct DigPlan {
  std::vector<JointState> setpoints;
  std::size_t dig_done = 0;   // index where the bucket leaves the soil
  std::size_t dump_done = 0;  // index where the load is released
};

DigPlan PlanDig(const Scene& scene, const SimConfig& cfg, bool with_return);

struct DemoConfig {
  LinearValveModel model = LinearValveModel::Reference();
  SimConfig sim;
  ExcavatorGeometry geometry;
  int max_retries = 20;
  int reach_max_steps = 400;
  int reach_hold_steps = 5;
  double reach_done_radius = 0.05;
  // Reach demos alternate which side of the target they start on, so a
  // small demo set covers both swing directions.
  bool balance_reach_sides = true;
};

// Random reach start state (deterministic per seed). swing_side +1/-1 puts
// the start on that side of the target azimuth; 0 picks at random.
JointState SampleReachStart(const TaskSpec& spec, const DemoConfig& cfg, std::mt19937_64& rng,
                            int swing_side = 0);

class ExpertFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One demonstration; throws ExpertFailure when the expert does not finish.
Episode RunExpertEpisode(const TaskSpec& spec, const DemoConfig& cfg, std::uint64_t seed,
                         int swing_side = 0);

// Episode i uses sub-seeds derived from (seed, i, attempt); failed attempts
// are retried at most cfg.max_retries times.
std::vector<Episode> GenerateDemos(const TaskSpec& spec, int n_episodes, std::uint64_t seed,
                                   const DemoConfig& cfg = {});

// Chunk predictor called once per control step.
using ChunkFn = std::function<policy::ActionChunk(const dataset::Observation& obs, std::size_t t)>;

struct PolicyHandle {
  ActionSpace action_space = ActionSpace::kValve;
  int chunk_size = 30;
  ChunkFn predict;
};

PolicyHandle MakePolicyHandle(const policy::Policy<float>& policy, ActionSpace space);

struct EvalOptions {
  bool temporal_ensemble = true;
  double decay = 0.01;
  double success_radius = 0.3;  // m, reach
};

struct EpisodeEval {
  std::size_t steps = 0;
  double final_distance = 0.0;  // bucket tip to target, reach only
  double action_mae = 0.0;      // mean |applied - ground truth| over aligned steps
  double joint_rmse = 0.0;      // simulated vs. recorded joints over aligned steps
  bool success = false;
  bool state_pure = true;       // joints never taken from ground truth after step 0
  std::vector<Action4> applied;       // per step
  std::vector<JointState> trajectory; // state before each step
};

struct EvalReport {
  std::vector<EpisodeEval> episodes;
  double mean_final_distance = 0.0;
  double mean_action_mae = 0.0;
  double mean_joint_rmse = 0.0;
  double success_rate = 0.0;
  void Aggregate();
};

// Replays the test episode's images while the joints evolve only through
// the simulator from the episode's first recorded joints.
EpisodeEval EvaluateClosedLoop(const PolicyHandle& policy, const Episode& test,
                               const TaskSpec& spec, const DemoConfig& cfg,
                               const EvalOptions& opts = {});

// Runs from an arbitrary start with observations rendered from the
// simulated state; no ground truth, so only distance and success are set.
EpisodeEval EvaluateFromStart(const PolicyHandle& policy, const JointState& start,
                              const TaskSpec& spec, const DemoConfig& cfg, int horizon,
                              const EvalOptions& opts = {});

// Columns: t, 4 ground-truth actions, 4 applied actions, 4 joints, bucket xyz.
void ExportTraces(const EpisodeEval& eval, const Episode& episode,
                  const ExcavatorGeometry& geom, const std::filesystem::path& path);

}  // namespace excavate::harness

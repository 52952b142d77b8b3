#pragma once

// Excavator joint dynamics: per-joint linear valve -> velocity maps, explicit
// Euler integration at the logging rate, rate-limited joint-position
// tracking and bucket-tip forward kinematics.

#include <array>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "excavate/kv_config.h"

namespace excavate {

inline constexpr std::size_t kNumJoints = 4;

enum class Joint : std::size_t { kSwing = 0, kBoom = 1, kStick = 2, kBucket = 3 };

inline constexpr std::array<Joint, kNumJoints> kAllJoints = {Joint::kSwing, Joint::kBoom,
                                                             Joint::kStick, Joint::kBucket};

const char* JointName(Joint j);
Joint JointFromName(const std::string& name);

inline constexpr double kValveMin = 0.0;
inline constexpr double kValveMax = 16380.0;
inline constexpr double kValveNeutral = 8190.0;
inline constexpr double kDefaultDt = 0.1;

using Joint4 = std::array<double, kNumJoints>;

// Raw valve units, one per joint.
struct ValveCommand {
  Joint4 valves{kValveNeutral, kValveNeutral, kValveNeutral, kValveNeutral};

  static ValveCommand Neutral() { return {}; }
  double& operator[](Joint j) { return valves[static_cast<std::size_t>(j)]; }
  double operator[](Joint j) const { return valves[static_cast<std::size_t>(j)]; }
  bool operator==(const ValveCommand&) const = default;
};

// Joint angles in radians plus the simulation clock in seconds.
struct JointState {
  Joint4 q{};
  double time = 0.0;

  double& operator[](Joint j) { return q[static_cast<std::size_t>(j)]; }
  double operator[](Joint j) const { return q[static_cast<std::size_t>(j)]; }
  bool operator==(const JointState&) const = default;
};

// Joint rates in rad/s.
struct JointVelocity {
  Joint4 qd{};

  double& operator[](Joint j) { return qd[static_cast<std::size_t>(j)]; }
  double operator[](Joint j) const { return qd[static_cast<std::size_t>(j)]; }
};

struct LinearJointModel {
  double gain = 0.0;       // rad/s per valve unit
  double intercept = 0.0;  // rad/s
};

struct LinearValveModel {
  std::array<LinearJointModel, kNumJoints> joints{};

  LinearJointModel& operator[](Joint j) { return joints[static_cast<std::size_t>(j)]; }
  const LinearJointModel& operator[](Joint j) const {
    return joints[static_cast<std::size_t>(j)];
  }

  // Coefficients fitted on the real machine's valve/velocity log.
  static LinearValveModel Reference();

  // Throws std::invalid_argument if a gain is zero or a neutral point falls
  // outside the valve range.
  void Validate() const;

  KeyValueConfig ToConfig() const;
  static LinearValveModel FromConfig(const KeyValueConfig& cfg);
};

struct JointLimits {
  double min = 0.0;
  double max = 0.0;
};

struct SimConfig {
  double dt = kDefaultDt;
  double dead_zone_half_width = 0.0;  // valve units; 0 disables
  int delay_steps = 0;
  // Swing is unlimited and wraps to (-pi, pi]; its entry is ignored.
  std::array<JointLimits, kNumJoints> joint_limits{
      JointLimits{-3.141592653589793, 3.141592653589793}, JointLimits{-0.4, 1.1},
      JointLimits{-2.5, -0.3}, JointLimits{-2.8, 0.3}};
  // Used by joint-position tracking. Defaults match the reference model's
  // velocity at full valve deflection.
  Joint4 max_joint_rate{0.0231, 0.01125, 0.0202, 0.0476};

  void Validate() const;
  KeyValueConfig ToConfig() const;
  static SimConfig FromConfig(const KeyValueConfig& cfg);
};

struct ExcavatorGeometry {
  double cab_height = 2.0;         // m, boom pivot height above ground
  double boom_length = 5.7;        // m
  double stick_length = 2.9;       // m
  double bucket_length = 1.5;      // m
  double boom_pivot_offset = 0.5;  // m, boom pivot ahead of the swing axis

  void Validate() const;
  KeyValueConfig ToConfig() const;
  static ExcavatorGeometry FromConfig(const KeyValueConfig& cfg);
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

double Distance(const Vec3& a, const Vec3& b);

// Wraps an angle to (-pi, pi].
double WrapAngle(double a);

void ValidateValveCommand(const ValveCommand& v);
void ValidateJointState(const JointState& s);
ValveCommand ClampValves(const ValveCommand& v);

JointVelocity ValveToVelocity(const LinearValveModel& model, const ValveCommand& v,
                              const SimConfig& cfg);

// Inverse of the linear map, clamped to the valve range.
ValveCommand VelocityToValve(const LinearValveModel& model, const JointVelocity& qd);

// Applies joint limits to a state (clamp boom/stick/bucket, wrap swing).
JointState ApplyLimits(JointState s, const SimConfig& cfg);

// One explicit Euler step with the given velocity; no delay handling.
JointState Integrate(const JointState& s, const JointVelocity& qd, const SimConfig& cfg);

// Delay-free valve step.
JointState Step(const JointState& s, const ValveCommand& v, const LinearValveModel& model,
                const SimConfig& cfg);

// Moves every joint toward `target` by at most max_joint_rate * dt.
JointState TrackJointTargets(const JointState& s, const JointState& target,
                             const SimConfig& cfg);

// Bucket tip in the world frame: x forward at swing 0, z up, origin on the
// ground under the swing axis. Boom is measured from horizontal; stick and
// bucket are measured relative to the preceding link.
Vec3 ForwardKinematics(const JointState& q, const ExcavatorGeometry& geom);

// Link endpoints in the arm plane (radial, height), from boom pivot to tip.
std::array<std::array<double, 2>, 4> PlanarChain(const JointState& q,
                                                 const ExcavatorGeometry& geom);

// Stateful simulator. Holds the joint state and the command pipeline used
// to model actuation delay.
class Simulator {
 public:
  Simulator(LinearValveModel model, SimConfig cfg, JointState initial = {});

  const JointState& state() const { return state_; }
  const SimConfig& config() const { return cfg_; }
  const LinearValveModel& model() const { return model_; }

  void Reset(const JointState& initial);
  const JointState& StepValves(const ValveCommand& v);
  const JointState& StepJointTarget(const JointState& target);

 private:
  LinearValveModel model_;
  SimConfig cfg_;
  JointState state_;
  std::deque<ValveCommand> pipeline_;
};

// Returns len(commands) + 1 states starting with `initial`.
std::vector<JointState> Rollout(const JointState& initial,
                                std::span<const ValveCommand> commands,
                                const LinearValveModel& model, const SimConfig& cfg);

}  // namespace excavate

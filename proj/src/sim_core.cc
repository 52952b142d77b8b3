#include "excavate/sim_core.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace excavate {
namespace {

constexpr std::array<const char*, kNumJoints> kJointNames = {"swing", "boom", "stick", "bucket"};

std::size_t Idx(Joint j) { return static_cast<std::size_t>(j); }

void RequireFinite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string("non-finite ") + what);
}

}  // namespace

const char* JointName(Joint j) { return kJointNames[Idx(j)]; }

Joint JointFromName(const std::string& name) {
  for (Joint j : kAllJoints) {
    if (name == JointName(j)) return j;
  }
  throw std::invalid_argument("unknown joint: " + name);
}

LinearValveModel LinearValveModel::Reference() {
  LinearValveModel m;
  m[Joint::kSwing] = {-2.8227e-6, 2.3118e-2};
  m[Joint::kBoom] = {1.3736e-6, -1.1250e-2};
  m[Joint::kStick] = {-2.4656e-6, 2.0193e-2};
  m[Joint::kBucket] = {5.8151e-6, -4.7625e-2};
  return m;
}

void LinearValveModel::Validate() const {
  for (Joint j : kAllJoints) {
    const auto& jm = (*this)[j];
    RequireFinite(jm.gain, "gain");
    RequireFinite(jm.intercept, "intercept");
    if (jm.gain == 0.0) {
      throw std::invalid_argument(std::string("zero gain for joint ") + JointName(j));
    }
    const double neutral = -jm.intercept / jm.gain;
    if (neutral < kValveMin || neutral > kValveMax) {
      throw std::invalid_argument(std::string("neutral point outside valve range for joint ") +
                                  JointName(j));
    }
  }
}

KeyValueConfig LinearValveModel::ToConfig() const {
  KeyValueConfig cfg;
  for (Joint j : kAllJoints) {
    const std::string prefix = std::string("model.") + JointName(j);
    cfg.Set(prefix + ".gain", (*this)[j].gain);
    cfg.Set(prefix + ".intercept", (*this)[j].intercept);
  }
  return cfg;
}

LinearValveModel LinearValveModel::FromConfig(const KeyValueConfig& cfg) {
  LinearValveModel m = Reference();
  for (Joint j : kAllJoints) {
    const std::string prefix = std::string("model.") + JointName(j);
    m[j].gain = cfg.GetDouble(prefix + ".gain", m[j].gain);
    m[j].intercept = cfg.GetDouble(prefix + ".intercept", m[j].intercept);
  }
  m.Validate();
  return m;
}

void SimConfig::Validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("dt must be > 0");
  if (delay_steps < 0) throw std::invalid_argument("delay_steps must be >= 0");
  if (!(dead_zone_half_width >= 0.0)) {
    throw std::invalid_argument("dead_zone_half_width must be >= 0");
  }
  for (Joint j : kAllJoints) {
    const auto& lim = joint_limits[Idx(j)];
    if (!(lim.min < lim.max)) {
      throw std::invalid_argument(std::string("joint limit min >= max for ") + JointName(j));
    }
    if (!(max_joint_rate[Idx(j)] > 0.0)) {
      throw std::invalid_argument(std::string("max_joint_rate must be > 0 for ") + JointName(j));
    }
  }
}

KeyValueConfig SimConfig::ToConfig() const {
  KeyValueConfig cfg;
  cfg.Set("dt", dt);
  cfg.Set("dead_zone_half_width", dead_zone_half_width);
  cfg.Set("delay_steps", std::to_string(delay_steps));
  for (Joint j : kAllJoints) {
    if (j != Joint::kSwing) {
      const auto& lim = joint_limits[Idx(j)];
      cfg.Set(std::string("limit.") + JointName(j), std::vector<double>{lim.min, lim.max});
    }
    cfg.Set(std::string("max_joint_rate.") + JointName(j), max_joint_rate[Idx(j)]);
  }
  return cfg;
}

SimConfig SimConfig::FromConfig(const KeyValueConfig& cfg) {
  SimConfig out;
  out.dt = cfg.GetDouble("dt", out.dt);
  out.dead_zone_half_width = cfg.GetDouble("dead_zone_half_width", out.dead_zone_half_width);
  out.delay_steps = static_cast<int>(cfg.GetInt("delay_steps", out.delay_steps));
  for (Joint j : kAllJoints) {
    const std::string lim_key = std::string("limit.") + JointName(j);
    if (j != Joint::kSwing && cfg.Has(lim_key)) {
      const auto v = cfg.GetDoubles(lim_key);
      if (v.size() != 2) throw ConfigError(lim_key + ": expected 'min max'");
      out.joint_limits[Idx(j)] = {v[0], v[1]};
    }
    const std::string rate_key = std::string("max_joint_rate.") + JointName(j);
    out.max_joint_rate[Idx(j)] = cfg.GetDouble(rate_key, out.max_joint_rate[Idx(j)]);
  }
  out.Validate();
  return out;
}

void ExcavatorGeometry::Validate() const {
  for (double v : {cab_height, boom_length, stick_length, bucket_length}) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("geometry lengths must be > 0");
    }
  }
  RequireFinite(boom_pivot_offset, "boom_pivot_offset");
}

KeyValueConfig ExcavatorGeometry::ToConfig() const {
  KeyValueConfig cfg;
  cfg.Set("geometry.cab_height", cab_height);
  cfg.Set("geometry.boom_length", boom_length);
  cfg.Set("geometry.stick_length", stick_length);
  cfg.Set("geometry.bucket_length", bucket_length);
  cfg.Set("geometry.boom_pivot_offset", boom_pivot_offset);
  return cfg;
}

ExcavatorGeometry ExcavatorGeometry::FromConfig(const KeyValueConfig& cfg) {
  ExcavatorGeometry g;
  g.cab_height = cfg.GetDouble("geometry.cab_height", g.cab_height);
  g.boom_length = cfg.GetDouble("geometry.boom_length", g.boom_length);
  g.stick_length = cfg.GetDouble("geometry.stick_length", g.stick_length);
  g.bucket_length = cfg.GetDouble("geometry.bucket_length", g.bucket_length);
  g.boom_pivot_offset = cfg.GetDouble("geometry.boom_pivot_offset", g.boom_pivot_offset);
  g.Validate();
  return g;
}

double Distance(const Vec3& a, const Vec3& b) {
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) +
                   (a.z - b.z) * (a.z - b.z));
}

double WrapAngle(double a) {
  constexpr double kPi = std::numbers::pi;
  if (a > -kPi && a <= kPi) return a;
  double w = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

void ValidateValveCommand(const ValveCommand& v) {
  for (Joint j : kAllJoints) {
    RequireFinite(v[j], "valve command");
    if (v[j] < kValveMin || v[j] > kValveMax) {
      throw std::invalid_argument(std::string("valve command out of range for ") + JointName(j));
    }
  }
}

void ValidateJointState(const JointState& s) {
  for (double q : s.q) RequireFinite(q, "joint position");
  RequireFinite(s.time, "time");
}

ValveCommand ClampValves(const ValveCommand& v) {
  ValveCommand out;
  for (Joint j : kAllJoints) {
    RequireFinite(v[j], "valve command");
    out[j] = std::clamp(v[j], kValveMin, kValveMax);
  }
  return out;
}

JointVelocity ValveToVelocity(const LinearValveModel& model, const ValveCommand& v,
                              const SimConfig& cfg) {
  ValidateValveCommand(v);
  JointVelocity qd;
  for (Joint j : kAllJoints) {
    if (cfg.dead_zone_half_width > 0.0 &&
        std::abs(v[j] - kValveNeutral) < cfg.dead_zone_half_width) {
      qd[j] = 0.0;
    } else {
      qd[j] = model[j].gain * v[j] + model[j].intercept;
    }
  }
  return qd;
}

ValveCommand VelocityToValve(const LinearValveModel& model, const JointVelocity& qd) {
  ValveCommand v;
  for (Joint j : kAllJoints) {
    RequireFinite(qd[j], "joint velocity");
    v[j] = std::clamp((qd[j] - model[j].intercept) / model[j].gain, kValveMin, kValveMax);
  }
  return v;
}

JointState ApplyLimits(JointState s, const SimConfig& cfg) {
  s[Joint::kSwing] = WrapAngle(s[Joint::kSwing]);
  for (Joint j : {Joint::kBoom, Joint::kStick, Joint::kBucket}) {
    const auto& lim = cfg.joint_limits[Idx(j)];
    s[j] = std::clamp(s[j], lim.min, lim.max);
  }
  return s;
}

JointState Integrate(const JointState& s, const JointVelocity& qd, const SimConfig& cfg) {
  ValidateJointState(s);
  JointState next = s;
  for (Joint j : kAllJoints) {
    RequireFinite(qd[j], "joint velocity");
    next[j] = s[j] + qd[j] * cfg.dt;
  }
  next.time = s.time + cfg.dt;
  return ApplyLimits(next, cfg);
}

JointState Step(const JointState& s, const ValveCommand& v, const LinearValveModel& model,
                const SimConfig& cfg) {
  return Integrate(s, ValveToVelocity(model, v, cfg), cfg);
}

JointState TrackJointTargets(const JointState& s, const JointState& target,
                             const SimConfig& cfg) {
  ValidateJointState(s);
  ValidateJointState(target);
  JointState next = s;
  for (Joint j : kAllJoints) {
    double delta = target[j] - s[j];
    if (j == Joint::kSwing) delta = WrapAngle(delta);
    const double bound = cfg.max_joint_rate[Idx(j)] * cfg.dt;
    next[j] = std::abs(delta) <= bound ? s[j] + delta : s[j] + std::copysign(bound, delta);
    if (j == Joint::kSwing && std::abs(delta) <= bound) next[j] = target[j];
  }
  next.time = s.time + cfg.dt;
  return ApplyLimits(next, cfg);
}

std::array<std::array<double, 2>, 4> PlanarChain(const JointState& q,
                                                 const ExcavatorGeometry& geom) {
  std::array<std::array<double, 2>, 4> pts{};
  pts[0] = {geom.boom_pivot_offset, geom.cab_height};
  const double lengths[3] = {geom.boom_length, geom.stick_length, geom.bucket_length};
  const double rel[3] = {q[Joint::kBoom], q[Joint::kStick], q[Joint::kBucket]};
  double angle = 0.0;
  for (int i = 0; i < 3; ++i) {
    angle += rel[i];
    pts[i + 1] = {pts[i][0] + lengths[i] * std::cos(angle),
                  pts[i][1] + lengths[i] * std::sin(angle)};
  }
  return pts;
}

Vec3 ForwardKinematics(const JointState& q, const ExcavatorGeometry& geom) {
  const auto chain = PlanarChain(q, geom);
  const double radial = chain[3][0];
  const double swing = q[Joint::kSwing];
  return {radial * std::cos(swing), radial * std::sin(swing), chain[3][1]};
}

Simulator::Simulator(LinearValveModel model, SimConfig cfg, JointState initial)
    : model_(model), cfg_(cfg) {
  model_.Validate();
  cfg_.Validate();
  Reset(initial);
}

void Simulator::Reset(const JointState& initial) {
  ValidateJointState(initial);
  state_ = ApplyLimits(initial, cfg_);
  pipeline_.assign(static_cast<std::size_t>(cfg_.delay_steps), ValveCommand::Neutral());
}

const JointState& Simulator::StepValves(const ValveCommand& v) {
  ValidateValveCommand(v);
  pipeline_.push_back(v);
  const ValveCommand effective = pipeline_.front();
  pipeline_.pop_front();
  state_ = Step(state_, effective, model_, cfg_);
  return state_;
}

const JointState& Simulator::StepJointTarget(const JointState& target) {
  state_ = TrackJointTargets(state_, target, cfg_);
  return state_;
}

std::vector<JointState> Rollout(const JointState& initial,
                                std::span<const ValveCommand> commands,
                                const LinearValveModel& model, const SimConfig& cfg) {
  if (commands.empty()) throw std::invalid_argument("rollout requires at least one command");
  Simulator sim(model, cfg, initial);
  std::vector<JointState> out;
  out.reserve(commands.size() + 1);
  out.push_back(sim.state());
  for (const auto& v : commands) out.push_back(sim.StepValves(v));
  return out;
}

}  // namespace excavate

#include "excavate/harness.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "excavate/temporal_ensemble.h"

namespace excavate::harness {
namespace {

std::uint64_t Mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Float4 ToFloat4(const Joint4& q) {
  return {static_cast<float>(q[0]), static_cast<float>(q[1]), static_cast<float>(q[2]),
          static_cast<float>(q[3])};
}

JointState FromFloat4(const Float4& f, double time = 0.0) {
  JointState s;
  for (std::size_t i = 0; i < 4; ++i) s.q[i] = f[i];
  s.time = time;
  return s;
}

elevation::CropRegion CropFor(const elevation::TerrainSpec& site, double x_min, double y_min,
                              int rows, int cols, elevation::ZoneLabel label) {
  elevation::CropRegion c;
  c.col_offset = static_cast<int>(std::lround((x_min - site.origin_x) / site.resolution));
  c.row_offset = static_cast<int>(std::lround((y_min - site.origin_y) / site.resolution));
  c.rows = rows;
  c.cols = cols;
  c.label = label;
  return c;
}

Rect RectOf(const elevation::TerrainSpec& site, const elevation::CropRegion& c) {
  Rect r;
  r.x_min = site.origin_x + c.col_offset * site.resolution;
  r.y_min = site.origin_y + c.row_offset * site.resolution;
  r.x_max = r.x_min + c.cols * site.resolution;
  r.y_max = r.y_min + c.rows * site.resolution;
  return r;
}

// Nearest cell height, or 0 off the grid.
double HeightAt(const elevation::ElevationGrid& g, double x, double y) {
  if (g.rows == 0) return 0.0;
  const int c = static_cast<int>(std::lround((x - g.origin_x) / g.resolution));
  const int r = static_cast<int>(std::lround((y - g.origin_y) / g.resolution));
  if (r < 0 || c < 0 || r >= g.rows || c >= g.cols || !g.IsValid(r, c)) return 0.0;
  return g.At(r, c);
}

template <typename F>
void ForEachCell(elevation::ElevationGrid& g, F&& f) {
  for (int r = 0; r < g.rows; ++r) {
    const double y = g.origin_y + r * g.resolution;
    for (int c = 0; c < g.cols; ++c) {
      f(g.At(r, c), g.origin_x + c * g.resolution, y);
    }
  }
}

// Pinhole camera fixed behind and above the machine.
struct Camera {
  Vec3 eye{-4.0, -2.5, 6.5};
  Vec3 look_at{6.0, 0.8, 0.5};
  double fov_y = 0.75;

  Vec3 forward, right, up;
  double fx = 0, cx = 0, cy = 0;

  Camera(int h, int w) {
    forward = Normalize({look_at.x - eye.x, look_at.y - eye.y, look_at.z - eye.z});
    right = Normalize(Cross(forward, {0, 0, 1}));
    up = Cross(right, forward);
    fx = 0.5 * h / std::tan(0.5 * fov_y);
    cx = 0.5 * w;
    cy = 0.5 * h;
  }

  static Vec3 Cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
  }
  static double Dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
  static Vec3 Normalize(const Vec3& v) {
    const double n = std::sqrt(Dot(v, v));
    return {v.x / n, v.y / n, v.z / n};
  }

  // Pixel (col, row); false when behind the camera.
  bool Project(const Vec3& p, double& u, double& v) const {
    const Vec3 d{p.x - eye.x, p.y - eye.y, p.z - eye.z};
    const double zc = Dot(d, forward);
    if (zc <= 0.1) return false;
    u = cx + fx * Dot(d, right) / zc;
    v = cy - fx * Dot(d, up) / zc;
    return true;
  }

  // Ray through pixel centre (c, r) hitting z = 0.
  bool Ground(int r, int c, double& x, double& y) const {
    const double a = (c + 0.5 - cx) / fx;
    const double b = (cy - (r + 0.5)) / fx;
    const Vec3 dir{forward.x + a * right.x + b * up.x, forward.y + a * right.y + b * up.y,
                   forward.z + a * right.z + b * up.z};
    if (dir.z >= -1e-6) return false;
    const double s = -eye.z / dir.z;
    x = eye.x + s * dir.x;
    y = eye.y + s * dir.y;
    return s < 40.0;
  }
};

void Splat(ObservationImage& img, double u, double v, int ch, float value) {
  const int c = static_cast<int>(std::floor(u));
  const int r = static_cast<int>(std::floor(v));
  if (r < 0 || c < 0 || r >= img.height || c >= img.width) return;
  img.at(r, c, ch) = std::max(img.at(r, c, ch), value);
}

void DrawSegment(ObservationImage& img, const Camera& cam, const Vec3& a, const Vec3& b) {
  const double len = Distance(a, b);
  const int n = std::max(2, static_cast<int>(len / 0.05));
  for (int i = 0; i <= n; ++i) {
    const double s = static_cast<double>(i) / n;
    const Vec3 p{a.x + s * (b.x - a.x), a.y + s * (b.y - a.y), a.z + s * (b.z - a.z)};
    double u, v;
    if (cam.Project(p, u, v)) Splat(img, u, v, 0, 1.0f);
  }
}

void CheckLimits(const JointState& q, const SimConfig& cfg) {
  for (Joint j : {Joint::kBoom, Joint::kStick, Joint::kBucket}) {
    const auto& lim = cfg.joint_limits[static_cast<std::size_t>(j)];
    if (q[j] < lim.min || q[j] > lim.max) {
      throw std::domain_error(std::string("ik: ") + JointName(j) + " outside its limits");
    }
  }
}

void ApplyDig(Scene& scene, double r_from, double r_to, double depth) {
  const double lo = std::min(r_from, r_to);
  const double hi = std::max(r_from, r_to);
  ForEachCell(scene.terrain, [&](float& h, double x, double y) {
    if (x >= lo && x <= hi && std::abs(y) <= 0.6) h -= static_cast<float>(depth);
  });
}

void ApplyDump(Scene& scene, double x0, double y0, double amount) {
  ForEachCell(scene.terrain, [&](float& h, double x, double y) {
    const double d2 = (x - x0) * (x - x0) + (y - y0) * (y - y0);
    h += static_cast<float>(amount * std::exp(-d2 / (2.0 * 0.5 * 0.5)));
  });
}

// Dig choreography in joint space, relative to the start pose.
struct DigWaypoints {
  static constexpr double kDumpSwing = 0.13;
  static constexpr double kStartR = 7.3;
  static constexpr double kStartClearance = 0.45;
  static constexpr double kStartPhi = -1.75;
};

void AppendSegment(std::vector<JointState>& out, const JointState& to, const SimConfig& cfg,
                   double rate_fraction) {
  const JointState from = out.back();
  double steps = 1.0;
  for (std::size_t j = 0; j < 4; ++j) {
    const double bound = rate_fraction * cfg.max_joint_rate[j] * cfg.dt;
    steps = std::max(steps, std::abs(to.q[j] - from.q[j]) / bound);
  }
  const int n = static_cast<int>(std::ceil(steps - 1e-9));
  for (int i = 1; i <= n; ++i) {
    JointState s;
    const double a = static_cast<double>(i) / n;
    for (std::size_t j = 0; j < 4; ++j) s.q[j] = from.q[j] + a * (to.q[j] - from.q[j]);
    s.time = from.time + i * cfg.dt;
    out.push_back(s);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tasks and scenes

TaskSpec TaskSpec::Default(Task task) {
  TaskSpec s;
  s.task = task;
  s.action_space = DefaultActionSpace(task);
  s.site.rows = 80;
  s.site.cols = 100;
  s.site.resolution = 0.2;
  s.site.origin_x = -2.0;
  s.site.origin_y = -8.0;
  s.site.noise_sigma = 0.01;
  s.dig_crop = CropFor(s.site, 5.0, -1.6, 15, 20, elevation::ZoneLabel::kDigging);
  s.dump_crop = CropFor(s.site, 4.0, -0.6, 15, 20, elevation::ZoneLabel::kDumping);
  switch (task) {
    case Task::kReach:
      s.target_length = 181;
      break;
    case Task::kDigDump:
      s.target_length = 361;
      break;
    case Task::kDigDumpReturn:
      s.target_length = 398;
      break;
  }
  return s;
}

void TaskSpec::Validate() const {
  if (action_space != DefaultActionSpace(task)) {
    throw std::invalid_argument(std::string("task ") + TaskName(task) + " is controlled in " +
                                ActionSpaceName(DefaultActionSpace(task)) + " space");
  }
  if (image_height < 1 || image_width < 1) throw std::invalid_argument("bad image size");
  if (TaskInvolvesDigging(task)) {
    auto inside = [this](const elevation::CropRegion& c) {
      return c.row_offset >= 0 && c.col_offset >= 0 && c.rows > 0 && c.cols > 0 &&
             c.row_offset + c.rows <= site.rows && c.col_offset + c.cols <= site.cols;
    };
    if (!inside(dig_crop) || !inside(dump_crop)) {
      throw std::invalid_argument("zone crop outside the site grid");
    }
  }
}

Rect TaskSpec::DigRect() const { return RectOf(site, dig_crop); }
Rect TaskSpec::DumpRect() const { return RectOf(site, dump_crop); }

Scene MakeScene(const TaskSpec& spec, const ExcavatorGeometry& geom, std::uint64_t terrain_seed) {
  spec.Validate();
  Scene scene{spec, geom, {}};
  if (!TaskInvolvesDigging(spec.task)) return scene;
  std::mt19937_64 rng(terrain_seed);
  std::uniform_real_distribution<double> amp(-0.15, 0.25);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  elevation::TerrainSpec site = spec.site;
  const Rect dig = spec.DigRect();
  site.piles.push_back({dig.CenterX() + jitter(rng), dig.CenterY() + jitter(rng), amp(rng), 1.4});
  scene.terrain = elevation::SynthTerrain(site, Mix(terrain_seed));
  return scene;
}

ObservationImage RenderCamera(const Scene& scene, const JointState& q) {
  const int h = scene.spec.image_height;
  const int w = scene.spec.image_width;
  ObservationImage img(h, w, "camera");
  const Camera cam(h, w);
  const bool terrain = scene.terrain.rows > 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double x, y;
      if (!cam.Ground(r, c, x, y)) continue;
      const double ht = terrain ? HeightAt(scene.terrain, x, y) : 0.0;
      img.at(r, c, 2) = static_cast<float>(std::clamp(0.4 + 0.5 * ht, 0.05, 1.0));
    }
  }
  const auto chain = PlanarChain(q, scene.geometry);
  const double cs = std::cos(q[Joint::kSwing]);
  const double sn = std::sin(q[Joint::kSwing]);
  auto world = [&](const std::array<double, 2>& p) { return Vec3{p[0] * cs, p[0] * sn, p[1]}; };
  DrawSegment(img, cam, {0, 0, 0}, {0, 0, scene.geometry.cab_height});
  DrawSegment(img, cam, {0, 0, scene.geometry.cab_height}, world(chain[0]));
  for (int i = 0; i < 3; ++i) DrawSegment(img, cam, world(chain[i]), world(chain[i + 1]));
  if (scene.spec.task == Task::kReach) {
    double u, v;
    if (cam.Project(scene.spec.target, u, v)) {
      for (int dr = -2; dr <= 2; ++dr) {
        for (int dc = -2; dc <= 2; ++dc) {
          if (dr * dr + dc * dc <= 4) Splat(img, u + dc, v + dr, 1, 1.0f);
        }
      }
    }
  }
  return img;
}

ObservationImage RenderDigZone(const Scene& scene) {
  return elevation::RenderObservation(elevation::CropZone(scene.terrain, scene.spec.dig_crop),
                                      scene.spec.image_height, scene.spec.image_width,
                                      elevation::Normalization::FixedRange(-1.0, 1.0), "elev_dig");
}

ObservationImage RenderDumpZone(const Scene& scene) {
  return elevation::RenderObservation(elevation::CropZone(scene.terrain, scene.spec.dump_crop),
                                      scene.spec.image_height, scene.spec.image_width,
                                      elevation::Normalization::FixedRange(-1.0, 1.0),
                                      "elev_dump");
}

dataset::Observation MakeObservation(const Scene& scene, const JointState& q) {
  dataset::Observation o;
  o.joints = ToFloat4(q.q);
  o.camera = RenderCamera(scene, q);
  if (TaskInvolvesDigging(scene.spec.task)) {
    o.elev_dig = RenderDigZone(scene);
    o.elev_dump = RenderDumpZone(scene);
  }
  return o;
}

JointState SolveIk(double swing, double r, double z, double phi, const ExcavatorGeometry& g,
                   const SimConfig& cfg) {
  const double wx = r - g.bucket_length * std::cos(phi) - g.boom_pivot_offset;
  const double wz = z - g.bucket_length * std::sin(phi) - g.cab_height;
  const double c = (wx * wx + wz * wz - g.boom_length * g.boom_length -
                    g.stick_length * g.stick_length) /
                   (2.0 * g.boom_length * g.stick_length);
  if (std::abs(c) > 1.0) throw std::domain_error("ik: wrist out of reach");
  const double s = -std::acos(c);
  const double b = std::atan2(wz, wx) -
                   std::atan2(g.stick_length * std::sin(s), g.boom_length + g.stick_length * std::cos(s));
  JointState q;
  q[Joint::kSwing] = WrapAngle(swing);
  q[Joint::kBoom] = b;
  q[Joint::kStick] = s;
  q[Joint::kBucket] = phi - b - s;
  CheckLimits(q, cfg);
  return q;
}

// ---------------------------------------------------------------------------
// Experts

ValveCommand ScriptedExpertReach(const JointState& q, const Vec3& target,
                                 const LinearValveModel& model, const ExcavatorGeometry& geom,
                                 const SimConfig& cfg, const ReachExpertConfig& ecfg) {
  ValidateJointState(q);
  const double r_t = std::hypot(target.x, target.y);
  const double reach = geom.boom_length + geom.stick_length + geom.bucket_length;
  bool reachable = false;
  for (double phi = -3.0; phi <= 0.5 && !reachable; phi += 0.1) {
    try {
      SolveIk(0.0, r_t, target.z, phi, geom, cfg);
      reachable = true;
    } catch (const std::domain_error&) {
    }
  }
  if (!reachable || std::hypot(r_t - geom.boom_pivot_offset, target.z - geom.cab_height) > reach) {
    throw UnreachableTargetError("reach target outside the workspace");
  }

  const Vec3 tip = ForwardKinematics(q, geom);
  const double r = std::hypot(tip.x, tip.y);
  // The tip lies in the arm plane, pointing along +swing unless folded past
  // the swing axis.
  const double e_r = r_t - r;
  const double e_z = target.z - tip.z;
  const double e_sw = WrapAngle(std::atan2(target.y, target.x) - q[Joint::kSwing]);
  const bool aligning = std::hypot(e_r, r_t * e_sw) > ecfg.align_tolerance;

  const double v_r = ecfg.radial_gain * e_r;
  const double v_z = aligning ? 0.0 : ecfg.height_gain * e_z;

  const double b = q[Joint::kBoom];
  const double bs = b + q[Joint::kStick];
  const double j11 = -geom.boom_length * std::sin(b) - geom.stick_length * std::sin(bs);
  const double j12 = -geom.stick_length * std::sin(bs);
  const double j21 = geom.boom_length * std::cos(b) + geom.stick_length * std::cos(bs);
  const double j22 = geom.stick_length * std::cos(bs);
  // Damped least squares on the 2x2 wrist Jacobian.
  const double lambda2 = 1e-4;
  const double a11 = j11 * j11 + j21 * j21 + lambda2;
  const double a12 = j11 * j12 + j21 * j22;
  const double a22 = j12 * j12 + j22 * j22 + lambda2;
  const double g1 = j11 * v_r + j21 * v_z;
  const double g2 = j12 * v_r + j22 * v_z;
  const double det = a11 * a22 - a12 * a12;

  JointVelocity qd;
  qd[Joint::kSwing] = ecfg.swing_gain * e_sw;
  qd[Joint::kBoom] = (a22 * g1 - a12 * g2) / det;
  qd[Joint::kStick] = (a11 * g2 - a12 * g1) / det;
  qd[Joint::kBucket] = -(qd[Joint::kBoom] + qd[Joint::kStick]);  // hold bucket attitude

  double scale = 1.0;
  for (std::size_t j = 0; j < 4; ++j) {
    const double cap = ecfg.rate_fraction * cfg.max_joint_rate[j];
    if (std::abs(qd.qd[j]) > cap) scale = std::min(scale, cap / std::abs(qd.qd[j]));
  }
  for (double& v : qd.qd) v *= scale;
  return VelocityToValve(model, qd);
}

DigPlan PlanDig(const Scene& scene, const SimConfig& cfg, bool with_return) {
  const auto& g = scene.geometry;
  using W = DigWaypoints;
  const double surface = HeightAt(scene.terrain, W::kStartR, 0.0);
  const JointState p0 = SolveIk(0.0, W::kStartR, surface + W::kStartClearance, W::kStartPhi, g, cfg);
  // Boom angle that lowers the tip by the soil offset, so the cut depth
  // follows the terrain.
  const double lever = W::kStartR - g.boom_pivot_offset;
  auto delta = [&](double dsw, double db, double ds, double dk) {
    JointState q = p0;
    q[Joint::kSwing] += dsw;
    q[Joint::kBoom] += db;
    q[Joint::kStick] += ds;
    q[Joint::kBucket] += dk;
    return q;
  };
  const double cut = -0.5 / lever;  // tip 0.5 m down from the start height
  const JointState penetrate = delta(0.0, cut, -0.04, 0.12);
  const JointState drag = delta(0.0, cut, 0.10, -0.20);
  const JointState lift = delta(0.0, 0.0, 0.10, -0.35);
  const JointState swing = delta(W::kDumpSwing, 0.02, 0.08, -0.35);
  const JointState dump = delta(W::kDumpSwing, 0.02, 0.04, -0.05);

  DigPlan plan;
  plan.setpoints.push_back(p0);
  const double frac = 0.9;
  AppendSegment(plan.setpoints, penetrate, cfg, frac);
  AppendSegment(plan.setpoints, drag, cfg, frac);
  AppendSegment(plan.setpoints, lift, cfg, frac);
  plan.dig_done = plan.setpoints.size() - 1;
  AppendSegment(plan.setpoints, swing, cfg, frac);
  AppendSegment(plan.setpoints, dump, cfg, frac);
  plan.dump_done = plan.setpoints.size() - 1;
  if (with_return) AppendSegment(plan.setpoints, p0, cfg, frac);
  for (auto& s : plan.setpoints) CheckLimits(s, cfg);
  return plan;
}

JointState SampleReachStart(const TaskSpec& spec, const DemoConfig& cfg, std::mt19937_64& rng,
                            int swing_side) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double r_t = std::hypot(spec.target.x, spec.target.y);
  const double az_t = std::atan2(spec.target.y, spec.target.x);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    double side = u01(rng) < 0.5 ? -1.0 : 1.0;
    if (swing_side != 0) side = swing_side > 0 ? 1.0 : -1.0;
    const double dsw = side * (0.06 + 0.16 * u01(rng));
    const double dr = -0.9 + 1.8 * u01(rng);
    const double dz = 0.3 + 0.7 * u01(rng);
    const double phi = -2.1 + 0.5 * u01(rng);
    try {
      const JointState q = SolveIk(az_t + dsw, r_t + dr, spec.target.z + dz, phi, cfg.geometry, cfg.sim);
      SolveIk(az_t, r_t, spec.target.z, phi, cfg.geometry, cfg.sim);
      return q;
    } catch (const std::domain_error&) {
    }
  }
  throw ExpertFailure("no feasible reach start state");
}

Episode RunExpertEpisode(const TaskSpec& spec, const DemoConfig& cfg, std::uint64_t seed,
                         int swing_side) {
  spec.Validate();
  Episode ep;
  ep.task = spec.task;
  ep.action_space = spec.action_space;
  ep.dt = cfg.sim.dt;
  auto record = [&ep](const dataset::Observation& obs, double time, const Joint4& action) {
    struct Step s;
    s.time = static_cast<float>(time);
    s.joints = obs.joints;
    s.camera = obs.camera;
    s.elev_dig = obs.elev_dig;
    s.elev_dump = obs.elev_dump;
    s.action = ToFloat4(action);
    ep.steps.push_back(std::move(s));
  };

  if (spec.task == Task::kReach) {
    std::mt19937_64 rng(seed);
    Scene scene = MakeScene(spec, cfg.geometry, seed);
    Simulator sim(cfg.model, cfg.sim, SampleReachStart(spec, cfg, rng, swing_side));
    int hold = -1;
    for (int t = 0; t < cfg.reach_max_steps; ++t) {
      const JointState q = sim.state();
      const ValveCommand v = ScriptedExpertReach(q, spec.target, cfg.model, cfg.geometry, cfg.sim);
      record(MakeObservation(scene, q), q.time, v.valves);
      sim.StepValves(v);
      if (hold < 0 && Distance(ForwardKinematics(sim.state(), cfg.geometry), spec.target) <
                          cfg.reach_done_radius) {
        hold = cfg.reach_hold_steps;
      }
      if (hold >= 0 && hold-- == 0) return ep;
    }
    throw ExpertFailure("reach expert did not converge");
  }

  Scene scene = MakeScene(spec, cfg.geometry, seed);
  DigPlan plan;
  try {
    plan = PlanDig(scene, cfg.sim, spec.task == Task::kDigDumpReturn);
  } catch (const std::domain_error& e) {
    throw ExpertFailure(std::string("dig plan infeasible: ") + e.what());
  }
  const auto& sp = plan.setpoints;
  const double cut_r0 = ForwardKinematics(sp[1], cfg.geometry).x;
  Simulator sim(cfg.model, cfg.sim, sp.front());
  for (std::size_t t = 0; t + 1 < sp.size(); ++t) {
    const JointState q = sim.state();
    const dataset::Observation obs = MakeObservation(scene, q);
    if (spec.action_space == ActionSpace::kJointPosition) {
      JointState target = sp[t + 1];
      record(obs, q.time, target.q);
      sim.StepJointTarget(target);
    } else {
      JointVelocity qd;
      for (std::size_t j = 0; j < 4; ++j) {
        double d = sp[t + 1].q[j] - q.q[j];
        if (j == 0) d = WrapAngle(d);
        qd.qd[j] = d / cfg.sim.dt;
      }
      const ValveCommand v = VelocityToValve(cfg.model, qd);
      record(obs, q.time, v.valves);
      sim.StepValves(v);
    }
    if (t + 1 == plan.dig_done) {
      ApplyDig(scene, cut_r0, ForwardKinematics(sp[plan.dig_done], cfg.geometry).x, 0.3);
    }
    if (t + 1 == plan.dump_done) {
      const Vec3 tip = ForwardKinematics(sp[plan.dump_done], cfg.geometry);
      ApplyDump(scene, tip.x, tip.y, 0.35);
    }
  }
  double err = 0.0;
  for (std::size_t j = 0; j < 4; ++j) err = std::max(err, std::abs(sim.state().q[j] - sp.back().q[j]));
  if (err > 1e-3) throw ExpertFailure("dig expert lost track of its plan");
  return ep;
}

std::vector<Episode> GenerateDemos(const TaskSpec& spec, int n_episodes, std::uint64_t seed,
                                   const DemoConfig& cfg) {
  if (n_episodes < 1) throw std::invalid_argument("n_episodes must be >= 1");
  spec.Validate();
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i) {
    const int side = cfg.balance_reach_sides ? (i % 2 == 0 ? 1 : -1) : 0;
    bool done = false;
    for (int attempt = 0; attempt <= cfg.max_retries && !done; ++attempt) {
      const std::uint64_t sub = Mix(Mix(seed) ^ Mix(static_cast<std::uint64_t>(i) * 1000003ULL + attempt));
      try {
        out.push_back(RunExpertEpisode(spec, cfg, sub, side));
        done = true;
      } catch (const ExpertFailure&) {
      }
    }
    if (!done) throw ExpertFailure("episode " + std::to_string(i) + " failed after retries");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

PolicyHandle MakePolicyHandle(const policy::Policy<float>& policy, ActionSpace space) {
  auto shared = std::make_shared<const policy::Policy<float>>(policy);
  PolicyHandle h;
  h.action_space = space;
  h.chunk_size = policy.params.arch.chunk_size;
  h.predict = [shared](const dataset::Observation& obs, std::size_t) {
    return policy::Infer(*shared, obs);
  };
  return h;
}

void EvalReport::Aggregate() {
  mean_final_distance = mean_action_mae = mean_joint_rmse = success_rate = 0.0;
  if (episodes.empty()) return;
  for (const auto& e : episodes) {
    mean_final_distance += e.final_distance;
    mean_action_mae += e.action_mae;
    mean_joint_rmse += e.joint_rmse;
    success_rate += e.success ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(episodes.size());
  mean_final_distance /= n;
  mean_action_mae /= n;
  mean_joint_rmse /= n;
  success_rate /= n;
}

namespace {

// Shared control loop; `observe(t, q)` supplies what the policy sees.
template <typename Observe>
EpisodeEval RunLoop(const PolicyHandle& policy, const JointState& start, const TaskSpec& spec,
                    const DemoConfig& cfg, std::size_t horizon, const EvalOptions& opts,
                    Observe&& observe) {
  if (policy.action_space != spec.action_space) {
    throw std::invalid_argument("policy action space does not match the task");
  }
  if (!policy.predict) throw std::invalid_argument("policy has no predictor");
  Simulator sim(cfg.model, cfg.sim, start);
  ChunkBuffer buffer(policy.chunk_size, opts.decay);
  EpisodeEval ev;
  ev.applied.reserve(horizon);
  ev.trajectory.reserve(horizon + 1);
  for (std::size_t t = 0; t < horizon; ++t) {
    const JointState q = sim.state();
    ev.trajectory.push_back(q);
    dataset::Observation obs = observe(t, q);
    obs.joints = ToFloat4(q.q);
    // Instrumentation: the policy input must be the simulated state.
    const Float4 sim_joints = ToFloat4(sim.state().q);
    if (obs.joints != sim_joints || std::abs(q.time - static_cast<double>(t) * cfg.sim.dt) > 1e-6) {
      ev.state_pure = false;
    }
    auto chunk = policy.predict(obs, t);
    if (chunk.empty()) throw std::runtime_error("policy returned an empty chunk");
    Action4 a;
    if (opts.temporal_ensemble) {
      chunk.resize(static_cast<std::size_t>(policy.chunk_size), chunk.back());
      buffer.Push(static_cast<long>(t), std::move(chunk));
      a = buffer.Ensembled(static_cast<long>(t));
    } else {
      a = chunk.front();
    }
    if (spec.action_space == ActionSpace::kValve) {
      ValveCommand v;
      v.valves = a;
      v = ClampValves(v);
      ev.applied.push_back(v.valves);
      sim.StepValves(v);
    } else {
      JointState target;
      target.q = a;
      ev.applied.push_back(a);
      sim.StepJointTarget(target);
    }
  }
  ev.trajectory.push_back(sim.state());
  ev.steps = horizon;
  if (spec.task == Task::kReach) {
    ev.final_distance = Distance(ForwardKinematics(sim.state(), cfg.geometry), spec.target);
    ev.success = ev.final_distance < opts.success_radius;
  }
  return ev;
}

}  // namespace

EpisodeEval EvaluateClosedLoop(const PolicyHandle& policy, const Episode& test,
                               const TaskSpec& spec, const DemoConfig& cfg,
                               const EvalOptions& opts) {
  test.Validate();
  if (test.action_space != spec.action_space || test.task != spec.task) {
    throw std::invalid_argument("test episode does not belong to the task");
  }
  const JointState start = FromFloat4(test.steps.front().joints);
  EpisodeEval ev = RunLoop(policy, start, spec, cfg, test.size(), opts,
                           [&test](std::size_t t, const JointState&) {
                             return dataset::ObservationAt(test, t);
                           });
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (std::size_t t = 0; t < test.size(); ++t) {
    for (std::size_t j = 0; j < 4; ++j) {
      abs_sum += std::abs(ev.applied[t][j] - test.steps[t].action[j]);
      double d = ev.trajectory[t].q[j] - test.steps[t].joints[j];
      if (j == 0) d = WrapAngle(d);
      sq_sum += d * d;
    }
  }
  const double n = 4.0 * static_cast<double>(test.size());
  ev.action_mae = abs_sum / n;
  ev.joint_rmse = std::sqrt(sq_sum / n);
  return ev;
}

EpisodeEval EvaluateFromStart(const PolicyHandle& policy, const JointState& start,
                              const TaskSpec& spec, const DemoConfig& cfg, int horizon,
                              const EvalOptions& opts) {
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  const Scene scene = MakeScene(spec, cfg.geometry, 0);
  return RunLoop(policy, start, spec, cfg, static_cast<std::size_t>(horizon), opts,
                 [&scene](std::size_t, const JointState& q) { return MakeObservation(scene, q); });
}

void ExportTraces(const EpisodeEval& eval, const Episode& episode, const ExcavatorGeometry& geom,
                  const std::filesystem::path& path) {
  if (eval.applied.size() != episode.size() || eval.trajectory.size() < episode.size()) {
    throw std::invalid_argument("trace length does not match the episode");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "t,gt_swing,gt_boom,gt_stick,gt_bucket,pred_swing,pred_boom,pred_stick,pred_bucket,"
         "q_swing,q_boom,q_stick,q_bucket,bucket_x,bucket_y,bucket_z\n";
  char buf[64];
  auto put = [&](double v, bool last = false) {
    std::snprintf(buf, sizeof(buf), last ? "%.9g\n" : "%.9g,", v);
    out << buf;
  };
  for (std::size_t t = 0; t < episode.size(); ++t) {
    put(static_cast<double>(t) * episode.dt);
    for (int j = 0; j < 4; ++j) put(episode.steps[t].action[j]);
    for (int j = 0; j < 4; ++j) put(eval.applied[t][j]);
    for (int j = 0; j < 4; ++j) put(eval.trajectory[t].q[j]);
    const Vec3 tip = ForwardKinematics(eval.trajectory[t], geom);
    put(tip.x);
    put(tip.y);
    put(tip.z, true);
  }
}

}  // namespace excavate::harness

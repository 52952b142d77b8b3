#include "excavate/sysid.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace excavate::sysid {

SingularFitError::SingularFitError(Joint joint)
    : std::runtime_error(std::string("singular fit for joint ") + JointName(joint) +
                         ": need at least two distinct valve values"),
      joint_(joint) {}

JointFit FitLine(std::span<const double> valves, std::span<const double> velocities,
                 Joint joint) {
  if (valves.size() != velocities.size()) {
    throw std::invalid_argument("valve/velocity length mismatch");
  }
  const std::size_t n = valves.size();
  if (n < 2) throw SingularFitError(joint);

  double mean_v = 0.0;
  double mean_q = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(valves[i]) || !std::isfinite(velocities[i])) {
      throw std::invalid_argument("non-finite pair for joint " + std::string(JointName(joint)));
    }
    mean_v += valves[i];
    mean_q += velocities[i];
  }
  mean_v /= static_cast<double>(n);
  mean_q /= static_cast<double>(n);

  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = valves[i] - mean_v;
    const double dy = velocities[i] - mean_q;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw SingularFitError(joint);

  JointFit fit;
  fit.n_samples = n;
  fit.gain = sxy / sxx;
  fit.intercept = mean_q - fit.gain * mean_v;

  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = velocities[i] - (fit.gain * (valves[i] - mean_v) + mean_q);
    sse += r * r;
  }
  fit.rmse = std::sqrt(sse / static_cast<double>(n));
  fit.r_squared = syy > 0.0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  return fit;
}

FitResult FitLinearModel(std::span<const ValveVelocityPair> pairs, const FitOptions& opts) {
  std::array<std::vector<double>, kNumJoints> valves;
  std::array<std::vector<double>, kNumJoints> velocities;
  for (const auto& p : pairs) {
    const auto j = static_cast<std::size_t>(p.joint);
    if (j >= kNumJoints) throw std::invalid_argument("invalid joint tag");
    if (opts.exclude_dead_band && std::abs(p.valve - kValveNeutral) < *opts.exclude_dead_band) {
      continue;
    }
    valves[j].push_back(p.valve);
    velocities[j].push_back(p.velocity);
  }
  FitResult result;
  for (Joint j : kAllJoints) {
    const auto idx = static_cast<std::size_t>(j);
    const JointFit fit = FitLine(valves[idx], velocities[idx], j);
    result.report.joints[idx] = fit;
    result.model[j] = {fit.gain, fit.intercept};
  }
  return result;
}

Joint4 NeutralPoint(const LinearValveModel& model) {
  Joint4 out{};
  for (Joint j : kAllJoints) {
    if (model[j].gain == 0.0) {
      throw std::invalid_argument(std::string("zero gain for joint ") + JointName(j));
    }
    out[static_cast<std::size_t>(j)] = -model[j].intercept / model[j].gain;
  }
  return out;
}

std::vector<ValveVelocityPair> ReadPairsCsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pairs csv: " + path.string());
  std::vector<ValveVelocityPair> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("joint", 0) == 0) continue;
    std::istringstream ss(line);
    std::string joint, valve, velocity;
    if (!std::getline(ss, joint, ',') || !std::getline(ss, valve, ',') ||
        !std::getline(ss, velocity)) {
      throw std::runtime_error("pairs csv line " + std::to_string(line_no) +
                               ": expected joint,valve,velocity");
    }
    ValveVelocityPair p;
    try {
      if (joint.size() == 1 && joint[0] >= '0' && joint[0] <= '3') {
        p.joint = static_cast<Joint>(joint[0] - '0');
      } else {
        p.joint = JointFromName(joint);
      }
      p.valve = std::stod(valve);
      p.velocity = std::stod(velocity);
    } catch (const std::exception& e) {
      throw std::runtime_error("pairs csv line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(p);
  }
  return out;
}

void WritePairsCsv(const std::filesystem::path& path, std::span<const ValveVelocityPair> pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write pairs csv: " + path.string());
  out << "joint,valve,velocity\n";
  char buf[96];
  for (const auto& p : pairs) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", JointName(p.joint), p.valve, p.velocity);
    out << buf;
  }
}

}  // namespace excavate::sysid

#pragma once

// Per-joint least-squares identification of linear valve -> velocity maps.

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "excavate/sim_core.h"

namespace excavate::sysid {

struct ValveVelocityPair {
  Joint joint = Joint::kSwing;
  double valve = 0.0;     // raw units
  double velocity = 0.0;  // rad/s
};

struct JointFit {
  double gain = 0.0;
  double intercept = 0.0;
  double rmse = 0.0;
  double r_squared = 0.0;
  std::size_t n_samples = 0;
};

struct FitReport {
  std::array<JointFit, kNumJoints> joints{};

  const JointFit& operator[](Joint j) const { return joints[static_cast<std::size_t>(j)]; }
};

class SingularFitError : public std::runtime_error {
 public:
  explicit SingularFitError(Joint joint);
  Joint joint() const { return joint_; }

 private:
  Joint joint_;
};

struct FitOptions {
  // Pairs with |valve - neutral| below this are dropped before fitting.
  std::optional<double> exclude_dead_band;
};

struct FitResult {
  LinearValveModel model;
  FitReport report;
};

// Ordinary least squares on mean-centered valve values, independently per
// joint. Every joint needs at least two pairs with distinct valve values.
FitResult FitLinearModel(std::span<const ValveVelocityPair> pairs, const FitOptions& opts = {});

// Single-joint fit; exposed for callers that hold plain arrays.
JointFit FitLine(std::span<const double> valves, std::span<const double> velocities,
                 Joint joint);

// Valve value with zero predicted velocity, -intercept / gain, per joint.
Joint4 NeutralPoint(const LinearValveModel& model);

// CSV with header `joint,valve,velocity`; joint is a name (swing, ...) or
// index 0-3.
std::vector<ValveVelocityPair> ReadPairsCsv(const std::filesystem::path& path);
void WritePairsCsv(const std::filesystem::path& path, std::span<const ValveVelocityPair> pairs);

}  // namespace excavate::sysid

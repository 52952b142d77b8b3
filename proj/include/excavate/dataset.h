#pragma once

// Demonstration episodes: on-disk layout, train/test split and chunked
// batch sampling.
//
// Episode directory layout (format_version 1):
//   manifest.txt     key = value text: task, action_space, num_steps, dt,
//                    image_shape and, per field, shape/dtype/file
//   time.f32         N        float32 little-endian
//   joints.f32       N x 4    swing, boom, stick, bucket (rad)
//   actions.f32      N x 4    valve units or joint targets (rad)
//   camera.f32       N x H x W x 3
//   elev_dig.f32     N x H x W x 3   (digging tasks only)
//   elev_dump.f32    N x H x W x 3   (digging tasks only)

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "excavate/binary_io.h"
#include "excavate/elevation.h"

namespace excavate {

enum class Task { kReach, kDigDump, kDigDumpReturn };
enum class ActionSpace { kValve, kJointPosition };

const char* TaskName(Task task);
Task TaskFromName(const std::string& name);
const char* ActionSpaceName(ActionSpace space);
ActionSpace ActionSpaceFromName(const std::string& name);
bool TaskInvolvesDigging(Task task);
// Control mode each task is demonstrated in.
ActionSpace DefaultActionSpace(Task task);

using Float4 = std::array<float, 4>;

struct Step {
  float time = 0.0f;
  Float4 joints{};
  ObservationImage camera;
  std::optional<ObservationImage> elev_dig;
  std::optional<ObservationImage> elev_dump;
  Float4 action{};
};

struct Episode {
  Task task = Task::kReach;
  ActionSpace action_space = ActionSpace::kValve;
  double dt = 0.1;
  std::vector<Step> steps;

  std::size_t size() const { return steps.size(); }
  // Throws std::invalid_argument on inconsistent shapes or fewer than 2 steps.
  void Validate() const;
};

namespace dataset {

inline constexpr int kFormatVersion = 1;

class UnsupportedVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void WriteEpisode(const Episode& ep, const std::filesystem::path& dir);
Episode ReadEpisode(const std::filesystem::path& dir);

// Writes episode_000, episode_001, ... under `dir`.
void WriteDataset(const std::vector<Episode>& episodes, const std::filesystem::path& dir);
std::vector<Episode> ReadDataset(const std::filesystem::path& dir);
std::vector<std::filesystem::path> ListEpisodeDirs(const std::filesystem::path& dir);

// Columns: t, 4 joints, 4 actions.
void ExportEpisodeCsv(const Episode& ep, const std::filesystem::path& path);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::size_t test = 0;
};

// Holds out one index uniformly at random; requires n >= 2.
SplitIndices SplitTrainTest(std::size_t n, std::uint64_t seed);

struct Split {
  std::vector<Episode> train;
  Episode test;
  std::size_t test_index = 0;
};

Split SplitTrainTest(std::vector<Episode> episodes, std::uint64_t seed);

struct Observation {
  Float4 joints{};
  ObservationImage camera;
  std::optional<ObservationImage> elev_dig;
  std::optional<ObservationImage> elev_dump;
};

Observation ObservationAt(const Episode& ep, std::size_t t);

struct Batch {
  int chunk_size = 0;
  std::vector<Observation> observations;
  std::vector<float> actions;       // B x k x 4, zero past episode end
  std::vector<std::uint8_t> mask;   // B x k, 1 = real action
  std::vector<std::pair<std::size_t, std::size_t>> origins;  // (episode, t)

  std::size_t size() const { return observations.size(); }
  float action(std::size_t b, int j, int d) const {
    return actions[(b * chunk_size + j) * 4 + d];
  }
  std::uint8_t valid(std::size_t b, int j) const { return mask[b * chunk_size + j]; }
};

// Chunk built from a given (episode, t); positions past the end are zero
// with mask 0.
void AppendSample(const Episode& ep, std::size_t episode_index, std::size_t t, int k, Batch& batch);

// Picks an episode uniformly, then a start step uniformly within it.
Batch SampleBatch(std::span<const Episode> train, int k, int batch_size, std::mt19937_64& rng);

}  // namespace dataset
}  // namespace excavate

#pragma once

// Chunked-action CVAE policy.
//
// Encoder (training only): a transformer over [CLS, joints, a_0 .. a_{k-1}]
// whose CLS output yields (mu, logvar) of the latent style variable. Padded
// chunk rows are excluded from attention.
//
// Decoder: k learned query tokens self-attend and cross-attend to a memory
// of [latent, joints, image patches...] tokens and regress a k x 4 action
// chunk. Images enter as non-overlapping patches with learned positional
// embeddings.
//
// Objective: masked L1 on normalized actions + beta * KL(q(z) || N(0, I)).

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "excavate/autodiff.h"
#include "excavate/dataset.h"
#include "excavate/kv_config.h"

namespace excavate::policy {

struct ArchConfig {
  int latent_dim = 8;
  int model_dim = 64;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int patch_size = 10;
  int chunk_size = 30;
  int action_dim = 4;
  int feedforward_dim = 0;  // 0 -> 4 * model_dim
  int image_height = 60;
  int image_width = 80;
  bool use_elevation = false;  // adds the dig and dump elevation images
  bool state_queries = true;  // adds the decoder joint embedding to every chunk query

  int ffn_dim() const { return feedforward_dim > 0 ? feedforward_dim : 4 * model_dim; }
  int num_images() const { return use_elevation ? 3 : 1; }
  int patches_per_image() const {
    return (image_height / patch_size) * (image_width / patch_size);
  }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int memory_tokens() const { return 2 + num_images() * patches_per_image(); }

  void Validate() const;
  KeyValueConfig ToConfig() const;
  static ArchConfig FromConfig(const KeyValueConfig& cfg);
};

struct ParamTensor {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  enum class Init { kFanIn, kZero, kOne, kEmbedding } init = Init::kFanIn;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Ordered tensor table for an architecture; indexes into the flat vector.
class ParamLayout {
 public:
  explicit ParamLayout(const ArchConfig& arch);
  const std::vector<ParamTensor>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }
  const ParamTensor& Find(const std::string& name) const;

 private:
  void Add(std::string name, int rows, int cols, ParamTensor::Init init);
  std::vector<ParamTensor> tensors_;
  std::size_t total_ = 0;
};

template <typename T>
struct PolicyParams {
  ArchConfig arch;
  std::vector<T> flat;

  template <typename U>
  PolicyParams<U> Cast() const {
    return {arch, std::vector<U>(flat.begin(), flat.end())};
  }
};

PolicyParams<double> InitParams(const ArchConfig& arch, std::uint64_t seed);

// Per-dimension affine maps applied to joints and actions before the
// network sees them. Identity by default.
struct Normalizer {
  std::array<double, 4> joint_mean{0, 0, 0, 0};
  std::array<double, 4> joint_std{1, 1, 1, 1};
  std::array<double, 4> action_mean{0, 0, 0, 0};
  std::array<double, 4> action_std{1, 1, 1, 1};

  static Normalizer FromEpisodes(std::span<const Episode> episodes);
  void ToConfig(KeyValueConfig& cfg) const;
  static Normalizer FromConfig(const KeyValueConfig& cfg);
};

template <typename T>
struct Policy {
  PolicyParams<T> params;
  Normalizer normalizer;
};

struct LatentSample {
  std::vector<double> mu;
  std::vector<double> logvar;
  std::vector<double> z;
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

using ActionChunk = std::vector<std::array<double, 4>>;

// Latent posterior for one (joints, chunk) pair. `chunk` holds k rows in
// raw action units; rows with mask 0 do not affect the result.
template <typename T>
LatentSample Encode(const Policy<T>& policy, const Float4& joints, const ActionChunk& chunk,
                    const std::vector<std::uint8_t>& mask);

// z = mu + exp(logvar / 2) * eps with eps ~ N(0, I).
std::vector<double> Reparameterize(const LatentSample& sample, std::mt19937_64& rng);

// Decoded k x 4 chunk in raw action units.
template <typename T>
ActionChunk PredictChunk(const Policy<T>& policy, const dataset::Observation& obs,
                         const std::vector<double>& z);

// PredictChunk with z = 0.
template <typename T>
ActionChunk Infer(const Policy<T>& policy, const dataset::Observation& obs);

struct LossResult {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  std::vector<double> grad;  // same layout as the flat parameter vector
};

// `eps` is batch x latent_dim standard normal noise for the
// reparameterization (row-major). When `want_grad` is false the returned
// gradient is empty.
template <typename T>
LossResult LossAndGrads(const Policy<T>& policy, const dataset::Batch& batch, double beta,
                        const std::vector<double>& eps, bool want_grad = true);

template <typename T>
LossResult LossAndGrads(const Policy<T>& policy, const dataset::Batch& batch, double beta,
                        std::mt19937_64& rng, bool want_grad = true);

struct TrainConfig {
  double kl_weight = 10.0;
  int steps = 30000;
  double learning_rate = 1e-5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Plateau early stopping: mean loss over consecutive windows of
  // `plateau_window` steps; stop after `plateau_patience` windows without a
  // relative improvement of `plateau_rel_tol`. A window of 0 disables it.
  int plateau_window = 0;
  int plateau_patience = 3;
  double plateau_rel_tol = 0.01;

  void Validate() const;
  KeyValueConfig ToConfig() const;
  static TrainConfig FromConfig(const KeyValueConfig& cfg);
};

struct LossRecord {
  int step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(int step);
  int step() const { return step_; }

 private:
  int step_;
};

struct TrainResult {
  Policy<float> policy;
  std::vector<LossRecord> curve;
  bool stopped_early = false;
};

using BatchSource = std::function<dataset::Batch(std::mt19937_64&)>;
using ProgressFn = std::function<void(const LossRecord&)>;

// Trains from a fresh initialization seeded by tcfg.seed.
TrainResult Train(std::span<const Episode> train_set, const ArchConfig& arch,
                  const TrainConfig& tcfg, const ProgressFn& progress = {});

// Lower-level entry: optimizes `initial` on batches drawn from `source`.
TrainResult TrainFrom(Policy<float> initial, const BatchSource& source, const TrainConfig& tcfg,
                      const ProgressFn& progress = {});

// Checkpoint directory: manifest.txt (arch, train config, normalizer, step,
// parameter count) + params.f32 (flat float32 little-endian). `meta` entries
// are stored under "meta." and handed back untouched.
void SaveCheckpoint(const Policy<float>& policy, const TrainConfig& tcfg, int step,
                    const std::filesystem::path& dir, const KeyValueConfig& meta = {});
struct Checkpoint {
  Policy<float> policy;
  TrainConfig train;
  int step = 0;
  KeyValueConfig meta;
};
Checkpoint LoadCheckpoint(const std::filesystem::path& dir);

void WriteLossCurveCsv(const std::vector<LossRecord>& curve, const std::filesystem::path& path);

}  // namespace excavate::policy

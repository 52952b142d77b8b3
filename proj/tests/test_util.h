#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "excavate/act_policy.h"
#include "excavate/dataset.h"

namespace excavate::testing {

inline ObservationImage RandomImage(int h, int w, std::mt19937_64& rng, const std::string& source) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ObservationImage img;
  img.height = h;
  img.width = w;
  img.source = source;
  img.data.resize(static_cast<std::size_t>(h) * w * 3);
  for (float& v : img.data) v = u(rng);
  return img;
}

// Random episode with smooth-ish joints and valve-like actions.
inline Episode RandomEpisode(Task task, std::size_t n, int h, int w, std::uint64_t seed,
                             bool with_elevation = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  Episode ep;
  ep.task = task;
  ep.action_space = DefaultActionSpace(task);
  ep.dt = 0.1;
  Float4 q{0.1f, 0.3f, -1.2f, -1.0f};
  for (std::size_t t = 0; t < n; ++t) {
    struct Step s;
    s.time = static_cast<float>(t) * 0.1f;
    for (int d = 0; d < 4; ++d) q[d] += 0.01f * noise(rng);
    s.joints = q;
    s.camera = RandomImage(h, w, rng, "camera");
    if (with_elevation) {
      s.elev_dig = RandomImage(h, w, rng, "elev_dig");
      s.elev_dump = RandomImage(h, w, rng, "elev_dump");
    }
    for (int d = 0; d < 4; ++d) s.action[d] = 8190.0f + 2000.0f * noise(rng);
    ep.steps.push_back(std::move(s));
  }
  return ep;
}

inline policy::ArchConfig TinyArch() {
  policy::ArchConfig a;
  a.model_dim = 16;
  a.latent_dim = 4;
  a.heads = 2;
  a.chunk_size = 5;
  a.image_height = 8;
  a.image_width = 10;
  a.patch_size = 2;
  a.feedforward_dim = 24;
  return a;
}

// |a - b| / max(|a|, |b|, 1e-6)
inline double RelativeError(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coordinates = 0;
};

// Compares analytic gradients with central differences (step h) on
// `n_coords` random coordinates of one random (params, batch, eps) draw.
inline GradCheckResult GradCheck(const policy::ArchConfig& arch, std::uint64_t seed, int n_coords,
                                 double h = 1e-5, double beta = 10.0) {
  std::vector<Episode> eps_set;
  for (int e = 0; e < 2; ++e) {
    eps_set.push_back(RandomEpisode(arch.use_elevation ? Task::kDigDump : Task::kReach, 7,
                                    arch.image_height, arch.image_width, seed * 31 + e,
                                    arch.use_elevation));
  }
  policy::Policy<double> pol{policy::InitParams(arch, seed),
                             policy::Normalizer::FromEpisodes(eps_set)};
  std::mt19937_64 rng(seed);
  dataset::Batch batch;
  dataset::AppendSample(eps_set[0], 0, 1, arch.chunk_size, batch);
  dataset::AppendSample(eps_set[1], 1, 4, arch.chunk_size, batch);  // padded tail
  dataset::AppendSample(eps_set[0], 0, 6, arch.chunk_size, batch);  // one valid row
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(batch.size() * static_cast<std::size_t>(arch.latent_dim));
  for (double& v : noise) v = normal(rng);

  const auto analytic = policy::LossAndGrads(pol, batch, beta, noise, true);
  std::uniform_int_distribution<std::size_t> pick(0, pol.params.flat.size() - 1);
  GradCheckResult out;
  for (int i = 0; i < n_coords; ++i) {
    const std::size_t c = pick(rng);
    const double orig = pol.params.flat[c];
    pol.params.flat[c] = orig + h;
    const double up = policy::LossAndGrads(pol, batch, beta, noise, false).loss;
    pol.params.flat[c] = orig - h;
    const double down = policy::LossAndGrads(pol, batch, beta, noise, false).loss;
    pol.params.flat[c] = orig;
    const double numeric = (up - down) / (2.0 * h);
    out.max_rel_error = std::max(out.max_rel_error, RelativeError(analytic.grad[c], numeric));
    ++out.coordinates;
  }
  return out;
}

}  // namespace excavate::testing


#include "excavate/temporal_ensemble.h"

#include <cmath>
#include <string>

namespace excavate {

ChunkBuffer::ChunkBuffer(int chunk_size, double decay) : chunk_size_(chunk_size), decay_(decay) {
  if (chunk_size < 1) throw std::invalid_argument("chunk size must be >= 1");
  if (!std::isfinite(decay) || decay < 0.0) throw std::invalid_argument("decay must be >= 0");
}

void ChunkBuffer::Push(long t0, std::vector<Action4> chunk) {
  if (static_cast<int>(chunk.size()) != chunk_size_) {
    throw std::invalid_argument("chunk has " + std::to_string(chunk.size()) + " rows, expected " +
                                std::to_string(chunk_size_));
  }
  if (!entries_.empty() && t0 <= entries_.back().t0) {
    throw std::invalid_argument("chunk birth steps must strictly increase");
  }
  while (!entries_.empty() && entries_.front().t0 <= t0 - chunk_size_) entries_.pop_front();
  entries_.push_back({t0, std::move(chunk)});
}

std::size_t ChunkBuffer::CoveringCount(long t) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.t0 <= t && t < e.t0 + chunk_size_) ++n;
  }
  return n;
}

Action4 ChunkBuffer::Ensembled(long t) const {
  // Accumulate offsets from the oldest covering row so that identical rows
  // reproduce that row bit-exactly.
  const Action4* reference = nullptr;
  Action4 acc{};
  double weight_sum = 0.0;
  int age = 0;
  for (const auto& e : entries_) {
    if (e.t0 > t || t >= e.t0 + chunk_size_) continue;
    const auto& row = e.rows[static_cast<std::size_t>(t - e.t0)];
    if (reference == nullptr) reference = &row;
    const double w = std::exp(-decay_ * age);
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += w * (row[d] - (*reference)[d]);
    weight_sum += w;
    ++age;
  }
  if (reference == nullptr) throw std::out_of_range("no chunk covers step " + std::to_string(t));
  Action4 out;
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = (*reference)[d] + acc[d] / weight_sum;
  return out;
}

}  // namespace excavate

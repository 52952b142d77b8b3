#pragma once

// Exponentially weighted fusion of overlapping action chunks.
//
// A chunk pushed at t0 covers steps t0 .. t0 + k - 1. The action for step t
// averages every covering chunk's row t - t0 with weights exp(-m * i), where
// i = 0 for the oldest covering chunk.

#include <array>
#include <deque>
#include <stdexcept>
#include <vector>

namespace excavate {

using Action4 = std::array<double, 4>;

class ChunkBuffer {
 public:
  explicit ChunkBuffer(int chunk_size, double decay = 0.01);

  int chunk_size() const { return chunk_size_; }
  double decay() const { return decay_; }
  std::size_t size() const { return entries_.size(); }

  // `chunk` holds k rows. t0 must strictly increase across calls; entries
  // with t0' <= t0 - k are dropped.
  void Push(long t0, std::vector<Action4> chunk);

  // Number of stored chunks covering step t.
  std::size_t CoveringCount(long t) const;

  // Throws std::out_of_range when no stored chunk covers t.
  Action4 Ensembled(long t) const;

  void Clear() { entries_.clear(); }

 private:
  struct Entry {
    long t0;
    std::vector<Action4> rows;
  };

  int chunk_size_;
  double decay_;
  std::deque<Entry> entries_;
};

}  // namespace excavate

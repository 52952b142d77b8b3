#pragma once

// Elevation grids: zone cropping, rendering to normalized 3-channel
// observations, and synthetic terrain.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace excavate {

// h x w x 3 image, row-major HWC, values in [0, 1].
struct ObservationImage {
  int height = 0;
  int width = 0;
  std::vector<float> data;
  std::string source;

  static constexpr int kChannels = 3;

  ObservationImage() = default;
  ObservationImage(int h, int w, std::string src = {})
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * kChannels, 0.0f),
        source(std::move(src)) {}

  std::size_t size() const { return data.size(); }
  float& at(int r, int c, int ch) {
    return data[(static_cast<std::size_t>(r) * width + c) * kChannels + ch];
  }
  float at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * kChannels + ch];
  }
  bool operator==(const ObservationImage& o) const {
    return height == o.height && width == o.width && data == o.data;
  }
};

namespace elevation {

// Heights in meters on a regular grid. Cell (r, c) sits at
// origin + (c * resolution, r * resolution): columns run along x, rows
// along y.
struct ElevationGrid {
  int rows = 0;
  int cols = 0;
  double resolution = 1.0;
  double origin_x = 0.0;
  double origin_y = 0.0;
  std::vector<float> heights;
  std::vector<std::uint8_t> valid;  // 1 = measured, 0 = missing

  ElevationGrid() = default;
  ElevationGrid(int r, int c, double res, double ox = 0.0, double oy = 0.0, float fill = 0.0f);

  std::size_t Index(int r, int c) const { return static_cast<std::size_t>(r) * cols + c; }
  float& At(int r, int c) { return heights[Index(r, c)]; }
  float At(int r, int c) const { return heights[Index(r, c)]; }
  bool IsValid(int r, int c) const { return valid[Index(r, c)] != 0; }
  void SetMissing(int r, int c) {
    valid[Index(r, c)] = 0;
    heights[Index(r, c)] = 0.0f;
  }

  void Validate() const;
};

enum class ZoneLabel { kDigging, kDumping };

struct CropRegion {
  int row_offset = 0;
  int col_offset = 0;
  int rows = 0;
  int cols = 0;
  ZoneLabel label = ZoneLabel::kDigging;
};

const char* ZoneLabelName(ZoneLabel label);

ElevationGrid CropZone(const ElevationGrid& grid, const CropRegion& region);

struct Normalization {
  enum class Kind { kMinMax, kFixedRange };
  Kind kind = Kind::kMinMax;
  double lo = 0.0;
  double hi = 1.0;

  static Normalization MinMax() { return {}; }
  static Normalization FixedRange(double lo, double hi) { return {Kind::kFixedRange, lo, hi}; }
};

// Channels: (normalized height, normalized height, validity mask). Missing
// cells render as 0 in every channel. A zero height span maps to 0.
ObservationImage RenderObservation(const ElevationGrid& grid, int out_h, int out_w,
                                   const Normalization& norm, std::string source = {});

struct GaussianPile {
  double center_x = 0.0;
  double center_y = 0.0;
  double amplitude = 0.0;  // m; negative digs a pit
  double sigma = 1.0;      // m
};

struct RectTrench {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  double depth = 0.0;  // m, subtracted inside the rectangle
};

struct TerrainSpec {
  int rows = 60;
  int cols = 80;
  double resolution = 0.25;
  double origin_x = 0.0;
  double origin_y = 0.0;
  double base_height = 0.0;
  std::vector<GaussianPile> piles;
  std::vector<RectTrench> trenches;
  double noise_sigma = 0.0;
};

ElevationGrid SynthTerrain(const TerrainSpec& spec, std::uint64_t seed);

// Manifest at `manifest_path` plus raw float32 heights in a sibling file
// named by the manifest's `data_file` key. Missing cells are stored as
// kMissingSentinel.
inline constexpr float kMissingSentinel = -1e30f;
void WriteGrid(const ElevationGrid& grid, const std::filesystem::path& manifest_path);
ElevationGrid ReadGrid(const std::filesystem::path& manifest_path);

}  // namespace elevation
}  // namespace excavate

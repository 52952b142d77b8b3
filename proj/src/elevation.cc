#include "excavate/elevation.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "excavate/binary_io.h"
#include "excavate/kv_config.h"

namespace excavate::elevation {

ElevationGrid::ElevationGrid(int r, int c, double res, double ox, double oy, float fill)
    : rows(r), cols(c), resolution(res), origin_x(ox), origin_y(oy) {
  if (r < 1 || c < 1) throw std::invalid_argument("grid dimensions must be >= 1");
  heights.assign(static_cast<std::size_t>(r) * c, fill);
  valid.assign(static_cast<std::size_t>(r) * c, 1);
}

void ElevationGrid::Validate() const {
  if (rows < 1 || cols < 1) throw std::invalid_argument("grid dimensions must be >= 1");
  if (!(resolution > 0.0)) throw std::invalid_argument("grid resolution must be > 0");
  const auto n = static_cast<std::size_t>(rows) * cols;
  if (heights.size() != n || valid.size() != n) {
    throw std::invalid_argument("grid storage does not match dimensions");
  }
}

const char* ZoneLabelName(ZoneLabel label) {
  return label == ZoneLabel::kDigging ? "digging" : "dumping";
}

ElevationGrid CropZone(const ElevationGrid& grid, const CropRegion& region) {
  grid.Validate();
  if (region.rows < 1 || region.cols < 1 || region.row_offset < 0 || region.col_offset < 0 ||
      region.row_offset + region.rows > grid.rows ||
      region.col_offset + region.cols > grid.cols) {
    throw std::out_of_range("crop region outside grid");
  }
  ElevationGrid out(region.rows, region.cols, grid.resolution,
                    grid.origin_x + region.col_offset * grid.resolution,
                    grid.origin_y + region.row_offset * grid.resolution);
  for (int r = 0; r < region.rows; ++r) {
    for (int c = 0; c < region.cols; ++c) {
      const auto src = grid.Index(r + region.row_offset, c + region.col_offset);
      out.heights[out.Index(r, c)] = grid.heights[src];
      out.valid[out.Index(r, c)] = grid.valid[src];
    }
  }
  return out;
}

ObservationImage RenderObservation(const ElevationGrid& grid, int out_h, int out_w,
                                   const Normalization& norm, std::string source) {
  grid.Validate();
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("output size must be >= 1");

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool any_valid = false;
  for (std::size_t i = 0; i < grid.heights.size(); ++i) {
    if (!grid.valid[i]) continue;
    any_valid = true;
    lo = std::min(lo, static_cast<double>(grid.heights[i]));
    hi = std::max(hi, static_cast<double>(grid.heights[i]));
  }
  if (!any_valid) throw std::invalid_argument("all grid cells are missing");
  if (norm.kind == Normalization::Kind::kFixedRange) {
    if (!(norm.hi > norm.lo)) throw std::invalid_argument("fixed range requires hi > lo");
    lo = norm.lo;
    hi = norm.hi;
  }
  const double span = hi - lo;

  ObservationImage img(out_h, out_w, std::move(source));
  for (int r = 0; r < out_h; ++r) {
    const int sr = static_cast<int>((2L * r + 1) * grid.rows / (2L * out_h));
    for (int c = 0; c < out_w; ++c) {
      const int sc = static_cast<int>((2L * c + 1) * grid.cols / (2L * out_w));
      if (!grid.IsValid(sr, sc)) continue;
      double v = span > 0.0 ? (grid.At(sr, sc) - lo) / span : 0.0;
      v = std::clamp(v, 0.0, 1.0);
      img.at(r, c, 0) = static_cast<float>(v);
      img.at(r, c, 1) = static_cast<float>(v);
      img.at(r, c, 2) = 1.0f;
    }
  }
  return img;
}

ElevationGrid SynthTerrain(const TerrainSpec& spec, std::uint64_t seed) {
  ElevationGrid grid(spec.rows, spec.cols, spec.resolution, spec.origin_x, spec.origin_y);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int r = 0; r < spec.rows; ++r) {
    const double y = spec.origin_y + r * spec.resolution;
    for (int c = 0; c < spec.cols; ++c) {
      const double x = spec.origin_x + c * spec.resolution;
      double h = spec.base_height;
      for (const auto& p : spec.piles) {
        const double d2 = (x - p.center_x) * (x - p.center_x) + (y - p.center_y) * (y - p.center_y);
        h += p.amplitude * std::exp(-d2 / (2.0 * p.sigma * p.sigma));
      }
      for (const auto& t : spec.trenches) {
        if (x >= t.x_min && x <= t.x_max && y >= t.y_min && y <= t.y_max) h -= t.depth;
      }
      if (spec.noise_sigma > 0.0) h += spec.noise_sigma * noise(rng);
      grid.At(r, c) = static_cast<float>(h);
    }
  }
  return grid;
}

void WriteGrid(const ElevationGrid& grid, const std::filesystem::path& manifest_path) {
  grid.Validate();
  const std::string data_name = manifest_path.filename().string() + ".f32";
  KeyValueConfig manifest;
  manifest.Set("format_version", "1");
  manifest.Set("rows", std::to_string(grid.rows));
  manifest.Set("cols", std::to_string(grid.cols));
  manifest.Set("resolution", grid.resolution);  // m/cell
  manifest.Set("origin", std::vector<double>{grid.origin_x, grid.origin_y});  // m
  manifest.Set("dtype", "float32_le");
  manifest.Set("layout", "row_major");
  manifest.Set("missing_sentinel", static_cast<double>(kMissingSentinel));
  manifest.Set("data_file", data_name);
  std::vector<float> raw(grid.heights);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!grid.valid[i]) raw[i] = kMissingSentinel;
  }
  WriteFloat32File(manifest_path.parent_path() / data_name, raw);
  manifest.Save(manifest_path);
}

ElevationGrid ReadGrid(const std::filesystem::path& manifest_path) {
  if (!std::filesystem::exists(manifest_path)) {
    throw MissingFileError("missing grid manifest: " + manifest_path.string());
  }
  const auto manifest = KeyValueConfig::Load(manifest_path);
  if (manifest.GetInt("format_version") != 1) {
    throw std::runtime_error("unsupported grid format_version");
  }
  const auto origin = manifest.GetDoubles("origin");
  if (origin.size() != 2) throw ConfigError("grid origin must have two values");
  ElevationGrid grid(static_cast<int>(manifest.GetInt("rows")),
                     static_cast<int>(manifest.GetInt("cols")), manifest.GetDouble("resolution"),
                     origin[0], origin[1]);
  grid.Validate();
  const float sentinel = static_cast<float>(manifest.GetDouble("missing_sentinel", kMissingSentinel));
  grid.heights = ReadFloat32File(manifest_path.parent_path() / manifest.GetString("data_file"),
                                 grid.heights.size());
  for (std::size_t i = 0; i < grid.heights.size(); ++i) {
    if (grid.heights[i] == sentinel || !std::isfinite(grid.heights[i])) {
      grid.valid[i] = 0;
      grid.heights[i] = 0.0f;
    }
  }
  return grid;
}

}  // namespace excavate::elevation

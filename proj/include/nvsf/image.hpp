#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nvsf {

// Row-major float raster; matches the on-disk payload precision so dataset
// round-trips are bit-exact.
struct Raster {
  int rows = 0;
  int cols = 0;
  int channels = 1;
  std::vector<float> data;

  Raster() = default;
  Raster(int r, int c, int ch, float fill = 0.0f)
      : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, fill) {}

  float& at(int r, int c, int ch = 0) {
    return data[(static_cast<size_t>(r) * cols + c) * channels + ch];
  }
  float at(int r, int c, int ch = 0) const {
    return data[(static_cast<size_t>(r) * cols + c) * channels + ch];
  }
  size_t pixel_count() const { return static_cast<size_t>(rows) * cols; }
  bool operator==(const Raster& o) const = default;
};

// LiDAR pano raster: channel 0 = range, 1 = intensity, 2 = hit mask (0/1).
// Misses keep range and intensity at the 0 sentinel.
struct PanoImage {
  Raster raster;

  PanoImage() = default;
  PanoImage(int rows, int cols) : raster(rows, cols, 3) {}

  int rows() const { return raster.rows; }
  int cols() const { return raster.cols; }
  double depth(int i, int j) const { return raster.at(i, j, 0); }
  double intensity(int i, int j) const { return raster.at(i, j, 1); }
  bool hit(int i, int j) const { return raster.at(i, j, 2) != 0.0f; }
  void set(int i, int j, double depth, double intensity, bool hit) {
    raster.at(i, j, 0) = static_cast<float>(depth);
    raster.at(i, j, 1) = static_cast<float>(intensity);
    raster.at(i, j, 2) = hit ? 1.0f : 0.0f;
  }
  bool operator==(const PanoImage& o) const = default;
};

// "NVSFIMG1" magic, u32 rows, u32 cols, u32 channels, then row-major
// little-endian f32 payload.
void write_raster(const std::string& path, const Raster& raster);
Raster read_raster(const std::string& path);

}  // namespace nvsf

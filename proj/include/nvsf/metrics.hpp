#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nvsf/geometry.hpp"
#include "nvsf/image.hpp"
#include "nvsf/renderer.hpp"
#include "nvsf/scene.hpp"

namespace nvsf {

struct PcdMetrics {
  double cd = 0.0;
  double f_score = 0.0;
};

struct ImageMetrics {
  double rmse = 0.0;
  double psnr = 0.0;   // 20 log10(range/rmse), capped at 100
  double ssim = 0.0;   // NaN when no valid 11x11 window exists
};

struct RaydropMetrics {
  double rmse = 0.0;      // on drop probabilities
  double accuracy = 0.0;  // thresholded at strictly > 0.5, "drop" positive
  double f_score = 0.0;   // 1 when no positives exist anywhere
};

inline constexpr double kDefaultFScoreThreshold = 0.1;  // world units

// Chamfer distance (Eq. 4 form) plus F-score at the given Euclidean distance
// threshold. Throws on empty clouds; callers report those as missing.
PcdMetrics pcd_metrics(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double f_threshold);

// RMSE / PSNR / SSIM over the valid mask. SSIM uses an 11x11 Gaussian window
// (sigma 1.5) with the standard stabilizers, averaged over windows whose
// pixels are all valid. Throws when the valid mask is empty.
ImageMetrics image_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<uint8_t>& valid, int rows, int cols, double data_range);

RaydropMetrics raydrop_metrics(const std::vector<double>& pred_drop_prob,
                               const std::vector<uint8_t>& gt_drop);

struct FrameMetrics {
  int frame = -1;
  std::optional<PcdMetrics> pcd;
  std::optional<ImageMetrics> range;
  std::optional<ImageMetrics> intensity;
  std::optional<RaydropMetrics> raydrop;
  std::optional<ImageMetrics> camera;
};

struct MetricReport {
  std::string scope = "all";  // "all" | "foreground"
  std::vector<FrameMetrics> frames;
  FrameMetrics average;

  std::string to_json() const;
  void print_table(std::ostream& out) const;
};

struct FramePrediction {
  int frame = -1;
  FrameRender lidar;
  std::optional<Raster> camera;
};

// Runs the full metric suite over rendered frames. Foreground scope restricts
// pixels (and the point clouds' source pixels) to the simulator's dynamic-hit
// masks; empty foregrounds are reported as missing.
MetricReport evaluate_predictions(const SceneDataset& ds, const std::vector<FramePrediction>& preds,
                                  bool foreground, double f_threshold = kDefaultFScoreThreshold);

}  // namespace nvsf

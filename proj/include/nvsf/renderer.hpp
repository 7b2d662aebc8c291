#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nvsf/fields.hpp"
#include "nvsf/geometry.hpp"
#include "nvsf/image.hpp"
#include "nvsf/rng.hpp"
#include "nvsf/scene.hpp"
#include "nvsf/tensor.hpp"

namespace nvsf {

struct RenderConfig {
  int samples_per_ray = 192;
  int chunk_rays = 4096;
  double near_eps = 1e-4;  // rays start inside the cube; keep t strictly positive
};

// A batch of rays in normalized coordinates, all from one frame.
struct RayBatch {
  std::vector<double> origins;  // 3 per ray
  std::vector<double> dirs;     // 3 per ray, unit
  std::vector<int> pixels;      // flat source pixel index
  Modality modality = Modality::Lidar;
  double t = 0.0;
  int64_t count() const { return static_cast<int64_t>(pixels.size()); }
};

// Uniform bin centers over [near, far]; stratified mode jitters each sample
// within its bin. The spacing (including the far cap) is the bin width.
std::vector<double> sample_ray(double near, double far, int n, bool stratified, Rng& rng);

struct SampleSet {
  int64_t rays = 0;
  int64_t samples = 0;
  std::vector<double> depths;     // rays*samples, ascending per ray
  std::vector<double> deltas;     // rays*samples
  std::vector<double> positions;  // xyz per sample
  std::vector<double> dirs;       // xyz per sample (ray direction repeated)
};

// Sample every ray of the batch inside the unit cube. Rays that miss the cube
// are rejected upstream by construction (origins sit inside the cube).
SampleSet sample_rays(const RayBatch& batch, int n, bool stratified, Rng& rng, double near_eps = 1e-4);

// Eq.-style compositing: T_i = exp(-sum_{j<i} sigma_j delta_j),
// w_i = T_i (1 - exp(-sigma_i delta_i)).
struct CompositeOut {
  Tensor weights;  // [R,N]
  Tensor opacity;  // [R,1], sum of weights
  Tensor depth;    // [R,1], sum w_i t_i
};

Tensor composite_weights(Tape& tape, Tensor sigma_flat, const SampleSet& set);
Tensor composite_value(Tape& tape, Tensor weights, Tensor values_flat, const SampleSet& set);
CompositeOut composite_depth(Tape& tape, Tensor sigma_flat, const SampleSet& set);

// Full-frame inference. Depth is reported in world units; the kept mask uses
// the strict hit-probability rule P > 0.5.
struct FrameRender {
  PanoImage pano;     // world-scale depth/intensity, hit = kept
  Raster hit_prob;    // composited hit probability per pixel
  Raster opacity;     // accumulated weight per pixel
};

FrameRender render_lidar_frame(NvsfField& field, const LidarSpec& spec, const Pose& pose,
                               const NormalizationTransform& norm, const TimeContext& tc, bool use_flow,
                               const RenderConfig& cfg);
Raster render_camera_frame(NvsfField& field, const CameraSpec& spec, const Pose& pose,
                           const NormalizationTransform& norm, const TimeContext& tc, bool use_flow,
                           const RenderConfig& cfg);

// Per-pixel ray batches plus aligned ground truth (depths normalized).
struct PixelRays {
  RayBatch batch;
  std::vector<double> gt_depth;      // normalized units, 0 sentinel on miss
  std::vector<double> gt_intensity;  // 0 sentinel on miss
  std::vector<double> gt_hit;        // 1 = hit, 0 = dropped
  std::vector<double> gt_rgb;        // 3 per ray, camera only
};

PixelRays gather_pixels(const SceneDataset& ds, const NormalizationTransform& norm, int frame,
                        Modality modality, const std::vector<int>& pixels);

NormalizationTransform fit_dataset_normalization(const SceneDataset& ds, double margin = 0.05);
TimeContext frame_time_context(const SceneDataset& ds, int frame);

// ASCII XYZI export ("x y z intensity" per kept pixel), world coordinates.
void export_xyzi(const PanoImage& pano, const LidarSpec& spec, const Pose& pose,
                 const std::string& path);

// Kept/hit pixels of a pano unprojected to world-frame points.
std::vector<Vec3> pano_to_points(const PanoImage& pano, const LidarSpec& spec, const Pose& pose,
                                 const Raster* mask = nullptr);

}  // namespace nvsf

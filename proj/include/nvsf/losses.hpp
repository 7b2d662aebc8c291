#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nvsf/fields.hpp"
#include "nvsf/geometry.hpp"
#include "nvsf/rng.hpp"
#include "nvsf/tensor.hpp"

namespace nvsf {

// Eq.-10 weights (flow, depth, intensity, raydrop, grad, rgb).
struct LossWeights {
  double flow = 1.0;
  double depth = 1.0;
  double intensity = 0.1;
  double raydrop = 0.01;
  double grad = 0.01;
  double rgb = 1.0;
};

// First-order gradient D(i,j) - D(i,j+1); output is rows x (cols-1).
std::vector<double> single_gradient_x(const std::vector<double>& depth, int rows, int cols);
// Row direction analogue D(i,j) - D(i+1,j); output is (rows-1) x cols.
std::vector<double> single_gradient_y(const std::vector<double>& depth, int rows, int cols);

// Mask 1 where | |grad(i,j)| - |grad(i,j+1)| | < tau; output rows x (cols-2).
struct GradientMask {
  int rows = 0;
  int cols = 0;  // mask columns (input cols - 2)
  double tau = 0.0;
  std::vector<uint8_t> mask;
};
GradientMask double_gradient_mask(const std::vector<double>& depth, int rows, int cols, double tau);
// Row-direction analogue; output (rows-2) x cols.
GradientMask double_gradient_mask_y(const std::vector<double>& depth, int rows, int cols, double tau);

inline constexpr double kDefaultGradientTau = 0.05;  // normalized depth units

// Axis-aligned pano windows used by the patch gradient loss.
struct Patch {
  int row0 = 0;
  int col0 = 0;
  int height = 8;
  int width = 8;
};

// Eq.-1 patch gradient loss. pred_depths holds the predicted depths of all
// patch pixels (patch-major, row-major inside the patch); gt_depths is the
// aligned ground truth. Masks come from the ground truth via Eq. 2 in both
// directions, and the sum is normalized by the total masked element count.
Tensor gradient_loss(Tape& tape, Tensor pred_depths, const std::vector<double>& gt_depths,
                     const std::vector<Patch>& patches, double tau);

// Flat pixel indices of a patch, row-major; rejects windows that leave the pano.
std::vector<int> patch_pixel_indices(int rows, int cols, const Patch& patch);

// Per-pixel reconstruction-loss map with the multinomial sampler.
struct SamplingState {
  int rows = 0;
  int cols = 0;
  double ema = 0.7;          // blend factor toward the previous value
  double jitter_eps = 1.0;   // integer jitter amplitude
  std::vector<double> loss_map;

  SamplingState() = default;
  SamplingState(int r, int c) : rows(r), cols(c), loss_map(static_cast<size_t>(r) * c, 1.0) {}
  // Exponentially average fresh per-ray losses into the map.
  void update(const std::vector<int>& pixels, const std::vector<double>& losses);
};

inline constexpr double kSamplingFloor = 1e-6;  // every pixel keeps positive likelihood

// Draw n pixel indices i.i.d. from p_k ~ loss_k + floor, then jitter each by
// round(eps) * {-1,0,1} per axis, clamped to the image bounds.
std::vector<int> heuristic_sample(const SamplingState& state, int n, double jitter_eps, Rng& rng);
std::vector<int> uniform_sample(int rows, int cols, int n, Rng& rng);

// Symmetric chamfer distance (mean of squared nearest-neighbor distances in
// both directions, summed). Exact brute force.
double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b);
// Index of the nearest point in `to` for every point of `from`.
std::vector<int64_t> nearest_indices(const std::vector<Vec3>& from, const std::vector<Vec3>& to);
std::vector<int64_t> nearest_indices(std::span<const double> from_xyz, const std::vector<Vec3>& to);

// Eq.-5 scene-flow loss at frame time t: chamfer between the flow-warped
// current points and each adjacent frame. Correspondences are fixed per
// evaluation; gradients flow through the squared distances into the flow MLP.
Tensor flow_loss(Tape& tape, NvsfField& field, const NvsfField::Bound& bound,
                 std::span<const double> points, double t, const std::vector<Vec3>* prev_points,
                 const std::vector<Vec3>* next_points);

// Eqs. 6-9, per-ray means. Depth (L1) and intensity (squared) are masked to
// ground-truth hits; raydrop compares the composited hit probability against
// the hit mask on every ray; rgb is the per-ray squared color error.
Tensor depth_loss(Tape& tape, Tensor pred, const std::vector<double>& gt,
                  const std::vector<double>& hit_mask);
Tensor intensity_loss(Tape& tape, Tensor pred, const std::vector<double>& gt,
                      const std::vector<double>& hit_mask);
Tensor raydrop_loss(Tape& tape, Tensor pred_hit_prob, const std::vector<double>& hit_mask);
Tensor rgb_loss(Tape& tape, Tensor pred, const std::vector<double>& gt);

struct LossParts {
  std::optional<Tensor> flow, depth, intensity, raydrop, grad, rgb;
};

// Weighted Eq.-10 total. A NaN in any present part aborts with the part name.
Tensor total_loss(Tape& tape, const LossParts& parts, const LossWeights& weights);

}  // namespace nvsf

#include "nvsf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nvsf {

std::vector<double> single_gradient_x(const std::vector<double>& depth, int rows, int cols) {
  if (cols < 2) throw std::invalid_argument("single_gradient_x: need at least 2 columns");
  std::vector<double> out(static_cast<size_t>(rows) * (cols - 1));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j + 1 < cols; ++j)
      out[static_cast<size_t>(i) * (cols - 1) + j] =
          depth[static_cast<size_t>(i) * cols + j] - depth[static_cast<size_t>(i) * cols + j + 1];
  return out;
}

std::vector<double> single_gradient_y(const std::vector<double>& depth, int rows, int cols) {
  if (rows < 2) throw std::invalid_argument("single_gradient_y: need at least 2 rows");
  std::vector<double> out(static_cast<size_t>(rows - 1) * cols);
  for (int i = 0; i + 1 < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<size_t>(i) * cols + j] =
          depth[static_cast<size_t>(i) * cols + j] - depth[static_cast<size_t>(i + 1) * cols + j];
  return out;
}

GradientMask double_gradient_mask(const std::vector<double>& depth, int rows, int cols, double tau) {
  if (cols < 3) throw std::invalid_argument("double_gradient_mask: need at least 3 columns");
  const auto grad = single_gradient_x(depth, rows, cols);
  GradientMask m;
  m.rows = rows;
  m.cols = cols - 2;
  m.tau = tau;
  m.mask.resize(static_cast<size_t>(rows) * (cols - 2));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j + 2 < cols; ++j) {
      const double a = std::abs(grad[static_cast<size_t>(i) * (cols - 1) + j]);
      const double b = std::abs(grad[static_cast<size_t>(i) * (cols - 1) + j + 1]);
      m.mask[static_cast<size_t>(i) * (cols - 2) + j] = std::abs(a - b) < tau ? 1 : 0;
    }
  return m;
}

GradientMask double_gradient_mask_y(const std::vector<double>& depth, int rows, int cols, double tau) {
  if (rows < 3) throw std::invalid_argument("double_gradient_mask_y: need at least 3 rows");
  const auto grad = single_gradient_y(depth, rows, cols);
  GradientMask m;
  m.rows = rows - 2;
  m.cols = cols;
  m.tau = tau;
  m.mask.resize(static_cast<size_t>(rows - 2) * cols);
  for (int i = 0; i + 2 < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double a = std::abs(grad[static_cast<size_t>(i) * cols + j]);
      const double b = std::abs(grad[static_cast<size_t>(i + 1) * cols + j]);
      m.mask[static_cast<size_t>(i) * cols + j] = std::abs(a - b) < tau ? 1 : 0;
    }
  return m;
}

Tensor gradient_loss(Tape& tape, Tensor pred_depths, const std::vector<double>& gt_depths,
                     const std::vector<Patch>& patches, double tau) {
  int64_t offset = 0;
  Tensor acc = tape.constant_scalar(0.0);
  int64_t mask_count = 0;
  for (const Patch& p : patches) {
    const int h = p.height, w = p.width;
    const int64_t count = int64_t(h) * w;
    if (offset + count > pred_depths.rows())
      throw std::invalid_argument("gradient_loss: patch pixels exceed prediction rows");
    const std::vector<double> gt(gt_depths.begin() + offset, gt_depths.begin() + offset + count);
    Tensor block = tape.reshape(tape.slice(pred_depths, 0, offset, count), {h, w});
    if (w >= 3) {
      const GradientMask mx = double_gradient_mask(gt, h, w, tau);
      const auto gx_gt = single_gradient_x(gt, h, w);
      // predicted x-gradients, first w-2 columns to align with the mask
      Tensor gx = tape.sub(tape.slice(block, 1, 0, w - 2), tape.slice(block, 1, 1, w - 2));
      std::vector<double> gt_vals(static_cast<size_t>(h) * (w - 2));
      std::vector<double> mask_vals(gt_vals.size());
      for (int i = 0; i < h; ++i)
        for (int j = 0; j + 2 < w; ++j) {
          gt_vals[static_cast<size_t>(i) * (w - 2) + j] = gx_gt[static_cast<size_t>(i) * (w - 1) + j];
          mask_vals[static_cast<size_t>(i) * (w - 2) + j] = mx.mask[static_cast<size_t>(i) * (w - 2) + j];
          mask_count += mx.mask[static_cast<size_t>(i) * (w - 2) + j];
        }
      Tensor diff = tape.sub(gx, tape.constant({h, w - 2}, std::move(gt_vals)));
      acc = tape.add(acc, tape.sum(tape.abs(tape.mul(diff, tape.constant({h, w - 2}, std::move(mask_vals))))));
    }
    if (h >= 3) {
      const GradientMask my = double_gradient_mask_y(gt, h, w, tau);
      const auto gy_gt = single_gradient_y(gt, h, w);
      Tensor gy = tape.sub(tape.slice(block, 0, 0, h - 2), tape.slice(block, 0, 1, h - 2));
      std::vector<double> gt_vals(static_cast<size_t>(h - 2) * w);
      std::vector<double> mask_vals(gt_vals.size());
      for (int i = 0; i + 2 < h; ++i)
        for (int j = 0; j < w; ++j) {
          gt_vals[static_cast<size_t>(i) * w + j] = gy_gt[static_cast<size_t>(i) * w + j];
          mask_vals[static_cast<size_t>(i) * w + j] = my.mask[static_cast<size_t>(i) * w + j];
          mask_count += my.mask[static_cast<size_t>(i) * w + j];
        }
      Tensor diff = tape.sub(gy, tape.constant({h - 2, w}, std::move(gt_vals)));
      acc = tape.add(acc, tape.sum(tape.abs(tape.mul(diff, tape.constant({h - 2, w}, std::move(mask_vals))))));
    }
    offset += count;
  }
  if (mask_count == 0) return tape.constant_scalar(0.0);
  return tape.scale(acc, 1.0 / static_cast<double>(mask_count));
}

std::vector<int> patch_pixel_indices(int rows, int cols, const Patch& patch) {
  if (patch.row0 < 0 || patch.col0 < 0 || patch.row0 + patch.height > rows ||
      patch.col0 + patch.width > cols)
    throw std::out_of_range("patch [" + std::to_string(patch.row0) + "," + std::to_string(patch.col0) +
                            " " + std::to_string(patch.height) + "x" + std::to_string(patch.width) +
                            "] outside " + std::to_string(rows) + "x" + std::to_string(cols) + " pano");
  std::vector<int> out;
  out.reserve(static_cast<size_t>(patch.height) * patch.width);
  for (int i = 0; i < patch.height; ++i)
    for (int j = 0; j < patch.width; ++j) out.push_back((patch.row0 + i) * cols + (patch.col0 + j));
  return out;
}

void SamplingState::update(const std::vector<int>& pixels, const std::vector<double>& losses) {
  for (size_t k = 0; k < pixels.size(); ++k) {
    double& slot = loss_map[static_cast<size_t>(pixels[k])];
    slot = ema * slot + (1.0 - ema) * losses[k];
  }
}

std::vector<int> heuristic_sample(const SamplingState& state, int n, double jitter_eps, Rng& rng) {
  if (n < 1) throw std::invalid_argument("heuristic_sample: n must be >= 1");
  const size_t count = state.loss_map.size();
  std::vector<double> cdf(count);
  double acc = 0.0;
  for (size_t k = 0; k < count; ++k) {
    acc += state.loss_map[k] + kSamplingFloor;
    cdf[k] = acc;
  }
  const int amp = static_cast<int>(std::llround(jitter_eps));
  std::vector<int> out(static_cast<size_t>(n));
  for (int s = 0; s < n; ++s) {
    const double u = rng.uniform() * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    int flat = static_cast<int>(std::min<size_t>(static_cast<size_t>(it - cdf.begin()), count - 1));
    if (amp > 0) {
      int i = flat / state.cols, j = flat % state.cols;
      i = std::clamp(i + amp * (static_cast<int>(rng.below(3)) - 1), 0, state.rows - 1);
      j = std::clamp(j + amp * (static_cast<int>(rng.below(3)) - 1), 0, state.cols - 1);
      flat = i * state.cols + j;
    }
    out[static_cast<size_t>(s)] = flat;
  }
  return out;
}

std::vector<int> uniform_sample(int rows, int cols, int n, Rng& rng) {
  std::vector<int> out(static_cast<size_t>(n));
  const uint64_t total = static_cast<uint64_t>(rows) * static_cast<uint64_t>(cols);
  for (int s = 0; s < n; ++s) out[static_cast<size_t>(s)] = static_cast<int>(rng.below(total));
  return out;
}

std::vector<int64_t> nearest_indices(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  std::vector<int64_t> out(from.size());
#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (from.size() >= 64)
  for (int64_t k = 0; k < static_cast<int64_t>(from.size()); ++k) {
    double best = 1e300;
    int64_t best_i = 0;
    for (size_t i = 0; i < to.size(); ++i) {
      const Vec3 d = from[static_cast<size_t>(k)] - to[i];
      const double dist = d.dot(d);
      if (dist < best) {
        best = dist;
        best_i = static_cast<int64_t>(i);
      }
    }
    out[static_cast<size_t>(k)] = best_i;
  }
  return out;
}

std::vector<int64_t> nearest_indices(std::span<const double> from_xyz, const std::vector<Vec3>& to) {
  std::vector<Vec3> from(from_xyz.size() / 3);
  for (size_t k = 0; k < from.size(); ++k)
    from[k] = {from_xyz[3 * k], from_xyz[3 * k + 1], from_xyz[3 * k + 2]};
  return nearest_indices(from, to);
}

double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: empty point set");
  auto one_way = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    const auto nn = nearest_indices(from, to);
    double acc = 0.0;
    for (size_t k = 0; k < from.size(); ++k) {
      const Vec3 d = from[k] - to[static_cast<size_t>(nn[k])];
      acc += d.dot(d);
    }
    return acc / static_cast<double>(from.size());
  };
  return one_way(a, b) + one_way(b, a);
}

namespace {

// Chamfer between a tape tensor [M,3] and a fixed point set, correspondences
// frozen at the current values.
Tensor chamfer_term(Tape& tape, Tensor pred, const std::vector<Vec3>& target) {
  const int64_t M = pred.rows();
  // direction 1: each predicted point to its nearest target
  const auto nn_fwd = nearest_indices(pred.values(), target);
  std::vector<double> matched(static_cast<size_t>(3 * M));
  for (int64_t k = 0; k < M; ++k) {
    const Vec3& q = target[static_cast<size_t>(nn_fwd[static_cast<size_t>(k)])];
    matched[static_cast<size_t>(3 * k)] = q.x;
    matched[static_cast<size_t>(3 * k + 1)] = q.y;
    matched[static_cast<size_t>(3 * k + 2)] = q.z;
  }
  Tensor d1 = tape.sub(pred, tape.constant({M, 3}, std::move(matched)));
  Tensor term1 = tape.scale(tape.mean(tape.square(d1)), 3.0);  // per-point mean of squared norms

  // direction 2: each target point to its nearest predicted point
  std::vector<Vec3> pred_pts(static_cast<size_t>(M));
  const auto pv = pred.values();
  for (int64_t k = 0; k < M; ++k)
    pred_pts[static_cast<size_t>(k)] = {pv[static_cast<size_t>(3 * k)], pv[static_cast<size_t>(3 * k + 1)],
                                        pv[static_cast<size_t>(3 * k + 2)]};
  const auto nn_bwd = nearest_indices(target, pred_pts);
  Tensor gathered = tape.gather(pred, std::vector<int64_t>(nn_bwd.begin(), nn_bwd.end()));
  std::vector<double> tgt(target.size() * 3);
  for (size_t k = 0; k < target.size(); ++k) {
    tgt[3 * k] = target[k].x;
    tgt[3 * k + 1] = target[k].y;
    tgt[3 * k + 2] = target[k].z;
  }
  Tensor d2 = tape.sub(gathered, tape.constant({static_cast<int64_t>(target.size()), 3}, std::move(tgt)));
  Tensor term2 = tape.scale(tape.mean(tape.square(d2)), 3.0);
  return tape.add(term1, term2);
}

}  // namespace

Tensor flow_loss(Tape& tape, NvsfField& field, const NvsfField::Bound& bound,
                 std::span<const double> points, double t, const std::vector<Vec3>* prev_points,
                 const std::vector<Vec3>* next_points) {
  const bool has_prev = prev_points && !prev_points->empty();
  const bool has_next = next_points && !next_points->empty();
  if (!has_prev && !has_next) throw std::invalid_argument("flow_loss: both adjacent frames missing");
  Tensor acc = tape.constant_scalar(0.0);
  if (has_next) {
    Tensor warped = field.warp(tape, bound, points, t, FlowDirection::Forward);
    acc = tape.add(acc, chamfer_term(tape, warped, *next_points));
  }
  if (has_prev) {
    Tensor warped = field.warp(tape, bound, points, t, FlowDirection::Backward);
    acc = tape.add(acc, chamfer_term(tape, warped, *prev_points));
  }
  return acc;
}

namespace {

Tensor masked_mean(Tape& tape, Tensor per_ray, const std::vector<double>& mask) {
  double count = 0.0;
  for (double m : mask) count += m;
  if (count == 0.0) return tape.constant_scalar(0.0);
  Tensor m = tape.constant({static_cast<int64_t>(mask.size()), 1}, mask);
  return tape.scale(tape.sum(tape.mul(per_ray, m)), 1.0 / count);
}

}  // namespace

Tensor depth_loss(Tape& tape, Tensor pred, const std::vector<double>& gt,
                  const std::vector<double>& hit_mask) {
  Tensor diff = tape.abs(tape.sub(pred, tape.constant({static_cast<int64_t>(gt.size()), 1}, gt)));
  return masked_mean(tape, diff, hit_mask);
}

Tensor intensity_loss(Tape& tape, Tensor pred, const std::vector<double>& gt,
                      const std::vector<double>& hit_mask) {
  Tensor diff = tape.square(tape.sub(pred, tape.constant({static_cast<int64_t>(gt.size()), 1}, gt)));
  return masked_mean(tape, diff, hit_mask);
}

Tensor raydrop_loss(Tape& tape, Tensor pred_hit_prob, const std::vector<double>& hit_mask) {
  Tensor diff = tape.square(
      tape.sub(pred_hit_prob, tape.constant({static_cast<int64_t>(hit_mask.size()), 1}, hit_mask)));
  return tape.mean(diff);
}

Tensor rgb_loss(Tape& tape, Tensor pred, const std::vector<double>& gt) {
  const int64_t rays = pred.rows();
  Tensor diff = tape.square(tape.sub(pred, tape.constant({rays, 3}, gt)));
  return tape.scale(tape.mean(diff), 3.0);  // per-ray squared norm, averaged over rays
}

Tensor total_loss(Tape& tape, const LossParts& parts, const LossWeights& weights) {
  struct Item {
    const char* name;
    const std::optional<Tensor>* part;
    double weight;
  };
  const Item items[] = {{"flow", &parts.flow, weights.flow},
                        {"depth", &parts.depth, weights.depth},
                        {"intensity", &parts.intensity, weights.intensity},
                        {"raydrop", &parts.raydrop, weights.raydrop},
                        {"grad", &parts.grad, weights.grad},
                        {"rgb", &parts.rgb, weights.rgb}};
  Tensor acc = tape.constant_scalar(0.0);
  for (const Item& item : items) {
    if (!item.part->has_value()) continue;
    const double v = (*item.part)->value();
    if (std::isnan(v))
      throw std::runtime_error(std::string("total_loss: NaN in ") + item.name + " part");
    acc = tape.add(acc, tape.scale(**item.part, item.weight));
  }
  return acc;
}

}  // namespace nvsf

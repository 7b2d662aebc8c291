#include "nvsf/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace nvsf {

std::vector<double> sample_ray(double near, double far, int n, bool stratified, Rng& rng) {
  if (!(near > 0.0) || !(far > near)) throw std::invalid_argument("sample_ray: need 0 < near < far");
  if (n < 2) throw std::invalid_argument("sample_ray: need at least 2 samples");
  std::vector<double> out(static_cast<size_t>(n));
  const double bin = (far - near) / n;
  for (int k = 0; k < n; ++k) {
    const double u = stratified ? rng.uniform() : 0.5;
    out[static_cast<size_t>(k)] = near + (k + u) * bin;
  }
  return out;
}

SampleSet sample_rays(const RayBatch& batch, int n, bool stratified, Rng& rng, double near_eps) {
  const int64_t R = batch.count();
  if (R == 0) throw std::invalid_argument("sample_rays: empty batch");
  SampleSet set;
  set.rays = R;
  set.samples = n;
  set.depths.resize(static_cast<size_t>(R * n));
  set.deltas.resize(static_cast<size_t>(R * n));
  set.positions.resize(static_cast<size_t>(3 * R * n));
  set.dirs.resize(static_cast<size_t>(3 * R * n));
  const Vec3 lo{-0.5, -0.5, -0.5}, hi{0.5, 0.5, 0.5};
  for (int64_t r = 0; r < R; ++r) {
    const Ray ray{{batch.origins[3 * r], batch.origins[3 * r + 1], batch.origins[3 * r + 2]},
                  {batch.dirs[3 * r], batch.dirs[3 * r + 1], batch.dirs[3 * r + 2]}};
    double tn, tf;
    if (!ray_aabb(ray, lo, hi, tn, tf))
      throw std::invalid_argument("sample_rays: ray misses the unit cube (origin outside?)");
    const double near = std::max(tn, near_eps);
    const double far = std::max(tf, near + 1e-6);
    // RNG order is per ray then per sample, independent of threading
    const auto depths = sample_ray(near, far, n, stratified, rng);
    const double bin = (far - near) / n;
    for (int k = 0; k < n; ++k) {
      const int64_t idx = r * n + k;
      set.depths[static_cast<size_t>(idx)] = depths[static_cast<size_t>(k)];
      set.deltas[static_cast<size_t>(idx)] = bin;
      for (int a = 0; a < 3; ++a)
        set.positions[static_cast<size_t>(3 * idx + a)] =
            ray.origin[a] + depths[static_cast<size_t>(k)] * ray.dir[a];
      set.dirs[static_cast<size_t>(3 * idx)] = ray.dir.x;
      set.dirs[static_cast<size_t>(3 * idx + 1)] = ray.dir.y;
      set.dirs[static_cast<size_t>(3 * idx + 2)] = ray.dir.z;
    }
  }
  return set;
}

namespace {

// Strict lower-triangular ones; matmul by it computes an exclusive prefix sum
// along the sample axis.
Tensor tri_strict(Tape& tape, int64_t n) {
  std::vector<double> m(static_cast<size_t>(n * n), 0.0);
  for (int64_t j = 0; j < n; ++j)
    for (int64_t i = j + 1; i < n; ++i) m[static_cast<size_t>(j * n + i)] = 1.0;
  return tape.constant({n, n}, std::move(m));
}

Tensor ones_column(Tape& tape, int64_t n) {
  return tape.constant({n, 1}, std::vector<double>(static_cast<size_t>(n), 1.0));
}

}  // namespace

Tensor composite_weights(Tape& tape, Tensor sigma_flat, const SampleSet& set) {
  const int64_t R = set.rays, N = set.samples;
  Tensor sigma = tape.reshape(sigma_flat, {R, N});
  Tensor delta = tape.constant({R, N}, set.deltas);
  Tensor sd = tape.mul(sigma, delta);
  Tensor excl = tape.matmul(sd, tri_strict(tape, N));
  Tensor trans = tape.exp(tape.neg(excl));
  Tensor alpha = tape.add_scalar(tape.neg(tape.exp(tape.neg(sd))), 1.0);
  return tape.mul(trans, alpha);
}

Tensor composite_value(Tape& tape, Tensor weights, Tensor values_flat, const SampleSet& set) {
  const int64_t R = set.rays, N = set.samples;
  const int64_t channels = values_flat.cols();
  Tensor ones = ones_column(tape, N);
  if (channels == 1) {
    Tensor v = tape.reshape(values_flat, {R, N});
    return tape.matmul(tape.mul(weights, v), ones);
  }
  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) {
    Tensor v = tape.reshape(tape.slice(values_flat, 1, c, 1), {R, N});
    parts.push_back(tape.matmul(tape.mul(weights, v), ones));
  }
  return tape.concat(parts, 1);
}

CompositeOut composite_depth(Tape& tape, Tensor sigma_flat, const SampleSet& set) {
  CompositeOut out;
  out.weights = composite_weights(tape, sigma_flat, set);
  const int64_t R = set.rays, N = set.samples;
  Tensor ones = ones_column(tape, N);
  out.opacity = tape.matmul(out.weights, ones);
  Tensor t = tape.constant({R, N}, set.depths);
  out.depth = tape.matmul(tape.mul(out.weights, t), ones);
  return out;
}

NormalizationTransform fit_dataset_normalization(const SceneDataset& ds, double margin) {
  std::vector<Vec3> points;
  for (const FrameRecord& fr : ds.frames) {
    points.push_back(fr.ego.translation);
    points.push_back(ds.camera_pose(fr.index).translation);
    for (int i = 0; i < fr.lidar.rows(); ++i)
      for (int j = 0; j < fr.lidar.cols(); ++j)
        if (fr.lidar.hit(i, j)) {
          const Ray ray = lidar_pixel_to_ray(ds.lidar_spec, fr.ego, i, j);
          points.push_back(ray.origin + ray.dir * fr.lidar.depth(i, j));
        }
  }
  return fit_normalization(points, margin);
}

TimeContext frame_time_context(const SceneDataset& ds, int frame) {
  TimeContext tc;
  tc.t = ds.frames[static_cast<size_t>(frame)].timestamp;
  const int F = static_cast<int>(ds.frames.size());
  tc.dt = F > 1 ? 1.0 / (F - 1) : 0.0;
  tc.has_prev = frame > 0;
  tc.has_next = frame + 1 < F;
  return tc;
}

PixelRays gather_pixels(const SceneDataset& ds, const NormalizationTransform& norm, int frame,
                        Modality modality, const std::vector<int>& pixels) {
  const FrameRecord& fr = ds.frames[static_cast<size_t>(frame)];
  PixelRays out;
  out.batch.modality = modality;
  out.batch.t = fr.timestamp;
  const int64_t R = static_cast<int64_t>(pixels.size());
  out.batch.origins.reserve(static_cast<size_t>(3 * R));
  out.batch.dirs.reserve(static_cast<size_t>(3 * R));
  out.batch.pixels = pixels;
  const Pose pose = modality == Modality::Lidar ? fr.ego : ds.camera_pose(frame);
  const Vec3 origin_n = norm.apply(pose.translation);
  for (int flat : pixels) {
    Ray ray;
    if (modality == Modality::Lidar) {
      const int i = flat / ds.lidar_spec.cols, j = flat % ds.lidar_spec.cols;
      ray = lidar_pixel_to_ray(ds.lidar_spec, pose, i, j);
      out.gt_depth.push_back(fr.lidar.depth(i, j) * norm.scale);
      out.gt_intensity.push_back(fr.lidar.intensity(i, j));
      out.gt_hit.push_back(fr.lidar.hit(i, j) ? 1.0 : 0.0);
    } else {
      const int v = flat / ds.camera_spec.width, u = flat % ds.camera_spec.width;
      ray = camera_pixel_to_ray(ds.camera_spec, pose, u, v);
      for (int c = 0; c < 3; ++c) out.gt_rgb.push_back(fr.camera.at(v, u, c));
    }
    out.batch.origins.push_back(origin_n.x);
    out.batch.origins.push_back(origin_n.y);
    out.batch.origins.push_back(origin_n.z);
    out.batch.dirs.push_back(ray.dir.x);
    out.batch.dirs.push_back(ray.dir.y);
    out.batch.dirs.push_back(ray.dir.z);
  }
  return out;
}

namespace {

RayBatch all_pixels_batch(const LidarSpec& spec, const Pose& pose, const NormalizationTransform& norm,
                          double t, int64_t begin, int64_t end) {
  RayBatch batch;
  batch.modality = Modality::Lidar;
  batch.t = t;
  const Vec3 origin_n = norm.apply(pose.translation);
  for (int64_t flat = begin; flat < end; ++flat) {
    const int i = static_cast<int>(flat) / spec.cols, j = static_cast<int>(flat) % spec.cols;
    const Ray ray = lidar_pixel_to_ray(spec, pose, i, j);
    batch.pixels.push_back(static_cast<int>(flat));
    batch.origins.insert(batch.origins.end(), {origin_n.x, origin_n.y, origin_n.z});
    batch.dirs.insert(batch.dirs.end(), {ray.dir.x, ray.dir.y, ray.dir.z});
  }
  return batch;
}

}  // namespace

FrameRender render_lidar_frame(NvsfField& field, const LidarSpec& spec, const Pose& pose,
                               const NormalizationTransform& norm, const TimeContext& tc, bool use_flow,
                               const RenderConfig& cfg) {
  FrameRender out;
  out.pano = PanoImage(spec.rows, spec.cols);
  out.hit_prob = Raster(spec.rows, spec.cols, 1);
  out.opacity = Raster(spec.rows, spec.cols, 1);
  const int64_t total = int64_t(spec.rows) * spec.cols;
  Rng unused(0);
  for (int64_t begin = 0; begin < total; begin += cfg.chunk_rays) {
    const int64_t end = std::min(total, begin + cfg.chunk_rays);
    RayBatch batch = all_pixels_batch(spec, pose, norm, tc.t, begin, end);
    SampleSet set = sample_rays(batch, cfg.samples_per_ray, false, unused, cfg.near_eps);
    Tape tape;
    auto bound = field.bind(tape);
    auto q = field.query_lidar(tape, bound, set.positions, set.dirs, tc, use_flow);
    CompositeOut comp = composite_depth(tape, q.sigma, set);
    Tensor intensity = composite_value(tape, comp.weights, q.intensity, set);
    Tensor hit_prob = composite_value(tape, comp.weights, q.raydrop, set);
    for (int64_t r = 0; r < batch.count(); ++r) {
      const int flat = batch.pixels[static_cast<size_t>(r)];
      const int i = flat / spec.cols, j = flat % spec.cols;
      const double p = hit_prob.values()[static_cast<size_t>(r)];
      const bool kept = p > 0.5;  // strict: ties drop
      out.pano.set(i, j, comp.depth.values()[static_cast<size_t>(r)] / norm.scale,
                   intensity.values()[static_cast<size_t>(r)], kept);
      out.hit_prob.at(i, j) = static_cast<float>(p);
      out.opacity.at(i, j) = static_cast<float>(comp.opacity.values()[static_cast<size_t>(r)]);
    }
  }
  return out;
}

Raster render_camera_frame(NvsfField& field, const CameraSpec& spec, const Pose& pose,
                           const NormalizationTransform& norm, const TimeContext& tc, bool use_flow,
                           const RenderConfig& cfg) {
  Raster image(spec.height, spec.width, 3);
  const int64_t total = int64_t(spec.height) * spec.width;
  Rng unused(0);
  const Vec3 origin_n = norm.apply(pose.translation);
  for (int64_t begin = 0; begin < total; begin += cfg.chunk_rays) {
    const int64_t end = std::min(total, begin + cfg.chunk_rays);
    RayBatch batch;
    batch.modality = Modality::Camera;
    batch.t = tc.t;
    for (int64_t flat = begin; flat < end; ++flat) {
      const int v = static_cast<int>(flat) / spec.width, u = static_cast<int>(flat) % spec.width;
      const Ray ray = camera_pixel_to_ray(spec, pose, u, v);
      batch.pixels.push_back(static_cast<int>(flat));
      batch.origins.insert(batch.origins.end(), {origin_n.x, origin_n.y, origin_n.z});
      batch.dirs.insert(batch.dirs.end(), {ray.dir.x, ray.dir.y, ray.dir.z});
    }
    SampleSet set = sample_rays(batch, cfg.samples_per_ray, false, unused, cfg.near_eps);
    Tape tape;
    auto bound = field.bind(tape);
    auto q = field.query_camera(tape, bound, set.positions, set.dirs, tc, use_flow);
    Tensor weights = composite_weights(tape, q.sigma, set);
    Tensor rgb = composite_value(tape, weights, q.rgb, set);
    for (int64_t r = 0; r < batch.count(); ++r) {
      const int flat = batch.pixels[static_cast<size_t>(r)];
      const int v = flat / spec.width, u = flat % spec.width;
      for (int c = 0; c < 3; ++c)
        image.at(v, u, c) = static_cast<float>(rgb.values()[static_cast<size_t>(3 * r + c)]);
    }
  }
  return image;
}

void export_xyzi(const PanoImage& pano, const LidarSpec& spec, const Pose& pose,
                 const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("export_xyzi: cannot open " + path);
  for (int i = 0; i < pano.rows(); ++i)
    for (int j = 0; j < pano.cols(); ++j) {
      if (!pano.hit(i, j)) continue;
      const Ray ray = lidar_pixel_to_ray(spec, pose, i, j);
      const Vec3 p = ray.origin + ray.dir * pano.depth(i, j);
      out << p.x << " " << p.y << " " << p.z << " " << pano.intensity(i, j) << "\n";
    }
  if (!out) throw std::runtime_error("export_xyzi: write failed for " + path);
}

std::vector<Vec3> pano_to_points(const PanoImage& pano, const LidarSpec& spec, const Pose& pose,
                                 const Raster* mask) {
  std::vector<Vec3> points;
  for (int i = 0; i < pano.rows(); ++i)
    for (int j = 0; j < pano.cols(); ++j) {
      if (!pano.hit(i, j)) continue;
      if (mask && mask->at(i, j) == 0.0f) continue;
      const Ray ray = lidar_pixel_to_ray(spec, pose, i, j);
      points.push_back(ray.origin + ray.dir * pano.depth(i, j));
    }
  return points;
}

}  // namespace nvsf

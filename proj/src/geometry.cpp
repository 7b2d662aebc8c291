#include "nvsf/geometry.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "nvsf/image.hpp"

namespace nvsf {

Mat3 Mat3::rot_z(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 r;
  r.m[0] = c;
  r.m[1] = -s;
  r.m[3] = s;
  r.m[4] = c;
  return r;
}

Mat3 Mat3::rot_y(double pitch) {
  const double c = std::cos(pitch), s = std::sin(pitch);
  Mat3 r;
  r.m[0] = c;
  r.m[2] = s;
  r.m[6] = -s;
  r.m[8] = c;
  return r;
}

Mat3 Mat3::rot_x(double roll) {
  const double c = std::cos(roll), s = std::sin(roll);
  Mat3 r;
  r.m[4] = c;
  r.m[5] = -s;
  r.m[7] = s;
  r.m[8] = c;
  return r;
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
      r.m[i * 3 + j] = acc;
    }
  return r;
}

Mat3 Mat3::transpose() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
  return r;
}

double Mat3::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

bool Pose::is_rigid(double tol) const {
  const Mat3 rtr = rotation.transpose() * rotation;
  const Mat3 eye = Mat3::identity();
  for (int i = 0; i < 9; ++i)
    if (std::abs(rtr.m[i] - eye.m[i]) > tol) return false;
  return std::abs(rotation.det() - 1.0) <= 1e-6;
}

void Aabb::expand(const Vec3& p) {
  lo.x = std::min(lo.x, p.x);
  lo.y = std::min(lo.y, p.y);
  lo.z = std::min(lo.z, p.z);
  hi.x = std::max(hi.x, p.x);
  hi.y = std::max(hi.y, p.y);
  hi.z = std::max(hi.z, p.z);
}

namespace {

void check_lidar_index(const LidarSpec& spec, int i, int j) {
  if (i < 0 || i >= spec.rows || j < 0 || j >= spec.cols)
    throw std::out_of_range("lidar pixel (" + std::to_string(i) + "," + std::to_string(j) +
                            ") out of " + std::to_string(spec.rows) + "x" + std::to_string(spec.cols));
}

}  // namespace

Ray lidar_pixel_to_ray(const LidarSpec& spec, const Pose& pose, int i, int j) {
  check_lidar_index(spec, i, j);
  const double theta = M_PI - 2.0 * M_PI * (j + 0.5) / spec.cols;
  const double phi = spec.fov_max - (spec.fov_max - spec.fov_min) * (i + 0.5) / spec.rows;
  const Vec3 local{std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta), std::sin(phi)};
  return {pose.translation, pose.apply_dir(local)};
}

bool lidar_point_to_pixel(const LidarSpec& spec, const Pose& pose, const Vec3& point, int& i, int& j,
                          double& range) {
  const Vec3 local = pose.rotation.transpose() * (point - pose.translation);
  range = local.norm();
  if (range <= 0.0) return false;
  const double phi = std::asin(std::clamp(local.z / range, -1.0, 1.0));
  const double theta = std::atan2(local.y, local.x);
  const double fi = (spec.fov_max - phi) / (spec.fov_max - spec.fov_min) * spec.rows - 0.5;
  i = static_cast<int>(std::llround(fi));
  if (i < 0 || i >= spec.rows) return false;
  const double fj = (M_PI - theta) * spec.cols / (2.0 * M_PI) - 0.5;
  int64_t jj = std::llround(fj);
  jj %= spec.cols;
  if (jj < 0) jj += spec.cols;
  j = static_cast<int>(jj);
  return true;
}

Ray camera_pixel_to_ray(const CameraSpec& spec, const Pose& pose, int u, int v) {
  if (u < 0 || u >= spec.width || v < 0 || v >= spec.height)
    throw std::out_of_range("camera pixel (" + std::to_string(u) + "," + std::to_string(v) +
                            ") out of " + std::to_string(spec.width) + "x" + std::to_string(spec.height));
  const Vec3 local{(u + 0.5 - spec.cx) / spec.fx, (v + 0.5 - spec.cy) / spec.fy, 1.0};
  return {pose.translation, pose.apply_dir(local.normalized())};
}

PanoImage project_points_to_pano(const std::vector<Vec3>& points, const std::vector<double>& intensities,
                                 const Pose& pose, const LidarSpec& spec) {
  if (!intensities.empty() && intensities.size() != points.size())
    throw std::invalid_argument("project_points_to_pano: intensity count does not match point count");
  PanoImage pano(spec.rows, spec.cols);
  for (size_t k = 0; k < points.size(); ++k) {
    int i, j;
    double range;
    if (!lidar_point_to_pixel(spec, pose, points[k], i, j, range)) continue;
    if (pano.hit(i, j) && pano.depth(i, j) <= range) continue;
    pano.set(i, j, range, intensities.empty() ? 0.0 : intensities[k], true);
  }
  return pano;
}

NormalizationTransform fit_normalization(const std::vector<Vec3>& points, double margin) {
  if (points.empty()) throw std::invalid_argument("fit_normalization: empty input");
  Aabb box;
  for (const Vec3& p : points) box.expand(p);
  const Vec3 ext = box.extent();
  const double max_ext = std::max({ext.x, ext.y, ext.z});
  if (max_ext <= 0.0)
    throw std::invalid_argument("fit_normalization: degenerate AABB (zero extent on all axes)");
  return {box.center(), 1.0 / (max_ext * (1.0 + margin))};
}

bool ray_aabb(const Ray& ray, const Vec3& lo, const Vec3& hi, double& t_near, double& t_far) {
  double tn = 0.0, tf = 1e300;
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.dir[a];
    if (std::abs(d) < 1e-300) {
      if (o < lo[a] || o > hi[a]) return false;
      continue;
    }
    double t0 = (lo[a] - o) / d;
    double t1 = (hi[a] - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    tn = std::max(tn, t0);
    tf = std::min(tf, t1);
    if (tn > tf) return false;
  }
  t_near = tn;
  t_far = tf;
  return true;
}

}  // namespace nvsf

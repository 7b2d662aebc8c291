#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace nvsf {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const { return *this / norm(); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  bool operator==(const Vec3& o) const = default;
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

struct Mat3 {
  // Row-major.
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 rot_z(double yaw);
  static Mat3 rot_y(double pitch);
  static Mat3 rot_x(double roll);

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const;
  Mat3 transpose() const;
  double det() const;
  bool operator==(const Mat3& o) const = default;
};

// Rigid transform with a timestamp; rotation must stay orthonormal (checked
// against 1e-9 by is_rigid).
struct Pose {
  Mat3 rotation;
  Vec3 translation;
  double time = 0.0;

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_dir(const Vec3& d) const { return rotation * d; }
  Pose compose(const Pose& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation, time};
  }
  Pose inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, (rt * translation) * -1.0, time};
  }
  bool is_rigid(double tol = 1e-9) const;
  bool operator==(const Pose& o) const = default;
};

struct LidarSpec {
  bool operator==(const LidarSpec& o) const = default;
  int rows = 0;          // beams (elevation)
  int cols = 0;          // azimuth steps
  double fov_min = 0.0;  // radians, lower elevation bound
  double fov_max = 0.0;
  double max_range = 80.0;
};

struct CameraSpec {
  bool operator==(const CameraSpec& o) const = default;
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

struct Aabb {
  Vec3 lo{1e300, 1e300, 1e300};
  Vec3 hi{-1e300, -1e300, -1e300};

  void expand(const Vec3& p);
  bool empty() const { return lo.x > hi.x; }
  Vec3 center() const { return (lo + hi) * 0.5; }
  Vec3 extent() const { return hi - lo; }
};

// x_norm = (x - center) * scale; fitted so the region of interest lands in
// [-0.5, 0.5]^3.
struct NormalizationTransform {
  Vec3 center;
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p - center) * scale; }
  Vec3 invert(const Vec3& p) const { return p / scale + center; }
};

// Azimuth decreases left to right, column 0 just under +pi:
//   theta = pi - 2*pi*(j+0.5)/W, phi = fov_max - (fov_max-fov_min)*(i+0.5)/H,
//   local dir = (cos phi cos theta, cos phi sin theta, sin phi).
Ray lidar_pixel_to_ray(const LidarSpec& spec, const Pose& pose, int i, int j);

// Inverse of the angular mapping; returns false when the point is outside the
// vertical field of view. On success fills the nearest pixel and the range.
bool lidar_point_to_pixel(const LidarSpec& spec, const Pose& pose, const Vec3& point, int& i, int& j,
                          double& range);

// Pinhole: local dir ~ ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1), camera looks along +z.
Ray camera_pixel_to_ray(const CameraSpec& spec, const Pose& pose, int u, int v);

struct PanoImage;

// Nearest point per pixel wins; range is the Euclidean distance from the
// sensor origin. Points outside the vertical FOV are skipped.
PanoImage project_points_to_pano(const std::vector<Vec3>& points, const std::vector<double>& intensities,
                                 const Pose& pose, const LidarSpec& spec);

NormalizationTransform fit_normalization(const std::vector<Vec3>& points, double margin = 0.05);

// Slab intersection of a ray with an AABB; on hit returns [t_near, t_far]
// clipped to t >= 0.
bool ray_aabb(const Ray& ray, const Vec3& lo, const Vec3& hi, double& t_near, double& t_far);

}  // namespace nvsf

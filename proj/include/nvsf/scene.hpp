#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nvsf/geometry.hpp"
#include "nvsf/image.hpp"

namespace nvsf {

struct Material {
  Vec3 albedo{0.5, 0.5, 0.5};      // rgb in [0,1]
  double reflectivity = 0.5;       // drives LiDAR intensity
  double drop_prob_base = 0.0;     // baseline raydrop probability
  bool operator==(const Material& o) const = default;
};

enum class PrimitiveKind { Plane, Box, Sphere };

// Plane: finite rectangle in the local z=0 plane (half-extents x,y), normal +z.
// Box: axis-aligned in the local frame with half-extents. Sphere: extents.x = radius.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Box;
  Pose pose;          // local -> world at t = 0
  Vec3 extents{1, 1, 1};
  Material material;
  bool dynamic = false;
  Vec3 velocity;          // world units per unit of normalized time
  double yaw_rate = 0.0;  // radians per unit of normalized time
  int id = 0;
};

struct SceneSpec {
  std::string template_name;
  uint64_t seed = 0;
  int frame_count = 0;
  std::vector<Primitive> primitives;
  std::vector<Pose> ego_trajectory;  // one pose per frame
};

struct FrameRecord {
  int index = 0;
  double timestamp = 0.0;  // normalized to [0,1] across the sequence
  Pose ego;
  PanoImage lidar;
  Raster camera;     // rgb, channels=3
  Raster fg_lidar;   // 1-channel 0/1, true where a dynamic primitive was hit
  Raster fg_camera;
};

struct SceneDataset {
  SceneSpec scene;
  LidarSpec lidar_spec;
  CameraSpec camera_spec;
  Pose camera_mount;  // ego -> camera
  std::vector<FrameRecord> frames;

  Pose lidar_pose(int frame) const { return frames[static_cast<size_t>(frame)].ego; }
  Pose camera_pose(int frame) const {
    return frames[static_cast<size_t>(frame)].ego.compose(camera_mount);
  }
};

struct Hit {
  double range = 0.0;
  Vec3 normal;   // world frame, oriented against the ray
  const Primitive* primitive = nullptr;
};

// Rigid pose of a primitive at normalized time t (constant linear velocity
// plus optional yaw about the local origin).
Pose primitive_pose_at(const Primitive& prim, double t);

// Closest intersection along the ray at normalized time t, if any.
std::optional<Hit> intersect_scene(const SceneSpec& scene, const Ray& ray, double t, double max_range);

// Built-in templates: "static" (ground plane, 2 walls, 2 static boxes) and
// "dynamic" (same plus one box moving at constant velocity).
SceneSpec build_scene(uint64_t seed, const std::string& template_name, int frame_count);

inline constexpr double kIntensityAttenuation = 0.01;  // per unit range squared

PanoImage cast_lidar(const SceneSpec& scene, const Pose& pose, const LidarSpec& spec, double t,
                     int frame_index, Raster* fg_mask = nullptr);
Raster cast_camera(const SceneSpec& scene, const Pose& pose, const CameraSpec& spec, double t,
                   Raster* fg_mask = nullptr);

// Simulate every frame of the scene with the default sensors (or the ones
// given) and assemble the in-memory dataset.
SceneDataset simulate_dataset(const SceneSpec& scene, const LidarSpec& lidar_spec,
                              const CameraSpec& camera_spec);

LidarSpec default_lidar_spec(int rows = 32, int cols = 256);
CameraSpec default_camera_spec(int width = 96, int height = 64);
Pose default_camera_mount();

// Dataset directory format: manifest.json + per-frame NVSFIMG1 rasters.
inline constexpr int kDatasetFormatVersion = 1;

void write_dataset(const SceneDataset& dataset, const std::string& dir, bool force = false);
SceneDataset read_dataset(const std::string& dir);

bool operator==(const SceneSpec& a, const SceneSpec& b);
bool operator==(const SceneDataset& a, const SceneDataset& b);

}  // namespace nvsf

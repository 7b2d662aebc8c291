#include "nvsf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "nvsf/rng.hpp"
#include "nvsf/tensor.hpp"  // worker_threads

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace nvsf {

Pose primitive_pose_at(const Primitive& prim, double t) {
  if (!prim.dynamic) return prim.pose;
  Pose p = prim.pose;
  p.translation = prim.pose.translation + prim.velocity * t;
  if (prim.yaw_rate != 0.0) p.rotation = Mat3::rot_z(prim.yaw_rate * t) * prim.pose.rotation;
  return p;
}

namespace {

constexpr double kRayEps = 1e-9;

struct LocalHit {
  double range;
  Vec3 normal;  // local frame
};

std::optional<LocalHit> hit_plane(const Vec3& o, const Vec3& d, const Vec3& ext) {
  if (std::abs(d.z) < 1e-12) return std::nullopt;
  const double t = -o.z / d.z;
  if (t <= kRayEps) return std::nullopt;
  const Vec3 p = o + d * t;
  if (std::abs(p.x) > ext.x || std::abs(p.y) > ext.y) return std::nullopt;
  return LocalHit{t, {0, 0, d.z < 0 ? 1.0 : -1.0}};
}

std::optional<LocalHit> hit_box(const Vec3& o, const Vec3& d, const Vec3& ext) {
  double tn = -1e300, tf = 1e300;
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double oa = o[a], da = d[a], ea = ext[a];
    if (std::abs(da) < 1e-12) {
      if (oa < -ea || oa > ea) return std::nullopt;
      continue;
    }
    double t0 = (-ea - oa) / da;
    double t1 = (ea - oa) / da;
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tn) {
      tn = t0;
      axis = a;
    }
    tf = std::min(tf, t1);
    if (tn > tf) return std::nullopt;
  }
  if (tf <= kRayEps || axis < 0) return std::nullopt;
  if (tn > kRayEps) {
    Vec3 n{0, 0, 0};
    if (axis == 0) n.x = d.x < 0 ? 1.0 : -1.0;
    if (axis == 1) n.y = d.y < 0 ? 1.0 : -1.0;
    if (axis == 2) n.z = d.z < 0 ? 1.0 : -1.0;
    return LocalHit{tn, n};
  }
  return std::nullopt;  // origin inside: treat as no surface hit
}

std::optional<LocalHit> hit_sphere(const Vec3& o, const Vec3& d, double radius) {
  const double b = o.dot(d);
  const double c = o.dot(o) - radius * radius;
  const double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  const double s = std::sqrt(disc);
  double t = -b - s;
  if (t <= kRayEps) t = -b + s;
  if (t <= kRayEps) return std::nullopt;
  Vec3 n = (o + d * t) / radius;
  if (n.dot(d) > 0) n = n * -1.0;
  return LocalHit{t, n};
}

// Fixed directional light and sky color for the camera ground truth.
const Vec3 kLightDir = Vec3{0.3, 0.25, 0.9}.normalized();
const Vec3 kSkyColor{0.35, 0.55, 0.85};
constexpr double kGrazingDropScale = 0.5;
constexpr int kGrazingDropPower = 6;

}  // namespace

std::optional<Hit> intersect_scene(const SceneSpec& scene, const Ray& ray, double t, double max_range) {
  std::optional<Hit> best;
  for (const Primitive& prim : scene.primitives) {
    const Pose pose = primitive_pose_at(prim, t);
    const Mat3 rt = pose.rotation.transpose();
    const Vec3 o = rt * (ray.origin - pose.translation);
    const Vec3 d = rt * ray.dir;
    std::optional<LocalHit> lh;
    switch (prim.kind) {
      case PrimitiveKind::Plane:
        lh = hit_plane(o, d, prim.extents);
        break;
      case PrimitiveKind::Box:
        lh = hit_box(o, d, prim.extents);
        break;
      case PrimitiveKind::Sphere:
        lh = hit_sphere(o, d, prim.extents.x);
        break;
    }
    if (!lh || lh->range > max_range) continue;
    if (!best || lh->range < best->range)
      best = Hit{lh->range, pose.rotation * lh->normal, &prim};
  }
  return best;
}

SceneSpec build_scene(uint64_t seed, const std::string& template_name, int frame_count) {
  if (template_name != "static" && template_name != "dynamic")
    throw std::invalid_argument("build_scene: unknown template '" + template_name + "'");
  if (frame_count < 1) throw std::invalid_argument("build_scene: frame count must be >= 1");

  Rng rng(seed * 0x51f3c6b97a5ecull + (template_name == "dynamic" ? 17 : 3));
  SceneSpec scene;
  scene.template_name = template_name;
  scene.seed = seed;
  scene.frame_count = frame_count;

  int next_id = 0;
  auto add = [&](Primitive p) {
    p.id = next_id++;
    scene.primitives.push_back(std::move(p));
  };

  // Ground rectangle spanning x in [-8, 9.5], y in [-6, 7].
  Primitive ground;
  ground.kind = PrimitiveKind::Plane;
  ground.pose = {Mat3::identity(), {0.75, 0.5, 0.0}, 0};
  ground.extents = {8.75, 6.5, 0};
  ground.material = {{0.42, 0.40, 0.38}, 0.5, 0.015};
  add(ground);

  // Back wall at y = +6.5, facing -y; side wall at x = +9.5, facing -x.
  Primitive wall_back;
  wall_back.kind = PrimitiveKind::Plane;
  wall_back.pose = {Mat3::rot_x(M_PI / 2.0), {0.75, 6.5, 1.5}, 0};
  wall_back.extents = {8.75, 1.5, 0};
  wall_back.material = {{0.55, 0.50, 0.45}, 0.6, 0.015};
  add(wall_back);

  Primitive wall_side;
  wall_side.kind = PrimitiveKind::Plane;
  wall_side.pose = {Mat3::rot_y(-M_PI / 2.0), {9.5, 0.5, 1.5}, 0};
  wall_side.extents = {1.5, 6.5, 0};
  wall_side.material = {{0.50, 0.55, 0.48}, 0.55, 0.015};
  add(wall_side);

  auto jitter = [&] { return rng.uniform(-0.35, 0.35); };

  Primitive box1;
  box1.pose = {Mat3::rot_z(rng.uniform(-0.3, 0.3)), {3.5 + jitter(), 2.0 + jitter(), 0.65}, 0};
  box1.extents = {0.9, 0.7, 0.65};
  box1.material = {{0.75, 0.20, 0.15}, 0.8, 0.01};
  add(box1);

  Primitive box2;
  box2.pose = {Mat3::rot_z(rng.uniform(-0.3, 0.3)), {5.5 + jitter(), -2.2 + jitter(), 0.5}, 0};
  box2.extents = {0.65, 0.55, 0.5};
  box2.material = {{0.15, 0.30, 0.70}, 0.3, 0.01};
  add(box2);

  if (template_name == "dynamic") {
    Primitive mover;
    mover.pose = {Mat3::identity(), {7.0, 4.0, 0.8}, 0};
    mover.extents = {1.05, 0.85, 0.8};
    mover.material = {{0.90, 0.75, 0.20}, 0.9, 0.01};
    mover.dynamic = true;
    mover.velocity = {-5.5, -4.0, 0.0};
    add(mover);
  }

  const Vec3 start{-4.2, -2.8, 1.8};
  for (int k = 0; k < frame_count; ++k) {
    Pose ego{Mat3::identity(), start + Vec3{0.55, 0.0, 0.0} * static_cast<double>(k), 0.0};
    ego.time = frame_count > 1 ? static_cast<double>(k) / (frame_count - 1) : 0.0;
    scene.ego_trajectory.push_back(ego);
  }
  return scene;
}

PanoImage cast_lidar(const SceneSpec& scene, const Pose& pose, const LidarSpec& spec, double t,
                     int frame_index, Raster* fg_mask) {
  PanoImage pano(spec.rows, spec.cols);
  if (fg_mask) *fg_mask = Raster(spec.rows, spec.cols, 1);
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (int i = 0; i < spec.rows; ++i) {
    for (int j = 0; j < spec.cols; ++j) {
      const Ray ray = lidar_pixel_to_ray(spec, pose, i, j);
      const auto hit = intersect_scene(scene, ray, t, spec.max_range);
      if (!hit) continue;
      // normals are oriented against the ray by the intersection routines
      const double cos_inc = std::clamp(-hit->normal.dot(ray.dir), 0.0, 1.0);
      const Material& mat = hit->primitive->material;
      double p_drop = mat.drop_prob_base +
                      kGrazingDropScale * std::pow(1.0 - cos_inc, kGrazingDropPower);
      p_drop = std::clamp(p_drop, 0.0, 1.0);
      const uint64_t pixel = static_cast<uint64_t>(i) * spec.cols + j;
      if (Rng::hash_unit(scene.seed, static_cast<uint64_t>(frame_index), pixel) < p_drop) continue;
      const double intensity =
          mat.reflectivity * cos_inc / (1.0 + hit->range * hit->range * kIntensityAttenuation);
      pano.set(i, j, hit->range, intensity, true);
      if (fg_mask && hit->primitive->dynamic) fg_mask->at(i, j) = 1.0f;
    }
  }
  return pano;
}

Raster cast_camera(const SceneSpec& scene, const Pose& pose, const CameraSpec& spec, double t,
                   Raster* fg_mask) {
  Raster image(spec.height, spec.width, 3);
  if (fg_mask) *fg_mask = Raster(spec.height, spec.width, 1);
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (int v = 0; v < spec.height; ++v) {
    for (int u = 0; u < spec.width; ++u) {
      const Ray ray = camera_pixel_to_ray(spec, pose, u, v);
      const auto hit = intersect_scene(scene, ray, t, 1e6);
      Vec3 color = kSkyColor;
      if (hit) {
        const double lambert = 0.2 + 0.8 * std::max(0.0, hit->normal.dot(kLightDir));
        color = hit->primitive->material.albedo * lambert;
        if (fg_mask && hit->primitive->dynamic) fg_mask->at(v, u) = 1.0f;
      }
      image.at(v, u, 0) = static_cast<float>(color.x);
      image.at(v, u, 1) = static_cast<float>(color.y);
      image.at(v, u, 2) = static_cast<float>(color.z);
    }
  }
  return image;
}

LidarSpec default_lidar_spec(int rows, int cols) {
  return {rows, cols, -28.0 * M_PI / 180.0, 7.0 * M_PI / 180.0, 80.0};
}

CameraSpec default_camera_spec(int width, int height) {
  const double f = width / (2.0 * std::tan(32.0 * M_PI / 180.0));
  return {f, f, width / 2.0, height / 2.0, width, height};
}

Pose default_camera_mount() {
  // Camera +z (optical axis) -> world +x, image right -> -y, image down -> -z.
  Mat3 r;
  r.m[0] = 0;
  r.m[1] = 0;
  r.m[2] = 1;
  r.m[3] = -1;
  r.m[4] = 0;
  r.m[5] = 0;
  r.m[6] = 0;
  r.m[7] = -1;
  r.m[8] = 0;
  return {r, {0.2, 0.0, -0.3}, 0.0};
}

SceneDataset simulate_dataset(const SceneSpec& scene, const LidarSpec& lidar_spec,
                              const CameraSpec& camera_spec) {
  if (static_cast<int>(scene.ego_trajectory.size()) != scene.frame_count)
    throw std::invalid_argument("simulate_dataset: trajectory length does not match frame count");
  SceneDataset ds;
  ds.scene = scene;
  ds.lidar_spec = lidar_spec;
  ds.camera_spec = camera_spec;
  ds.camera_mount = default_camera_mount();
  for (int k = 0; k < scene.frame_count; ++k) {
    FrameRecord fr;
    fr.index = k;
    fr.timestamp = scene.frame_count > 1 ? static_cast<double>(k) / (scene.frame_count - 1) : 0.0;
    fr.ego = scene.ego_trajectory[static_cast<size_t>(k)];
    fr.ego.time = fr.timestamp;
    fr.lidar = cast_lidar(scene, fr.ego, lidar_spec, fr.timestamp, k, &fr.fg_lidar);
    fr.camera = cast_camera(scene, fr.ego.compose(ds.camera_mount), camera_spec, fr.timestamp,
                            &fr.fg_camera);
    ds.frames.push_back(std::move(fr));
  }
  return ds;
}

// --- JSON (de)serialization --------------------------------------------------

namespace {

json to_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }
Vec3 vec3_from(const json& j) { return {j.at(0), j.at(1), j.at(2)}; }

json to_json(const Mat3& m) {
  json a = json::array();
  for (double v : m.m) a.push_back(v);
  return a;
}
Mat3 mat3_from(const json& j) {
  Mat3 m;
  for (int i = 0; i < 9; ++i) m.m[i] = j.at(static_cast<size_t>(i));
  return m;
}

json to_json(const Pose& p) {
  return {{"r", to_json(p.rotation)}, {"t", to_json(p.translation)}, {"time", p.time}};
}
Pose pose_from(const json& j) {
  return {mat3_from(j.at("r")), vec3_from(j.at("t")), j.at("time")};
}

json to_json(const Primitive& p) {
  static const char* names[] = {"plane", "box", "sphere"};
  return {{"kind", names[static_cast<int>(p.kind)]},
          {"pose", to_json(p.pose)},
          {"extents", to_json(p.extents)},
          {"albedo", to_json(p.material.albedo)},
          {"reflectivity", p.material.reflectivity},
          {"drop_prob_base", p.material.drop_prob_base},
          {"dynamic", p.dynamic},
          {"velocity", to_json(p.velocity)},
          {"yaw_rate", p.yaw_rate},
          {"id", p.id}};
}

Primitive primitive_from(const json& j) {
  Primitive p;
  const std::string kind = j.at("kind");
  p.kind = kind == "plane" ? PrimitiveKind::Plane
                           : (kind == "box" ? PrimitiveKind::Box : PrimitiveKind::Sphere);
  p.pose = pose_from(j.at("pose"));
  p.extents = vec3_from(j.at("extents"));
  p.material.albedo = vec3_from(j.at("albedo"));
  p.material.reflectivity = j.at("reflectivity");
  p.material.drop_prob_base = j.at("drop_prob_base");
  p.dynamic = j.at("dynamic");
  p.velocity = vec3_from(j.at("velocity"));
  p.yaw_rate = j.at("yaw_rate");
  p.id = j.at("id");
  return p;
}

json to_json(const SceneSpec& s) {
  json prims = json::array(), traj = json::array();
  for (const auto& p : s.primitives) prims.push_back(to_json(p));
  for (const auto& p : s.ego_trajectory) traj.push_back(to_json(p));
  return {{"template", s.template_name}, {"seed", s.seed},       {"frame_count", s.frame_count},
          {"primitives", prims},         {"trajectory", traj}};
}

SceneSpec scene_from(const json& j) {
  SceneSpec s;
  s.template_name = j.at("template");
  s.seed = j.at("seed");
  s.frame_count = j.at("frame_count");
  for (const auto& p : j.at("primitives")) s.primitives.push_back(primitive_from(p));
  for (const auto& p : j.at("trajectory")) s.ego_trajectory.push_back(pose_from(p));
  return s;
}

std::string frame_file(int index, const char* what) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "frame_%04d_%s.bin", index, what);
  return buf;
}

}  // namespace

void write_dataset(const SceneDataset& dataset, const std::string& dir, bool force) {
  const fs::path root(dir);
  if (fs::exists(root) && !fs::is_empty(root) && !force)
    throw std::runtime_error("write_dataset: " + dir + " is not empty (use force to overwrite)");
  fs::create_directories(root);

  json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["scene"] = to_json(dataset.scene);
  manifest["lidar_spec"] = {{"rows", dataset.lidar_spec.rows},
                            {"cols", dataset.lidar_spec.cols},
                            {"fov_min", dataset.lidar_spec.fov_min},
                            {"fov_max", dataset.lidar_spec.fov_max},
                            {"max_range", dataset.lidar_spec.max_range}};
  manifest["camera_spec"] = {{"fx", dataset.camera_spec.fx}, {"fy", dataset.camera_spec.fy},
                             {"cx", dataset.camera_spec.cx}, {"cy", dataset.camera_spec.cy},
                             {"width", dataset.camera_spec.width},
                             {"height", dataset.camera_spec.height}};
  manifest["camera_mount"] = to_json(dataset.camera_mount);
  json frames = json::array();
  for (const FrameRecord& fr : dataset.frames) {
    frames.push_back({{"index", fr.index},
                      {"timestamp", fr.timestamp},
                      {"ego", to_json(fr.ego)},
                      {"lidar", frame_file(fr.index, "lidar")},
                      {"camera", frame_file(fr.index, "camera")},
                      {"fg_lidar", frame_file(fr.index, "fg_lidar")},
                      {"fg_camera", frame_file(fr.index, "fg_camera")}});
    write_raster((root / frame_file(fr.index, "lidar")).string(), fr.lidar.raster);
    write_raster((root / frame_file(fr.index, "camera")).string(), fr.camera);
    write_raster((root / frame_file(fr.index, "fg_lidar")).string(), fr.fg_lidar);
    write_raster((root / frame_file(fr.index, "fg_camera")).string(), fr.fg_camera);
  }
  manifest["frames"] = frames;
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("write_dataset: failed writing manifest in " + dir);
}

SceneDataset read_dataset(const std::string& dir) {
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path))
    throw std::runtime_error("read_dataset: missing manifest " + manifest_path.string());
  std::ifstream in(manifest_path);
  json manifest = json::parse(in);
  const int version = manifest.at("format_version");
  if (version != kDatasetFormatVersion)
    throw std::runtime_error("read_dataset: format version mismatch (" + std::to_string(version) +
                             " != " + std::to_string(kDatasetFormatVersion) + ")");
  SceneDataset ds;
  ds.scene = scene_from(manifest.at("scene"));
  const json& ls = manifest.at("lidar_spec");
  ds.lidar_spec = {ls.at("rows"), ls.at("cols"), ls.at("fov_min"), ls.at("fov_max"), ls.at("max_range")};
  const json& cs = manifest.at("camera_spec");
  ds.camera_spec = {cs.at("fx"), cs.at("fy"), cs.at("cx"), cs.at("cy"), cs.at("width"), cs.at("height")};
  ds.camera_mount = pose_from(manifest.at("camera_mount"));
  for (const json& jf : manifest.at("frames")) {
    FrameRecord fr;
    fr.index = jf.at("index");
    fr.timestamp = jf.at("timestamp");
    fr.ego = pose_from(jf.at("ego"));
    fr.lidar.raster = read_raster((root / jf.at("lidar").get<std::string>()).string());
    fr.camera = read_raster((root / jf.at("camera").get<std::string>()).string());
    fr.fg_lidar = read_raster((root / jf.at("fg_lidar").get<std::string>()).string());
    fr.fg_camera = read_raster((root / jf.at("fg_camera").get<std::string>()).string());
    ds.frames.push_back(std::move(fr));
  }
  return ds;
}

bool operator==(const SceneSpec& a, const SceneSpec& b) {
  if (a.template_name != b.template_name || a.seed != b.seed || a.frame_count != b.frame_count)
    return false;
  if (a.ego_trajectory != b.ego_trajectory) return false;
  if (a.primitives.size() != b.primitives.size()) return false;
  for (size_t i = 0; i < a.primitives.size(); ++i) {
    const Primitive &p = a.primitives[i], &q = b.primitives[i];
    if (!(p.kind == q.kind && p.pose == q.pose && p.extents == q.extents && p.material == q.material &&
          p.dynamic == q.dynamic && p.velocity == q.velocity && p.yaw_rate == q.yaw_rate && p.id == q.id))
      return false;
  }
  return true;
}

bool operator==(const SceneDataset& a, const SceneDataset& b) {
  if (!(a.scene == b.scene) || a.lidar_spec != b.lidar_spec || a.camera_spec != b.camera_spec ||
      !(a.camera_mount == b.camera_mount) || a.frames.size() != b.frames.size())
    return false;
  for (size_t i = 0; i < a.frames.size(); ++i) {
    const FrameRecord &f = a.frames[i], &g = b.frames[i];
    if (!(f.index == g.index && f.timestamp == g.timestamp && f.ego == g.ego && f.lidar == g.lidar &&
          f.camera == g.camera && f.fg_lidar == g.fg_lidar && f.fg_camera == g.fg_camera))
      return false;
  }
  return true;
}

}  // namespace nvsf

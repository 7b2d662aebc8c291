#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "nvsf/geometry.hpp"
#include "nvsf/image.hpp"
#include "nvsf/rng.hpp"

using namespace nvsf;

namespace {

Pose random_pose(Rng& rng) {
  Mat3 r = Mat3::rot_z(rng.uniform(-M_PI, M_PI)) * Mat3::rot_y(rng.uniform(-0.5, 0.5)) *
           Mat3::rot_x(rng.uniform(-0.5, 0.5));
  return {r, {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 3)}, 0.0};
}

const LidarSpec kSpec{16, 64, -25.0 * M_PI / 180.0, 5.0 * M_PI / 180.0, 80.0};

}  // namespace

TEST_CASE("azimuth convention anchor: theta=0 lies in the +x half plane") {
  LidarSpec spec{4, 9, -0.3, 0.3, 80.0};  // W odd so that theta=0 is a pixel center
  Ray r = lidar_pixel_to_ray(spec, Pose{}, 1, 4);
  CHECK(r.dir.x > 0.0);
  CHECK(r.dir.y == doctest::Approx(0.0).epsilon(1e-12));
  // column 0 sits just under +pi: y component positive and x negative
  Ray r0 = lidar_pixel_to_ray(spec, Pose{}, 1, 0);
  CHECK(r0.dir.x < 0.0);
  CHECK(r0.dir.y > 0.0);
}

TEST_CASE("lidar rays are unit length for random pixels and poses") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Pose pose = random_pose(rng);
    int i = static_cast<int>(rng.below(kSpec.rows));
    int j = static_cast<int>(rng.below(kSpec.cols));
    Ray r = lidar_pixel_to_ray(kSpec, pose, i, j);
    CHECK(std::abs(r.dir.norm() - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(lidar_pixel_to_ray(kSpec, Pose{}, kSpec.rows, 0), std::out_of_range);
}

TEST_CASE("pixel -> ray -> angles -> pixel is the identity at pixel centers") {
  Pose pose{Mat3::rot_z(0.7), {1, 2, 0.5}, 0};
  for (int i = 0; i < kSpec.rows; ++i)
    for (int j = 0; j < kSpec.cols; ++j) {
      Ray r = lidar_pixel_to_ray(kSpec, pose, i, j);
      Vec3 p = r.origin + r.dir * 7.5;
      int pi, pj;
      double range;
      REQUIRE(lidar_point_to_pixel(kSpec, pose, p, pi, pj, range));
      CHECK(pi == i);
      CHECK(pj == j);
      CHECK(range == doctest::Approx(7.5).epsilon(1e-12));
    }
}

TEST_CASE("projected point's pixel ray passes within one pixel half-width") {
  Rng rng(17);
  const double half_theta = M_PI / kSpec.cols;
  const double half_phi = (kSpec.fov_max - kSpec.fov_min) / (2.0 * kSpec.rows);
  const double bound = std::sqrt(half_theta * half_theta + half_phi * half_phi) * 1.0001;
  for (int trial = 0; trial < 300; ++trial) {
    Pose pose = random_pose(rng);
    // a point inside the vertical FOV
    const double phi = rng.uniform(kSpec.fov_min + 1e-3, kSpec.fov_max - 1e-3);
    const double theta = rng.uniform(-M_PI, M_PI);
    const double range = rng.uniform(1.0, 40.0);
    Vec3 local{std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta), std::sin(phi)};
    Vec3 p = pose.apply(local * range);
    int i, j;
    double r;
    REQUIRE(lidar_point_to_pixel(kSpec, pose, p, i, j, r));
    Ray ray = lidar_pixel_to_ray(kSpec, pose, i, j);
    Vec3 to_p = (p - ray.origin).normalized();
    const double angle = std::acos(std::clamp(ray.dir.dot(to_p), -1.0, 1.0));
    CHECK(angle <= bound);
  }
}

TEST_CASE("project_points_to_pano basics") {
  Pose pose{};
  SUBCASE("empty input gives an all-miss pano") {
    PanoImage pano = project_points_to_pano({}, {}, pose, kSpec);
    for (int i = 0; i < pano.rows(); ++i)
      for (int j = 0; j < pano.cols(); ++j) CHECK_FALSE(pano.hit(i, j));
  }
  SUBCASE("single point straight ahead hits exactly one pixel with its range") {
    // re-derive the pixel whose center is closest to the +x axis
    Ray probe = lidar_pixel_to_ray(kSpec, pose, 0, 0);
    (void)probe;
    Vec3 p{10.0, 0.0, 0.0};
    PanoImage pano = project_points_to_pano({p}, {0.5}, pose, kSpec);
    int hits = 0, hi = -1, hj = -1;
    for (int i = 0; i < pano.rows(); ++i)
      for (int j = 0; j < pano.cols(); ++j)
        if (pano.hit(i, j)) {
          ++hits;
          hi = i;
          hj = j;
        }
    REQUIRE(hits == 1);
    CHECK(pano.depth(hi, hj) == doctest::Approx(10.0).epsilon(1e-7));
    CHECK(pano.intensity(hi, hj) == doctest::Approx(0.5).epsilon(1e-7));
  }
}

TEST_CASE("projection is idempotent: reprojecting the unprojected pano reproduces it") {
  Rng rng(23);
  Pose pose = random_pose(rng);
  PanoImage pano(kSpec.rows, kSpec.cols);
  for (int i = 0; i < pano.rows(); ++i)
    for (int j = 0; j < pano.cols(); ++j)
      if (rng.uniform() < 0.4) pano.set(i, j, rng.uniform(1.0, 60.0), rng.uniform(0, 1), true);
  std::vector<Vec3> points;
  std::vector<double> intensities;
  for (int i = 0; i < pano.rows(); ++i)
    for (int j = 0; j < pano.cols(); ++j)
      if (pano.hit(i, j)) {
        Ray r = lidar_pixel_to_ray(kSpec, pose, i, j);
        points.push_back(r.origin + r.dir * pano.depth(i, j));
        intensities.push_back(pano.intensity(i, j));
      }
  PanoImage back = project_points_to_pano(points, intensities, pose, kSpec);
  for (int i = 0; i < pano.rows(); ++i)
    for (int j = 0; j < pano.cols(); ++j) {
      REQUIRE(back.hit(i, j) == pano.hit(i, j));
      if (pano.hit(i, j)) {
        CHECK(back.raster.at(i, j, 0) == pano.raster.at(i, j, 0));
        CHECK(back.raster.at(i, j, 1) == pano.raster.at(i, j, 1));
      }
    }
}

TEST_CASE("camera rays: principal point maps to the optical axis") {
  CameraSpec cam{50, 50, 2.5, 1.5, 5, 3};
  Mat3 mount = Mat3::rot_y(0.3) * Mat3::rot_z(-1.1);
  Pose pose{mount, {4, -2, 1}, 0};
  Ray r = camera_pixel_to_ray(cam, pose, 2, 1);
  Vec3 axis = pose.apply_dir({0, 0, 1});
  CHECK(r.dir.dot(axis) == doctest::Approx(1.0).epsilon(1e-12));
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Ray rr = camera_pixel_to_ray(cam, pose, static_cast<int>(rng.below(cam.width)),
                                 static_cast<int>(rng.below(cam.height)));
    CHECK(std::abs(rr.dir.norm() - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(camera_pixel_to_ray(cam, pose, 5, 0), std::out_of_range);
}

TEST_CASE("fit_normalization arithmetic and guards") {
  std::vector<Vec3> cube = {{-50, -50, -50}, {50, 50, 50}};
  NormalizationTransform nt = fit_normalization(cube, 0.0);
  CHECK(nt.center.x == 0.0);
  CHECK(nt.scale == doctest::Approx(0.01).epsilon(1e-15));
  Vec3 p = nt.apply({50, 0, 0});
  CHECK(p.x == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p.y == 0.0);

  CHECK_THROWS_AS(fit_normalization({{1, 2, 3}, {1, 2, 3}}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(fit_normalization({}, 0.0), std::invalid_argument);

  // zero extent on some axes: scale comes from the largest nonzero extent
  NormalizationTransform flat = fit_normalization({{0, 0, 0}, {10, 0, 0}}, 0.0);
  CHECK(flat.scale == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("normalized random clouds stay inside the unit cube; apply/invert round-trips") {
  Rng rng(9);
  std::vector<Vec3> cloud;
  for (int k = 0; k < 500; ++k)
    cloud.push_back({rng.uniform(-30, 70), rng.uniform(-10, 90), rng.uniform(-5, 5)});
  NormalizationTransform nt = fit_normalization(cloud);
  for (const Vec3& p : cloud) {
    Vec3 q = nt.apply(p);
    CHECK(std::abs(q.x) <= 0.5);
    CHECK(std::abs(q.y) <= 0.5);
    CHECK(std::abs(q.z) <= 0.5);
    Vec3 back = nt.invert(q);
    CHECK(std::abs(back.x - p.x) < 1e-12 * std::max(1.0, std::abs(p.x)));
    CHECK(std::abs(back.y - p.y) < 1e-12 * std::max(1.0, std::abs(p.y)));
  }
}

TEST_CASE("pose algebra: composition associativity and inverse") {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    CHECK(a.is_rigid());
    Pose ab_c = a.compose(b).compose(c);
    Pose a_bc = a.compose(b.compose(c));
    Vec3 p{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    Vec3 d = (ab_c.apply(p) - a_bc.apply(p));
    CHECK(d.norm() < 1e-9);
    Pose id = a.inverse().compose(a);
    CHECK((id.apply(p) - p).norm() < 1e-9);
  }
}

TEST_CASE("ray/AABB slab intersection agrees with sampled membership") {
  Rng rng(55);
  const Vec3 lo{-0.5, -0.5, -0.5}, hi{0.5, 0.5, 0.5};
  for (int trial = 0; trial < 200; ++trial) {
    Ray r{{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)},
          Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}.normalized()};
    double tn, tf;
    REQUIRE(ray_aabb(r, lo, hi, tn, tf));  // origin inside
    CHECK(tn == 0.0);
    Vec3 exit = r.origin + r.dir * tf;
    const double m = std::max({std::abs(exit.x), std::abs(exit.y), std::abs(exit.z)});
    CHECK(m == doctest::Approx(0.5).epsilon(1e-9));
    Vec3 inside = r.origin + r.dir * (tf * 0.999);
    CHECK(std::max({std::abs(inside.x), std::abs(inside.y), std::abs(inside.z)}) < 0.5);
  }
}

TEST_CASE("raster file round-trip and guards") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "nvsf_raster_test.bin").string();
  Rng rng(2);
  Raster r(7, 5, 3);
  for (float& v : r.data) v = static_cast<float>(rng.uniform(-10, 10));
  write_raster(path, r);
  Raster back = read_raster(path);
  CHECK(back == r);

  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write("NVSFIMG1", 8);
    uint32_t dims[3] = {4, 4, 1};
    f.write(reinterpret_cast<char*>(dims), sizeof(dims));
    float half[8] = {0};
    f.write(reinterpret_cast<char*>(half), sizeof(half));
  }
  CHECK_THROWS_WITH_AS(read_raster(path), doctest::Contains("payload"), std::runtime_error);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.write("BADMAGIC", 8);
  }
  CHECK_THROWS_WITH_AS(read_raster(path), doctest::Contains("magic"), std::runtime_error);
  fs::remove(path);
}

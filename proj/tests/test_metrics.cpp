#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nvsf/metrics.hpp"
#include "nvsf/rng.hpp"

using namespace nvsf;

TEST_CASE("pcd metrics: identity, worked pair, brute-force oracle, permutation invariance") {
  Rng rng(1);
  std::vector<Vec3> cloud;
  for (int k = 0; k < 64; ++k)
    cloud.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
  PcdMetrics same = pcd_metrics(cloud, cloud, 0.1);
  CHECK(same.cd == 0.0);
  CHECK(same.f_score == 1.0);

  PcdMetrics apart = pcd_metrics({{0, 0, 0}}, {{1, 0, 0}}, 0.5);
  CHECK(apart.cd == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(apart.f_score == 0.0);

  // permutation invariance
  std::vector<Vec3> shuffled = cloud;
  std::reverse(shuffled.begin(), shuffled.end());
  std::vector<Vec3> other;
  for (int k = 0; k < 50; ++k)
    other.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
  CHECK(pcd_metrics(cloud, other, 0.2).cd == pcd_metrics(shuffled, other, 0.2).cd);
  CHECK(pcd_metrics(cloud, other, 0.2).f_score == pcd_metrics(shuffled, other, 0.2).f_score);

  // threshold monotonicity
  double prev = 0.0;
  for (double thr : {0.05, 0.1, 0.2, 0.5, 1.0, 3.0}) {
    const double f = pcd_metrics(cloud, other, thr).f_score;
    CHECK(f >= prev - 1e-15);
    prev = f;
  }

  CHECK_THROWS_AS(pcd_metrics({}, cloud, 0.1), std::invalid_argument);
}

TEST_CASE("image metrics: identity, 20 dB anchor, psnr/rmse consistency") {
  const int rows = 16, cols = 20;
  Rng rng(3);
  std::vector<double> img(static_cast<size_t>(rows * cols));
  for (double& v : img) v = rng.uniform(0, 1);
  std::vector<uint8_t> valid(img.size(), 1);

  ImageMetrics id = image_metrics(img, img, valid, rows, cols, 1.0);
  CHECK(id.rmse == 0.0);
  CHECK(id.psnr == 100.0);
  CHECK(id.ssim == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> shifted = img;
  for (double& v : shifted) v += 0.1;
  ImageMetrics off = image_metrics(shifted, img, valid, rows, cols, 1.0);
  CHECK(off.rmse == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(off.psnr == doctest::Approx(20.0).epsilon(1e-9));

  Rng rng2(5);
  std::vector<double> noisy = img;
  for (double& v : noisy) v += rng2.uniform(-0.2, 0.2);
  ImageMetrics nm = image_metrics(noisy, img, valid, rows, cols, 1.0);
  CHECK(nm.psnr == doctest::Approx(20.0 * std::log10(1.0 / nm.rmse)).epsilon(1e-12));

  CHECK_THROWS_AS(image_metrics(img, img, std::vector<uint8_t>(img.size(), 0), rows, cols, 1.0),
                  std::invalid_argument);
}

TEST_CASE("ssim of an image against its negative is close to -1 on zero-mean stripes") {
  const int rows = 24, cols = 24;
  std::vector<double> img(static_cast<size_t>(rows * cols));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) img[static_cast<size_t>(i * cols + j)] = (i % 2 == 0) ? 1.0 : -1.0;
  std::vector<double> negated = img;
  for (double& v : negated) v = -v;
  std::vector<uint8_t> valid(img.size(), 1);
  ImageMetrics m = image_metrics(negated, img, valid, rows, cols, 2.0);
  CHECK(m.ssim == doctest::Approx(-1.0).epsilon(0.01));
}

TEST_CASE("raydrop metrics: identity, half-dropped ties, degenerate f-score") {
  std::vector<double> perfect = {0.0, 1.0, 0.0, 1.0};
  std::vector<uint8_t> gt = {0, 1, 0, 1};
  RaydropMetrics m = raydrop_metrics(perfect, gt);
  CHECK(m.rmse == 0.0);
  CHECK(m.accuracy == 1.0);
  CHECK(m.f_score == 1.0);

  // all-0.5 predictions: ties resolve to kept -> accuracy is the kept fraction
  std::vector<double> half(8, 0.5);
  std::vector<uint8_t> half_gt = {1, 0, 1, 0, 1, 0, 1, 0};
  RaydropMetrics hm = raydrop_metrics(half, half_gt);
  CHECK(hm.accuracy == doctest::Approx(0.5).epsilon(1e-15));

  // no positives in gt and none predicted
  RaydropMetrics dm = raydrop_metrics({0.1, 0.2, 0.0}, {0, 0, 0});
  CHECK(dm.f_score == 1.0);
  CHECK(dm.accuracy == 1.0);
}

TEST_CASE("evaluation driver: gt passthrough gives identity metrics; foreground splits behave") {
  SceneSpec scene = build_scene(31, "dynamic", 5);
  SceneDataset ds = simulate_dataset(scene, default_lidar_spec(16, 96), default_camera_spec(24, 18));

  // build predictions that are exactly the ground truth
  std::vector<FramePrediction> preds;
  for (int f = 3; f < 5; ++f) {
    FramePrediction fp;
    fp.frame = f;
    fp.lidar.pano = ds.frames[static_cast<size_t>(f)].lidar;
    fp.lidar.hit_prob = Raster(16, 96, 1);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 96; ++j)
        fp.lidar.hit_prob.at(i, j) = ds.frames[static_cast<size_t>(f)].lidar.hit(i, j) ? 1.0f : 0.0f;
    fp.lidar.opacity = fp.lidar.hit_prob;
    fp.camera = ds.frames[static_cast<size_t>(f)].camera;
    preds.push_back(std::move(fp));
  }

  MetricReport all = evaluate_predictions(ds, preds, false);
  REQUIRE(all.frames.size() == 2);
  for (const FrameMetrics& fm : all.frames) {
    REQUIRE(fm.pcd.has_value());
    CHECK(fm.pcd->cd == 0.0);
    CHECK(fm.pcd->f_score == 1.0);
    CHECK(fm.range->rmse == 0.0);
    CHECK(fm.range->psnr == 100.0);
    CHECK(fm.raydrop->accuracy == 1.0);
    CHECK(fm.camera->rmse == 0.0);
  }
  CHECK(all.average.pcd->cd == 0.0);

  // foreground + background pixel counts partition the hits
  const FrameRecord& fr = ds.frames[3];
  size_t fg = 0, hits = 0;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 96; ++j) {
      fg += fr.fg_lidar.at(i, j) != 0.0f ? 1 : 0;
      hits += fr.lidar.hit(i, j) ? 1 : 0;
    }
  CHECK(fg > 0);
  CHECK(fg < hits);

  MetricReport fg_report = evaluate_predictions(ds, preds, true);
  CHECK(fg_report.scope == "foreground");
  REQUIRE(fg_report.frames[0].pcd.has_value());
  CHECK(fg_report.frames[0].pcd->cd == 0.0);

  // static scene: foreground metrics are missing
  SceneSpec sscene = build_scene(32, "static", 3);
  SceneDataset sds = simulate_dataset(sscene, default_lidar_spec(8, 48), default_camera_spec(16, 12));
  std::vector<FramePrediction> spreds;
  FramePrediction sp;
  sp.frame = 1;
  sp.lidar.pano = sds.frames[1].lidar;
  sp.lidar.hit_prob = Raster(8, 48, 1);
  spreds.push_back(std::move(sp));
  MetricReport sfg = evaluate_predictions(sds, spreds, true);
  CHECK_FALSE(sfg.frames[0].pcd.has_value());
  CHECK_FALSE(sfg.frames[0].range.has_value());

  // JSON and table render without crashing and carry the scope
  std::ostringstream table;
  all.print_table(table);
  CHECK(table.str().find("avg") != std::string::npos);
  CHECK(all.to_json().find("\"scope\"") != std::string::npos);
}

TEST_CASE("foreground pcd on a hand-built example matches the masked oracle") {
  // 10 synthetic points, 4 of them foreground; the foreground CD must equal
  // a direct chamfer on the masked subsets.
  SceneSpec scene = build_scene(33, "dynamic", 4);
  SceneDataset ds = simulate_dataset(scene, default_lidar_spec(12, 64), default_camera_spec(16, 12));
  const int f = 2;
  const FrameRecord& fr = ds.frames[static_cast<size_t>(f)];

  FramePrediction fp;
  fp.frame = f;
  fp.lidar.pano = fr.lidar;
  // perturb predicted depths on foreground pixels only
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 64; ++j)
      if (fr.fg_lidar.at(i, j) != 0.0f)
        fp.lidar.pano.raster.at(i, j, 0) += 0.25f;
  fp.lidar.hit_prob = Raster(12, 64, 1);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 64; ++j) fp.lidar.hit_prob.at(i, j) = fr.lidar.hit(i, j) ? 1.0f : 0.0f;

  std::vector<Vec3> pred_fg, gt_fg;
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 64; ++j) {
      if (fr.fg_lidar.at(i, j) == 0.0f || !fr.lidar.hit(i, j)) continue;
      const Ray ray = lidar_pixel_to_ray(ds.lidar_spec, fr.ego, i, j);
      pred_fg.push_back(ray.origin + ray.dir * fp.lidar.pano.depth(i, j));
      gt_fg.push_back(ray.origin + ray.dir * fr.lidar.depth(i, j));
    }
  REQUIRE(gt_fg.size() > 4);

  MetricReport report = evaluate_predictions(ds, {fp}, true);
  REQUIRE(report.frames[0].pcd.has_value());
  const PcdMetrics oracle = pcd_metrics(pred_fg, gt_fg, kDefaultFScoreThreshold);
  CHECK(report.frames[0].pcd->cd == doctest::Approx(oracle.cd).epsilon(1e-12));
  CHECK(report.frames[0].pcd->f_score == doctest::Approx(oracle.f_score).epsilon(1e-12));
}

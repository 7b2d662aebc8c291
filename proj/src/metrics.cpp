#include "nvsf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <stdexcept>

#include "nvsf/losses.hpp"

using json = nlohmann::json;

namespace nvsf {

PcdMetrics pcd_metrics(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double f_threshold) {
  if (pred.empty() || gt.empty()) throw std::invalid_argument("pcd_metrics: empty point cloud");
  PcdMetrics out;
  out.cd = chamfer(pred, gt);
  const auto nn_pred = nearest_indices(pred, gt);
  const auto nn_gt = nearest_indices(gt, pred);
  int64_t pred_close = 0, gt_close = 0;
  for (size_t k = 0; k < pred.size(); ++k)
    if ((pred[k] - gt[static_cast<size_t>(nn_pred[k])]).norm() <= f_threshold) ++pred_close;
  for (size_t k = 0; k < gt.size(); ++k)
    if ((gt[k] - pred[static_cast<size_t>(nn_gt[k])]).norm() <= f_threshold) ++gt_close;
  const double precision = static_cast<double>(pred_close) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(gt_close) / static_cast<double>(gt.size());
  out.f_score = (precision + recall) > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return out;
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

double psnr_of(double rmse, double data_range) {
  if (rmse <= 0.0) return 100.0;
  return std::min(100.0, 20.0 * std::log10(data_range / rmse));
}

}  // namespace

ImageMetrics image_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<uint8_t>& valid, int rows, int cols, double data_range) {
  if (pred.size() != gt.size() || pred.size() != valid.size())
    throw std::invalid_argument("image_metrics: shape mismatch");
  if (data_range <= 0) throw std::invalid_argument("image_metrics: data range must be positive");
  int64_t count = 0;
  double se = 0.0;
  for (size_t k = 0; k < pred.size(); ++k) {
    if (!valid[k]) continue;
    const double d = pred[k] - gt[k];
    se += d * d;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("image_metrics: empty valid mask");
  ImageMetrics out;
  out.rmse = std::sqrt(se / static_cast<double>(count));
  out.psnr = psnr_of(out.rmse, data_range);

  // SSIM over fully-valid 11x11 windows
  const int half = kSsimWindow / 2;
  double w[kSsimWindow][kSsimWindow];
  double wsum = 0.0;
  for (int a = 0; a < kSsimWindow; ++a)
    for (int b = 0; b < kSsimWindow; ++b) {
      const double da = a - half, db = b - half;
      w[a][b] = std::exp(-(da * da + db * db) / (2.0 * kSsimSigma * kSsimSigma));
      wsum += w[a][b];
    }
  for (auto& row : w)
    for (double& v : row) v /= wsum;
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  double ssim_acc = 0.0;
  int64_t windows = 0;
  for (int i = 0; i + kSsimWindow <= rows; ++i)
    for (int j = 0; j + kSsimWindow <= cols; ++j) {
      bool ok = true;
      for (int a = 0; ok && a < kSsimWindow; ++a)
        for (int b = 0; ok && b < kSsimWindow; ++b)
          ok = valid[static_cast<size_t>((i + a) * cols + (j + b))] != 0;
      if (!ok) continue;
      double mx = 0, my = 0;
      for (int a = 0; a < kSsimWindow; ++a)
        for (int b = 0; b < kSsimWindow; ++b) {
          const size_t idx = static_cast<size_t>((i + a) * cols + (j + b));
          mx += w[a][b] * pred[idx];
          my += w[a][b] * gt[idx];
        }
      double vx = 0, vy = 0, cov = 0;
      for (int a = 0; a < kSsimWindow; ++a)
        for (int b = 0; b < kSsimWindow; ++b) {
          const size_t idx = static_cast<size_t>((i + a) * cols + (j + b));
          const double dx = pred[idx] - mx, dy = gt[idx] - my;
          vx += w[a][b] * dx * dx;
          vy += w[a][b] * dy * dy;
          cov += w[a][b] * dx * dy;
        }
      ssim_acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  out.ssim = windows > 0 ? ssim_acc / static_cast<double>(windows)
                         : std::numeric_limits<double>::quiet_NaN();
  return out;
}

RaydropMetrics raydrop_metrics(const std::vector<double>& pred_drop_prob,
                               const std::vector<uint8_t>& gt_drop) {
  if (pred_drop_prob.size() != gt_drop.size())
    throw std::invalid_argument("raydrop_metrics: shape mismatch");
  RaydropMetrics out;
  double se = 0.0;
  int64_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (size_t k = 0; k < pred_drop_prob.size(); ++k) {
    const double target = gt_drop[k] ? 1.0 : 0.0;
    se += (pred_drop_prob[k] - target) * (pred_drop_prob[k] - target);
    const bool pred_dropped = pred_drop_prob[k] > 0.5;  // ties resolve to kept
    const bool is_dropped = gt_drop[k] != 0;
    correct += pred_dropped == is_dropped ? 1 : 0;
    tp += (pred_dropped && is_dropped) ? 1 : 0;
    fp += (pred_dropped && !is_dropped) ? 1 : 0;
    fn += (!pred_dropped && is_dropped) ? 1 : 0;
  }
  const double n = static_cast<double>(pred_drop_prob.size());
  out.rmse = std::sqrt(se / n);
  out.accuracy = static_cast<double>(correct) / n;
  if (tp + fp + fn == 0) {
    out.f_score = 1.0;  // no positives anywhere: vacuously perfect
  } else {
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    out.f_score = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return out;
}

namespace {

json metrics_json(const FrameMetrics& fm) {
  json j;
  j["frame"] = fm.frame;
  auto put_img = [&](const char* key, const std::optional<ImageMetrics>& m) {
    if (!m) {
      j[key] = nullptr;
      return;
    }
    j[key] = {{"rmse", m->rmse}, {"psnr", m->psnr}};
    if (std::isnan(m->ssim)) j[key]["ssim"] = nullptr;
    else j[key]["ssim"] = m->ssim;
  };
  if (fm.pcd) j["pcd"] = {{"cd", fm.pcd->cd}, {"f_score", fm.pcd->f_score}};
  else j["pcd"] = nullptr;
  put_img("range", fm.range);
  put_img("intensity", fm.intensity);
  if (fm.raydrop)
    j["raydrop"] = {{"rmse", fm.raydrop->rmse},
                    {"accuracy", fm.raydrop->accuracy},
                    {"f_score", fm.raydrop->f_score}};
  else j["raydrop"] = nullptr;
  put_img("camera", fm.camera);
  return j;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "...";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

std::string MetricReport::to_json() const {
  json j;
  j["scope"] = scope;
  j["frames"] = json::array();
  for (const FrameMetrics& fm : frames) j["frames"].push_back(metrics_json(fm));
  j["average"] = metrics_json(average);
  return j.dump(2);
}

void MetricReport::print_table(std::ostream& out) const {
  out << "scope: " << scope << "\n";
  out << "frame |  PCD CD  F-score | Range RMSE  PSNR   SSIM | Int RMSE   PSNR   SSIM |"
         " Drop RMSE  Acc  F-score | Cam RMSE   PSNR   SSIM\n";
  auto row = [&](const FrameMetrics& fm, const std::string& label) {
    out << std::setw(5) << label << " | ";
    if (fm.pcd) out << fmt(fm.pcd->cd) << " " << fmt(fm.pcd->f_score);
    else out << "   --        --";
    auto img = [&](const std::optional<ImageMetrics>& m) {
      if (m) out << " | " << fmt(m->rmse) << " " << fmt(m->psnr) << " " << fmt(m->ssim);
      else out << " |    --      --     --";
    };
    img(fm.range);
    img(fm.intensity);
    if (fm.raydrop)
      out << " | " << fmt(fm.raydrop->rmse) << " " << fmt(fm.raydrop->accuracy) << " "
          << fmt(fm.raydrop->f_score);
    else out << " |    --     --     --";
    img(fm.camera);
    out << "\n";
  };
  for (const FrameMetrics& fm : frames) row(fm, std::to_string(fm.frame));
  row(average, "avg");
}

namespace {

// Average the present per-frame entries. Missing entries are skipped.
FrameMetrics average_frames(const std::vector<FrameMetrics>& frames) {
  FrameMetrics avg;
  avg.frame = -1;
  auto avg_img = [&](auto getter) -> std::optional<ImageMetrics> {
    ImageMetrics acc{0, 0, 0};
    int n = 0, ssim_n = 0;
    double ssim_acc = 0;
    for (const FrameMetrics& fm : frames) {
      const auto& m = getter(fm);
      if (!m) continue;
      acc.rmse += m->rmse;
      acc.psnr += m->psnr;
      if (!std::isnan(m->ssim)) {
        ssim_acc += m->ssim;
        ++ssim_n;
      }
      ++n;
    }
    if (!n) return std::nullopt;
    acc.rmse /= n;
    acc.psnr /= n;
    acc.ssim = ssim_n ? ssim_acc / ssim_n : std::numeric_limits<double>::quiet_NaN();
    return acc;
  };
  avg.range = avg_img([](const FrameMetrics& fm) -> const std::optional<ImageMetrics>& { return fm.range; });
  avg.intensity =
      avg_img([](const FrameMetrics& fm) -> const std::optional<ImageMetrics>& { return fm.intensity; });
  avg.camera =
      avg_img([](const FrameMetrics& fm) -> const std::optional<ImageMetrics>& { return fm.camera; });
  {
    PcdMetrics acc{0, 0};
    int n = 0;
    for (const FrameMetrics& fm : frames)
      if (fm.pcd) {
        acc.cd += fm.pcd->cd;
        acc.f_score += fm.pcd->f_score;
        ++n;
      }
    if (n) avg.pcd = PcdMetrics{acc.cd / n, acc.f_score / n};
  }
  {
    RaydropMetrics acc{0, 0, 0};
    int n = 0;
    for (const FrameMetrics& fm : frames)
      if (fm.raydrop) {
        acc.rmse += fm.raydrop->rmse;
        acc.accuracy += fm.raydrop->accuracy;
        acc.f_score += fm.raydrop->f_score;
        ++n;
      }
    if (n) avg.raydrop = RaydropMetrics{acc.rmse / n, acc.accuracy / n, acc.f_score / n};
  }
  return avg;
}

}  // namespace

MetricReport evaluate_predictions(const SceneDataset& ds, const std::vector<FramePrediction>& preds,
                                  bool foreground, double f_threshold) {
  MetricReport report;
  report.scope = foreground ? "foreground" : "all";
  for (const FramePrediction& fp : preds) {
    const FrameRecord& fr = ds.frames[static_cast<size_t>(fp.frame)];
    FrameMetrics fm;
    fm.frame = fp.frame;
    const int rows = ds.lidar_spec.rows, cols = ds.lidar_spec.cols;
    const size_t total = static_cast<size_t>(rows) * cols;

    std::vector<uint8_t> scope_mask(total, 1);
    if (foreground)
      for (size_t k = 0; k < total; ++k)
        scope_mask[k] = fr.fg_lidar.data[k] != 0.0f ? 1 : 0;

    // point clouds from source pixels within scope
    std::vector<Vec3> pred_points, gt_points;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        if (!scope_mask[static_cast<size_t>(i * cols + j)]) continue;
        const Ray ray = lidar_pixel_to_ray(ds.lidar_spec, fr.ego, i, j);
        if (fp.lidar.pano.hit(i, j))
          pred_points.push_back(ray.origin + ray.dir * fp.lidar.pano.depth(i, j));
        if (fr.lidar.hit(i, j)) gt_points.push_back(ray.origin + ray.dir * fr.lidar.depth(i, j));
      }
    if (!pred_points.empty() && !gt_points.empty())
      fm.pcd = pcd_metrics(pred_points, gt_points, f_threshold);

    // range / intensity on ground-truth hit pixels inside the scope
    std::vector<double> pred_depth(total), gt_depth(total), pred_int(total), gt_int(total);
    std::vector<uint8_t> hit_valid(total);
    std::vector<double> drop_prob(total);
    std::vector<uint8_t> gt_drop(total);
    size_t scoped = 0, hits = 0;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        const size_t k = static_cast<size_t>(i * cols + j);
        pred_depth[k] = fp.lidar.pano.depth(i, j);
        gt_depth[k] = fr.lidar.depth(i, j);
        pred_int[k] = fp.lidar.pano.intensity(i, j);
        gt_int[k] = fr.lidar.intensity(i, j);
        hit_valid[k] = (scope_mask[k] && fr.lidar.hit(i, j)) ? 1 : 0;
        drop_prob[k] = 1.0 - fp.lidar.hit_prob.at(i, j);
        gt_drop[k] = fr.lidar.hit(i, j) ? 0 : 1;
        scoped += scope_mask[k];
        hits += hit_valid[k];
      }
    if (hits > 0) {
      fm.range = image_metrics(pred_depth, gt_depth, hit_valid, rows, cols, ds.lidar_spec.max_range);
      fm.intensity = image_metrics(pred_int, gt_int, hit_valid, rows, cols, 1.0);
    }
    if (scoped > 0) {
      std::vector<double> dp;
      std::vector<uint8_t> dg;
      for (size_t k = 0; k < total; ++k)
        if (scope_mask[k]) {
          dp.push_back(drop_prob[k]);
          dg.push_back(gt_drop[k]);
        }
      fm.raydrop = raydrop_metrics(dp, dg);
    }

    if (fp.camera) {
      const int ch = fr.camera.rows, cw = fr.camera.cols;
      const size_t ctotal = static_cast<size_t>(ch) * cw * 3;
      std::vector<double> pred_rgb(ctotal), gt_rgb(ctotal);
      std::vector<uint8_t> cam_valid(ctotal, 1);
      size_t cam_count = 0;
      for (int v = 0; v < ch; ++v)
        for (int u = 0; u < cw; ++u)
          for (int c = 0; c < 3; ++c) {
            const size_t k = (static_cast<size_t>(v) * cw + u) * 3 + c;
            pred_rgb[k] = fp.camera->at(v, u, c);
            gt_rgb[k] = fr.camera.at(v, u, c);
            cam_valid[k] = foreground ? (fr.fg_camera.at(v, u) != 0.0f ? 1 : 0) : 1;
            cam_count += cam_valid[k];
          }
      // SSIM windows operate on the luminance-like per-channel layout; feed
      // rows x (cols*3) so channel triplets stay adjacent.
      if (cam_count > 0)
        fm.camera = image_metrics(pred_rgb, gt_rgb, cam_valid, ch, cw * 3, 1.0);
    }
    report.frames.push_back(std::move(fm));
  }
  report.average = average_frames(report.frames);
  return report;
}

}  // namespace nvsf

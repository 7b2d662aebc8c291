#include "nvsf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace nvsf {

namespace {

struct KeyValue {
  std::string key, value;
};

std::vector<KeyValue> parse_flat_config(const std::string& text) {
  std::vector<KeyValue> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value, got '" + line + "'");
    out.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1))});
  }
  return out;
}

}  // namespace

TrainConfig TrainConfig::from_string(const std::string& text) {
  TrainConfig cfg;
  for (const KeyValue& kv : parse_flat_config(text)) {
    const std::string& k = kv.key;
    auto d = [&] { return std::stod(kv.value); };
    auto i = [&] { return std::stoi(kv.value); };
    auto b = [&] { return kv.value == "1" || kv.value == "true" || kv.value == "on"; };
    if (k == "max_iterations") cfg.max_iterations = i();
    else if (k == "batch_rays") cfg.batch_rays = i();
    else if (k == "lr_initial") cfg.lr_initial = d();
    else if (k == "lr_final_factor") cfg.lr_final_factor = d();
    else if (k == "lambda_flow") cfg.weights.flow = d();
    else if (k == "lambda_depth") cfg.weights.depth = d();
    else if (k == "lambda_intensity") cfg.weights.intensity = d();
    else if (k == "lambda_raydrop") cfg.weights.raydrop = d();
    else if (k == "lambda_grad") cfg.weights.grad = d();
    else if (k == "lambda_rgb") cfg.weights.rgb = d();
    else if (k == "seed") cfg.seed = static_cast<uint64_t>(std::stoull(kv.value));
    else if (k == "modality") cfg.modality = kv.value;
    else if (k == "patch_quota") cfg.patch_quota = i();
    else if (k == "patch_size") cfg.patch_size = i();
    else if (k == "heuristic_sampling") cfg.heuristic_sampling = b();
    else if (k == "heuristic_period") cfg.heuristic_period = i();
    else if (k == "jitter_eps") cfg.jitter_eps = d();
    else if (k == "flow") cfg.flow = b();
    else if (k == "flow_points") cfg.flow_points = i();
    else if (k == "samples_per_ray") cfg.samples_per_ray = i();
    else if (k == "gradient_tau") cfg.gradient_tau = d();
    else if (k == "val_interval") cfg.val_interval = i();
    else if (k == "chunk_rays") cfg.chunk_rays = i();
    else if (k == "hash_levels") cfg.field.encoders.hash.levels = i();
    else if (k == "hash_features") cfg.field.encoders.hash.features = i();
    else if (k == "hash_table_log2") cfg.field.encoders.hash.table_size = int64_t(1) << i();
    else if (k == "hash_base_resolution") cfg.field.encoders.hash.base_resolution = i();
    else if (k == "hash_growth") cfg.field.encoders.hash.growth = d();
    else if (k == "plane_spatial_res") cfg.field.encoders.planes.spatial_res = i();
    else if (k == "plane_time_res") cfg.field.encoders.planes.time_res = i();
    else if (k == "plane_features") cfg.field.encoders.planes.features = i();
    else if (k == "trunk_layers") cfg.field.trunk_layers = i();
    else if (k == "trunk_width") cfg.field.trunk_width = i();
    else if (k == "geo_features") cfg.field.geo_features = i();
    else if (k == "head_width") cfg.field.head_width = i();
    else if (k == "sh_degree") cfg.field.sh_degree = i();
    else if (k == "flow_layers") cfg.field.flow_layers = i();
    else if (k == "flow_width") cfg.field.flow_width = i();
    else if (k == "flow_pos_octaves") cfg.field.flow_pos_octaves = i();
    else if (k == "flow_time_octaves") cfg.field.flow_time_octaves = i();
    else throw std::invalid_argument("config: unknown key '" + k + "'");
  }
  if (cfg.modality != "lidar-only" && cfg.modality != "camera-only" && cfg.modality != "multimodal")
    throw std::invalid_argument("config: bad modality '" + cfg.modality + "'");
  if (cfg.max_iterations < 1 || cfg.batch_rays < 1 || cfg.samples_per_ray < 2)
    throw std::invalid_argument("config: counts must be positive");
  if (cfg.lr_final_factor <= 0.0 || cfg.lr_final_factor > 1.0)
    throw std::invalid_argument("config: lr_final_factor must be in (0,1]");
  return cfg;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_string(text);
}

std::string TrainConfig::to_string() const {
  std::ostringstream out;
  out << "max_iterations = " << max_iterations << "\n";
  out << "batch_rays = " << batch_rays << "\n";
  out << "lr_initial = " << lr_initial << "\n";
  out << "lr_final_factor = " << lr_final_factor << "\n";
  out << "lambda_flow = " << weights.flow << "\n";
  out << "lambda_depth = " << weights.depth << "\n";
  out << "lambda_intensity = " << weights.intensity << "\n";
  out << "lambda_raydrop = " << weights.raydrop << "\n";
  out << "lambda_grad = " << weights.grad << "\n";
  out << "lambda_rgb = " << weights.rgb << "\n";
  out << "seed = " << seed << "\n";
  out << "modality = " << modality << "\n";
  out << "patch_quota = " << patch_quota << "\n";
  out << "patch_size = " << patch_size << "\n";
  out << "heuristic_sampling = " << (heuristic_sampling ? 1 : 0) << "\n";
  out << "heuristic_period = " << heuristic_period << "\n";
  out << "jitter_eps = " << jitter_eps << "\n";
  out << "flow = " << (flow ? 1 : 0) << "\n";
  out << "flow_points = " << flow_points << "\n";
  out << "samples_per_ray = " << samples_per_ray << "\n";
  out << "gradient_tau = " << gradient_tau << "\n";
  out << "val_interval = " << val_interval << "\n";
  out << "chunk_rays = " << chunk_rays << "\n";
  return out.str();
}

double lr_at(int64_t iter, const TrainConfig& cfg) {
  const double progress = static_cast<double>(iter) / static_cast<double>(cfg.max_iterations);
  return cfg.lr_initial * std::pow(cfg.lr_final_factor, progress);
}

Adam::Adam(const ParameterStore& store, const AdamConfig& cfg) : cfg_(cfg) {
  m_.resize(store.count());
  v_.resize(store.count());
  for (size_t p = 0; p < store.count(); ++p) {
    m_[p].assign(store.entry(static_cast<int>(p)).value.size(), 0.0);
    v_[p].assign(store.entry(static_cast<int>(p)).value.size(), 0.0);
  }
}

void Adam::step(ParameterStore& store, Tape& tape, double lr) {
  // Aggregate gradients per parameter first: a parameter bound more than once
  // must still receive exactly one update.
  std::map<int, std::vector<double>> grads;
  for (const auto& [pidx, nid] : tape.param_bindings()) {
    const auto& g = tape.node(nid).grad;
    if (g.empty()) continue;
    auto& slot = grads[pidx];
    if (slot.empty()) slot.assign(g.begin(), g.end());
    else
      for (size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [pidx, g] : grads) {
    auto& entry = store.entry(pidx);
    for (double gv : g)
      if (std::isnan(gv))
        throw std::runtime_error("adam: NaN gradient in parameter " + entry.name);
    auto& m = m_[static_cast<size_t>(pidx)];
    auto& v = v_[static_cast<size_t>(pidx)];
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      entry.value[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

std::vector<NamedTensor> Adam::state_tensors(const ParameterStore& store) const {
  std::vector<NamedTensor> out;
  for (size_t p = 0; p < store.count(); ++p) {
    const auto& e = store.entry(static_cast<int>(p));
    out.push_back({"__adam/m/" + e.name, e.shape, m_[p]});
    out.push_back({"__adam/v/" + e.name, e.shape, v_[p]});
  }
  out.push_back({"__adam/step", {1}, {static_cast<double>(step_)}});
  return out;
}

void Adam::load_state(const ParameterStore& store, const std::vector<NamedTensor>& items) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& item : items) by_name[item.name] = &item;
  for (size_t p = 0; p < store.count(); ++p) {
    const auto& e = store.entry(static_cast<int>(p));
    const auto m = by_name.find("__adam/m/" + e.name);
    const auto v = by_name.find("__adam/v/" + e.name);
    if (m == by_name.end() || v == by_name.end())
      throw std::runtime_error("checkpoint: missing optimizer state for " + e.name);
    m_[p] = m->second->values;
    v_[p] = v->second->values;
  }
  const auto s = by_name.find("__adam/step");
  if (s == by_name.end()) throw std::runtime_error("checkpoint: missing optimizer step");
  step_ = static_cast<int64_t>(s->second->values[0]);
}

namespace {

std::vector<double> field_config_encode(const FieldConfig& f) {
  return {static_cast<double>(f.encoders.hash.levels),
          static_cast<double>(f.encoders.hash.features),
          std::log2(static_cast<double>(f.encoders.hash.table_size)),
          static_cast<double>(f.encoders.hash.base_resolution),
          f.encoders.hash.growth,
          static_cast<double>(f.encoders.planes.spatial_res),
          static_cast<double>(f.encoders.planes.time_res),
          static_cast<double>(f.encoders.planes.features),
          static_cast<double>(f.trunk_layers),
          static_cast<double>(f.trunk_width),
          static_cast<double>(f.geo_features),
          static_cast<double>(f.head_width),
          static_cast<double>(f.sh_degree),
          static_cast<double>(f.flow_layers),
          static_cast<double>(f.flow_width),
          static_cast<double>(f.flow_pos_octaves),
          static_cast<double>(f.flow_time_octaves)};
}

FieldConfig field_config_decode(const std::vector<double>& v) {
  if (v.size() != 17) throw std::runtime_error("checkpoint: bad field config payload");
  FieldConfig f;
  f.encoders.hash.levels = static_cast<int>(v[0]);
  f.encoders.hash.features = static_cast<int>(v[1]);
  f.encoders.hash.table_size = int64_t(1) << static_cast<int>(std::llround(v[2]));
  f.encoders.hash.base_resolution = static_cast<int>(v[3]);
  f.encoders.hash.growth = v[4];
  f.encoders.planes.spatial_res = static_cast<int>(v[5]);
  f.encoders.planes.time_res = static_cast<int>(v[6]);
  f.encoders.planes.features = static_cast<int>(v[7]);
  f.trunk_layers = static_cast<int>(v[8]);
  f.trunk_width = static_cast<int>(v[9]);
  f.geo_features = static_cast<int>(v[10]);
  f.head_width = static_cast<int>(v[11]);
  f.sh_degree = static_cast<int>(v[12]);
  f.flow_layers = static_cast<int>(v[13]);
  f.flow_width = static_cast<int>(v[14]);
  f.flow_pos_octaves = static_cast<int>(v[15]);
  f.flow_time_octaves = static_cast<int>(v[16]);
  return f;
}

std::vector<double> rng_state_encode(const Rng& rng) {
  std::vector<double> out(4);
  const auto state = rng.state();
  for (int i = 0; i < 4; ++i) std::memcpy(&out[static_cast<size_t>(i)], &state[static_cast<size_t>(i)], 8);
  return out;
}

void rng_state_decode(Rng& rng, const std::vector<double>& payload) {
  std::vector<uint64_t> state(4);
  for (int i = 0; i < 4; ++i) std::memcpy(&state[static_cast<size_t>(i)], &payload[static_cast<size_t>(i)], 8);
  rng.set_state(state);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Trainer::Trainer(const SceneDataset& ds, const TrainConfig& cfg) : ds_(ds), cfg_(cfg) {
  if (ds_.frames.size() < 2) throw std::invalid_argument("trainer: dataset needs at least 2 frames");
  field_ = std::make_unique<NvsfField>(cfg_.field, cfg_.seed);
  norm_ = fit_dataset_normalization(ds_);
  adam_ = Adam(field_->params(), AdamConfig{});
  rng_.reseed(cfg_.seed * 0x9e3779b97f4a7c15ull + 1);

  const int F = static_cast<int>(ds_.frames.size());
  const int val_count = F >= 8 ? 4 : 1;
  for (int k = 0; k < F - val_count; ++k) train_frames_.push_back(k);
  for (int k = F - val_count; k < F; ++k) val_frames_.push_back(k);

  for (int k = 0; k < F; ++k) {
    lidar_state_.emplace_back(ds_.lidar_spec.rows, ds_.lidar_spec.cols);
    camera_state_.emplace_back(ds_.camera_spec.height, ds_.camera_spec.width);
  }
}

std::vector<Vec3> Trainer::frame_points_subset(int frame, int count, Rng& rng) const {
  const FrameRecord& fr = ds_.frames[static_cast<size_t>(frame)];
  std::vector<Vec3> hits;
  for (int i = 0; i < fr.lidar.rows(); ++i)
    for (int j = 0; j < fr.lidar.cols(); ++j)
      if (fr.lidar.hit(i, j)) {
        const Ray ray = lidar_pixel_to_ray(ds_.lidar_spec, fr.ego, i, j);
        hits.push_back(norm_.apply(ray.origin + ray.dir * fr.lidar.depth(i, j)));
      }
  if (static_cast<int>(hits.size()) <= count) return hits;
  std::vector<Vec3> out;
  out.reserve(static_cast<size_t>(count));
  for (int k = 0; k < count; ++k) out.push_back(hits[rng.below(hits.size())]);
  return out;
}

IterationStats Trainer::train_one() {
  const double lr = lr_at(iteration_, cfg_);
  const int epoch_len = std::max<int>(1, static_cast<int>(train_frames_.size()));
  const int64_t epoch = iteration_ / epoch_len;
  const int frame = train_frames_[rng_.below(train_frames_.size())];
  sampled_frames_.insert(frame);
  const bool heuristic_on =
      cfg_.heuristic_sampling && ((epoch / std::max(1, cfg_.heuristic_period)) % 2 == 1);

  const bool use_lidar = cfg_.modality != "camera-only";
  const bool use_camera = cfg_.modality != "lidar-only";
  const int per_mod = (use_lidar && use_camera) ? std::max(1, cfg_.batch_rays / 2) : cfg_.batch_rays;

  Tape tape;
  auto bound = field_->bind(tape);
  const TimeContext tc = frame_time_context(ds_, frame);
  LossParts parts;

  std::vector<int> lidar_pixels;
  std::vector<double> lidar_ray_losses;
  std::vector<int> camera_pixels;
  std::vector<double> camera_ray_losses;

  if (use_lidar) {
    auto& state = lidar_state_[static_cast<size_t>(frame)];
    lidar_pixels = heuristic_on ? heuristic_sample(state, per_mod, cfg_.jitter_eps, rng_)
                                : uniform_sample(state.rows, state.cols, per_mod, rng_);
    // whole 8x8 patches provide the pixels the gradient loss needs
    std::vector<Patch> patches;
    const bool want_patches = cfg_.weights.grad > 0 && cfg_.patch_quota > 0 &&
                              ds_.lidar_spec.rows >= cfg_.patch_size &&
                              ds_.lidar_spec.cols >= cfg_.patch_size;
    if (want_patches) {
      for (int q = 0; q < cfg_.patch_quota; ++q) {
        Patch p;
        p.height = p.width = cfg_.patch_size;
        p.row0 = static_cast<int>(rng_.below(static_cast<uint64_t>(ds_.lidar_spec.rows - cfg_.patch_size + 1)));
        p.col0 = static_cast<int>(rng_.below(static_cast<uint64_t>(ds_.lidar_spec.cols - cfg_.patch_size + 1)));
        patches.push_back(p);
        const auto idx = patch_pixel_indices(ds_.lidar_spec.rows, ds_.lidar_spec.cols, p);
        lidar_pixels.insert(lidar_pixels.end(), idx.begin(), idx.end());
      }
    }

    PixelRays pr = gather_pixels(ds_, norm_, frame, Modality::Lidar, lidar_pixels);
    SampleSet set = sample_rays(pr.batch, cfg_.samples_per_ray, true, rng_);
    auto q = field_->query_lidar(tape, bound, set.positions, set.dirs, tc, cfg_.flow);
    CompositeOut comp = composite_depth(tape, q.sigma, set);
    Tensor pred_intensity = composite_value(tape, comp.weights, q.intensity, set);
    Tensor pred_hit_prob = composite_value(tape, comp.weights, q.raydrop, set);

    parts.depth = depth_loss(tape, comp.depth, pr.gt_depth, pr.gt_hit);
    parts.intensity = intensity_loss(tape, pred_intensity, pr.gt_intensity, pr.gt_hit);
    parts.raydrop = raydrop_loss(tape, pred_hit_prob, pr.gt_hit);
    if (want_patches) {
      const int64_t head = per_mod;
      const int64_t patch_rows = static_cast<int64_t>(lidar_pixels.size()) - head;
      Tensor patch_depths = tape.slice(comp.depth, 0, head, patch_rows);
      const std::vector<double> patch_gt(pr.gt_depth.begin() + head, pr.gt_depth.end());
      parts.grad = gradient_loss(tape, patch_depths, patch_gt, patches, cfg_.gradient_tau);
    }

    // per-ray reconstruction losses feed the sampling map
    const auto pd = comp.depth.values();
    const auto pi = pred_intensity.values();
    const auto pp = pred_hit_prob.values();
    lidar_ray_losses.resize(lidar_pixels.size());
    for (size_t r = 0; r < lidar_pixels.size(); ++r) {
      const double hit = pr.gt_hit[r];
      const double dd = std::abs(pd[r] - pr.gt_depth[r]) * hit;
      const double di = (pi[r] - pr.gt_intensity[r]) * (pi[r] - pr.gt_intensity[r]) * hit;
      const double dp = (pp[r] - hit) * (pp[r] - hit);
      lidar_ray_losses[r] = dd + di + dp;
    }
  }

  if (use_camera) {
    auto& state = camera_state_[static_cast<size_t>(frame)];
    camera_pixels = heuristic_on ? heuristic_sample(state, per_mod, cfg_.jitter_eps, rng_)
                                 : uniform_sample(state.rows, state.cols, per_mod, rng_);
    PixelRays pr = gather_pixels(ds_, norm_, frame, Modality::Camera, camera_pixels);
    SampleSet set = sample_rays(pr.batch, cfg_.samples_per_ray, true, rng_);
    auto q = field_->query_camera(tape, bound, set.positions, set.dirs, tc, cfg_.flow);
    Tensor weights = composite_weights(tape, q.sigma, set);
    Tensor pred_rgb = composite_value(tape, weights, q.rgb, set);
    parts.rgb = rgb_loss(tape, pred_rgb, pr.gt_rgb);

    const auto pv = pred_rgb.values();
    camera_ray_losses.resize(camera_pixels.size());
    for (size_t r = 0; r < camera_pixels.size(); ++r) {
      double acc = 0;
      for (int c = 0; c < 3; ++c) {
        const double d = pv[3 * r + static_cast<size_t>(c)] - pr.gt_rgb[3 * r + static_cast<size_t>(c)];
        acc += d * d;
      }
      camera_ray_losses[r] = acc;
    }
  }

  if (cfg_.flow && cfg_.weights.flow > 0 && (tc.has_prev || tc.has_next)) {
    const std::vector<Vec3> current = frame_points_subset(frame, cfg_.flow_points, rng_);
    std::vector<Vec3> prev, next;
    if (tc.has_prev) prev = frame_points_subset(frame - 1, cfg_.flow_points, rng_);
    if (tc.has_next) next = frame_points_subset(frame + 1, cfg_.flow_points, rng_);
    if (!current.empty() && (!prev.empty() || !next.empty())) {
      std::vector<double> flat(current.size() * 3);
      for (size_t k = 0; k < current.size(); ++k) {
        flat[3 * k] = current[k].x;
        flat[3 * k + 1] = current[k].y;
        flat[3 * k + 2] = current[k].z;
      }
      parts.flow = flow_loss(tape, *field_, bound, flat, tc.t, prev.empty() ? nullptr : &prev,
                             next.empty() ? nullptr : &next);
    }
  }

  Tensor total = total_loss(tape, parts, cfg_.weights);
  IterationStats stats;
  stats.iteration = iteration_;
  stats.lr = lr;
  stats.total = total.value();
  auto part_value = [](const std::optional<Tensor>& t) { return t ? t->value() : 0.0; };
  stats.flow = part_value(parts.flow);
  stats.depth = part_value(parts.depth);
  stats.intensity = part_value(parts.intensity);
  stats.raydrop = part_value(parts.raydrop);
  stats.grad = part_value(parts.grad);
  stats.rgb = part_value(parts.rgb);

  tape.backward(total);
  for (const auto& [pidx, nid] : tape.param_bindings()) {
    const auto& g = tape.node(nid).grad;
    for (double gv : g)
      if (gv != 0.0) {
        touched_.insert(pidx);
        break;
      }
  }
  adam_.step(field_->params(), tape, lr);

  if (use_lidar) lidar_state_[static_cast<size_t>(frame)].update(lidar_pixels, lidar_ray_losses);
  if (use_camera) camera_state_[static_cast<size_t>(frame)].update(camera_pixels, camera_ray_losses);

  ++iteration_;
  history_.push_back(stats);
  return stats;
}

void Trainer::train_iterations(int n) {
  for (int k = 0; k < n; ++k) train_one();
}

FramePrediction Trainer::render_frame(int frame) const {
  RenderConfig rc;
  rc.samples_per_ray = cfg_.samples_per_ray;
  rc.chunk_rays = cfg_.chunk_rays;
  const TimeContext tc = frame_time_context(ds_, frame);
  FramePrediction fp;
  fp.frame = frame;
  fp.lidar = render_lidar_frame(*field_, ds_.lidar_spec, ds_.lidar_pose(frame), norm_, tc, cfg_.flow, rc);
  if (cfg_.modality != "lidar-only")
    fp.camera = render_camera_frame(*field_, ds_.camera_spec, ds_.camera_pose(frame), norm_, tc,
                                    cfg_.flow, rc);
  return fp;
}

MetricReport Trainer::evaluate(const std::vector<int>& frames, bool foreground) const {
  std::vector<FramePrediction> preds;
  for (int f : frames) preds.push_back(render_frame(f));
  return evaluate_predictions(ds_, preds, foreground);
}

TrainResult Trainer::run(const std::string& out_dir) {
  std::ofstream csv;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    csv.open(fs::path(out_dir) / "losses.csv", std::ios::app);
    if (csv.tellp() == 0)
      csv << "iteration,flow,depth,intensity,raydrop,grad,rgb,total,lr\n";
  }
  while (iteration_ < cfg_.max_iterations) {
    const IterationStats s = train_one();
    if (csv.is_open())
      csv << s.iteration << "," << s.flow << "," << s.depth << "," << s.intensity << "," << s.raydrop
          << "," << s.grad << "," << s.rgb << "," << s.total << "," << s.lr << "\n";
  }
  TrainResult result;
  result.train_frames = train_frames_;
  result.val_frames = val_frames_;
  result.history = history_;
  result.iterations = iteration_;
  {
    // render the validation frames once and score both scopes from it
    std::vector<FramePrediction> preds;
    for (int f : val_frames_) preds.push_back(render_frame(f));
    result.validation = evaluate_predictions(ds_, preds, false);
    result.validation_fg = evaluate_predictions(ds_, preds, true);
  }
  if (!out_dir.empty()) {
    save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string());
    std::ofstream(fs::path(out_dir) / "report_all.json") << result.validation.to_json() << "\n";
    std::ofstream(fs::path(out_dir) / "report_foreground.json") << result.validation_fg.to_json() << "\n";
  }
  return result;
}

void Trainer::save_checkpoint(const std::string& path) const {
  std::vector<NamedTensor> items;
  const ParameterStore& store = field_->params();
  for (size_t p = 0; p < store.count(); ++p) {
    const auto& e = store.entry(static_cast<int>(p));
    items.push_back({e.name, e.shape, e.value});
  }
  const auto adam_items = adam_.state_tensors(store);
  items.insert(items.end(), adam_items.begin(), adam_items.end());
  items.push_back({"__state/iteration", {1}, {static_cast<double>(iteration_)}});
  items.push_back({"__state/rng", {4}, rng_state_encode(rng_)});
  items.push_back({"__state/normalization", {4}, {norm_.center.x, norm_.center.y, norm_.center.z, norm_.scale}});
  for (size_t f = 0; f < lidar_state_.size(); ++f)
    items.push_back({"__state/loss_map/lidar/" + std::to_string(f),
                     {static_cast<int64_t>(lidar_state_[f].loss_map.size())},
                     lidar_state_[f].loss_map});
  for (size_t f = 0; f < camera_state_.size(); ++f)
    items.push_back({"__state/loss_map/camera/" + std::to_string(f),
                     {static_cast<int64_t>(camera_state_[f].loss_map.size())},
                     camera_state_[f].loss_map});
  items.push_back({"__config/field", {17}, field_config_encode(cfg_.field)});
  items.push_back({"__config/flow", {1}, {cfg_.flow ? 1.0 : 0.0}});
  items.push_back({"__config/samples_per_ray", {1}, {static_cast<double>(cfg_.samples_per_ray)}});
  items.push_back({"__config/chunk_rays", {1}, {static_cast<double>(cfg_.chunk_rays)}});
  write_checkpoint(path, items);
}

void Trainer::load_checkpoint(const std::string& path) {
  const auto items = read_checkpoint(path);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& item : items) by_name[item.name] = &item;
  ParameterStore& store = field_->params();
  for (size_t p = 0; p < store.count(); ++p) {
    auto& e = store.entry(static_cast<int>(p));
    const auto it = by_name.find(e.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing parameter " + e.name);
    if (it->second->values.size() != e.value.size())
      throw std::runtime_error("checkpoint: size mismatch for " + e.name);
    e.value = it->second->values;
  }
  adam_.load_state(store, items);
  iteration_ = static_cast<int64_t>(by_name.at("__state/iteration")->values[0]);
  rng_state_decode(rng_, by_name.at("__state/rng")->values);
  const auto& nrm = by_name.at("__state/normalization")->values;
  norm_ = {{nrm[0], nrm[1], nrm[2]}, nrm[3]};
  for (size_t f = 0; f < lidar_state_.size(); ++f) {
    lidar_state_[f].loss_map = by_name.at("__state/loss_map/lidar/" + std::to_string(f))->values;
    camera_state_[f].loss_map = by_name.at("__state/loss_map/camera/" + std::to_string(f))->values;
  }
}

LoadedCheckpoint load_field_checkpoint(const std::string& path) {
  const auto items = read_checkpoint(path);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& item : items) by_name[item.name] = &item;
  const auto cfg_it = by_name.find("__config/field");
  if (cfg_it == by_name.end()) throw std::runtime_error("checkpoint: missing field config");
  LoadedCheckpoint out;
  FieldConfig fc = field_config_decode(cfg_it->second->values);
  out.field = std::make_unique<NvsfField>(fc, 0);
  ParameterStore& store = out.field->params();
  for (size_t p = 0; p < store.count(); ++p) {
    auto& e = store.entry(static_cast<int>(p));
    const auto it = by_name.find(e.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing parameter " + e.name);
    e.value = it->second->values;
  }
  const auto& nrm = by_name.at("__state/normalization")->values;
  out.norm = {{nrm[0], nrm[1], nrm[2]}, nrm[3]};
  out.flow = by_name.at("__config/flow")->values[0] != 0.0;
  out.samples_per_ray = static_cast<int>(by_name.at("__config/samples_per_ray")->values[0]);
  out.chunk_rays = static_cast<int>(by_name.at("__config/chunk_rays")->values[0]);
  return out;
}

namespace {

TrainConfig baseline_of(const TrainConfig& base, bool flow_toggled) {
  TrainConfig bl = base;
  bl.heuristic_sampling = false;
  bl.weights.grad = 0.0;
  bl.patch_quota = 0;
  bl.modality = "lidar-only";
  if (flow_toggled) {
    bl.flow = false;
    bl.weights.flow = 0.0;
  }
  return bl;
}

void apply_toggle(TrainConfig& cfg, const std::string& toggle, const TrainConfig& base) {
  if (toggle == "hs") {
    cfg.heuristic_sampling = true;
  } else if (toggle == "fa") {
    cfg.weights.grad = base.weights.grad > 0 ? base.weights.grad : 0.01;
    cfg.patch_quota = base.patch_quota > 0 ? base.patch_quota : 2;
  } else if (toggle == "ml") {
    cfg.modality = "multimodal";
  } else if (toggle == "flow") {
    cfg.flow = true;
    cfg.weights.flow = base.weights.flow > 0 ? base.weights.flow : 1.0;
  } else {
    throw std::invalid_argument("ablate: unknown toggle '" + toggle + "'");
  }
}

}  // namespace

AblationResult run_ablation(const SceneDataset& ds, const TrainConfig& base,
                            const std::vector<std::string>& toggles, int seeds) {
  if (seeds < 1) throw std::invalid_argument("ablate: need at least one seed");
  for (const auto& t : toggles)
    if (t != "hs" && t != "fa" && t != "ml" && t != "flow")
      throw std::invalid_argument("ablate: unknown toggle '" + t + "'");
  const bool flow_toggled = std::find(toggles.begin(), toggles.end(), "flow") != toggles.end();

  std::vector<std::pair<std::string, TrainConfig>> variants;
  const TrainConfig bl = baseline_of(base, flow_toggled);
  variants.emplace_back("BL", bl);
  for (const std::string& t : toggles) {
    TrainConfig cfg = bl;
    apply_toggle(cfg, t, base);
    std::string name = t;
    std::transform(name.begin(), name.end(), name.begin(), ::toupper);
    variants.emplace_back("+" + name, cfg);
  }
  const bool has_all = std::count(toggles.begin(), toggles.end(), "hs") &&
                       std::count(toggles.begin(), toggles.end(), "fa") &&
                       std::count(toggles.begin(), toggles.end(), "ml");
  if (has_all) {
    TrainConfig cfg = bl;
    apply_toggle(cfg, "hs", base);
    apply_toggle(cfg, "fa", base);
    apply_toggle(cfg, "ml", base);
    variants.emplace_back("All", cfg);
  }

  AblationResult result;
  result.single_seed_caveat = seeds == 1;
  for (auto& [name, cfg] : variants) {
    AblationRow row;
    row.name = name;
    for (int s = 0; s < seeds; ++s) {
      TrainConfig run_cfg = cfg;
      run_cfg.seed = base.seed + static_cast<uint64_t>(s);
      Trainer trainer(ds, run_cfg);
      TrainResult res = trainer.run("");
      double fg_cd = std::numeric_limits<double>::quiet_NaN();
      if (res.validation_fg.average.pcd) fg_cd = res.validation_fg.average.pcd->cd;
      else if (res.validation.average.pcd) fg_cd = res.validation.average.pcd->cd;
      row.fg_cd.push_back(fg_cd);
      row.range_rmse.push_back(res.validation.average.range ? res.validation.average.range->rmse
                                                            : std::numeric_limits<double>::quiet_NaN());
    }
    row.median_fg_cd = median_of(row.fg_cd);
    row.median_range_rmse = median_of(row.range_rmse);
    result.rows.push_back(std::move(row));
  }
  return result;
}

std::string AblationResult::table() const {
  std::ostringstream out;
  out << "variant | median fg CD | median range RMSE | per-seed fg CD\n";
  for (const AblationRow& row : rows) {
    out << row.name << " | " << row.median_fg_cd << " | " << row.median_range_rmse << " |";
    for (double v : row.fg_cd) out << " " << v;
    out << "\n";
  }
  if (single_seed_caveat) out << "note: single seed, medians are not robust\n";
  return out.str();
}

std::string AblationResult::to_json() const {
  json j;
  j["single_seed_caveat"] = single_seed_caveat;
  j["rows"] = json::array();
  for (const AblationRow& row : rows)
    j["rows"].push_back({{"name", row.name},
                         {"fg_cd", row.fg_cd},
                         {"range_rmse", row.range_rmse},
                         {"median_fg_cd", row.median_fg_cd},
                         {"median_range_rmse", row.median_range_rmse}});
  return j.dump(2);
}

}  // namespace nvsf

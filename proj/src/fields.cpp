#include "nvsf/fields.hpp"

#include <cmath>
#include <stdexcept>

namespace nvsf {

Mlp Mlp::create(ParameterStore& store, const std::string& prefix, const MlpConfig& cfg, Rng& rng) {
  Mlp mlp;
  mlp.cfg_ = cfg;
  std::vector<int> widths;
  widths.push_back(cfg.input);
  for (int h : cfg.hidden) widths.push_back(h);
  widths.push_back(cfg.output);
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    const bool last = l + 2 == widths.size();
    const double a = std::sqrt(6.0 / (in + out)) * (last ? cfg.output_init_scale : 1.0);
    std::vector<double> w(static_cast<size_t>(in) * out);
    for (double& v : w) v = a == 0.0 ? 0.0 : rng.uniform(-a, a);
    mlp.weight_params_.push_back(store.add(prefix + "/w" + std::to_string(l), {in, out}, std::move(w)));
    mlp.bias_params_.push_back(
        store.add(prefix + "/b" + std::to_string(l), {1, out}, std::vector<double>(static_cast<size_t>(out), 0.0)));
  }
  return mlp;
}

Mlp::Bound Mlp::bind(Tape& tape, ParameterStore& store) const {
  Bound b;
  for (int p : weight_params_) b.weights.push_back(tape.bind(store, p));
  for (int p : bias_params_) b.biases.push_back(tape.bind(store, p));
  return b;
}

Tensor Mlp::forward(Tape& tape, const Bound& bound, Tensor x) const {
  for (size_t l = 0; l < bound.weights.size(); ++l) {
    Tensor h = tape.affine(x, bound.weights[l], bound.biases[l]);
    x = (l + 1 < bound.weights.size()) ? tape.relu(h) : h;
  }
  return x;
}

FieldConfig FieldConfig::desk_default() { return FieldConfig{}; }

FieldConfig FieldConfig::paper_scale() {
  FieldConfig cfg;
  cfg.encoders.hash.levels = 16;
  cfg.encoders.hash.features = 8;
  cfg.encoders.hash.table_size = int64_t(1) << 19;
  cfg.encoders.hash.base_resolution = 16;
  cfg.encoders.hash.growth = 1.447;
  cfg.encoders.planes.spatial_res = 512;
  cfg.encoders.planes.time_res = 64;
  cfg.encoders.planes.features = 16;
  return cfg;
}

FieldConfig FieldConfig::tiny() {
  FieldConfig cfg;
  cfg.encoders.hash.levels = 2;
  cfg.encoders.hash.features = 2;
  cfg.encoders.hash.table_size = 64;
  cfg.encoders.hash.base_resolution = 2;
  cfg.encoders.hash.growth = 2.0;
  cfg.encoders.planes.spatial_res = 3;
  cfg.encoders.planes.time_res = 2;
  cfg.encoders.planes.features = 2;
  cfg.trunk_layers = 1;
  cfg.trunk_width = 8;
  cfg.geo_features = 4;
  cfg.head_width = 6;
  cfg.sh_degree = 1;
  cfg.flow_layers = 1;
  cfg.flow_width = 8;
  cfg.flow_pos_octaves = 2;
  cfg.flow_time_octaves = 1;
  return cfg;
}

NvsfField::NvsfField(const FieldConfig& cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  EncoderBundleConfig enc = cfg.encoders;
  enc.sh_degree = cfg.sh_degree;
  lidar_enc_ = EncoderBundle::create(store_, "lidar", enc, rng);
  camera_enc_ = EncoderBundle::create(store_, "camera", enc, rng);

  const int hybrid = static_cast<int>(lidar_enc_.hybrid_width());
  MlpConfig trunk_cfg;
  trunk_cfg.input = hybrid;
  trunk_cfg.hidden.assign(static_cast<size_t>(cfg.trunk_layers), cfg.trunk_width);
  trunk_cfg.output = 1 + cfg.geo_features;
  trunk_cfg.output_init_scale = 0.01;  // density/logits start near zero
  trunk_ = Mlp::create(store_, "trunk", trunk_cfg, rng);

  const int head_in = cfg.geo_features + (cfg.sh_degree + 1) * (cfg.sh_degree + 1);
  auto head_cfg = [&](int outputs) {
    MlpConfig c;
    c.input = head_in;
    c.hidden = {cfg.head_width};
    c.output = outputs;
    c.output_init_scale = 0.01;
    return c;
  };
  head_raydrop_ = Mlp::create(store_, "head/raydrop", head_cfg(1), rng);
  head_intensity_ = Mlp::create(store_, "head/intensity", head_cfg(1), rng);
  head_rgb_ = Mlp::create(store_, "head/rgb", head_cfg(3), rng);

  MlpConfig flow_cfg;
  flow_cfg.input = 6 * cfg.flow_pos_octaves + 2 * cfg.flow_time_octaves;
  flow_cfg.hidden.assign(static_cast<size_t>(cfg.flow_layers), cfg.flow_width);
  flow_cfg.output = 6;
  flow_cfg.output_init_scale = 0.0;  // identity flow at step 0
  flow_ = Mlp::create(store_, "flow", flow_cfg, rng);
}

NvsfField::Bound NvsfField::bind(Tape& tape) {
  Bound b;
  b.lidar_enc = bind_bundle(tape, store_, lidar_enc_);
  b.camera_enc = bind_bundle(tape, store_, camera_enc_);
  b.trunk = trunk_.bind(tape, store_);
  b.head_raydrop = head_raydrop_.bind(tape, store_);
  b.head_intensity = head_intensity_.bind(tape, store_);
  b.head_rgb = head_rgb_.bind(tape, store_);
  b.flow = flow_.bind(tape, store_);
  return b;
}

Tensor NvsfField::flow_field(Tape& tape, const Bound& bound, std::span<const double> positions, double t) {
  const int64_t M = static_cast<int64_t>(positions.size() / 3);
  const int64_t in_width = 6 * cfg_.flow_pos_octaves + 2 * cfg_.flow_time_octaves;
  std::vector<double> input(static_cast<size_t>(M * in_width));
  const std::vector<double> t_enc = freq_encode(std::vector<double>{t}, cfg_.flow_time_octaves);
  for (int64_t m = 0; m < M; ++m) {
    const std::vector<double> p_enc =
        freq_encode(positions.subspan(static_cast<size_t>(3 * m), 3), cfg_.flow_pos_octaves);
    double* dst = input.data() + m * in_width;
    std::copy(p_enc.begin(), p_enc.end(), dst);
    std::copy(t_enc.begin(), t_enc.end(), dst + p_enc.size());
  }
  Tensor x = tape.constant({M, in_width}, std::move(input));
  return flow_.forward(tape, bound.flow, x);
}

Tensor NvsfField::warp(Tape& tape, const Bound& bound, std::span<const double> positions, double t,
                       FlowDirection direction) {
  const int64_t M = static_cast<int64_t>(positions.size() / 3);
  Tensor flow = flow_field(tape, bound, positions, t);
  Tensor delta = tape.slice(flow, 1, direction == FlowDirection::Forward ? 0 : 3, 3);
  Tensor base = tape.constant({M, 3}, std::vector<double>(positions.begin(), positions.end()));
  return tape.add(base, delta);
}

Tensor NvsfField::blended_temporal(Tape& tape, const Bound& bound, Modality modality,
                                   std::span<const double> positions, const TimeContext& tc,
                                   bool use_flow) {
  const EncoderBundle& enc = bundle(modality);
  const BoundBundle& benc = modality == Modality::Lidar ? bound.lidar_enc : bound.camera_enc;
  const int64_t M = static_cast<int64_t>(positions.size() / 3);
  const std::vector<double> times(static_cast<size_t>(M), tc.t);
  Tensor center = enc.planes.encode(tape, benc.plane_grids, positions, times);
  if (!use_flow || (!tc.has_prev && !tc.has_next)) return center;

  double w_center = 0.5;
  double w_side = 0.25;
  if (!tc.has_prev || !tc.has_next) {
    // one-sided blend keeps the same 2:1 ratio
    w_center = 2.0 / 3.0;
    w_side = 1.0 / 3.0;
  }
  Tensor out = tape.scale(center, w_center);
  if (tc.has_next) {
    Tensor warped = warp(tape, bound, positions, tc.t, FlowDirection::Forward);
    const std::vector<double> t_next(static_cast<size_t>(M), tc.t + tc.dt);
    Tensor f = enc.planes.encode(tape, benc.plane_grids, warped, t_next);
    out = tape.add(out, tape.scale(f, w_side));
  }
  if (tc.has_prev) {
    Tensor warped = warp(tape, bound, positions, tc.t, FlowDirection::Backward);
    const std::vector<double> t_prev(static_cast<size_t>(M), tc.t - tc.dt);
    Tensor f = enc.planes.encode(tape, benc.plane_grids, warped, t_prev);
    out = tape.add(out, tape.scale(f, w_side));
  }
  return out;
}

NvsfField::TrunkOut NvsfField::run_trunk(Tape& tape, const Bound& bound, Modality modality,
                                         std::span<const double> positions, const TimeContext& tc,
                                         bool use_flow) {
  const EncoderBundle& enc = bundle(modality);
  const BoundBundle& benc = modality == Modality::Lidar ? bound.lidar_enc : bound.camera_enc;
  Tensor spatial = enc.grid.encode(tape, benc.hash_tables, positions);
  Tensor temporal = blended_temporal(tape, bound, modality, positions, tc, use_flow);
  Tensor hybrid = tape.concat({spatial, temporal}, 1);
  Tensor trunk_out = trunk_.forward(tape, bound.trunk, hybrid);
  TrunkOut out;
  out.sigma = tape.softplus(tape.slice(trunk_out, 1, 0, 1));
  out.geo = tape.slice(trunk_out, 1, 1, cfg_.geo_features);
  return out;
}

Tensor NvsfField::sh_tensor(Tape& tape, std::span<const double> dirs) const {
  const int64_t M = static_cast<int64_t>(dirs.size() / 3);
  const int64_t W = static_cast<int64_t>((cfg_.sh_degree + 1) * (cfg_.sh_degree + 1));
  std::vector<double> values(static_cast<size_t>(M * W));
  for (int64_t m = 0; m < M; ++m) {
    const Vec3 d{dirs[static_cast<size_t>(3 * m)], dirs[static_cast<size_t>(3 * m + 1)],
                 dirs[static_cast<size_t>(3 * m + 2)]};
    const auto sh = sh_encode(d, cfg_.sh_degree);
    std::copy(sh.begin(), sh.end(), values.begin() + m * W);
  }
  return tape.constant({M, W}, std::move(values));
}

NvsfField::LidarOut NvsfField::query_lidar(Tape& tape, const Bound& bound,
                                           std::span<const double> positions,
                                           std::span<const double> dirs, const TimeContext& tc,
                                           bool use_flow) {
  TrunkOut trunk = run_trunk(tape, bound, Modality::Lidar, positions, tc, use_flow);
  Tensor head_in = tape.concat({trunk.geo, sh_tensor(tape, dirs)}, 1);
  LidarOut out;
  out.sigma = trunk.sigma;
  out.geo = trunk.geo;
  out.raydrop = tape.sigmoid(head_raydrop_.forward(tape, bound.head_raydrop, head_in));
  out.intensity = tape.sigmoid(head_intensity_.forward(tape, bound.head_intensity, head_in));
  return out;
}

NvsfField::CameraOut NvsfField::query_camera(Tape& tape, const Bound& bound,
                                             std::span<const double> positions,
                                             std::span<const double> dirs, const TimeContext& tc,
                                             bool use_flow) {
  TrunkOut trunk = run_trunk(tape, bound, Modality::Camera, positions, tc, use_flow);
  Tensor head_in = tape.concat({trunk.geo, sh_tensor(tape, dirs)}, 1);
  CameraOut out;
  out.sigma = trunk.sigma;
  out.geo = trunk.geo;
  out.rgb = tape.sigmoid(head_rgb_.forward(tape, bound.head_rgb, head_in));
  return out;
}

}  // namespace nvsf

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nvsf/encoders.hpp"
#include "nvsf/rng.hpp"
#include "nvsf/tensor.hpp"

namespace nvsf {

struct MlpConfig {
  int input = 0;
  std::vector<int> hidden;
  int output = 0;
  double output_init_scale = 1.0;  // 0 = exact zero init of the last layer
};

// Plain fully connected net, relu hidden activations, linear output.
class Mlp {
 public:
  struct Bound {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
  };

  Mlp() = default;
  static Mlp create(ParameterStore& store, const std::string& prefix, const MlpConfig& cfg, Rng& rng);
  Bound bind(Tape& tape, ParameterStore& store) const;
  Tensor forward(Tape& tape, const Bound& bound, Tensor x) const;
  const MlpConfig& config() const { return cfg_; }

 private:
  MlpConfig cfg_;
  std::vector<int> weight_params_;
  std::vector<int> bias_params_;
};

enum class Modality { Lidar, Camera };
enum class FlowDirection { Forward, Backward };

struct FieldConfig {
  EncoderBundleConfig encoders;
  int trunk_layers = 3;
  int trunk_width = 64;
  int geo_features = 15;
  int head_width = 32;
  int sh_degree = 3;
  int flow_layers = 4;
  int flow_width = 64;
  int flow_pos_octaves = 6;
  int flow_time_octaves = 4;

  static FieldConfig desk_default();
  static FieldConfig paper_scale();  // LiDAR4D-sized encodings, ~1e8 parameters
  static FieldConfig tiny();         // for finite-difference suites
};

// Frame-time context for the multi-frame temporal aggregation.
struct TimeContext {
  double t = 0.0;
  double dt = 0.0;       // spacing to adjacent frames
  bool has_prev = false;
  bool has_next = false;
};

// The learnable scene model: two encoder bundles (LiDAR/camera), one shared
// trunk producing density and a geometry feature, three radiance heads, and
// the scene-flow MLP.
class NvsfField {
 public:
  struct Bound {
    BoundBundle lidar_enc;
    BoundBundle camera_enc;
    Mlp::Bound trunk;
    Mlp::Bound head_raydrop;
    Mlp::Bound head_intensity;
    Mlp::Bound head_rgb;
    Mlp::Bound flow;
  };

  struct LidarOut {
    Tensor sigma;      // [M,1], softplus >= 0
    Tensor geo;        // [M,geo]
    Tensor intensity;  // [M,1], sigmoid
    Tensor raydrop;    // [M,1], sigmoid hit-probability
  };
  struct CameraOut {
    Tensor sigma;
    Tensor geo;
    Tensor rgb;  // [M,3], sigmoid
  };

  NvsfField(const FieldConfig& cfg, uint64_t seed);

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const FieldConfig& config() const { return cfg_; }

  Bound bind(Tape& tape);

  // positions: xyz triplets (3M), dirs: unit xyz triplets (3M); flow-aware
  // temporal aggregation is used when use_flow is set.
  LidarOut query_lidar(Tape& tape, const Bound& bound, std::span<const double> positions,
                       std::span<const double> dirs, const TimeContext& tc, bool use_flow);
  CameraOut query_camera(Tape& tape, const Bound& bound, std::span<const double> positions,
                         std::span<const double> dirs, const TimeContext& tc, bool use_flow);

  // Scene flow at (x, t): output [M,6] = (dx_fwd, dx_bwd).
  Tensor flow_field(Tape& tape, const Bound& bound, std::span<const double> positions, double t);
  // x' = x + flow(x, t) for the chosen direction; [M,3] graph tensor.
  Tensor warp(Tape& tape, const Bound& bound, std::span<const double> positions, double t,
              FlowDirection direction);

  // Blended temporal (plane) feature: 0.5 f(x,t) + 0.25 f(warp_fwd, t+dt)
  // + 0.25 f(warp_bwd, t-dt); missing sides renormalize. Exposed for tests.
  Tensor blended_temporal(Tape& tape, const Bound& bound, Modality modality,
                          std::span<const double> positions, const TimeContext& tc, bool use_flow);

  const EncoderBundle& bundle(Modality m) const { return m == Modality::Lidar ? lidar_enc_ : camera_enc_; }
  int64_t parameter_count() const { return store_.total_values(); }

 private:
  struct TrunkOut {
    Tensor sigma;
    Tensor geo;
  };
  TrunkOut run_trunk(Tape& tape, const Bound& bound, Modality modality,
                     std::span<const double> positions, const TimeContext& tc, bool use_flow);
  Tensor sh_tensor(Tape& tape, std::span<const double> dirs) const;

  FieldConfig cfg_;
  ParameterStore store_;
  EncoderBundle lidar_enc_;
  EncoderBundle camera_enc_;
  Mlp trunk_;
  Mlp head_raydrop_;
  Mlp head_intensity_;
  Mlp head_rgb_;
  Mlp flow_;
};

}  // namespace nvsf

#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "nvsf/fields.hpp"
#include "nvsf/losses.hpp"
#include "nvsf/metrics.hpp"
#include "nvsf/renderer.hpp"
#include "nvsf/scene.hpp"
#include "nvsf/tensor.hpp"

namespace nvsf {

struct TrainConfig {
  int max_iterations = 2000;
  int batch_rays = 512;  // split 1:1 across modalities in multimodal mode
  double lr_initial = 1e-2;
  double lr_final_factor = 0.1;
  LossWeights weights;
  uint64_t seed = 1;
  std::string modality = "multimodal";  // lidar-only | camera-only | multimodal
  int patch_quota = 2;
  int patch_size = 8;
  bool heuristic_sampling = true;
  int heuristic_period = 1;  // epochs per sampling mode before alternating
  double jitter_eps = 1.0;
  bool flow = true;
  int flow_points = 256;
  int samples_per_ray = 192;
  double gradient_tau = kDefaultGradientTau;
  int val_interval = 500;
  int chunk_rays = 4096;
  FieldConfig field = FieldConfig::desk_default();

  // Flat key=value file; '#' comments; unknown keys are rejected.
  static TrainConfig from_file(const std::string& path);
  static TrainConfig from_string(const std::string& text);
  std::string to_string() const;
};

// lr(iter) = lr_initial * final_factor^(iter/max); exponential decay ending at
// lr_initial * final_factor.
double lr_at(int64_t iter, const TrainConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

// Bias-corrected Adam over a ParameterStore; moments are addressed by
// parameter index. NaN gradients abort with the parameter name.
class Adam {
 public:
  Adam() = default;
  Adam(const ParameterStore& store, const AdamConfig& cfg);
  void step(ParameterStore& store, Tape& tape, double lr);
  int64_t steps() const { return step_; }

  std::vector<NamedTensor> state_tensors(const ParameterStore& store) const;
  void load_state(const ParameterStore& store, const std::vector<NamedTensor>& items);

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t step_ = 0;
};

struct IterationStats {
  int64_t iteration = 0;
  double flow = 0, depth = 0, intensity = 0, raydrop = 0, grad = 0, rgb = 0;
  double total = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<int> train_frames, val_frames;
  std::vector<IterationStats> history;
  MetricReport validation;      // all scope, averaged over validation frames
  MetricReport validation_fg;   // foreground scope
  int64_t iterations = 0;
};

class Trainer {
 public:
  Trainer(const SceneDataset& ds, const TrainConfig& cfg);

  // Runs the remaining iterations, then renders and scores the validation
  // frames. When out_dir is non-empty, writes checkpoint.bin, losses.csv and
  // the two metric reports there.
  TrainResult run(const std::string& out_dir = "");

  void train_iterations(int n);
  IterationStats train_one();

  MetricReport evaluate(const std::vector<int>& frames, bool foreground) const;
  FramePrediction render_frame(int frame) const;

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

  NvsfField& field() { return *field_; }
  const TrainConfig& config() const { return cfg_; }
  const NormalizationTransform& normalization() const { return norm_; }
  const std::vector<int>& train_frames() const { return train_frames_; }
  const std::vector<int>& val_frames() const { return val_frames_; }
  int64_t iteration() const { return iteration_; }
  // Parameter indices that have received a nonzero gradient so far.
  const std::set<int>& touched_parameters() const { return touched_; }
  // Frames that contributed gradients (split audit).
  const std::set<int>& sampled_frames() const { return sampled_frames_; }

 private:
  struct ModalityBatch;
  std::vector<Vec3> frame_points_subset(int frame, int count, Rng& rng) const;

  SceneDataset ds_;
  TrainConfig cfg_;
  std::unique_ptr<NvsfField> field_;
  NormalizationTransform norm_;
  Adam adam_;
  Rng rng_;
  std::vector<int> train_frames_, val_frames_;
  // per-frame loss maps, lidar and camera
  std::vector<SamplingState> lidar_state_, camera_state_;
  int64_t iteration_ = 0;
  std::set<int> touched_;
  std::set<int> sampled_frames_;
  std::vector<IterationStats> history_;
};

// Checkpoint loading for render/eval tooling (field parameters, field config,
// normalization and the inference-relevant switches).
struct LoadedCheckpoint {
  std::unique_ptr<NvsfField> field;
  NormalizationTransform norm;
  bool flow = true;
  int samples_per_ray = 192;
  int chunk_rays = 4096;
};
LoadedCheckpoint load_field_checkpoint(const std::string& path);

// Ablation driver: trains the baseline and each toggled variant over k seeds
// and reports per-variant medians of the foreground chamfer distance and the
// all-scope range RMSE on the validation frames.
struct AblationRow {
  std::string name;
  std::vector<double> fg_cd;      // per seed; all-scope CD when no foreground exists
  std::vector<double> range_rmse; // per seed
  double median_fg_cd = 0;
  double median_range_rmse = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  bool single_seed_caveat = false;
  std::string table() const;
  std::string to_json() const;
};

AblationResult run_ablation(const SceneDataset& ds, const TrainConfig& base,
                            const std::vector<std::string>& toggles, int seeds);

}  // namespace nvsf

#pragma once

#include <array>
#include <atomic>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nvsf/geometry.hpp"
#include "nvsf/rng.hpp"
#include "nvsf/tensor.hpp"

namespace nvsf {

// NeRF-style gamma: per octave k and input dim, (sin 2^k pi x, cos 2^k pi x).
std::vector<double> freq_encode(std::span<const double> x, int octaves);

// Real spherical harmonics basis in (l,m) order, degree <= 3, for a unit
// direction (checked to 1e-6).
std::vector<double> sh_encode(const Vec3& dir, int degree);

struct HashGridConfig {
  int levels = 8;
  int features = 2;
  int64_t table_size = int64_t(1) << 15;  // per level, power of two
  int base_resolution = 16;
  double growth = 1.45;
};

inline constexpr uint32_t kHashPrimes[3] = {1u, 2654435761u, 805459861u};

// Multi-resolution trilinear hash grid over the unit cube [-0.5, 0.5]^3.
// Queries outside the cube are clamped and counted. Levels whose dense corner
// count fits in the table are indexed directly; larger levels use the XOR hash.
class HashGrid {
 public:
  HashGrid() = default;
  static HashGrid create(ParameterStore& store, const std::string& prefix, const HashGridConfig& cfg,
                         Rng& rng);

  std::vector<Tensor> bind(Tape& tape, ParameterStore& store) const;

  // positions: xyz triplets, 3*M doubles; output [M, levels*features],
  // differentiable w.r.t. the level tables.
  Tensor encode(Tape& tape, const std::vector<Tensor>& tables, std::span<const double> positions) const;

  int64_t out_width() const { return int64_t(cfg_.levels) * cfg_.features; }
  const HashGridConfig& config() const { return cfg_; }
  int resolution(int level) const { return res_[static_cast<size_t>(level)]; }
  int64_t table_rows(int level) const;
  bool direct_indexed(int level) const;
  int64_t clamped_queries() const { return clamp_count_->load(); }
  const std::vector<int>& param_indices() const { return params_; }

 private:
  HashGridConfig cfg_;
  std::vector<int> params_;
  std::vector<int> res_;
  std::shared_ptr<std::atomic<int64_t>> clamp_count_ = std::make_shared<std::atomic<int64_t>>(0);
};

struct PlaneSetConfig {
  int spatial_res = 64;  // per axis
  int time_res = 32;
  int features = 8;
};

// Temporal plane factorization: one 2D grid per plane (x,t), (y,t), (z,t),
// combined by elementwise product. Grids are initialized to 1 so the product
// starts as the identity temporal field.
class PlaneSet {
 public:
  PlaneSet() = default;
  static PlaneSet create(ParameterStore& store, const std::string& prefix, const PlaneSetConfig& cfg,
                         Rng& rng);

  std::array<Tensor, 3> bind(Tape& tape, ParameterStore& store) const;

  // Constant query positions.
  Tensor encode(Tape& tape, const std::array<Tensor, 3>& planes, std::span<const double> positions,
                std::span<const double> times) const;
  // Differentiable positions [M,3] (used for flow-warped queries); gradient
  // flows to both the grids and the positions.
  Tensor encode(Tape& tape, const std::array<Tensor, 3>& planes, Tensor positions,
                std::span<const double> times) const;

  int64_t out_width() const { return cfg_.features; }
  const PlaneSetConfig& config() const { return cfg_; }
  const std::array<int, 3>& param_indices() const { return params_; }

 private:
  Tensor encode_impl(Tape& tape, const std::array<Tensor, 3>& planes, const Tensor* pos_tensor,
                     std::span<const double> positions, std::span<const double> times) const;

  PlaneSetConfig cfg_;
  std::array<int, 3> params_{-1, -1, -1};
};

struct EncoderBundleConfig {
  HashGridConfig hash;
  PlaneSetConfig planes;
  int sh_degree = 3;
};

// Per-modality encoder set; parameters are disjoint between bundles by
// construction (distinct name prefixes in the shared store).
struct EncoderBundle {
  std::string modality;
  HashGrid grid;
  PlaneSet planes;
  int sh_degree = 3;

  static EncoderBundle create(ParameterStore& store, const std::string& modality,
                              const EncoderBundleConfig& cfg, Rng& rng);
  int64_t hybrid_width() const { return grid.out_width() + planes.out_width(); }
};

struct BoundBundle {
  std::vector<Tensor> hash_tables;
  std::array<Tensor, 3> plane_grids;
};

BoundBundle bind_bundle(Tape& tape, ParameterStore& store, const EncoderBundle& bundle);

// concat(hash(x), planes(x, t)); spatial features from the hash grid only,
// temporal features from the planes.
Tensor hybrid_encode(Tape& tape, const EncoderBundle& bundle, const BoundBundle& bound,
                     std::span<const double> positions, std::span<const double> times);

}  // namespace nvsf

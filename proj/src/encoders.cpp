#include "nvsf/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nvsf {

std::vector<double> freq_encode(std::span<const double> x, int octaves) {
  std::vector<double> out;
  out.reserve(2 * x.size() * static_cast<size_t>(octaves));
  for (int k = 0; k < octaves; ++k) {
    const double scale = std::ldexp(M_PI, k);  // 2^k * pi
    for (double v : x) {
      out.push_back(std::sin(scale * v));
      out.push_back(std::cos(scale * v));
    }
  }
  return out;
}

std::vector<double> sh_encode(const Vec3& dir, int degree) {
  if (degree < 0 || degree > 3) throw std::invalid_argument("sh_encode: degree must be in [0,3]");
  if (std::abs(dir.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("sh_encode: direction must be unit length");
  const double x = dir.x, y = dir.y, z = dir.z;
  std::vector<double> out;
  out.reserve(static_cast<size_t>((degree + 1) * (degree + 1)));
  out.push_back(0.28209479177387814);  // 1/(2 sqrt(pi))
  if (degree >= 1) {
    const double c1 = 0.4886025119029199;  // sqrt(3/(4 pi))
    out.push_back(c1 * y);
    out.push_back(c1 * z);
    out.push_back(c1 * x);
  }
  if (degree >= 2) {
    out.push_back(1.0925484305920792 * x * y);
    out.push_back(1.0925484305920792 * y * z);
    out.push_back(0.31539156525252005 * (3.0 * z * z - 1.0));
    out.push_back(1.0925484305920792 * x * z);
    out.push_back(0.5462742152960396 * (x * x - y * y));
  }
  if (degree >= 3) {
    out.push_back(0.5900435899266435 * y * (3.0 * x * x - y * y));
    out.push_back(2.890611442640554 * x * y * z);
    out.push_back(0.4570457994644658 * y * (5.0 * z * z - 1.0));
    out.push_back(0.3731763325901154 * z * (5.0 * z * z - 3.0));
    out.push_back(0.4570457994644658 * x * (5.0 * z * z - 1.0));
    out.push_back(1.445305721320277 * z * (x * x - y * y));
    out.push_back(0.5900435899266435 * x * (x * x - 3.0 * y * y));
  }
  return out;
}

// --- hash grid ----------------------------------------------------------------

namespace {

bool is_pow2(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

uint32_t corner_hash(int64_t cx, int64_t cy, int64_t cz) {
  return (static_cast<uint32_t>(cx) * kHashPrimes[0]) ^ (static_cast<uint32_t>(cy) * kHashPrimes[1]) ^
         (static_cast<uint32_t>(cz) * kHashPrimes[2]);
}

}  // namespace

int64_t HashGrid::table_rows(int level) const {
  const int64_t corners = res_[static_cast<size_t>(level)] + 1;
  return std::min(corners * corners * corners, cfg_.table_size);
}

bool HashGrid::direct_indexed(int level) const {
  const int64_t corners = res_[static_cast<size_t>(level)] + 1;
  return corners * corners * corners <= cfg_.table_size;
}

HashGrid HashGrid::create(ParameterStore& store, const std::string& prefix, const HashGridConfig& cfg,
                          Rng& rng) {
  if (!is_pow2(cfg.table_size)) throw std::invalid_argument("hash grid: table size must be a power of two");
  if (cfg.growth <= 1.0) throw std::invalid_argument("hash grid: growth factor must exceed 1");
  if (cfg.levels < 1 || cfg.features < 1) throw std::invalid_argument("hash grid: bad level/feature count");
  HashGrid grid;
  grid.cfg_ = cfg;
  for (int l = 0; l < cfg.levels; ++l) {
    const int res = static_cast<int>(std::floor(cfg.base_resolution * std::pow(cfg.growth, l)));
    grid.res_.push_back(std::max(res, 1));
    const int64_t rows = grid.table_rows(l);
    std::vector<double> init(static_cast<size_t>(rows * cfg.features));
    for (double& v : init) v = rng.uniform(-1e-4, 1e-4);
    grid.params_.push_back(
        store.add(prefix + "/level" + std::to_string(l), {rows, cfg.features}, std::move(init)));
  }
  return grid;
}

std::vector<Tensor> HashGrid::bind(Tape& tape, ParameterStore& store) const {
  std::vector<Tensor> tables;
  tables.reserve(params_.size());
  for (int p : params_) tables.push_back(tape.bind(store, p));
  return tables;
}

Tensor HashGrid::encode(Tape& tape, const std::vector<Tensor>& tables,
                        std::span<const double> positions) const {
  if (positions.size() % 3 != 0) throw std::invalid_argument("hash encode: positions must be xyz triplets");
  const int64_t M = static_cast<int64_t>(positions.size() / 3);
  if (M == 0) throw std::invalid_argument("hash encode: empty query");
  const int L = cfg_.levels, F = cfg_.features;
  const int64_t W = out_width();

  // Per level and corner: table row index and trilinear weight.
  auto idx = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(M) * L * 8);
  auto wgt = std::make_shared<std::vector<double>>(static_cast<size_t>(M) * L * 8);
  std::vector<double> out(static_cast<size_t>(M * W), 0.0);
  std::atomic<int64_t> clamped{0};

#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (M >= 256)
  for (int64_t m = 0; m < M; ++m) {
    double p[3];
    bool was_clamped = false;
    for (int a = 0; a < 3; ++a) {
      double v = positions[static_cast<size_t>(3 * m + a)];
      if (v < -0.5 || v > 0.5) {
        was_clamped = true;
        v = std::clamp(v, -0.5, 0.5);
      }
      p[a] = v + 0.5;  // [0,1]
    }
    if (was_clamped) clamped.fetch_add(1, std::memory_order_relaxed);
    for (int l = 0; l < L; ++l) {
      const int res = res_[static_cast<size_t>(l)];
      const bool direct = direct_indexed(l);
      const int64_t rows = table_rows(l);
      int64_t c0[3];
      double f[3];
      for (int a = 0; a < 3; ++a) {
        const double u = p[a] * res;
        int64_t c = static_cast<int64_t>(std::floor(u));
        c = std::clamp<int64_t>(c, 0, res - 1);
        c0[a] = c;
        f[a] = u - static_cast<double>(c);
      }
      const size_t base = (static_cast<size_t>(m) * L + l) * 8;
      for (int corner = 0; corner < 8; ++corner) {
        const int ax = corner & 1, ay = (corner >> 1) & 1, az = (corner >> 2) & 1;
        const int64_t cx = c0[0] + ax, cy = c0[1] + ay, cz = c0[2] + az;
        int64_t row;
        if (direct) {
          row = cx + (res + 1) * (cy + (res + 1) * cz);
        } else {
          row = corner_hash(cx, cy, cz) & static_cast<uint32_t>(rows - 1);
        }
        (*idx)[base + corner] = static_cast<int32_t>(row);
        (*wgt)[base + corner] = (ax ? f[0] : 1.0 - f[0]) * (ay ? f[1] : 1.0 - f[1]) * (az ? f[2] : 1.0 - f[2]);
      }
      const double* table = tables[static_cast<size_t>(l)].values().data();
      double* dst = out.data() + m * W + int64_t(l) * F;
      for (int corner = 0; corner < 8; ++corner) {
        const double w = (*wgt)[base + corner];
        const double* src = table + int64_t((*idx)[base + corner]) * F;
        for (int fi = 0; fi < F; ++fi) dst[fi] += w * src[fi];
      }
    }
  }
  clamp_count_->fetch_add(clamped.load(), std::memory_order_relaxed);

  std::vector<Tensor> inputs(tables.begin(), tables.end());
  const int levels = L, feats = F;
  auto backward = [idx, wgt, M, levels, feats, W](Tape& t, const Node& self) {
    for (int l = 0; l < levels; ++l) {
      const int32_t input_id = self.inputs[static_cast<size_t>(l)];
      if (!t.node(input_id).requires_grad) continue;
      double* table_grad = t.grad_acc(input_id).data();
      const double* g = self.grad.data();
      for (int64_t m = 0; m < M; ++m) {
        const size_t base = (static_cast<size_t>(m) * levels + l) * 8;
        const double* gm = g + m * W + int64_t(l) * feats;
        for (int corner = 0; corner < 8; ++corner) {
          const double w = (*wgt)[base + corner];
          double* dst = table_grad + int64_t((*idx)[base + corner]) * feats;
          for (int fi = 0; fi < feats; ++fi) dst[fi] += w * gm[fi];
        }
      }
    }
  };
  return tape.custom({M, W}, std::move(out), std::move(inputs), std::move(backward));
}

// --- plane set -----------------------------------------------------------------

PlaneSet PlaneSet::create(ParameterStore& store, const std::string& prefix, const PlaneSetConfig& cfg,
                          Rng&) {
  if (cfg.spatial_res < 2 || cfg.time_res < 2)
    throw std::invalid_argument("plane set: grid extents must be >= 2 per axis");
  PlaneSet ps;
  ps.cfg_ = cfg;
  static const char* axes[3] = {"xt", "yt", "zt"};
  for (int p = 0; p < 3; ++p) {
    std::vector<double> init(static_cast<size_t>(cfg.spatial_res) * cfg.time_res * cfg.features, 1.0);
    ps.params_[static_cast<size_t>(p)] =
        store.add(prefix + "/plane_" + axes[p],
                  {int64_t(cfg.spatial_res) * cfg.time_res, cfg.features}, std::move(init));
  }
  return ps;
}

std::array<Tensor, 3> PlaneSet::bind(Tape& tape, ParameterStore& store) const {
  return {tape.bind(store, params_[0]), tape.bind(store, params_[1]), tape.bind(store, params_[2])};
}

namespace {

struct BilinearSample {
  int64_t row[4];
  double w[4];
  double dw_du[4];  // derivative of the weights w.r.t. the spatial grid coordinate
  double du_dx;
};

BilinearSample bilinear_at(double x_axis, double t, int rs, int rt) {
  BilinearSample s;
  double u = (std::clamp(x_axis, -0.5, 0.5) + 0.5) * (rs - 1);
  double v = std::clamp(t, 0.0, 1.0) * (rt - 1);
  const bool in_domain = x_axis > -0.5 && x_axis < 0.5;
  int64_t iu = std::clamp<int64_t>(static_cast<int64_t>(std::floor(u)), 0, rs - 2);
  int64_t iv = std::clamp<int64_t>(static_cast<int64_t>(std::floor(v)), 0, rt - 2);
  const double fu = u - static_cast<double>(iu);
  const double fv = v - static_cast<double>(iv);
  const double wu[2] = {1.0 - fu, fu};
  const double wv[2] = {1.0 - fv, fv};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const int k = a * 2 + b;
      s.row[k] = (iu + a) * rt + (iv + b);
      s.w[k] = wu[a] * wv[b];
      s.dw_du[k] = (a ? 1.0 : -1.0) * wv[b];
    }
  s.du_dx = in_domain ? static_cast<double>(rs - 1) : 0.0;  // clamped queries have zero slope
  return s;
}

}  // namespace

Tensor PlaneSet::encode_impl(Tape& tape, const std::array<Tensor, 3>& planes, const Tensor* pos_tensor,
                             std::span<const double> positions, std::span<const double> times) const {
  const int64_t M = static_cast<int64_t>(times.size());
  if (M == 0) throw std::invalid_argument("plane encode: empty query");
  if (positions.size() != static_cast<size_t>(3 * M))
    throw std::invalid_argument("plane encode: positions must be xyz triplets matching times");
  const int F = cfg_.features, rs = cfg_.spatial_res, rt = cfg_.time_res;

  auto times_copy = std::make_shared<std::vector<double>>(times.begin(), times.end());
  std::vector<double> out(static_cast<size_t>(M * F));
  const double* grids[3] = {planes[0].values().data(), planes[1].values().data(),
                            planes[2].values().data()};
  const double* pos = positions.data();

#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (M >= 256)
  for (int64_t m = 0; m < M; ++m) {
    double* dst = out.data() + m * F;
    for (int fi = 0; fi < F; ++fi) dst[fi] = 1.0;
    for (int p = 0; p < 3; ++p) {
      const BilinearSample s = bilinear_at(pos[3 * m + p], (*times_copy)[static_cast<size_t>(m)], rs, rt);
      for (int fi = 0; fi < F; ++fi) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += s.w[k] * grids[p][s.row[k] * F + fi];
        dst[fi] *= v;
      }
    }
  }

  std::vector<Tensor> inputs = {planes[0], planes[1], planes[2]};
  if (pos_tensor) inputs.push_back(*pos_tensor);
  const bool has_pos_input = pos_tensor != nullptr;
  auto pos_copy = std::make_shared<std::vector<double>>(positions.begin(), positions.end());

  auto backward = [times_copy, pos_copy, M, cfg = cfg_, has_pos_input](Tape& t, const Node& self) {
    const int F = cfg.features, rs = cfg.spatial_res, rt = cfg.time_res;
    const double* grids[3] = {t.node(self.inputs[0]).values.data(),
                              t.node(self.inputs[1]).values.data(),
                              t.node(self.inputs[2]).values.data()};
    const double* pos = pos_copy->data();
    double* plane_grads[3] = {nullptr, nullptr, nullptr};
    for (int p = 0; p < 3; ++p)
      if (t.node(self.inputs[static_cast<size_t>(p)]).requires_grad)
        plane_grads[p] = t.grad_acc(self.inputs[static_cast<size_t>(p)]).data();
    double* pos_grad = nullptr;
    if (has_pos_input && t.node(self.inputs[3]).requires_grad) pos_grad = t.grad_acc(self.inputs[3]).data();

    const double* g = self.grad.data();
    std::vector<double> interp(static_cast<size_t>(3 * F));
    for (int64_t m = 0; m < M; ++m) {
      BilinearSample samples[3];
      // recompute the per-plane interpolations rather than saving them
      for (int p = 0; p < 3; ++p) {
        samples[p] = bilinear_at(pos[3 * m + p], (*times_copy)[static_cast<size_t>(m)], rs, rt);
        for (int fi = 0; fi < F; ++fi) {
          double v = 0.0;
          for (int k = 0; k < 4; ++k) v += samples[p].w[k] * grids[p][samples[p].row[k] * F + fi];
          interp[static_cast<size_t>(p * F + fi)] = v;
        }
      }
      const double* gm = g + m * F;
      for (int p = 0; p < 3; ++p) {
        const BilinearSample& s = samples[p];
        double dx_acc = 0.0;
        for (int fi = 0; fi < F; ++fi) {
          // d out / d interp_p = product of the other two planes' features
          double others = 1.0;
          for (int q = 0; q < 3; ++q)
            if (q != p) others *= interp[static_cast<size_t>(q * F + fi)];
          const double dinterp = gm[fi] * others;
          if (plane_grads[p])
            for (int k = 0; k < 4; ++k) plane_grads[p][s.row[k] * F + fi] += s.w[k] * dinterp;
          if (pos_grad) {
            double dv_du = 0.0;
            for (int k = 0; k < 4; ++k) dv_du += s.dw_du[k] * grids[p][s.row[k] * F + fi];
            dx_acc += dinterp * dv_du * s.du_dx;
          }
        }
        if (pos_grad) pos_grad[3 * m + p] += dx_acc;
      }
    }
  };
  return tape.custom({M, F}, std::move(out), std::move(inputs), std::move(backward));
}

Tensor PlaneSet::encode(Tape& tape, const std::array<Tensor, 3>& planes, std::span<const double> positions,
                        std::span<const double> times) const {
  return encode_impl(tape, planes, nullptr, positions, times);
}

Tensor PlaneSet::encode(Tape& tape, const std::array<Tensor, 3>& planes, Tensor positions,
                        std::span<const double> times) const {
  const auto vals = positions.values();
  return encode_impl(tape, planes, &positions, vals, times);
}

// --- bundle ---------------------------------------------------------------------

EncoderBundle EncoderBundle::create(ParameterStore& store, const std::string& modality,
                                    const EncoderBundleConfig& cfg, Rng& rng) {
  EncoderBundle b;
  b.modality = modality;
  b.grid = HashGrid::create(store, "enc/" + modality + "/hash", cfg.hash, rng);
  b.planes = PlaneSet::create(store, "enc/" + modality + "/planes", cfg.planes, rng);
  b.sh_degree = cfg.sh_degree;
  return b;
}

BoundBundle bind_bundle(Tape& tape, ParameterStore& store, const EncoderBundle& bundle) {
  return {bundle.grid.bind(tape, store), bundle.planes.bind(tape, store)};
}

Tensor hybrid_encode(Tape& tape, const EncoderBundle& bundle, const BoundBundle& bound,
                     std::span<const double> positions, std::span<const double> times) {
  Tensor spatial = bundle.grid.encode(tape, bound.hash_tables, positions);
  Tensor temporal = bundle.planes.encode(tape, bound.plane_grids, positions, times);
  return tape.concat({spatial, temporal}, 1);
}

}  // namespace nvsf

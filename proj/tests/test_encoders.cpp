#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nvsf/encoders.hpp"

using namespace nvsf;

namespace {

HashGridConfig tiny_hash() {
  HashGridConfig cfg;
  cfg.levels = 3;
  cfg.features = 2;
  cfg.table_size = 128;
  cfg.base_resolution = 2;
  cfg.growth = 2.0;  // resolutions 2, 4, 8 -> direct, direct, hashed
  return cfg;
}

PlaneSetConfig tiny_planes() {
  PlaneSetConfig cfg;
  cfg.spatial_res = 4;
  cfg.time_res = 3;
  cfg.features = 2;
  return cfg;
}

std::vector<double> random_positions(Rng& rng, int64_t m, double lo = -0.45, double hi = 0.45) {
  std::vector<double> p(static_cast<size_t>(3 * m));
  for (double& v : p) v = rng.uniform(lo, hi);
  return p;
}

}  // namespace

TEST_CASE("freq_encode anchors and shape law") {
  auto e0 = freq_encode(std::vector<double>{0.0}, 2);
  REQUIRE(e0.size() == 4);
  CHECK(e0[0] == 0.0);
  CHECK(e0[1] == 1.0);
  CHECK(e0[2] == 0.0);
  CHECK(e0[3] == 1.0);

  auto eh = freq_encode(std::vector<double>{0.5}, 1);
  CHECK(eh[0] == doctest::Approx(1.0).epsilon(1e-12));        // sin(pi/2)
  CHECK(std::abs(eh[1]) < 1e-12);                             // cos(pi/2)

  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 1 + static_cast<int>(rng.below(4));
    const int L = 1 + static_cast<int>(rng.below(5));
    std::vector<double> x(static_cast<size_t>(d));
    for (double& v : x) v = rng.uniform(-1, 1);
    CHECK(freq_encode(x, L).size() == static_cast<size_t>(2 * d * L));
  }
}

TEST_CASE("sh_encode: Y00, axial zeros, and Monte-Carlo orthonormality") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
    dir = dir.normalized();
    auto sh = sh_encode(dir, 3);
    REQUIRE(sh.size() == 16);
    CHECK(sh[0] == doctest::Approx(0.2820948).epsilon(1e-6));
  }
  auto up = sh_encode({0, 0, 1}, 1);
  CHECK(up[1] == 0.0);  // (l=1, m=-1) ~ y
  CHECK(up[3] == 0.0);  // (l=1, m=+1) ~ x
  CHECK(up[2] == doctest::Approx(0.4886025).epsilon(1e-6));

  CHECK_THROWS_AS(sh_encode({0, 0, 2}, 2), std::invalid_argument);
  CHECK_THROWS_AS(sh_encode({0, 0, 1}, 4), std::invalid_argument);

  // inner products over uniform directions approximate the identity
  const int N = 100000;
  std::vector<std::array<double, 16>> basis;
  basis.reserve(N);
  Rng mc(3);
  for (int k = 0; k < N; ++k) {
    // uniform on the sphere via normalized gaussians
    Vec3 d{mc.normal(), mc.normal(), mc.normal()};
    d = d.normalized();
    auto sh = sh_encode(d, 3);
    std::array<double, 16> row;
    std::copy(sh.begin(), sh.end(), row.begin());
    basis.push_back(row);
  }
  for (int i = 0; i < 16; ++i)
    for (int j = i; j < 16; ++j) {
      double acc = 0;
      for (const auto& row : basis) acc += row[static_cast<size_t>(i)] * row[static_cast<size_t>(j)];
      const double inner = 4.0 * M_PI * acc / N;
      CHECK(std::abs(inner - (i == j ? 1.0 : 0.0)) < 0.02);
    }
}

TEST_CASE("hash grid: zero tables give zero features; vertex queries are exact") {
  ParameterStore store;
  Rng rng(5);
  HashGrid grid = HashGrid::create(store, "hash", tiny_hash(), rng);

  SUBCASE("all-zero tables") {
    for (size_t p = 0; p < store.count(); ++p)
      std::fill(store.entry(static_cast<int>(p)).value.begin(),
                store.entry(static_cast<int>(p)).value.end(), 0.0);
    Tape tape;
    auto tables = grid.bind(tape, store);
    Tensor out = grid.encode(tape, tables, random_positions(rng, 32));
    for (double v : out.values()) CHECK(v == 0.0);
  }

  SUBCASE("grid vertex on a direct-indexed level returns that vertex's features") {
    REQUIRE(grid.direct_indexed(0));
    const int res = grid.resolution(0);
    const int ix = 1, iy = 2, iz = 0;
    const std::vector<double> pos = {static_cast<double>(ix) / res - 0.5,
                                     static_cast<double>(iy) / res - 0.5,
                                     static_cast<double>(iz) / res - 0.5};
    const int64_t row = ix + (res + 1) * (iy + (res + 1) * iz);
    const auto& table = store.entry(grid.param_indices()[0]).value;
    Tape tape;
    auto tables = grid.bind(tape, store);
    Tensor out = grid.encode(tape, tables, pos);
    CHECK(out.values()[0] == doctest::Approx(table[static_cast<size_t>(row * 2)]).epsilon(1e-12));
    CHECK(out.values()[1] == doctest::Approx(table[static_cast<size_t>(row * 2 + 1)]).epsilon(1e-12));
  }
}

TEST_CASE("hash grid: interpolation weights form a partition of unity") {
  ParameterStore store;
  Rng rng(7);
  HashGrid grid = HashGrid::create(store, "hash", tiny_hash(), rng);
  // constant tables turn the weighted sum into the weight total
  for (int l = 0; l < 3; ++l) {
    auto& v = store.entry(grid.param_indices()[static_cast<size_t>(l)]).value;
    std::fill(v.begin(), v.end(), 2.5);
  }
  Tape tape;
  auto tables = grid.bind(tape, store);
  Tensor out = grid.encode(tape, tables, random_positions(rng, 1000, -0.5, 0.5));
  for (double v : out.values()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("hash grid: empirical continuity under 1e-6 perturbations") {
  ParameterStore store;
  Rng rng(11);
  HashGrid grid = HashGrid::create(store, "hash", tiny_hash(), rng);
  for (size_t p = 0; p < store.count(); ++p)
    for (double& v : store.entry(static_cast<int>(p)).value) v = rng.uniform(-1, 1);
  double lipschitz = 0.0;
  for (int l = 0; l < 3; ++l) lipschitz += 3.0 * grid.resolution(l) * 2.0;
  for (int trial = 0; trial < 200; ++trial) {
    auto pos = random_positions(rng, 1);
    auto moved = pos;
    const double eps = 1e-6;
    for (double& v : moved) v += eps * rng.uniform(-1, 1);
    Tape tape;
    auto tables = grid.bind(tape, store);
    auto a = grid.encode(tape, tables, pos).values();
    auto b = grid.encode(tape, tables, moved).values();
    for (size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a[k] - b[k]) <= lipschitz * eps * 2.0);
  }
}

TEST_CASE("hash grid gradients pass grad_check and clamping is recorded") {
  ParameterStore store;
  Rng rng(13);
  HashGrid grid = HashGrid::create(store, "hash", tiny_hash(), rng);
  for (size_t p = 0; p < store.count(); ++p)
    for (double& v : store.entry(static_cast<int>(p)).value) v = rng.uniform(-0.5, 0.5);
  auto pos = random_positions(rng, 6);
  auto f = [&](Tape& tape) {
    auto tables = grid.bind(tape, store);
    return tape.sum(grid.encode(tape, tables, pos));
  };
  CHECK(grad_check_params(f, store, 1e-5) < 1e-4);

  const int64_t before = grid.clamped_queries();
  Tape tape;
  auto tables = grid.bind(tape, store);
  const std::vector<double> outside = {0.7, 0.0, 0.0};
  grid.encode(tape, tables, outside);
  CHECK(grid.clamped_queries() == before + 1);
}

TEST_CASE("plane set: multiplicative identity, absorbing zero, vertex product") {
  ParameterStore store;
  Rng rng(17);
  PlaneSet planes = PlaneSet::create(store, "planes", tiny_planes(), rng);
  std::vector<double> pos = random_positions(rng, 5);
  std::vector<double> times(5, 0.4);

  {
    Tape tape;  // grids are initialized to 1.0
    Tensor out = planes.encode(tape, planes.bind(tape, store), pos, times);
    for (double v : out.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
  {
    auto& g1 = store.entry(planes.param_indices()[1]).value;
    auto keep = g1;
    std::fill(g1.begin(), g1.end(), 0.0);
    Tape tape;
    Tensor out = planes.encode(tape, planes.bind(tape, store), pos, times);
    for (double v : out.values()) CHECK(v == 0.0);
    g1 = keep;
  }
  {
    // randomize grids, query a common vertex: output = elementwise product
    for (int p = 0; p < 3; ++p)
      for (double& v : store.entry(planes.param_indices()[static_cast<size_t>(p)]).value)
        v = rng.uniform(0.5, 2.0);
    const int rs = 4, rt = 3;
    const int iu[3] = {1, 2, 3}, iv = 1;
    std::vector<double> vpos = {iu[0] / 3.0 - 0.5, iu[1] / 3.0 - 0.5, iu[2] / 3.0 - 0.5};
    std::vector<double> vtime = {iv / 2.0};
    Tape tape;
    Tensor out = planes.encode(tape, planes.bind(tape, store), vpos, vtime);
    for (int fi = 0; fi < 2; ++fi) {
      double expect = 1.0;
      for (int p = 0; p < 3; ++p) {
        const auto& g = store.entry(planes.param_indices()[static_cast<size_t>(p)]).value;
        expect *= g[static_cast<size_t>((iu[p] * rt + iv) * 2 + fi)];
      }
      CHECK(out.values()[static_cast<size_t>(fi)] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("plane set gradients: grids and positions both pass grad_check") {
  ParameterStore store;
  Rng rng(19);
  PlaneSet planes = PlaneSet::create(store, "planes", tiny_planes(), rng);
  for (int p = 0; p < 3; ++p)
    for (double& v : store.entry(planes.param_indices()[static_cast<size_t>(p)]).value)
      v = rng.uniform(-1.0, 1.0);
  auto pos = random_positions(rng, 4);
  std::vector<double> times = {0.15, 0.4, 0.62, 0.9};

  auto fg = [&](Tape& tape) {
    return tape.sum(tape.square(planes.encode(tape, planes.bind(tape, store), pos, times)));
  };
  CHECK(grad_check_params(fg, store, 1e-5) < 1e-4);

  auto fx = [&](Tape& tape, Tensor x) {
    Tensor xr = tape.reshape(x, {4, 3});
    auto grids = planes.bind(tape, store);
    return tape.sum(tape.square(planes.encode(tape, grids, xr, times)));
  };
  CHECK(grad_check(fx, {12}, pos, 1e-6) < 1e-4);
}

TEST_CASE("bundles: hybrid width, identity temporal field, disjoint parameters") {
  ParameterStore store;
  Rng rng(23);
  EncoderBundleConfig cfg;
  cfg.hash = tiny_hash();
  cfg.planes = tiny_planes();
  EncoderBundle lidar = EncoderBundle::create(store, "lidar", cfg, rng);
  EncoderBundle camera = EncoderBundle::create(store, "camera", cfg, rng);
  CHECK(lidar.hybrid_width() == 3 * 2 + 2);

  auto pos = random_positions(rng, 8);
  std::vector<double> times(8, 0.3);

  auto run_lidar = [&] {
    Tape tape;
    auto bound = bind_bundle(tape, store, lidar);
    Tensor h = hybrid_encode(tape, lidar, bound, pos, times);
    return std::vector<double>(h.values().begin(), h.values().end());
  };
  auto before = run_lidar();

  // fresh planes are the identity: temporal part is all ones
  const int64_t W = lidar.hybrid_width();
  for (int64_t m = 0; m < 8; ++m)
    for (int64_t f = W - 2; f < W; ++f)
      CHECK(before[static_cast<size_t>(m * W + f)] == doctest::Approx(1.0).epsilon(1e-12));

  // same input, different bundle: different outputs after disjoint random init
  {
    Tape tape;
    auto bound = bind_bundle(tape, store, camera);
    Tensor h = hybrid_encode(tape, camera, bound, pos, times);
    bool any_diff = false;
    for (size_t k = 0; k < before.size(); ++k)
      any_diff = any_diff || h.values()[k] != before[k];
    CHECK(any_diff);
  }

  // zeroing every camera parameter leaves LiDAR outputs bit-unchanged
  for (size_t p = 0; p < store.count(); ++p)
    if (store.entry(static_cast<int>(p)).name.find("camera") != std::string::npos)
      std::fill(store.entry(static_cast<int>(p)).value.begin(),
                store.entry(static_cast<int>(p)).value.end(), 0.0);
  auto after = run_lidar();
  CHECK(after == before);
}

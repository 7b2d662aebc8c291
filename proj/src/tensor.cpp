#include "nvsf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif
#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace nvsf {

namespace {

// Tapes allocate and free many MB-sized buffers every iteration. With glibc's
// default trim/mmap thresholds those pages bounce through the kernel each
// time, which costs more than the arithmetic. Keep the arena resident.
void tune_allocator_once() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int worker_threads() {
  static const int n = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("NVSF_THREADS")) {
      const int cap = std::atoi(env);
      if (cap > 0) return std::min(cap, hw);
    }
    return hw;
  }();
  return n;
}

namespace {

int64_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
int64_t cols_of(const Shape& s) { return s.size() == 2 ? s[1] : (s.empty() ? 1 : s[0]); }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void check_rank(const Shape& s) {
  if (s.empty() || s.size() > 2) throw std::invalid_argument("tensor rank must be 1 or 2, got " + shape_str(s));
  for (int64_t e : s)
    if (e <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(s));
}

// C[M,N] += or = A[M,K] * B[K,N], row-major. Each output row is produced by
// exactly one thread with a fixed-order inner loop, so results are
// bit-identical for any thread count. The 8-wide column blocks keep the
// accumulators in registers without reassociating any sums.
void mm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (M >= 64)
  for (int64_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    if (!accumulate) std::fill(c, c + N, 0.0);
    const double* a = A + i * K;
    int64_t jb = 0;
    for (; jb + 8 <= N; jb += 8) {
      double acc[8];
      for (int u = 0; u < 8; ++u) acc[u] = c[jb + u];
      for (int64_t k = 0; k < K; ++k) {
        const double aik = a[k];
        const double* b = B + k * N + jb;
        for (int u = 0; u < 8; ++u) acc[u] += aik * b[u];
      }
      for (int u = 0; u < 8; ++u) c[jb + u] = acc[u];
    }
    for (int64_t k = 0; k < K && jb < N; ++k) {
      const double aik = a[k];
      const double* b = B + k * N;
      for (int64_t j = jb; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

// C[M,K] += A[M,N] * B^T, with B stored [K,N] (i.e. C[i,k] += dot(A[i,:], B[k,:])).
// Four fixed-stride partial sums per dot keep the order deterministic while
// letting the compiler vectorize.
void mm_nt_acc(const double* A, const double* B, double* C, int64_t M, int64_t N, int64_t K) {
#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (M >= 64)
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * N;
    double* c = C + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      double acc[4] = {0.0, 0.0, 0.0, 0.0};
      int64_t j = 0;
      for (; j + 4 <= N; j += 4)
        for (int u = 0; u < 4; ++u) acc[u] += a[j + u] * b[j + u];
      double tail = 0.0;
      for (; j < N; ++j) tail += a[j] * b[j];
      c[k] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
    }
  }
}

// C[K,N] += A^T * B, with A stored [M,K], B stored [M,N]. C is always a small
// weight gradient that stays cache resident; A and B stream from memory. Each
// thread owns a block of C columns and walks i in order, so results stay
// bit-identical for any thread count.
void mm_tn_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  const int threads = (M >= 512 && N >= 16) ? std::min<int64_t>(worker_threads(), (N + 7) / 8) : 1;
#pragma omp parallel num_threads(threads) if (threads > 1)
  {
#ifdef _OPENMP
    const int tid = omp_get_thread_num();
    const int nt = omp_get_num_threads();
#else
    const int tid = 0;
    const int nt = 1;
#endif
    const int64_t jlo = N * tid / nt;
    const int64_t jhi = N * (tid + 1) / nt;
    for (int64_t i = 0; i < M; ++i) {
      const double* a = A + i * K;
      const double* b = B + i * N;
      for (int64_t k = 0; k < K; ++k) {
        const double aik = a[k];
        double* c = C + k * N;
        for (int64_t j = jlo; j < jhi; ++j) c[j] += aik * b[j];
      }
    }
  }
}

template <typename F>
void elementwise(int64_t n, F&& f) {
#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (n >= 262144)
  for (int64_t i = 0; i < n; ++i) f(i);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
int64_t Tensor::size() const { return static_cast<int64_t>(tape_->node(id_).values.size()); }
int64_t Tensor::rows() const { return rows_of(shape()); }
int64_t Tensor::cols() const { return cols_of(shape()); }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }
std::span<const double> Tensor::values() const { return tape_->node(id_).values; }
std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }

double Tensor::value() const {
  const Node& n = tape_->node(id_);
  if (n.values.size() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(n.shape));
  return n.values[0];
}

int ParameterStore::add(const std::string& name, Shape shape, std::vector<double> value) {
  check_rank(shape);
  if (shape_numel(shape) != static_cast<int64_t>(value.size()))
    throw std::invalid_argument("parameter " + name + ": value count does not match shape " + shape_str(shape));
  if (find(name) >= 0) throw std::invalid_argument("duplicate parameter name " + name);
  entries_.push_back({name, std::move(shape), std::move(value)});
  return static_cast<int>(entries_.size()) - 1;
}

int ParameterStore::find(const std::string& name) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return static_cast<int>(i);
  return -1;
}

int64_t ParameterStore::total_values() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += static_cast<int64_t>(e.value.size());
  return n;
}

Tape::Tape() {
  tune_allocator_once();
  nodes_.reserve(kInitialNodeCapacity);
}

Tensor Tape::emit(Node n) {
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int32_t>(nodes_.size()) - 1);
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  check_rank(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("constant: value count does not match shape " + shape_str(shape));
  Node n;
  n.op = Op::Constant;
  n.shape = std::move(shape);
  n.values = std::move(values);
  return emit(std::move(n));
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  check_rank(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("leaf: value count does not match shape " + shape_str(shape));
  Node n;
  n.op = Op::Leaf;
  n.shape = std::move(shape);
  n.values = std::move(values);
  n.requires_grad = requires_grad;
  return emit(std::move(n));
}

Tensor Tape::bind(ParameterStore& store, int param_index) {
  const auto& e = store.entry(param_index);
  Tensor t = leaf(e.shape, e.value, true);
  node(t.id()).param_index = param_index;
  param_bindings_.emplace_back(param_index, t.id());
  return t;
}

Tensor Tape::binary(Op op, Tensor a, Tensor b) {
  const Node& na = node(a.id());
  const Node& nb = node(b.id());
  if (na.shape != nb.shape) {
    const char* name = op == Op::Add ? "add" : op == Op::Sub ? "sub" : "mul";
    shape_error(name, na.shape, nb.shape);
  }
  Node n;
  n.op = op;
  n.shape = na.shape;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  const int64_t count = static_cast<int64_t>(na.values.size());
  n.values.resize(static_cast<size_t>(count));
  const double* pa = na.values.data();
  const double* pb = nb.values.data();
  double* po = n.values.data();
  switch (op) {
    case Op::Add:
      elementwise(count, [&](int64_t i) { po[i] = pa[i] + pb[i]; });
      break;
    case Op::Sub:
      elementwise(count, [&](int64_t i) { po[i] = pa[i] - pb[i]; });
      break;
    case Op::Mul:
      elementwise(count, [&](int64_t i) { po[i] = pa[i] * pb[i]; });
      break;
    default:
      throw std::logic_error("binary: bad op");
  }
  return emit(std::move(n));
}

Tensor Tape::add(Tensor a, Tensor b) { return binary(Op::Add, a, b); }
Tensor Tape::sub(Tensor a, Tensor b) { return binary(Op::Sub, a, b); }
Tensor Tape::mul(Tensor a, Tensor b) { return binary(Op::Mul, a, b); }

Tensor Tape::matmul(Tensor a, Tensor b) {
  const Node& na = node(a.id());
  const Node& nb = node(b.id());
  const int64_t M = rows_of(na.shape), K = cols_of(na.shape);
  const int64_t K2 = rows_of(nb.shape), N = cols_of(nb.shape);
  if (K != K2) shape_error("matmul", na.shape, nb.shape);
  Node n;
  n.op = Op::MatMul;
  n.shape = {M, N};
  n.inputs = {a.id(), b.id()};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  n.values.resize(static_cast<size_t>(M * N));
  mm_nn(na.values.data(), nb.values.data(), n.values.data(), M, K, N, false);
  return emit(std::move(n));
}

Tensor Tape::affine(Tensor a, Tensor w, Tensor bias) {
  const Node& na = node(a.id());
  const Node& nw = node(w.id());
  const Node& nb = node(bias.id());
  const int64_t M = rows_of(na.shape), K = cols_of(na.shape);
  const int64_t K2 = rows_of(nw.shape), N = cols_of(nw.shape);
  if (K != K2 || rows_of(nb.shape) != 1 || cols_of(nb.shape) != N) shape_error("affine", na.shape, nw.shape);
  Node n;
  n.op = Op::Affine;
  n.shape = {M, N};
  n.inputs = {a.id(), w.id(), bias.id()};
  n.requires_grad = na.requires_grad || nw.requires_grad || nb.requires_grad;
  n.values.resize(static_cast<size_t>(M * N));
  const double* bv = nb.values.data();
#pragma omp parallel for schedule(static) num_threads(worker_threads()) if (M >= 256)
  for (int64_t i = 0; i < M; ++i)
    std::memcpy(n.values.data() + i * N, bv, static_cast<size_t>(N) * sizeof(double));
  mm_nn(na.values.data(), nw.values.data(), n.values.data(), M, K, N, true);
  return emit(std::move(n));
}

Tensor Tape::unary(Op op, Tensor a) {
  const Node& na = node(a.id());
  Node n;
  n.op = op;
  n.shape = na.shape;
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  const int64_t count = static_cast<int64_t>(na.values.size());
  n.values.resize(static_cast<size_t>(count));
  const double* p = na.values.data();
  double* o = n.values.data();
  switch (op) {
    case Op::Relu:
      elementwise(count, [&](int64_t i) { o[i] = p[i] > 0.0 ? p[i] : 0.0; });
      break;
    case Op::Sigmoid:
      elementwise(count, [&](int64_t i) { o[i] = stable_sigmoid(p[i]); });
      break;
    case Op::Softplus:
      elementwise(count, [&](int64_t i) { o[i] = stable_softplus(p[i]); });
      break;
    case Op::Exp:
      elementwise(count, [&](int64_t i) { o[i] = std::exp(p[i]); });
      break;
    case Op::Log:
      elementwise(count, [&](int64_t i) { o[i] = std::log(p[i]); });
      break;
    case Op::Neg:
      elementwise(count, [&](int64_t i) { o[i] = -p[i]; });
      break;
    case Op::Abs:
      elementwise(count, [&](int64_t i) { o[i] = std::abs(p[i]); });
      break;
    case Op::Square:
      elementwise(count, [&](int64_t i) { o[i] = p[i] * p[i]; });
      break;
    default:
      throw std::logic_error("unary: bad op");
  }
  return emit(std::move(n));
}

Tensor Tape::relu(Tensor a) { return unary(Op::Relu, a); }
Tensor Tape::sigmoid(Tensor a) { return unary(Op::Sigmoid, a); }
Tensor Tape::softplus(Tensor a) { return unary(Op::Softplus, a); }
Tensor Tape::exp(Tensor a) { return unary(Op::Exp, a); }
Tensor Tape::log(Tensor a) { return unary(Op::Log, a); }
Tensor Tape::neg(Tensor a) { return unary(Op::Neg, a); }
Tensor Tape::abs(Tensor a) { return unary(Op::Abs, a); }
Tensor Tape::square(Tensor a) { return unary(Op::Square, a); }

Tensor Tape::sum(Tensor a) {
  const Node& na = node(a.id());
  double acc = 0.0;
  for (double v : na.values) acc += v;
  Node n;
  n.op = Op::Sum;
  n.shape = {1};
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  n.values = {acc};
  return emit(std::move(n));
}

Tensor Tape::mean(Tensor a) {
  const Node& na = node(a.id());
  double acc = 0.0;
  for (double v : na.values) acc += v;
  Node n;
  n.op = Op::Mean;
  n.shape = {1};
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  n.values = {acc / static_cast<double>(na.values.size())};
  return emit(std::move(n));
}

Tensor Tape::concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  const Node& first = node(parts[0].id());
  const int64_t R = rows_of(first.shape), C = cols_of(first.shape);
  bool rank2 = first.shape.size() == 2;
  int64_t total = 0;
  for (const Tensor& p : parts) {
    const Node& np = node(p.id());
    rank2 = rank2 || np.shape.size() == 2;
    if (axis == 1) {
      if (rows_of(np.shape) != R) shape_error("concat", first.shape, np.shape);
      total += cols_of(np.shape);
    } else {
      if (cols_of(np.shape) != C) shape_error("concat", first.shape, np.shape);
      total += rows_of(np.shape);
    }
  }
  Node n;
  n.op = Op::Concat;
  n.axis = axis;
  if (axis == 1)
    n.shape = (rank2 || R > 1) ? Shape{R, total} : Shape{total};
  else
    n.shape = Shape{total, C};
  n.requires_grad = false;
  for (const Tensor& p : parts) {
    n.inputs.push_back(p.id());
    n.requires_grad = n.requires_grad || node(p.id()).requires_grad;
  }
  n.values.resize(static_cast<size_t>(shape_numel(n.shape)));
  if (axis == 0) {
    double* o = n.values.data();
    for (const Tensor& p : parts) {
      const auto& v = node(p.id()).values;
      std::memcpy(o, v.data(), v.size() * sizeof(double));
      o += v.size();
    }
  } else {
    const int64_t out_c = cols_of(n.shape);
    int64_t col0 = 0;
    for (const Tensor& p : parts) {
      const Node& np = node(p.id());
      const int64_t pc = cols_of(np.shape);
      for (int64_t r = 0; r < R; ++r)
        std::memcpy(n.values.data() + r * out_c + col0, np.values.data() + r * pc,
                    static_cast<size_t>(pc) * sizeof(double));
      col0 += pc;
    }
  }
  return emit(std::move(n));
}

Tensor Tape::slice(Tensor a, int64_t axis, int64_t start, int64_t len) {
  const Node& na = node(a.id());
  const int64_t R = rows_of(na.shape), C = cols_of(na.shape);
  if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
  const int64_t extent = axis == 0 ? R : C;
  if (start < 0 || len <= 0 || start + len > extent)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of extent " + std::to_string(extent));
  Node n;
  n.op = Op::Slice;
  n.axis = axis;
  n.start = start;
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  if (axis == 0) {
    n.shape = {len, C};
    n.values.assign(na.values.begin() + start * C, na.values.begin() + (start + len) * C);
  } else {
    n.shape = na.shape.size() == 2 ? Shape{R, len} : Shape{len};
    n.values.resize(static_cast<size_t>(R * len));
    for (int64_t r = 0; r < R; ++r)
      std::memcpy(n.values.data() + r * len, na.values.data() + r * C + start,
                  static_cast<size_t>(len) * sizeof(double));
  }
  return emit(std::move(n));
}

Tensor Tape::gather(Tensor table, std::vector<int64_t> row_indices) {
  const Node& nt = node(table.id());
  const int64_t R = rows_of(nt.shape), C = cols_of(nt.shape);
  for (int64_t idx : row_indices)
    if (idx < 0 || idx >= R)
      throw std::out_of_range("gather: index " + std::to_string(idx) + " out of [0," + std::to_string(R) + ")");
  Node n;
  n.op = Op::Gather;
  n.shape = {static_cast<int64_t>(row_indices.size()), C};
  n.inputs = {table.id()};
  n.requires_grad = nt.requires_grad;
  n.values.resize(row_indices.size() * static_cast<size_t>(C));
  const double* src = nt.values.data();
  double* dst = n.values.data();
  const int64_t K = static_cast<int64_t>(row_indices.size());
  elementwise(K, [&](int64_t r) {
    std::memcpy(dst + r * C, src + row_indices[static_cast<size_t>(r)] * C, static_cast<size_t>(C) * sizeof(double));
  });
  n.indices = std::move(row_indices);
  return emit(std::move(n));
}

Tensor Tape::scatter_add(Tensor base, std::vector<int64_t> row_indices, Tensor rows) {
  const Node& nb = node(base.id());
  const Node& nr = node(rows.id());
  const int64_t R = rows_of(nb.shape), C = cols_of(nb.shape);
  if (cols_of(nr.shape) != C || rows_of(nr.shape) != static_cast<int64_t>(row_indices.size()))
    shape_error("scatter_add", nb.shape, nr.shape);
  for (int64_t idx : row_indices)
    if (idx < 0 || idx >= R)
      throw std::out_of_range("scatter_add: index " + std::to_string(idx) + " out of [0," + std::to_string(R) + ")");
  Node n;
  n.op = Op::ScatterAdd;
  n.shape = nb.shape;
  n.inputs = {base.id(), rows.id()};
  n.requires_grad = nb.requires_grad || nr.requires_grad;
  n.values = nb.values;
  for (size_t r = 0; r < row_indices.size(); ++r) {
    double* dst = n.values.data() + row_indices[r] * C;
    const double* src = nr.values.data() + static_cast<int64_t>(r) * C;
    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
  }
  n.indices = std::move(row_indices);
  return emit(std::move(n));
}

Tensor Tape::broadcast(Tensor a, Shape target) {
  check_rank(target);
  const Node& na = node(a.id());
  const int64_t sr = rows_of(na.shape), sc = cols_of(na.shape);
  const int64_t tr = rows_of(target), tc = cols_of(target);
  if (!((sr == 1 && sc == 1) || (sr == 1 && sc == tc) || (sc == 1 && sr == tr)))
    shape_error("broadcast", na.shape, target);
  Node n;
  n.op = Op::Broadcast;
  n.shape = std::move(target);
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  n.values.resize(static_cast<size_t>(tr * tc));
  double* o = n.values.data();
  const double* p = na.values.data();
  if (sr == 1 && sc == 1) {
    std::fill(n.values.begin(), n.values.end(), p[0]);
  } else if (sr == 1) {
    for (int64_t r = 0; r < tr; ++r) std::memcpy(o + r * tc, p, static_cast<size_t>(tc) * sizeof(double));
  } else {
    elementwise(tr, [&](int64_t r) {
      const double v = p[r];
      double* row = o + r * tc;
      for (int64_t c = 0; c < tc; ++c) row[c] = v;
    });
  }
  return emit(std::move(n));
}

Tensor Tape::reshape(Tensor a, Shape target) {
  check_rank(target);
  const Node& na = node(a.id());
  if (shape_numel(target) != static_cast<int64_t>(na.values.size())) shape_error("reshape", na.shape, target);
  Node n;
  n.op = Op::Reshape;
  n.shape = std::move(target);
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  n.values = na.values;
  return emit(std::move(n));
}

Tensor Tape::scale(Tensor a, double c) {
  const Node& na = node(a.id());
  Node n;
  n.op = Op::Scale;
  n.shape = na.shape;
  n.scalar = c;
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  n.values.resize(na.values.size());
  const double* p = na.values.data();
  double* o = n.values.data();
  elementwise(static_cast<int64_t>(na.values.size()), [&](int64_t i) { o[i] = p[i] * c; });
  return emit(std::move(n));
}

Tensor Tape::add_scalar(Tensor a, double c) {
  const Node& na = node(a.id());
  Node n;
  n.op = Op::AddScalar;
  n.shape = na.shape;
  n.scalar = c;
  n.inputs = {a.id()};
  n.requires_grad = na.requires_grad;
  n.values.resize(na.values.size());
  const double* p = na.values.data();
  double* o = n.values.data();
  elementwise(static_cast<int64_t>(na.values.size()), [&](int64_t i) { o[i] = p[i] + c; });
  return emit(std::move(n));
}

Tensor Tape::custom(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                    std::function<void(Tape&, const Node&)> backward_fn) {
  check_rank(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("custom: value count does not match shape " + shape_str(shape));
  Node n;
  n.op = Op::Custom;
  n.shape = std::move(shape);
  n.values = std::move(values);
  n.backward_fn = std::move(backward_fn);
  for (const Tensor& t : inputs) {
    n.inputs.push_back(t.id());
    n.requires_grad = n.requires_grad || node(t.id()).requires_grad;
  }
  return emit(std::move(n));
}

std::vector<double>& Tape::grad_acc(int32_t id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

void Tape::backward_node(int32_t id) {
  Node& n = node(id);
  const std::vector<double>& g = n.grad;
  auto in = [&](size_t k) -> Node& { return node(n.inputs[k]); };
  auto wants = [&](size_t k) { return in(k).requires_grad; };
  const int64_t count = static_cast<int64_t>(n.values.size());

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return;
    case Op::Add: {
      for (size_t k = 0; k < 2; ++k)
        if (wants(k)) {
          double* d = grad_acc(n.inputs[k]).data();
          elementwise(count, [&](int64_t i) { d[i] += g[i]; });
        }
      return;
    }
    case Op::Sub: {
      if (wants(0)) {
        double* d = grad_acc(n.inputs[0]).data();
        elementwise(count, [&](int64_t i) { d[i] += g[i]; });
      }
      if (wants(1)) {
        double* d = grad_acc(n.inputs[1]).data();
        elementwise(count, [&](int64_t i) { d[i] -= g[i]; });
      }
      return;
    }
    case Op::Mul: {
      const double* va = in(0).values.data();
      const double* vb = in(1).values.data();
      if (wants(0)) {
        double* d = grad_acc(n.inputs[0]).data();
        elementwise(count, [&](int64_t i) { d[i] += g[i] * vb[i]; });
      }
      if (wants(1)) {
        double* d = grad_acc(n.inputs[1]).data();
        elementwise(count, [&](int64_t i) { d[i] += g[i] * va[i]; });
      }
      return;
    }
    case Op::MatMul: {
      const Node& a = in(0);
      const Node& b = in(1);
      const int64_t M = rows_of(a.shape), K = cols_of(a.shape), N = cols_of(b.shape);
      if (wants(0)) mm_nt_acc(g.data(), b.values.data(), grad_acc(n.inputs[0]).data(), M, N, K);
      if (wants(1)) mm_tn_acc(a.values.data(), g.data(), grad_acc(n.inputs[1]).data(), M, K, N);
      return;
    }
    case Op::Affine: {
      const Node& a = in(0);
      const Node& w = in(1);
      const int64_t M = rows_of(a.shape), K = cols_of(a.shape), N = cols_of(w.shape);
      if (wants(0)) mm_nt_acc(g.data(), w.values.data(), grad_acc(n.inputs[0]).data(), M, N, K);
      if (wants(1)) mm_tn_acc(a.values.data(), g.data(), grad_acc(n.inputs[1]).data(), M, K, N);
      if (wants(2)) {
        double* d = grad_acc(n.inputs[2]).data();
        for (int64_t i = 0; i < M; ++i) {
          const double* gs = g.data() + i * N;
          for (int64_t j = 0; j < N; ++j) d[j] += gs[j];
        }
      }
      return;
    }
    case Op::Sum: {
      if (!wants(0)) return;
      auto& d = grad_acc(n.inputs[0]);
      const double gv = g[0];
      for (double& x : d) x += gv;
      return;
    }
    case Op::Mean: {
      if (!wants(0)) return;
      auto& d = grad_acc(n.inputs[0]);
      const double gv = g[0] / static_cast<double>(d.size());
      for (double& x : d) x += gv;
      return;
    }
    case Op::Relu: {
      if (!wants(0)) return;
      const double* x = in(0).values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += x[i] > 0.0 ? g[i] : 0.0; });
      return;
    }
    case Op::Sigmoid: {
      if (!wants(0)) return;
      const double* y = n.values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += g[i] * y[i] * (1.0 - y[i]); });
      return;
    }
    case Op::Softplus: {
      if (!wants(0)) return;
      const double* x = in(0).values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += g[i] * stable_sigmoid(x[i]); });
      return;
    }
    case Op::Exp: {
      if (!wants(0)) return;
      const double* y = n.values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += g[i] * y[i]; });
      return;
    }
    case Op::Log: {
      if (!wants(0)) return;
      const double* x = in(0).values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += g[i] / x[i]; });
      return;
    }
    case Op::Neg: {
      if (!wants(0)) return;
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] -= g[i]; });
      return;
    }
    case Op::Abs: {
      if (!wants(0)) return;
      const double* x = in(0).values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0); });
      return;
    }
    case Op::Square: {
      if (!wants(0)) return;
      const double* x = in(0).values.data();
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += 2.0 * x[i] * g[i]; });
      return;
    }
    case Op::Concat: {
      const int64_t out_c = cols_of(n.shape);
      if (n.axis == 0) {
        int64_t off = 0;
        for (size_t k = 0; k < n.inputs.size(); ++k) {
          const int64_t cnt = static_cast<int64_t>(in(k).values.size());
          if (wants(k)) {
            double* d = grad_acc(n.inputs[k]).data();
            const double* gs = g.data() + off;
            elementwise(cnt, [&](int64_t i) { d[i] += gs[i]; });
          }
          off += cnt;
        }
      } else {
        const int64_t R = rows_of(n.shape);
        int64_t col0 = 0;
        for (size_t k = 0; k < n.inputs.size(); ++k) {
          const int64_t pc = cols_of(in(k).shape);
          if (wants(k)) {
            double* d = grad_acc(n.inputs[k]).data();
            for (int64_t r = 0; r < R; ++r) {
              const double* gs = g.data() + r * out_c + col0;
              double* ds = d + r * pc;
              for (int64_t c = 0; c < pc; ++c) ds[c] += gs[c];
            }
          }
          col0 += pc;
        }
      }
      return;
    }
    case Op::Slice: {
      if (!wants(0)) return;
      const Node& a = in(0);
      const int64_t C = cols_of(a.shape);
      double* d = grad_acc(n.inputs[0]).data();
      if (n.axis == 0) {
        const int64_t cnt = count;
        double* ds = d + n.start * C;
        elementwise(cnt, [&](int64_t i) { ds[i] += g[i]; });
      } else {
        const int64_t R = rows_of(a.shape), L = cols_of(n.shape);
        for (int64_t r = 0; r < R; ++r) {
          const double* gs = g.data() + r * L;
          double* ds = d + r * C + n.start;
          for (int64_t c = 0; c < L; ++c) ds[c] += gs[c];
        }
      }
      return;
    }
    case Op::Gather: {
      if (!wants(0)) return;
      const int64_t C = cols_of(n.shape);
      double* d = grad_acc(n.inputs[0]).data();
      // Sequential: rows may collide on the same table slot.
      for (size_t r = 0; r < n.indices.size(); ++r) {
        const double* gs = g.data() + static_cast<int64_t>(r) * C;
        double* ds = d + n.indices[r] * C;
        for (int64_t c = 0; c < C; ++c) ds[c] += gs[c];
      }
      return;
    }
    case Op::ScatterAdd: {
      const int64_t C = cols_of(n.shape);
      if (wants(0)) {
        double* d = grad_acc(n.inputs[0]).data();
        elementwise(count, [&](int64_t i) { d[i] += g[i]; });
      }
      if (wants(1)) {
        double* d = grad_acc(n.inputs[1]).data();
        for (size_t r = 0; r < n.indices.size(); ++r) {
          const double* gs = g.data() + n.indices[r] * C;
          double* ds = d + static_cast<int64_t>(r) * C;
          for (int64_t c = 0; c < C; ++c) ds[c] += gs[c];
        }
      }
      return;
    }
    case Op::Broadcast: {
      if (!wants(0)) return;
      const Node& a = in(0);
      const int64_t sr = rows_of(a.shape), sc = cols_of(a.shape);
      const int64_t tr = rows_of(n.shape), tc = cols_of(n.shape);
      double* d = grad_acc(n.inputs[0]).data();
      if (sr == 1 && sc == 1) {
        double acc = 0.0;
        for (double v : g) acc += v;
        d[0] += acc;
      } else if (sr == 1) {
        for (int64_t r = 0; r < tr; ++r) {
          const double* gs = g.data() + r * tc;
          for (int64_t c = 0; c < tc; ++c) d[c] += gs[c];
        }
      } else {
        elementwise(tr, [&](int64_t r) {
          const double* gs = g.data() + r * tc;
          double acc = 0.0;
          for (int64_t c = 0; c < tc; ++c) acc += gs[c];
          d[r] += acc;
        });
      }
      return;
    }
    case Op::Reshape: {
      if (!wants(0)) return;
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += g[i]; });
      return;
    }
    case Op::Scale: {
      if (!wants(0)) return;
      double* d = grad_acc(n.inputs[0]).data();
      const double c = n.scalar;
      elementwise(count, [&](int64_t i) { d[i] += c * g[i]; });
      return;
    }
    case Op::AddScalar: {
      if (!wants(0)) return;
      double* d = grad_acc(n.inputs[0]).data();
      elementwise(count, [&](int64_t i) { d[i] += g[i]; });
      return;
    }
    case Op::Custom:
      n.backward_fn(*this, n);
      return;
  }
}

void Tape::backward(Tensor loss) {
  if (backward_done_) throw std::logic_error("backward: tape already swept");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  backward_done_ = true;
  // Non-ancestor requires-grad leaves still report a (zero) gradient.
  for (Node& n : nodes_)
    if (n.op == Op::Leaf && n.requires_grad) n.grad.assign(n.values.size(), 0.0);
  grad_acc(loss.id())[0] = 1.0;
  for (int32_t id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.requires_grad || n.grad.empty()) continue;
    backward_node(id);
  }
}

double grad_check(const std::function<Tensor(Tape&, Tensor)>& f, const Shape& xshape,
                  std::span<const double> x0, double h) {
  std::vector<double> base(x0.begin(), x0.end());
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor x = tape.leaf(xshape, base, true);
    Tensor loss = f(tape, x);
    tape.backward(loss);
    auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  auto eval = [&](const std::vector<double>& xv) {
    Tape tape;
    Tensor x = tape.leaf(xshape, xv, false);
    return f(tape, x).value();
  };
  double max_err = 0.0;
  std::vector<double> xv = base;
  for (size_t i = 0; i < xv.size(); ++i) {
    const double keep = xv[i];
    xv[i] = keep + h;
    const double fp = eval(xv);
    xv[i] = keep - h;
    const double fm = eval(xv);
    xv[i] = keep;
    const double fd = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - fd) / std::max(1e-12, std::abs(a) + std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

double grad_check_params(const std::function<Tensor(Tape&)>& f, ParameterStore& store, double h) {
  std::vector<std::vector<double>> analytic(store.count());
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
    for (const auto& [pidx, nid] : tape.param_bindings()) {
      auto g = tape.node(nid).grad;
      auto& slot = analytic[static_cast<size_t>(pidx)];
      if (slot.empty()) slot.assign(g.begin(), g.end());
      else
        for (size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    }
  }
  auto eval = [&] {
    Tape tape;
    return f(tape).value();
  };
  double max_err = 0.0;
  for (size_t p = 0; p < store.count(); ++p) {
    auto& value = store.entry(static_cast<int>(p)).value;
    const auto& a = analytic[p];
    for (size_t i = 0; i < value.size(); ++i) {
      const double keep = value[i];
      value[i] = keep + h;
      const double fp = eval();
      value[i] = keep - h;
      const double fm = eval();
      value[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double av = a.empty() ? 0.0 : a[i];
      const double err = std::abs(av - fd) / std::max(1e-12, std::abs(av) + std::abs(fd));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

namespace {
constexpr char kCkptMagic[8] = {'N', 'V', 'S', 'F', 'C', 'K', 'P', 'T'};
}

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& items) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(kCkptMagic, 8);
  const uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  for (const NamedTensor& t : items) {
    const uint32_t name_len = static_cast<uint32_t>(t.name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(t.name.data(), name_len);
    const uint32_t rank = static_cast<uint32_t>(t.shape.size());
    out.write(reinterpret_cast<const char*>(&rank), 4);
    for (int64_t e : t.shape) {
      const uint64_t ext = static_cast<uint64_t>(e);
      out.write(reinterpret_cast<const char*>(&ext), 8);
    }
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  std::vector<NamedTensor> items;
  while (true) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    if (in.eof()) break;
    if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
    NamedTensor t;
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 4);
    if (!in || rank > 2) throw std::runtime_error("checkpoint: bad rank in " + path);
    int64_t count = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint64_t ext = 0;
      in.read(reinterpret_cast<char*>(&ext), 8);
      t.shape.push_back(static_cast<int64_t>(ext));
      count *= static_cast<int64_t>(ext);
    }
    t.values.resize(static_cast<size_t>(count));
    in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * 8));
    if (!in) throw std::runtime_error("checkpoint: truncated payload for " + t.name + " in " + path);
    items.push_back(std::move(t));
  }
  return items;
}

}  // namespace nvsf

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nvsf {

// Shapes are rank-1 or rank-2; all values are 64-bit floats.
using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class Op : uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  MatMul,
  Affine,
  Sum,
  Mean,
  Relu,
  Sigmoid,
  Softplus,
  Exp,
  Log,
  Neg,
  Abs,
  Square,
  Concat,
  Slice,
  Gather,
  ScatterAdd,
  Broadcast,
  Reshape,
  Scale,
  AddScalar,
  Custom,  // fused ops (encoders) that supply their own backward
};

class Tape;

// Lightweight handle into the active tape. Copying a Tensor copies the
// handle, not the data.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int32_t id() const { return id_; }
  Tape& tape() const { return *tape_; }

  const Shape& shape() const;
  int64_t size() const;
  int64_t rows() const;  // rank-2 view: [rows, cols]; rank-1 is [1, n]
  int64_t cols() const;
  bool requires_grad() const;

  std::span<const double> values() const;
  std::span<const double> grad() const;  // materialized by Tape::backward
  double value() const;                  // scalar convenience

 private:
  Tape* tape_ = nullptr;
  int32_t id_ = -1;
};

struct Node {
  Op op = Op::Leaf;
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches this node
  std::vector<int32_t> inputs;
  bool requires_grad = false;

  // Saved context (meaning depends on op).
  int64_t axis = 0;
  int64_t start = 0;
  double scalar = 0.0;
  std::vector<int64_t> indices;                       // gather / scatter-add
  std::function<void(Tape&, const Node&)> backward_fn;  // Custom only
  int param_index = -1;                               // Leaf bound to a ParameterStore
};

// Named flat parameter storage that outlives the per-iteration tapes.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> value;
  };

  int add(const std::string& name, Shape shape, std::vector<double> value);
  int find(const std::string& name) const;  // -1 if absent
  Entry& entry(int idx) { return entries_[static_cast<size_t>(idx)]; }
  const Entry& entry(int idx) const { return entries_[static_cast<size_t>(idx)]; }
  size_t count() const { return entries_.size(); }
  int64_t total_values() const;

 private:
  std::vector<Entry> entries_;
};

// Define-by-run tape: ops execute eagerly and record enough context for a
// single reverse sweep. Rebuilt per training iteration; single-owner.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor constant_scalar(double v) { return constant({1}, {v}); }
  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
  // Leaf whose values are copied from (and whose gradient belongs to) a store entry.
  Tensor bind(ParameterStore& store, int param_index);

  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor matmul(Tensor a, Tensor b);
  // a[M,K] * w[K,N] + bias[1,N], fused
  Tensor affine(Tensor a, Tensor w, Tensor bias);
  Tensor sum(Tensor a);
  Tensor mean(Tensor a);
  Tensor relu(Tensor a);
  Tensor sigmoid(Tensor a);
  Tensor softplus(Tensor a);
  Tensor exp(Tensor a);
  Tensor log(Tensor a);
  Tensor neg(Tensor a);
  Tensor abs(Tensor a);
  Tensor square(Tensor a);
  Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
  Tensor slice(Tensor a, int64_t axis, int64_t start, int64_t len);
  Tensor gather(Tensor table, std::vector<int64_t> row_indices);
  Tensor scatter_add(Tensor base, std::vector<int64_t> row_indices, Tensor rows);
  Tensor broadcast(Tensor a, Shape target);
  Tensor reshape(Tensor a, Shape target);
  Tensor scale(Tensor a, double c);
  Tensor add_scalar(Tensor a, double c);

  // Fused op escape hatch: values computed by the caller, backward supplied
  // as a closure that accumulates into input grads via grad_acc().
  Tensor custom(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                std::function<void(Tape&, const Node&)> backward_fn);

  // Reverse sweep from a scalar loss. Every requires-grad leaf ends up with a
  // materialized gradient (zero if disconnected). May be called once per tape.
  void backward(Tensor loss);

  Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t node_count() const { return nodes_.size(); }

  // Gradient buffer of a node, materializing zeros on first access.
  std::vector<double>& grad_acc(int32_t id);

  // (param_index, node id) pairs for leaves created through bind().
  const std::vector<std::pair<int, int32_t>>& param_bindings() const { return param_bindings_; }

 private:
  Tensor emit(Node n);
  Tensor unary(Op op, Tensor a);
  Tensor binary(Op op, Tensor a, Tensor b);
  void backward_node(int32_t id);

  static constexpr size_t kInitialNodeCapacity = 1024;
  std::vector<Node> nodes_;
  std::vector<std::pair<int, int32_t>> param_bindings_;
  bool backward_done_ = false;
};

// Max over coordinates of |analytic - central difference| /
// max(1e-12, |analytic| + |central difference|).
double grad_check(const std::function<Tensor(Tape&, Tensor)>& f, const Shape& xshape,
                  std::span<const double> x0, double h);

// Same relative-error reduction, taken over every parameter of the store.
double grad_check_params(const std::function<Tensor(Tape&)>& f, ParameterStore& store, double h);

// --- Checkpoint file format -------------------------------------------------
// magic "NVSFCKPT", u32 version, then per tensor:
//   u32 name length, name bytes, u32 rank, u64 extents, little-endian f64 payload.

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& items);
std::vector<NamedTensor> read_checkpoint(const std::string& path);

// Worker-thread cap from NVSF_THREADS (0 or unset = hardware concurrency).
int worker_threads();

}  // namespace nvsf

#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle to a shared TapeNode. Kernels allocate a new node
// for their output and, when any operand requires grad and grad mode is on,
// record the operands plus a backward closure on that node. `backward(loss)`
// walks the reachable graph once in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ibc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Mul,
  Scale,
  AddScalar,
  Reshape,
  Transpose,
  Concat,
  Slice,
  TakeRows,
  Softmax,
  LogSoftmax,
  Log,
  Exp,
  LayerNorm,
  Gelu,
  Sigmoid,
  Sum,
  SumLast,
  Mean,
  Clamp,
};

const char* op_name(OpKind op);

struct TapeNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  OpKind op = OpKind::Leaf;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  // Reads self.grad and accumulates into self.inputs[i]->grad. Saved context lives in the closure.
  std::function<void(TapeNode& self)> backward;

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  // Only meaningful on leaves (optimizer updates, test fixtures).
  std::span<double> mutable_values() { return node_->values; }
  double item() const;
  double at(std::size_t flat_index) const { return node_->values.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  OpKind op() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  // dLoss/dthis after backward; zeros when this tensor did not participate.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Independent leaf with the same values.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  const std::shared_ptr<TapeNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TapeNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TapeNode> node_;
};

// Thread-local switch; while a guard is alive no kernel records tape nodes.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- kernels -------------------------------------------------------------

// a: [..., m, k]; b: [k, n] (shared) or [..., k, n] with the same leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise with limited broadcasting: b may equal a's shape, be a suffix of it,
// or hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose_last2(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
std::vector<Tensor> split(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& sizes);

// Gathers rows of `table` (first axis) by index. Output shape = out_leading + table.shape[1:].
Tensor take_rows(const Tensor& table, std::span<const std::size_t> rows, Shape out_leading);

Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
// Normalizes the last axis to zero mean / unit variance; no affine part.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
// tanh approximation.
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor sum_last(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- reverse pass --------------------------------------------------------

void backward(const Tensor& loss);

// Max over coordinates of |analytic - numeric| / (|numeric| + 1e-12), with central differences.
// Non-scalar outputs are contracted with a fixed pseudo-random weight vector first.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                         double step = 1e-5);

}  // namespace ibc

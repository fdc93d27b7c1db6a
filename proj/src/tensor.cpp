#include "ibcircuit/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "ibcircuit/errors.hpp"

namespace ibc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local int no_grad_depth = 0;

using NodePtr = std::shared_ptr<TapeNode>;
using BackwardFn = std::function<void(TapeNode&)>;

Tensor make_result(OpKind op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(op));
    }
  }
  auto node = std::make_shared<TapeNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Same as make_result for a variable number of inputs.
Tensor make_result_n(OpKind op, Shape shape, std::vector<double> values,
                     const std::vector<Tensor>& inputs, BackwardFn fn) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(op));
    }
  }
  auto node = std::make_shared<TapeNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Validates limited broadcasting and returns b's period inside a's flat layout.
std::size_t broadcast_period(const Tensor& a, const Tensor& b, const char* op) {
  if (b.numel() == 1) return 1;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  require(ok, std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  return b.numel();
}

std::size_t last_dim(const Tensor& a, const char* op) {
  require(a.rank() >= 1 && a.numel() > 0, std::string(op) + ": empty tensor");
  return a.shape().back();
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::TakeRows: return "take_rows";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Sum: return "sum";
    case OpKind::SumLast: return "sum_last";
    case OpKind::Mean: return "mean";
    case OpKind::Clamp: return "clamp";
  }
  return "?";
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) require(d > 0, "tensor extents must be positive, got " + shape_str(shape));
  require(shape_numel(shape) == values.size(),
          "value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor literal");
  }
  auto node = std::make_shared<TapeNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
  return node_->values[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->values.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return from(shape(), node_->values, false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->values, requires_grad); }

bool grad_enabled() { return no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must have rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  require(k == kb, "matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    require(a.rank() == b.rank() &&
                std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
            "matmul: batch dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n);

  if (shared_rhs) {
    MutMap(out.data(), batch * m, n).noalias() =
        ConstMap(a.values().data(), batch * m, k) * ConstMap(b.values().data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * m * n, m, n).noalias() =
          ConstMap(a.values().data() + i * m * k, m, k) * ConstMap(b.values().data() + i * k * n, k, n);
    }
  }

  return make_result(OpKind::MatMul, std::move(out_shape), std::move(out), {&a, &b},
                     [m, k, n, batch, shared_rhs](TapeNode& self) {
                       TapeNode& A = *self.inputs[0];
                       TapeNode& B = *self.inputs[1];
                       const double* g = self.grad.data();
                       if (A.requires_grad) {
                         auto& ga = A.grad_buffer();
                         if (shared_rhs) {
                           MutMap(ga.data(), batch * m, k).noalias() +=
                               ConstMap(g, batch * m, n) * ConstMap(B.values.data(), k, n).transpose();
                         } else {
                           for (std::size_t i = 0; i < batch; ++i) {
                             MutMap(ga.data() + i * m * k, m, k).noalias() +=
                                 ConstMap(g + i * m * n, m, n) *
                                 ConstMap(B.values.data() + i * k * n, k, n).transpose();
                           }
                         }
                       }
                       if (B.requires_grad) {
                         auto& gb = B.grad_buffer();
                         if (shared_rhs) {
                           MutMap(gb.data(), k, n).noalias() +=
                               ConstMap(A.values.data(), batch * m, k).transpose() * ConstMap(g, batch * m, n);
                         } else {
                           for (std::size_t i = 0; i < batch; ++i) {
                             MutMap(gb.data() + i * k * n, k, n).noalias() +=
                                 ConstMap(A.values.data() + i * m * k, m, k).transpose() *
                                 ConstMap(g + i * m * n, m, n);
                           }
                         }
                       }
                     });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % period];
  return make_result(OpKind::Add, a.shape(), std::move(out), {&a, &b}, [period](TapeNode& self) {
    TapeNode& A = *self.inputs[0];
    TapeNode& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % period] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % period];
  return make_result(OpKind::Mul, a.shape(), std::move(out), {&a, &b}, [period](TapeNode& self) {
    TapeNode& A = *self.inputs[0];
    TapeNode& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * B.values[i % period];
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % period] += self.grad[i] * A.values[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= s;
  return make_result(OpKind::Scale, a.shape(), std::move(out), {&a}, [s](TapeNode& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v += s;
  return make_result(OpKind::AddScalar, a.shape(), std::move(out), {&a}, [](TapeNode& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---- layout --------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(OpKind::Reshape, std::move(shape), std::move(out), {&a}, [](TapeNode& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// src_index[j] = flat index in the source of the j-th output element.
std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  auto in_strides = strides_of(in);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  std::vector<std::size_t> map(shape_numel(in));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < map.size(); ++j) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    map[j] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  require(perm.size() == r, "transpose: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    require(p < r && !seen[p], "transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(a.shape(), perm));
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = av[(*map)[j]];
  return make_result(OpKind::Transpose, std::move(out_shape), std::move(out), {&a}, [map](TapeNode& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t j = 0; j < self.grad.size(); ++j) ga[(*map)[j]] += self.grad[j];
  });
}

Tensor transpose_last2(const Tensor& a) {
  require(a.rank() >= 2, "transpose_last2: rank < 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return transpose(a, perm);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  require(axis < s0.size(), "concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    require(ok, "concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * widths[p], widths[p], out.data() + o * row + offset);
    }
    offset += widths[p];
  }
  return make_result_n(OpKind::Concat, std::move(out_shape), std::move(out), parts,
                       [widths, outer, row](TapeNode& self) {
                         std::size_t off = 0;
                         for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                           TapeNode& in = *self.inputs[p];
                           if (in.requires_grad) {
                             auto& g = in.grad_buffer();
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t c = 0; c < widths[p]; ++c)
                                 g[o * widths[p] + c] += self.grad[o * row + off + c];
                           }
                           off += widths[p];
                         }
                       });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < a.rank(), "slice: axis out of range");
  require(begin < end && end <= a.dim(axis), "slice: bad range [" + std::to_string(begin) + ", " +
                                                 std::to_string(end) + ") on " + shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t src_row = a.dim(axis) * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  std::vector<double> out(outer * width);
  auto v = a.values();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(v.data() + o * src_row + start, width, out.data() + o * width);
  return make_result(OpKind::Slice, std::move(out_shape), std::move(out), {&a},
                     [outer, src_row, width, start](TapeNode& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t c = 0; c < width; ++c) g[o * src_row + start + c] += self.grad[o * width + c];
                     });
}

std::vector<Tensor> split(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
  require(axis < a.rank(), "split: axis out of range");
  require(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == a.dim(axis),
          "split: sizes do not cover axis");
  std::vector<Tensor> parts;
  std::size_t begin = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice(a, axis, begin, begin + s));
    begin += s;
  }
  return parts;
}

Tensor take_rows(const Tensor& table, std::span<const std::size_t> rows, Shape out_leading) {
  require(table.rank() >= 1, "take_rows: table must have rank >= 1");
  require(shape_numel(out_leading) == rows.size(), "take_rows: leading shape does not match index count");
  const std::size_t n_rows = table.dim(0);
  const std::size_t width = table.numel() / n_rows;
  for (std::size_t r : rows) {
    if (r >= n_rows) throw LookupError("take_rows: index " + std::to_string(r) + " out of range " + std::to_string(n_rows));
  }
  Shape out_shape = std::move(out_leading);
  out_shape.insert(out_shape.end(), table.shape().begin() + 1, table.shape().end());
  std::vector<double> out(rows.size() * width);
  auto v = table.values();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(v.data() + rows[i] * width, width, out.data() + i * width);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_result(OpKind::TakeRows, std::move(out_shape), std::move(out), {&table}, [idx, width](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t c = 0; c < width; ++c) g[(*idx)[i] * width + c] += self.grad[i * width + c];
  });
}

// ---- nonlinearities ------------------------------------------------------------

Tensor softmax(const Tensor& a) {
  const std::size_t n = last_dim(a, "softmax");
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * n;
    double* y = out.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (y[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
  }
  return make_result(OpKind::Softmax, a.shape(), std::move(out), {&a}, [n, rows](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (gy[i] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t n = last_dim(a, "log_softmax");
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = x[i] - lse;
  }
  return make_result(OpKind::LogSoftmax, a.shape(), std::move(out), {&a}, [n, rows](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += gy[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += gy[i] - std::exp(y[i]) * total;
    }
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(v[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v[i]));
    out[i] = std::log(v[i]);
  }
  return make_result(OpKind::Log, a.shape(), std::move(out), {&a}, [](TapeNode& self) {
    TapeNode& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / A.values[i];
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(v[i]);
  return make_result(OpKind::Exp, a.shape(), std::move(out), {&a}, [](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.values[i];
  });
}

Tensor layer_norm(const Tensor& a, double eps) {
  const std::size_t n = last_dim(a, "layer_norm");
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto v = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (x[i] - mu) * is;
  }
  return make_result(OpKind::LayerNorm, a.shape(), std::move(out), {&a}, [n, rows, inv_std](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double dn = static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mg += gy[i];
        mgy += gy[i] * y[i];
      }
      mg /= dn;
      mgy /= dn;
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += (*inv_std)[r] * (gy[i] - mg - y[i] * mgy);
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = v[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  return make_result(OpKind::Gelu, a.shape(), std::move(out), {&a}, [](TapeNode& self) {
    TapeNode& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = A.values[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = v[i];
    if (x >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  return make_result(OpKind::Sigmoid, a.shape(), std::move(out), {&a}, [](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.values[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result(OpKind::Sum, {1}, {total}, {&a}, [](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& x : g) x += self.grad[0];
  });
}

Tensor sum_last(const Tensor& a) {
  const std::size_t n = last_dim(a, "sum_last");
  const std::size_t rows = a.numel() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(rows, 0.0);
  auto v = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i) out[r] += v[r * n + i];
  return make_result(OpKind::SumLast, std::move(out_shape), std::move(out), {&a}, [n, rows](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += self.grad[r];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result(OpKind::Mean, {1}, {total / n}, {&a}, [n](TapeNode& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& x : g) x += self.grad[0] / n;
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lo > hi");
  std::vector<double> out(a.numel());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(v[i], lo, hi);
  return make_result(OpKind::Clamp, a.shape(), std::move(out), {&a}, [lo, hi](TapeNode& self) {
    TapeNode& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (A.values[i] >= lo && A.values[i] <= hi) g[i] += self.grad[i];
    }
  });
}

// ---- reverse pass --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents after inputs).
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> visited;
  std::vector<std::pair<TapeNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TapeNode* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(0, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step) {
  std::vector<double> weights;
  auto contract = [&weights](const Tensor& out) -> Tensor {
    if (out.numel() == 1) return out;
    if (weights.size() != out.numel()) {
      std::mt19937_64 rng(0x5eedULL);
      std::uniform_real_distribution<double> u(0.5, 1.5);
      weights.resize(out.numel());
      for (double& w : weights) w = u(rng);
    }
    return sum(mul(out, Tensor::from(out.shape(), weights)));
  };

  Tensor x = point.clone(true);
  Tensor loss = contract(fn(x));
  backward(loss);
  const std::vector<double> analytic = x.grad();

  double worst = 0.0;
  std::vector<double> base(point.values().begin(), point.values().end());
  NoGradGuard guard;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double fp = contract(fn(Tensor::from(point.shape(), plus))).item();
    const double fm = contract(fn(Tensor::from(point.shape(), minus))).item();
    const double numeric = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12));
  }
  return worst;
}

}  // namespace ibc

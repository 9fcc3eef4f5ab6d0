#include "stae/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "stae/error.hpp"

namespace stae {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool t_grad_enabled = true;

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

// Strides of `in` aligned to the rank of `out`, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t d = 0; d < in.size(); ++d) {
    strides[offset + d] = in[d] == 1 ? 0 : own[d];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Visits every element of `out` with the matching offsets into two strided
// operands.
template <class F>
void for_each_offset(const Shape& out, const std::vector<std::size_t>& sa,
                     const std::vector<std::size_t>& sb, F&& fn) {
  const std::size_t rank = out.size();
  const std::size_t total = numel(out);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

std::span<double> detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (stae::numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(stae::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = stae::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  check_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, ndim(), "dim")]; }

std::span<const double> Tensor::values() const {
  check_defined(*this, "values");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  check_defined(*this, "mutable_values");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw IndexError("at: index rank mismatch for " + shape_str(s));
  const auto strides = contiguous_strides(s);
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= s[d]) throw IndexError("at: index " + std::to_string(i) + " out of range on axis " + std::to_string(d));
    off += i * strides[d++];
  }
  return node_->value[off];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  check_defined(*this, "set_requires_grad");
  if (!node_->is_leaf()) throw ContractError("set_requires_grad: only leaf tensors can be toggled");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  check_defined(*this, "grad");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  check_defined(*this, "mutable_grad");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (defined() && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto copy = std::make_shared<detail::Node>();
  copy->shape = shape();
  copy->value = node_->value;
  return Tensor(std::move(copy));
}

// ---------------------------------------------------------------------------
// Tape and backward

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<const detail::Node*> seen;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.nodes_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any tensor requiring grad");

  Tape tape = Tape::record(loss);
  for (detail::Node* node : tape.nodes()) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
  for (detail::Node* node : nodes) {
    if (!node->is_leaf()) Buffer().swap(node->grad);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_op(Shape shape, Buffer values, std::vector<Tensor> inputs, const char* op,
               BackwardFn backward_fn) {
  if (stae::numel(shape) != values.size()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(shape) + " holds " + std::to_string(stae::numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto created = std::make_shared<detail::Node>();
  created->shape = std::move(shape);
  created->value = std::move(values);
  Tensor out(std::move(created));
  bool track = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.op = op;
    node.backward = std::move(backward_fn);
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.node());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Binary { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  const auto& av = a.values();
  const auto& bv = b.values();

  if (a.shape() == b.shape()) {
    Buffer out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = kind == Binary::Add ? av[i] + bv[i] : kind == Binary::Sub ? av[i] - bv[i] : av[i] * bv[i];
    }
    return make_op(a.shape(), std::move(out), {a, b}, name, [kind](detail::Node& self) {
      const auto& g = self.grad;
      detail::Node& na = *self.inputs[0];
      detail::Node& nb = *self.inputs[1];
      if (na.requires_grad) {
        auto ga = na.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += kind == Binary::Mul ? g[i] * nb.value[i] : g[i];
      }
      if (nb.requires_grad) {
        auto gb = nb.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += kind == Binary::Mul ? g[i] * na.value[i] : kind == Binary::Sub ? -g[i] : g[i];
        }
      }
    });
  }

  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  Buffer out(numel(out_shape));
  for_each_offset(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = kind == Binary::Add ? av[ia] + bv[ib] : kind == Binary::Sub ? av[ia] - bv[ib] : av[ia] * bv[ib];
  });
  return make_op(out_shape, std::move(out), {a, b}, name,
                 [kind, out_shape, sa, sb](detail::Node& self) {
                   detail::Node& na = *self.inputs[0];
                   detail::Node& nb = *self.inputs[1];
                   const auto& g = self.grad;
                   std::span<double> ga = na.requires_grad ? na.grad_buffer() : std::span<double>{};
                   std::span<double> gb = nb.requires_grad ? nb.grad_buffer() : std::span<double>{};
                   for_each_offset(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     if (!ga.empty()) ga[ia] += kind == Binary::Mul ? g[i] * nb.value[ib] : g[i];
                     if (!gb.empty()) {
                       gb[ib] += kind == Binary::Mul ? g[i] * na.value[ia] : kind == Binary::Sub ? -g[i] : g[i];
                     }
                   });
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  check_defined(a, "scale");
  Buffer out(a.values().begin(), a.values().end());
  for (double& v : out) v *= factor;
  return make_op(a.shape(), std::move(out), {a}, "scale", [factor](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  check_defined(a, "add_scalar");
  Buffer out(a.values().begin(), a.values().end());
  for (double& v : out) v += offset;
  return make_op(a.shape(), std::move(out), {a}, "add_scalar", [](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  check_defined(a, "broadcast_to");
  if (broadcast_shape(a.shape(), shape, "broadcast_to") != shape) {
    throw ShapeError("broadcast_to: cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto sa = broadcast_strides(a.shape(), shape);
  std::vector<std::size_t> zero(shape.size(), 0);
  Buffer out(numel(shape));
  const auto av = a.values();
  for_each_offset(shape, sa, zero, [&](std::size_t i, std::size_t ia, std::size_t) { out[i] = av[ia]; });
  return make_op(shape, std::move(out), {a}, "broadcast_to", [shape, sa, zero](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for_each_offset(shape, sa, zero, [&](std::size_t i, std::size_t ia, std::size_t) { g[ia] += self.grad[i]; });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.ndim() < 2 || b.ndim() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);

  if (b.ndim() == 2) {
    // Fold every leading axis of `a` into the row count: one GEMM.
    const std::size_t rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Buffer out(rows * n);
    MutMap(out.data(), rows, n).noalias() = ConstMap(a.values().data(), rows, k) * ConstMap(b.values().data(), k, n);
    return make_op(std::move(out_shape), std::move(out), {a, b}, "matmul", [rows, k, n](detail::Node& self) {
      detail::Node& na = *self.inputs[0];
      detail::Node& nb = *self.inputs[1];
      ConstMap g(self.grad.data(), rows, n);
      if (na.requires_grad) {
        MutMap(na.grad_buffer().data(), rows, k).noalias() += g * ConstMap(nb.value.data(), k, n).transpose();
      }
      if (nb.requires_grad) {
        MutMap(nb.grad_buffer().data(), k, n).noalias() += ConstMap(na.value.data(), rows, k).transpose() * g;
      }
    });
  }

  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shape(a_batch, b_batch, "matmul");
  auto sa = broadcast_strides(a_batch, batch);
  auto sb = broadcast_strides(b_batch, batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer out(numel(out_shape));
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  // Per-slice products are small; lazy evaluation skips the GEMM blocking overhead.
  for_each_offset(batch, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(ap + ia * m * k, m, k).lazyProduct(ConstMap(bp + ib * k * n, k, n));
  });
  return make_op(std::move(out_shape), std::move(out), {a, b}, "matmul",
                 [batch, sa, sb, m, k, n](detail::Node& self) {
                   detail::Node& na = *self.inputs[0];
                   detail::Node& nb = *self.inputs[1];
                   double* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
                   double* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
                   for_each_offset(batch, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     ConstMap g(self.grad.data() + i * m * n, m, n);
                     if (ga) {
                       MutMap(ga + ia * m * k, m, k).noalias() +=
                           g.lazyProduct(ConstMap(nb.value.data() + ib * k * n, k, n).transpose());
                     }
                     if (gb) {
                       MutMap(gb + ib * k * n, k, n).noalias() +=
                           ConstMap(na.value.data() + ia * m * k, m, k).transpose().lazyProduct(g);
                     }
                   });
                 });
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_defined(x, "affine");
  if (weight.ndim() != 2 || bias.ndim() != 1 || x.ndim() < 1 || x.dim(-1) != weight.dim(0) ||
      bias.dim(0) != weight.dim(1)) {
    throw ShapeError("affine: incompatible shapes x " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t k = weight.dim(0);
  const std::size_t n = weight.dim(1);
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Buffer out(rows * n);
  MutMap o(out.data(), rows, n);
  o.noalias() = ConstMap(x.values().data(), rows, k) * ConstMap(weight.values().data(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), n);
  return make_op(std::move(out_shape), std::move(out), {x, weight, bias}, "affine",
                 [rows, k, n](detail::Node& self) {
                   detail::Node& nx = *self.inputs[0];
                   detail::Node& nw = *self.inputs[1];
                   detail::Node& nb = *self.inputs[2];
                   ConstMap g(self.grad.data(), rows, n);
                   if (nx.requires_grad) {
                     MutMap(nx.grad_buffer().data(), rows, k).noalias() +=
                         g * ConstMap(nw.value.data(), k, n).transpose();
                   }
                   if (nw.requires_grad) {
                     MutMap(nw.grad_buffer().data(), k, n).noalias() +=
                         ConstMap(nx.value.data(), rows, k).transpose() * g;
                   }
                   if (nb.requires_grad) {
                     Eigen::Map<Eigen::RowVectorXd>(nb.grad_buffer().data(), n) += g.colwise().sum();
                   }
                 });
}

// ---------------------------------------------------------------------------
// Layout

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "permute");
  const std::size_t rank = a.ndim();
  std::vector<bool> used(rank, false);
  if (axes.size() != rank) throw ShapeError("permute: expected " + std::to_string(rank) + " axes");
  for (std::size_t ax : axes) {
    if (ax >= rank || used[ax]) throw ShapeError("permute: invalid axis permutation for " + shape_str(a.shape()));
    used[ax] = true;
  }
  const auto in_strides = contiguous_strides(a.shape());
  Shape out_shape(rank);
  std::vector<std::size_t> src(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = a.shape()[axes[i]];
    src[i] = in_strides[axes[i]];
  }
  Buffer out(a.numel());
  const auto av = a.values();
  if (rank > 0 && axes.back() == rank - 1) {
    // Innermost axis stays put: move contiguous runs instead of single values.
    const std::size_t run = out_shape.back();
    Shape outer(out_shape.begin(), out_shape.end() - 1);
    std::vector<std::size_t> outer_src(src.begin(), src.end() - 1);
    std::vector<std::size_t> zero(rank - 1, 0);
    for_each_offset(outer, outer_src, zero, [&](std::size_t i, std::size_t ia, std::size_t) {
      std::copy_n(av.data() + ia, run, out.data() + i * run);
    });
    return make_op(out_shape, std::move(out), {a}, "permute", [outer, outer_src, zero, run](detail::Node& self) {
      auto g = self.inputs[0]->grad_buffer();
      for_each_offset(outer, outer_src, zero, [&](std::size_t i, std::size_t ia, std::size_t) {
        const double* gi = self.grad.data() + i * run;
        double* go = g.data() + ia;
        for (std::size_t j = 0; j < run; ++j) go[j] += gi[j];
      });
    });
  }
  std::vector<std::size_t> zero(rank, 0);
  for_each_offset(out_shape, src, zero, [&](std::size_t i, std::size_t ia, std::size_t) { out[i] = av[ia]; });
  return make_op(out_shape, std::move(out), {a}, "permute", [out_shape, src, zero](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for_each_offset(out_shape, src, zero, [&](std::size_t i, std::size_t ia, std::size_t) { g[ia] += self.grad[i]; });
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Buffer out(a.values().begin(), a.values().end());
  return make_op(std::move(shape), std::move(out), {a}, "reshape", [](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_defined(p, "concat_last");
    if (p.ndim() != lead.size() + 1 || !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
      throw ShapeError("concat_last: leading shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    widths.push_back(p.dim(-1));
    total += widths.back();
  }
  const std::size_t rows = numel(lead);
  Buffer out(rows * total);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * total + col);
    }
    col += widths[p];
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  return make_op(std::move(out_shape), std::move(out), parts, "concat_last",
                 [rows, total, widths](detail::Node& self) {
                   std::size_t c = 0;
                   for (std::size_t p = 0; p < widths.size(); ++p) {
                     detail::Node& in = *self.inputs[p];
                     if (in.requires_grad) {
                       auto g = in.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < widths[p]; ++j) {
                           g[r * widths[p] + j] += self.grad[r * total + c + j];
                         }
                       }
                     }
                     c += widths[p];
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  check_defined(a, "slice");
  const std::size_t ax = normalize_axis(axis, a.ndim(), "slice");
  const Shape& s = a.shape();
  if (start + length > s[ax] || length == 0) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") invalid for axis of size " + std::to_string(s[ax]));
  }
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + ax));
  const std::size_t inner = numel(Shape(s.begin() + ax + 1, s.end()));
  const std::size_t extent = s[ax];
  Shape out_shape = s;
  out_shape[ax] = length;
  Buffer out(outer * length * inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
  }
  return make_op(std::move(out_shape), std::move(out), {a}, "slice",
                 [outer, inner, extent, start, length](detail::Node& self) {
                   auto g = self.inputs[0]->grad_buffer();
                   for (std::size_t o = 0; o < outer; ++o) {
                     for (std::size_t j = 0; j < length * inner; ++j) {
                       g[(o * extent + start) * inner + j] += self.grad[o * length * inner + j];
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions

Tensor relu(const Tensor& a) {
  check_defined(a, "relu");
  Buffer out(a.values().begin(), a.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), {a}, "relu", [](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    auto g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_op({}, {total}, {a}, "sum", [](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax_last(const Tensor& x) {
  check_defined(x, "softmax_last");
  if (x.ndim() == 0 || x.dim(-1) == 0) throw ShapeError("softmax_last: last dimension must be >= 1");
  const std::size_t width = x.dim(-1);
  const std::size_t rows = x.numel() / width;
  Buffer out(x.numel());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * width;
    double* o = out.data() + r * width;
    const double peak = *std::max_element(in, in + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - peak);
      total += o[j];
    }
    for (std::size_t j = 0; j < width; ++j) o[j] /= total;
  }
  return make_op(x.shape(), std::move(out), {x}, "softmax_last", [rows, width](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * width;
      const double* gy = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < width; ++j) g[r * width + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_defined(x, "layer_norm");
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t width = x.dim(-1);
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match last dimension of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  Buffer out(x.numel());
  Buffer xhat(x.numel());
  Buffer inv_std(rows);
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (in[j] - mu) * inv_std[r];
      xhat[r * width + j] = h;
      out[r * width + j] = gv[j] * h + bv[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
                 [rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                   detail::Node& nx = *self.inputs[0];
                   detail::Node& ng = *self.inputs[1];
                   detail::Node& nb = *self.inputs[2];
                   std::span<double> gx = nx.requires_grad ? nx.grad_buffer() : std::span<double>{};
                   std::span<double> gg = ng.requires_grad ? ng.grad_buffer() : std::span<double>{};
                   std::span<double> gb = nb.requires_grad ? nb.grad_buffer() : std::span<double>{};
                   const double d = static_cast<double>(width);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* gy = self.grad.data() + r * width;
                     const double* h = xhat.data() + r * width;
                     double sum_dh = 0.0;
                     double sum_dh_h = 0.0;
                     for (std::size_t j = 0; j < width; ++j) {
                       const double dh = gy[j] * ng.value[j];
                       sum_dh += dh;
                       sum_dh_h += dh * h[j];
                       if (!gg.empty()) gg[j] += gy[j] * h[j];
                       if (!gb.empty()) gb[j] += gy[j];
                     }
                     if (gx.empty()) continue;
                     for (std::size_t j = 0; j < width; ++j) {
                       const double dh = gy[j] * ng.value[j];
                       gx[r * width + j] += inv_std[r] / d * (d * dh - sum_dh - h[j] * sum_dh_h);
                     }
                   }
                 });
}

Tensor dropout(const Tensor& x, double p, bool train, Rng& rng) {
  check_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must lie in [0, 1)");
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Buffer mask(x.numel());
  // Top 53 bits of the engine output as a uniform draw in [0, 1).
  for (double& m : mask) m = static_cast<double>(rng() >> 11) * 0x1.0p-53 < p ? 0.0 : keep_scale;
  Buffer out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_op(x.shape(), std::move(out), {x}, "dropout", [mask = std::move(mask)](detail::Node& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> indices, const Shape& index_shape) {
  check_defined(table, "gather_rows");
  if (table.ndim() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  if (numel(index_shape) != indices.size()) {
    throw ShapeError("gather_rows: index shape " + shape_str(index_shape) + " does not match " +
                     std::to_string(indices.size()) + " indices");
  }
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  for (std::int32_t idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " outside [0, " + std::to_string(rows) + ")");
    }
  }
  Buffer out(indices.size() * width);
  const auto tv = table.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(indices[i]) * width, width, out.data() + i * width);
  }
  Shape out_shape = index_shape;
  out_shape.push_back(width);
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  return make_op(std::move(out_shape), std::move(out), {table}, "gather_rows",
                 [idx = std::move(idx), width](detail::Node& self) {
                   auto g = self.inputs[0]->grad_buffer();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     double* row = g.data() + static_cast<std::size_t>(idx[i]) * width;
                     for (std::size_t j = 0; j < width; ++j) row[j] += self.grad[i * width + j];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Initialisers

Tensor xavier_uniform(const Shape& shape, Rng& rng) {
  if (shape.empty()) throw ShapeError("xavier_uniform: needs at least one dimension");
  double fan_in = 1.0;
  double fan_out = static_cast<double>(shape[0]);
  if (shape.size() >= 2) {
    const double receptive = static_cast<double>(numel(Shape(shape.begin() + 2, shape.end())));
    fan_in = static_cast<double>(shape[1]) * receptive;
    fan_out = static_cast<double>(shape[0]) * receptive;
  }
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  return uniform(shape, -bound, bound, rng);
}

Tensor uniform(const Shape& shape, double low, double high, Rng& rng) {
  std::uniform_real_distribution<double> dist(low, high);
  std::vector<double> values(numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(shape, std::move(values), true);
}

}  // namespace stae

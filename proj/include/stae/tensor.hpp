#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace stae {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;
// Tensor storage. Fixed alignment keeps Eigen's vectorised loops on the same
// split for every allocation, so results are bitwise reproducible.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the autodiff graph. Leaves have no backward rule; interior
// nodes own references to their inputs so the graph lives as long as its
// outputs do.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }
  // Zero-initialised grad buffer, allocated on first use.
  std::span<double> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return values().size(); }

  std::span<const double> values() const;
  // Direct write access, intended for initialisers and optimiser updates.
  std::span<double> mutable_values();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the values without graph linkage.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered operation record reachable from a root. Every node's
// inputs appear before it.
class Tape {
 public:
  static Tape record(const Tensor& root);

  const std::vector<detail::Node*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<detail::Node*> nodes_;
};

// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
// calls until zero_grad().
void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using BackwardFn = std::function<void(detail::Node&)>;

// Registers a new op result. The backward rule is only kept when grad mode is
// on and some input requires grad.
Tensor make_op(Shape shape, Buffer values,
               std::vector<Tensor> inputs, const char* op, BackwardFn backward);

// Elementwise, numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// Product over the trailing two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// x·W + b with W (k × n) and b (n).
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);

Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax_last(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when
// train is false or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, Rng& rng);

// Row lookup into a (rows × width) table. Output shape is
// index_shape + [width]; backward scatters into the gathered rows.
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> indices,
                   const Shape& index_shape);

Tensor xavier_uniform(const Shape& shape, Rng& rng);
Tensor uniform(const Shape& shape, double low, double high, Rng& rng);

}  // namespace stae

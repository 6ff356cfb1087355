#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a fresh Tensor whose node remembers its inputs and a
// local backward rule; the graph lives exactly as long as the Tensors that
// reference it. Leaves created with requires_grad are the trainable
// parameters, and the only values that may be mutated (via assign) between
// graph lifetimes.
//
// Broadcasting follows trailing-dimension alignment: shapes are compared
// from the last axis backwards, and two extents are compatible when they are
// equal or one of them is 1. Missing leading axes count as 1.
//
// A graph is confined to the thread that built it. Node ids come from a
// process-wide atomic counter, so distinct graphs may be built in parallel.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cib {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node;
using GradSlots = std::vector<std::vector<double>*>;
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad, const GradSlots& parent_grads)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  NodeId id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  // A trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  bool requires_grad() const;
  bool is_leaf() const;
  NodeId id() const;

  // Parameter update between graph lifetimes. Only valid on leaves.
  void assign(std::span<const double> values) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ops recorded while a guard is alive do not keep their inputs alive and
// cannot be differentiated. Thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Shape broadcast_shapes(const Shape& a, const Shape& b);

// Elementwise, broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scalar_mul(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
// Throws DomainError on any non-positive entry.
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softplus(const Tensor& a);
// Gradient passes only where lo <= x <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor logsumexp(const Tensor& a);
Tensor logsumexp(const Tensor& a, int axis, bool keepdim = false);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
// Rows of `a` along axis 0, repeated indices allowed.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// out[i] = a[i, cols[i]] for a of shape [N, C].
Tensor pick(const Tensor& a, std::span<const std::size_t> cols);
Tensor detach(const Tensor& a);

// Fused kernels outside this file: `value` is the forward result and
// `backward` accumulates into the gradient slot of each input that needs one
// (null slots are skipped). Records a graph node only when grad is enabled and
// some input requires grad.
Tensor custom_op(const char* name, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 detail::BackwardFn backward);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scalar_mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scalar_mul(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

// Generic dispatch over the registered op kinds.
enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kElementwiseMul,
  kScalarMul,
  kRelu,
  kTanh,
  kExp,
  kLog,
  kMean,
  kSum,
  kLogsumexp,
  kConcat,
  kSlice,
  kTranspose,
  kBroadcast,
};

struct OpArgs {
  double scalar = 1.0;
  // Reductions reduce everything when unset.
  std::optional<int> axis;
  bool keepdim = false;
  std::size_t begin = 0;
  std::size_t end = 0;
  Shape shape;
};

const char* op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpArgs& args = {});

// Gradients of a scalar loss, keyed by leaf node id. Parameters that the loss
// does not reach read as zeros.
class GradientMap {
 public:
  bool contains(const Tensor& param) const;
  Tensor of(const Tensor& param) const;
  std::size_t size() const { return grads_.size(); }
  void insert(NodeId id, Tensor grad) { grads_.insert_or_assign(id, std::move(grad)); }

 private:
  std::unordered_map<NodeId, Tensor> grads_;
};

GradientMap backward(const Tensor& loss);

// Max over parameter entries of |analytic - central| / max(|analytic|, |central|, 1e-12).
// `f` is evaluated twice up front; differing results raise std::runtime_error.
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h = 1e-5);

}  // namespace cib

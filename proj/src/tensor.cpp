#include "cib/tensor.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cib {

namespace {

std::atomic<NodeId> g_next_id{1};
thread_local bool t_grad_enabled = true;

using detail::BackwardFn;
using detail::GradSlots;
using detail::Node;

NodeId next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

Tensor make_leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  if (numel(shape) != value.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(value.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = next_id();
  return Tensor(std::move(node));
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
               BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = next_id();
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

Tensor make_op_n(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = next_id();
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Input offsets for every output element under broadcasting.
std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r_out = out.size();
  const std::size_t r_in = in.size();
  std::vector<std::size_t> stride(r_out, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < r_in; ++k) {
    const std::size_t axis_in = r_in - 1 - k;
    const std::size_t axis_out = r_out - 1 - k;
    stride[axis_out] = in[axis_in] == 1 ? 0 : s;
    s *= in[axis_in];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> idx(r_out, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    offsets[i] = off;
    for (std::size_t ax = r_out; ax-- > 0;) {
      ++idx[ax];
      off += stride[ax];
      if (idx[ax] < out[ax]) break;
      off -= stride[ax] * out[ax];
      idx[ax] = 0;
    }
  }
  return offsets;
}

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_defined(a, op);
  require_defined(b, op);
  Shape out_shape;
  try {
    out_shape = broadcast_shapes(a.shape(), b.shape());
  } catch (const ShapeError&) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a.shape()) + " with " + to_string(b.shape()));
  }
  const std::size_t n = numel(out_shape);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  std::shared_ptr<std::vector<std::size_t>> ao, bo;
  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    ao = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), out_shape));
    bo = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(b.shape(), out_shape));
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[(*ao)[i]], bv[(*bo)[i]]);
  }
  return make_op(op, out_shape, std::move(out), {&a, &b},
                 [same, ao, bo, da, db](const Node& self, std::span<const double> g, const GradSlots& pg) {
                   const auto& x = self.parents[0]->value;
                   const auto& y = self.parents[1]->value;
                   const std::size_t m = g.size();
                   if (same) {
                     if (pg[0]) {
                       auto& gx = *pg[0];
                       for (std::size_t i = 0; i < m; ++i) gx[i] += g[i] * da(x[i], y[i]);
                     }
                     if (pg[1]) {
                       auto& gy = *pg[1];
                       for (std::size_t i = 0; i < m; ++i) gy[i] += g[i] * db(x[i], y[i]);
                     }
                     return;
                   }
                   if (pg[0]) {
                     auto& gx = *pg[0];
                     for (std::size_t i = 0; i < m; ++i) {
                       const std::size_t p = (*ao)[i], q = (*bo)[i];
                       gx[p] += g[i] * da(x[p], y[q]);
                     }
                   }
                   if (pg[1]) {
                     auto& gy = *pg[1];
                     for (std::size_t i = 0; i < m; ++i) {
                       const std::size_t p = (*ao)[i], q = (*bo)[i];
                       gy[q] += g[i] * db(x[p], y[q]);
                     }
                   }
                 });
}

// dfn(x, y) is the local derivative given input x and output y.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF dfn) {
  require_defined(a, op);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_op(op, a.shape(), std::move(out), {&a},
                 [dfn](const Node& self, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   const auto& x = self.parents[0]->value;
                   auto& gx = *pg[0];
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfn(x[i], self.value[i]);
                 });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return make_leaf({}, {value}, requires_grad); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = cib::numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), false);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return make_leaf(std::move(shape), std::move(data), true);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->value;
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return data()[i]; }

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw ShapeError("at(i, j): tensor of shape " + to_string(shape()) + " is not a matrix");
  return node_->value[i * node_->shape[1] + j];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

NodeId Tensor::id() const {
  require_defined(*this, "id");
  return node_->id;
}

void Tensor::assign(std::span<const double> values) const {
  require_defined(*this, "assign");
  if (!is_leaf()) throw std::logic_error("assign: only leaf tensors may be updated");
  if (values.size() != node_->value.size()) {
    throw ShapeError("assign: expected " + std::to_string(node_->value.size()) + " values, got " +
                     std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), node_->value.begin());
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    out[r - 1 - k] = ea == 1 ? eb : ea;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scalar_mul(const Tensor& a, double s) {
  return unary("scalar_mul", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.data()) {
    if (!(v > 0)) {
      std::ostringstream os;
      os << "log: non-positive input " << v;
      throw DomainError(os.str());
    }
  }
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a, stable_softplus, [](double x, double) { return sigmoid(x); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      if (s == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return make_op("matmul", {m, n}, std::move(out), {&a, &b},
                 [m, k, n](const Node& self, std::span<const double> g, const GradSlots& pg) {
                   const auto& x = self.parents[0]->value;
                   const auto& y = self.parents[1]->value;
                   if (pg[0]) {
                     auto& gx = *pg[0];
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t p = 0; p < k; ++p) {
                         double acc = 0.0;
                         const double* yrow = y.data() + p * n;
                         const double* grow = g.data() + i * n;
                         for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
                         gx[i * k + p] += acc;
                       }
                     }
                   }
                   if (pg[1]) {
                     auto& gy = *pg[1];
                     for (std::size_t i = 0; i < m; ++i) {
                       const double* grow = g.data() + i * n;
                       for (std::size_t p = 0; p < k; ++p) {
                         const double s = x[i * k + p];
                         if (s == 0.0) continue;
                         double* yrow = gy.data() + p * n;
                         for (std::size_t j = 0; j < n; ++j) yrow[j] += s * grow[j];
                       }
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto av = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op("transpose", {n, m}, std::move(out), {&a},
                 [m, n](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return make_op("reshape", std::move(shape), a.to_vector(), {&a},
                 [](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                 });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  require_defined(a, "broadcast");
  if (broadcast_shapes(a.shape(), shape) != shape) {
    throw ShapeError("broadcast: cannot expand " + to_string(a.shape()) + " to " + to_string(shape));
  }
  auto offs = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), shape));
  const auto av = a.data();
  std::vector<double> out(offs->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*offs)[i]];
  return make_op("broadcast", shape, std::move(out), {&a},
                 [offs](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t i = 0; i < g.size(); ++i) gx[(*offs)[i]] += g[i];
                 });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  const auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  return make_op("sum", {}, {s}, {&a}, [](const Node&, std::span<const double> g, const GradSlots& pg) {
    if (!pg[0]) return;
    for (double& v : *pg[0]) v += g[0];
  });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  require_defined(a, "sum");
  const std::size_t ax = normalize_axis(axis, a.rank(), "sum");
  const AxisSplit sp = split_at(a.shape(), ax);
  const auto av = a.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += av[(o * sp.len + l) * sp.inner + i];
  return make_op("sum", reduced_shape(a.shape(), ax, keepdim), std::move(out), {&a},
                 [sp](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t o = 0; o < sp.outer; ++o)
                     for (std::size_t l = 0; l < sp.len; ++l)
                       for (std::size_t i = 0; i < sp.inner; ++i)
                         gx[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
                 });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  require_defined(a, "mean");
  const std::size_t ax = normalize_axis(axis, a.rank(), "mean");
  if (a.shape()[ax] == 0) throw ShapeError("mean: empty axis");
  return scalar_mul(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor logsumexp(const Tensor& a) {
  require_defined(a, "logsumexp");
  if (a.numel() == 0) throw ShapeError("logsumexp: empty tensor");
  return logsumexp(reshape(a, {a.numel()}), 0, false);
}

Tensor logsumexp(const Tensor& a, int axis, bool keepdim) {
  require_defined(a, "logsumexp");
  const std::size_t ax = normalize_axis(axis, a.rank(), "logsumexp");
  const AxisSplit sp = split_at(a.shape(), ax);
  if (sp.len == 0) throw ShapeError("logsumexp: empty axis");
  const auto av = a.data();
  std::vector<double> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, av[(o * sp.len + l) * sp.inner + i]);
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(av[(o * sp.len + l) * sp.inner + i] - mx);
      out[o * sp.inner + i] = mx + std::log(s);
    }
  }
  return make_op("logsumexp", reduced_shape(a.shape(), ax, keepdim), std::move(out), {&a},
                 [sp](const Node& self, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   const auto& x = self.parents[0]->value;
                   auto& gx = *pg[0];
                   for (std::size_t o = 0; o < sp.outer; ++o)
                     for (std::size_t l = 0; l < sp.len; ++l)
                       for (std::size_t i = 0; i < sp.inner; ++i) {
                         const std::size_t src = (o * sp.len + l) * sp.inner + i;
                         const std::size_t dst = o * sp.inner + i;
                         gx[src] += g[dst] * std::exp(x[src] - self.value[dst]);
                       }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape mismatch " + to_string(first) + " vs " + to_string(s));
    out_shape[ax] += s[ax];
  }
  const AxisSplit total = split_at(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  auto lens = std::make_shared<std::vector<std::size_t>>();
  std::size_t base = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[ax];
    lens->push_back(len);
    const auto pv = p.data();
    for (std::size_t o = 0; o < total.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < total.inner; ++i)
          out[(o * total.len + base + l) * total.inner + i] = pv[(o * len + l) * total.inner + i];
    base += len;
  }
  return make_op_n("concat", out_shape, std::move(out), parts,
                   [total, lens](const Node&, std::span<const double> g, const GradSlots& pg) {
                     std::size_t base = 0;
                     for (std::size_t k = 0; k < lens->size(); ++k) {
                       const std::size_t len = (*lens)[k];
                       if (pg[k]) {
                         auto& gx = *pg[k];
                         for (std::size_t o = 0; o < total.outer; ++o)
                           for (std::size_t l = 0; l < len; ++l)
                             for (std::size_t i = 0; i < total.inner; ++i)
                               gx[(o * len + l) * total.inner + i] += g[(o * total.len + base + l) * total.inner + i];
                       }
                       base += len;
                     }
                   });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  require_defined(a, "slice");
  const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
  if (begin > end || end > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for shape " +
                     to_string(a.shape()));
  }
  const AxisSplit sp = split_at(a.shape(), ax);
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  const auto av = a.data();
  std::vector<double> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * len + l) * sp.inner + i] = av[(o * sp.len + begin + l) * sp.inner + i];
  return make_op("slice", out_shape, std::move(out), {&a},
                 [sp, begin, len](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t o = 0; o < sp.outer; ++o)
                     for (std::size_t l = 0; l < len; ++l)
                       for (std::size_t i = 0; i < sp.inner; ++i)
                         gx[(o * sp.len + begin + l) * sp.inner + i] += g[(o * len + l) * sp.inner + i];
                 });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_defined(a, "gather_rows");
  if (a.rank() == 0) throw ShapeError("gather_rows: scalar input");
  const std::size_t n_rows = a.shape()[0];
  const std::size_t width = n_rows == 0 ? 0 : a.numel() / n_rows;
  for (std::size_t r : rows) {
    if (r >= n_rows) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for shape " + to_string(a.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[0] = rows.size();
  const auto av = a.data();
  std::vector<double> out(rows.size() * width);
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(rows[k] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(k * width));
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_op("gather_rows", out_shape, std::move(out), {&a},
                 [idx, width](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t k = 0; k < idx->size(); ++k)
                     for (std::size_t j = 0; j < width; ++j) gx[(*idx)[k] * width + j] += g[k * width + j];
                 });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> cols) {
  require_defined(a, "pick");
  if (a.rank() != 2 || a.shape()[0] != cols.size()) {
    throw ShapeError("pick: expected [N, C] with N = " + std::to_string(cols.size()) + ", got " +
                     to_string(a.shape()));
  }
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  for (std::size_t col : cols) {
    if (col >= c) throw ShapeError("pick: column " + std::to_string(col) + " out of range " + std::to_string(c));
  }
  const auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i * c + cols[i]];
  auto idx = std::make_shared<std::vector<std::size_t>>(cols.begin(), cols.end());
  return make_op("pick", {n}, std::move(out), {&a},
                 [idx, c](const Node&, std::span<const double> g, const GradSlots& pg) {
                   if (!pg[0]) return;
                   auto& gx = *pg[0];
                   for (std::size_t i = 0; i < idx->size(); ++i) gx[i * c + (*idx)[i]] += g[i];
                 });
}

Tensor detach(const Tensor& a) {
  require_defined(a, "detach");
  return Tensor::from(a.shape(), a.to_vector(), false);
}

Tensor custom_op(const char* name, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 detail::BackwardFn backward) {
  for (const Tensor& t : inputs) require_defined(t, name);
  if (numel(shape) != value.size()) throw ShapeError(std::string(name) + ": value does not match shape " + to_string(shape));
  return make_op_n(name, std::move(shape), std::move(value), inputs, std::move(backward));
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kElementwiseMul: return "elementwise_mul";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kLogsumexp: return "logsumexp";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kBroadcast: return "broadcast";
  }
  return "?";
}

std::span<const OpKind> all_op_kinds() {
  static constexpr std::array kinds = {
      OpKind::kMatmul, OpKind::kAdd,  OpKind::kSub,       OpKind::kElementwiseMul, OpKind::kScalarMul, OpKind::kRelu,
      OpKind::kTanh,   OpKind::kExp,  OpKind::kLog,       OpKind::kMean,           OpKind::kSum,       OpKind::kLogsumexp,
      OpKind::kConcat, OpKind::kSlice, OpKind::kTranspose, OpKind::kBroadcast,
  };
  return kinds;
}

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpArgs& args) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::kElementwiseMul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::kScalarMul: arity(1); return scalar_mul(inputs[0], args.scalar);
    case OpKind::kRelu: arity(1); return relu(inputs[0]);
    case OpKind::kTanh: arity(1); return tanh(inputs[0]);
    case OpKind::kExp: arity(1); return exp(inputs[0]);
    case OpKind::kLog: arity(1); return log(inputs[0]);
    case OpKind::kMean:
      arity(1);
      return args.axis ? mean(inputs[0], *args.axis, args.keepdim) : mean(inputs[0]);
    case OpKind::kSum:
      arity(1);
      return args.axis ? sum(inputs[0], *args.axis, args.keepdim) : sum(inputs[0]);
    case OpKind::kLogsumexp:
      arity(1);
      return args.axis ? logsumexp(inputs[0], *args.axis, args.keepdim) : logsumexp(inputs[0]);
    case OpKind::kConcat: return concat(inputs, args.axis.value_or(0));
    case OpKind::kSlice: arity(1); return slice(inputs[0], args.axis.value_or(0), args.begin, args.end);
    case OpKind::kTranspose: arity(1); return transpose(inputs[0]);
    case OpKind::kBroadcast: arity(1); return broadcast_to(inputs[0], args.shape);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

bool GradientMap::contains(const Tensor& param) const { return grads_.contains(param.id()); }

Tensor GradientMap::of(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return Tensor::zeros(param.shape());
  return it->second;
}

GradientMap backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  GradientMap out;
  if (!loss.requires_grad()) return out;

  // Post-order DFS: parents precede children.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<double>> grads;
  grads[root] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto g = grads.find(node);
    if (g == grads.end()) continue;
    if (node->backward) {
      GradSlots slots(node->parents.size(), nullptr);
      for (std::size_t k = 0; k < node->parents.size(); ++k) {
        Node* p = node->parents[k].get();
        if (!p->requires_grad) continue;
        auto& buf = grads[p];
        if (buf.empty()) buf.assign(p->value.size(), 0.0);
        slots[k] = &buf;
      }
      node->backward(*node, g->second, slots);
      grads.erase(g);
    } else {
      out.insert(node->id, Tensor::from(node->shape, std::move(g->second)));
      grads.erase(g);
    }
  }
  return out;
}

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_check: step h must be positive");
  const Tensor base = f();
  const Tensor again = f();
  if (base.item() != again.item()) {
    throw std::runtime_error("finite_diff_check: function is not deterministic (two evaluations differ)");
  }
  const GradientMap grads = backward(base);
  double worst = 0.0;
  for (const Tensor& p : params) {
    if (!p.is_leaf()) throw std::invalid_argument("finite_diff_check: parameters must be leaf tensors");
    const auto analytic = grads.of(p).to_vector();
    std::vector<double> values = p.to_vector();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      p.node()->value[i] = values[i];
      const double up = f().item();
      values[i] = orig - h;
      p.node()->value[i] = values[i];
      const double down = f().item();
      values[i] = orig;
      p.node()->value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace cib

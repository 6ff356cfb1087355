#include "cib/density.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace cib {

namespace {

void require_same_dim(const DiagGaussian& a, const DiagGaussian& b, const char* op) {
  if (a.mu().shape() != b.mu().shape()) {
    throw ShapeError(std::string(op) + ": dimension mismatch " + to_string(a.mu().shape()) + " vs " +
                     to_string(b.mu().shape()));
  }
}

}  // namespace

DiagGaussian::DiagGaussian(Tensor mu, Tensor log_var) : mu_(std::move(mu)) {
  if (!mu_.defined() || !log_var.defined()) throw std::invalid_argument("DiagGaussian: undefined parameters");
  if (mu_.rank() == 0 || mu_.shape().back() == 0) throw ShapeError("DiagGaussian: need d >= 1");
  const Shape& ls = log_var.shape();
  const bool shared = ls.size() == 1 && ls[0] == mu_.shape().back();
  if (ls != mu_.shape() && !shared) {
    throw ShapeError("DiagGaussian: log_var shape " + to_string(ls) + " does not match mu shape " +
                     to_string(mu_.shape()));
  }
  log_var_ = clamp(log_var, kLogVarMin, kLogVarMax);
}

Tensor DiagGaussian::full_log_var() const {
  if (log_var_.shape() == mu_.shape()) return log_var_;
  return broadcast_to(log_var_, mu_.shape());
}

Tensor log_prob(const DiagGaussian& g, const Tensor& t) {
  if (t.shape() != g.mu().shape()) {
    throw ShapeError("log_prob: sample shape " + to_string(t.shape()) + " does not match " +
                     to_string(g.mu().shape()));
  }
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const Tensor diff = sub(t, g.mu());
  const Tensor quad = mul(square(diff), exp(neg(g.log_var())));
  const Tensor per_dim = add_scalar(neg(add(scalar_mul(g.log_var(), 0.5), scalar_mul(quad, 0.5))), -half_log_2pi);
  return sum(per_dim, -1);
}

Tensor sample(const DiagGaussian& g, const Tensor& noise) {
  if (noise.shape() != g.mu().shape()) {
    throw ShapeError("sample: noise shape " + to_string(noise.shape()) + " does not match " +
                     to_string(g.mu().shape()));
  }
  return add(g.mu(), mul(exp(scalar_mul(g.log_var(), 0.5)), noise));
}

Tensor kl_divergence(const DiagGaussian& g1, const DiagGaussian& g2) {
  require_same_dim(g1, g2, "kl_divergence");
  const Tensor lv1 = g1.full_log_var();
  const Tensor lv2 = g2.full_log_var();
  const Tensor num = add(exp(lv1), square(sub(g1.mu(), g2.mu())));
  const Tensor ratio = mul(num, exp(neg(lv2)));
  const Tensor per_dim = add_scalar(add(scalar_mul(sub(lv2, lv1), 0.5), scalar_mul(ratio, 0.5)), -0.5);
  return sum(per_dim, -1);
}

Tensor symmetric_kl(const DiagGaussian& g1, const DiagGaussian& g2) {
  return scalar_mul(add(kl_divergence(g1, g2), kl_divergence(g2, g1)), 0.5);
}

DiagGaussian pool_sequence(const DiagGaussian& tokens, int axis) {
  const Tensor& mu = tokens.mu();
  if (mu.rank() < 2) throw ShapeError("pool_sequence: need a sequence axis besides the representation axis");
  const int last = static_cast<int>(mu.rank()) - 1;
  if (axis == last || axis == -1) throw ShapeError("pool_sequence: cannot pool over the representation axis");
  const std::size_t ax = static_cast<std::size_t>(axis < 0 ? axis + last + 1 : axis);
  if (mu.shape()[ax] == 0) throw std::invalid_argument("pool_sequence: empty sequence");
  const Tensor pooled_mu = mean(mu, axis);
  const Tensor second_moment = mean(add(exp(tokens.full_log_var()), square(mu)), axis);
  const Tensor var = clamp(sub(second_moment, square(pooled_mu)), std::exp(kLogVarMin),
                           std::numeric_limits<double>::max());
  return DiagGaussian(pooled_mu, log(var));
}

DiagGaussian pool_sequence(const std::vector<DiagGaussian>& gaussians) {
  if (gaussians.empty()) throw std::invalid_argument("pool_sequence: empty list");
  const std::size_t d = gaussians.front().dim();
  std::vector<Tensor> mus, lvs;
  for (const auto& g : gaussians) {
    if (g.mu().rank() != 1 || g.dim() != d) throw ShapeError("pool_sequence: all Gaussians must be [d] vectors");
    mus.push_back(reshape(g.mu(), {1, d}));
    lvs.push_back(reshape(g.full_log_var(), {1, d}));
  }
  return pool_sequence(DiagGaussian(concat(mus, 0), concat(lvs, 0)), 0);
}

Tensor standard_normal(const Shape& shape, Rng& rng) {
  return Tensor::from(shape, normal_vector(numel(shape), 1.0, rng));
}

ConditionalModel::ConditionalModel(std::size_t in, std::size_t out, Activation act, Rng& rng,
                                   bool input_dependent_variance, double initial_log_var)
    : mean_map_(Linear::init(in, out, rng)),
      log_var_(Tensor::parameter({out}, std::vector<double>(out, initial_log_var))),
      act_(act) {
  if (input_dependent_variance) {
    Linear lv = Linear::init(in, out, rng, 0.1);
    lv.bias.assign(std::vector<double>(out, initial_log_var));
    log_var_map_ = lv;
  }
}

ConditionalModel::ConditionalModel(Linear mean_map, Tensor log_var, Activation act)
    : mean_map_(std::move(mean_map)), log_var_(std::move(log_var)), act_(act) {
  if (log_var_.shape() != Shape{mean_map_.out_features()}) {
    throw ShapeError("ConditionalModel: log_var must have shape [" + std::to_string(mean_map_.out_features()) + "]");
  }
}

DiagGaussian ConditionalModel::operator()(const Tensor& x) const {
  Tensor mu = mean_map_(x);
  if (act_ == Activation::kTanh) mu = tanh(mu);
  if (log_var_map_) return DiagGaussian(mu, (*log_var_map_)(x));
  return DiagGaussian(mu, log_var_);
}

void ConditionalModel::register_into(ParamSet& params, const std::string& prefix) const {
  mean_map_.register_into(params, prefix + ".mean");
  if (log_var_map_) {
    log_var_map_->register_into(params, prefix + ".log_var_map");
  } else {
    params.add(prefix + ".log_var", log_var_);
  }
}

}  // namespace cib

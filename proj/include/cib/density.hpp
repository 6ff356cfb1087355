#pragma once

// Diagonal Gaussian conditionals p(t | x).
//
// A DiagGaussian holds a mean and a log-variance tensor whose last axis is the
// representation dimension d; leading axes index independent rows (tokens,
// examples). log_var may also be a bare [d] vector shared by every row.
// log-variances are clamped to [-10, 10] on construction.

#include <vector>

#include "cib/nn.hpp"
#include "cib/tensor.hpp"

namespace cib {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

class DiagGaussian {
 public:
  DiagGaussian(Tensor mu, Tensor log_var);

  const Tensor& mu() const { return mu_; }
  const Tensor& log_var() const { return log_var_; }
  std::size_t dim() const { return mu_.shape().back(); }
  // log_var expanded to mu's shape.
  Tensor full_log_var() const;

 private:
  Tensor mu_;
  Tensor log_var_;
};

// Sum over the last axis of the per-dimension Gaussian log density.
Tensor log_prob(const DiagGaussian& g, const Tensor& t);

// mu + exp(log_var / 2) * noise.
Tensor sample(const DiagGaussian& g, const Tensor& noise);

// KL(g1 || g2), summed over the last axis.
Tensor kl_divergence(const DiagGaussian& g1, const DiagGaussian& g2);

// (KL(g1 || g2) + KL(g2 || g1)) / 2.
Tensor symmetric_kl(const DiagGaussian& g1, const DiagGaussian& g2);

// Moment-matched Gaussian of the uniform mixture over `axis`. The pooled
// variance is floored at exp(-10).
DiagGaussian pool_sequence(const DiagGaussian& tokens, int axis);
DiagGaussian pool_sequence(const std::vector<DiagGaussian>& gaussians);

Tensor standard_normal(const Shape& shape, Rng& rng);

enum class Activation { kIdentity, kTanh };

// x -> N(act(x W + b), diag(exp(log_var))). log_var is a learned [d] vector by
// default, or an affine function of x when built with input_dependent_variance.
class ConditionalModel {
 public:
  ConditionalModel(std::size_t in, std::size_t out, Activation act, Rng& rng, bool input_dependent_variance = false,
                   double initial_log_var = 0.0);
  ConditionalModel(Linear mean_map, Tensor log_var, Activation act);

  DiagGaussian operator()(const Tensor& x) const;
  std::size_t out_dim() const { return mean_map_.out_features(); }
  const Linear& mean_map() const { return mean_map_; }
  const Tensor& log_var() const { return log_var_; }
  void register_into(ParamSet& params, const std::string& prefix) const;

 private:
  Linear mean_map_;
  Tensor log_var_;
  std::optional<Linear> log_var_map_;
  Activation act_;
};

}  // namespace cib

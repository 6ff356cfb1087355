#pragma once

// Sample-based mutual information estimators and exact oracles. All values
// are in nats.
//
// Upper bounds (CLUB, L1Out) need the conditional p(t | x); lower bounds
// (NWJ, InfoNCE, MINE) need a positive critic f(u, v). Each estimator has a
// score-level entry point (log-density matrix or critic scores) and a
// convenience overload taking the model objects. Marginal pairs for the
// critic-based bounds come from a cyclic shift of v by one position.

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cib/density.hpp"
#include "cib/nn.hpp"
#include "cib/tensor.hpp"

namespace cib {

enum class Estimator { kClub, kL1Out, kNwj, kInfoNce, kMine, kGaussianExact, kDiscreteExact };
enum class BoundDirection { kUpper, kLower, kExact };

std::string to_string(Estimator e);
std::string to_string(BoundDirection b);
Estimator parse_estimator(const std::string& name);
BoundDirection direction_of(Estimator e);

struct MIEstimate {
  double value = 0.0;
  Estimator estimator = Estimator::kClub;
  std::size_t n_samples = 0;
  BoundDirection bound = BoundDirection::kUpper;
  // Differentiable scalar for the sample-based estimators: its value equals
  // `value` and its gradient is the estimator's training gradient. Undefined
  // for the oracles.
  Tensor objective;
};

// log p(t_j | x_i) for every row i of `cond` and every row j of `t`: [N, M].
Tensor pairwise_log_prob(const DiagGaussian& cond, const Tensor& t);

// log_prob_matrix[i][j] = log p(t_j | x_i).
MIEstimate club_from_log_prob_matrix(const Tensor& log_prob_matrix);
MIEstimate l1out_from_log_prob_matrix(const Tensor& log_prob_matrix);

// Row i of `cond` is p(. | x_i) and row i of `t` its paired representation.
// CLUB runs in O(N d). L1Out evaluates the N x N log-density matrix in row
// blocks, or in a single fused pass when no gradient is required.
MIEstimate club_upper(const DiagGaussian& cond, const Tensor& t);
MIEstimate l1out_upper(const DiagGaussian& cond, const Tensor& t);
MIEstimate club_upper(const Tensor& x, const Tensor& t, const ConditionalModel& cond);
MIEstimate l1out_upper(const Tensor& x, const Tensor& t, const ConditionalModel& cond);

// Two-layer tanh network on concat(u, v) with a softplus output.
class Critic {
 public:
  Critic(std::size_t dim_u, std::size_t dim_v, std::size_t hidden, Rng& rng);

  // f(u_i, v_i): [N].
  Tensor operator()(const Tensor& u, const Tensor& v) const;
  // f(u_i, v_j): [N, M].
  Tensor pairwise(const Tensor& u, const Tensor& v) const;
  void register_into(ParamSet& params, const std::string& prefix) const;
  ParamSet params() const;

 private:
  std::size_t dim_u_;
  Linear hidden_;
  Linear out_;
};

// Rows of v shifted by one: the marginal pairing used by the lower bounds.
Tensor cyclic_shift(const Tensor& v);

MIEstimate nwj_lower(const Tensor& joint_scores, const Tensor& marginal_scores);
MIEstimate nwj_lower(const Tensor& u, const Tensor& v, const Critic& critic);

// score_matrix[i][j] = f(u_i, v_j).
MIEstimate infonce_lower(const Tensor& score_matrix);
MIEstimate infonce_lower(const Tensor& u, const Tensor& v, const Critic& critic);

// Running estimate of the partition term E_marginal[f].
struct MineState {
  std::optional<double> ema;
};

// Reported value uses the batch partition mean; the gradient of the partition
// term is divided by the updated moving average instead of the batch mean.
MIEstimate mine_lower(const Tensor& joint_scores, const Tensor& marginal_scores, MineState& state,
                      double ema_rate = 0.01);
MIEstimate mine_lower(const Tensor& u, const Tensor& v, const Critic& critic, MineState& state,
                      double ema_rate = 0.01);

// -(d/2) ln(1 - rho^2).
MIEstimate gaussian_mi_oracle(double rho, std::size_t d);
// Direct summation over a joint probability table, 0 ln 0 = 0.
MIEstimate discrete_mi_oracle(const std::vector<std::vector<double>>& joint);
// 1/2 ln(det S_A det S_B / det S) for a covariance over blocks A (first
// dim_a coordinates) and B (the rest). `cov` is row-major n x n.
MIEstimate gaussian_joint_mi_oracle(const std::vector<double>& cov, std::size_t n, std::size_t dim_a);

// y = rho x + sqrt(1 - rho^2) e with x, e standard normal, per dimension.
std::pair<Tensor, Tensor> sample_correlated_gaussian(double rho, std::size_t d, std::size_t n, Rng& rng);
// p(y | x) for the pairs above: mean rho x, variance 1 - rho^2.
ConditionalModel gaussian_true_conditional(double rho, std::size_t d);

// InfoNCE scores every pair in a batch, so it trains on fewer, smaller batches.
struct CriticTraining {
  std::size_t steps = 1500;
  std::size_t batch = 256;
  std::size_t infonce_steps = 500;
  std::size_t infonce_batch = 128;
  double learning_rate = 0.02;
  double momentum = 0.9;
};

using PairSampler = std::function<std::pair<Tensor, Tensor>(std::size_t n, Rng& rng)>;

// Ascends the chosen lower bound on fresh batches from `sampler`.
void fit_critic(Critic& critic, Estimator which, const PairSampler& sampler, const CriticTraining& cfg, Rng& rng);

// Evaluates a critic-based bound on n pairs. InfoNCE is averaged over
// consecutive batches of at most `infonce_batch` pairs, so its ceiling is
// ln(min(n, infonce_batch)).
MIEstimate evaluate_lower_bound(const Critic& critic, Estimator which, const Tensor& u, const Tensor& v,
                                std::size_t infonce_batch = 256);

}  // namespace cib

#include "cib/estimators.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace cib {

namespace {

constexpr std::size_t kL1OutBlock = 256;
constexpr double kMasked = -1e300;

MIEstimate make_estimate(Estimator e, std::size_t n, Tensor objective) {
  MIEstimate out;
  out.value = objective.item();
  out.estimator = e;
  out.n_samples = n;
  out.bound = direction_of(e);
  out.objective = std::move(objective);
  return out;
}

MIEstimate make_exact(Estimator e, double value) {
  MIEstimate out;
  out.value = value;
  out.estimator = e;
  out.bound = BoundDirection::kExact;
  return out;
}

void require_square(const Tensor& m, const char* who) {
  if (m.rank() != 2 || m.shape()[0] != m.shape()[1]) {
    throw ShapeError(std::string(who) + ": expected a square matrix, got " + to_string(m.shape()));
  }
}

void require_pairs(const DiagGaussian& cond, const Tensor& t, const char* who) {
  if (cond.mu().rank() != 2 || t.shape() != cond.mu().shape()) {
    throw ShapeError(std::string(who) + ": conditional " + to_string(cond.mu().shape()) + " and samples " +
                     to_string(t.shape()) + " must both be [N, d]");
  }
}

void require_positive(const Tensor& scores, const char* who) {
  for (double s : scores.data()) {
    if (!(s > 0.0)) throw DomainError(std::string(who) + ": critic output must be positive, got " + std::to_string(s));
  }
}

void require_sample_count(std::size_t n, std::size_t min, const char* who) {
  if (n < min) throw std::invalid_argument(std::string(who) + ": need at least " + std::to_string(min) + " samples");
}

Tensor diagonal(const Tensor& m) {
  const std::size_t n = m.shape()[0];
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return pick(m, idx);
}

// Per-row constant of log p(. | x_i) and the precision terms of the quadratic.
struct Expanded {
  Tensor c;     // [N, 1]
  Tensor prec;  // [N, d]
  Tensor wmu;   // [N, d]  mu * prec
};

Expanded expand(const DiagGaussian& cond) {
  const double d = static_cast<double>(cond.dim());
  const Tensor lv = cond.full_log_var();
  const Tensor prec = exp(neg(lv));
  const Tensor wmu = mul(cond.mu(), prec);
  const Tensor c = add_scalar(
      neg(scalar_mul(add(sum(lv, 1, true), sum(mul(wmu, cond.mu()), 1, true)), 0.5)),
      -0.5 * d * std::log(2.0 * std::numbers::pi));
  return {c, prec, wmu};
}

// log p(t_j | x_i) = rows(cond)_i . features(t)_j with rows = [-prec/2, mu*prec, c]
// and features = [t^2, t, 1].
Tensor density_rows(const Expanded& e) { return concat({scalar_mul(e.prec, -0.5), e.wmu, e.c}, 1); }

Tensor sample_features(const Tensor& t) {
  return concat({square(t), t, Tensor::ones({t.shape()[0], 1})}, 1);
}

double softplus_value(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Absolute error around 1e-16; about three times cheaper than std::tanh.
double fast_tanh(double x) { return 1.0 - 2.0 / (1.0 + std::exp(2.0 * x)); }

// softplus(tanh(hu_i + hv_j) . w + b) for every (i, j), without the [N, M, H]
// broadcast intermediates.
Tensor pairwise_head(const Tensor& hu, const Tensor& hv, const Tensor& w, const Tensor& b) {
  const std::size_t n = hu.shape()[0], m = hv.shape()[0], h = hu.shape()[1];
  const bool keep = grad_enabled() && (hu.requires_grad() || hv.requires_grad() || w.requires_grad() || b.requires_grad());
  const auto u = hu.data();
  const auto v = hv.data();
  const auto wv = w.data();
  const double bias = b.item();
  std::vector<double> out(n * m);
  auto act = keep ? std::make_shared<std::vector<double>>(n * m * h) : nullptr;
  auto pre = keep ? std::make_shared<std::vector<double>>(n * m) : nullptr;
  std::vector<double> row(h);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double z = bias;
      double* a = act ? act->data() + (i * m + j) * h : row.data();
      for (std::size_t k = 0; k < h; ++k) {
        a[k] = fast_tanh(u[i * h + k] + v[j * h + k]);
        z += a[k] * wv[k];
      }
      if (pre) (*pre)[i * m + j] = z;
      out[i * m + j] = softplus_value(z);
    }
  }
  return custom_op("critic_pairwise", {n, m}, std::move(out), {hu, hv, w, b},
                   [n, m, h, act, pre](const detail::Node& self, std::span<const double> g,
                                       const detail::GradSlots& pg) {
                     const auto& wv = self.parents[2]->value;
                     std::vector<double> dz_a(h);
                     for (std::size_t i = 0; i < n; ++i) {
                       for (std::size_t j = 0; j < m; ++j) {
                         const double gz = g[i * m + j] * sigmoid((*pre)[i * m + j]);
                         const double* a = act->data() + (i * m + j) * h;
                         if (pg[3]) (*pg[3])[0] += gz;
                         if (pg[2]) {
                           auto& gw = *pg[2];
                           for (std::size_t k = 0; k < h; ++k) gw[k] += gz * a[k];
                         }
                         for (std::size_t k = 0; k < h; ++k) dz_a[k] = gz * wv[k] * (1.0 - a[k] * a[k]);
                         if (pg[0]) {
                           double* gu = pg[0]->data() + i * h;
                           for (std::size_t k = 0; k < h; ++k) gu[k] += dz_a[k];
                         }
                         if (pg[1]) {
                           double* gv = pg[1]->data() + j * h;
                           for (std::size_t k = 0; k < h; ++k) gv[k] += dz_a[k];
                         }
                       }
                     }
                   });
}

}  // namespace

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::kClub: return "club";
    case Estimator::kL1Out: return "l1out";
    case Estimator::kNwj: return "nwj";
    case Estimator::kInfoNce: return "infonce";
    case Estimator::kMine: return "mine";
    case Estimator::kGaussianExact: return "gaussian_exact";
    case Estimator::kDiscreteExact: return "discrete_exact";
  }
  return "unknown";
}

std::string to_string(BoundDirection b) {
  switch (b) {
    case BoundDirection::kUpper: return "upper";
    case BoundDirection::kLower: return "lower";
    case BoundDirection::kExact: return "exact";
  }
  return "unknown";
}

Estimator parse_estimator(const std::string& name) {
  for (Estimator e : {Estimator::kClub, Estimator::kL1Out, Estimator::kNwj, Estimator::kInfoNce, Estimator::kMine,
                      Estimator::kGaussianExact, Estimator::kDiscreteExact}) {
    if (to_string(e) == name) return e;
  }
  throw std::invalid_argument("unknown estimator '" + name + "'");
}

BoundDirection direction_of(Estimator e) {
  switch (e) {
    case Estimator::kClub:
    case Estimator::kL1Out: return BoundDirection::kUpper;
    case Estimator::kNwj:
    case Estimator::kInfoNce:
    case Estimator::kMine: return BoundDirection::kLower;
    default: return BoundDirection::kExact;
  }
}

Tensor pairwise_log_prob(const DiagGaussian& cond, const Tensor& t) {
  if (cond.mu().rank() != 2 || t.rank() != 2 || t.shape()[1] != cond.dim()) {
    throw ShapeError("pairwise_log_prob: conditional " + to_string(cond.mu().shape()) + " and samples " +
                     to_string(t.shape()) + " must be [N, d] and [M, d]");
  }
  return matmul(density_rows(expand(cond)), transpose(sample_features(t)));
}

MIEstimate club_from_log_prob_matrix(const Tensor& log_prob_matrix) {
  require_square(log_prob_matrix, "club");
  const std::size_t n = log_prob_matrix.shape()[0];
  require_sample_count(n, 2, "club");
  const Tensor value = sub(mean(diagonal(log_prob_matrix)), mean(log_prob_matrix));
  return make_estimate(Estimator::kClub, n, value);
}

MIEstimate l1out_from_log_prob_matrix(const Tensor& log_prob_matrix) {
  require_square(log_prob_matrix, "l1out");
  const std::size_t n = log_prob_matrix.shape()[0];
  require_sample_count(n, 2, "l1out");
  std::vector<double> mask(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = kMasked;
  const Tensor masked = add(log_prob_matrix, Tensor::from({n, n}, std::move(mask)));
  const Tensor lse = logsumexp(masked, 0);
  const Tensor value = add_scalar(mean(sub(diagonal(log_prob_matrix), lse)), std::log(static_cast<double>(n - 1)));
  return make_estimate(Estimator::kL1Out, n, value);
}

MIEstimate club_upper(const DiagGaussian& cond, const Tensor& t) {
  require_pairs(cond, t, "club");
  const std::size_t n = t.shape()[0];
  require_sample_count(n, 2, "club");
  const Expanded e = expand(cond);
  const Tensor t_mean = mean(t, 0);
  const Tensor tsq_mean = mean(square(t), 0);
  const Tensor all_pairs =
      add(mean(e.c), sub(mean(sum(mul(e.wmu, t_mean), 1)), scalar_mul(mean(sum(mul(e.prec, tsq_mean), 1)), 0.5)));
  const Tensor value = sub(mean(log_prob(cond, t)), all_pairs);
  return make_estimate(Estimator::kClub, n, value);
}

MIEstimate l1out_upper(const DiagGaussian& cond, const Tensor& t) {
  require_pairs(cond, t, "l1out");
  const std::size_t n = t.shape()[0];
  require_sample_count(n, 2, "l1out");
  const bool needs_grad =
      grad_enabled() && (cond.mu().requires_grad() || cond.log_var().requires_grad() || t.requires_grad());
  const Tensor rows = density_rows(expand(cond));
  const Tensor feats = sample_features(t);
  const double log_n1 = std::log(static_cast<double>(n - 1));
  if (!needs_grad) {
    // Values only: fused leave-one-out logsumexp without materializing blocks.
    const std::size_t k = rows.shape()[1];
    const auto r = rows.data();
    const auto f = feats.data();
    std::vector<double> col(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* fi = f.data() + i * k;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const double* rj = r.data() + j * k;
        double acc = 0.0;
        for (std::size_t q = 0; q < k; ++q) acc += rj[q] * fi[q];
        col[j] = acc;
        if (j != i) hi = std::max(hi, acc);
      }
      double sum_exp = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) sum_exp += std::exp(col[j] - hi);
      total += col[i] - (hi + std::log(sum_exp)) + log_n1;
    }
    return make_estimate(Estimator::kL1Out, n, Tensor::scalar(total / static_cast<double>(n)));
  }
  std::vector<Tensor> lse_blocks;
  for (std::size_t b0 = 0; b0 < n; b0 += kL1OutBlock) {
    const std::size_t b1 = std::min(n, b0 + kL1OutBlock);
    const std::size_t w = b1 - b0;
    const Tensor block = matmul(slice(feats, 0, b0, b1), transpose(rows));  // [w, n]
    std::vector<double> mask(w * n, 0.0);
    for (std::size_t i = b0; i < b1; ++i) mask[(i - b0) * n + i] = kMasked;
    lse_blocks.push_back(logsumexp(add(block, Tensor::from({w, n}, std::move(mask))), 1));
  }
  const Tensor lse = lse_blocks.size() == 1 ? lse_blocks.front() : concat(lse_blocks, 0);
  const Tensor value = add_scalar(mean(sub(log_prob(cond, t), lse)), log_n1);
  return make_estimate(Estimator::kL1Out, n, value);
}

MIEstimate club_upper(const Tensor& x, const Tensor& t, const ConditionalModel& cond) {
  return club_upper(cond(x), t);
}

MIEstimate l1out_upper(const Tensor& x, const Tensor& t, const ConditionalModel& cond) {
  return l1out_upper(cond(x), t);
}

Critic::Critic(std::size_t dim_u, std::size_t dim_v, std::size_t hidden, Rng& rng)
    : dim_u_(dim_u), hidden_(Linear::init(dim_u + dim_v, hidden, rng)), out_(Linear::init(hidden, 1, rng)) {
  if (dim_u == 0 || dim_v == 0 || hidden == 0) throw std::invalid_argument("Critic: dimensions must be positive");
}

Tensor Critic::operator()(const Tensor& u, const Tensor& v) const {
  if (u.rank() != 2 || v.rank() != 2 || u.shape()[0] != v.shape()[0]) {
    throw ShapeError("Critic: paired inputs " + to_string(u.shape()) + " and " + to_string(v.shape()));
  }
  const std::size_t n = u.shape()[0];
  const Tensor h = tanh(hidden_(concat({u, v}, 1)));
  return reshape(softplus(out_(h)), {n});
}

Tensor Critic::pairwise(const Tensor& u, const Tensor& v) const {
  const std::size_t in = hidden_.in_features();
  if (u.rank() != 2 || v.rank() != 2 || u.shape()[1] != dim_u_ || u.shape()[1] + v.shape()[1] != in) {
    throw ShapeError("Critic::pairwise: inputs " + to_string(u.shape()) + " and " + to_string(v.shape()));
  }
  const Tensor hu = matmul(u, slice(hidden_.weight, 0, 0, dim_u_));
  const Tensor hv = add(matmul(v, slice(hidden_.weight, 0, dim_u_, in)), hidden_.bias);
  return pairwise_head(hu, hv, out_.weight, out_.bias);
}

void Critic::register_into(ParamSet& params, const std::string& prefix) const {
  hidden_.register_into(params, prefix + ".hidden");
  out_.register_into(params, prefix + ".out");
}

ParamSet Critic::params() const {
  ParamSet p;
  register_into(p, "critic");
  return p;
}

Tensor cyclic_shift(const Tensor& v) {
  if (v.rank() == 0) throw ShapeError("cyclic_shift: need at least one axis");
  const std::size_t n = v.shape()[0];
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = (i + 1) % n;
  return gather_rows(v, rows);
}

MIEstimate nwj_lower(const Tensor& joint_scores, const Tensor& marginal_scores) {
  if (joint_scores.rank() != 1 || marginal_scores.rank() != 1) throw ShapeError("nwj: scores must be vectors");
  require_sample_count(joint_scores.numel(), 2, "nwj");
  require_sample_count(marginal_scores.numel(), 2, "nwj");
  require_positive(joint_scores, "nwj");
  require_positive(marginal_scores, "nwj");
  const Tensor value = sub(mean(log(joint_scores)), scalar_mul(mean(marginal_scores), std::exp(-1.0)));
  return make_estimate(Estimator::kNwj, joint_scores.numel(), value);
}

MIEstimate nwj_lower(const Tensor& u, const Tensor& v, const Critic& critic) {
  return nwj_lower(critic(u, v), critic(u, cyclic_shift(v)));
}

MIEstimate infonce_lower(const Tensor& score_matrix) {
  require_square(score_matrix, "infonce");
  const std::size_t n = score_matrix.shape()[0];
  require_sample_count(n, 2, "infonce");
  require_positive(score_matrix, "infonce");
  const Tensor lf = log(score_matrix);
  const Tensor value = add_scalar(mean(sub(diagonal(lf), logsumexp(lf, 1))), std::log(static_cast<double>(n)));
  return make_estimate(Estimator::kInfoNce, n, value);
}

MIEstimate infonce_lower(const Tensor& u, const Tensor& v, const Critic& critic) {
  return infonce_lower(critic.pairwise(u, v));
}

MIEstimate mine_lower(const Tensor& joint_scores, const Tensor& marginal_scores, MineState& state,
                      double ema_rate) {
  if (joint_scores.rank() != 1 || marginal_scores.rank() != 1) throw ShapeError("mine: scores must be vectors");
  if (!(ema_rate > 0.0 && ema_rate <= 1.0)) throw std::invalid_argument("mine: ema_rate must be in (0, 1]");
  require_sample_count(joint_scores.numel(), 2, "mine");
  require_sample_count(marginal_scores.numel(), 2, "mine");
  require_positive(joint_scores, "mine");
  require_positive(marginal_scores, "mine");
  const Tensor joint_term = mean(log(joint_scores));
  const Tensor partition = mean(marginal_scores);
  const Tensor partition_value = detach(partition);
  const double batch = partition_value.item();
  state.ema = state.ema ? (1.0 - ema_rate) * *state.ema + ema_rate * batch : batch;
  const Tensor correction = scalar_mul(sub(partition, partition_value), 1.0 / *state.ema);
  const Tensor objective = sub(sub(joint_term, log(partition_value)), correction);
  return make_estimate(Estimator::kMine, joint_scores.numel(), objective);
}

MIEstimate mine_lower(const Tensor& u, const Tensor& v, const Critic& critic, MineState& state, double ema_rate) {
  return mine_lower(critic(u, v), critic(u, cyclic_shift(v)), state, ema_rate);
}

MIEstimate gaussian_mi_oracle(double rho, std::size_t d) {
  if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("gaussian_mi_oracle: |rho| must be < 1");
  if (d == 0) throw std::invalid_argument("gaussian_mi_oracle: d must be >= 1");
  return make_exact(Estimator::kGaussianExact, -0.5 * static_cast<double>(d) * std::log1p(-rho * rho));
}

MIEstimate discrete_mi_oracle(const std::vector<std::vector<double>>& joint) {
  if (joint.empty() || joint.front().empty()) throw std::invalid_argument("discrete_mi_oracle: empty table");
  const std::size_t cols = joint.front().size();
  std::vector<double> px(joint.size(), 0.0), py(cols, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (joint[i].size() != cols) throw std::invalid_argument("discrete_mi_oracle: ragged table");
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = joint[i][j];
      if (!std::isfinite(p) || p < 0.0) throw std::invalid_argument("discrete_mi_oracle: invalid probability");
      px[i] += p;
      py[j] += p;
      total += p;
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("discrete_mi_oracle: probabilities must sum to 1");
  double mi = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = joint[i][j];
      if (p > 0.0) mi += p * std::log(p / (px[i] * py[j]));
    }
  }
  return make_exact(Estimator::kDiscreteExact, std::max(0.0, mi));
}

MIEstimate gaussian_joint_mi_oracle(const std::vector<double>& cov, std::size_t n, std::size_t dim_a) {
  if (cov.size() != n * n) throw std::invalid_argument("gaussian_joint_mi_oracle: cov must be n x n");
  if (dim_a == 0 || dim_a >= n) throw std::invalid_argument("gaussian_joint_mi_oracle: both blocks must be non-empty");
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> s(cov.data(), n, n);
  if (!s.isApprox(s.transpose(), 1e-12)) throw std::invalid_argument("gaussian_joint_mi_oracle: cov not symmetric");
  auto logdet = [](const Eigen::MatrixXd& m) {
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("gaussian_joint_mi_oracle: cov not positive definite");
    return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  };
  const std::size_t dim_b = n - dim_a;
  const double full = logdet(s);
  const double a = logdet(s.topLeftCorner(dim_a, dim_a));
  const double b = logdet(s.bottomRightCorner(dim_b, dim_b));
  return make_exact(Estimator::kGaussianExact, 0.5 * (a + b - full));
}

std::pair<Tensor, Tensor> sample_correlated_gaussian(double rho, std::size_t d, std::size_t n, Rng& rng) {
  if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("sample_correlated_gaussian: |rho| must be < 1");
  std::vector<double> x = normal_vector(n * d, 1.0, rng);
  std::vector<double> y = normal_vector(n * d, std::sqrt(1.0 - rho * rho), rng);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += rho * x[i];
  return {Tensor::from({n, d}, std::move(x)), Tensor::from({n, d}, std::move(y))};
}

ConditionalModel gaussian_true_conditional(double rho, std::size_t d) {
  std::vector<double> w(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = rho;
  Linear map{Tensor::from({d, d}, std::move(w)), Tensor::zeros({d})};
  return ConditionalModel(map, Tensor::full({d}, std::log1p(-rho * rho)), Activation::kIdentity);
}

void fit_critic(Critic& critic, Estimator which, const PairSampler& sampler, const CriticTraining& cfg, Rng& rng) {
  if (direction_of(which) != BoundDirection::kLower) {
    throw std::invalid_argument("fit_critic: " + to_string(which) + " is not a critic-based bound");
  }
  const ParamSet params = critic.params();
  MomentumSgd opt(cfg.momentum);
  MineState mine;
  const bool nce = which == Estimator::kInfoNce;
  const std::size_t steps = nce ? cfg.infonce_steps : cfg.steps;
  const std::size_t batch = nce ? cfg.infonce_batch : cfg.batch;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto [u, v] = sampler(batch, rng);
    MIEstimate est;
    switch (which) {
      case Estimator::kNwj: est = nwj_lower(u, v, critic); break;
      case Estimator::kInfoNce: est = infonce_lower(u, v, critic); break;
      default: est = mine_lower(u, v, critic, mine); break;
    }
    if (!std::isfinite(est.value)) throw std::runtime_error("fit_critic: non-finite objective at step " + std::to_string(step));
    opt.step(params, backward(neg(est.objective)), cfg.learning_rate);
  }
}

MIEstimate evaluate_lower_bound(const Critic& critic, Estimator which, const Tensor& u, const Tensor& v,
                                std::size_t infonce_batch) {
  NoGradGuard no_grad;
  switch (which) {
    case Estimator::kNwj: return nwj_lower(u, v, critic);
    case Estimator::kMine: {
      MineState state;
      return mine_lower(u, v, critic, state);
    }
    case Estimator::kInfoNce: {
      if (infonce_batch == 0) throw std::invalid_argument("evaluate_lower_bound: infonce_batch must be positive");
      const std::size_t n = u.shape()[0];
      require_sample_count(n, 2, "infonce");
      const std::size_t batches = std::max<std::size_t>(1, std::min(n / 2, (n + infonce_batch - 1) / infonce_batch));
      double weighted = 0.0;
      for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t b0 = b * n / batches;
        const std::size_t b1 = (b + 1) * n / batches;
        weighted += static_cast<double>(b1 - b0) * infonce_lower(slice(u, 0, b0, b1), slice(v, 0, b0, b1), critic).value;
      }
      MIEstimate out;
      out.value = weighted / static_cast<double>(n);
      out.estimator = Estimator::kInfoNce;
      out.n_samples = n;
      out.bound = BoundDirection::kLower;
      out.objective = Tensor::scalar(out.value);
      return out;
    }
    default: throw std::invalid_argument("evaluate_lower_bound: " + to_string(which) + " is not a critic-based bound");
  }
}

}  // namespace cib

#include "cib/objective.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace cib {

namespace {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kBoundTolerance = 1e-9;

Mat to_mat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) {
    throw std::invalid_argument("linear-Gaussian system: expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + " matrix, got " + std::to_string(v.size()) + " values");
  }
  return Eigen::Map<const RowMat>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

std::vector<double> to_row_major(const Mat& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<RowMat>(out.data(), m.rows(), m.cols()) = m;
  return out;
}

double logdet_pd(const Mat& m) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("degenerate covariance (not positive definite); regenerate with another seed");
  }
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

bool is_pd(const Mat& m) { return Eigen::LLT<Mat>(m).info() == Eigen::Success; }

// I(X; A X + e) for e ~ N(0, noise_cov): via the block oracle when cov(X) is
// non-degenerate, otherwise as h(T) - h(T | X).
double channel_mi(const Mat& sx, const Mat& a, const Mat& noise_cov) {
  const Mat st = a * sx * a.transpose() + noise_cov;
  if (is_pd(sx)) {
    const auto dx = static_cast<std::size_t>(sx.rows());
    const auto dt = static_cast<std::size_t>(st.rows());
    Mat joint(dx + dt, dx + dt);
    joint.topLeftCorner(dx, dx) = sx;
    joint.topRightCorner(dx, dt) = sx * a.transpose();
    joint.bottomLeftCorner(dt, dx) = a * sx;
    joint.bottomRightCorner(dt, dt) = st;
    joint = 0.5 * (joint + joint.transpose());
    return gaussian_joint_mi_oracle(to_row_major(joint), dx + dt, dx).value;
  }
  return 0.5 * (logdet_pd(st) - logdet_pd(noise_cov));
}

}  // namespace

std::string to_string(BoundVariant v) {
  switch (v) {
    case BoundVariant::kFull: return "full";
    case BoundVariant::kSumOnly: return "sum_only";
    case BoundVariant::kReprOnly: return "repr_only";
    case BoundVariant::kSumPlusSkl: return "sum_plus_skl";
  }
  return "unknown";
}

BoundVariant parse_variant(const std::string& name) {
  for (BoundVariant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown bound variant '" + name + "'");
}

double variant_total(BoundVariant v, double i_xv_tv, double i_xl_tl, double i_tv_tl, double d_skl) {
  switch (v) {
    case BoundVariant::kFull: return i_xv_tv + i_xl_tl - i_tv_tl + d_skl;
    case BoundVariant::kSumOnly: return 1.5 * (i_xv_tv + i_xl_tl);
    case BoundVariant::kReprOnly: return -i_tv_tl + d_skl;
    case BoundVariant::kSumPlusSkl: return i_xv_tv + i_xl_tl + d_skl;
  }
  throw std::invalid_argument("unknown bound variant");
}

Tensor variant_total(BoundVariant v, const Tensor& i_xv_tv, const Tensor& i_xl_tl, const Tensor& i_tv_tl,
                     const Tensor& d_skl) {
  switch (v) {
    case BoundVariant::kFull: return add(sub(add(i_xv_tv, i_xl_tl), i_tv_tl), d_skl);
    case BoundVariant::kSumOnly: return scalar_mul(add(i_xv_tv, i_xl_tl), 1.5);
    case BoundVariant::kReprOnly: return sub(d_skl, i_tv_tl);
    case BoundVariant::kSumPlusSkl: return add(add(i_xv_tv, i_xl_tl), d_skl);
  }
  throw std::invalid_argument("unknown bound variant");
}

void CIBConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be a finite value >= 0");
  if (direction_of(upper_estimator) != BoundDirection::kUpper) {
    throw std::invalid_argument("upper_estimator must be club or l1out, got " + to_string(upper_estimator));
  }
  if (direction_of(lower_estimator) != BoundDirection::kLower) {
    throw std::invalid_argument("lower_estimator must be nwj, infonce or mine, got " + to_string(lower_estimator));
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (epochs == 0) throw std::invalid_argument("epochs must be >= 1");
}

RegularizerBreakdown regularizer(const ModalityEncoding& v, const ModalityEncoding& l, const Critic& critic,
                                 const CIBConfig& cfg, MineState& mine) {
  cfg.validate();
  const std::size_t n = v.pooled_vector.shape()[0];
  if (l.pooled_vector.shape()[0] != n || v.pooled.mu().shape()[0] != n || l.pooled.mu().shape()[0] != n) {
    throw ShapeError("regularizer: batch sizes differ across modalities");
  }
  auto upper = [&](const ModalityEncoding& m) {
    return cfg.upper_estimator == Estimator::kClub ? club_upper(m.tokens, m.samples) : l1out_upper(m.tokens, m.samples);
  };
  const MIEstimate ivv = upper(v);
  const MIEstimate ill = upper(l);
  MIEstimate itt;
  switch (cfg.lower_estimator) {
    case Estimator::kNwj: itt = nwj_lower(v.pooled_vector, l.pooled_vector, critic); break;
    case Estimator::kInfoNce: itt = infonce_lower(v.pooled_vector, l.pooled_vector, critic); break;
    default: itt = mine_lower(v.pooled_vector, l.pooled_vector, critic, mine); break;
  }
  const Tensor dskl = mean(symmetric_kl(v.pooled, l.pooled));

  RegularizerBreakdown out;
  out.i_xv_tv = ivv.value;
  out.i_xl_tl = ill.value;
  out.i_tv_tl = itt.value;
  out.d_skl = dskl.item();
  out.objective = variant_total(cfg.variant, ivv.objective, ill.objective, itt.objective, dskl);
  out.total = out.objective.item();
  return out;
}

Tensor vqa_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size() || labels.empty()) {
    throw ShapeError("vqa_loss: logits " + to_string(logits.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t classes = logits.shape()[1];
  for (std::size_t y : labels) {
    if (y >= classes) {
      throw std::invalid_argument("vqa_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                                  ")");
    }
  }
  return neg(mean(sub(pick(logits, labels), logsumexp(logits, 1))));
}

Tensor cib_loss(const Tensor& vqa, const RegularizerBreakdown& reg, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("cib_loss: beta must be >= 0");
  if (beta == 0.0) return vqa;
  return add(vqa, scalar_mul(reg.objective, beta));
}

bool BoundReport::all_hold() const {
  for (const auto& c : checks)
    if (!c.holds) return false;
  return true;
}

const BoundCheck& BoundReport::check(BoundVariant v) const {
  for (const auto& c : checks)
    if (c.variant == v) return c;
  throw std::invalid_argument("BoundReport: missing variant");
}

LinearGaussianSystem random_linear_gaussian_system(std::uint64_t seed, const SystemDims& dims) {
  if (dims.dx_v == 0 || dims.dx_l == 0 || dims.dt_v == 0 || dims.dt_l == 0) {
    throw std::invalid_argument("system dimensions must be positive");
  }
  if (dims.dt_v != dims.dt_l) throw std::invalid_argument("dt_v must equal dt_l (D_skl compares densities on one space)");
  Rng rng(seed);
  const std::size_t dx = dims.dx_v + dims.dx_l;
  const Mat b = to_mat(normal_vector(dx * dx, 1.0, rng), dx, dx);
  const Mat sx = b * b.transpose() / static_cast<double>(dx) + 0.1 * Mat::Identity(dx, dx);
  LinearGaussianSystem sys;
  sys.dx_v = dims.dx_v;
  sys.dx_l = dims.dx_l;
  sys.dt_v = dims.dt_v;
  sys.dt_l = dims.dt_l;
  sys.sx = to_row_major(0.5 * (sx + sx.transpose()));
  sys.a_v = normal_vector(dims.dt_v * dims.dx_v, 1.0 / std::sqrt(static_cast<double>(dims.dx_v)), rng);
  sys.a_l = normal_vector(dims.dt_l * dims.dx_l, 1.0 / std::sqrt(static_cast<double>(dims.dx_l)), rng);
  return sys;
}

BoundReport evaluate_bounds(const LinearGaussianSystem& sys) {
  if (sys.dt_v != sys.dt_l) throw std::invalid_argument("dt_v must equal dt_l (D_skl compares densities on one space)");
  if (!(sys.noise_v > 0.0) || !(sys.noise_l > 0.0)) throw std::invalid_argument("noise scales must be > 0");
  const std::size_t dxv = sys.dx_v, dxl = sys.dx_l, dt = sys.dt_v;
  const std::size_t dx = dxv + dxl;
  const Mat sx = to_mat(sys.sx, dx, dx);
  const Mat av = to_mat(sys.a_v, dt, dxv);
  const Mat al = to_mat(sys.a_l, dt, dxl);
  const double var_v = sys.noise_v * sys.noise_v;
  const double var_l = sys.noise_l * sys.noise_l;

  Mat d = Mat::Zero(2 * dt, dx);
  d.topLeftCorner(dt, dxv) = av;
  d.bottomRightCorner(dt, dxl) = al;
  Mat noise = Mat::Zero(2 * dt, 2 * dt);
  noise.topLeftCorner(dt, dt) = var_v * Mat::Identity(dt, dt);
  noise.bottomRightCorner(dt, dt) = var_l * Mat::Identity(dt, dt);

  BoundReport r;
  r.dims = {dxv, dxl, dt, dt};
  r.joint_mi = channel_mi(sx, d, noise);
  r.i_xv_tv = channel_mi(sx.topLeftCorner(dxv, dxv), av, var_v * Mat::Identity(dt, dt));
  r.i_xl_tl = channel_mi(sx.bottomRightCorner(dxl, dxl), al, var_l * Mat::Identity(dt, dt));
  Mat st = d * sx * d.transpose() + noise;
  st = 0.5 * (st + st.transpose());
  r.i_tv_tl = gaussian_joint_mi_oracle(to_row_major(st), 2 * dt, dt).value;

  // Expected symmetric KL between N(Av xv, var_v I) and N(Al xl, var_l I).
  Mat diff(dt, dx);
  diff << av, -al;
  const double mean_sq = (diff * sx * diff.transpose()).trace();
  const double k = static_cast<double>(dt);
  const double kl_vl = 0.5 * (k * var_v / var_l - k + k * std::log(var_l / var_v) + mean_sq / var_l);
  const double kl_lv = 0.5 * (k * var_l / var_v - k + k * std::log(var_v / var_l) + mean_sq / var_v);
  r.d_skl = 0.5 * (kl_vl + kl_lv);

  for (std::size_t i = 0; i < kAllVariants.size(); ++i) {
    BoundCheck& c = r.checks[i];
    c.variant = kAllVariants[i];
    c.bound = variant_total(c.variant, r.i_xv_tv, r.i_xl_tl, r.i_tv_tl, r.d_skl);
    c.slack = c.bound - r.joint_mi;
    c.holds = c.slack >= -kBoundTolerance;
  }
  return r;
}

BoundReport verify_bound_ordering(std::uint64_t system_seed, const SystemDims& dims) {
  BoundReport r = evaluate_bounds(random_linear_gaussian_system(system_seed, dims));
  r.seed = system_seed;
  return r;
}

}  // namespace cib

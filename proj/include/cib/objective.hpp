#pragma once

// The CIB training objective: task cross-entropy plus beta times a bound on
// the multimodal information bottleneck term, and exact checks of those
// bounds on linear-Gaussian systems.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cib/density.hpp"
#include "cib/estimators.hpp"
#include "cib/tensor.hpp"

namespace cib {

// FULL:          I(Xv;Tv) + I(Xl;Tl) - I(Tv;Tl) + D_skl
// SUM_ONLY:      1.5 [I(Xv;Tv) + I(Xl;Tl)]
// REPR_ONLY:     -I(Tv;Tl) + D_skl
// SUM_PLUS_SKL:  I(Xv;Tv) + I(Xl;Tl) + D_skl
enum class BoundVariant { kFull, kSumOnly, kReprOnly, kSumPlusSkl };

inline constexpr std::array<BoundVariant, 4> kAllVariants = {BoundVariant::kFull, BoundVariant::kSumOnly,
                                                             BoundVariant::kReprOnly, BoundVariant::kSumPlusSkl};

std::string to_string(BoundVariant v);
BoundVariant parse_variant(const std::string& name);

double variant_total(BoundVariant v, double i_xv_tv, double i_xl_tl, double i_tv_tl, double d_skl);
Tensor variant_total(BoundVariant v, const Tensor& i_xv_tv, const Tensor& i_xl_tl, const Tensor& i_tv_tl,
                     const Tensor& d_skl);

struct CIBConfig {
  double beta = 1e-4;
  BoundVariant variant = BoundVariant::kFull;
  Estimator upper_estimator = Estimator::kClub;
  Estimator lower_estimator = Estimator::kNwj;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::size_t warmup_steps = 1000;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// One modality of a batch after encoding.
struct ModalityEncoding {
  DiagGaussian tokens;   // p(t | x) for every token of every example: [N * K, d]
  Tensor samples;        // one draw per token: [N * K, d]
  DiagGaussian pooled;   // moment-matched per-example Gaussian: [N, d]
  Tensor pooled_vector;  // pooled representation fed to the critic and answer head: [N, d_p]
};

struct RegularizerBreakdown {
  double i_xv_tv = 0.0;
  double i_xl_tl = 0.0;
  double i_tv_tl = 0.0;
  double d_skl = 0.0;
  double total = 0.0;
  // Differentiable total; its value equals `total`.
  Tensor objective;
};

// Upper estimator over all tokens of the batch for each I(X;T); lower
// estimator with `critic` on the pooled vectors for I(Tv;Tl); batch mean of
// the symmetric KL between the pooled Gaussians for D_skl. `mine` carries the
// moving average when the lower estimator is MINE.
RegularizerBreakdown regularizer(const ModalityEncoding& v, const ModalityEncoding& l, const Critic& critic,
                                 const CIBConfig& cfg, MineState& mine);

// Mean cross-entropy of the labelled class.
Tensor vqa_loss(const Tensor& logits, std::span<const std::size_t> labels);

// vqa_loss + beta * reg.total.
Tensor cib_loss(const Tensor& vqa, const RegularizerBreakdown& reg, double beta);

// Tv = Av Xv + ev, Tl = Al Xl + el with (Xv, Xl) ~ N(0, sx) and isotropic
// noise. Matrices are row-major.
struct LinearGaussianSystem {
  std::size_t dx_v = 0, dx_l = 0, dt_v = 0, dt_l = 0;
  std::vector<double> sx;  // (dx_v + dx_l)^2
  std::vector<double> a_v;  // dt_v x dx_v
  std::vector<double> a_l;  // dt_l x dx_l
  double noise_v = 0.1;
  double noise_l = 0.1;
};

struct SystemDims {
  std::size_t dx_v = 3, dx_l = 3, dt_v = 2, dt_l = 2;
};

struct BoundCheck {
  BoundVariant variant = BoundVariant::kFull;
  double bound = 0.0;
  double slack = 0.0;  // bound - joint MI
  bool holds = false;
};

struct BoundReport {
  std::uint64_t seed = 0;
  SystemDims dims;
  double joint_mi = 0.0;  // I(Xv, Xl; Tv, Tl)
  double i_xv_tv = 0.0;
  double i_xl_tl = 0.0;
  double i_tv_tl = 0.0;
  double d_skl = 0.0;
  std::array<BoundCheck, 4> checks{};

  bool all_hold() const;
  const BoundCheck& check(BoundVariant v) const;
};

// Correlated inputs sx = B B^T / dx + 0.1 I, maps with N(0, 1/dx) entries,
// noise 0.1 on both modalities. Requires dt_v == dt_l.
LinearGaussianSystem random_linear_gaussian_system(std::uint64_t seed, const SystemDims& dims);

// Every term from log-determinants and the closed-form Gaussian KL.
BoundReport evaluate_bounds(const LinearGaussianSystem& sys);

BoundReport verify_bound_ordering(std::uint64_t system_seed, const SystemDims& dims);

}  // namespace cib

#pragma once

// Small building blocks on top of the tensor engine: named parameter sets,
// affine layers, the momentum-SGD optimizer with its warmup/decay schedule,
// and the JSON parameter checkpoint format.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cib/tensor.hpp"

namespace cib {

using Rng = std::mt19937_64;

// Ordered name -> parameter list. Order is the registration order and fixes
// the checkpoint key set and the optimizer state layout.
class ParamSet {
 public:
  void add(std::string name, Tensor param);
  void extend(const std::string& prefix, const ParamSet& other);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  const Tensor& get(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// y = x W + b for x of shape [N, in].
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
  void register_into(ParamSet& params, const std::string& prefix) const;
};

std::vector<double> normal_vector(std::size_t n, double stddev, Rng& rng);

// Linear warmup over `warmup_steps`, then linear decay to zero at `total_steps`.
// With warmup_steps == 0 this is the plain decay schedule.
class LinearWarmupDecay {
 public:
  LinearWarmupDecay(double base_lr, std::size_t warmup_steps, std::size_t total_steps);
  double at(std::size_t step) const;
  std::size_t warmup_steps() const { return warmup_; }
  std::size_t total_steps() const { return total_; }

 private:
  double base_;
  std::size_t warmup_;
  std::size_t total_;
};

// v <- momentum * v + g;  p <- p - lr * v.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum = 0.9) : momentum_(momentum) {}
  void step(const ParamSet& params, const GradientMap& grads, double lr);

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// {"name": {"shape": [...], "data": "<base64 of little-endian float64>"}}.
std::string checkpoint_to_json(const ParamSet& params);
// Name -> tensor, as stored.
std::vector<std::pair<std::string, Tensor>> checkpoint_from_json(const std::string& text);
// Copies stored values into an existing parameter set; names and shapes must match.
void load_checkpoint(const std::string& text, const ParamSet& params);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace cib

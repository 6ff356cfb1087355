#include "cib/nn.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "json.hpp"

namespace cib {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

void ParamSet::add(std::string name, Tensor param) {
  for (const auto& [n, _] : entries_) {
    if (n == name) throw std::invalid_argument("ParamSet: duplicate parameter name '" + name + "'");
  }
  entries_.emplace_back(std::move(name), std::move(param));
}

void ParamSet::extend(const std::string& prefix, const ParamSet& other) {
  for (const auto& [n, t] : other.entries_) add(prefix + n, t);
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [_, t] : entries_) out.push_back(t);
  return out;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("ParamSet: no parameter named '" + name + "'");
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

std::vector<double> normal_vector(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, double gain) {
  Linear l;
  l.weight = Tensor::parameter({in, out}, normal_vector(in * out, gain / std::sqrt(static_cast<double>(in)), rng));
  l.bias = Tensor::parameter({out}, std::vector<double>(out, 0.0));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::register_into(ParamSet& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  params.add(prefix + ".bias", bias);
}

LinearWarmupDecay::LinearWarmupDecay(double base_lr, std::size_t warmup_steps, std::size_t total_steps)
    : base_(base_lr), warmup_(warmup_steps), total_(total_steps) {
  if (total_steps == 0) throw std::invalid_argument("LinearWarmupDecay: total_steps must be positive");
  if (warmup_steps > total_steps) throw std::invalid_argument("LinearWarmupDecay: warmup exceeds total steps");
}

double LinearWarmupDecay::at(std::size_t step) const {
  if (step < warmup_) return base_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  if (step >= total_) return 0.0;
  const double remaining = static_cast<double>(total_ - step);
  const double span = static_cast<double>(total_ - warmup_);
  return base_ * remaining / span;
}

void MomentumSgd::step(const ParamSet& params, const GradientMap& grads, double lr) {
  const auto& entries = params.entries();
  if (velocity_.empty()) {
    velocity_.resize(entries.size());
    for (std::size_t k = 0; k < entries.size(); ++k) velocity_[k].assign(entries[k].second.numel(), 0.0);
  }
  if (velocity_.size() != entries.size()) throw std::logic_error("MomentumSgd: parameter set changed between steps");
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const Tensor& p = entries[k].second;
    const Tensor g = grads.of(p);
    auto gv = g.data();
    auto& v = velocity_[k];
    std::vector<double> next = p.to_vector();
    for (std::size_t i = 0; i < next.size(); ++i) {
      v[i] = momentum_ * v[i] + gv[i];
      next[i] -= lr * v[i];
    }
    p.assign(next);
  }
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("base64: malformed payload");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the bytes produced by '=' padding.
  if (!text.empty() && text[text.size() - 1] == '=') --len;
  if (text.size() > 1 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

std::string checkpoint_to_json(const ParamSet& params) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [name, t] : params.entries()) {
    const auto d = t.data();
    std::vector<std::uint8_t> bytes(d.size() * sizeof(double));
    std::memcpy(bytes.data(), d.data(), bytes.size());
    doc[name] = {{"shape", t.shape()}, {"data", base64_encode(bytes)}};
  }
  return doc.dump(2);
}

std::vector<std::pair<std::string, Tensor>> checkpoint_from_json(const std::string& text) {
  const auto doc = nlohmann::ordered_json::parse(text);
  if (!doc.is_object()) throw std::invalid_argument("checkpoint: top level must be an object");
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, entry] : doc.items()) {
    const Shape shape = entry.at("shape").get<Shape>();
    const auto bytes = base64_decode(entry.at("data").get<std::string>());
    if (bytes.size() != numel(shape) * sizeof(double)) {
      throw std::invalid_argument("checkpoint: payload size mismatch for '" + name + "'");
    }
    std::vector<double> values(numel(shape));
    std::memcpy(values.data(), bytes.data(), bytes.size());
    out.emplace_back(name, Tensor::from(shape, std::move(values)));
  }
  return out;
}

void load_checkpoint(const std::string& text, const ParamSet& params) {
  const auto stored = checkpoint_from_json(text);
  if (stored.size() != params.size()) {
    throw std::invalid_argument("checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                                std::to_string(stored.size()));
  }
  for (const auto& [name, t] : stored) {
    const Tensor& p = params.get(name);
    if (p.shape() != t.shape()) {
      throw ShapeError("checkpoint: shape mismatch for '" + name + "': " + to_string(p.shape()) + " vs " +
                       to_string(t.shape()));
    }
    p.assign(t.data());
  }
}

}  // namespace cib

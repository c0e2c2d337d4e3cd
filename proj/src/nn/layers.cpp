#include "treeformer/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace treeformer::nn {

namespace {
// truncated normal in [-2std, 2std], matching the usual transformer init
float trunc_normal(Rng& rng, float std_dev) {
  std::normal_distribution<float> n(0.f, std_dev);
  for (int tries = 0; tries < 100; ++tries) {
    float v = n(rng);
    if (std::abs(v) <= 2.f * std_dev) return v;
  }
  return 0.f;
}
}  // namespace

Tensor ParamRegistry::add(const std::string& name, const Shape& shape, Init init, bool trainable,
                          int fan_out) {
  if (find(name)) throw std::logic_error("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(shape, trainable);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      std::fill(t.data(), t.data() + t.numel(), 1.f);
      break;
    case Init::TruncNormal02:
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = trunc_normal(rng_, 0.02f);
      break;
    case Init::KaimingConvOut: {
      if (fan_out <= 0) throw std::logic_error("kaiming init needs fan_out");
      float std_dev = std::sqrt(2.f / float(fan_out));
      std::normal_distribution<float> n(0.f, std_dev);
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = n(rng_);
      break;
    }
  }
  entries_.push_back({name, t, trainable});
  return t;
}

Tensor* ParamRegistry::find(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

std::vector<Tensor> ParamRegistry::trainable_params() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

Linear::Linear(ParamRegistry& reg, const std::string& prefix, int cin, int cout) {
  w = reg.add(prefix + ".weight", {cin, cout}, Init::TruncNormal02);
  b = reg.add(prefix + ".bias", {cout}, Init::Zeros);
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& prefix, int cin, int cout_, int k_,
               int stride_, int pad_)
    : cout(cout_), k(k_), stride(stride_), pad(pad_) {
  w = reg.add(prefix + ".weight", {cout, cin * k * k}, Init::KaimingConvOut, true,
              cout * k * k);
  b = reg.add(prefix + ".bias", {cout}, Init::Zeros);
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& prefix, int c) {
  gamma = reg.add(prefix + ".gamma", {c}, Init::Ones);
  beta = reg.add(prefix + ".beta", {c}, Init::Zeros);
}

BatchNorm2d::BatchNorm2d(ParamRegistry& reg, const std::string& prefix, int c) {
  gamma = reg.add(prefix + ".gamma", {c}, Init::Ones);
  beta = reg.add(prefix + ".beta", {c}, Init::Zeros);
  run_mean = reg.add(prefix + ".running_mean", {c}, Init::Zeros, false);
  run_var = reg.add(prefix + ".running_var", {c}, Init::Ones, false);
}

Adam::Adam(std::vector<Tensor> params, double lr, double weight_decay, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (auto& p : params_) {
    m_.emplace_back(size_t(p.numel()), 0.f);
    v_.emplace_back(size_t(p.numel()), 0.f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(b1_, double(step_));
  const double bc2 = 1.0 - std::pow(b2_, double(step_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    if (!p.grad_allocated()) p.grad();
    float* w = p.data();
    float* g = p.grad();
    float* m = m_[pi].data();
    float* v = v_[pi].data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      double gi = double(g[i]) + wd_ * double(w[i]);
      m[i] = float(b1_ * m[i] + (1.0 - b1_) * gi);
      v[i] = float(b2_ * v[i] + (1.0 - b2_) * gi * gi);
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] = float(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

}  // namespace treeformer::nn

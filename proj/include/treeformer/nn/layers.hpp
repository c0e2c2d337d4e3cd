#pragma once

#include <string>
#include <vector>

#include "treeformer/nn/functional.hpp"
#include "treeformer/nn/tensor.hpp"
#include "treeformer/rng.hpp"

namespace treeformer::nn {

enum class Init { Zeros, Ones, TruncNormal02, KaimingConvOut };

// Owns every parameter and buffer of a network, keyed by stable names used in
// checkpoints. Initialization draws come from one seeded stream in
// registration order, so construction is deterministic.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  explicit ParamRegistry(uint64_t seed) : rng_(make_rng(derive_seed(seed, 0xa11))) {}

  Tensor add(const std::string& name, const Shape& shape, Init init, bool trainable = true,
             int fan_out = 0);
  Tensor* find(const std::string& name);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor> trainable_params() const;

 private:
  std::vector<Entry> entries_;
  Rng rng_;
};

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int cin, int cout);
  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

struct Conv2d {
  Tensor w, b;
  int cout = 0, k = 0, stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& prefix, int cin, int cout, int k, int stride,
         int pad);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, cout, k, stride, pad); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& prefix, int c);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  mutable Tensor run_mean, run_var;
  BatchNorm2d() = default;
  BatchNorm2d(ParamRegistry& reg, const std::string& prefix, int c);
  Tensor forward(const Tensor& x, bool training) const {
    return batch_norm2d(x, gamma, beta, run_mean, run_var, training);
  }
};

// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void zero_grad();
  void step();
  int64_t step_count() const { return step_; }

  // checkpoint access
  std::vector<std::vector<float>>& moment1() { return m_; }
  std::vector<std::vector<float>>& moment2() { return v_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  int64_t step_ = 0;
};

}  // namespace treeformer::nn

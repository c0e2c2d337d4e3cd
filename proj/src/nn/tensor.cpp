#include "treeformer/nn/tensor.hpp"

#include <stdexcept>

namespace treeformer::nn {

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto data = std::make_shared<TensorData>();
  data->values.assign(size_t(shape_numel(shape)), 0.f);
  data->requires_grad = requires_grad;
  return Tensor(shape, std::move(data));
}

Tensor Tensor::full(const Shape& shape, float value) {
  auto data = std::make_shared<TensorData>();
  data->values.assign(size_t(shape_numel(shape)), value);
  return Tensor(shape, std::move(data));
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<float> values) {
  if (int64_t(values.size()) != shape_numel(shape))
    throw std::invalid_argument("from_vector: size mismatch");
  auto data = std::make_shared<TensorData>();
  data->values = std::move(values);
  return Tensor(shape, std::move(data));
}

float* Tensor::grad() {
  if (data_->grad.size() != data_->values.size()) data_->grad.assign(data_->values.size(), 0.f);
  return data_->grad.data();
}

void Tensor::zero_grad() {
  if (data_ && !data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.f);
}

Tensor Tensor::reshaped(const Shape& shape) const {
  if (shape_numel(shape) != numel()) throw std::invalid_argument("reshape: numel mismatch");
  return Tensor(shape, data_);
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> fn) {
  if (g_current_tape) g_current_tape->nodes_.push_back(std::move(fn));
}

void Tape::backward(Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  loss.grad()[0] += 1.f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

}  // namespace treeformer::nn

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace treeformer::nn {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

struct TensorData {
  std::vector<float> values;
  std::vector<float> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
};

// Dense float tensor with shared storage. reshaped() views share the buffer;
// every other op copies. Gradients accumulate into the shared storage during
// Tape::backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::shared_ptr<TensorData> data)
      : shape_(std::move(shape)), data_(std::move(data)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value);
  static Tensor from_vector(const Shape& shape, std::vector<float> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int dim(size_t i) const { return shape_[i]; }
  int ndim() const { return int(shape_.size()); }
  int64_t numel() const { return shape_numel(shape_); }

  float* data() { return data_->values.data(); }
  const float* data() const { return data_->values.data(); }

  bool requires_grad() const { return data_ && data_->requires_grad; }
  void set_requires_grad(bool v) { data_->requires_grad = v; }

  float* grad();  // allocates zeros on first use
  bool grad_allocated() const { return data_ && !data_->grad.empty(); }
  void zero_grad();

  Tensor reshaped(const Shape& shape) const;  // shares storage

  const std::shared_ptr<TensorData>& storage() const { return data_; }

 private:
  Shape shape_;
  std::shared_ptr<TensorData> data_;
};

// Reverse-mode tape. Constructing a Tape makes it the active one for the
// thread; ops record backward closures while a tape is active and any input
// requires grad.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  static bool recording() { return current() != nullptr; }
  static void record(std::function<void()> fn);

  // Seeds d(loss)/d(loss) = 1 and replays recorded closures in reverse.
  void backward(Tensor& loss);

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
};

}  // namespace treeformer::nn

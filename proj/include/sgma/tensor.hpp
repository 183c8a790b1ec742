#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgma {

using Shape = std::vector<std::size_t>;

/// Raised for malformed shapes, bad arguments and mismatched dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised whenever an operation produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Vectorized Eigen reductions peel a different number of leading elements
// depending on the buffer address, which changes the summation order. Aligned
// storage keeps results independent of the allocator state and thread.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

struct TensorImpl {
  Shape shape;
  Storage data;
  Storage grad;
  bool requires_grad = false;
};

/// Shared handle to a dense row-major f64 array with an optional gradient slot.
///
/// Copies of a Tensor alias the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  /// Leaf tensor that accumulates gradients during Tape::backward.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  // Spans alias the storage, so they are not handed out from temporaries.
  std::span<const double> data() const& { return impl_->data; }
  std::span<const double> data() const&& = delete;
  std::span<double> mutable_data() & { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  /// Gradient buffer; empty span when the tensor does not track gradients.
  std::span<const double> grad() const& { return impl_->grad; }
  std::span<const double> grad() const&& = delete;
  // Gradient accumulation is the one mutation allowed through a const handle.
  std::span<double> mutable_grad() const { return impl_->grad; }
  void zero_grad();

  Tensor clone() const;
  /// Deep copy that does not participate in gradient tracking.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

/// Records differentiable operations executed on this thread while alive.
///
/// Tapes nest: constructing a Tape makes it the active one until it is
/// destroyed. Operations executed without an active tape are forward-only.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  /// Replays recorded backward rules in reverse order, seeding d(loss) = 1.
  /// Gradients of recorded intermediates are reset first; leaf parameter
  /// gradients accumulate.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<std::string>& op_names() const { return names_; }

  void record(std::string name, Tensor output, BackwardFn fn);

 private:
  struct Record {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Record> records_;
  std::vector<std::string> names_;
  Tape* previous_ = nullptr;
};

/// Temporarily disables recording (e.g. for evaluation inside a training step).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

namespace detail {

/// True when an active tape exists and any input tracks gradients.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);

/// Marks `output` as differentiable and records its backward rule.
void record(const char* name, Tensor& output, Tape::BackwardFn fn);

void require_finite(const Tensor& t, const char* op);

}  // namespace detail
}  // namespace sgma

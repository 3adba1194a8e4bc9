#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace im2tex {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Arithmetic precision of tensor values.
//
// Values live in 64-bit containers. Under Precision::f32 (the default) every
// op output and every gradient is rounded to the nearest binary32 value, while
// reductions inside an op accumulate in 64 bits. Precision::f64 skips the
// rounding and is what the finite-difference checks run under.
enum class Precision { f32, f64 };

Precision precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

// Rounds in place to the active precision.
void round_to_precision(std::span<double> values);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::optional<std::size_t> tape_id;

  void accumulate_grad(std::span<const double> g);
  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor scalar(double value);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> values() const { return impl_->data; }
  // Writable view for leaves (inputs, parameters). Never call on a tensor that
  // is already recorded on a live tape.
  std::span<double> mutable_values() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  // Gradient accumulated by the last backward pass; zeros when none flowed.
  std::span<const double> grad() const;
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad();

  // A copy that is off the tape and never accumulates gradient.
  Tensor detach() const;
  // Deep copy of values and the requires_grad flag; no tape link, no grad.
  Tensor clone() const;

  std::optional<std::size_t> tape_id() const { return impl_->tape_id; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of differentiable ops. Node order equals creation order,
// which is a valid topological order, so backward is a reverse sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(const detail::TensorImpl& out)>;

  Tape() = default;
  ~Tape() { clear(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t record(std::string_view op, const Tensor& output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and sweeps the nodes in reverse creation order.
  // Gradients add into every requires_grad leaf reachable from the loss.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
  void clear();

 private:
  struct Node {
    std::string_view op;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Tape that new ops record onto, per thread; nullptr disables recording.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* saved_;
};

}  // namespace im2tex

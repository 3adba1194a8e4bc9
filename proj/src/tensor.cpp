#include "im2tex/tensor.hpp"

#include <algorithm>

#include "im2tex/errors.hpp"
#include "im2tex/simd/kernels.hpp"

namespace im2tex {
namespace {

thread_local Precision g_precision = Precision::f32;
thread_local Tape* g_tape = nullptr;

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Precision precision() { return g_precision; }

PrecisionScope::PrecisionScope(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

void round_to_precision(std::span<double> values) {
  if (g_precision == Precision::f32) simd::kernels().round_to_f32(values.data(), values.size());
}

namespace detail {

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

void TensorImpl::accumulate_grad(std::span<const double> g) {
  if (!requires_grad) return;
  auto& dst = ensure_grad();
  simd::kernels().accumulate(g.data(), dst.data(), dst.size());
  round_to_precision(dst);
}

}  // namespace detail

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(shape_size(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), std::vector<double>(values)) {}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
  }
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

std::size_t Tape::record(std::string_view op, const Tensor& output, BackwardFn fn) {
  const std::size_t id = nodes_.size();
  output.impl()->tape = this;
  output.impl()->tape_id = id;
  nodes_.push_back(Node{op, output.impl(), std::move(fn)});
  return id;
}

void Tape::backward(const Tensor& loss) {
  if (loss.rank() != 0) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& root = *loss.impl();
  if (!root.requires_grad) return;
  if (!root.tape_id) {
    root.ensure_grad()[0] += 1.0;
    return;
  }
  if (root.tape != this) throw ContractError("loss was not recorded on this tape");
  root.ensure_grad()[0] += 1.0;
  const std::size_t start = *root.tape_id;
  for (std::size_t i = start + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    node.backward(*node.output);
    // Intermediate gradients are complete once their producer has run.
    std::vector<double>().swap(node.output->grad);
  }
}

void Tape::clear() {
  for (auto& node : nodes_) {
    node.output->tape = nullptr;
    node.output->tape_id.reset();
  }
  nodes_.clear();
}

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape* tape) : saved_(g_tape) { g_tape = tape; }
TapeScope::~TapeScope() { g_tape = saved_; }

}  // namespace im2tex

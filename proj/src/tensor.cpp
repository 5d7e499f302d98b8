#include "gradtrace/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "gradtrace/errors.hpp"

namespace gradtrace {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Storage>()) {
  check_shape(shape);
  impl_->data.assign(shape_numel(shape), 0.0f);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : impl_(std::make_shared<Storage>()) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor " + shape_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw StateError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 1 ? 1 : numel() / s.back();
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<float> Tensor::data() {
  if (!impl_) throw StateError("use of undefined tensor");
  return impl_->data;
}

std::span<const float> Tensor::data() const {
  if (!impl_) throw StateError("use of undefined tensor");
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw StateError("use of undefined tensor");
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<float> Tensor::grad() {
  if (!impl_) throw StateError("use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

std::span<const float> Tensor::grad() const {
  if (!impl_ || impl_->grad.empty()) throw StateError("tensor has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::drop_grad() {
  if (impl_) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  Tensor out;
  out.impl_ = std::make_shared<Storage>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

}  // namespace gradtrace

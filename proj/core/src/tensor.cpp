#include "stockformer/tensor.hpp"

#include <cmath>
#include <sstream>

#include "stockformer/errors.hpp"

namespace stockformer {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
  for (Index d : shape) {
    if (d < 1) {
      throw ShapeError("tensor shape " + shape_to_string(shape) +
                       " has a non-positive dimension");
    }
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": produced a non-finite element");
    }
  }
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->values.resize(static_cast<std::size_t>(numel(shape)));
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return wrap(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  for (double& v : impl->values) v = value;
  return wrap(impl);
}

Tensor Tensor::randn(Shape shape, Rng& rng, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  for (double& v : impl->values) v = rng.normal();
  return wrap(impl);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  validate_shape(shape);
  if (static_cast<Index>(values.size()) != numel(shape)) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(impl);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ShapeError("use of default-constructed tensor");
  return impl_->shape;
}

Index Tensor::dim(int i) const {
  const Shape& s = shape();
  if (i < 0 || i >= static_cast<int>(s.size())) {
    throw ShapeError("dim index out of range for shape " + shape_to_string(s));
  }
  return s[static_cast<std::size_t>(i)];
}

Index Tensor::size() const { return numel(shape()); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!impl_) throw ShapeError("use of default-constructed tensor");
  impl_->requires_grad = rg;
}

std::span<const double> Tensor::values() const {
  if (!impl_) throw ShapeError("use of default-constructed tensor");
  return impl_->values;
}

std::span<double> Tensor::values_mut() {
  if (!impl_) throw ShapeError("use of default-constructed tensor");
  return impl_->values;
}

double Tensor::value() const {
  if (size() != 1) {
    throw ShapeError("value(): tensor " + shape_to_string(shape()) +
                     " is not scalar");
  }
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) {
    throw ShapeError("at(): index rank mismatch for shape " + shape_to_string(s));
  }
  Index flat = 0;
  std::size_t k = 0;
  for (Index i : idx) {
    if (i < 0 || i >= s[k]) throw ShapeError("at(): index out of bounds");
    flat = flat * s[k] + i;
    ++k;
  }
  return impl_->values[static_cast<std::size_t>(flat)];
}

bool Tensor::has_grad() const {
  return impl_ && impl_->grad.size() == impl_->values.size();
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ShapeError("grad(): no gradient present");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!impl_) throw ShapeError("use of default-constructed tensor");
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.assign(impl_->values.size(), 0.0);
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

}  // namespace stockformer

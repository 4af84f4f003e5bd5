#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stockformer/rng.hpp"

namespace stockformer {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily by the backward pass

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense double-precision tensor with shared immutable storage. Copies are
// cheap handle copies; op outputs are fresh tensors. Mutation is reserved
// for parameter updates between tape runs (values_mut).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  /// Scalar tensor of shape [1].
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  Index dim(int i) const;
  Index size() const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);

  std::span<const double> values() const;
  std::span<double> values_mut();
  /// Value of a [1] tensor.
  double value() const;
  /// Element by multi-index, row-major. Test/debug convenience.
  double at(std::initializer_list<Index> idx) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Throws ShapeError unless the shape is non-empty with all dims >= 1.
void validate_shape(const Shape& shape);

/// Throws NumericError naming `op` if any element is NaN or Inf.
void check_finite(const Tensor& t, const char* op);

}  // namespace stockformer

#include "stockformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "stockformer/errors.hpp"

namespace stockformer {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

void require_rank(const char* op, const Tensor& t, int rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

bool wants_grad(const TensorImpl& impl) { return impl.requires_grad; }

/// Finiteness check + tape recording shared by every op.
void finalize(const char* op, Tensor& out, bool any_requires_grad,
              std::function<void(const TensorImpl&)> backprop) {
  check_finite(out, op);
  if (!any_requires_grad) return;
  out.set_requires_grad(true);
  if (Tape* tape = Tape::active()) {
    tape->record({op, out.impl(), std::move(backprop)});
  }
}

Tensor unary_map(const char* op, const Tensor& a, double (*f)(double),
                 double (*dfdx)(double, double) /* (x, y) -> dy/dx */) {
  auto out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
  finalize(op, out, a.requires_grad(),
           [ai = a.impl(), oi = out.impl(), dfdx](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (std::size_t i = 0; i < o.grad.size(); ++i) {
               ai->grad[i] += o.grad[i] * dfdx(ai->values[i], oi->values[i]);
             }
           });
  return out;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto out = Tensor::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  finalize("add", out, a.requires_grad() || b.requires_grad(),
           [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
             if (wants_grad(*ai)) {
               ai->ensure_grad();
               for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
             }
             if (wants_grad(*bi)) {
               bi->ensure_grad();
               for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i];
             }
           });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto out = Tensor::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  finalize("sub", out, a.requires_grad() || b.requires_grad(),
           [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
             if (wants_grad(*ai)) {
               ai->ensure_grad();
               for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
             }
             if (wants_grad(*bi)) {
               bi->ensure_grad();
               for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
             }
           });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto out = Tensor::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  finalize("mul", out, a.requires_grad() || b.requires_grad(),
           [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
             if (wants_grad(*ai)) {
               ai->ensure_grad();
               for (std::size_t i = 0; i < o.grad.size(); ++i)
                 ai->grad[i] += o.grad[i] * bi->values[i];
             }
             if (wants_grad(*bi)) {
               bi->ensure_grad();
               for (std::size_t i = 0; i < o.grad.size(); ++i)
                 bi->grad[i] += o.grad[i] * ai->values[i];
             }
           });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  auto out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  finalize("scale", out, a.requires_grad(),
           [ai = a.impl(), s](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (std::size_t i = 0; i < o.grad.size(); ++i)
               ai->grad[i] += o.grad[i] * s;
           });
  return out;
}

Tensor shift(const Tensor& a, double s) {
  auto out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
  finalize("shift", out, a.requires_grad(),
           [ai = a.impl()](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
           });
  return out;
}

Tensor tanh(const Tensor& a) {
  return unary_map("tanh", a, [](double x) { return std::tanh(x); },
                   [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary_map("exp", a, [](double x) { return std::exp(x); },
                   [](double, double y) { return y; });
}

Tensor ln(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw ValueError("ln: element " + std::to_string(v) + " is not positive");
  }
  return unary_map("ln", a, [](double x) { return std::log(x); },
                   [](double x, double) { return 1.0 / x; });
}

namespace {
constexpr double kGeluCoeff = 0.044715;
double gelu_scalar(double x) {
  const double s = std::numbers::sqrt2 / std::sqrt(std::numbers::pi) *
                   (x + kGeluCoeff * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(s));
}
double gelu_grad_scalar(double x, double) {
  const double c = std::numbers::sqrt2 / std::sqrt(std::numbers::pi);
  const double s = c * (x + kGeluCoeff * x * x * x);
  const double t = std::tanh(s);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * kGeluCoeff * x * x);
}
}  // namespace

Tensor gelu(const Tensor& a) {
  return unary_map("gelu", a, &gelu_scalar, &gelu_grad_scalar);
}

Tensor sigmoid(const Tensor& a) {
  return unary_map("sigmoid", a,
                   [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                   [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
  return unary_map("abs", a, [](double x) { return std::fabs(x); },
                   [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ------------------------------------------------------------ linear algebra

namespace {

struct MatmulDims {
  Index batch, m, k, n;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
    throw ShapeError("matmul: ranks must both be 2 or both 3, got " +
                     shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  MatmulDims d{};
  if (a.rank() == 2) {
    d.batch = 1;
    d.m = a.dim(0);
    d.k = a.dim(1);
    if (b.dim(0) != d.k) {
      throw ShapeError("matmul: inner dimensions differ, " +
                       shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    d.n = b.dim(1);
  } else {
    if (a.dim(0) != b.dim(0)) {
      throw ShapeError("matmul: batch dimensions differ, " +
                       shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    d.batch = a.dim(0);
    d.m = a.dim(1);
    d.k = a.dim(2);
    if (b.dim(1) != d.k) {
      throw ShapeError("matmul: inner dimensions differ, " +
                       shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    d.n = b.dim(2);
  }
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulDims d = matmul_dims(a, b);
  Shape out_shape = (a.rank() == 2) ? Shape{d.m, d.n} : Shape{d.batch, d.m, d.n};
  auto out = Tensor::zeros(out_shape);
  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out.values_mut().data();
  for (Index bt = 0; bt < d.batch; ++bt) {
    const double* Ab = A + bt * d.m * d.k;
    const double* Bb = B + bt * d.k * d.n;
    double* Cb = C + bt * d.m * d.n;
    for (Index i = 0; i < d.m; ++i) {
      for (Index kk = 0; kk < d.k; ++kk) {
        const double aik = Ab[i * d.k + kk];
        if (aik == 0.0) continue;
        const double* Brow = Bb + kk * d.n;
        double* Crow = Cb + i * d.n;
        for (Index j = 0; j < d.n; ++j) Crow[j] += aik * Brow[j];
      }
    }
  }
  finalize("matmul", out, a.requires_grad() || b.requires_grad(),
           [ai = a.impl(), bi = b.impl(), d](const TensorImpl& o) {
             const double* G = o.grad.data();
             if (wants_grad(*ai)) {
               ai->ensure_grad();
               double* dA = ai->grad.data();
               const double* B = bi->values.data();
               // dA = G * B^T
               for (Index bt = 0; bt < d.batch; ++bt) {
                 const double* Gb = G + bt * d.m * d.n;
                 const double* Bb = B + bt * d.k * d.n;
                 double* dAb = dA + bt * d.m * d.k;
                 for (Index i = 0; i < d.m; ++i) {
                   for (Index kk = 0; kk < d.k; ++kk) {
                     double acc = 0.0;
                     const double* Grow = Gb + i * d.n;
                     const double* Brow = Bb + kk * d.n;
                     for (Index j = 0; j < d.n; ++j) acc += Grow[j] * Brow[j];
                     dAb[i * d.k + kk] += acc;
                   }
                 }
               }
             }
             if (wants_grad(*bi)) {
               bi->ensure_grad();
               double* dB = bi->grad.data();
               const double* A = ai->values.data();
               // dB = A^T * G
               for (Index bt = 0; bt < d.batch; ++bt) {
                 const double* Gb = G + bt * d.m * d.n;
                 const double* Ab = A + bt * d.m * d.k;
                 double* dBb = dB + bt * d.k * d.n;
                 for (Index i = 0; i < d.m; ++i) {
                   const double* Arow = Ab + i * d.k;
                   const double* Grow = Gb + i * d.n;
                   for (Index kk = 0; kk < d.k; ++kk) {
                     const double aik = Arow[kk];
                     if (aik == 0.0) continue;
                     double* dBrow = dBb + kk * d.n;
                     for (Index j = 0; j < d.n; ++j) dBrow[j] += aik * Grow[j];
                   }
                 }
               }
             }
           });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const Index m = a.dim(0), n = a.dim(1);
  auto out = Tensor::zeros({n, m});
  auto av = a.values();
  auto ov = out.values_mut();
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  finalize("transpose", out, a.requires_grad(),
           [ai = a.impl(), m, n](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (Index i = 0; i < m; ++i)
               for (Index j = 0; j < n; ++j)
                 ai->grad[i * n + j] += o.grad[j * m + i];
           });
  return out;
}

// ------------------------------------------------------ reductions / shaping

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto out = Tensor::scalar(s);
  finalize("sum_all", out, a.requires_grad(),
           [ai = a.impl()](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (double& g : ai->grad) g += o.grad[0];
           });
  return out;
}

Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto out = Tensor::scalar(s * inv);
  finalize("mean_all", out, a.requires_grad(),
           [ai = a.impl(), inv](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (double& g : ai->grad) g += o.grad[0] * inv;
           });
  return out;
}

Tensor mean_rows(const Tensor& a) {
  require_rank("mean_rows", a, 2);
  const Index rows = a.dim(0), cols = a.dim(1);
  const double inv = 1.0 / static_cast<double>(rows);
  auto out = Tensor::zeros({cols});
  auto av = a.values();
  auto ov = out.values_mut();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) ov[c] += av[r * cols + c];
  for (Index c = 0; c < cols; ++c) ov[c] *= inv;
  finalize("mean_rows", out, a.requires_grad(),
           [ai = a.impl(), rows, cols, inv](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (Index r = 0; r < rows; ++r)
               for (Index c = 0; c < cols; ++c)
                 ai->grad[r * cols + c] += o.grad[c] * inv;
           });
  return out;
}

Tensor broadcast_rows(const Tensor& v, Index rows) {
  require_rank("broadcast_rows", v, 1);
  if (rows < 1) throw ShapeError("broadcast_rows: rows must be >= 1");
  const Index cols = v.dim(0);
  auto out = Tensor::zeros({rows, cols});
  auto vv = v.values();
  auto ov = out.values_mut();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) ov[r * cols + c] = vv[c];
  finalize("broadcast_rows", out, v.requires_grad(),
           [vi = v.impl(), rows, cols](const TensorImpl& o) {
             if (!wants_grad(*vi)) return;
             vi->ensure_grad();
             for (Index r = 0; r < rows; ++r)
               for (Index c = 0; c < cols; ++c)
                 vi->grad[c] += o.grad[r * cols + c];
           });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) +
                     " as " + shape_to_string(shape));
  }
  auto out = Tensor::from_values(std::move(shape),
                                 {a.values().begin(), a.values().end()});
  finalize("reshape", out, a.requires_grad(),
           [ai = a.impl()](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
           });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().dim(0);
  Index total = 0;
  bool any_rg = false;
  for (const Tensor& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
    total += p.dim(1);
    any_rg = any_rg || p.requires_grad();
  }
  auto out = Tensor::zeros({rows, total});
  auto ov = out.values_mut();
  Index off = 0;
  for (const Tensor& p : parts) {
    const Index c = p.dim(1);
    auto pv = p.values();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < c; ++j) ov[r * total + off + j] = pv[r * c + j];
    off += c;
  }
  std::vector<ImplPtr> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.impl());
  finalize("concat_cols", out, any_rg,
           [impls, rows, total](const TensorImpl& o) {
             Index off = 0;
             for (const ImplPtr& pi : impls) {
               const Index c = pi->shape[1];
               if (wants_grad(*pi)) {
                 pi->ensure_grad();
                 for (Index r = 0; r < rows; ++r)
                   for (Index j = 0; j < c; ++j)
                     pi->grad[r * c + j] += o.grad[r * total + off + j];
               }
               off += c;
             }
           });
  return out;
}

Tensor slice_cols(const Tensor& a, Index from, Index to) {
  require_rank("slice_cols", a, 2);
  const Index rows = a.dim(0), cols = a.dim(1);
  if (from < 0 || to > cols || from >= to) {
    throw ShapeError("slice_cols: invalid range [" + std::to_string(from) + "," +
                     std::to_string(to) + ") for " + shape_to_string(a.shape()));
  }
  const Index w = to - from;
  auto out = Tensor::zeros({rows, w});
  auto av = a.values();
  auto ov = out.values_mut();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < w; ++j) ov[r * w + j] = av[r * cols + from + j];
  finalize("slice_cols", out, a.requires_grad(),
           [ai = a.impl(), rows, cols, from, w](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (Index r = 0; r < rows; ++r)
               for (Index j = 0; j < w; ++j)
                 ai->grad[r * cols + from + j] += o.grad[r * w + j];
           });
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<Index>& rows) {
  require_rank("gather_rows", a, 2);
  const Index n = a.dim(0), cols = a.dim(1);
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  for (Index r : rows) {
    if (r < 0 || r >= n) throw ShapeError("gather_rows: row index out of range");
  }
  auto out = Tensor::zeros({static_cast<Index>(rows.size()), cols});
  auto av = a.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Index c = 0; c < cols; ++c) ov[i * cols + c] = av[rows[i] * cols + c];
  finalize("gather_rows", out, a.requires_grad(),
           [ai = a.impl(), rows, cols](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (std::size_t i = 0; i < rows.size(); ++i)
               for (Index c = 0; c < cols; ++c)
                 ai->grad[rows[i] * cols + c] += o.grad[i * cols + c];
           });
  return out;
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ShapeError("stack_scalars: no inputs");
  bool any_rg = false;
  std::vector<double> vals(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw ShapeError("stack_scalars: inputs must be scalars");
    vals[i] = scalars[i].values()[0];
    any_rg = any_rg || scalars[i].requires_grad();
  }
  auto out = Tensor::from_values({static_cast<Index>(scalars.size())}, std::move(vals));
  std::vector<ImplPtr> impls;
  impls.reserve(scalars.size());
  for (const Tensor& s : scalars) impls.push_back(s.impl());
  finalize("stack_scalars", out, any_rg,
           [impls](const TensorImpl& o) {
             for (std::size_t i = 0; i < impls.size(); ++i) {
               if (!wants_grad(*impls[i])) continue;
               impls[i]->ensure_grad();
               impls[i]->grad[0] += o.grad[i];
             }
           });
  return out;
}

Tensor compose_rows(const std::vector<Index>& selected, const Tensor& a,
                    const Tensor& b) {
  require_rank("compose_rows", a, 2);
  require_rank("compose_rows", b, 2);
  const Index rows = b.dim(0), cols = b.dim(1);
  if (a.dim(1) != cols) throw ShapeError("compose_rows: column counts differ");
  if (a.dim(0) != static_cast<Index>(selected.size())) {
    throw ShapeError("compose_rows: replacement row count != selected count");
  }
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (selected[i] < 0 || selected[i] >= rows)
      throw ShapeError("compose_rows: selected index out of range");
    if (i > 0 && selected[i] <= selected[i - 1])
      throw ShapeError("compose_rows: selected indices must be ascending and distinct");
  }
  auto out = Tensor::zeros({rows, cols});
  auto av = a.values(), bv = b.values();
  auto ov = out.values_mut();
  std::copy(bv.begin(), bv.end(), ov.begin());
  for (std::size_t i = 0; i < selected.size(); ++i)
    for (Index c = 0; c < cols; ++c)
      ov[selected[i] * cols + c] = av[i * cols + c];
  finalize("compose_rows", out, a.requires_grad() || b.requires_grad(),
           [ai = a.impl(), bi = b.impl(), selected, rows, cols](const TensorImpl& o) {
             if (wants_grad(*ai)) {
               ai->ensure_grad();
               for (std::size_t i = 0; i < selected.size(); ++i)
                 for (Index c = 0; c < cols; ++c)
                   ai->grad[i * cols + c] += o.grad[selected[i] * cols + c];
             }
             if (wants_grad(*bi)) {
               bi->ensure_grad();
               std::size_t next = 0;
               for (Index r = 0; r < rows; ++r) {
                 if (next < selected.size() && selected[next] == r) {
                   ++next;
                   continue;
                 }
                 for (Index c = 0; c < cols; ++c)
                   bi->grad[r * cols + c] += o.grad[r * cols + c];
               }
             }
           });
  return out;
}

// ------------------------------------------------------------- nn primitives

Tensor softmax_last_axis(const Tensor& a) {
  const Index last = a.shape().back();
  const Index rows = a.size() / last;
  auto out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (Index r = 0; r < rows; ++r) {
    const double* x = av.data() + r * last;
    double* y = ov.data() + r * last;
    double m = x[0];
    for (Index i = 1; i < last; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (Index i = 0; i < last; ++i) {
      y[i] = std::exp(x[i] - m);
      s += y[i];
    }
    const double inv = 1.0 / s;
    for (Index i = 0; i < last; ++i) y[i] *= inv;
  }
  finalize("softmax_last_axis", out, a.requires_grad(),
           [ai = a.impl(), oi = out.impl(), rows, last](const TensorImpl& o) {
             if (!wants_grad(*ai)) return;
             ai->ensure_grad();
             for (Index r = 0; r < rows; ++r) {
               const double* y = oi->values.data() + r * last;
               const double* g = o.grad.data() + r * last;
               double dot = 0.0;
               for (Index i = 0; i < last; ++i) dot += g[i] * y[i];
               double* dx = ai->grad.data() + r * last;
               for (Index i = 0; i < last; ++i) dx[i] += y[i] * (g[i] - dot);
             }
           });
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double epsilon) {
  if (a.rank() < 1 || a.rank() > 2) {
    throw ShapeError("layer_norm: expected rank 1 or 2, got " +
                     shape_to_string(a.shape()));
  }
  require_rank("layer_norm", gamma, 1);
  require_rank("layer_norm", beta, 1);
  const Index last = a.shape().back();
  if (gamma.dim(0) != last || beta.dim(0) != last) {
    throw ShapeError("layer_norm: gamma/beta length must equal last axis (" +
                     std::to_string(last) + ")");
  }
  const Index rows = a.size() / last;
  auto out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto gv = gamma.values(), bv = beta.values();
  auto ov = out.values_mut();
  // Saved for backward: per-row inverse stddev and normalized values.
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto xhat = std::make_shared<std::vector<double>>(a.size());
  for (Index r = 0; r < rows; ++r) {
    const double* x = av.data() + r * last;
    double mean = 0.0;
    for (Index i = 0; i < last; ++i) mean += x[i];
    mean /= static_cast<double>(last);
    double var = 0.0;
    for (Index i = 0; i < last; ++i) {
      const double d = x[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(last);
    const double is = 1.0 / std::sqrt(var + epsilon);
    (*inv_std)[r] = is;
    double* xh = xhat->data() + r * last;
    double* y = ov.data() + r * last;
    for (Index i = 0; i < last; ++i) {
      xh[i] = (x[i] - mean) * is;
      y[i] = gv[i] * xh[i] + bv[i];
    }
  }
  finalize("layer_norm", out,
           a.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
           [ai = a.impl(), gi = gamma.impl(), bi = beta.impl(), inv_std, xhat,
            rows, last](const TensorImpl& o) {
             for (Index r = 0; r < rows; ++r) {
               const double* g = o.grad.data() + r * last;
               const double* xh = xhat->data() + r * last;
               if (wants_grad(*gi)) {
                 gi->ensure_grad();
                 for (Index i = 0; i < last; ++i) gi->grad[i] += g[i] * xh[i];
               }
               if (wants_grad(*bi)) {
                 bi->ensure_grad();
                 for (Index i = 0; i < last; ++i) bi->grad[i] += g[i];
               }
               if (wants_grad(*ai)) {
                 ai->ensure_grad();
                 // h = g .* gamma; dx = inv_std*(h - mean(h) - xhat*mean(h.*xhat))
                 double mean_h = 0.0, mean_hx = 0.0;
                 for (Index i = 0; i < last; ++i) {
                   const double h = g[i] * gi->values[i];
                   mean_h += h;
                   mean_hx += h * xh[i];
                 }
                 mean_h /= static_cast<double>(last);
                 mean_hx /= static_cast<double>(last);
                 double* dx = ai->grad.data() + r * last;
                 const double is = (*inv_std)[r];
                 for (Index i = 0; i < last; ++i) {
                   const double h = g[i] * gi->values[i];
                   dx[i] += is * (h - mean_h - xh[i] * mean_hx);
                 }
               }
             }
           });
  return out;
}

Tensor conv1d_circular(const Tensor& x, const Tensor& kernels) {
  require_rank("conv1d_circular", x, 2);
  require_rank("conv1d_circular", kernels, 3);
  const Index L = x.dim(0), c_in = x.dim(1);
  const Index c_out = kernels.dim(0);
  if (kernels.dim(1) != c_in) {
    throw ShapeError("conv1d_circular: kernel input channels " +
                     std::to_string(kernels.dim(1)) + " != input channels " +
                     std::to_string(c_in));
  }
  if (kernels.dim(2) != 3) {
    throw ShapeError("conv1d_circular: kernel width must be 3");
  }
  auto out = Tensor::zeros({L, c_out});
  auto xv = x.values();
  auto kv = kernels.values();
  auto ov = out.values_mut();
  for (Index t = 0; t < L; ++t) {
    for (Index w = 0; w < 3; ++w) {
      const Index src = (t + w - 1 + L) % L;
      const double* xrow = xv.data() + src * c_in;
      for (Index co = 0; co < c_out; ++co) {
        const double* krow = kv.data() + (co * c_in) * 3;
        double acc = 0.0;
        for (Index ci = 0; ci < c_in; ++ci) acc += xrow[ci] * krow[ci * 3 + w];
        ov[t * c_out + co] += acc;
      }
    }
  }
  finalize("conv1d_circular", out, x.requires_grad() || kernels.requires_grad(),
           [xi = x.impl(), ki = kernels.impl(), L, c_in, c_out](const TensorImpl& o) {
             if (wants_grad(*xi)) {
               xi->ensure_grad();
               for (Index t = 0; t < L; ++t)
                 for (Index w = 0; w < 3; ++w) {
                   const Index src = (t + w - 1 + L) % L;
                   for (Index co = 0; co < c_out; ++co) {
                     const double g = o.grad[t * c_out + co];
                     if (g == 0.0) continue;
                     for (Index ci = 0; ci < c_in; ++ci)
                       xi->grad[src * c_in + ci] += g * ki->values[(co * c_in + ci) * 3 + w];
                   }
                 }
             }
             if (wants_grad(*ki)) {
               ki->ensure_grad();
               for (Index t = 0; t < L; ++t)
                 for (Index w = 0; w < 3; ++w) {
                   const Index src = (t + w - 1 + L) % L;
                   for (Index co = 0; co < c_out; ++co) {
                     const double g = o.grad[t * c_out + co];
                     if (g == 0.0) continue;
                     for (Index ci = 0; ci < c_in; ++ci)
                       ki->grad[(co * c_in + ci) * 3 + w] += g * xi->values[src * c_in + ci];
                   }
                 }
             }
           });
  return out;
}

Tensor max_pool1d(const Tensor& x) {
  require_rank("max_pool1d", x, 2);
  const Index L = x.dim(0), c = x.dim(1);
  const Index Lo = (L + 1) / 2;  // kernel 3, stride 2, pad 1 => ceil(L/2)
  auto out = Tensor::zeros({Lo, c});
  auto xv = x.values();
  auto ov = out.values_mut();
  auto argmax = std::make_shared<std::vector<Index>>(Lo * c);
  for (Index j = 0; j < Lo; ++j) {
    const Index base = 2 * j - 1;
    for (Index ch = 0; ch < c; ++ch) {
      double best = -std::numeric_limits<double>::infinity();
      Index best_idx = -1;
      for (Index w = 0; w < 3; ++w) {
        const Index t = base + w;
        if (t < 0 || t >= L) continue;  // -inf padding never wins
        const double v = xv[t * c + ch];
        if (v > best) {
          best = v;
          best_idx = t;
        }
      }
      ov[j * c + ch] = best;
      (*argmax)[j * c + ch] = best_idx;
    }
  }
  finalize("max_pool1d", out, x.requires_grad(),
           [xi = x.impl(), argmax, Lo, c](const TensorImpl& o) {
             if (!wants_grad(*xi)) return;
             xi->ensure_grad();
             for (Index j = 0; j < Lo; ++j)
               for (Index ch = 0; ch < c; ++ch)
                 xi->grad[(*argmax)[j * c + ch] * c + ch] += o.grad[j * c + ch];
           });
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ValueError("dropout: p must be in [0,1)");
  if (p == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (double& m : *mask) m = (rng.uniform01() >= p) ? keep_scale : 0.0;
  auto out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * (*mask)[i];
  finalize("dropout", out, x.requires_grad(),
           [xi = x.impl(), mask](const TensorImpl& o) {
             if (!wants_grad(*xi)) return;
             xi->ensure_grad();
             for (std::size_t i = 0; i < o.grad.size(); ++i)
               xi->grad[i] += o.grad[i] * (*mask)[i];
           });
  return out;
}

}  // namespace stockformer

// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include "feddat/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace feddat::ad {
namespace {

using NodePtr = std::shared_ptr<detail::Node>;

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_output(const char* op, Shape shape, std::vector<double> values) {
  // v * 0 is NaN exactly when v is NaN or infinite.
  double probe = 0.0;
  for (double v : values) probe += v * 0.0;
  if (probe != 0.0 || std::isnan(probe)) throw NumericError(std::string(op) + ": non-finite output");
  return Tensor(std::move(shape), std::move(values));
}

void attach(Tensor& out, std::vector<NodePtr> inputs, Tape::BackwardFn fn) {
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  Tape::active()->record(out.node(), std::move(inputs), std::move(fn));
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  View(c, m, n).noalias() += ConstView(a, m, k) * ConstView(b, k, n);
}

// C[m,k] += G[m,n] * B[k,n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  View(c, m, k).noalias() += ConstView(g, m, n) * ConstView(b, k, n).transpose();
}

// C[k,n] += A[m,k]^T * G[m,n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  View(c, k, n).noalias() += ConstView(a, m, k).transpose() * ConstView(g, m, n);
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.ndim() == 0 || t.shape().back() == 0) {
    throw DimensionError(std::string(op) + ": needs a non-empty last dimension");
  }
  return t.shape().back();
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor result = make_output(op, a.shape(), std::move(out));
  if (should_record({&a})) {
    NodePtr an = a.node();
    attach(result, {an}, [an, deriv](const detail::Node& o) {
      auto g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(an->value[i]);
    });
  }
  return result;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched_a = a.ndim() == 3;
  const bool batched_b = b.ndim() == 3;
  if (a.ndim() < 2 || a.ndim() > 3 || b.ndim() < 2 || b.ndim() > 3 || (batched_b && !batched_a)) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = batched_a ? a.dim(0) : 1;
  const std::size_t m = a.shape()[a.ndim() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t kb = b.shape()[b.ndim() - 2];
  const std::size_t n = b.shape().back();
  if (k != kb || (batched_b && b.dim(0) != batch)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }

  std::vector<double> out(batch * m * n, 0.0);
  if (batched_b) {
    for (std::size_t s = 0; s < batch; ++s) {
      gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m,
              k, n);
    }
  } else {
    // A shared right operand acts on all batch rows at once.
    gemm_nn(a.data().data(), b.data().data(), out.data(), batch * m, k, n);
  }
  Shape shape = batched_a ? Shape{batch, m, n} : Shape{m, n};
  Tensor result = make_output("matmul", std::move(shape), std::move(out));

  if (should_record({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    attach(result, {an, bn}, [an, bn, batch, m, k, n, batched_b](const detail::Node& o) {
      const double* g = o.grad.data();
      if (an->requires_grad) {
        double* ga = an->grad_buffer().data();
        if (batched_b) {
          for (std::size_t s = 0; s < batch; ++s)
            gemm_nt(g + s * m * n, bn->value.data() + s * k * n, ga + s * m * k, m, n, k);
        } else {
          gemm_nt(g, bn->value.data(), ga, batch * m, n, k);
        }
      }
      if (bn->requires_grad) {
        double* gb = bn->grad_buffer().data();
        if (batched_b) {
          for (std::size_t s = 0; s < batch; ++s)
            gemm_tn(an->value.data() + s * m * k, g + s * m * n, gb + s * k * n, m, k, n);
        } else {
          gemm_tn(an->value.data(), g, gb, batch * m, k, n);
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() < 2 || a.ndim() > 3) {
    throw DimensionError("transpose: rank must be 2 or 3, got " + shape_str(a.shape()));
  }
  const std::size_t batch = a.ndim() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.shape()[a.ndim() - 2];
  const std::size_t c = a.shape().back();
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = x[s * r * c + i * c + j];
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor result = make_output("transpose", std::move(shape), std::move(out));
  if (should_record({&a})) {
    NodePtr an = a.node();
    attach(result, {an}, [an, batch, r, c](const detail::Node& o) {
      auto g = an->grad_buffer();
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[s * r * c + i * c + j] += o.grad[s * r * c + j * r + i];
    });
  }
  return result;
}

namespace {

Tensor add_scaled(const char* op, const Tensor& a, const Tensor& b, double sign) {
  if (!is_suffix(a.shape(), b.shape()) || b.numel() == 0) {
    throw DimensionError(std::string(op) + ": cannot combine " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t period = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t base = 0; base < out.size(); base += period) {
    double* row = out.data() + base;
    for (std::size_t j = 0; j < period; ++j) row[j] += sign * y[j];
  }
  Tensor result = make_output(op, a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    attach(result, {an, bn}, [an, bn, period, sign](const detail::Node& o) {
      if (an->requires_grad) an->accumulate_grad(o.grad);
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        for (std::size_t base = 0; base < o.grad.size(); base += period) {
          const double* row = o.grad.data() + base;
          for (std::size_t j = 0; j < period; ++j) g[j] += sign * row[j];
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_scaled("add", a, b, 1.0); }

Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor result = make_output("mul", a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    NodePtr an = a.node(), bn = b.node();
    attach(result, {an, bn}, [an, bn](const detail::Node& o) {
      if (an->requires_grad) {
        auto g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor softmax(const Tensor& z) {
  const std::size_t c = last_dim(z, "softmax");
  const std::size_t rows = z.numel() / c;
  std::vector<double> out(z.numel());
  const auto x = z.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * c;
    double* y = out.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= total;
  }
  Tensor result = make_output("softmax", z.shape(), std::move(out));
  if (should_record({&z})) {
    NodePtr zn = z.node();
    attach(result, {zn}, [zn, rows, c](const detail::Node& o) {
      auto g = zn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = o.value.data() + r * c;
        const double* go = o.grad.data() + r * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += go[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (go[j] - dot);
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& z) {
  const std::size_t c = last_dim(z, "log_softmax");
  const std::size_t rows = z.numel() / c;
  std::vector<double> out(z.numel());
  const auto x = z.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * c;
    double* y = out.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) y[j] = in[j] - lse;
  }
  Tensor result = make_output("log_softmax", z.shape(), std::move(out));
  if (should_record({&z})) {
    NodePtr zn = z.node();
    attach(result, {zn}, [zn, rows, c](const detail::Node& o) {
      auto g = zn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = o.value.data() + r * c;
        const double* go = o.grad.data() + r * c;
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += go[j];
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += go[j] - std::exp(y[j]) * total;
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (d < 2) throw DimensionError("layer_norm: needs at least 2 features");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  Tensor result = make_output("layer_norm", x.shape(), std::move(out));
  if (should_record({&x, &gain, &bias})) {
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
    attach(result, {xn, gn, bn},
           [xn, gn, bn, rows, d, xhat = std::move(xhat),
            inv_std = std::move(inv_std)](const detail::Node& o) {
             const double inv_d = 1.0 / static_cast<double>(d);
             if (gn->requires_grad) {
               auto gg = gn->grad_buffer();
               for (std::size_t i = 0; i < o.grad.size(); ++i) gg[i % d] += o.grad[i] * xhat[i];
             }
             if (bn->requires_grad) {
               auto gb = bn->grad_buffer();
               for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % d] += o.grad[i];
             }
             if (!xn->requires_grad) return;
             auto gx = xn->grad_buffer();
             std::vector<double> gh(d);
             for (std::size_t r = 0; r < rows; ++r) {
               double mean_gh = 0.0, mean_gh_h = 0.0;
               for (std::size_t j = 0; j < d; ++j) {
                 gh[j] = o.grad[r * d + j] * gn->value[j];
                 mean_gh += gh[j];
                 mean_gh_h += gh[j] * xhat[r * d + j];
               }
               mean_gh *= inv_d;
               mean_gh_h *= inv_d;
               for (std::size_t j = 0; j < d; ++j) {
                 gx[r * d + j] += inv_std[r] * (gh[j] - mean_gh - xhat[r * d + j] * mean_gh_h);
               }
             }
           });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.ndim() != 2) throw DimensionError("embedding: table must be [V,d]");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: token id " + std::to_string(ids[i]) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  Tensor result = make_output("embedding", Shape{ids.size(), d}, std::move(out));
  if (should_record({&table})) {
    NodePtr tn = table.node();
    std::vector<int> saved(ids.begin(), ids.end());
    attach(result, {tn}, [tn, d, saved = std::move(saved)](const detail::Node& o) {
      auto g = tn->grad_buffer();
      for (std::size_t i = 0; i < saved.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += o.grad[i * d + j];
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.shape()[i] != ref[i]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " +
                             shape_str(ref));
      }
    }
    shape[axis] += p.shape()[axis];
  }
  const AxisSplit total = split_at(shape, axis);
  std::vector<double> out(numel_of(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[axis] * total.inner;
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(p.data().begin() + o * chunk, chunk,
                  out.begin() + o * total.extent * total.inner + offset * total.inner);
    }
    offset += p.shape()[axis];
  }
  Tensor result = make_output("concat", shape, std::move(out));

  if (Tape::active() &&
      std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    attach(result, nodes, [nodes, offsets, total, axis](const detail::Node& o) {
      for (std::size_t p = 0; p < nodes.size(); ++p) {
        if (!nodes[p]->requires_grad) continue;
        auto g = nodes[p]->grad_buffer();
        const std::size_t chunk = nodes[p]->shape[axis] * total.inner;
        for (std::size_t q = 0; q < total.outer; ++q) {
          const double* src = o.grad.data() + q * total.extent * total.inner + offsets[p] * total.inner;
          for (std::size_t i = 0; i < chunk; ++i) g[q * chunk + i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.ndim() || start + length > a.shape()[axis] || length == 0) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") invalid for " + shape_str(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<double> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(a.data().begin() + o * s.extent * s.inner + start * s.inner, chunk,
                out.begin() + o * chunk);
  }
  Tensor result = make_output("slice", std::move(shape), std::move(out));
  if (should_record({&a})) {
    NodePtr an = a.node();
    attach(result, {an}, [an, s, start, chunk](const detail::Node& o) {
      auto g = an->grad_buffer();
      for (std::size_t q = 0; q < s.outer; ++q) {
        double* dst = g.data() + q * s.extent * s.inner + start * s.inner;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += o.grad[q * chunk + i];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor result = make_output("reshape", std::move(shape),
                              std::vector<double>(a.data().begin(), a.data().end()));
  if (should_record({&a})) {
    NodePtr an = a.node();
    attach(result, {an}, [an](const detail::Node& o) { an->accumulate_grad(o.grad); });
  }
  return result;
}

Tensor mean(const Tensor& a, std::size_t axis) {
  if (axis >= a.ndim() || a.shape()[axis] == 0) throw DimensionError("mean: bad axis");
  const AxisSplit s = split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const double inv = 1.0 / static_cast<double>(s.extent);
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += a.data()[(o * s.extent + e) * s.inner + i];
  for (double& v : out) v *= inv;
  Tensor result = make_output("mean", std::move(shape), std::move(out));
  if (should_record({&a})) {
    NodePtr an = a.node();
    attach(result, {an}, [an, s, inv](const detail::Node& o) {
      auto g = an->grad_buffer();
      for (std::size_t q = 0; q < s.outer; ++q)
        for (std::size_t e = 0; e < s.extent; ++e)
          for (std::size_t i = 0; i < s.inner; ++i)
            g[(q * s.extent + e) * s.inner + i] += inv * o.grad[q * s.inner + i];
    });
  }
  return result;
}

namespace {

Tensor reduce_all(const char* op, const Tensor& a, double factor) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor result = make_output(op, Shape{}, {factor * total});
  if (should_record({&a})) {
    NodePtr an = a.node();
    attach(result, {an}, [an, factor](const detail::Node& o) {
      auto g = an->grad_buffer();
      const double go = factor * o.grad[0];
      for (double& v : g) v += go;
    });
  }
  return result;
}

}  // namespace

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  return reduce_all("mean", a, 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a) { return reduce_all("sum", a, 1.0); }

}  // namespace feddat::ad

#include "steer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "steer/errors.hpp"

namespace steer::ops {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Impl = std::shared_ptr<detail::TensorImpl>;

ConstMap as_matrix(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r),
                  static_cast<Eigen::Index>(c));
}

MutMap as_matrix(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r),
                static_cast<Eigen::Index>(c));
}

enum class Form { kPlain, kTransposed };

// dst[m x p] += op(a) . op(b), op(a) being [m x k]. Eigen's blocked kernel
// serves true matrix products. Vector-shaped ones go through a fixed-order
// loop: Eigen's matrix-vector kernels choose their summation order from the
// buffers' memory alignment, which would make results vary between runs.
void product_add(std::vector<double>& dst, const std::vector<double>& a,
                 Form fa, const std::vector<double>& b, Form fb, std::size_t m,
                 std::size_t k, std::size_t p) {
  if (m > 1 && p > 1) {
    auto d = as_matrix(dst, m, p);
    const bool ta = fa == Form::kTransposed, tb = fb == Form::kTransposed;
    const auto am = ta ? as_matrix(a, k, m) : as_matrix(a, m, k);
    const auto bm = tb ? as_matrix(b, p, k) : as_matrix(b, k, p);
    if (ta && tb) {
      d.noalias() += am.transpose() * bm.transpose();
    } else if (ta) {
      d.noalias() += am.transpose() * bm;
    } else if (tb) {
      d.noalias() += am * bm.transpose();
    } else {
      d.noalias() += am * bm;
    }
    return;
  }
  const std::size_t as_i = fa == Form::kPlain ? k : 1, as_k = fa == Form::kPlain ? 1 : m;
  const std::size_t bs_k = fb == Form::kPlain ? p : 1, bs_j = fb == Form::kPlain ? 1 : k;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < k; ++q) s += a[i * as_i + q * as_k] * b[q * bs_k + j * bs_j];
      dst[i * p + j] += s;
    }
  }
}

// row[c] += column sums of g[r x c], rows added in order.
void add_column_sums(std::vector<double>& row, const std::vector<double>& g,
                     std::size_t r, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) row[j] += g[i * c + j];
  }
}


template <std::size_t N>
bool tracking(const std::array<const Tensor*, N>& inputs) {
  if (active_graph() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <std::size_t N>
Tensor finish(OpKind kind, const std::array<const Tensor*, N>& inputs,
              Tensor out, std::function<void()> backward) {
  if (!tracking(inputs)) return out;
  std::array<Tensor, N> copies;
  for (std::size_t i = 0; i < N; ++i) copies[i] = *inputs[i];
  return active_graph()->record(kind, copies, std::move(out),
                                std::move(backward));
}

// Output gradient buffer, always allocated during Graph::backward.
const std::vector<double>& g(const Impl& impl) { return impl->grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-d tensor, got " +
                         shape_str(t.shape()));
  }
}

// Elementwise unary op with derivative expressed through input x and
// output y.
template <typename Fwd, typename Deriv>
Tensor unary(OpKind kind, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr();
  Impl oi = out.impl_ptr();
  return finish<1>(kind, {&x}, out, [xi, oi, deriv] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += go[i] * deriv(xi->data[i], oi->data[i]);
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<double> c(m * p, 0.0);
  product_add(c, a.impl()->data, Form::kPlain, b.impl()->data, Form::kPlain, m, k, p);
  Tensor out = Tensor::from({m, p}, std::move(c));
  Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
  return finish<2>(OpKind::kMatmul, {&a, &b}, out, [ai, bi, oi, m, k, p] {
    if (ai->requires_grad) {
      product_add(ai->ensure_grad(), oi->grad, Form::kPlain, bi->data,
                  Form::kTransposed, m, p, k);
    }
    if (bi->requires_grad) {
      product_add(bi->ensure_grad(), ai->data, Form::kTransposed, oi->grad,
                  Form::kPlain, k, m, p);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix(w, "linear");
  const std::size_t k = w.dim(0), p = w.dim(1);
  if (x.cols() != k || bias.numel() != p) {
    throw DimensionError("linear: input " + shape_str(x.shape()) +
                         " incompatible with weight " + shape_str(w.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  const std::size_t m = x.rows();
  std::vector<double> y(m * p, 0.0);
  product_add(y, x.impl()->data, Form::kPlain, w.impl()->data, Form::kPlain, m, k, p);
  const auto& bv = bias.impl()->data;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) y[i * p + j] += bv[j];
  }
  Shape shape = x.shape();
  shape.back() = p;
  Tensor out = Tensor::from(shape, std::move(y));
  Impl xi = x.impl_ptr(), wi = w.impl_ptr(), bi = bias.impl_ptr(),
       oi = out.impl_ptr();
  return finish<3>(OpKind::kLinear, {&x, &w, &bias}, out,
                   [xi, wi, bi, oi, m, k, p] {
                     if (xi->requires_grad) {
                       product_add(xi->ensure_grad(), oi->grad, Form::kPlain,
                                   wi->data, Form::kTransposed, m, p, k);
                     }
                     if (wi->requires_grad) {
                       product_add(wi->ensure_grad(), xi->data, Form::kTransposed,
                                   oi->grad, Form::kPlain, k, m, p);
                     }
                     if (bi->requires_grad) {
                       add_column_sums(bi->ensure_grad(), oi->grad, m, p);
                     }
                   });
}

namespace {

template <typename Fwd, typename DA, typename DB>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, const char* name,
              Fwd fwd, DA da, DB db) {
  require_same_shape(a, b, name);
  std::vector<double> y(a.numel());
  const auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(as[i], bs[i]);
  Tensor out = Tensor::from(a.shape(), std::move(y));
  Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
  return finish<2>(kind, {&a, &b}, out, [ai, bi, oi, da, db] {
    const auto& go = g(oi);
    const std::size_t n = go.size();
    if (ai->requires_grad) {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += go[i] * da(ai->data[i], bi->data[i]);
      }
    }
    if (bi->requires_grad) {
      auto& gb = bi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        gb[i] += go[i] * db(ai->data[i], bi->data[i]);
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kAdd, a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kSub, a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kMul, a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kMinimum, a, b, "minimum",
      [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::kMaximum, a, b, "maximum",
      [](double x, double y) { return std::max(x, y); },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      OpKind::kScale, a, [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      OpKind::kAddScalar, a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  const std::size_t c = x.cols(), r = x.rows();
  if (row.numel() != c) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  }
  std::vector<double> y = x.impl()->data;
  const auto& rv = row.impl()->data;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += rv[j];
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr(), ri = row.impl_ptr(), oi = out.impl_ptr();
  return finish<2>(OpKind::kAddRow, {&x, &row}, out, [xi, ri, oi, r, c] {
    if (xi->requires_grad) {
      auto& gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    }
    if (ri->requires_grad) add_column_sums(ri->ensure_grad(), oi->grad, r, c);
  });
}

Tensor gelu(const Tensor& x) {
  static const double kC = std::sqrt(2.0 / M_PI);
  constexpr double kA = 0.044715;
  const auto xs = x.data();
  std::vector<double> y(xs.size()), t(xs.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xs[i];
    t[i] = std::tanh(kC * (v + kA * v * v * v));
    y[i] = 0.5 * v * (1.0 + t[i]);
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kGelu, {&x}, out, [xi, oi, t = std::move(t)] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xi->data[i];
      gx[i] += go[i] * (0.5 * (1.0 + t[i]) +
                        0.5 * v * (1.0 - t[i] * t[i]) * kC * (1.0 + 3.0 * kA * v * v));
    }
  });
}

Tensor tanh(const Tensor& x) {
  return unary(
      OpKind::kTanh, x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      OpKind::kSigmoid, x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      OpKind::kExp, x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary(
      OpKind::kSquare, x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = x.cols(), r = x.rows();
  if (d == 0 || gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) +
                         " with gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  std::vector<double> y(x.numel()), xhat(x.numel()), rstd(r);
  const auto xs = x.data(), gs = gain.data(), bs = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xs.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rstd[i];
      xhat[i * d + j] = h;
      y[i * d + j] = h * gs[j] + bs[j];
    }
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(),
       oi = out.impl_ptr();
  return finish<3>(
      OpKind::kLayerNorm, {&x, &gain, &bias}, out,
      [xi, gi, bi, oi, r, d, xhat = std::move(xhat), rstd = std::move(rstd)] {
        const auto& go = g(oi);
        if (gi->requires_grad || bi->requires_grad) {
          auto& gg = gi->ensure_grad();
          auto& gb = bi->ensure_grad();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += go[i * d + j] * xhat[i * d + j];
              gb[j] += go[i * d + j];
            }
          }
        }
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        const auto& gain_v = gi->data;
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = go[i * d + j] * gain_v[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = go[i * d + j] * gain_v[j];
            gx[i * d + j] +=
                rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
          }
        }
      });
}

Tensor softmax(const Tensor& x, std::optional<std::span<const bool>> mask) {
  const std::size_t d = x.cols(), r = x.rows();
  if (mask && mask->size() != x.numel()) {
    throw DimensionError("softmax: mask has " + std::to_string(mask->size()) +
                         " entries for input " + shape_str(x.shape()));
  }
  std::vector<double> y(x.numel(), 0.0);
  const auto xs = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) {
      if (!mask || (*mask)[i * d + j]) mx = std::max(mx, xs[i * d + j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw InvalidMaskError("softmax: row " + std::to_string(i) +
                             " has no unmasked entry");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (!mask || (*mask)[i * d + j]) {
        y[i * d + j] = std::exp(xs[i * d + j] - mx);
        total += y[i * d + j];
      }
    }
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] /= total;
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kSoftmax, {&x}, out, [xi, oi, r, d] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    const auto& ys = oi->data;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += go[i * d + j] * ys[i * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        gx[i * d + j] += ys[i * d + j] * (go[i * d + j] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t d = x.cols(), r = x.rows();
  std::vector<double> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = xs[i * d];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xs[i * d + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += std::exp(xs[i * d + j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = xs[i * d + j] - lse;
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kLogSoftmax, {&x}, out, [xi, oi, r, d] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    const auto& ys = oi->data;
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < d; ++j) total += go[i * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        gx[i * d + j] += go[i * d + j] - std::exp(ys[i * d + j]) * total;
      }
    }
  });
}

AttentionOutput attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          std::size_t batch, std::size_t tokens,
                          std::size_t heads, bool causal, bool keep_weights) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  if (q.rows() != batch * tokens) {
    throw DimensionError("attention: " + std::to_string(q.rows()) +
                         " rows for batch " + std::to_string(batch) + " x " +
                         std::to_string(tokens) + " tokens");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t tt = tokens * tokens;
  std::vector<double> probs(batch * heads * tt, 0.0);
  std::vector<double> y(q.numel(), 0.0);
  const auto qs = q.data(), ks = k.data(), vs = v.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (b * heads + h) * tt;
      for (std::size_t i = 0; i < tokens; ++i) {
        const std::size_t last = causal ? i + 1 : tokens;
        const double* qi = qs.data() + (b * tokens + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < last; ++j) {
          const double* kj = ks.data() + (b * tokens + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * tokens + j] = s * inv_sqrt;
          mx = std::max(mx, p[i * tokens + j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < last; ++j) {
          p[i * tokens + j] = std::exp(p[i * tokens + j] - mx);
          total += p[i * tokens + j];
        }
        double* yi = y.data() + (b * tokens + i) * d + h * dh;
        for (std::size_t j = 0; j < last; ++j) {
          p[i * tokens + j] /= total;
          const double* vj = vs.data() + (b * tokens + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) yi[c] += p[i * tokens + j] * vj[c];
        }
      }
    }
  }
  AttentionOutput result;
  if (keep_weights) result.weights = probs;
  Tensor out = Tensor::from(q.shape(), std::move(y));
  Impl qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr(),
       oi = out.impl_ptr();
  result.out = finish<3>(
      OpKind::kAttention, {&q, &k, &v}, out,
      [qi, ki, vi, oi, batch, tokens, heads, causal, d, dh, inv_sqrt, tt,
       probs = std::move(probs)] {
        const auto& go = g(oi);
        auto& gq = qi->ensure_grad();
        auto& gk = ki->ensure_grad();
        auto& gv = vi->ensure_grad();
        std::vector<double> dp(tokens);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (b * heads + h) * tt;
            for (std::size_t i = 0; i < tokens; ++i) {
              const std::size_t last = causal ? i + 1 : tokens;
              const std::size_t ri = (b * tokens + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < last; ++j) {
                const std::size_t rj = (b * tokens + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += go[ri + c] * vi->data[rj + c];
                  gv[rj + c] += p[i * tokens + j] * go[ri + c];
                }
                dp[j] = s;
                dot += p[i * tokens + j] * s;
              }
              for (std::size_t j = 0; j < last; ++j) {
                const double ds = p[i * tokens + j] * (dp[j] - dot) * inv_sqrt;
                const std::size_t rj = (b * tokens + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  gq[ri + c] += ds * ki->data[rj + c];
                  gk[rj + c] += ds * qi->data[ri + c];
                }
              }
            }
          }
        }
      });
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<double> y(index.size() * c);
  const auto xs = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) +
                           " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(index[i] * c), c,
                y.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  Tensor out = Tensor::from({index.size(), c}, std::move(y));
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish<1>(OpKind::kGatherRows, {&x}, out,
                   [xi, oi, c, idx = std::move(idx)] {
                     if (!xi->requires_grad) return;
                     auto& gx = xi->ensure_grad();
                     const auto& go = g(oi);
                     for (std::size_t i = 0; i < idx.size(); ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         gx[idx[i] * c + j] += go[i * c + j];
                       }
                     }
                   });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    if (t.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(t.shape()));
    }
    total += t.rows();
  }
  std::vector<double> y;
  y.reserve(total * c);
  std::vector<Impl> impls;
  bool any_grad = false;
  for (const Tensor& t : parts) {
    y.insert(y.end(), t.data().begin(), t.data().end());
    impls.push_back(t.impl_ptr());
    any_grad = any_grad || t.requires_grad();
  }
  Tensor out = Tensor::from({total, c}, std::move(y));
  if (active_graph() == nullptr || !any_grad) return out;
  Impl oi = out.impl_ptr();
  return active_graph()->record(
      OpKind::kConcatRows, parts, out, [impls = std::move(impls), oi] {
        const auto& go = g(oi);
        std::size_t offset = 0;
        for (const Impl& p : impls) {
          const std::size_t n = p->data.size();
          if (p->requires_grad) {
            auto& gp = p->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) gp[i] += go[offset + i];
          }
          offset += n;
        }
      });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  std::vector<double> y(r * (ca + cb));
  const auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(as.begin() + static_cast<std::ptrdiff_t>(i * ca), ca,
                y.begin() + static_cast<std::ptrdiff_t>(i * (ca + cb)));
    std::copy_n(bs.begin() + static_cast<std::ptrdiff_t>(i * cb), cb,
                y.begin() + static_cast<std::ptrdiff_t>(i * (ca + cb) + ca));
  }
  Tensor out = Tensor::from({r, ca + cb}, std::move(y));
  Impl ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
  return finish<2>(OpKind::kConcatCols, {&a, &b}, out, [ai, bi, oi, r, ca, cb] {
    const auto& go = g(oi);
    if (ai->requires_grad) {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += go[i * (ca + cb) + j];
      }
    }
    if (bi->requires_grad) {
      auto& gb = bi->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < cb; ++j) {
          gb[i * cb + j] += go[i * (ca + cb) + ca + j];
        }
      }
    }
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  }
  Tensor out = Tensor::from(shape, std::vector<double>(x.data().begin(),
                                                       x.data().end()));
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kReshape, {&x}, out, [xi, oi] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
  });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t c = x.cols(), r = x.rows();
  if (index.size() != r) {
    throw DimensionError("pick: " + std::to_string(index.size()) +
                         " indices for " + shape_str(x.shape()));
  }
  std::vector<double> y(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] >= c) {
      throw ContractError("pick: index " + std::to_string(index[i]) +
                          " out of range " + std::to_string(c));
    }
    y[i] = x.at(i * c + index[i]);
  }
  Tensor out = Tensor::from({r}, std::move(y));
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish<1>(OpKind::kPick, {&x}, out, [xi, oi, c, idx = std::move(idx)] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[i * c + idx[i]] += go[i];
  });
}

Tensor row_entropy(const Tensor& logp) {
  const std::size_t c = logp.cols(), r = logp.rows();
  std::vector<double> y(r, 0.0);
  const auto ls = logp.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      y[i] -= std::exp(ls[i * c + j]) * ls[i * c + j];
    }
  }
  Tensor out = Tensor::from({r}, std::move(y));
  Impl li = logp.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kRowEntropy, {&logp}, out, [li, oi, r, c] {
    if (!li->requires_grad) return;
    auto& gl = li->ensure_grad();
    const auto& go = g(oi);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double lp = li->data[i * c + j];
        gl[i * c + j] -= go[i] * std::exp(lp) * (lp + 1.0);
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kSum, {&x}, out, [xi, oi] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const double go = oi->grad[0];
    for (double& v : gx) v += go;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  double total = 0.0;
  for (double v : x.data()) total += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(total * inv);
  Impl xi = x.impl_ptr(), oi = out.impl_ptr();
  return finish<1>(OpKind::kMean, {&x}, out, [xi, oi, inv] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const double go = oi->grad[0] * inv;
    for (double& v : gx) v += go;
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      OpKind::kClamp, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, const Tensor& lo, const Tensor& hi) {
  require_same_shape(x, lo, "clamp");
  require_same_shape(x, hi, "clamp");
  std::vector<double> y(x.numel());
  const auto xs = x.data(), ls = lo.data(), hs = hi.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = std::min(std::max(xs[i], ls[i]), hs[i]);
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Impl xi = x.impl_ptr(), li = lo.impl_ptr(), hi_i = hi.impl_ptr(),
       oi = out.impl_ptr();
  return finish<1>(OpKind::kClamp, {&x}, out, [xi, li, hi_i, oi] {
    if (!xi->requires_grad) return;
    auto& gx = xi->ensure_grad();
    const auto& go = g(oi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xi->data[i];
      if (v >= li->data[i] && v <= hi_i->data[i]) gx[i] += go[i];
    }
  });
}

}  // namespace steer::ops

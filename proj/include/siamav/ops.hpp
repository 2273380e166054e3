#pragma once

// Differentiable operations. Each op computes its forward value eagerly and,
// when any input requires a gradient, records a closure that maps the output
// gradient back onto its inputs.

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "siamav/tensor.hpp"

namespace siamav::ops {

using detail::make_result;
using detail::Node;

namespace detail_ops {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// c[m x n] += a[m x k] * b[k x n]; fixed i-t-j order.
template <Scalar T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = ai[t];
      const T* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// c[k x n] += a^T * b where a is [m x k], b is [m x n].
template <Scalar T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = ai[t];
      T* ct = c + t * n;
      for (std::size_t j = 0; j < n; ++j) ct[j] += av * bi[j];
    }
  }
}

template <Scalar T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

}  // namespace detail_ops

// ---------------------------------------------------------------- elementwise

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <Scalar T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

template <Scalar T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

template <Scalar T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += T(2) * p.data[i] * self.grad[i];
  });
}

// x + y where y's shape is a suffix of x's shape (bias rows, positional tables).
template <Scalar T>
Tensor<T> add_trailing(const Tensor<T>& x, const Tensor<T>& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  bool ok = ys.size() <= xs.size();
  for (std::size_t i = 0; ok && i < ys.size(); ++i) ok = xs[xs.size() - ys.size() + i] == ys[i];
  if (!ok) throw DimensionError("add_trailing: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const std::size_t m = y.numel();
  const std::size_t reps = x.numel() / m;
  std::vector<T> out(x.values());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] += y[j];
  return make_result<T>(xs, std::move(out), {x, y}, [m, reps](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& py = *self.parents[1];
    if (px.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    if (py.requires_grad)
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < m; ++j) py.grad[j] += self.grad[r * m + j];
  });
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <Scalar T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = p.data[i];
      const T u = c * (v + k * v * v * v);
      const T th = std::tanh(u);
      const T du = c * (T(1) + T(3) * k * v * v);
      const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
      p.grad[i] += self.grad[i] * d;
    }
  });
}

template <Scalar T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (auto v : x.data()) s += v;
  return make_result<T>({1}, {s}, {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <Scalar T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Forward identity; contributes nothing to upstream gradients.
template <Scalar T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), x.values());
}

// ---------------------------------------------------------------- linear algebra

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail_ops::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {  // dA = dC * B^T
      auto bt = detail_ops::transposed(pb.data.data(), k, n);
      detail_ops::gemm_nn(self.grad.data(), bt.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {  // dB = A^T * dC
      detail_ops::gemm_tn(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n);
    }
  });
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  return make_result<T>({c, r}, detail_ops::transposed(a.data().data(), r, c), {a},
                        [r, c](Node<T>& self) {
                          auto& p = *self.parents[0];
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
                        });
}

// y = x W^T + b over the last axis. W is [out x in]; bias may be undefined.
template <Scalar T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  if (w.rank() != 2 || x.shape().back() != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const std::size_t in = w.dim(1), outd = w.dim(0), rows = x.numel() / in;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outd)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " for " + std::to_string(outd) + " outputs");
  }
  auto wt = detail_ops::transposed(w.data().data(), outd, in);
  std::vector<T> out(rows * outd, T(0));
  if (b.defined())
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < outd; ++o) out[r * outd + o] = b[o];
  detail_ops::gemm_nn(x.data().data(), wt.data(), out.data(), rows, in, outd);
  Shape s = x.shape();
  s.back() = outd;
  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<T>(std::move(s), std::move(out), std::move(parents), [rows, in, outd](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    if (px.requires_grad)  // dX = dY W
      detail_ops::gemm_nn(self.grad.data(), pw.data.data(), px.grad.data(), rows, outd, in);
    if (pw.requires_grad)  // dW = dY^T X
      detail_ops::gemm_tn(self.grad.data(), px.data.data(), pw.grad.data(), rows, outd, in);
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outd; ++o) pb.grad[o] += self.grad[r * outd + o];
    }
  });
}

// ---------------------------------------------------------------- normalization

template <Scalar T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine size mismatch for width " + std::to_string(d));
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = gamma[j] * h + beta[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& pg = *self.parents[1];
                          auto& pb = *self.parents[2];
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* g = self.grad.data() + r * d;
                            const T* h = xhat.data() + r * d;
                            if (pg.requires_grad)
                              for (std::size_t j = 0; j < d; ++j) pg.grad[j] += g[j] * h[j];
                            if (pb.requires_grad)
                              for (std::size_t j = 0; j < d; ++j) pb.grad[j] += g[j];
                            if (!px.requires_grad) continue;
                            T s1 = T(0), s2 = T(0);
                            for (std::size_t j = 0; j < d; ++j) {
                              const T gh = g[j] * pg.data[j];
                              s1 += gh;
                              s2 += gh * h[j];
                            }
                            s1 /= static_cast<T>(d);
                            s2 /= static_cast<T>(d);
                            for (std::size_t j = 0; j < d; ++j) {
                              const T gh = g[j] * pg.data[j];
                              px.grad[r * d + j] += rstd[r] * (gh - s1 - h[j] * s2);
                            }
                          }
                        });
}

// Softmax along `axis`, stabilized by subtracting the max along that axis.
template <Scalar T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail_ops::split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      T z = T(0);
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= z;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [sp](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t i = base + j * sp.inner;
          dot += self.grad[i] * self.data[i];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t i = base + j * sp.inner;
          p.grad[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

template <Scalar T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax(x, x.rank() - 1);
}

// Rows scaled to unit L2 norm; a zero row is a degenerate input.
template <Scalar T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows expects rank 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
    if (!(ss > T(0))) throw DegenerateInputError("row " + std::to_string(r) + " has zero norm");
    inv[r] = T(1) / std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] * inv[r];
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, d, inv = std::move(inv)](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.data[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        p.grad[r * d + j] += inv[r] * (self.grad[r * d + j] - self.data[r * d + j] * dot);
    }
  });
}

// ---------------------------------------------------------------- attention

// Scaled dot-product attention per head over [batch x tokens x width] inputs
// (rank 2 is treated as a batch of one). Scale is 1/sqrt(width/heads).
template <Scalar T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  detail_ops::require_same_shape(q.shape(), k.shape(), "attention_core(q,k)");
  detail_ops::require_same_shape(q.shape(), v.shape(), "attention_core(q,v)");
  if (q.rank() != 2 && q.rank() != 3) {
    throw DimensionError("attention_core expects rank 2 or 3, got " + shape_str(q.shape()));
  }
  const std::size_t d = q.shape().back();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t t = q.shape()[q.rank() - 2];
  const std::size_t b = q.numel() / (t * d);
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<T> probs(b * heads * t * t);
  std::vector<T> out(q.numel(), T(0));
  for (std::size_t bi = 0; bi < b; ++bi) {
    const T* Q = q.data().data() + bi * t * d;
    const T* K = k.data().data() + bi * t * d;
    const T* V = v.data().data() + bi * t * d;
    T* O = out.data() + bi * t * d;
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (bi * heads + h) * t * t;
      for (std::size_t i = 0; i < t; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + h * dh + c] * K[j * d + h * dh + c];
          s *= sc;
          P[i * t + j] = s;
          mx = std::max(mx, s);
        }
        T z = T(0);
        for (std::size_t j = 0; j < t; ++j) {
          P[i * t + j] = std::exp(P[i * t + j] - mx);
          z += P[i * t + j];
        }
        for (std::size_t j = 0; j < t; ++j) {
          P[i * t + j] /= z;
          const T pij = P[i * t + j];
          for (std::size_t c = 0; c < dh; ++c) O[i * d + h * dh + c] += pij * V[j * d + h * dh + c];
        }
      }
    }
  }
  return make_result<T>(q.shape(), std::move(out), {q, k, v},
                        [b, t, d, heads, dh, sc, probs = std::move(probs)](Node<T>& self) {
                          auto& pq = *self.parents[0];
                          auto& pk = *self.parents[1];
                          auto& pv = *self.parents[2];
                          std::vector<T> dP(t * t);
                          for (std::size_t bi = 0; bi < b; ++bi) {
                            const std::size_t off = bi * t * d;
                            const T* dO = self.grad.data() + off;
                            for (std::size_t h = 0; h < heads; ++h) {
                              const T* P = probs.data() + (bi * heads + h) * t * t;
                              const std::size_t hc = h * dh;
                              for (std::size_t i = 0; i < t; ++i) {
                                T rowdot = T(0);
                                for (std::size_t j = 0; j < t; ++j) {
                                  T g = T(0);
                                  for (std::size_t c = 0; c < dh; ++c)
                                    g += dO[i * d + hc + c] * pv.data[off + j * d + hc + c];
                                  dP[i * t + j] = g;
                                  rowdot += g * P[i * t + j];
                                }
                                for (std::size_t j = 0; j < t; ++j) {
                                  const T pij = P[i * t + j];
                                  const T ds = pij * (dP[i * t + j] - rowdot) * sc;
                                  if (pv.requires_grad)
                                    for (std::size_t c = 0; c < dh; ++c)
                                      pv.grad[off + j * d + hc + c] += pij * dO[i * d + hc + c];
                                  if (pq.requires_grad)
                                    for (std::size_t c = 0; c < dh; ++c)
                                      pq.grad[off + i * d + hc + c] += ds * pk.data[off + j * d + hc + c];
                                  if (pk.requires_grad)
                                    for (std::size_t c = 0; c < dh; ++c)
                                      pk.grad[off + j * d + hc + c] += ds * pq.data[off + i * d + hc + c];
                                }
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- structure

template <Scalar T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.values(), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

// out[i] = x[index[i]] for a flat index map; gradient scatter-adds back.
template <Scalar T>
Tensor<T> take(const Tensor<T>& x, std::vector<std::size_t> index, Shape shape) {
  if (shape_numel(shape) != index.size()) {
    throw DimensionError("take: index map of " + std::to_string(index.size()) + " entries for shape " +
                         shape_str(shape));
  }
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.numel()) throw DimensionError("take: index out of range");
    out[i] = x[index[i]];
  }
  return make_result<T>(std::move(shape), std::move(out), {x}, [index = std::move(index)](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < index.size(); ++i) p.grad[index[i]] += self.grad[i];
  });
}

template <Scalar T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto sp = detail_ops::split_axis(x.shape(), axis);
  if (len == 0 || start + len > sp.n) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range on axis of length " + std::to_string(sp.n));
  }
  Shape s = x.shape();
  s[axis] = len;
  std::vector<T> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().data() + (o * sp.n + start) * sp.inner, len * sp.inner,
                out.data() + o * len * sp.inner);
  return make_result<T>(std::move(s), std::move(out), {x}, [sp, start, len](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < len * sp.inner; ++i)
        p.grad[(o * sp.n + start) * sp.inner + i] += self.grad[o * len * sp.inner + i];
  });
}

// x[i] along axis 0, with that axis dropped.
template <Scalar T>
Tensor<T> select0(const Tensor<T>& x, std::size_t i) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return reshape(slice(x, 0, i, 1), s.empty() ? Shape{1} : s);
}

template <Scalar T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("concat of an empty list");
  Shape s = xs[0].shape();
  if (axis >= s.size()) throw DimensionError("concat axis out of range for " + shape_str(s));
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape a = x.shape();
    if (a.size() != s.size()) throw DimensionError("concat rank mismatch");
    a[axis] = s[axis];
    if (a != s) throw DimensionError("concat: " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
    total += x.dim(axis);
  }
  s[axis] = total;
  const auto sp = detail_ops::split_axis(s, axis);
  std::vector<T> out(shape_numel(s));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& x : xs) {
    offsets.push_back(at);
    const std::size_t len = x.dim(axis);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data().data() + o * len * sp.inner, len * sp.inner,
                  out.data() + (o * total + at) * sp.inner);
    at += len;
  }
  return make_result<T>(std::move(s), std::move(out), xs, [sp, total, offsets](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t len = p.data.size() / (sp.outer * sp.inner);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < len * sp.inner; ++i)
          p.grad[o * len * sp.inner + i] += self.grad[(o * total + offsets[k]) * sp.inner + i];
    }
  });
}

// Stacks equal-shape tensors along a new leading axis.
template <Scalar T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("stack of an empty list");
  std::vector<Tensor<T>> lifted;
  lifted.reserve(xs.size());
  for (const auto& x : xs) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    lifted.push_back(reshape(x, s));
  }
  return concat(lifted, 0);
}

// index_select along `axis`.
template <Scalar T>
Tensor<T> gather(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& idx) {
  const auto sp = detail_ops::split_axis(x.shape(), axis);
  if (idx.empty()) throw DimensionError("gather with an empty index list");
  for (auto i : idx) {
    if (i >= sp.n) {
      throw DimensionError("gather index " + std::to_string(i) + " out of range for axis of length " +
                           std::to_string(sp.n));
    }
  }
  Shape s = x.shape();
  s[axis] = idx.size();
  const std::size_t m = idx.size();
  std::vector<T> out(sp.outer * m * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(x.data().data() + (o * sp.n + idx[r]) * sp.inner, sp.inner,
                  out.data() + (o * m + r) * sp.inner);
  return make_result<T>(std::move(s), std::move(out), {x}, [sp, idx, m](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < sp.inner; ++i)
          p.grad[(o * sp.n + idx[r]) * sp.inner + i] += self.grad[(o * m + r) * sp.inner + i];
  });
}

// Builds a [total x d] sequence: row positions[i] takes src row i, every other
// row takes `fill`. Positions must be distinct.
template <Scalar T>
Tensor<T> scatter_rows(const Tensor<T>& src, const std::vector<std::size_t>& positions, const Tensor<T>& fill,
                       std::size_t total) {
  if (src.rank() != 2 || src.dim(0) != positions.size() || fill.numel() != src.dim(1)) {
    throw DimensionError("scatter_rows: src " + shape_str(src.shape()) + " with " +
                         std::to_string(positions.size()) + " positions and fill " + shape_str(fill.shape()));
  }
  const std::size_t d = src.dim(1);
  std::vector<std::ptrdiff_t> owner(total, -1);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= total) throw PlanError("scatter position out of range");
    if (owner[positions[i]] != -1) {
      throw PlanError("scatter position " + std::to_string(positions[i]) + " assigned twice");
    }
    owner[positions[i]] = static_cast<std::ptrdiff_t>(i);
  }
  std::vector<T> out(total * d);
  for (std::size_t r = 0; r < total; ++r) {
    const T* from = owner[r] >= 0 ? src.data().data() + owner[r] * d : fill.data().data();
    std::copy_n(from, d, out.data() + r * d);
  }
  return make_result<T>({total, d}, std::move(out), {src, fill}, [owner = std::move(owner), d](Node<T>& self) {
    auto& ps = *self.parents[0];
    auto& pf = *self.parents[1];
    for (std::size_t r = 0; r < owner.size(); ++r) {
      const T* g = self.grad.data() + r * d;
      if (owner[r] >= 0) {
        if (ps.requires_grad)
          for (std::size_t j = 0; j < d; ++j) ps.grad[owner[r] * d + j] += g[j];
      } else if (pf.requires_grad) {
        for (std::size_t j = 0; j < d; ++j) pf.grad[j] += g[j];
      }
    }
  });
}

// Mean over one axis, which is removed (average pooling over tokens).
template <Scalar T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail_ops::split_axis(x.shape(), axis);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  if (s.empty()) s = {1};
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const T inv = T(1) / static_cast<T>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
    for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] *= inv;
  }
  return make_result<T>(std::move(s), std::move(out), {x}, [sp, inv](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i)
          p.grad[(o * sp.n + j) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
  });
}

// ---------------------------------------------------------------- fused losses

// Mean over rows of -log softmax(logits)[target].
template <Scalar T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<T> prob(n * k);
  T loss = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= k) throw ContractError("cross_entropy target out of range");
    const T* z = logits.data().data() + r * k;
    const T mx = *std::max_element(z, z + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      prob[r * k + j] = std::exp(z[j] - mx);
      s += prob[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) prob[r * k + j] /= s;
    loss += std::log(s) + mx - z[targets[r]];
  }
  loss /= static_cast<T>(n);
  return make_result<T>({1}, {loss}, {logits}, [n, k, targets, prob = std::move(prob)](Node<T>& self) {
    auto& p = *self.parents[0];
    const T g = self.grad[0] / static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < k; ++j)
        p.grad[r * k + j] += g * (prob[r * k + j] - (j == targets[r] ? T(1) : T(0)));
  });
}

// Mean over all entries of binary cross-entropy on logits (targets in [0,1]).
template <Scalar T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  if (logits.numel() != targets.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(logits.numel()) + " logits vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.numel();
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i];
    loss += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<T>(n);
  return make_result<T>({1}, {loss}, {logits}, [n, targets](Node<T>& self) {
    auto& p = *self.parents[0];
    const T g = self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T s = T(1) / (T(1) + std::exp(-p.data[i]));
      p.grad[i] += g * (s - targets[i]);
    }
  });
}

// Mean over all entries of (a - b)^2.
template <Scalar T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same_shape(a.shape(), b.shape(), "mse");
  const std::size_t n = a.numel();
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return make_result<T>({1}, {s / static_cast<T>(n)}, {a, b}, [n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T g = T(2) * self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T diff = pa.data[i] - pb.data[i];
      if (pa.requires_grad) pa.grad[i] += g * diff;
      if (pb.requires_grad) pb.grad[i] -= g * diff;
    }
  });
}

}  // namespace siamav::ops

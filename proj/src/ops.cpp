#include "caac/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace caac {

using detail::make_result;
using detail::Node;

namespace {

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (std::size_t p = 0; p < K; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (std::size_t p = 0; p < K; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
  for (std::size_t p = 0; p < K; ++p) {
    const double* a = A + p * M;
    const double* b = B + p * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

enum class Bcast { same, a_scalar, b_scalar };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (a.numel() == 1) return Bcast::a_scalar;
  if (b.numel() == 1) return Bcast::b_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Bcast kind = broadcast_kind(a, b, op);
  Shape shape = kind == Bcast::a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto A = a.data();
  const auto B = b.data();
  const std::size_t sa = kind == Bcast::a_scalar ? 0 : 1;
  const std::size_t sb = kind == Bcast::b_scalar ? 0 : 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(A[i * sa], B[i * sb]);
  return make_result(op, std::move(shape), std::move(out), {a, b}, [n, sa, sb, da, db](Node& o) {
    Node& na = *o.inputs[0];
    Node& nb = *o.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i * sa] += da(na.value[i * sa], nb.value[i * sb], o.grad[i]);
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i * sb] += db(na.value[i * sa], nb.value[i * sb], o.grad[i]);
    }
  });
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& x, F f, D d) {
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = f(X[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [d](Node& o) {
    Node& nx = *o.inputs[0];
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d(nx.value[i], o.value[i], o.grad[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data())
    if (v == 0.0) throw NumericError("div: division by zero");
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double, double g) { return g; });
}

Tensor scale(const Tensor& x, double c) {
  return unary(
      "scale", x, [c](double v) { return v * c; }, [c](double, double, double g) { return g * c; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw NumericError("log: non-positive operand");
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double, double g) { return g / v; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  const auto X = x.data();
  std::vector<double> mask(X.size());
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
    out[i] = X[i] * mask[i];
  }
  return make_result("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(M * N, 0.0);
  gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  return make_result("matmul", {M, N}, std::move(out), {a, b}, [M, N, K](Node& o) {
    Node& na = *o.inputs[0];
    Node& nb = *o.inputs[1];
    if (na.requires_grad) gemm_nt(M, K, N, o.grad.data(), nb.value.data(), na.ensure_grad().data());
    if (nb.requires_grad) gemm_tn(K, N, M, na.value.data(), o.grad.data(), nb.ensure_grad().data());
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t R = a.dim(0), C = a.dim(1);
  const auto A = a.data();
  std::vector<double> out(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[j * R + i] = A[i * C + j];
  return make_result("transpose", {C, R}, std::move(out), {a}, [R, C](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) g[i * C + j] += o.grad[j * R + i];
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  if (b.dim(0) != B || b.dim(1) != K)
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> out(B * M * N, 0.0);
  for (std::size_t i = 0; i < B; ++i)
    gemm_nn(M, N, K, a.data().data() + i * M * K, b.data().data() + i * K * N, out.data() + i * M * N);
  return make_result("bmm", {B, M, N}, std::move(out), {a, b}, [B, M, N, K](Node& o) {
    Node& na = *o.inputs[0];
    Node& nb = *o.inputs[1];
    for (std::size_t i = 0; i < B; ++i) {
      const double* g = o.grad.data() + i * M * N;
      if (na.requires_grad)
        gemm_nt(M, K, N, g, nb.value.data() + i * K * N, na.ensure_grad().data() + i * M * K);
      if (nb.requires_grad)
        gemm_tn(K, N, M, na.value.data() + i * M * K, g, nb.ensure_grad().data() + i * K * N);
    }
  });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm_nt");
  require_rank(b, 3, "bmm_nt");
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
  if (b.dim(0) != B || b.dim(2) != K)
    throw ShapeError("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> out(B * M * N, 0.0);
  for (std::size_t i = 0; i < B; ++i)
    gemm_nt(M, N, K, a.data().data() + i * M * K, b.data().data() + i * N * K, out.data() + i * M * N);
  return make_result("bmm_nt", {B, M, N}, std::move(out), {a, b}, [B, M, N, K](Node& o) {
    Node& na = *o.inputs[0];
    Node& nb = *o.inputs[1];
    for (std::size_t i = 0; i < B; ++i) {
      const double* g = o.grad.data() + i * M * N;
      if (na.requires_grad)
        gemm_nn(M, K, N, g, nb.value.data() + i * N * K, na.ensure_grad().data() + i * M * K);
      if (nb.requires_grad)
        gemm_tn(N, K, M, g, na.value.data() + i * M * K, nb.ensure_grad().data() + i * N * K);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(w, 2, "linear");
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (x.shape().back() != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  const std::size_t N = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<double> out(N * out_dim, 0.0);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < N; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  }
  gemm_nn(N, out_dim, in, x.data().data(), w.data().data(), out.data());
  std::vector<Tensor> inputs{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result("linear", std::move(shape), std::move(out), std::move(inputs),
                     [N, in, out_dim, has_bias](Node& o) {
                       Node& nx = *o.inputs[0];
                       Node& nw = *o.inputs[1];
                       if (nx.requires_grad) gemm_nt(N, in, out_dim, o.grad.data(), nw.value.data(), nx.ensure_grad().data());
                       if (nw.requires_grad) gemm_tn(in, out_dim, N, nx.value.data(), o.grad.data(), nw.ensure_grad().data());
                       if (has_bias && o.inputs[2]->requires_grad) {
                         auto& gb = o.inputs[2]->ensure_grad();
                         for (std::size_t r = 0; r < N; ++r)
                           for (std::size_t j = 0; j < out_dim; ++j) gb[j] += o.grad[r * out_dim + j];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const auto X = x.data();
  return make_result("reshape", std::move(shape), std::vector<double>(X.begin(), X.end()), {x}, [](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis, "softmax");
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, X[base + k * sp.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(X[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= s;
    }
  return make_result("softmax", x.shape(), std::move(out), {x}, [sp](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t oo = 0; oo < sp.outer; ++oo)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = oo * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += o.grad[base + k * sp.inner] * o.value[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          g[j] += o.value[j] * (o.grad[j] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis, "log_softmax");
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, X[base + k * sp.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) s += std::exp(X[base + k * sp.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = X[base + k * sp.inner] - lse;
    }
  return make_result("log_softmax", x.shape(), std::move(out), {x}, [sp](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t oo = 0; oo < sp.outer; ++oo)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = oo * sp.n * sp.inner + i;
        double total = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) total += o.grad[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          g[j] += o.grad[j] - std::exp(o.value[j]) * total;
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm: normalized axis must have length >= 2");
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias length mismatch");
  const std::size_t rows = x.numel() / d;
  const auto X = x.data();
  const auto G = gain.data();
  const auto Bv = bias.data();
  std::vector<double> xhat(X.size()), rstd(rows), out(X.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * G[j] + Bv[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                     [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& o) {
                       Node& nx = *o.inputs[0];
                       Node& ng = *o.inputs[1];
                       Node& nb = *o.inputs[2];
                       if (ng.requires_grad) {
                         auto& gg = ng.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += o.grad[r * d + j] * xhat[r * d + j];
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += o.grad[r * d + j];
                       }
                       if (nx.requires_grad) {
                         auto& gx = nx.ensure_grad();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = o.grad[r * d + j] * ng.value[j];
                             m1 += dxh;
                             m2 += dxh * xhat[r * d + j];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = o.grad[r * d + j] * ng.value[j];
                             gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result("sum", {1}, {s}, {x}, [](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result("mean", {1}, {s / n}, {x}, [n](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (auto& v : g) v += o.grad[0] / n;
  });
}

Tensor diagonal(const Tensor& x) {
  require_rank(x, 2, "diagonal");
  const std::size_t n = x.dim(0);
  if (x.dim(1) != n) throw ShapeError("diagonal: matrix is not square: " + shape_str(x.shape()));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i * n + i];
  return make_result("diagonal", {n}, std::move(out), {x}, [n](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += o.grad[i];
  });
}

Tensor normalize_rows(const Tensor& x) {
  require_rank(x, 2, "normalize_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto X = x.data();
  std::vector<double> norms(n), out(X.size());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += X[i * d + j] * X[i * d + j];
    norms[i] = std::sqrt(s);
    if (norms[i] < 1e-12) throw NumericError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = X[i * d + j] / norms[i];
  }
  return make_result("normalize_rows", x.shape(), std::move(out), {x}, [n, d, norms = std::move(norms)](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += o.value[i * d + j] * o.grad[i * d + j];
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (o.grad[i * d + j] - o.value[i * d + j] * dot) / norms[i];
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& id_shape) {
  require_rank(table, 2, "embedding");
  if (shape_numel(id_shape) != ids.size()) throw ShapeError("embedding: id count does not match id shape");
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(V));
  const auto T = table.data();
  std::vector<double> out(idv.size() * d);
  for (std::size_t i = 0; i < idv.size(); ++i)
    std::copy_n(T.begin() + static_cast<std::ptrdiff_t>(idv[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  Shape shape = id_shape;
  shape.push_back(d);
  return make_result("embedding", std::move(shape), std::move(out), {table}, [d, idv = std::move(idv)](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += o.grad[i * d + j];
  });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 3, "split_heads");
  const std::size_t b = x.dim(0), m = x.dim(1), D = x.dim(2);
  if (heads == 0 || D % heads != 0) throw ShapeError("split_heads: model dim not divisible by head count");
  const std::size_t dh = D / heads;
  const auto X = x.data();
  std::vector<double> out(X.size());
  auto idx = [=](std::size_t bi, std::size_t t, std::size_t h, std::size_t j) {
    return ((bi * heads + h) * m + t) * dh + j;
  };
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < m; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) out[idx(bi, t, h, j)] = X[(bi * m + t) * D + h * dh + j];
  return make_result("split_heads", {b * heads, m, dh}, std::move(out), {x}, [=](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < m; ++t)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j) g[(bi * m + t) * D + h * dh + j] += o.grad[idx(bi, t, h, j)];
  });
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 3, "merge_heads");
  const std::size_t bh = x.dim(0), m = x.dim(1), dh = x.dim(2);
  if (heads == 0 || bh % heads != 0) throw ShapeError("merge_heads: batch not divisible by head count");
  const std::size_t b = bh / heads, D = dh * heads;
  const auto X = x.data();
  std::vector<double> out(X.size());
  auto idx = [=](std::size_t bi, std::size_t t, std::size_t h, std::size_t j) {
    return ((bi * heads + h) * m + t) * dh + j;
  };
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < m; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < dh; ++j) out[(bi * m + t) * D + h * dh + j] = X[idx(bi, t, h, j)];
  return make_result("merge_heads", {b, m, D}, std::move(out), {x}, [=](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < m; ++t)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j) g[idx(bi, t, h, j)] += o.grad[(bi * m + t) * D + h * dh + j];
  });
}

namespace {

struct ConvGeom {
  std::size_t B, Ci, H, W, Co, K, Ho, Wo, stride, pad;
  // Output columns ox for which input column ox*stride + kx - pad is inside [0, W).
  std::pair<std::size_t, std::size_t> col_range(std::size_t kx) const {
    const long s = static_cast<long>(stride), p = static_cast<long>(pad), k = static_cast<long>(kx);
    long lo = p > k ? (p - k + s - 1) / s : 0;
    long hi = (static_cast<long>(W) - 1 + p - k);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min(hi, static_cast<long>(Wo) - 1);
    if (hi < lo) return {1, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0, stride, pad};
  if (w.dim(1) != g.Ci || w.dim(3) != g.K)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
  if (g.H + 2 * pad < g.K || g.W + 2 * pad < g.K) throw ShapeError("conv2d: input smaller than kernel");
  if (bias.defined() && bias.numel() != g.Co) throw ShapeError("conv2d: bias length mismatch");
  g.Ho = (g.H + 2 * pad - g.K) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.K) / stride + 1;

  const auto X = x.data();
  const auto Wt = w.data();
  std::vector<double> out(g.B * g.Co * g.Ho * g.Wo, 0.0);
  for (std::size_t b = 0; b < g.B; ++b)
    for (std::size_t co = 0; co < g.Co; ++co) {
      double* op = out.data() + (b * g.Co + co) * g.Ho * g.Wo;
      if (bias.defined()) std::fill(op, op + g.Ho * g.Wo, bias.data()[co]);
      for (std::size_t ci = 0; ci < g.Ci; ++ci) {
        const double* xp = X.data() + (b * g.Ci + ci) * g.H * g.W;
        for (std::size_t ky = 0; ky < g.K; ++ky)
          for (std::size_t kx = 0; kx < g.K; ++kx) {
            const double wv = Wt[((co * g.Ci + ci) * g.K + ky) * g.K + kx];
            const auto [lo, hi] = g.col_range(kx);
            if (lo > hi) continue;
            for (std::size_t oy = 0; oy < g.Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
              const double* xr = xp + (static_cast<std::size_t>(iy) * g.W + lo * stride + kx - pad);
              double* orow = op + oy * g.Wo + lo;
              for (std::size_t n = 0; n <= hi - lo; ++n) orow[n] += wv * xr[n * stride];
            }
          }
      }
    }

  std::vector<Tensor> inputs{x, w};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result("conv2d", {g.B, g.Co, g.Ho, g.Wo}, std::move(out), std::move(inputs), [g, has_bias](Node& o) {
    Node& nx = *o.inputs[0];
    Node& nw = *o.inputs[1];
    const std::size_t s = g.stride;
    double* gx = nx.requires_grad ? nx.ensure_grad().data() : nullptr;
    double* gw = nw.requires_grad ? nw.ensure_grad().data() : nullptr;
    for (std::size_t b = 0; b < g.B; ++b)
      for (std::size_t co = 0; co < g.Co; ++co) {
        const double* gp = o.grad.data() + (b * g.Co + co) * g.Ho * g.Wo;
        for (std::size_t ci = 0; ci < g.Ci; ++ci) {
          const double* xp = nx.value.data() + (b * g.Ci + ci) * g.H * g.W;
          double* gxp = gx ? gx + (b * g.Ci + ci) * g.H * g.W : nullptr;
          for (std::size_t ky = 0; ky < g.K; ++ky)
            for (std::size_t kx = 0; kx < g.K; ++kx) {
              const std::size_t widx = ((co * g.Ci + ci) * g.K + ky) * g.K + kx;
              const double wv = nw.value[widx];
              const auto [lo, hi] = g.col_range(kx);
              if (lo > hi) continue;
              double acc = 0.0;
              for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(g.pad);
                if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
                const std::size_t roff = static_cast<std::size_t>(iy) * g.W + lo * s + kx - g.pad;
                const double* grow = gp + oy * g.Wo + lo;
                const double* xr = xp + roff;
                const std::size_t cnt = hi - lo + 1;
                for (std::size_t n = 0; n < cnt; ++n) acc += grow[n] * xr[n * s];
                if (gxp) {
                  double* gr = gxp + roff;
                  for (std::size_t n = 0; n < cnt; ++n) gr[n * s] += wv * grow[n];
                }
              }
              if (gw) gw[widx] += acc;
            }
        }
      }
    if (has_bias && o.inputs[2]->requires_grad) {
      auto& gb = o.inputs[2]->ensure_grad();
      for (std::size_t b = 0; b < g.B; ++b)
        for (std::size_t co = 0; co < g.Co; ++co) {
          const double* gp = o.grad.data() + (b * g.Co + co) * g.Ho * g.Wo;
          double acc = 0.0;
          for (std::size_t i = 0; i < g.Ho * g.Wo; ++i) acc += gp[i];
          gb[co] += acc;
        }
    }
  });
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "max_pool2d");
  if (kernel == 0 || stride == 0 || pad >= kernel) throw ShapeError("max_pool2d: invalid window");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H + 2 * pad < kernel || W + 2 * pad < kernel) throw ShapeError("max_pool2d: input smaller than window");
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kernel) / stride + 1;
  const auto X = x.data();
  std::vector<double> out(B * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    const double* xp = X.data() + plane * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const std::size_t i = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
            if (xp[i] > best) {
              best = xp[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (plane * Ho + oy) * Wo + ox;
        out[o] = best;
        arg[o] = plane * H * W + best_i;
      }
  }
  return make_result("max_pool2d", {B, C, Ho, Wo}, std::move(out), {x}, [arg = std::move(arg)](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += o.grad[i];
  });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum, double eps) {
  require_rank(x, 4, "batch_norm2d");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gain.numel() != C || bias.numel() != C || running_mean.numel() != C || running_var.numel() != C)
    throw ShapeError("batch_norm2d: channel count mismatch");
  const std::size_t N = B * HW;
  const auto X = x.data();
  const auto G = gain.data();
  const auto Bi = bias.data();
  std::vector<double> mu(C), rstd(C);
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = X.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      mu[c] = s / static_cast<double>(N);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = X.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - mu[c]) * (p[i] - mu[c]);
      }
      const double var = v / static_cast<double>(N);
      rstd[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = N > 1 ? v / static_cast<double>(N - 1) : var;
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      rstd[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
    }
  }
  std::vector<double> xhat(X.size()), out(X.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[off + i] = (X[off + i] - mu[c]) * rstd[c];
        out[off + i] = xhat[off + i] * G[c] + Bi[c];
      }
    }
  return make_result("batch_norm2d", x.shape(), std::move(out), {x, gain, bias},
                     [B, C, HW, N, training, xhat = std::move(xhat), rstd = std::move(rstd)](Node& o) {
                       Node& nx = *o.inputs[0];
                       Node& ng = *o.inputs[1];
                       Node& nb = *o.inputs[2];
                       std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t off = (b * C + c) * HW;
                           for (std::size_t i = 0; i < HW; ++i) {
                             sum_g[c] += o.grad[off + i];
                             sum_gx[c] += o.grad[off + i] * xhat[off + i];
                           }
                         }
                       if (ng.requires_grad) {
                         auto& gg = ng.ensure_grad();
                         for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
                       }
                       if (!nx.requires_grad) return;
                       auto& gx = nx.ensure_grad();
                       const double n = static_cast<double>(N);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t off = (b * C + c) * HW;
                           const double gam = ng.value[c];
                           for (std::size_t i = 0; i < HW; ++i) {
                             if (training)
                               gx[off + i] += gam * rstd[c] *
                                              (o.grad[off + i] - sum_g[c] / n - xhat[off + i] * sum_gx[c] / n);
                             else
                               gx[off + i] += gam * rstd[c] * o.grad[off + i];
                           }
                         }
                     });
}

Tensor masked_time_mean(const Tensor& x, std::span<const std::size_t> valid_t) {
  require_rank(x, 4, "masked_time_mean");
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), F = x.dim(3);
  if (valid_t.size() != B) throw ShapeError("masked_time_mean: one valid length per sample required");
  std::vector<std::size_t> valid(valid_t.begin(), valid_t.end());
  for (auto v : valid)
    if (v == 0 || v > T) throw ShapeError("masked_time_mean: valid length outside [1, T]");
  const auto X = x.data();
  std::vector<double> out(B * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = X.data() + (b * C + c) * T * F;
      double s = 0.0;
      for (std::size_t i = 0; i < valid[b] * F; ++i) s += p[i];
      out[b * C + c] = s / static_cast<double>(valid[b] * F);
    }
  return make_result("masked_time_mean", {B, C}, std::move(out), {x}, [=, valid = std::move(valid)](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double share = o.grad[b * C + c] / static_cast<double>(valid[b] * F);
        double* p = g.data() + (b * C + c) * T * F;
        for (std::size_t i = 0; i < valid[b] * F; ++i) p[i] += share;
      }
  });
}

Tensor masked_seq_mean(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_rank(x, 3, "masked_seq_mean");
  const std::size_t B = x.dim(0), m = x.dim(1), d = x.dim(2);
  if (mask.size() != B * m) throw ShapeError("masked_seq_mean: mask size mismatch");
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  std::vector<double> counts(B, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < m; ++t) counts[b] += mk[b * m + t] ? 1.0 : 0.0;
  for (double c : counts)
    if (c == 0.0) throw ShapeError("masked_seq_mean: a row has no unmasked position");
  const auto X = x.data();
  std::vector<double> out(B * d, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < m; ++t)
      if (mk[b * m + t])
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] += X[(b * m + t) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= counts[b];
  }
  return make_result("masked_seq_mean", {B, d}, std::move(out), {x},
                     [=, mk = std::move(mk), counts = std::move(counts)](Node& o) {
                       auto& g = o.inputs[0]->ensure_grad();
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t t = 0; t < m; ++t)
                           if (mk[b * m + t])
                             for (std::size_t j = 0; j < d; ++j) g[(b * m + t) * d + j] += o.grad[b * d + j] / counts[b];
                     });
}

Tensor smoothed_nll(const Tensor& logp, std::span<const int> targets, double eps) {
  require_rank(logp, 2, "smoothed_nll");
  if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("smoothed_nll: smoothing must lie in [0, 1)");
  const std::size_t N = logp.dim(0), V = logp.dim(1);
  if (targets.size() != N) throw ShapeError("smoothed_nll: one target per row required");
  std::vector<int> tg(targets.begin(), targets.end());
  std::size_t M = 0;
  for (int t : tg) {
    if (t >= static_cast<int>(V)) throw std::out_of_range("smoothed_nll: target id outside vocabulary");
    if (t >= 0) ++M;
  }
  if (M == 0) throw ShapeError("smoothed_nll: every position is padding");
  const auto L = logp.data();
  const double inv_v = 1.0 / static_cast<double>(V);
  double total = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    if (tg[r] < 0) continue;
    const double* row = L.data() + r * V;
    double uniform = 0.0;
    for (std::size_t v = 0; v < V; ++v) uniform -= row[v];
    total += (1.0 - eps) * -row[tg[r]] + eps * uniform * inv_v;
  }
  const double m = static_cast<double>(M);
  return make_result("smoothed_nll", {1}, {total / m}, {logp}, [=, tg = std::move(tg)](Node& o) {
    auto& g = o.inputs[0]->ensure_grad();
    const double go = o.grad[0] / m;
    for (std::size_t r = 0; r < N; ++r) {
      if (tg[r] < 0) continue;
      double* row = g.data() + r * V;
      for (std::size_t v = 0; v < V; ++v) row[v] -= go * eps * inv_v;
      row[tg[r]] -= go * (1.0 - eps);
    }
  });
}

}  // namespace caac

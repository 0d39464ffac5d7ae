#include <algorithm>
#include <cmath>
#include <numbers>

#include "cyformer/errors.hpp"
#include "cyformer/kernels.hpp"
#include "cyformer/tensor.hpp"

namespace cyformer {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

// Grad buffer of `t` if it takes part in differentiation, else an empty span.
template <typename T>
std::span<T> grad_target(const Tensor<T>& t) {
  return t.requires_grad() ? t.ensure_grad() : std::span<T>{};
}

template <typename T>
void record(const char* name, typename Tape<T>::BackwardRule rule) {
  active_tape<T>()->record(name, std::move(rule));
}

// Element offset of each output index in the permuted-from tensor.
std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& axes) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[axes[i]];
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[axes[i]];
    map[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

} // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool rec = detail::needs_record<T>({&a, &b});
  auto out = Tensor<T>::zeros({m, n}, rec);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, 1, false);
  if (rec) {
    record<T>("matmul", [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      if (auto da = grad_target(a); !da.empty())
        kernels::gemm_nt(dy, b.data().data(), da.data(), m, n, k, 1, true);
      if (auto db = grad_target(b); !db.empty())
        kernels::gemm_tn(a.data().data(), dy, db.data(), k, m, n, 1, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok)
    throw DimensionError(std::string("bmm: cannot multiply ") + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const bool rec = detail::needs_record<T>({&a, &b});
  auto out = Tensor<T>::zeros({g, m, n}, rec);
  if (transpose_b)
    kernels::gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n, g, false);
  else
    kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, g, false);
  if (rec) {
    record<T>("bmm", [a, b, out, g, m, k, n, transpose_b]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      auto da = grad_target(a);
      auto db = grad_target(b);
      if (transpose_b) {
        if (!da.empty()) kernels::gemm_nn(dy, b.data().data(), da.data(), m, n, k, g, true);
        if (!db.empty()) kernels::gemm_tn(dy, a.data().data(), db.data(), n, m, k, g, true);
      } else {
        if (!da.empty()) kernels::gemm_nt(dy, b.data().data(), da.data(), m, n, k, g, true);
        if (!db.empty()) kernels::gemm_tn(a.data().data(), dy, db.data(), k, m, n, g, true);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  require_defined(b, "linear");
  if (w.rank() != 2 || b.rank() != 1 || b.dim(0) != w.dim(1) || x.shape().back() != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()) + " and bias " + shape_str(b.shape()));
  const std::size_t in = w.dim(0), outd = w.dim(1);
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outd;
  const bool rec = detail::needs_record<T>({&x, &w, &b});
  auto out = Tensor<T>::zeros(shape, rec);
  T* y = out.data().data();
  kernels::gemm_nn(x.data().data(), w.data().data(), y, rows, in, outd, 1, false);
  const T* bias = b.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < outd; ++j) y[r * outd + j] += bias[j];
  if (rec) {
    record<T>("linear", [x, w, b, out, rows, in, outd]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      if (auto dx = grad_target(x); !dx.empty())
        kernels::gemm_nt(dy, w.data().data(), dx.data(), rows, outd, in, 1, true);
      if (auto dw = grad_target(w); !dw.empty())
        kernels::gemm_tn(x.data().data(), dy, dw.data(), in, rows, outd, 1, true);
      if (auto db = grad_target(b); !db.empty())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < outd; ++j) db[j] += dy[r * outd + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  const bool rec = detail::needs_record<T>({&a, &b});
  auto out = Tensor<T>::zeros(a.shape(), rec);
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + x1[i];
  if (rec) {
    record<T>("add", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      if (auto da = grad_target(a); !da.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      if (auto db = grad_target(b); !db.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  const bool rec = detail::needs_record<T>({&a, &b});
  auto out = Tensor<T>::zeros(a.shape(), rec);
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] - x1[i];
  if (rec) {
    record<T>("sub", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      if (auto da = grad_target(a); !da.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      if (auto db = grad_target(b); !db.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  const bool rec = detail::needs_record<T>({&a, &b});
  auto out = Tensor<T>::zeros(a.shape(), rec);
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] * x1[i];
  if (rec) {
    record<T>("mul", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto av = a.data();
      auto bv = b.data();
      if (auto da = grad_target(a); !da.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
      if (auto db = grad_target(b); !db.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  require_defined(x, "scale");
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::zeros(x.shape(), rec);
  auto y = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factor;
  if (rec) {
    record<T>("scale", [x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  require_defined(x, "relu");
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::zeros(x.shape(), rec);
  auto y = out.data();
  auto xv = x.data();
  if (auto* monitor = KinkMonitor::active())
    for (auto v : xv) monitor->observe(static_cast<double>(v));
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (rec) {
    record<T>("relu", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto xv = x.data();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (xv[i] > T(0)) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  require_defined(x, "gelu");
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::zeros(x.shape(), rec);
  auto y = out.data();
  auto xv = x.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  if (rec) {
    record<T>("gelu", [x, out, inv_sqrt2]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto xv = x.data();
      auto dx = x.ensure_grad();
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
        dx[i] += dy[i] * (cdf + xv[i] * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
  return act == Activation::relu ? relu(x) : gelu(x);
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  require_defined(x, "add_broadcast");
  require_defined(y, "add_broadcast");
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin()))
    throw DimensionError("add_broadcast: " + shape_str(ys) + " is not a suffix of " +
                         shape_str(xs));
  const std::size_t inner = y.size();
  const std::size_t outer = x.size() / inner;
  const bool rec = detail::needs_record<T>({&x, &y});
  auto out = Tensor<T>::zeros(xs, rec);
  auto o = out.data();
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t j = 0; j < inner; ++j) o[r * inner + j] = xv[r * inner + j] + yv[j];
  if (rec) {
    record<T>("add_broadcast", [x, y, out, outer, inner]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      if (auto dx = grad_target(x); !dx.empty())
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      if (auto dyb = grad_target(y); !dyb.empty())
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t j = 0; j < inner; ++j) dyb[j] += dy[r * inner + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> expand(const Tensor<T>& x, std::size_t n) {
  require_defined(x, "expand");
  if (n == 0) throw DimensionError("expand: repeat count must be positive");
  Shape shape = x.shape();
  shape.insert(shape.begin(), n);
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::zeros(shape, rec);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t r = 0; r < n; ++r) std::copy(xv.begin(), xv.end(), o.begin() + r * xv.size());
  if (rec) {
    record<T>("expand", [x, out, n]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      const std::size_t inner = dx.size();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < inner; ++j) dx[j] += dy[r * inner + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  require_defined(x, "softmax_lastdim");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::zeros(x.shape(), rec);
  kernels::softmax_rows(x.data().data(), out.data().data(), rows, n);
  if (rec) {
    record<T>("softmax_lastdim", [x, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      std::vector<T> tmp(out.size());
      kernels::softmax_rows_backward(out.data().data(), out.grad().data(), tmp.data(), rows, n);
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match feature width of " +
                         shape_str(x.shape()));
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  const bool rec = detail::needs_record<T>({&x, &gain, &bias});
  auto out = Tensor<T>::zeros(x.shape(), rec);
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  kernels::layer_norm_rows(x.data().data(), gain.data().data(), bias.data().data(),
                           out.data().data(), stats->data(), stats->data() + rows, rows, d, eps);
  if (rec) {
    record<T>("layer_norm", [x, gain, bias, out, stats, rows, d]() mutable {
      if (!out.has_grad()) return;
      const T* dy = out.grad().data();
      const T* mean = stats->data();
      const T* rstd = stats->data() + rows;
      const T* xv = x.data().data();
      if (x.requires_grad()) {
        std::vector<T> tmp(x.size());
        kernels::layer_norm_rows_backward(xv, gain.data().data(), mean, rstd, dy, tmp.data(),
                                          rows, d);
        auto dx = x.ensure_grad();
        for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
      }
      auto dg = grad_target(gain);
      auto db = grad_target(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
          const T g = dy[r * d + j];
          if (!dg.empty()) dg[j] += g * (xv[r * d + j] - mean[r]) * rstd[r];
          if (!db.empty()) db[j] += g;
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()),
                             rec);
  if (rec) {
    record<T>("reshape", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const std::size_t r = x.rank();
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  bool valid = axes.size() == r;
  for (std::size_t i = 0; valid && i < r; ++i) valid = sorted[i] == i;
  if (!valid) throw DimensionError("permute: axes are not a permutation of " + shape_str(x.shape()));
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = x.dim(axes[i]);
  const bool rec = detail::needs_record<T>({&x});
  auto out = Tensor<T>::zeros(shape, rec);
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(x.shape(), axes));
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[(*map)[i]];
  if (rec) {
    record<T>("permute", [x, out, map]() mutable {
      if (!out.has_grad()) return;
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[(*map)[i]] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  const bool rec = detail::needs_record<T>({&x});
  T s = 0;
  for (auto v : x.data()) s += v;
  auto out = Tensor<T>::from({1}, {s}, rec);
  if (rec) {
    record<T>("sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& v : x.ensure_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x, "mean");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

#define CYFORMER_INSTANTIATE(T)                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                          \
  template Tensor<T> relu(const Tensor<T>&);                                              \
  template Tensor<T> gelu(const Tensor<T>&);                                              \
  template Tensor<T> activate(const Tensor<T>&, Activation);                              \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> expand(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                    \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);          \
  template Tensor<T> sum(const Tensor<T>&);                                               \
  template Tensor<T> mean(const Tensor<T>&);

CYFORMER_INSTANTIATE(float)
CYFORMER_INSTANTIATE(double)

#undef CYFORMER_INSTANTIATE

} // namespace cyformer

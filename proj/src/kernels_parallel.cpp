#include "cyformer/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>

namespace cyformer::kernels {

namespace parallel {

// Loops run over a flattened (batch, row) index so small-batch / many-row and
// many-batch / few-row shapes both expose enough work.

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  const auto total = static_cast<std::int64_t>(batch * m);
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < total; ++row) {
    const std::size_t g = static_cast<std::size_t>(row) / m;
    const std::size_t i = static_cast<std::size_t>(row) % m;
    const T* arow = a + g * m * k + i * k;
    const T* bg = b + g * k * n;
    T* crow = c + g * m * n + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = bg + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  const auto total = static_cast<std::int64_t>(batch * m);
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < total; ++row) {
    const std::size_t g = static_cast<std::size_t>(row) / m;
    const std::size_t i = static_cast<std::size_t>(row) % m;
    const T* arow = a + g * m * k + i * k;
    const T* bg = b + g * n * k;
    T* crow = c + g * m * n + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = bg + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  const auto total = static_cast<std::int64_t>(batch * m);
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < total; ++row) {
    const std::size_t g = static_cast<std::size_t>(row) / m;
    const std::size_t i = static_cast<std::size_t>(row) % m;
    const T* ag = a + g * k * m;
    const T* bg = b + g * k * n;
    T* crow = c + g * m * n + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ag[p * m + i];
      const T* brow = bg + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n) {
  const auto total = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < total; ++r) {
    const T* xr = x + r * n;
    T* yr = y + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
  }
}

template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t n) {
  const auto total = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < total; ++r) {
    const T* yr = y + r * n;
    const T* dyr = dy + r * n;
    T* dxr = dx + r * n;
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * dyr[j];
    for (std::size_t j = 0; j < n; ++j) dxr[j] = yr[j] * (dyr[j] - dot);
  }
}

template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t d, T eps) {
  const auto total = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < total; ++r) {
    const T* xr = x + r * d;
    T* yr = y + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <typename T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd,
                              const T* dy, T* dx, std::size_t rows, std::size_t d) {
  const auto total = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < total; ++r) {
    const T* xr = x + r * d;
    const T* dyr = dy + r * d;
    T* dxr = dx + r * d;
    T mean_g = 0;
    T mean_gx = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      const T g = dyr[j] * gain[j];
      mean_g += g;
      mean_gx += g * xhat;
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      dxr[j] = rstd[r] * (dyr[j] * gain[j] - mean_g - xhat * mean_gx);
    }
  }
}

} // namespace parallel

namespace {
std::atomic<bool> g_parallel{true};
std::atomic<std::uint64_t> g_macs{0};

bool use_parallel(std::size_t work) { return g_parallel.load() && work >= kParallelThreshold; }
} // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }
std::uint64_t gemm_mac_count() { return g_macs.load(std::memory_order_relaxed); }
void reset_gemm_mac_count() { g_macs.store(0, std::memory_order_relaxed); }

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  g_macs.fetch_add(batch * m * k * n, std::memory_order_relaxed);
  if (use_parallel(batch * m * k * n))
    parallel::gemm_nn(a, b, c, m, k, n, batch, accumulate);
  else
    serial::gemm_nn(a, b, c, m, k, n, batch, accumulate);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  g_macs.fetch_add(batch * m * k * n, std::memory_order_relaxed);
  if (use_parallel(batch * m * k * n))
    parallel::gemm_nt(a, b, c, m, k, n, batch, accumulate);
  else
    serial::gemm_nt(a, b, c, m, k, n, batch, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  g_macs.fetch_add(batch * m * k * n, std::memory_order_relaxed);
  if (use_parallel(batch * m * k * n))
    parallel::gemm_tn(a, b, c, m, k, n, batch, accumulate);
  else
    serial::gemm_tn(a, b, c, m, k, n, batch, accumulate);
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n) {
  if (use_parallel(rows * n))
    parallel::softmax_rows(x, y, rows, n);
  else
    serial::softmax_rows(x, y, rows, n);
}

template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t n) {
  if (use_parallel(rows * n))
    parallel::softmax_rows_backward(y, dy, dx, rows, n);
  else
    serial::softmax_rows_backward(y, dy, dx, rows, n);
}

template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t d, T eps) {
  if (use_parallel(rows * d))
    parallel::layer_norm_rows(x, gain, bias, y, mean, rstd, rows, d, eps);
  else
    serial::layer_norm_rows(x, gain, bias, y, mean, rstd, rows, d, eps);
}

template <typename T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd,
                              const T* dy, T* dx, std::size_t rows, std::size_t d) {
  if (use_parallel(rows * d))
    parallel::layer_norm_rows_backward(x, gain, mean, rstd, dy, dx, rows, d);
  else
    serial::layer_norm_rows_backward(x, gain, mean, rstd, dy, dx, rows, d);
}

#define CYFORMER_INSTANTIATE(NS, T)                                                           \
  template void NS gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, \
                              std::size_t, bool);                                             \
  template void NS gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, \
                              std::size_t, bool);                                             \
  template void NS gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, \
                              std::size_t, bool);                                             \
  template void NS softmax_rows<T>(const T*, T*, std::size_t, std::size_t);                   \
  template void NS softmax_rows_backward<T>(const T*, const T*, T*, std::size_t,              \
                                            std::size_t);                                     \
  template void NS layer_norm_rows<T>(const T*, const T*, const T*, T*, T*, T*, std::size_t,  \
                                      std::size_t, T);                                        \
  template void NS layer_norm_rows_backward<T>(const T*, const T*, const T*, const T*,        \
                                               const T*, T*, std::size_t, std::size_t);

CYFORMER_INSTANTIATE(parallel::, float)
CYFORMER_INSTANTIATE(parallel::, double)
CYFORMER_INSTANTIATE(, float)
CYFORMER_INSTANTIATE(, double)

#undef CYFORMER_INSTANTIATE

} // namespace cyformer::kernels

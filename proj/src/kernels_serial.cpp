#include "cyformer/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace cyformer::kernels::serial {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  for (std::size_t g = 0; g < batch; ++g) {
    const T* ag = a + g * m * k;
    const T* bg = b + g * k * n;
    T* cg = c + g * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = cg + i * n;
      if (!accumulate) std::fill(crow, crow + n, T(0));
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ag[i * k + p];
        const T* brow = bg + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  for (std::size_t g = 0; g < batch; ++g) {
    const T* ag = a + g * m * k;
    const T* bg = b + g * n * k;
    T* cg = c + g * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = ag + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = bg + j * k;
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        cg[i * n + j] = accumulate ? cg[i * n + j] + s : s;
      }
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate) {
  for (std::size_t g = 0; g < batch; ++g) {
    const T* ag = a + g * k * m;
    const T* bg = b + g * k * n;
    T* cg = c + g * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = cg + i * n;
      if (!accumulate) std::fill(crow, crow + n, T(0));
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ag[p * m + i];
        const T* brow = bg + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
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
  for (std::size_t r = 0; r < rows; ++r) {
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
  for (std::size_t r = 0; r < rows; ++r) {
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
  for (std::size_t r = 0; r < rows; ++r) {
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

#define CYFORMER_INSTANTIATE(T)                                                               \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t,     \
                           std::size_t, bool);                                                \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t,     \
                           std::size_t, bool);                                                \
  template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t,     \
                           std::size_t, bool);                                                \
  template void softmax_rows<T>(const T*, T*, std::size_t, std::size_t);                      \
  template void softmax_rows_backward<T>(const T*, const T*, T*, std::size_t, std::size_t);   \
  template void layer_norm_rows<T>(const T*, const T*, const T*, T*, T*, T*, std::size_t,     \
                                   std::size_t, T);                                           \
  template void layer_norm_rows_backward<T>(const T*, const T*, const T*, const T*, const T*, \
                                            T*, std::size_t, std::size_t);

CYFORMER_INSTANTIATE(float)
CYFORMER_INSTANTIATE(double)

#undef CYFORMER_INSTANTIATE

} // namespace cyformer::kernels::serial

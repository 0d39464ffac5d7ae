#pragma once

// Dense row-major compute kernels behind the autodiff ops.
//
// Every kernel exists twice: `serial` is the straightforward reference and
// `parallel` splits the same loops across OpenMP threads. The split is only
// ever over independent output rows, and each output element is reduced in
// the same order as in the serial loop, so both variants produce bitwise
// identical results for any thread count. The unqualified entry points pick
// one of the two at runtime.
//
// All matrices are contiguous row-major; batched calls place `batch`
// matrices back to back. With `accumulate` the result is added to C.
//
//   gemm_nn: C[m x n] (+)= A[m x k]   * B[k x n]
//   gemm_nt: C[m x n] (+)= A[m x k]   * B[n x k]^T
//   gemm_tn: C[m x n] (+)= A[k x m]^T * B[k x n]

#include <cstddef>
#include <cstdint>

namespace cyformer::kernels {

namespace serial {
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n);
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t n);

// mean / rstd receive one value per row and are consumed by the backward pass.
template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t d, T eps);
// Input gradient only; gain/bias gradients are column sums done by the caller.
template <typename T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd,
                              const T* dy, T* dx, std::size_t rows, std::size_t d);
} // namespace serial

namespace parallel {
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n);
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t n);

// mean / rstd receive one value per row and are consumed by the backward pass.
template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t d, T eps);
// Input gradient only; gain/bias gradients are column sums done by the caller.
template <typename T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd,
                              const T* dy, T* dx, std::size_t rows, std::size_t d);
} // namespace parallel

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             std::size_t batch, bool accumulate);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t n);
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t n);

// mean / rstd receive one value per row and are consumed by the backward pass.
template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t d, T eps);
// Input gradient only; gain/bias gradients are column sums done by the caller.
template <typename T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd,
                              const T* dy, T* dx, std::size_t rows, std::size_t d);

// Runtime switch for the dispatching entry points. Defaults to enabled.
void set_parallel(bool enabled);
bool parallel_enabled();

// Multiply-adds issued through the dispatching gemm entry points, process-wide.
std::uint64_t gemm_mac_count();
void reset_gemm_mac_count();

// Below this many multiply-adds a dispatching call stays serial.
inline constexpr std::size_t kParallelThreshold = std::size_t{1} << 14;

} // namespace cyformer::kernels

#pragma once

// Dense numeric kernels shared by the models and the signal chain.
//
// Every kernel exists twice: the OpenMP version in ecgad::kernels, used on
// the hot paths, and a plain serial version in ecgad::kernels::ref that is
// kept deliberately naive. Tests check the two against each other and the
// benchmark target times them side by side.

#include <cstddef>
#include <span>

namespace ecgad::kernels {

enum class Trans { No, Yes };

// C = alpha * op(A) * op(B) + beta * C, row-major, op(A) is M x K and
// op(B) is K x N. Leading dimensions are row strides of the stored arrays.
void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K, double alpha,
          const double* A, std::size_t lda, const double* B, std::size_t ldb, double beta,
          double* C, std::size_t ldc);

// Unfold one [channels x length] signal into [channels*kernel x out_len]
// patches for a stride/zero-padding convolution.
void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* cols);

// Adjoint of im2col: accumulates patches back into x (x is not cleared).
void col2im(const double* cols, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* x);

// Row-wise softmax over a [rows x cols] block, in place.
void softmax_rows(double* x, std::size_t rows, std::size_t cols);

// dx = y * (dy - sum(dy * y)) row-wise, where y is the softmax output.
void softmax_rows_backward(const double* y, const double* dy, double* dx, std::size_t rows,
                           std::size_t cols);

// Elementwise in place. The hot-path versions use the vector math library,
// accurate to a few ulp.
void exp_inplace(double* x, std::size_t n);
void sigmoid_inplace(double* x, std::size_t n);
void tanh_inplace(double* x, std::size_t n);

// Second-order-section cascade applied forward then backward over each row
// of a [rows x length] block, with odd-reflection edge padding and
// steady-state initial conditions. sos holds 6 coefficients per section
// (b0 b1 b2 a0 a1 a2, a0 == 1).
void sosfiltfilt_rows(std::span<const double> sos, double* x, std::size_t rows,
                      std::size_t length, std::size_t padlen);

namespace ref {

void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K, double alpha,
          const double* A, std::size_t lda, const double* B, std::size_t ldb, double beta,
          double* C, std::size_t ldc);
void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* cols);
void col2im(const double* cols, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* x);
void softmax_rows(double* x, std::size_t rows, std::size_t cols);
void softmax_rows_backward(const double* y, const double* dy, double* dx, std::size_t rows,
                           std::size_t cols);
void sosfiltfilt_rows(std::span<const double> sos, double* x, std::size_t rows,
                      std::size_t length, std::size_t padlen);
void exp_inplace(double* x, std::size_t n);
void sigmoid_inplace(double* x, std::size_t n);
void tanh_inplace(double* x, std::size_t n);

}  // namespace ref

// Number of OpenMP threads the parallel kernels will use.
int max_threads();

}  // namespace ecgad::kernels

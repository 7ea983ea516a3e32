#include "ecgad/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <omp.h>

namespace ecgad::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1u << 15;

void scale_rows(std::size_t M, std::size_t N, double beta, double* C, std::size_t ldc) {
    if (beta == 1.0) return;
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * ldc;
        if (beta == 0.0)
            std::fill(c, c + N, 0.0);
        else
            for (std::size_t j = 0; j < N; ++j) c[j] *= beta;
    }
}

// Steady-state DF2T state of each section for a unit step input.
std::vector<double> sos_zi(std::span<const double> sos) {
    const std::size_t n = sos.size() / 6;
    std::vector<double> zi(2 * n);
    double scale = 1.0;
    for (std::size_t s = 0; s < n; ++s) {
        const double* c = sos.data() + 6 * s;
        const double b0 = c[0], b1 = c[1], b2 = c[2], a1 = c[4], a2 = c[5];
        const double gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
        const double z1 = b2 - a2 * gain;
        const double z0 = b1 - a1 * gain + z1;
        zi[2 * s] = scale * z0;
        zi[2 * s + 1] = scale * z1;
        scale *= gain;
    }
    return zi;
}

void sosfilt_inplace(std::span<const double> sos, std::span<const double> zi, double x0,
                     double* x, std::size_t n) {
    const std::size_t sections = sos.size() / 6;
    for (std::size_t s = 0; s < sections; ++s) {
        const double* c = sos.data() + 6 * s;
        const double b0 = c[0], b1 = c[1], b2 = c[2], a1 = c[4], a2 = c[5];
        double z0 = zi[2 * s] * x0, z1 = zi[2 * s + 1] * x0;
        for (std::size_t i = 0; i < n; ++i) {
            const double in = x[i];
            const double y = b0 * in + z0;
            z0 = b1 * in - a1 * y + z1;
            z1 = b2 * in - a2 * y;
            x[i] = y;
        }
    }
}

void filtfilt_one(std::span<const double> sos, std::span<const double> zi, double* row,
                  std::size_t length, std::size_t padlen, std::vector<double>& ext) {
    const std::size_t n = length + 2 * padlen;
    ext.resize(n);
    for (std::size_t i = 0; i < padlen; ++i) {
        ext[i] = 2.0 * row[0] - row[padlen - i];
        ext[padlen + length + i] = 2.0 * row[length - 1] - row[length - 2 - i];
    }
    std::copy(row, row + length, ext.begin() + static_cast<std::ptrdiff_t>(padlen));
    sosfilt_inplace(sos, zi, ext[0], ext.data(), n);
    std::reverse(ext.begin(), ext.end());
    sosfilt_inplace(sos, zi, ext[0], ext.data(), n);
    std::reverse(ext.begin(), ext.end());
    std::copy(ext.begin() + static_cast<std::ptrdiff_t>(padlen),
              ext.begin() + static_cast<std::ptrdiff_t>(padlen + length), row);
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K, double alpha,
          const double* A, std::size_t lda, const double* B, std::size_t ldb, double beta,
          double* C, std::size_t ldc) {
    scale_rows(M, N, beta, C, ldc);
    if (M == 0 || N == 0 || K == 0 || alpha == 0.0) return;
    const bool par = M * N * K >= kParallelWork && M > 1;
    const auto m = static_cast<std::ptrdiff_t>(M);

    if (tb == Trans::Yes) {
        // Pack op(B) row-major so the inner loops run over contiguous N.
        thread_local std::vector<double> packed;
        packed.resize(K * N);
        for (std::size_t j = 0; j < N; ++j)
            for (std::size_t k = 0; k < K; ++k) packed[k * N + j] = B[j * ldb + k];
        gemm(ta, Trans::No, M, N, K, alpha, A, lda, packed.data(), N, 1.0, C, ldc);
        return;
    }
    if (ta == Trans::No) {
#pragma omp parallel for schedule(static) if (par)
        for (std::ptrdiff_t i = 0; i < m; ++i) {
            double* c = C + i * ldc;
            const double* a = A + i * lda;
            for (std::size_t k = 0; k < K; ++k) {
                const double av = alpha * a[k];
                const double* b = B + k * ldb;
#pragma omp simd
                for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    } else {
        // Rank-1 updates over k within row blocks keep A reads contiguous.
        constexpr std::ptrdiff_t block = 32;
        const std::ptrdiff_t blocks = (m + block - 1) / block;
#pragma omp parallel for schedule(static) if (par)
        for (std::ptrdiff_t ib = 0; ib < blocks; ++ib) {
            const std::ptrdiff_t i0 = ib * block, i1 = std::min(m, i0 + block);
            for (std::size_t k = 0; k < K; ++k) {
                const double* a = A + k * lda;
                const double* b = B + k * ldb;
                for (std::ptrdiff_t i = i0; i < i1; ++i) {
                    const double av = alpha * a[i];
                    if (av == 0.0) continue;
                    double* c = C + i * ldc;
#pragma omp simd
                    for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
                }
            }
        }
    }
}

void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* cols) {
    const auto rows = static_cast<std::ptrdiff_t>(channels * kernel);
#pragma omp parallel for schedule(static) if (channels * kernel * out_len >= kParallelWork)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        const std::size_t c = static_cast<std::size_t>(r) / kernel;
        const std::size_t k = static_cast<std::size_t>(r) % kernel;
        const double* src = x + c * length;
        double* dst = cols + static_cast<std::size_t>(r) * out_len;
        for (std::size_t o = 0; o < out_len; ++o) {
            const auto pos = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
            dst[o] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(length)) ? src[pos] : 0.0;
        }
    }
}

void col2im(const double* cols, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* x) {
    // Parallel over channels: each channel owns a disjoint slice of x.
    const auto ch = static_cast<std::ptrdiff_t>(channels);
#pragma omp parallel for schedule(static) if (channels * kernel * out_len >= kParallelWork)
    for (std::ptrdiff_t c = 0; c < ch; ++c) {
        double* dst = x + static_cast<std::size_t>(c) * length;
        for (std::size_t k = 0; k < kernel; ++k) {
            const double* src = cols + (static_cast<std::size_t>(c) * kernel + k) * out_len;
            for (std::size_t o = 0; o < out_len; ++o) {
                const auto pos = static_cast<std::ptrdiff_t>(o * stride + k) - static_cast<std::ptrdiff_t>(pad);
                if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(length)) dst[pos] += src[o];
            }
        }
    }
}

void softmax_rows(double* x, std::size_t rows, std::size_t cols) {
    const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
    for (std::ptrdiff_t i = 0; i < r; ++i) {
        double* row = x + static_cast<std::size_t>(i) * cols;
        const double mx = *std::max_element(row, row + cols);
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) row[j] -= mx;
        exp_inplace(row, cols);
        double sum = 0.0;
#pragma omp simd reduction(+ : sum)
        for (std::size_t j = 0; j < cols; ++j) sum += row[j];
        const double inv = 1.0 / sum;
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
    }
}

void softmax_rows_backward(const double* y, const double* dy, double* dx, std::size_t rows,
                           std::size_t cols) {
    const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
    for (std::ptrdiff_t i = 0; i < r; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * cols;
        double dot = 0.0;
#pragma omp simd reduction(+ : dot)
        for (std::size_t j = 0; j < cols; ++j) dot += y[off + j] * dy[off + j];
#pragma omp simd
        for (std::size_t j = 0; j < cols; ++j) dx[off + j] = y[off + j] * (dy[off + j] - dot);
    }
}

void sosfiltfilt_rows(std::span<const double> sos, double* x, std::size_t rows,
                      std::size_t length, std::size_t padlen) {
    const auto zi = sos_zi(sos);
    const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel
    {
        std::vector<double> ext;
#pragma omp for schedule(static)
        for (std::ptrdiff_t i = 0; i < r; ++i)
            filtfilt_one(sos, zi, x + static_cast<std::size_t>(i) * length, length, padlen, ext);
    }
}

namespace ref {

void gemm(Trans ta, Trans tb, std::size_t M, std::size_t N, std::size_t K, double alpha,
          const double* A, std::size_t lda, const double* B, std::size_t ldb, double beta,
          double* C, std::size_t ldc) {
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const double a = ta == Trans::No ? A[i * lda + k] : A[k * lda + i];
                const double b = tb == Trans::No ? B[k * ldb + j] : B[j * ldb + k];
                acc += a * b;
            }
            C[i * ldc + j] = alpha * acc + (beta == 0.0 ? 0.0 : beta * C[i * ldc + j]);
        }
}

void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* cols) {
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t k = 0; k < kernel; ++k)
            for (std::size_t o = 0; o < out_len; ++o) {
                const long pos = static_cast<long>(o * stride + k) - static_cast<long>(pad);
                cols[(c * kernel + k) * out_len + o] =
                    (pos >= 0 && pos < static_cast<long>(length)) ? x[c * length + pos] : 0.0;
            }
}

void col2im(const double* cols, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* x) {
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t k = 0; k < kernel; ++k)
            for (std::size_t o = 0; o < out_len; ++o) {
                const long pos = static_cast<long>(o * stride + k) - static_cast<long>(pad);
                if (pos >= 0 && pos < static_cast<long>(length))
                    x[c * length + pos] += cols[(c * kernel + k) * out_len + o];
            }
}

void softmax_rows(double* x, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        double* row = x + i * cols;
        double mx = row[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sum += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < cols; ++j) row[j] = std::exp(row[j] - mx) / sum;
    }
}

void softmax_rows_backward(const double* y, const double* dy, double* dx, std::size_t rows,
                           std::size_t cols) {
    // Full Jacobian product: dx_j = sum_k y_k (delta_jk - y_j) dy_k.
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < cols; ++k) {
                const double jac = y[i * cols + j] * ((j == k ? 1.0 : 0.0) - y[i * cols + k]);
                acc += jac * dy[i * cols + k];
            }
            dx[i * cols + j] = acc;
        }
}

void sosfiltfilt_rows(std::span<const double> sos, double* x, std::size_t rows,
                      std::size_t length, std::size_t padlen) {
    // Direct form I with histories primed at the DC steady state of the
    // first sample; algebraically the same start-up as the DF2T kernel.
    const std::size_t sections = sos.size() / 6;
    auto run = [&](std::vector<double>& v) {
        for (std::size_t s = 0; s < sections; ++s) {
            const double* c = sos.data() + 6 * s;
            const double gain = (c[0] + c[1] + c[2]) / (1.0 + c[4] + c[5]);
            double x1 = v[0], x2 = v[0], y1 = gain * v[0], y2 = gain * v[0];
            for (double& sample : v) {
                const double y = c[0] * sample + c[1] * x1 + c[2] * x2 - c[4] * y1 - c[5] * y2;
                x2 = x1;
                x1 = sample;
                y2 = y1;
                y1 = y;
                sample = y;
            }
        }
    };
    for (std::size_t i = 0; i < rows; ++i) {
        double* row = x + i * length;
        std::vector<double> ext;
        for (std::size_t k = padlen; k >= 1; --k) ext.push_back(2.0 * row[0] - row[k]);
        ext.insert(ext.end(), row, row + length);
        for (std::size_t k = 1; k <= padlen; ++k) ext.push_back(2.0 * row[length - 1] - row[length - 1 - k]);
        run(ext);
        std::reverse(ext.begin(), ext.end());
        run(ext);
        std::reverse(ext.begin(), ext.end());
        for (std::size_t k = 0; k < length; ++k) row[k] = ext[padlen + k];
    }
}

void exp_inplace(double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}

void sigmoid_inplace(double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

void tanh_inplace(double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::tanh(x[i]);
}

}  // namespace ref

}  // namespace ecgad::kernels

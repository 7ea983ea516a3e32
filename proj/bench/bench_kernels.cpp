// OpenMP kernels against their serial references, at the shapes the models
// and the signal chain use.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ecgad/kernels.hpp"
#include "ecgad/preprocess.hpp"

namespace k = ecgad::kernels;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    for (double& x : v) x = g(rng);
    return v;
}

using Gemm = void (*)(k::Trans, k::Trans, std::size_t, std::size_t, std::size_t, double, const double*,
                      std::size_t, const double*, std::size_t, double, double*, std::size_t);

// Square M = N = K products.
template <Gemm F>
void BM_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = randn(n * n, 1), b = randn(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        F(k::Trans::No, k::Trans::No, n, n, n, 1.0, a.data(), n, b.data(), n, 0.0, c.data(), n);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                   benchmark::Counter::kIs1000);
}

// First encoder stage of the convolutional autoencoder: 12 leads, 500
// samples, kernel 7, stride 2.
template <decltype(&k::im2col) F>
void BM_im2col(benchmark::State& state) {
    const std::size_t C = 12, L = 500, K = 7, S = 2, P = 3, out = (L + 2 * P - K) / S + 1;
    const auto x = randn(C * L, 3);
    std::vector<double> cols(C * K * out);
    for (auto _ : state) {
        F(x.data(), C, L, K, S, P, out, cols.data());
        benchmark::DoNotOptimize(cols.data());
    }
}

// Attention rows over a 500-step window.
template <decltype(&k::softmax_rows) F>
void BM_softmax(benchmark::State& state) {
    const std::size_t rows = 64, cols = 500;
    const auto src = randn(rows * cols, 4);
    std::vector<double> x(src);
    for (auto _ : state) {
        x = src;
        F(x.data(), rows, cols);
        benchmark::DoNotOptimize(x.data());
    }
}

template <decltype(&k::tanh_inplace) F>
void BM_tanh(benchmark::State& state) {
    const auto src = randn(1 << 16, 5);
    std::vector<double> x(src);
    for (auto _ : state) {
        x = src;
        F(x.data(), x.size());
        benchmark::DoNotOptimize(x.data());
    }
}

// Bandpass over one 10 s, 12-lead record at 500 Hz.
template <decltype(&k::sosfiltfilt_rows) F>
void BM_filtfilt(benchmark::State& state) {
    const ecgad::Sos sos = ecgad::design_butterworth_bandpass(3, 0.5, 100.0, 500.0);
    const std::size_t rows = 12, len = 5000;
    const auto src = randn(rows * len, 6);
    std::vector<double> x(src);
    for (auto _ : state) {
        x = src;
        F(sos.coeffs, x.data(), rows, len, ecgad::filtfilt_padlen(sos));
        benchmark::DoNotOptimize(x.data());
    }
}

}  // namespace

BENCHMARK(BM_gemm<k::gemm>)->Name("gemm/omp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<k::ref::gemm>)->Name("gemm/ref")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_im2col<k::im2col>)->Name("im2col/omp");
BENCHMARK(BM_im2col<k::ref::im2col>)->Name("im2col/ref");
BENCHMARK(BM_softmax<k::softmax_rows>)->Name("softmax_rows/omp");
BENCHMARK(BM_softmax<k::ref::softmax_rows>)->Name("softmax_rows/ref");
BENCHMARK(BM_tanh<k::tanh_inplace>)->Name("tanh/omp");
BENCHMARK(BM_tanh<k::ref::tanh_inplace>)->Name("tanh/ref");
BENCHMARK(BM_filtfilt<k::sosfiltfilt_rows>)->Name("sosfiltfilt/omp");
BENCHMARK(BM_filtfilt<k::ref::sosfiltfilt_rows>)->Name("sosfiltfilt/ref");

BENCHMARK_MAIN();

// Built with -ffast-math so the loops below map onto the SIMD variants in
// the vector math library. Inputs are finite by construction.

#include <cmath>

#include "ecgad/kernels.hpp"

namespace ecgad::kernels {

void exp_inplace(double* x, std::size_t n) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}

void sigmoid_inplace(double* x, std::size_t n) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) x[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

void tanh_inplace(double* x, std::size_t n) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) x[i] = std::tanh(x[i]);
}

}  // namespace ecgad::kernels

#pragma once

// Layers with explicit forward/backward passes. Forward functions are const
// and re-entrant; backward functions accumulate into Param::grad.
//
// Sequence tensors are time-major: [T, B, features].

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ecgad/tensor.hpp"

namespace ecgad::nn {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

using ParamRefs = std::vector<Param*>;

void init_uniform(Param& p, double bound, std::mt19937_64& rng);

class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out);

    void init(std::mt19937_64& rng);
    void collect(ParamRefs& out) { out.push_back(&weight); out.push_back(&bias); }

    // Y[N x out] = X[N x in] W^T + b
    void forward(const double* X, std::size_t N, double* Y) const;
    Tensor forward(const Tensor& X) const;  // leading axes flattened
    // dX may be null.
    void backward(const double* X, const double* dY, std::size_t N, double* dX);

    std::size_t in = 0, out = 0;
    Param weight;  // [out x in]
    Param bias;    // [out]
};

// 1-D convolution over [B, C_in, L] with zero padding.
class Conv1d {
public:
    Conv1d() = default;
    Conv1d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
           std::size_t pad);

    void init(std::mt19937_64& rng);
    void collect(ParamRefs& out) { out.push_back(&weight); out.push_back(&bias); }
    std::size_t out_len(std::size_t len) const { return (len + 2 * pad - kernel) / stride + 1; }

    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& dy);

    std::size_t cin = 0, cout = 0, kernel = 0, stride = 1, pad = 0;
    Param weight;  // [cout x cin x kernel]
    Param bias;    // [cout]
};

// Transposed 1-D convolution (adjoint of Conv1d's data path).
class ConvTranspose1d {
public:
    ConvTranspose1d() = default;
    ConvTranspose1d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel,
                    std::size_t stride, std::size_t pad, std::size_t out_pad);

    void init(std::mt19937_64& rng);
    void collect(ParamRefs& out) { out.push_back(&weight); out.push_back(&bias); }
    std::size_t out_len(std::size_t len) const { return (len - 1) * stride + kernel + out_pad - 2 * pad; }

    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& dy);

    std::size_t cin = 0, cout = 0, kernel = 0, stride = 1, pad = 0, out_pad = 0;
    Param weight;  // [cin x cout x kernel]
    Param bias;    // [cout]
};

struct LstmCache {
    Tensor h;      // [T, B, H]
    Tensor c;      // [T, B, H]
    Tensor gates;  // [T, B, 4H] post-activation i f g o
    std::size_t T = 0, B = 0;
    bool reverse = false;
};

// Single-direction LSTM, zero initial state, gate order i f g o.
class Lstm {
public:
    Lstm() = default;
    Lstm(const std::string& name, std::size_t in, std::size_t hidden);

    void init(std::mt19937_64& rng);
    void collect(ParamRefs& out) { out.push_back(&wx); out.push_back(&wh); out.push_back(&bias); }

    // [rows x in] -> [rows x 4H] input contribution including the bias.
    Tensor project(const double* X, std::size_t rows) const;
    // Runs the recurrence over precomputed input contributions [T, B, 4H].
    LstmCache recur(Tensor gx, std::size_t T, std::size_t B, bool reverse) const;
    // dH [T, B, H] -> gradient of the input contributions [T, B, 4H]; accumulates wh.
    Tensor recur_backward(const LstmCache& cache, const Tensor& dH);
    // Accumulates wx and bias; dX may be null.
    void project_backward(const double* X, const Tensor& dGx, std::size_t rows, double* dX);

    std::size_t in = 0, hidden = 0;
    Param wx;    // [4H x in]
    Param wh;    // [4H x H]
    Param bias;  // [4H]
};

struct BiLstmCache {
    LstmCache fwd, bwd;
};

// Forward and reverse LSTMs; output [T, B, 2H] with the forward direction in
// the first H features.
class BiLstm {
public:
    BiLstm() = default;
    BiLstm(const std::string& name, std::size_t in, std::size_t hidden);

    void init(std::mt19937_64& rng);
    void collect(ParamRefs& out) { fwd.collect(out); bwd.collect(out); }

    Tensor forward(const Tensor& X, BiLstmCache* cache) const;
    // Returns dX unless want_dx is false (then an empty tensor).
    Tensor backward(const Tensor& X, const BiLstmCache& cache, const Tensor& dY, bool want_dx = true);

    std::size_t hidden = 0;
    Lstm fwd, bwd;
};

// Scaled dot-product attention over one sequence of `tokens` positions with
// the feature axis of Q/K (width dk_total) and V (width dv_total) split into
// `heads` equal groups.
struct AttentionShape {
    std::size_t tokens = 0, dk_total = 0, dv_total = 0, heads = 1;
};

// out [tokens x dv_total]. If key_weight is non-null it receives, for each
// key position, the attention probability averaged over heads and queries
// (sums to 1). If probs is non-null it receives [heads x tokens x tokens].
void attention_forward(const AttentionShape& s, const double* Q, const double* K, const double* V, double* out,
                       double* key_weight, double* probs);

// Gradients are accumulated into dQ/dK/dV. Probabilities are recomputed
// when probs is null. d_key_weight may be null.
void attention_backward(const AttentionShape& s, const double* Q, const double* K, const double* V,
                        const double* d_out, const double* d_key_weight, const double* probs, double* dQ,
                        double* dK, double* dV);

class Adam {
public:
    Adam(ParamRefs params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    // Rescales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
    double clip_grad_norm(double max_norm);
    void step();

    double learning_rate() const { return lr_; }
    std::size_t steps() const { return t_; }

private:
    ParamRefs params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// [B, C, T] <-> [T, B, C]
Tensor to_time_major(const Tensor& bct);
Tensor to_batch_major(const Tensor& tbc);

}  // namespace ecgad::nn

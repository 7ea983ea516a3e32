#include "ecgad/nn.hpp"

#include <algorithm>
#include <cmath>

#include "ecgad/error.hpp"
#include "ecgad/kernels.hpp"

namespace ecgad::nn {

using kernels::gemm;
using kernels::Trans;

void init_uniform(Param& p, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p.value.values()) v = dist(rng);
    p.grad.fill(0.0);
}

namespace {

void add_column_sums(const double* dY, std::size_t rows, std::size_t cols, double* db) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = dY + r * cols;
        for (std::size_t c = 0; c < cols; ++c) db[c] += row[c];
    }
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, std::size_t in_, std::size_t out_)
    : in(in_), out(out_), weight(name + ".weight", {out_, in_}), bias(name + ".bias", {out_}) {}

void Linear::init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(weight, bound, rng);
    init_uniform(bias, bound, rng);
}

void Linear::forward(const double* X, std::size_t N, double* Y) const {
    for (std::size_t n = 0; n < N; ++n) std::copy_n(bias.value.data(), out, Y + n * out);
    gemm(Trans::No, Trans::Yes, N, out, in, 1.0, X, in, weight.value.data(), in, 1.0, Y, out);
}

Tensor Linear::forward(const Tensor& X) const {
    if (X.empty() || X.shape().back() != in)
        fail(ErrorKind::Shape, "linear layer expects trailing dimension " + std::to_string(in) + ", got " +
                                   shape_string(X.shape()));
    Shape shape = X.shape();
    shape.back() = out;
    Tensor Y(shape);
    forward(X.data(), X.size() / in, Y.data());
    return Y;
}

void Linear::backward(const double* X, const double* dY, std::size_t N, double* dX) {
    gemm(Trans::Yes, Trans::No, out, in, N, 1.0, dY, out, X, in, 1.0, weight.grad.data(), in);
    add_column_sums(dY, N, out, bias.grad.data());
    if (dX) gemm(Trans::No, Trans::No, N, in, out, 1.0, dY, out, weight.value.data(), in, 0.0, dX, in);
}

// ---------------------------------------------------------------- Conv1d

Conv1d::Conv1d(const std::string& name, std::size_t cin_, std::size_t cout_, std::size_t kernel_,
               std::size_t stride_, std::size_t pad_)
    : cin(cin_), cout(cout_), kernel(kernel_), stride(stride_), pad(pad_),
      weight(name + ".weight", {cout_, cin_, kernel_}), bias(name + ".bias", {cout_}) {}

void Conv1d::init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel));
    init_uniform(weight, bound, rng);
    init_uniform(bias, bound, rng);
}

Tensor Conv1d::forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(1) != cin)
        fail(ErrorKind::Shape, "conv1d expects [B, " + std::to_string(cin) + ", L], got " + shape_string(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(2), Lo = out_len(L), ck = cin * kernel;
    Tensor y({B, cout, Lo});
    std::vector<double> cols(ck * Lo);
    for (std::size_t b = 0; b < B; ++b) {
        kernels::im2col(x.slab(b).data(), cin, L, kernel, stride, pad, Lo, cols.data());
        double* yb = y.slab(b).data();
        for (std::size_t c = 0; c < cout; ++c) std::fill_n(yb + c * Lo, Lo, bias.value[c]);
        gemm(Trans::No, Trans::No, cout, Lo, ck, 1.0, weight.value.data(), ck, cols.data(), Lo, 1.0, yb, Lo);
    }
    return y;
}

Tensor Conv1d::backward(const Tensor& x, const Tensor& dy) {
    const std::size_t B = x.dim(0), L = x.dim(2), Lo = dy.dim(2), ck = cin * kernel;
    Tensor dx(x.shape());
    std::vector<double> cols(ck * Lo), dcols(ck * Lo);
    for (std::size_t b = 0; b < B; ++b) {
        const double* dyb = dy.slab(b).data();
        kernels::im2col(x.slab(b).data(), cin, L, kernel, stride, pad, Lo, cols.data());
        gemm(Trans::No, Trans::Yes, cout, ck, Lo, 1.0, dyb, Lo, cols.data(), Lo, 1.0, weight.grad.data(), ck);
        for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t o = 0; o < Lo; ++o) bias.grad[c] += dyb[c * Lo + o];
        gemm(Trans::Yes, Trans::No, ck, Lo, cout, 1.0, weight.value.data(), ck, dyb, Lo, 0.0, dcols.data(), Lo);
        kernels::col2im(dcols.data(), cin, L, kernel, stride, pad, Lo, dx.slab(b).data());
    }
    return dx;
}

// ------------------------------------------------------- ConvTranspose1d

ConvTranspose1d::ConvTranspose1d(const std::string& name, std::size_t cin_, std::size_t cout_,
                                 std::size_t kernel_, std::size_t stride_, std::size_t pad_, std::size_t out_pad_)
    : cin(cin_), cout(cout_), kernel(kernel_), stride(stride_), pad(pad_), out_pad(out_pad_),
      weight(name + ".weight", {cin_, cout_, kernel_}), bias(name + ".bias", {cout_}) {
    if (out_pad >= stride) fail(ErrorKind::Config, "output padding must be smaller than the stride");
}

void ConvTranspose1d::init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cout * kernel));
    init_uniform(weight, bound, rng);
    init_uniform(bias, bound, rng);
}

Tensor ConvTranspose1d::forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(1) != cin)
        fail(ErrorKind::Shape,
             "conv-transpose expects [B, " + std::to_string(cin) + ", L], got " + shape_string(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(2), Lo = out_len(L), ck = cout * kernel;
    Tensor y({B, cout, Lo});
    std::vector<double> cols(ck * L);
    for (std::size_t b = 0; b < B; ++b) {
        gemm(Trans::Yes, Trans::No, ck, L, cin, 1.0, weight.value.data(), ck, x.slab(b).data(), L, 0.0,
             cols.data(), L);
        double* yb = y.slab(b).data();
        for (std::size_t c = 0; c < cout; ++c) std::fill_n(yb + c * Lo, Lo, bias.value[c]);
        kernels::col2im(cols.data(), cout, Lo, kernel, stride, pad, L, yb);
    }
    return y;
}

Tensor ConvTranspose1d::backward(const Tensor& x, const Tensor& dy) {
    const std::size_t B = x.dim(0), L = x.dim(2), Lo = dy.dim(2), ck = cout * kernel;
    Tensor dx(x.shape());
    std::vector<double> dcols(ck * L);
    for (std::size_t b = 0; b < B; ++b) {
        const double* dyb = dy.slab(b).data();
        kernels::im2col(dyb, cout, Lo, kernel, stride, pad, L, dcols.data());
        gemm(Trans::No, Trans::Yes, cin, ck, L, 1.0, x.slab(b).data(), L, dcols.data(), L, 1.0,
             weight.grad.data(), ck);
        for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t o = 0; o < Lo; ++o) bias.grad[c] += dyb[c * Lo + o];
        gemm(Trans::No, Trans::No, cin, L, ck, 1.0, weight.value.data(), ck, dcols.data(), L, 0.0,
             dx.slab(b).data(), L);
    }
    return dx;
}

// ------------------------------------------------------------------ LSTM

Lstm::Lstm(const std::string& name, std::size_t in_, std::size_t hidden_)
    : in(in_), hidden(hidden_), wx(name + ".wx", {4 * hidden_, in_}), wh(name + ".wh", {4 * hidden_, hidden_}),
      bias(name + ".bias", {4 * hidden_}) {}

void Lstm::init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    init_uniform(wx, bound, rng);
    init_uniform(wh, bound, rng);
    init_uniform(bias, bound, rng);
    // Forget gate starts open.
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.value[j] += 1.0;
}

Tensor Lstm::project(const double* X, std::size_t rows) const {
    const std::size_t G = 4 * hidden;
    Tensor gx({rows, G});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.value.data(), G, gx.data() + r * G);
    gemm(Trans::No, Trans::Yes, rows, G, in, 1.0, X, in, wx.value.data(), in, 1.0, gx.data(), G);
    return gx;
}

LstmCache Lstm::recur(Tensor gx, std::size_t T, std::size_t B, bool reverse) const {
    const std::size_t H = hidden, G = 4 * H;
    LstmCache cache;
    cache.T = T;
    cache.B = B;
    cache.reverse = reverse;
    cache.h = Tensor({T, B, H});
    cache.c = Tensor({T, B, H});
    gx.reshape({T, B, G});
    cache.gates = std::move(gx);
    // wh^T [H x G], packed once for the whole sequence.
    std::vector<double> whT(H * G);
    for (std::size_t r = 0; r < G; ++r)
        for (std::size_t k = 0; k < H; ++k) whT[k * G + r] = wh.value[r * H + k];
    std::vector<double> tc(B * H);
    for (std::size_t step = 0; step < T; ++step) {
        const std::size_t t = reverse ? T - 1 - step : step;
        double* g = cache.gates.slab(t).data();
        const double* c_prev = nullptr;
        if (step > 0) {
            const std::size_t prev = reverse ? t + 1 : t - 1;
            gemm(Trans::No, Trans::No, B, G, H, 1.0, cache.h.slab(prev).data(), H, whT.data(), G, 1.0, g, G);
            c_prev = cache.c.slab(prev).data();
        }
        double* h = cache.h.slab(t).data();
        double* c = cache.c.slab(t).data();
        for (std::size_t b = 0; b < B; ++b) {
            double* gb = g + b * G;
            kernels::sigmoid_inplace(gb, 2 * H);
            kernels::tanh_inplace(gb + 2 * H, H);
            kernels::sigmoid_inplace(gb + 3 * H, H);
            for (std::size_t j = 0; j < H; ++j) {
                const double cp = c_prev ? c_prev[b * H + j] : 0.0;
                c[b * H + j] = gb[H + j] * cp + gb[j] * gb[2 * H + j];
            }
        }
        std::copy_n(c, B * H, tc.data());
        kernels::tanh_inplace(tc.data(), B * H);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < H; ++j) h[b * H + j] = g[b * G + 3 * H + j] * tc[b * H + j];
    }
    return cache;
}

Tensor Lstm::recur_backward(const LstmCache& cache, const Tensor& dH) {
    const std::size_t T = cache.T, B = cache.B, H = hidden, G = 4 * H;
    Tensor dG({T, B, G});
    std::vector<double> dh_next(B * H, 0.0), dc_next(B * H, 0.0), tcv(B * H);
    for (std::size_t rstep = T; rstep-- > 0;) {
        const std::size_t t = cache.reverse ? T - 1 - rstep : rstep;
        const bool has_prev = rstep > 0;
        const std::size_t prev = cache.reverse ? t + 1 : t - 1;
        const double* gates = cache.gates.slab(t).data();
        const double* c = cache.c.slab(t).data();
        const double* c_prev = has_prev ? cache.c.slab(prev).data() : nullptr;
        const double* dh_out = dH.slab(t).data();
        double* dg = dG.slab(t).data();
        std::copy_n(c, B * H, tcv.data());
        kernels::tanh_inplace(tcv.data(), B * H);
        for (std::size_t b = 0; b < B; ++b) {
            const double* gb = gates + b * G;
            double* dgb = dg + b * G;
            for (std::size_t j = 0; j < H; ++j) {
                const std::size_t k = b * H + j;
                const double i = gb[j], f = gb[H + j], gg = gb[2 * H + j], o = gb[3 * H + j];
                const double tc = tcv[k];
                const double dh = dh_out[k] + dh_next[k];
                const double dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                const double cp = c_prev ? c_prev[k] : 0.0;
                dgb[j] = dc * gg * i * (1.0 - i);
                dgb[H + j] = dc * cp * f * (1.0 - f);
                dgb[2 * H + j] = dc * i * (1.0 - gg * gg);
                dgb[3 * H + j] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
        }
        if (has_prev) {
            gemm(Trans::No, Trans::No, B, H, G, 1.0, dg, G, wh.value.data(), H, 0.0, dh_next.data(), H);
            gemm(Trans::Yes, Trans::No, G, H, B, 1.0, dg, G, cache.h.slab(prev).data(), H, 1.0, wh.grad.data(), H);
        }
    }
    return dG;
}

void Lstm::project_backward(const double* X, const Tensor& dGx, std::size_t rows, double* dX) {
    const std::size_t G = 4 * hidden;
    gemm(Trans::Yes, Trans::No, G, in, rows, 1.0, dGx.data(), G, X, in, 1.0, wx.grad.data(), in);
    add_column_sums(dGx.data(), rows, G, bias.grad.data());
    if (dX) gemm(Trans::No, Trans::No, rows, in, G, 1.0, dGx.data(), G, wx.value.data(), in, 0.0, dX, in);
}

// ---------------------------------------------------------------- BiLSTM

BiLstm::BiLstm(const std::string& name, std::size_t in, std::size_t hidden_)
    : hidden(hidden_), fwd(name + ".fwd", in, hidden_), bwd(name + ".bwd", in, hidden_) {}

void BiLstm::init(std::mt19937_64& rng) {
    fwd.init(rng);
    bwd.init(rng);
}

Tensor BiLstm::forward(const Tensor& X, BiLstmCache* cache) const {
    if (X.rank() != 3 || X.dim(2) != fwd.in)
        fail(ErrorKind::Shape,
             "bilstm expects [T, B, " + std::to_string(fwd.in) + "], got " + shape_string(X.shape()));
    const std::size_t T = X.dim(0), B = X.dim(1), H = hidden;
    LstmCache f = fwd.recur(fwd.project(X.data(), T * B), T, B, false);
    LstmCache r = bwd.recur(bwd.project(X.data(), T * B), T, B, true);
    Tensor Y({T, B, 2 * H});
    for (std::size_t tb = 0; tb < T * B; ++tb) {
        std::copy_n(f.h.data() + tb * H, H, Y.data() + tb * 2 * H);
        std::copy_n(r.h.data() + tb * H, H, Y.data() + tb * 2 * H + H);
    }
    if (cache) {
        cache->fwd = std::move(f);
        cache->bwd = std::move(r);
    }
    return Y;
}

Tensor BiLstm::backward(const Tensor& X, const BiLstmCache& cache, const Tensor& dY, bool want_dx) {
    const std::size_t T = X.dim(0), B = X.dim(1), H = hidden;
    Tensor dHf({T, B, H}), dHr({T, B, H});
    for (std::size_t tb = 0; tb < T * B; ++tb) {
        std::copy_n(dY.data() + tb * 2 * H, H, dHf.data() + tb * H);
        std::copy_n(dY.data() + tb * 2 * H + H, H, dHr.data() + tb * H);
    }
    Tensor dX;
    Tensor dGf = fwd.recur_backward(cache.fwd, dHf);
    Tensor dGr = bwd.recur_backward(cache.bwd, dHr);
    if (!want_dx) {
        fwd.project_backward(X.data(), dGf, T * B, nullptr);
        bwd.project_backward(X.data(), dGr, T * B, nullptr);
        return dX;
    }
    dX = Tensor(X.shape());
    Tensor tmp(X.shape());
    fwd.project_backward(X.data(), dGf, T * B, dX.data());
    bwd.project_backward(X.data(), dGr, T * B, tmp.data());
    for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += tmp[i];
    return dX;
}

// ------------------------------------------------------------- Attention

void attention_forward(const AttentionShape& s, const double* Q, const double* K, const double* V, double* out,
                       double* key_weight, double* probs) {
    const std::size_t n = s.tokens, dk = s.dk_total / s.heads, dv = s.dv_total / s.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<double> local;
    if (!probs) local.resize(n * n);
    if (key_weight) std::fill_n(key_weight, n, 0.0);
    const double w = 1.0 / static_cast<double>(s.heads * n);
    for (std::size_t h = 0; h < s.heads; ++h) {
        double* P = probs ? probs + h * n * n : local.data();
        gemm(Trans::No, Trans::Yes, n, n, dk, scale, Q + h * dk, s.dk_total, K + h * dk, s.dk_total, 0.0, P, n);
        kernels::softmax_rows(P, n, n);
        gemm(Trans::No, Trans::No, n, dv, n, 1.0, P, n, V + h * dv, s.dv_total, 0.0, out + h * dv, s.dv_total);
        if (key_weight)
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = 0; k < n; ++k) key_weight[k] += w * P[q * n + k];
    }
}

void attention_backward(const AttentionShape& s, const double* Q, const double* K, const double* V,
                        const double* d_out, const double* d_key_weight, const double* probs, double* dQ,
                        double* dK, double* dV) {
    const std::size_t n = s.tokens, dk = s.dk_total / s.heads, dv = s.dv_total / s.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const double w = 1.0 / static_cast<double>(s.heads * n);
    std::vector<double> local(probs ? 0 : n * n), dP(n * n), dS(n * n);
    for (std::size_t h = 0; h < s.heads; ++h) {
        const double* P;
        if (probs) {
            P = probs + h * n * n;
        } else {
            gemm(Trans::No, Trans::Yes, n, n, dk, scale, Q + h * dk, s.dk_total, K + h * dk, s.dk_total, 0.0,
                 local.data(), n);
            kernels::softmax_rows(local.data(), n, n);
            P = local.data();
        }
        gemm(Trans::No, Trans::Yes, n, n, dv, 1.0, d_out + h * dv, s.dv_total, V + h * dv, s.dv_total, 0.0,
             dP.data(), n);
        if (d_key_weight)
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = 0; k < n; ++k) dP[q * n + k] += w * d_key_weight[k];
        gemm(Trans::Yes, Trans::No, n, dv, n, 1.0, P, n, d_out + h * dv, s.dv_total, 1.0, dV + h * dv, s.dv_total);
        kernels::softmax_rows_backward(P, dP.data(), dS.data(), n, n);
        gemm(Trans::No, Trans::No, n, dk, n, scale, dS.data(), n, K + h * dk, s.dk_total, 1.0, dQ + h * dk,
             s.dk_total);
        gemm(Trans::Yes, Trans::No, n, dk, n, scale, dS.data(), n, Q + h * dk, s.dk_total, 1.0, dK + h * dk,
             s.dk_total);
    }
}

// ------------------------------------------------------------------ Adam

Adam::Adam(ParamRefs params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Param* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

void Adam::zero_grad() {
    for (Param* p : params_) p->grad.fill(0.0);
}

double Adam::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (const Param* p : params_)
        for (double g : p->grad.values()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double k = max_norm / norm;
        for (Param* p : params_)
            for (double& g : p->grad.values()) g *= k;
    }
    return norm;
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        double* w = params_[i]->value.data();
        const double* g = params_[i]->grad.data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        const std::size_t n = m_[i].size();
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

// ---------------------------------------------------------------- layout

Tensor to_time_major(const Tensor& bct) {
    const std::size_t B = bct.dim(0), C = bct.dim(1), T = bct.dim(2);
    Tensor out({T, B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double* src = bct.data() + (b * C + c) * T;
            for (std::size_t t = 0; t < T; ++t) out[(t * B + b) * C + c] = src[t];
        }
    return out;
}

Tensor to_batch_major(const Tensor& tbc) {
    const std::size_t T = tbc.dim(0), B = tbc.dim(1), C = tbc.dim(2);
    Tensor out({B, C, T});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * T + t] = tbc[(t * B + b) * C + c];
    return out;
}

}  // namespace ecgad::nn

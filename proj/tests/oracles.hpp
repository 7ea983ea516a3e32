#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance runner. Each one recomputes its quantity from definitions,
// independently of the library code it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ecgad/models.hpp"
#include "ecgad/preprocess.hpp"

namespace ecgad::oracle {

// O(n^2) pair counting: (2 * #{s+ > s-} + #{s+ == s-}) / (2 P N).
inline double auroc(const std::vector<double>& s, const std::vector<int>& y) {
    double twice = 0.0, P = 0.0, N = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) (y[i] ? P : N) += 1.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!y[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j]) continue;
            if (s[i] > s[j]) twice += 2.0;
            else if (s[i] == s[j]) twice += 1.0;
        }
    }
    return twice / (2.0 * P * N);
}

// Enumerates every distinct threshold from the top, counting alarms s >= thr
// from scratch each time.
inline double auprc(const std::vector<double>& s, const std::vector<int>& y) {
    std::set<double, std::greater<>> thresholds(s.begin(), s.end());
    std::size_t P = 0;
    for (int v : y) P += static_cast<std::size_t>(v);
    double ap = 0.0;
    std::size_t prev_tp = 0;
    for (double thr : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= thr) (y[i] ? tp : fp)++;
        if (tp == prev_tp) continue;
        ap += (static_cast<double>(tp - prev_tp) / static_cast<double>(P)) *
              (static_cast<double>(tp) / static_cast<double>(tp + fp));
        prev_tp = tp;
    }
    return ap;
}

struct Instance {
    std::vector<double> scores;
    std::vector<int> labels;
};

// Both classes present; coarse rounding on half the instances forces ties.
inline Instance random_instance(std::mt19937_64& rng, std::size_t max_n) {
    std::uniform_int_distribution<std::size_t> size(2, max_n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = size(rng);
    const bool coarse = u(rng) < 0.5;
    const double shift = u(rng);
    Instance in;
    in.labels.resize(n);
    in.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        in.labels[i] = u(rng) < 0.3 ? 1 : 0;
        double v = u(rng) + shift * in.labels[i];
        if (coarse) v = std::round(v * 10.0) / 10.0;
        in.scores[i] = v;
    }
    in.labels[0] = 1;
    in.labels[1] = 0;
    return in;
}

struct SweepResult {
    double tau, objective;
};

// Every candidate threshold (below-min sentinel, midpoints between distinct
// scores, max) evaluated by counting alarms s > tau from scratch. Ties keep
// the larger tau.
inline SweepResult sweep(const std::vector<double>& s, const std::vector<int>& y, bool f1) {
    const std::set<double> distinct(s.begin(), s.end());
    const std::vector<double> v(distinct.begin(), distinct.end());
    std::vector<double> cands{std::nextafter(v.front(), -std::numeric_limits<double>::infinity())};
    for (std::size_t i = 0; i + 1 < v.size(); ++i) {
        const double mid = 0.5 * (v[i] + v[i + 1]);
        cands.push_back(mid < v[i + 1] ? mid : v[i]);
    }
    cands.push_back(v.back());
    std::size_t P = 0;
    for (int l : y) P += static_cast<std::size_t>(l);
    const std::size_t N = y.size() - P;
    SweepResult best{0.0, -std::numeric_limits<double>::infinity()};
    for (double tau : cands) {
        std::size_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] > tau) (y[i] ? tp : fp)++;
        const double obj = f1 ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + (P - tp))
                              : static_cast<double>(tp) / static_cast<double>(P) -
                                    static_cast<double>(fp) / static_cast<double>(N);
        if (obj >= best.objective) best = {tau, obj};
    }
    return best;
}

// Scores and labels for a sweep instance: n in [2, max_n], ties on every
// third instance.
inline Instance sweep_instance(std::mt19937_64& rng, std::size_t max_n, int k) {
    std::uniform_int_distribution<std::size_t> size(2, max_n);
    std::uniform_real_distribution<double> u;
    const std::size_t n = size(rng);
    Instance in;
    in.scores.resize(n);
    in.labels.resize(n);
    const double shift = u(rng);
    for (std::size_t i = 0; i < n; ++i) {
        in.labels[i] = u(rng) < 0.4;
        in.scores[i] = u(rng) + shift * in.labels[i];
        if (k % 3 == 0) in.scores[i] = std::round(in.scores[i] * 20.0) / 20.0;
    }
    in.labels[0] = 1;
    in.labels[1] = 0;
    return in;
}

// Sort-based percentile: linear interpolation at rank (n - 1) p.
inline double percentile(std::vector<double> s, double p) {
    std::sort(s.begin(), s.end());
    const double h = static_cast<double>(s.size() - 1) * p;
    const double lo = std::floor(h);
    const auto i = static_cast<std::size_t>(lo);
    if (i + 1 >= s.size()) return s.back();
    return s[i] + (h - lo) * (s[i + 1] - s[i]);
}

// Inverse-CDF draws from GPD(xi, sigma).
inline std::vector<double> gpd_draws(std::size_t n, double xi, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> y(n);
    for (double& v : y) {
        const double p = u(rng);
        v = std::abs(xi) < 1e-12 ? -sigma * std::log1p(-p) : sigma / xi * (std::pow(1.0 - p, -xi) - 1.0);
        if (v <= 0.0) v = std::numeric_limits<double>::min();
    }
    return y;
}

inline std::vector<double> exponential_scores(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> e(1.0);
    std::vector<double> s(n);
    for (double& v : s) v = e(rng);
    return s;
}

// True when segment() of a [leads, T] ramp signal yields exactly the
// windows enumerated by index: window i is columns [i s, i s + m).
inline bool windows_match(std::size_t T, std::size_t m, std::size_t s, std::size_t leads = 2) {
    Tensor sig({leads, T});
    for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = static_cast<double>(i);
    const WindowBatch wb = segment(sig, m, s);
    std::size_t n = 0;
    while (n * s + m <= T) ++n;
    if (wb.count() != n || wb.windows.shape() != Shape{n, leads, m}) return false;
    for (std::size_t i = 0; i < n; ++i) {
        if (wb.starts[i] != i * s) return false;
        for (std::size_t l = 0; l < leads; ++l)
            for (std::size_t j = 0; j < m; ++j)
                if (wb.windows.at(i, l, j) != sig.at(l, i * s + j)) return false;
    }
    return true;
}

// 12-lead record of sin(2 pi f t / fs + 0.2 l) on lead l.
inline EcgRecord tone_record(double f, std::size_t n, int fs = 500) {
    EcgRecord r;
    r.record_id = "tone";
    r.sampling_rate = fs;
    r.signal = Tensor({12, n});
    for (std::size_t l = 0; l < 12; ++l)
        for (std::size_t t = 0; t < n; ++t)
            r.signal.at(l, t) = std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / fs + 0.2 * l);
    return r;
}

// Amplitude of the f Hz component over samples [lo, hi) of lead l, by
// projection onto cos and sin.
inline double tone_amplitude(const EcgRecord& r, std::size_t l, double f, std::size_t lo, std::size_t hi) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = lo; t < hi; ++t) {
        const double ph = 2.0 * std::numbers::pi * f * static_cast<double>(t) / r.sampling_rate;
        re += r.signal.at(l, t) * std::cos(ph);
        im += r.signal.at(l, t) * std::sin(ph);
    }
    return 2.0 * std::hypot(re, im) / static_cast<double>(hi - lo);
}

// Training-mode losses draw latent noise from a fixed seed so every
// evaluation of the loss sees the same noise.
inline double seeded_loss(const Model& m, const Tensor& x, double beta, bool training, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ForwardOptions o;
    o.training = training;
    o.rng = &rng;
    const ForwardPass p = m.forward(x, o);
    return compute_loss(m.kind(), x, p.recon, p.stats, beta).total;
}

struct GradError {
    std::string param;
    double relative;
    double norm;
};

// Per-parameter-tensor relative error ||g_a - g_fd|| / (||g_a|| + ||g_fd||)
// between analytic gradients and central differences with step 1e-6.
inline std::vector<GradError> gradcheck(Model& m, const Tensor& x, double beta, bool training) {
    const std::uint64_t seed = 99;
    for (nn::Param* p : m.params()) p->grad.fill(0.0);
    {
        std::mt19937_64 rng(seed);
        ForwardOptions o;
        o.training = training;
        o.rng = &rng;
        const ForwardPass pass = m.forward(x, o);
        OutputGrads g;
        compute_loss(m.kind(), x, pass.recon, pass.stats, beta, &g);
        m.backward(pass, g);
    }
    const double h = 1e-6;
    std::vector<GradError> out;
    for (nn::Param* p : m.params()) {
        double diff = 0.0, na = 0.0, nf = 0.0;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double w = p->value[i];
            p->value[i] = w + h;
            const double lp = seeded_loss(m, x, beta, training, seed);
            p->value[i] = w - h;
            const double lm = seeded_loss(m, x, beta, training, seed);
            p->value[i] = w;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = p->grad[i];
            diff += (an - fd) * (an - fd);
            na += an * an;
            nf += fd * fd;
        }
        out.push_back({p->name, std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nf), 1e-5), std::sqrt(na)});
    }
    return out;
}

// Reduced model used for gradient checks: 2 leads, 16 samples, d = 2, h = 4.
inline ModelConfig gradcheck_config(ModelKind kind) {
    ModelConfig c = ModelConfig::defaults(kind);
    c.leads = 2;
    c.window_len = 16;
    c.channels = {3, 4};
    c.kernel_size = 3;
    c.latent_dim = 2;
    c.hidden_dim = 4;
    c.mha_heads = 2;
    c.lead_heads = 2;
    return c;
}

inline Tensor random_windows(std::size_t B, std::size_t L, std::size_t T, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    Tensor x({B, L, T});
    for (double& v : x.values()) v = scale * n01(rng);
    return x;
}

}  // namespace ecgad::oracle

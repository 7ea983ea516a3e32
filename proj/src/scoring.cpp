#include "ecgad/scoring.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <random>

#include "ecgad/error.hpp"
#include "ecgad/hash.hpp"
#include "ecgad/preprocess.hpp"

namespace ecgad {

namespace {

double mse(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) fail(ErrorKind::Shape, "score: window and reconstruction differ in size");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

double score_cae(std::span<const double> window, std::span<const double> recon) { return mse(window, recon); }

double score_vae(std::span<const double> window, std::span<const double> recon, std::span<const double> mu,
                 std::span<const double> logvar) {
    if (mu.size() != logvar.size()) fail(ErrorKind::Shape, "score: mu and logvar differ in size");
    return mse(window, recon) + kl_divergence(mu, logvar);
}

double score_vae_mha(std::span<const double> window, std::span<const double> recon,
                     std::span<const double> attention, std::span<const double> mu, std::span<const double> logvar,
                     std::size_t leads) {
    if (attention.empty()) fail(ErrorKind::ModelKind, "attention-weighted score requires attention weights");
    const std::size_t T = attention.size();
    if (leads == 0 || window.size() != leads * T || recon.size() != window.size())
        fail(ErrorKind::Shape, "score: window, reconstruction and attention disagree");
    if (mu.size() != logvar.size() || mu.size() % T != 0)
        fail(ErrorKind::Shape, "score: latent statistics are not per-timestep");
    double weighted = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        double e = 0.0;
        for (std::size_t l = 0; l < leads; ++l) {
            const double d = window[l * T + t] - recon[l * T + t];
            e += d * d;
        }
        weighted += attention[t] * e / static_cast<double>(leads);
    }
    return weighted + kl_divergence(mu, logvar) / static_cast<double>(T);
}

WindowScores score_windows(const Model& model, const Tensor& windows, const ScoreOptions& options) {
    const ModelConfig& cfg = model.config();
    if (windows.rank() != 3 || windows.dim(1) != cfg.leads || windows.dim(2) != cfg.window_len)
        fail(ErrorKind::Shape, "score_windows expects [N, " + std::to_string(cfg.leads) + ", " +
                                   std::to_string(cfg.window_len) + "], got " + shape_string(windows.shape()));
    const std::size_t N = windows.dim(0), L = cfg.leads, m = cfg.window_len;
    const std::size_t per = L * m;
    const std::size_t batch = std::max<std::size_t>(options.batch_size, 1);
    const std::size_t draws = std::max<std::size_t>(options.num_draws, 1);
    const bool mha = model.kind() == ModelKind::VaeMha;

    WindowScores out;
    out.scores.resize(N);
    out.recon = Tensor({N, L, m});
    if (mha) out.attention = Tensor({N, m});
    std::mt19937_64 rng(derive_seed(options.seed, "score"));

    for (std::size_t b0 = 0; b0 < N; b0 += batch) {
        const std::size_t bn = std::min(batch, N - b0);
        Tensor x({bn, L, m});
        std::copy_n(windows.data() + b0 * per, bn * per, x.data());

        ForwardPass pass = model.forward(x);
        Tensor recon = pass.recon.mean;
        if (model.kind() != ModelKind::Cae && draws > 1) {
            // Draw-averaged reconstruction; the first draw is the posterior mean.
            std::normal_distribution<double> gauss;
            for (std::size_t k = 1; k < draws; ++k) {
                Tensor noise(pass.stats.mu.shape());
                for (double& v : noise.values()) v = gauss(rng);
                ForwardOptions fo;
                fo.latent_noise = &noise;
                const ForwardPass p = model.forward(x, fo);
                for (std::size_t i = 0; i < recon.size(); ++i) recon[i] += p.recon.mean[i];
            }
            for (double& v : recon.values()) v /= static_cast<double>(draws);
        }
        std::copy_n(recon.data(), bn * per, out.recon.data() + b0 * per);
        if (mha) std::copy_n(pass.recon.attention.data(), bn * m, out.attention.data() + b0 * m);

        for (std::size_t i = 0; i < bn; ++i) {
            const auto w = x.slab(i);
            const auto r = recon.slab(i);
            double s = 0.0;
            switch (model.kind()) {
            case ModelKind::Cae: s = score_cae(w, r); break;
            case ModelKind::Vae: s = score_vae(w, r, pass.stats.mu.slab(i), pass.stats.logvar.slab(i)); break;
            case ModelKind::VaeMha:
                s = score_vae_mha(w, r, pass.recon.attention.slab(i), pass.stats.mu.slab(i),
                                  pass.stats.logvar.slab(i), L);
                break;
            }
            out.scores[b0 + i] = s;
        }
    }
    return out;
}

double aggregate(std::span<const double> scores) {
    if (scores.empty()) fail(ErrorKind::Data, "cannot aggregate an empty list of window scores");
    double s = 0.0;
    for (double v : scores) s += v;
    return s / static_cast<double>(scores.size());
}

std::string to_string(Decision d) { return d == Decision::Anomalous ? "anomalous" : "normal"; }

AnomalyReport explain(const EcgRecord& record, const Model& model, double tau, std::size_t stride,
                      const ScoreOptions& options) {
    const ModelConfig& cfg = model.config();
    if (record.signal.rank() != 2 || record.leads() != cfg.leads)
        fail(ErrorKind::Shape, "record has " + std::to_string(record.leads()) + " leads, model expects " +
                                   std::to_string(cfg.leads));
    const std::size_t L = cfg.leads, m = cfg.window_len, T = record.samples();
    if (T < m)
        fail(ErrorKind::Data, "record " + record.record_id + " has " + std::to_string(T) +
                                  " samples, shorter than one window of " + std::to_string(m));
    const WindowBatch wb = segment(record.signal, m, stride, record.record_id);
    const WindowScores ws = score_windows(model, wb.windows, options);

    AnomalyReport rep;
    rep.record_id = record.record_id;
    rep.model_kind = model.kind();
    rep.scores = ws.scores;
    rep.window_starts = wb.starts;
    rep.aggregate = aggregate(rep.scores);
    rep.tau = tau;
    rep.decision = decide(rep.aggregate, tau);

    const bool mha = model.kind() == ModelKind::VaeMha;
    Tensor err({L, T}), rec({L, T});
    Tensor att = mha ? Tensor({T}) : Tensor();
    std::vector<std::size_t> cover(T, 0);
    for (std::size_t i = 0; i < wb.starts.size(); ++i) {
        const std::size_t s0 = wb.starts[i];
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t t = 0; t < m; ++t) {
                const double r = ws.recon.at(i, l, t);
                const double d = wb.windows.at(i, l, t) - r;
                err.at(l, s0 + t) += d * d;
                rec.at(l, s0 + t) += r;
            }
        for (std::size_t t = 0; t < m; ++t) {
            ++cover[s0 + t];
            if (mha) att[s0 + t] += ws.attention.at(i, t);
        }
    }
    for (std::size_t t = 0; t < T; ++t) {
        const double c = static_cast<double>(cover[t]);
        for (std::size_t l = 0; l < L; ++l) {
            err.at(l, t) = cover[t] ? err.at(l, t) / c : kNaN;
            rec.at(l, t) = cover[t] ? rec.at(l, t) / c : kNaN;
        }
        if (mha) att[t] = cover[t] ? att[t] / c : kNaN;
    }
    rep.pointwise_error = std::move(err);
    rep.reconstruction = std::move(rec);
    rep.attention = std::move(att);
    return rep;
}

double round_sig6(double v) {
    if (!std::isfinite(v) || v == 0.0) return v;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::strtod(buf, nullptr);
}

nlohmann::json series_json(std::span<const double> values) {
    nlohmann::json a = nlohmann::json::array();
    for (double v : values) {
        if (std::isfinite(v))
            a.push_back(round_sig6(v));
        else
            a.push_back(nullptr);
    }
    return a;
}

nlohmann::json report_to_json(const AnomalyReport& r) {
    nlohmann::json j;
    j["record_id"] = r.record_id;
    j["model"] = to_string(r.model_kind);
    j["scores"] = series_json(r.scores);
    j["S"] = round_sig6(r.aggregate);
    j["tau"] = round_sig6(r.tau);
    j["decision"] = to_string(r.decision);
    nlohmann::json pe = nlohmann::json::array();
    if (r.pointwise_error.rank() == 2) {
        const std::size_t T = r.pointwise_error.dim(1);
        for (std::size_t l = 0; l < r.pointwise_error.dim(0); ++l)
            pe.push_back(series_json(r.pointwise_error.span().subspan(l * T, T)));
    }
    j["pointwise_error"] = std::move(pe);
    j["attention"] = r.attention.empty() ? nlohmann::json(nullptr) : series_json(r.attention.span());
    return j;
}

}  // namespace ecgad

#include "ecgad/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <omp.h>

#include "ecgad/error.hpp"
#include "ecgad/kernels.hpp"

namespace ecgad {

using kernels::gemm;
using kernels::Trans;

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::Cae: return "cae";
        case ModelKind::Vae: return "vae";
        case ModelKind::VaeMha: return "vae_mha";
    }
    return "unknown";
}

ModelKind parse_model_kind(const std::string& text) {
    if (text == "cae") return ModelKind::Cae;
    if (text == "vae" || text == "vae_bilstm") return ModelKind::Vae;
    if (text == "vae_mha" || text == "vae_bilstm_mha") return ModelKind::VaeMha;
    fail(ErrorKind::ModelKind, "unknown model kind '" + text + "' (expected cae, vae or vae_mha)");
}

// ------------------------------------------------------------ configuration

ModelConfig ModelConfig::defaults(ModelKind kind) {
    ModelConfig c;
    c.kind = kind;
    switch (kind) {
        case ModelKind::Cae: c.learning_rate = 1e-3; break;
        case ModelKind::Vae: c.learning_rate = 5e-3; break;
        case ModelKind::VaeMha: c.learning_rate = 1e-4; break;
    }
    return c;
}

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) fail(ErrorKind::Config, msg);
    };
    need(leads > 0, "leads must be positive");
    need(window_len > 1, "window length must exceed 1");
    need(batch_size > 0, "batch size must be positive");
    need(epochs > 0, "epochs must be positive");
    need(learning_rate > 0.0 && std::isfinite(learning_rate), "learning rate must be positive");
    if (kind == ModelKind::Cae) {
        need(!channels.empty(), "the convolutional autoencoder needs at least one stage");
        need(kernel_size > 0 && stride > 0, "kernel size and stride must be positive");
        std::size_t len = window_len;
        for (std::size_t c : channels) {
            need(c > 0, "stage channel counts must be positive");
            need(len + 2 * (kernel_size / 2) >= kernel_size, "window too short for the encoder stages");
            len = (len + 2 * (kernel_size / 2) - kernel_size) / stride + 1;
        }
        need(len >= 1, "temporal length after the encoder must be at least 1");
    } else {
        need(latent_dim > 0 && hidden_dim > 0, "latent and hidden dimensions must be positive");
        need(encoder_dropout >= 0.0 && encoder_dropout < 1.0, "dropout must lie in [0, 1)");
        need(input_noise_sigma >= 0.0, "input noise sigma must be non-negative");
        if (kind == ModelKind::VaeMha) {
            need(mha_heads > 0 && latent_dim % mha_heads == 0, "attention heads must divide the latent dimension");
            need(lead_heads > 0 && latent_dim % lead_heads == 0,
                 "lead attention heads must divide the latent dimension");
            need(leads <= kMaxAttentionLeads, "lead attention supports at most 64 leads");
        }
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"model_kind", to_string(c.kind)},
                       {"leads", c.leads},
                       {"window_len", c.window_len},
                       {"channels", c.channels},
                       {"kernel_size", c.kernel_size},
                       {"stride", c.stride},
                       {"latent_dim", c.latent_dim},
                       {"hidden_dim", c.hidden_dim},
                       {"lead_heads", c.lead_heads},
                       {"mha_heads", c.mha_heads},
                       {"encoder_dropout", c.encoder_dropout},
                       {"input_noise_sigma", c.input_noise_sigma},
                       {"learning_rate", c.learning_rate},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"grad_clip", c.grad_clip}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig::defaults(parse_model_kind(j.at("model_kind").get<std::string>()));
    auto opt = [&j](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    opt("leads", c.leads);
    opt("window_len", c.window_len);
    opt("channels", c.channels);
    opt("kernel_size", c.kernel_size);
    opt("stride", c.stride);
    opt("latent_dim", c.latent_dim);
    opt("hidden_dim", c.hidden_dim);
    opt("lead_heads", c.lead_heads);
    opt("mha_heads", c.mha_heads);
    opt("encoder_dropout", c.encoder_dropout);
    opt("input_noise_sigma", c.input_noise_sigma);
    opt("learning_rate", c.learning_rate);
    opt("epochs", c.epochs);
    opt("batch_size", c.batch_size);
    opt("grad_clip", c.grad_clip);
}

// ---------------------------------------------------------------- schedules

BetaSchedule BetaSchedule::for_kind(ModelKind kind, std::size_t epochs) {
    BetaSchedule s;
    s.total_epochs = epochs;
    switch (kind) {
        case ModelKind::Cae:
            s.kind = Kind::Constant;
            s.beta_min = s.beta_max = 0.0;
            break;
        case ModelKind::Vae:
            s.kind = Kind::LinearWarmup;
            s.beta_min = 0.0;
            s.beta_max = 1.0;
            break;
        case ModelKind::VaeMha:
            s.kind = Kind::CyclicalRamp;
            s.beta_min = 1e-8;
            s.beta_max = 1e-2;
            break;
    }
    return s;
}

BetaSchedule BetaSchedule::constant(double beta, std::size_t epochs) {
    BetaSchedule s;
    s.kind = Kind::Constant;
    s.beta_min = s.beta_max = beta;
    s.total_epochs = epochs;
    return s;
}

std::string to_string(BetaSchedule::Kind kind) {
    switch (kind) {
        case BetaSchedule::Kind::LinearWarmup: return "linear_warmup";
        case BetaSchedule::Kind::CyclicalRamp: return "cyclical_ramp";
        case BetaSchedule::Kind::LinearRamp: return "linear_ramp";
        case BetaSchedule::Kind::Constant: return "constant";
    }
    return "unknown";
}

void to_json(nlohmann::json& j, const BetaSchedule& s) {
    j = nlohmann::json{{"kind", to_string(s.kind)},         {"warmup_epochs", s.warmup_epochs},
                       {"cycle_len", s.cycle_len},          {"beta_min", s.beta_min},
                       {"beta_max", s.beta_max},            {"total_epochs", s.total_epochs}};
}

void from_json(const nlohmann::json& j, BetaSchedule& s) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear_warmup")
        s.kind = BetaSchedule::Kind::LinearWarmup;
    else if (kind == "cyclical_ramp")
        s.kind = BetaSchedule::Kind::CyclicalRamp;
    else if (kind == "linear_ramp")
        s.kind = BetaSchedule::Kind::LinearRamp;
    else if (kind == "constant")
        s.kind = BetaSchedule::Kind::Constant;
    else
        fail(ErrorKind::Config, "unknown beta schedule '" + kind + "'");
    j.at("warmup_epochs").get_to(s.warmup_epochs);
    j.at("cycle_len").get_to(s.cycle_len);
    j.at("beta_min").get_to(s.beta_min);
    j.at("beta_max").get_to(s.beta_max);
    j.at("total_epochs").get_to(s.total_epochs);
}

double beta_at(std::size_t epoch, const BetaSchedule& s) {
    if (epoch < 1 || epoch > s.total_epochs)
        fail(ErrorKind::Config, "epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(s.total_epochs) +
                                    "]");
    const double t = static_cast<double>(epoch);
    switch (s.kind) {
        case BetaSchedule::Kind::Constant: return s.beta_max;
        case BetaSchedule::Kind::LinearWarmup:
            if (epoch >= s.warmup_epochs) return s.beta_max;
            return s.beta_max * t / static_cast<double>(s.warmup_epochs);
        case BetaSchedule::Kind::CyclicalRamp: {
            if (epoch <= s.warmup_epochs) return s.beta_min;
            if (s.cycle_len < 2) return s.beta_max;
            const std::size_t pos = (epoch - s.warmup_epochs - 1) % s.cycle_len;
            const double frac = static_cast<double>(pos) / static_cast<double>(s.cycle_len - 1);
            return s.beta_min + frac * (s.beta_max - s.beta_min);
        }
        case BetaSchedule::Kind::LinearRamp: {
            if (epoch <= s.warmup_epochs) return s.beta_min;
            const double span = static_cast<double>(s.total_epochs - s.warmup_epochs);
            return s.beta_min + (t - static_cast<double>(s.warmup_epochs)) / span * (s.beta_max - s.beta_min);
        }
    }
    return s.beta_max;
}

// ------------------------------------------------------------ latent helpers

Tensor reparameterize(const LatentStats& stats, const Tensor& noise) {
    if (noise.shape() != stats.mu.shape() || stats.logvar.shape() != stats.mu.shape())
        fail(ErrorKind::Shape, "latent noise " + shape_string(noise.shape()) + " does not match mu " +
                                   shape_string(stats.mu.shape()));
    Tensor z(stats.mu.shape());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = stats.mu[i] + std::exp(0.5 * stats.logvar[i]) * noise[i];
    return z;
}

double kl_divergence(std::span<const double> mu, std::span<const double> logvar) {
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i)
        kl += 0.5 * (mu[i] * mu[i] + std::exp(logvar[i]) - 1.0 - logvar[i]);
    return kl;
}

namespace {

double clamp_logvar(double v) { return std::clamp(v, -kLogvarClamp, kLogvarClamp); }
// Gradient passes through the clamp only strictly inside the range.
bool clamp_passes(double raw) { return raw > -kLogvarClamp && raw < kLogvarClamp; }

Tensor draw_noise(const Shape& shape, const Tensor& mu, const ForwardOptions& o) {
    if (o.latent_noise) {
        if (o.latent_noise->shape() != mu.shape())
            fail(ErrorKind::Shape, "latent noise " + shape_string(o.latent_noise->shape()) + " does not match mu " +
                                       shape_string(mu.shape()));
        return *o.latent_noise;
    }
    Tensor eps(shape);
    if (o.training) {
        if (!o.rng) fail(ErrorKind::Runtime, "training-mode forward needs a random generator");
        std::normal_distribution<double> n01;
        for (double& v : eps.values()) v = n01(*o.rng);
    }
    return eps;
}

void relu_inplace(Tensor& t) {
    for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
}

// Splits a [T, B, 2L] head output into mean / clamped logvar [B, L, T].
void split_output_head(const Tensor& O, std::size_t L, Reconstruction& r) {
    const std::size_t T = O.dim(0), B = O.dim(1);
    r.mean = Tensor({B, L, T});
    r.logvar = Tensor({B, L, T});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t b = 0; b < B; ++b) {
            const double* o = O.data() + (t * B + b) * 2 * L;
            for (std::size_t l = 0; l < L; ++l) {
                r.mean[(b * L + l) * T + t] = o[l];
                r.logvar[(b * L + l) * T + t] = clamp_logvar(o[L + l]);
            }
        }
}

// Inverse of split_output_head for gradients.
Tensor join_output_grad(const Tensor& O, std::size_t L, const OutputGrads& g) {
    const std::size_t T = O.dim(0), B = O.dim(1);
    Tensor dO(O.shape());
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t b = 0; b < B; ++b) {
            const double* o = O.data() + (t * B + b) * 2 * L;
            double* d = dO.data() + (t * B + b) * 2 * L;
            for (std::size_t l = 0; l < L; ++l) {
                const std::size_t k = (b * L + l) * T + t;
                if (!g.mean.empty()) d[l] = g.mean[k];
                if (!g.logvar.empty() && clamp_passes(o[L + l])) d[L + l] = g.logvar[k];
            }
        }
    return dO;
}

// ------------------------------------------------------------------- CAE

class CaeModel final : public Model {
public:
    explicit CaeModel(ModelConfig c) : Model(std::move(c)) {
        const auto& cfg = config_;
        const std::size_t k = cfg.kernel_size, s = cfg.stride, p = k / 2;
        std::vector<std::size_t> lens{cfg.window_len};
        std::vector<std::size_t> chans{cfg.leads};
        for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
            enc_.emplace_back("enc" + std::to_string(i), chans.back(), cfg.channels[i], k, s, p);
            lens.push_back(enc_.back().out_len(lens.back()));
            chans.push_back(cfg.channels[i]);
        }
        for (std::size_t i = cfg.channels.size(); i-- > 0;) {
            const std::size_t base = (lens[i + 1] - 1) * s + k - 2 * p;
            if (lens[i] < base || lens[i] - base >= s)
                fail(ErrorKind::Config, "decoder cannot mirror encoder length " + std::to_string(lens[i]));
            dec_.emplace_back("dec" + std::to_string(i), chans[i + 1], chans[i], k, s, p, lens[i] - base);
        }
    }

    void backward(const ForwardPass& pass, const OutputGrads& grads) override {
        const auto& cache = dynamic_cast<const Cache&>(*pass.cache);
        Tensor g = grads.mean.empty() ? Tensor(pass.recon.mean.shape()) : grads.mean;
        const std::size_t layers = enc_.size() + dec_.size();
        for (std::size_t i = layers; i-- > 0;) {
            const Tensor& out = cache.acts[i + 1];
            if (i + 1 < layers)
                for (std::size_t j = 0; j < g.size(); ++j)
                    if (out[j] <= 0.0) g[j] = 0.0;
            const Tensor& in = cache.acts[i];
            g = i < enc_.size() ? enc_[i].backward(in, g) : dec_[i - enc_.size()].backward(in, g);
        }
    }

protected:
    struct Cache : ForwardCache {
        std::vector<Tensor> acts;
    };

    ForwardPass run(const Tensor& x, const ForwardOptions&) const override {
        auto cache = std::make_unique<Cache>();
        cache->acts.push_back(x);
        for (const auto& conv : enc_) {
            Tensor y = conv.forward(cache->acts.back());
            relu_inplace(y);
            cache->acts.push_back(std::move(y));
        }
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            Tensor y = dec_[i].forward(cache->acts.back());
            if (i + 1 < dec_.size()) relu_inplace(y);
            cache->acts.push_back(std::move(y));
        }
        ForwardPass pass;
        pass.recon.mean = cache->acts.back();
        pass.cache = std::move(cache);
        return pass;
    }

    void collect(nn::ParamRefs& out) override {
        for (auto& c : enc_) c.collect(out);
        for (auto& d : dec_) d.collect(out);
    }

    void init_layers(std::mt19937_64& rng) override {
        for (auto& c : enc_) c.init(rng);
        for (auto& d : dec_) d.init(rng);
    }

private:
    std::vector<nn::Conv1d> enc_;
    std::vector<nn::ConvTranspose1d> dec_;
};

// ----------------------------------------------------------- VAE-BiLSTM

class VaeModel final : public Model {
public:
    explicit VaeModel(ModelConfig c)
        : Model(std::move(c)),
          enc_("enc", config_.leads, config_.hidden_dim),
          stats_("latent", 2 * config_.hidden_dim, 2 * config_.latent_dim),
          dec_("dec", config_.latent_dim, config_.hidden_dim),
          out_("out", config_.hidden_dim, 2 * config_.leads) {}

    void backward(const ForwardPass& pass, const OutputGrads& grads) override {
        const auto& c = dynamic_cast<const Cache&>(*pass.cache);
        const std::size_t T = c.xt.dim(0), B = c.xt.dim(1), H = config_.hidden_dim, D = config_.latent_dim;
        const std::size_t G = 4 * H, L = config_.leads;

        const Tensor dO = join_output_grad(c.out, L, grads);
        Tensor dHd({T, B, H});
        out_.backward(c.dec.h.data(), dO.data(), T * B, dHd.data());
        const Tensor dGx = dec_.recur_backward(c.dec, dHd);
        Tensor dGz({B, G});
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < B * G; ++i) dGz[i] += dGx[t * B * G + i];
        Tensor dz({B, D});
        dec_.project_backward(c.z.data(), dGz, B, dz.data());

        Tensor dS({B, 2 * D});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < D; ++j) {
                const std::size_t k = b * D + j;
                double dmu = dz[k], dlv = dz[k] * c.eps[k] * 0.5 * std::exp(0.5 * pass.stats.logvar[k]);
                if (!grads.mu.empty()) dmu += grads.mu[k];
                if (!grads.latent_logvar.empty()) dlv += grads.latent_logvar[k];
                dS[b * 2 * D + j] = dmu;
                dS[b * 2 * D + D + j] = clamp_passes(c.s[b * 2 * D + D + j]) ? dlv : 0.0;
            }
        Tensor dHf({B, 2 * H});
        stats_.backward(c.hf.data(), dS.data(), B, dHf.data());
        Tensor dY({T, B, 2 * H});
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(dHf.data() + b * 2 * H, H, dY.data() + ((T - 1) * B + b) * 2 * H);
            std::copy_n(dHf.data() + b * 2 * H + H, H, dY.data() + b * 2 * H + H);
        }
        enc_.backward(c.xt, c.enc, dY, false);
    }

protected:
    struct Cache : ForwardCache {
        Tensor xt, hf, s, eps, z, out;
        nn::BiLstmCache enc;
        nn::LstmCache dec;
    };

    ForwardPass run(const Tensor& x, const ForwardOptions& o) const override {
        const std::size_t B = x.dim(0), T = x.dim(2), H = config_.hidden_dim, D = config_.latent_dim;
        const std::size_t G = 4 * H, L = config_.leads;
        auto c = std::make_unique<Cache>();
        c->xt = nn::to_time_major(x);
        const Tensor Y = enc_.forward(c->xt, &c->enc);
        c->hf = Tensor({B, 2 * H});
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(Y.data() + ((T - 1) * B + b) * 2 * H, H, c->hf.data() + b * 2 * H);
            std::copy_n(Y.data() + b * 2 * H + H, H, c->hf.data() + b * 2 * H + H);
        }
        c->s = stats_.forward(c->hf);

        ForwardPass pass;
        pass.stats.mu = Tensor({B, D});
        pass.stats.logvar = Tensor({B, D});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < D; ++j) {
                pass.stats.mu[b * D + j] = c->s[b * 2 * D + j];
                pass.stats.logvar[b * D + j] = clamp_logvar(c->s[b * 2 * D + D + j]);
            }
        c->eps = draw_noise({B, D}, pass.stats.mu, o);
        c->z = reparameterize(pass.stats, c->eps);

        const Tensor gz = dec_.project(c->z.data(), B);
        Tensor gx({T, B, G});
        for (std::size_t t = 0; t < T; ++t) std::copy_n(gz.data(), B * G, gx.data() + t * B * G);
        c->dec = dec_.recur(std::move(gx), T, B, false);
        c->out = out_.forward(c->dec.h);
        split_output_head(c->out, L, pass.recon);
        pass.cache = std::move(c);
        return pass;
    }

    void collect(nn::ParamRefs& out) override {
        enc_.collect(out);
        stats_.collect(out);
        dec_.collect(out);
        out_.collect(out);
    }

    void init_layers(std::mt19937_64& rng) override {
        enc_.init(rng);
        stats_.init(rng);
        dec_.init(rng);
        out_.init(rng);
    }

private:
    nn::BiLstm enc_;
    nn::Linear stats_;
    nn::Lstm dec_;
    nn::Linear out_;
};

// ------------------------------------------------------ VAE-BiLSTM-MHA

class VaeMhaModel final : public Model {
public:
    explicit VaeMhaModel(ModelConfig c)
        : Model(std::move(c)),
          enc1_("enc1", config_.leads, config_.hidden_dim),
          enc2_("enc2", 2 * config_.hidden_dim, config_.hidden_dim),
          stats_("latent", 2 * config_.hidden_dim, 2 * config_.latent_dim),
          lead_scale_("lead_embed.scale", {config_.leads, config_.latent_dim}),
          lead_shift_("lead_embed.shift", {config_.leads, config_.latent_dim}),
          lead_q_("lead_attn.q", config_.latent_dim, config_.latent_dim),
          lead_k_("lead_attn.k", config_.latent_dim, config_.latent_dim),
          lead_v_("lead_attn.v", config_.latent_dim, config_.latent_dim),
          lead_out_("lead_attn.out", config_.latent_dim, config_.latent_dim),
          time_q_("time_attn.q", config_.leads, config_.latent_dim),
          time_k_("time_attn.k", config_.leads, config_.latent_dim),
          time_out_("time_attn.out", config_.latent_dim, config_.latent_dim),
          dec1_("dec1", config_.latent_dim, config_.hidden_dim),
          dec2_("dec2", 2 * config_.hidden_dim, config_.hidden_dim),
          out_("out", 2 * config_.hidden_dim, 2 * config_.leads) {}

    void backward(const ForwardPass& pass, const OutputGrads& grads) override;

protected:
    struct Cache : ForwardCache {
        Tensor xbt;   // [B, T, L] network input (noise included)
        Tensor xt;    // [T, B, L]
        Tensor y1d, y2, s, drop;
        Tensor eps, z, pooled, zs, tq, tk, attn, ao_tm, y3, y4, out;
        nn::BiLstmCache c1, c2, c3, c4;
    };

    ForwardPass run(const Tensor& x, const ForwardOptions& o) const override;

    void collect(nn::ParamRefs& out) override {
        enc1_.collect(out);
        enc2_.collect(out);
        stats_.collect(out);
        out.push_back(&lead_scale_);
        out.push_back(&lead_shift_);
        lead_q_.collect(out);
        lead_k_.collect(out);
        lead_v_.collect(out);
        lead_out_.collect(out);
        time_q_.collect(out);
        time_k_.collect(out);
        time_out_.collect(out);
        dec1_.collect(out);
        dec2_.collect(out);
        out_.collect(out);
    }

    void init_layers(std::mt19937_64& rng) override {
        enc1_.init(rng);
        enc2_.init(rng);
        stats_.init(rng);
        nn::init_uniform(lead_scale_, 1.0, rng);
        nn::init_uniform(lead_shift_, 1.0, rng);
        lead_q_.init(rng);
        lead_k_.init(rng);
        lead_v_.init(rng);
        lead_out_.init(rng);
        time_q_.init(rng);
        time_k_.init(rng);
        time_out_.init(rng);
        dec1_.init(rng);
        dec2_.init(rng);
        out_.init(rng);
    }

private:
    // Lead tokens x_l * scale_l + shift_l are affine in x_l, so each q/k/v
    // projection is x_l * a_l + c_l with a_l = W scale_l, c_l = W shift_l + b.
    // Layout [3 (q, k, v)][L][D].
    struct LeadAffine {
        std::vector<double> a, c;
    };

    const nn::Linear& lead_proj(std::size_t p) const { return p == 0 ? lead_q_ : p == 1 ? lead_k_ : lead_v_; }
    nn::Linear& lead_proj(std::size_t p) { return p == 0 ? lead_q_ : p == 1 ? lead_k_ : lead_v_; }

    LeadAffine lead_affine() const {
        const std::size_t L = config_.leads, D = config_.latent_dim;
        LeadAffine f{std::vector<double>(3 * L * D), std::vector<double>(3 * L * D)};
        for (std::size_t p = 0; p < 3; ++p) {
            const nn::Linear& W = lead_proj(p);
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t i = 0; i < D; ++i) {
                    double a = 0.0, c = W.bias.value[i];
                    for (std::size_t j = 0; j < D; ++j) {
                        a += W.weight.value[i * D + j] * lead_scale_.value[l * D + j];
                        c += W.weight.value[i * D + j] * lead_shift_.value[l * D + j];
                    }
                    f.a[(p * L + l) * D + i] = a;
                    f.c[(p * L + l) * D + i] = c;
                }
        }
        return f;
    }

    // One timestep: qkv [3 L D] and probabilities P [heads L L] are filled;
    // pooled [D] receives the lead-averaged attention output.
    void lead_attend(const LeadAffine& f, const double* x, double* qkv, double* P, double* pooled) const {
        const std::size_t L = config_.leads, D = config_.latent_dim, H = config_.lead_heads, dk = D / H;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        for (std::size_t p = 0; p < 3; ++p)
            for (std::size_t l = 0; l < L; ++l) {
                const std::size_t o = (p * L + l) * D;
                for (std::size_t j = 0; j < D; ++j) qkv[o + j] = x[l] * f.a[o + j] + f.c[o + j];
            }
        const double* Q = qkv;
        const double* K = qkv + L * D;
        const double* V = qkv + 2 * L * D;
        std::fill_n(pooled, D, 0.0);
        const double invL = 1.0 / static_cast<double>(L);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t q = 0; q < L; ++q) {
                double* row = P + (h * L + q) * L;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k < L; ++k) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < dk; ++j) s += Q[q * D + h * dk + j] * K[k * D + h * dk + j];
                    row[k] = s * scale;
                    mx = std::max(mx, row[k]);
                }
                for (std::size_t k = 0; k < L; ++k) row[k] -= mx;
            }
        kernels::exp_inplace(P, H * L * L);
        for (std::size_t r = 0; r < H * L; ++r) {
            double* row = P + r * L;
            double sum = 0.0;
            for (std::size_t k = 0; k < L; ++k) sum += row[k];
            for (std::size_t k = 0; k < L; ++k) row[k] /= sum;
        }
        for (std::size_t h = 0; h < H; ++h) {
            const double* Ph = P + h * L * L;
            for (std::size_t k = 0; k < L; ++k) {
                double w = 0.0;
                for (std::size_t q = 0; q < L; ++q) w += Ph[q * L + k];
                w *= invL;
                for (std::size_t j = 0; j < dk; ++j) pooled[h * dk + j] += w * V[k * D + h * dk + j];
            }
        }
    }

    // Gradient of pooled w.r.t. q/k/v for one timestep, given lead_attend's
    // qkv and P; writes dqkv [3 L D].
    void lead_attend_backward(const double* qkv, const double* P, const double* dpooled, double* dqkv) const {
        const std::size_t L = config_.leads, D = config_.latent_dim, H = config_.lead_heads, dk = D / H;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        const double invL = 1.0 / static_cast<double>(L);
        const double* Q = qkv;
        const double* K = qkv + L * D;
        const double* V = qkv + 2 * L * D;
        double* dQ = dqkv;
        double* dK = dqkv + L * D;
        double* dV = dqkv + 2 * L * D;
        std::fill_n(dqkv, 3 * L * D, 0.0);
        double dP[kMaxAttentionLeads], dS[kMaxAttentionLeads];
        for (std::size_t h = 0; h < H; ++h) {
            const double* Ph = P + h * L * L;
            const double* dp = dpooled + h * dk;
            // d pooled / d P[q, k] = V_k . dp / L for every query q.
            for (std::size_t k = 0; k < L; ++k) {
                double w = 0.0, dw = 0.0;
                for (std::size_t q = 0; q < L; ++q) w += Ph[q * L + k];
                w *= invL;
                for (std::size_t j = 0; j < dk; ++j) {
                    dV[k * D + h * dk + j] += w * dp[j];
                    dw += V[k * D + h * dk + j] * dp[j];
                }
                dP[k] = dw * invL;
            }
            for (std::size_t q = 0; q < L; ++q) {
                const double* row = Ph + q * L;
                double dot = 0.0;
                for (std::size_t k = 0; k < L; ++k) dot += row[k] * dP[k];
                for (std::size_t k = 0; k < L; ++k) dS[k] = scale * row[k] * (dP[k] - dot);
                for (std::size_t k = 0; k < L; ++k)
                    for (std::size_t j = 0; j < dk; ++j) {
                        dQ[q * D + h * dk + j] += dS[k] * K[k * D + h * dk + j];
                        dK[k * D + h * dk + j] += dS[k] * Q[q * D + h * dk + j];
                    }
            }
        }
    }

    nn::BiLstm enc1_, enc2_;
    nn::Linear stats_;
    nn::Param lead_scale_, lead_shift_;
    nn::Linear lead_q_, lead_k_, lead_v_, lead_out_;
    nn::Linear time_q_, time_k_, time_out_;
    nn::BiLstm dec1_, dec2_;
    nn::Linear out_;
};

ForwardPass VaeMhaModel::run(const Tensor& x, const ForwardOptions& o) const {
    const std::size_t B = x.dim(0), L = config_.leads, T = x.dim(2), D = config_.latent_dim;
    auto c = std::make_unique<Cache>();

    Tensor xin = x;
    if (o.training && config_.input_noise_sigma > 0.0) {
        if (!o.rng) fail(ErrorKind::Runtime, "training-mode forward needs a random generator");
        std::normal_distribution<double> n01;
        for (double& v : xin.values()) v += config_.input_noise_sigma * n01(*o.rng);
    }
    c->xbt = Tensor({B, T, L});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t t = 0; t < T; ++t) c->xbt[(b * T + t) * L + l] = xin[(b * L + l) * T + t];
    c->xt = nn::to_time_major(xin);

    // Temporal encoder.
    Tensor y1 = enc1_.forward(c->xt, &c->c1);
    c->drop = Tensor(y1.shape(), 1.0);
    if (o.training && config_.encoder_dropout > 0.0) {
        if (!o.rng) fail(ErrorKind::Runtime, "training-mode forward needs a random generator");
        std::bernoulli_distribution keep(1.0 - config_.encoder_dropout);
        const double scale = 1.0 / (1.0 - config_.encoder_dropout);
        for (double& m : c->drop.values()) m = keep(*o.rng) ? scale : 0.0;
    }
    for (std::size_t i = 0; i < y1.size(); ++i) y1[i] *= c->drop[i];
    c->y1d = std::move(y1);
    c->y2 = enc2_.forward(c->y1d, &c->c2);
    c->s = stats_.forward(c->y2);  // [T, B, 2D]

    ForwardPass pass;
    pass.stats.mu = Tensor({B, T, D});
    pass.stats.logvar = Tensor({B, T, D});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t b = 0; b < B; ++b) {
            const double* s = c->s.data() + (t * B + b) * 2 * D;
            for (std::size_t j = 0; j < D; ++j) {
                pass.stats.mu[(b * T + t) * D + j] = s[j];
                pass.stats.logvar[(b * T + t) * D + j] = clamp_logvar(s[D + j]);
            }
        }
    c->eps = draw_noise({B, T, D}, pass.stats.mu, o);
    c->z = reparameterize(pass.stats, c->eps);

    // Lead-wise self-attention, pooled over leads, one summary per timestep.
    const std::size_t BT = B * T;
    c->pooled = Tensor({BT, D});
    {
        const LeadAffine f = lead_affine();
        const auto n = static_cast<std::ptrdiff_t>(BT);
#pragma omp parallel
        {
            std::vector<double> qkv(3 * L * D), P(config_.lead_heads * L * L);
#pragma omp for schedule(static)
            for (std::ptrdiff_t i = 0; i < n; ++i) {
                const auto bt = static_cast<std::size_t>(i);
                lead_attend(f, c->xbt.data() + bt * L, qkv.data(), P.data(), c->pooled.data() + bt * D);
            }
        }
    }
    const Tensor h_lead = lead_out_.forward(c->pooled);
    c->zs = c->z;
    for (std::size_t i = 0; i < c->zs.size(); ++i) c->zs[i] += h_lead[i];

    // Temporal attention: queries and keys from the raw input, values from z*.
    c->tq = time_q_.forward(c->xbt);
    c->tk = time_k_.forward(c->xbt);
    c->attn = Tensor({B, T, D});
    pass.recon.attention = Tensor({B, T});
    const nn::AttentionShape time_shape{T, D, D, config_.mha_heads};
    for (std::size_t b = 0; b < B; ++b)
        nn::attention_forward(time_shape, c->tq.data() + b * T * D, c->tk.data() + b * T * D,
                              c->zs.data() + b * T * D, c->attn.data() + b * T * D,
                              pass.recon.attention.data() + b * T, nullptr);
    const Tensor ao = time_out_.forward(c->attn);  // [B, T, D]
    c->ao_tm = Tensor({T, B, D});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            std::copy_n(ao.data() + (b * T + t) * D, D, c->ao_tm.data() + (t * B + b) * D);

    // Decoder.
    c->y3 = dec1_.forward(c->ao_tm, &c->c3);
    c->y4 = dec2_.forward(c->y3, &c->c4);
    c->out = out_.forward(c->y4);
    split_output_head(c->out, L, pass.recon);
    pass.cache = std::move(c);
    return pass;
}

void VaeMhaModel::backward(const ForwardPass& pass, const OutputGrads& grads) {
    const auto& c = dynamic_cast<const Cache&>(*pass.cache);
    const std::size_t T = c.xt.dim(0), B = c.xt.dim(1), L = config_.leads, D = config_.latent_dim;
    const std::size_t BT = B * T;

    // Decoder.
    const Tensor dO = join_output_grad(c.out, L, grads);
    Tensor dY4(c.y4.shape());
    out_.backward(c.y4.data(), dO.data(), T * B, dY4.data());
    const Tensor dY3 = dec2_.backward(c.y3, c.c4, dY4);
    const Tensor dAoTm = dec1_.backward(c.ao_tm, c.c3, dY3);
    Tensor dAo({B, T, D});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            std::copy_n(dAoTm.data() + (t * B + b) * D, D, dAo.data() + (b * T + t) * D);

    // Temporal attention.
    Tensor dAttn({B, T, D});
    time_out_.backward(c.attn.data(), dAo.data(), BT, dAttn.data());
    Tensor dTq({B, T, D}), dTk({B, T, D}), dZs({B, T, D});
    const nn::AttentionShape time_shape{T, D, D, config_.mha_heads};
    for (std::size_t b = 0; b < B; ++b)
        nn::attention_backward(time_shape, c.tq.data() + b * T * D, c.tk.data() + b * T * D,
                               c.zs.data() + b * T * D, dAttn.data() + b * T * D,
                               grads.attention.empty() ? nullptr : grads.attention.data() + b * T, nullptr,
                               dTq.data() + b * T * D, dTk.data() + b * T * D, dZs.data() + b * T * D);
    time_q_.backward(c.xbt.data(), dTq.data(), BT, nullptr);
    time_k_.backward(c.xbt.data(), dTk.data(), BT, nullptr);

    // Lead attention (recomputed per timestep).
    Tensor dPooled({BT, D});
    lead_out_.backward(c.pooled.data(), dZs.data(), BT, dPooled.data());
    {
        // Per-lead sums of x_l * d(q/k/v)_l and d(q/k/v)_l, one buffer per thread.
        const LeadAffine f = lead_affine();
        const std::size_t W = 3 * L * D;
        const auto n = static_cast<std::ptrdiff_t>(BT);
        std::vector<std::vector<double>> acc(static_cast<std::size_t>(omp_get_max_threads()),
                                             std::vector<double>(2 * W, 0.0));
#pragma omp parallel
        {
            std::vector<double>& g = acc[static_cast<std::size_t>(omp_get_thread_num())];
            std::vector<double> qkv(W), dqkv(W), P(config_.lead_heads * L * L), pooled(D);
#pragma omp for schedule(static)
            for (std::ptrdiff_t i = 0; i < n; ++i) {
                const auto bt = static_cast<std::size_t>(i);
                const double* xl = c.xbt.data() + bt * L;
                lead_attend(f, xl, qkv.data(), P.data(), pooled.data());
                lead_attend_backward(qkv.data(), P.data(), dPooled.data() + bt * D, dqkv.data());
                for (std::size_t p = 0; p < 3; ++p)
                    for (std::size_t l = 0; l < L; ++l) {
                        const std::size_t o = (p * L + l) * D;
                        for (std::size_t j = 0; j < D; ++j) {
                            g[o + j] += xl[l] * dqkv[o + j];
                            g[W + o + j] += dqkv[o + j];
                        }
                    }
            }
        }
        std::vector<double> gx(W, 0.0), g1(W, 0.0);
        for (const auto& g : acc)
            for (std::size_t i = 0; i < W; ++i) {
                gx[i] += g[i];
                g1[i] += g[W + i];
            }
        for (std::size_t p = 0; p < 3; ++p) {
            nn::Linear& P = lead_proj(p);
            for (std::size_t l = 0; l < L; ++l) {
                const double* ax = gx.data() + (p * L + l) * D;
                const double* a1 = g1.data() + (p * L + l) * D;
                for (std::size_t i = 0; i < D; ++i) {
                    P.bias.grad[i] += a1[i];
                    for (std::size_t j = 0; j < D; ++j) {
                        const double w = P.weight.value[i * D + j];
                        P.weight.grad[i * D + j] +=
                            ax[i] * lead_scale_.value[l * D + j] + a1[i] * lead_shift_.value[l * D + j];
                        lead_scale_.grad[l * D + j] += w * ax[i];
                        lead_shift_.grad[l * D + j] += w * a1[i];
                    }
                }
            }
        }
    }

    // Reparameterization and latent head; dZs is also dz.
    Tensor dS(c.s.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < D; ++j) {
                const std::size_t k = (b * T + t) * D + j;
                double dmu = dZs[k];
                double dlv = dZs[k] * c.eps[k] * 0.5 * std::exp(0.5 * pass.stats.logvar[k]);
                if (!grads.mu.empty()) dmu += grads.mu[k];
                if (!grads.latent_logvar.empty()) dlv += grads.latent_logvar[k];
                const std::size_t row = (t * B + b) * 2 * D;
                dS[row + j] = dmu;
                dS[row + D + j] = clamp_passes(c.s[row + D + j]) ? dlv : 0.0;
            }
    Tensor dY2(c.y2.shape());
    stats_.backward(c.y2.data(), dS.data(), T * B, dY2.data());
    Tensor dY1 = enc2_.backward(c.y1d, c.c2, dY2);
    for (std::size_t i = 0; i < dY1.size(); ++i) dY1[i] *= c.drop[i];
    enc1_.backward(c.xt, c.c1, dY1, false);
}

}  // namespace

// ------------------------------------------------------------------- Model

ForwardPass Model::forward(const Tensor& windows, const ForwardOptions& options) const {
    if (windows.rank() != 3 || windows.dim(1) != config_.leads || windows.dim(2) != config_.window_len ||
        windows.dim(0) == 0)
        fail(ErrorKind::Shape, "expected windows [B, " + std::to_string(config_.leads) + ", " +
                                   std::to_string(config_.window_len) + "], got " + shape_string(windows.shape()));
    for (double v : windows.values())
        if (!std::isfinite(v)) fail(ErrorKind::Data, "window batch contains non-finite values");
    return run(windows, options);
}

void Model::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    init_layers(rng);
}

nn::ParamRefs Model::params() {
    nn::ParamRefs out;
    collect(out);
    return out;
}

std::vector<const nn::Param*> Model::params() const {
    nn::ParamRefs refs;
    const_cast<Model*>(this)->collect(refs);
    return {refs.begin(), refs.end()};
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const nn::Param* p : params()) n += p->value.size();
    return n;
}

std::unique_ptr<Model> make_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::unique_ptr<Model> model;
    switch (config.kind) {
        case ModelKind::Cae: model = std::make_unique<CaeModel>(config); break;
        case ModelKind::Vae: model = std::make_unique<VaeModel>(config); break;
        case ModelKind::VaeMha: model = std::make_unique<VaeMhaModel>(config); break;
    }
    model->init(seed);
    return model;
}

// -------------------------------------------------------------------- loss

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

double gaussian_nll(double x, double mean, double logvar) {
    const double r = x - mean;
    return 0.5 * (kLog2Pi + logvar + r * r * std::exp(-logvar));
}

}  // namespace

LossTerms compute_loss(ModelKind kind, const Tensor& input, const Reconstruction& recon, const LatentStats& stats,
                       double beta, OutputGrads* grads) {
    if (recon.mean.shape() != input.shape())
        fail(ErrorKind::Shape, "reconstruction " + shape_string(recon.mean.shape()) + " does not match input " +
                                   shape_string(input.shape()));
    LossTerms terms;
    terms.beta = beta;
    const std::size_t N = input.size();
    const double invN = 1.0 / static_cast<double>(N);

    if (kind == ModelKind::Cae) {
        double sse = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            const double r = recon.mean[i] - input[i];
            sse += r * r;
        }
        terms.recon = sse * invN;
        terms.total = terms.recon;
        if (grads) {
            grads->mean = Tensor(input.shape());
            for (std::size_t i = 0; i < N; ++i) grads->mean[i] = 2.0 * (recon.mean[i] - input[i]) * invN;
        }
        return terms;
    }

    if (recon.logvar.shape() != input.shape())
        fail(ErrorKind::Shape, "variational reconstruction needs a logvar of the input shape");
    const std::size_t B = input.dim(0), L = input.dim(1), T = input.dim(2);

    if (grads) {
        grads->mean = Tensor(input.shape());
        grads->logvar = Tensor(input.shape());
        grads->mu = Tensor(stats.mu.shape());
        grads->latent_logvar = Tensor(stats.logvar.shape());
    }

    // Mean NLL over every element.
    double nll_sum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        nll_sum += gaussian_nll(input[i], recon.mean[i], recon.logvar[i]);
        if (grads) {
            const double r = input[i] - recon.mean[i];
            const double iv = std::exp(-recon.logvar[i]);
            grads->mean[i] += -r * iv * invN;
            grads->logvar[i] += 0.5 * (1.0 - r * r * iv) * invN;
        }
    }
    terms.recon = nll_sum * invN;

    if (kind == ModelKind::VaeMha) {
        if (recon.attention.shape() != Shape{B, T})
            fail(ErrorKind::Shape, "attention weights must be [B, T]");
        if (grads) grads->attention = Tensor({B, T});
        const double wB = 1.0 / static_cast<double>(B);
        const double wL = 1.0 / static_cast<double>(L);
        double att = 0.0;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
                const double a = recon.attention[b * T + t];
                double nll_t = 0.0;
                for (std::size_t l = 0; l < L; ++l) {
                    const std::size_t i = (b * L + l) * T + t;
                    nll_t += gaussian_nll(input[i], recon.mean[i], recon.logvar[i]);
                    if (grads) {
                        const double r = input[i] - recon.mean[i];
                        const double iv = std::exp(-recon.logvar[i]);
                        const double w = a * wB * wL;
                        grads->mean[i] += -r * iv * w;
                        grads->logvar[i] += 0.5 * (1.0 - r * r * iv) * w;
                    }
                }
                nll_t *= wL;
                att += a * nll_t;
                if (grads) grads->attention[b * T + t] = nll_t * wB;
            }
        terms.attention = att * wB;
    }

    // KL summed over the latent axis, averaged over the remaining axes.
    const std::size_t d = stats.mu.shape().back();
    const std::size_t groups = stats.mu.size() / d;
    const double invG = 1.0 / static_cast<double>(groups);
    terms.kl = kl_divergence(stats.mu.span(), stats.logvar.span()) * invG;
    if (grads)
        for (std::size_t i = 0; i < stats.mu.size(); ++i) {
            grads->mu[i] = beta * stats.mu[i] * invG;
            grads->latent_logvar[i] = beta * 0.5 * (std::exp(stats.logvar[i]) - 1.0) * invG;
        }
    terms.total = terms.recon + terms.attention + beta * terms.kl;
    return terms;
}

}  // namespace ecgad

#pragma once

// The three reconstruction models, their losses and beta schedules.
//
// Window batches are [B, leads, T]. The VAE latent is [B, d]; the attention
// variant keeps one latent per timestep, [B, T, d].

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgad/nn.hpp"
#include "ecgad/tensor.hpp"

namespace ecgad {

enum class ModelKind { Cae, Vae, VaeMha };

std::string to_string(ModelKind kind);
// Accepts "cae", "vae", "vae_mha"; anything else is a model-kind error.
ModelKind parse_model_kind(const std::string& text);

struct ModelConfig {
    ModelKind kind = ModelKind::Cae;
    std::size_t leads = 12;
    std::size_t window_len = 500;

    // Convolutional autoencoder: one encoder stage per entry.
    std::vector<std::size_t> channels{32, 64, 128};
    std::size_t kernel_size = 7;
    std::size_t stride = 2;

    // Variational models.
    std::size_t latent_dim = 64;
    std::size_t hidden_dim = 128;
    std::size_t lead_heads = 4;
    std::size_t mha_heads = 8;
    double encoder_dropout = 0.1;
    double input_noise_sigma = 0.01;

    double learning_rate = 1e-3;
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double grad_clip = 5.0;  // global L2 norm; <= 0 disables

    static ModelConfig defaults(ModelKind kind);
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct BetaSchedule {
    enum class Kind { LinearWarmup, CyclicalRamp, LinearRamp, Constant };

    Kind kind = Kind::Constant;
    std::size_t warmup_epochs = 10;
    std::size_t cycle_len = 10;
    double beta_min = 0.0;
    double beta_max = 1.0;
    std::size_t total_epochs = 100;

    static BetaSchedule for_kind(ModelKind kind, std::size_t epochs = 100);
    static BetaSchedule constant(double beta, std::size_t epochs = 100);
};

std::string to_string(BetaSchedule::Kind kind);
void to_json(nlohmann::json& j, const BetaSchedule& s);
void from_json(const nlohmann::json& j, BetaSchedule& s);

// LinearWarmup: beta_max * t / warmup up to warmup, then beta_max.
// CyclicalRamp: beta_min through warmup, then sawtooth cycles rising
//   linearly from beta_min (first epoch of a cycle) to beta_max (last).
// LinearRamp: beta_min through warmup, then one ramp reaching beta_max at
//   total_epochs.
// Constant: beta_max.
// Epochs are 1-based; out of [1, total_epochs] is a config error.
double beta_at(std::size_t epoch, const BetaSchedule& schedule);

struct LatentStats {
    Tensor mu;
    Tensor logvar;
};

struct Reconstruction {
    Tensor mean;       // [B, leads, T]
    Tensor logvar;     // [B, leads, T], variational models only
    Tensor attention;  // [B, T], attention variant only; rows sum to 1
};

// z = mu + exp(0.5 logvar) * noise
Tensor reparameterize(const LatentStats& stats, const Tensor& noise);

// Closed-form KL(N(mu, exp(logvar)) || N(0, 1)) summed over the elements.
double kl_divergence(std::span<const double> mu, std::span<const double> logvar);

inline constexpr double kLogvarClamp = 10.0;
inline constexpr std::size_t kMaxAttentionLeads = 64;

struct ForwardOptions {
    bool training = false;
    // Latent noise with the shape of mu. Without it, eval mode uses the
    // posterior mean and training mode draws from rng.
    const Tensor* latent_noise = nullptr;
    std::mt19937_64* rng = nullptr;
};

struct ForwardCache {
    virtual ~ForwardCache() = default;
};

struct ForwardPass {
    Reconstruction recon;
    LatentStats stats;
    std::unique_ptr<ForwardCache> cache;
};

// Loss gradients with respect to forward outputs; empty tensors are zero.
struct OutputGrads {
    Tensor mean, logvar, attention;
    Tensor mu, latent_logvar;
};

class Model {
public:
    explicit Model(ModelConfig config) : config_(std::move(config)) {}
    virtual ~Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    ModelKind kind() const { return config_.kind; }
    const ModelConfig& config() const { return config_; }

    // Input must be finite and shaped [B, leads, window_len].
    ForwardPass forward(const Tensor& windows, const ForwardOptions& options = {}) const;
    // Accumulates parameter gradients for a pass produced by forward().
    virtual void backward(const ForwardPass& pass, const OutputGrads& grads) = 0;

    LatentStats encode(const Tensor& windows) const { return forward(windows).stats; }

    void init(std::uint64_t seed);
    nn::ParamRefs params();
    std::vector<const nn::Param*> params() const;
    std::size_t parameter_count() const;

protected:
    virtual ForwardPass run(const Tensor& windows, const ForwardOptions& options) const = 0;
    virtual void collect(nn::ParamRefs& out) = 0;
    virtual void init_layers(std::mt19937_64& rng) = 0;

    ModelConfig config_;
};

std::unique_ptr<Model> make_model(const ModelConfig& config, std::uint64_t seed = 0);

struct LossTerms {
    double total = 0.0;
    double recon = 0.0;      // MSE (CAE) or mean Gaussian NLL
    double kl = 0.0;         // before the beta factor
    double attention = 0.0;  // attention-weighted NLL, attention variant only
    double beta = 0.0;
};

// CAE: mean squared error over all elements.
// VAE: mean per-element Gaussian NLL + beta * KL, KL summed over the latent
//   axis and averaged over the batch.
// Attention variant: mean NLL + sum_t alpha_t NLL_t (NLL_t averaged over
//   leads, the sum averaged over the batch) + beta * KL, KL summed over the
//   latent axis and averaged over timesteps and batch.
// When grads is non-null it receives the gradient of total.
LossTerms compute_loss(ModelKind kind, const Tensor& input, const Reconstruction& recon, const LatentStats& stats,
                       double beta, OutputGrads* grads = nullptr);

}  // namespace ecgad

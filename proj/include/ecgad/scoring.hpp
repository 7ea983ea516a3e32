#pragma once

// Window scores, recording-level aggregation, the decision rule and the
// per-sample explanation timelines.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgad/ingest.hpp"
#include "ecgad/models.hpp"

namespace ecgad {

// Mean squared error over a window's elements.
double score_cae(std::span<const double> window, std::span<const double> recon);

// MSE + KL(q || N(0, I)) summed over the latent axis.
double score_vae(std::span<const double> window, std::span<const double> recon, std::span<const double> mu,
                 std::span<const double> logvar);

// sum_t alpha_t * mean_l (w_lt - w^_lt)^2 + KL summed over the latent axis and
// averaged over timesteps. window/recon are [leads x T], mu/logvar [T x d].
double score_vae_mha(std::span<const double> window, std::span<const double> recon,
                     std::span<const double> attention, std::span<const double> mu, std::span<const double> logvar,
                     std::size_t leads);

struct ScoreOptions {
    // Latent draws per window; 1 scores at the posterior mean.
    std::size_t num_draws = 1;
    std::uint64_t seed = 0;
    std::size_t batch_size = 64;
};

struct WindowScores {
    std::vector<double> scores;
    Tensor recon;      // [N, leads, m], posterior-mean reconstruction
    Tensor attention;  // [N, m], attention variant only
};

// Scores every window of [N, leads, m] in eval mode.
WindowScores score_windows(const Model& model, const Tensor& windows, const ScoreOptions& options = {});

// Arithmetic mean; an empty list is a data error.
double aggregate(std::span<const double> scores);

enum class Decision { Normal, Anomalous };
std::string to_string(Decision d);

// Anomalous iff score > tau.
inline Decision decide(double score, double tau) { return score > tau ? Decision::Anomalous : Decision::Normal; }

struct AnomalyReport {
    std::string record_id;
    ModelKind model_kind = ModelKind::Cae;
    std::vector<double> scores;
    std::vector<std::size_t> window_starts;
    Tensor pointwise_error;  // [leads, T]; NaN where no window covers the sample
    Tensor reconstruction;   // [leads, T]; NaN where uncovered
    Tensor attention;        // [T] for the attention variant, else empty
    double aggregate = 0.0;
    double tau = 0.0;
    Decision decision = Decision::Normal;
};

// Segments a prepared record, scores every window and overlap-averages the
// per-sample squared errors, reconstructions and attention onto the record
// timeline. Records shorter than one window are data errors.
AnomalyReport explain(const EcgRecord& record, const Model& model, double tau, std::size_t stride = 250,
                      const ScoreOptions& options = {});

// Rounds to 6 significant digits; non-finite values stay as they are.
double round_sig6(double v);

// {record_id, model, scores, S, tau, decision, pointwise_error, attention}
// with numbers at 6 significant digits and uncovered samples as null.
nlohmann::json report_to_json(const AnomalyReport& report);
// Array of rounded numbers, null for NaN.
nlohmann::json series_json(std::span<const double> values);

}  // namespace ecgad

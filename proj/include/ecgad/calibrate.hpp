#pragma once

// Decision thresholds from validation or calibration scores.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace ecgad {

enum class Strategy { P95, F1Opt, Youden, Pot };

std::string to_string(Strategy s);
// Accepts p95, f1, f1opt, youden, pot; anything else is a config error.
Strategy parse_strategy(const std::string& text);
std::vector<Strategy> all_strategies();

struct GpdParams {
    double xi = 0.0;
    double sigma = 1.0;
    // Set when the excesses were degenerate and an exponential (xi = 0)
    // was fitted instead.
    bool exponential_fallback = false;
};

struct ThresholdModel {
    Strategy strategy = Strategy::P95;
    double tau = 0.0;
    std::optional<GpdParams> gpd;
    std::optional<double> baseline_u;
    std::size_t calibration_size = 0;
    // Criterion value at tau: F1 or J for the sweeps; absent otherwise.
    std::optional<double> objective;
    std::optional<double> q;
};

void to_json(nlohmann::json& j, const ThresholdModel& t);
void from_json(const nlohmann::json& j, ThresholdModel& t);

// Linear interpolation between order statistics at h = (n - 1) p.
double percentile(std::span<const double> scores, double p);

inline constexpr std::size_t kMinP95Scores = 20;
inline constexpr std::size_t kMinExcesses = 30;

ThresholdModel calibrate_p95(std::span<const double> scores);

// Sweeps midpoints between consecutive distinct scores plus two sentinels:
// max(scores) (no alarms) and the double just below min(scores) (all
// alarms). Ties go to the larger tau. Labels are 1 for anomalous.
ThresholdModel calibrate_f1(std::span<const double> scores, std::span<const int> labels);
ThresholdModel calibrate_youden(std::span<const double> scores, std::span<const int> labels);

// GPD log-likelihood of positive excesses; -inf outside the support.
double gpd_log_likelihood(std::span<const double> excesses, double xi, double sigma);

inline constexpr double kGpdXiMin = -0.5;
inline constexpr double kGpdXiMax = 1.5;

// Maximum likelihood by profiling over xi in [kGpdXiMin, kGpdXiMax] with
// sigma maximized per xi.
GpdParams fit_gpd(std::span<const double> excesses);

// u defaults to the 95th percentile. tau = u + sigma/xi ((q N / N_u)^-xi - 1),
// or u - sigma ln(q N / N_u) at xi = 0; never below u.
ThresholdModel calibrate_pot(std::span<const double> scores, double q = 1e-2,
                             std::optional<double> baseline_u = std::nullopt);

// Validation scores come from normal-only data and feed p95 and pot; the
// supervised strategies need the labeled calibration scores.
struct CalibrationInputs {
    std::vector<double> val_scores;
    std::vector<double> calib_scores;
    std::vector<int> calib_labels;
    double q = 1e-2;
};

ThresholdModel calibrate(Strategy strategy, const CalibrationInputs& inputs);

// <checkpoint>/threshold.json: {"default": strategy, "thresholds": [...]}.
struct ThresholdSet {
    Strategy default_strategy = Strategy::P95;
    std::vector<ThresholdModel> thresholds;

    const ThresholdModel* find(Strategy s) const;
    const ThresholdModel* default_threshold() const { return find(default_strategy); }
};

void save_thresholds(const std::filesystem::path& checkpoint_dir, const ThresholdSet& set);
// Absent file yields nullopt; a malformed one is a config error.
std::optional<ThresholdSet> load_thresholds(const std::filesystem::path& checkpoint_dir);

}  // namespace ecgad

#include "ecgad/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <boost/math/tools/minima.hpp>
#include <spdlog/spdlog.h>

#include "ecgad/error.hpp"

namespace ecgad {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_finite(std::span<const double> scores, const char* what) {
    for (double s : scores)
        if (!std::isfinite(s)) fail(ErrorKind::Calibration, std::string(what) + ": scores must be finite");
}

enum class Criterion { F1, Youden };

ThresholdModel sweep(std::span<const double> scores, std::span<const int> labels, Criterion crit) {
    const char* name = crit == Criterion::F1 ? "f1opt" : "youden";
    if (scores.size() != labels.size())
        fail(ErrorKind::Calibration, std::string(name) + ": scores and labels differ in length");
    require_finite(scores, name);
    std::size_t P = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) fail(ErrorKind::Calibration, std::string(name) + ": labels must be 0 or 1");
        P += static_cast<std::size_t>(l);
    }
    const std::size_t N = scores.size() - P;
    if (P == 0 || N == 0)
        fail(ErrorKind::Calibration, std::string(name) + " needs at least one anomalous and one normal score");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Distinct values with positive/negative counts at or above each.
    std::vector<double> values;
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < order.size();) {
        const double v = scores[order[i]];
        std::size_t p = 0, n = 0;
        for (; i < order.size() && scores[order[i]] == v; ++i) (labels[order[i]] ? p : n)++;
        values.push_back(v);
        pos.push_back(p);
        neg.push_back(n);
    }
    const std::size_t k = values.size();
    std::vector<std::size_t> tp_ge(k + 1, 0), fp_ge(k + 1, 0);
    for (std::size_t j = k; j-- > 0;) {
        tp_ge[j] = tp_ge[j + 1] + pos[j];
        fp_ge[j] = fp_ge[j + 1] + neg[j];
    }

    auto objective = [&](std::size_t tp, std::size_t fp) {
        if (crit == Criterion::F1) {
            const std::size_t fn = P - tp;
            return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
        }
        return static_cast<double>(tp) / static_cast<double>(P) - static_cast<double>(fp) / static_cast<double>(N);
    };

    // Candidate j alarms on values[j..]; j == k alarms on nothing.
    double best_obj = -kInf, best_tau = 0.0;
    for (std::size_t j = 0; j <= k; ++j) {
        double tau;
        if (j == 0)
            tau = std::nextafter(values[0], -kInf);
        else if (j == k)
            tau = values[k - 1];
        else {
            tau = 0.5 * (values[j - 1] + values[j]);
            if (!(tau < values[j])) tau = values[j - 1];
        }
        const double obj = objective(tp_ge[j], fp_ge[j]);
        if (obj >= best_obj) {
            best_obj = obj;
            best_tau = tau;
        }
    }
    ThresholdModel t;
    t.strategy = crit == Criterion::F1 ? Strategy::F1Opt : Strategy::Youden;
    t.tau = best_tau;
    t.calibration_size = scores.size();
    t.objective = best_obj;
    return t;
}

}  // namespace

std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::P95: return "p95";
    case Strategy::F1Opt: return "f1opt";
    case Strategy::Youden: return "youden";
    case Strategy::Pot: return "pot";
    }
    return "?";
}

Strategy parse_strategy(const std::string& text) {
    if (text == "p95") return Strategy::P95;
    if (text == "f1" || text == "f1opt") return Strategy::F1Opt;
    if (text == "youden") return Strategy::Youden;
    if (text == "pot") return Strategy::Pot;
    fail(ErrorKind::Config, "unknown threshold strategy '" + text + "' (expected p95, f1, youden or pot)");
}

std::vector<Strategy> all_strategies() { return {Strategy::P95, Strategy::F1Opt, Strategy::Youden, Strategy::Pot}; }

void to_json(nlohmann::json& j, const ThresholdModel& t) {
    j = nlohmann::json{{"strategy", to_string(t.strategy)}, {"tau", t.tau}, {"calibration_size", t.calibration_size}};
    if (t.gpd)
        j["gpd_params"] = {{"xi", t.gpd->xi}, {"sigma", t.gpd->sigma}, {"exponential_fallback", t.gpd->exponential_fallback}};
    else
        j["gpd_params"] = nullptr;
    j["baseline_u"] = t.baseline_u ? nlohmann::json(*t.baseline_u) : nlohmann::json(nullptr);
    if (t.objective) j["objective"] = *t.objective;
    if (t.q) j["q"] = *t.q;
}

void from_json(const nlohmann::json& j, ThresholdModel& t) {
    t = ThresholdModel{};
    t.strategy = parse_strategy(j.at("strategy").get<std::string>());
    t.tau = j.at("tau").get<double>();
    t.calibration_size = j.value("calibration_size", std::size_t{0});
    if (j.contains("gpd_params") && !j["gpd_params"].is_null()) {
        const auto& g = j["gpd_params"];
        t.gpd = GpdParams{g.at("xi").get<double>(), g.at("sigma").get<double>(), g.value("exponential_fallback", false)};
    }
    if (j.contains("baseline_u") && !j["baseline_u"].is_null()) t.baseline_u = j["baseline_u"].get<double>();
    if (j.contains("objective")) t.objective = j["objective"].get<double>();
    if (j.contains("q")) t.q = j["q"].get<double>();
}

double percentile(std::span<const double> scores, double p) {
    if (scores.empty()) fail(ErrorKind::Calibration, "percentile of an empty score list");
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::Config, "percentile must lie in [0, 1]");
    std::vector<double> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end());
    const double h = static_cast<double>(s.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    const double frac = h - static_cast<double>(lo);
    // Equal neighbours return exactly that value.
    return s[lo] == s[hi] ? s[lo] : s[lo] + frac * (s[hi] - s[lo]);
}

ThresholdModel calibrate_p95(std::span<const double> scores) {
    if (scores.size() < kMinP95Scores)
        fail(ErrorKind::Calibration, "p95 needs at least " + std::to_string(kMinP95Scores) + " scores, got " +
                                         std::to_string(scores.size()));
    require_finite(scores, "p95");
    ThresholdModel t;
    t.strategy = Strategy::P95;
    t.tau = percentile(scores, 0.95);
    t.calibration_size = scores.size();
    return t;
}

ThresholdModel calibrate_f1(std::span<const double> scores, std::span<const int> labels) {
    return sweep(scores, labels, Criterion::F1);
}

ThresholdModel calibrate_youden(std::span<const double> scores, std::span<const int> labels) {
    return sweep(scores, labels, Criterion::Youden);
}

double gpd_log_likelihood(std::span<const double> y, double xi, double sigma) {
    if (!(sigma > 0.0)) return -kInf;
    const double n = static_cast<double>(y.size());
    double acc = 0.0;
    if (std::abs(xi) < 1e-12) {
        for (double v : y) acc += v;
        return -n * std::log(sigma) - acc / sigma;
    }
    for (double v : y) {
        const double a = 1.0 + xi * v / sigma;
        if (!(a > 0.0)) return -kInf;
        acc += std::log1p(xi * v / sigma);
    }
    return -n * std::log(sigma) - (1.0 + 1.0 / xi) * acc;
}

GpdParams fit_gpd(std::span<const double> y) {
    if (y.size() < kMinExcesses)
        fail(ErrorKind::Calibration, "GPD fit needs at least " + std::to_string(kMinExcesses) + " excesses, got " +
                                         std::to_string(y.size()) + "; lower the baseline threshold");
    double ymax = 0.0, ymin = kInf, sum = 0.0;
    for (double v : y) {
        if (!(v > 0.0) || !std::isfinite(v)) fail(ErrorKind::Calibration, "GPD excesses must be positive and finite");
        ymax = std::max(ymax, v);
        ymin = std::min(ymin, v);
        sum += v;
    }
    const double mean = sum / static_cast<double>(y.size());
    if (ymax - ymin <= 1e-12 * ymax) {
        spdlog::warn("GPD fit: degenerate excesses, using an exponential tail");
        return GpdParams{0.0, mean, true};
    }

    constexpr int bits = 40;
    // Profile: sigma maximizing the likelihood at fixed xi, searched in log space.
    auto profile = [&](double xi) {
        double lo = std::log(1e-9 * mean);
        if (xi < 0.0) lo = std::max(lo, std::log(-xi * ymax) + 1e-12);
        const double hi = std::log(1e3 * (ymax + mean));
        const auto r = boost::math::tools::brent_find_minima(
            [&](double ls) { return -gpd_log_likelihood(y, xi, std::exp(ls)); }, lo, hi, bits);
        return std::pair{std::exp(r.first), -r.second};
    };

    constexpr double step = 0.05;
    double best_xi = kGpdXiMin, best_ll = -kInf;
    for (double xi = kGpdXiMin; xi <= kGpdXiMax + 1e-12; xi += step) {
        const double ll = profile(xi).second;
        if (ll > best_ll) {
            best_ll = ll;
            best_xi = xi;
        }
    }
    const double a = std::max(kGpdXiMin, best_xi - step), b = std::min(kGpdXiMax, best_xi + step);
    const auto r = boost::math::tools::brent_find_minima([&](double xi) { return -profile(xi).second; }, a, b, bits);
    const double xi = -r.second >= best_ll ? r.first : best_xi;
    return GpdParams{xi, profile(xi).first, false};
}

ThresholdModel calibrate_pot(std::span<const double> scores, double q, std::optional<double> baseline_u) {
    if (!(q > 0.0 && q < 1.0)) fail(ErrorKind::Config, "POT tail risk q must lie in (0, 1)");
    require_finite(scores, "pot");
    const double u = baseline_u ? *baseline_u : calibrate_p95(scores).tau;
    std::vector<double> excess;
    for (double s : scores)
        if (s > u) excess.push_back(s - u);
    if (excess.size() < kMinExcesses)
        fail(ErrorKind::Calibration, "POT: only " + std::to_string(excess.size()) + " scores exceed u = " +
                                         std::to_string(u) + " (need " + std::to_string(kMinExcesses) +
                                         "); use a lower baseline or more validation data");
    const GpdParams g = fit_gpd(excess);
    const double N = static_cast<double>(scores.size()), Nu = static_cast<double>(excess.size());
    const double r = q * N / Nu;
    double tau = std::abs(g.xi) < 1e-12 ? u - g.sigma * std::log(r) : u + g.sigma / g.xi * (std::pow(r, -g.xi) - 1.0);
    if (tau < u) {
        spdlog::warn("POT: q = {} exceeds the empirical tail mass {}; tau clamped to u", q, Nu / N);
        tau = u;
    }
    ThresholdModel t;
    t.strategy = Strategy::Pot;
    t.tau = tau;
    t.gpd = g;
    t.baseline_u = u;
    t.calibration_size = scores.size();
    t.q = q;
    return t;
}

ThresholdModel calibrate(Strategy strategy, const CalibrationInputs& in) {
    switch (strategy) {
    case Strategy::P95: return calibrate_p95(in.val_scores);
    case Strategy::F1Opt: return calibrate_f1(in.calib_scores, in.calib_labels);
    case Strategy::Youden: return calibrate_youden(in.calib_scores, in.calib_labels);
    case Strategy::Pot: return calibrate_pot(in.val_scores, in.q);
    }
    fail(ErrorKind::Config, "unknown strategy");
}

const ThresholdModel* ThresholdSet::find(Strategy s) const {
    for (const auto& t : thresholds)
        if (t.strategy == s) return &t;
    return nullptr;
}

void save_thresholds(const std::filesystem::path& dir, const ThresholdSet& set) {
    nlohmann::json j;
    j["default"] = to_string(set.default_strategy);
    j["thresholds"] = set.thresholds;
    std::ofstream out(dir / "threshold.json");
    if (!out) fail(ErrorKind::Runtime, "cannot write " + (dir / "threshold.json").string());
    out << j.dump(2) << '\n';
}

std::optional<ThresholdSet> load_thresholds(const std::filesystem::path& dir) {
    const auto path = dir / "threshold.json";
    if (!std::filesystem::exists(path)) return std::nullopt;
    std::ifstream in(path);
    try {
        const auto j = nlohmann::json::parse(in);
        ThresholdSet set;
        set.default_strategy = parse_strategy(j.at("default").get<std::string>());
        set.thresholds = j.at("thresholds").get<std::vector<ThresholdModel>>();
        if (!set.default_threshold())
            fail(ErrorKind::Config, path.string() + ": default strategy has no threshold");
        return set;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Config, path.string() + ": " + e.what());
    }
}

}  // namespace ecgad

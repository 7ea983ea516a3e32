#include "ecgad/synth.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ecgad/error.hpp"
#include "ecgad/hash.hpp"
#include "ecgad/npy.hpp"

namespace fs = std::filesystem;

namespace ecgad {

std::string to_string(AnomalyKind kind) {
    switch (kind) {
        case AnomalyKind::QrsAmplitude: return "qrs_amplitude";
        case AnomalyKind::StShift: return "st_shift";
        case AnomalyKind::BeatDropout: return "beat_dropout";
        case AnomalyKind::RateJitter: return "rate_jitter";
    }
    return "unknown";
}

AnomalyKind parse_anomaly_kind(const std::string& text) {
    for (AnomalyKind k : all_anomaly_kinds())
        if (to_string(k) == text) return k;
    fail(ErrorKind::Config, "unknown anomaly kind '" + text +
                                "' (expected qrs_amplitude, st_shift, beat_dropout or rate_jitter)");
}

std::vector<AnomalyKind> all_anomaly_kinds() {
    return {AnomalyKind::QrsAmplitude, AnomalyKind::StShift, AnomalyKind::BeatDropout, AnomalyKind::RateJitter};
}

std::string anomaly_code(AnomalyKind kind) {
    switch (kind) {
        case AnomalyKind::QrsAmplitude: return "QRSAMP";
        case AnomalyKind::StShift: return "STSHIFT";
        case AnomalyKind::BeatDropout: return "DROPOUT";
        case AnomalyKind::RateJitter: return "IRREG";
    }
    return "ANOM";
}

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 frontal(double deg) {
    const double r = deg * std::numbers::pi / 180.0;
    return {std::cos(r), std::sin(r), 0.0};
}

Vec3 horizontal(double deg) {
    const double r = deg * std::numbers::pi / 180.0;
    return {std::cos(r), 0.0, std::sin(r)};
}

// Lead axes: limb leads in the frontal plane, chest leads in the horizontal
// plane (x left, y inferior, z anterior).
const std::array<Vec3, kLeads>& lead_axes() {
    static const std::array<Vec3, kLeads> axes = {
        frontal(0),       frontal(60),      frontal(120),    frontal(-150),  frontal(-30),   frontal(90),
        horizontal(115), horizontal(95), horizontal(75), horizontal(55), horizontal(30), horizontal(0)};
    return axes;
}

enum Wave { P, Q, R, S, T, kWaves };

struct WaveShape {
    double offset;  // seconds relative to the R peak
    double width;   // Gaussian sd, seconds
    double amp;     // mV along the dipole direction
    Vec3 dir;
};

Vec3 rotate(const Vec3& v, double about_z, double about_y) {
    const double cz = std::cos(about_z), sz = std::sin(about_z);
    const Vec3 a{cz * v[0] - sz * v[1], sz * v[0] + cz * v[1], v[2]};
    const double cy = std::cos(about_y), sy = std::sin(about_y);
    return {cy * a[0] + sy * a[2], a[1], -sy * a[0] + cy * a[2]};
}

Vec3 normalized(Vec3 v) {
    const double n = std::sqrt(dot(v, v));
    return {v[0] / n, v[1] / n, v[2] / n};
}

struct Beat {
    double r_time;
    double qt_scale = 1.0;  // sqrt(preceding RR / 0.8 s)
    bool dropped = false;
    double qrs_scale = 1.0;
    bool st = false;
};

bool in_span(double t_sec, int fs, const SynthAnomaly& a, std::size_t total) {
    const auto n = static_cast<std::size_t>(std::max(0.0, t_sec * fs));
    const std::size_t end = a.end == 0 ? total : a.end;
    return n >= a.begin && n < end;
}

}  // namespace

EcgRecord synth_record(std::uint64_t seed, const std::optional<SynthAnomaly>& anomaly, const SynthOptions& o) {
    const int fs = o.sampling_rate;
    const auto total = static_cast<std::size_t>(std::llround(o.seconds * fs));
    std::mt19937_64 base(derive_seed(seed, "beats"));
    std::mt19937_64 anom(derive_seed(seed, "anomaly"));
    std::mt19937_64 noise(derive_seed(seed, "noise"));
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::normal_distribution<double> N01;
    auto uni = [&](std::mt19937_64& g, double lo, double hi) { return lo + (hi - lo) * U(g); };

    // Per-record morphology.
    std::array<WaveShape, kWaves> waves = {{
        {-0.16, 0.022, 0.15, normalized({0.5, 0.7, 0.1})},
        {-0.028, 0.009, 0.12, normalized({-0.6, -0.3, -0.5})},
        {0.0, 0.011, 1.1, normalized({0.75, 0.55, -0.35})},
        {0.032, 0.011, 0.40, normalized({-0.3, -0.4, 0.85})},
        {0.27, 0.055, 0.35, normalized({0.6, 0.5, -0.2})},
    }};
    const double rot_z = uni(base, -0.26, 0.26), rot_y = uni(base, -0.17, 0.17);
    for (auto& w : waves) {
        w.dir = rotate(w.dir, rot_z, rot_y);
        w.amp *= uni(base, 0.85, 1.15);
    }
    std::array<double, kLeads> gain{};
    for (double& g : gain) g = uni(base, 0.9, 1.1);
    const double rr = 60.0 / uni(base, o.hr_min, o.hr_max);
    const double phase = uni(base, 0.0, rr);

    // Beat train, starting one beat before the record so edges are filled.
    std::vector<Beat> beats;
    double t = phase - rr;
    const bool jitter = anomaly && anomaly->kind == AnomalyKind::RateJitter;
    double prev_rr = rr;
    while (t < o.seconds + 0.5) {
        beats.push_back({t, std::sqrt(prev_rr / 0.8)});
        double step = rr * (1.0 + 0.03 * N01(base));
        if (jitter && in_span(t, fs, *anomaly, total)) step *= uni(anom, o.jitter_min, o.jitter_max);
        t += step;
        prev_rr = step;
    }

    Vec3 st_dir{};
    double st_amp = 0.0;
    if (anomaly) {
        const double qrs_scale = uni(anom, o.qrs_scale_min, o.qrs_scale_max);
        const double drop_p = uni(anom, 0.3, 0.5);
        st_dir = normalized({uni(anom, -1, 1), uni(anom, 0.2, 1), uni(anom, -1, 1)});
        st_amp = uni(anom, 0.15, 0.3) * (U(anom) < 0.5 ? -1.0 : 1.0);
        bool any_dropped = false;
        std::vector<std::size_t> inside;
        for (std::size_t i = 0; i < beats.size(); ++i) {
            Beat& b = beats[i];
            if (!in_span(b.r_time, fs, *anomaly, total) || b.r_time < 0.0 || b.r_time >= o.seconds) continue;
            inside.push_back(i);
            switch (anomaly->kind) {
                case AnomalyKind::QrsAmplitude: b.qrs_scale = qrs_scale; break;
                case AnomalyKind::StShift: b.st = true; break;
                case AnomalyKind::BeatDropout:
                    b.dropped = U(anom) < drop_p;
                    any_dropped |= b.dropped;
                    break;
                case AnomalyKind::RateJitter: break;
            }
        }
        if (anomaly->kind == AnomalyKind::BeatDropout && !any_dropped && !inside.empty())
            beats[inside[inside.size() / 2]].dropped = true;
    }

    Tensor sig({kLeads, total});
    const auto& axes = lead_axes();
    const double dt = 1.0 / fs;
    auto add_bump = [&](double center, double width, const Vec3& v) {
        const auto lo = static_cast<std::ptrdiff_t>(std::floor((center - 5 * width) * fs));
        const auto hi = static_cast<std::ptrdiff_t>(std::ceil((center + 5 * width) * fs));
        std::array<double, kLeads> proj{};
        for (std::size_t l = 0; l < kLeads; ++l) proj[l] = dot(v, axes[l]) * gain[l];
        for (std::ptrdiff_t n = std::max<std::ptrdiff_t>(lo, 0); n <= hi && n < static_cast<std::ptrdiff_t>(total);
             ++n) {
            const double z = (static_cast<double>(n) * dt - center) / width;
            const double g = std::exp(-0.5 * z * z);
            for (std::size_t l = 0; l < kLeads; ++l) sig.at(l, static_cast<std::size_t>(n)) += proj[l] * g;
        }
    };
    for (const Beat& b : beats) {
        for (int w = 0; w < kWaves; ++w) {
            const WaveShape& ws = waves[static_cast<std::size_t>(w)];
            if (b.dropped && w != P) continue;
            double amp = ws.amp;
            if (w == Q || w == R || w == S) amp *= b.qrs_scale;
            const double offset = w == T ? ws.offset * b.qt_scale : ws.offset;
            add_bump(b.r_time + offset, ws.width, {amp * ws.dir[0], amp * ws.dir[1], amp * ws.dir[2]});
        }
        if (b.st) {
            // Plateau from the end of QRS to the T upstroke with soft 10 ms edges.
            const double a = b.r_time + 0.06, z = b.r_time + 0.22 * b.qt_scale;
            const auto lo = static_cast<std::ptrdiff_t>(std::floor((a - 0.05) * fs));
            const auto hi = static_cast<std::ptrdiff_t>(std::ceil((z + 0.05) * fs));
            for (std::ptrdiff_t n = std::max<std::ptrdiff_t>(lo, 0); n <= hi && n < static_cast<std::ptrdiff_t>(total);
                 ++n) {
                const double tt = static_cast<double>(n) * dt;
                const double box = 1.0 / (1.0 + std::exp(-(tt - a) / 0.01)) / (1.0 + std::exp((tt - z) / 0.01));
                for (std::size_t l = 0; l < kLeads; ++l)
                    sig.at(l, static_cast<std::size_t>(n)) += st_amp * dot(st_dir, axes[l]) * gain[l] * box;
            }
        }
    }

    // Noise, baseline wander, mains interference.
    for (std::size_t l = 0; l < kLeads; ++l) {
        const double f1 = uni(noise, 0.05, 0.3), f2 = uni(noise, 0.1, 0.45);
        const double p1 = uni(noise, 0, 2 * std::numbers::pi), p2 = uni(noise, 0, 2 * std::numbers::pi);
        const double a1 = o.wander_amp * uni(noise, 0.5, 1.0), a2 = 0.5 * o.wander_amp * uni(noise, 0.5, 1.0);
        const double pm = uni(noise, 0, 2 * std::numbers::pi), am = o.mains_amp * uni(noise, 0.5, 1.0);
        for (std::size_t n = 0; n < total; ++n) {
            const double tt = static_cast<double>(n) * dt;
            sig.at(l, n) += a1 * std::sin(2 * std::numbers::pi * f1 * tt + p1) +
                            a2 * std::sin(2 * std::numbers::pi * f2 * tt + p2) +
                            am * std::sin(2 * std::numbers::pi * o.mains_freq * tt + pm) + o.noise_sd * N01(noise);
        }
    }

    EcgRecord rec;
    rec.signal = std::move(sig);
    rec.sampling_rate = fs;
    rec.provenance = Provenance::Synthetic;
    rec.label = anomaly ? Label::Anomalous : Label::Normal;
    return rec;
}

DatasetIndex synth_dataset(const SynthDatasetOptions& o, const fs::path& out_dir) {
    if (o.n_normal + o.n_anomalous < 2) fail(ErrorKind::Config, "a synthetic dataset needs at least 2 records");
    const std::size_t n_anom = o.kinds.empty() ? 0 : o.n_anomalous;
    const std::size_t n = o.n_normal + n_anom;
    fs::create_directories(out_dir / "records");

    // Split assignment: shuffled normals, then anomalies.
    std::mt19937_64 split_rng(derive_seed(o.seed, "split"));
    std::vector<std::size_t> normal_order(o.n_normal);
    std::iota(normal_order.begin(), normal_order.end(), 0);
    std::shuffle(normal_order.begin(), normal_order.end(), split_rng);
    std::vector<Split> splits(n, Split::Test);
    const auto count = [](double frac, std::size_t total) {
        return static_cast<std::size_t>(std::llround(frac * static_cast<double>(total)));
    };
    const std::size_t n_train = count(o.train_fraction, o.n_normal);
    const std::size_t n_val = count(o.val_fraction, o.n_normal);
    const std::size_t n_cal = count(o.calibration_fraction, o.n_normal);
    if (n_train + n_val + n_cal > o.n_normal) fail(ErrorKind::Config, "split fractions exceed 1");
    for (std::size_t i = 0; i < o.n_normal; ++i) {
        const std::size_t r = normal_order[i];
        splits[r] = i < n_train ? Split::Train
                    : i < n_train + n_val ? Split::Val
                    : i < n_train + n_val + n_cal ? Split::Calibration
                                                  : Split::Test;
    }
    const std::size_t anom_cal = count(o.anomalous_calibration_fraction, n_anom);
    for (std::size_t i = 0; i < n_anom; ++i) splits[o.n_normal + i] = i < anom_cal ? Split::Calibration : Split::Test;

    DatasetIndex index;
    index.entries.resize(n);
    const auto total = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ii = 0; ii < total; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        char id[32];
        std::snprintf(id, sizeof id, "syn%05zu", i);
        std::optional<SynthAnomaly> anomaly;
        if (i >= o.n_normal) anomaly = SynthAnomaly{o.kinds[(i - o.n_normal) % o.kinds.size()], 0, 0};
        EcgRecord rec = synth_record(derive_seed(o.seed, std::string("record/") + id), anomaly, o.signal);
        rec.record_id = id;

        IndexEntry& e = index.entries[i];
        e.record_id = id;
        e.path = fs::absolute(out_dir / "records" / (std::string(id) + ".npy"));
        e.label = rec.label;
        e.provenance = Provenance::Synthetic;
        e.split = splits[i];
        e.codes = {anomaly ? anomaly_code(anomaly->kind) : std::string("SR")};
        npy::save(e.path, rec.signal);

        nlohmann::json side = {{"sampling_rate", rec.sampling_rate},
                               {"codes", e.codes},
                               {"anomaly", anomaly ? nlohmann::json(to_string(anomaly->kind)) : nlohmann::json()}};
        std::ofstream(out_dir / "records" / (std::string(id) + ".json")) << side.dump() << "\n";
    }
    index.validate();
    write_manifest(index, out_dir / "manifest.csv");
    return index;
}

}  // namespace ecgad

#pragma once

// Synthetic 12-lead ECG corpus: Gaussian P/Q/R/S/T bumps per beat projected
// onto the leads through a cardiac dipole, plus noise, baseline wander and
// mains interference.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ecgad/ingest.hpp"

namespace ecgad {

enum class AnomalyKind { QrsAmplitude, StShift, BeatDropout, RateJitter };

std::string to_string(AnomalyKind kind);
// Unknown names are config errors.
AnomalyKind parse_anomaly_kind(const std::string& text);
std::vector<AnomalyKind> all_anomaly_kinds();
// Diagnosis code written to the manifest for an anomaly kind.
std::string anomaly_code(AnomalyKind kind);

struct SynthOptions {
    int sampling_rate = 500;
    double seconds = 10.0;
    double hr_min = 60.0, hr_max = 90.0;
    double noise_sd = 0.02;       // mV
    double wander_amp = 0.08;     // mV
    double mains_amp = 0.03;      // mV
    double mains_freq = 60.0;
    // QRS amplitude anomaly factor range. Attenuation survives per-record
    // z-scoring as a change of QRS relative to P/T and noise.
    double qrs_scale_min = 0.25, qrs_scale_max = 0.5;
    // Rate jitter: each RR interval is multiplied by U(min, max).
    double jitter_min = 0.55, jitter_max = 1.45;
};

struct SynthAnomaly {
    AnomalyKind kind = AnomalyKind::StShift;
    // Affected sample range [begin, end); end == 0 means the whole record.
    std::size_t begin = 0, end = 0;
};

// Deterministic in seed. The baseline beats and noise are drawn from
// streams independent of the anomaly, so a record with and without an
// amplitude or ST anomaly differs only where the anomaly acts.
EcgRecord synth_record(std::uint64_t seed, const std::optional<SynthAnomaly>& anomaly,
                       const SynthOptions& options = {});

struct SynthDatasetOptions {
    std::size_t n_normal = 200;
    std::size_t n_anomalous = 0;
    std::vector<AnomalyKind> kinds;  // cycled over anomalous records; empty forces n_anomalous = 0
    std::uint64_t seed = 0;
    // Fractions of the normal records; the remainder goes to test.
    double train_fraction = 0.6;
    double val_fraction = 0.1;
    double calibration_fraction = 0.0;
    // Fraction of anomalous records placed in the calibration split.
    double anomalous_calibration_fraction = 0.0;
    SynthOptions signal;
};

// Writes <out>/records/<id>.npy with a sidecar <id>.json and
// <out>/manifest.csv; returns the index (absolute paths).
DatasetIndex synth_dataset(const SynthDatasetOptions& options, const std::filesystem::path& out_dir);

}  // namespace ecgad

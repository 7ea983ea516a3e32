#pragma once

#include <complex>
#include <string>
#include <vector>

#include "ecgad/ingest.hpp"
#include "ecgad/tensor.hpp"

namespace ecgad {

struct FilterSpec {
    double band_low = 0.5;
    double band_high = 100.0;
    int band_order = 3;
    double notch_freq = 60.0;
    double notch_quality = 30.0;

    // 0 < band_low < band_high < fs/2 and notch_freq < fs/2.
    void validate(int sampling_rate) const;
};

// Second-order sections, 6 coefficients each: b0 b1 b2 a0 a1 a2 (a0 == 1).
struct Sos {
    std::vector<double> coeffs;
    std::size_t sections() const { return coeffs.size() / 6; }
    // Complex frequency response at f Hz for sampling rate fs.
    std::complex<double> response(double f, double fs) const;
};

// Digital Butterworth bandpass via bilinear transform with prewarped edges.
Sos design_butterworth_bandpass(int order, double low, double high, double fs);
// Second-order IIR notch at f0 with quality factor Q (-3 dB width f0 / Q).
Sos design_notch(double f0, double quality, double fs);

// Edge padding used by the forward-backward passes: three times the
// digital filter order.
std::size_t filtfilt_padlen(const Sos& sos);

// Zero-phase filtering of every lead. Records shorter than the edge padding
// are rejected.
EcgRecord bandpass(const EcgRecord& record, const FilterSpec& spec);
EcgRecord notch(const EcgRecord& record, const FilterSpec& spec);

// Per-lead (x - mean) / (std + eps) with the population standard deviation.
EcgRecord zscore(const EcgRecord& record, double eps = 1e-8);

struct PreprocessOptions {
    FilterSpec filter;
    double eps = 1e-8;
    bool apply_bandpass = true;
    bool apply_notch = true;
    bool apply_zscore = true;
};

// bandpass -> notch -> zscore, each step switchable.
EcgRecord preprocess(const EcgRecord& record, const PreprocessOptions& options);

// n overlapping windows of a record: windows is [n x leads x m] and window i
// starts at sample i * stride.
struct WindowBatch {
    Tensor windows;
    std::vector<std::size_t> starts;
    std::size_t window_len = 0;
    std::size_t stride = 0;
    std::string source_id;

    std::size_t count() const { return starts.size(); }
};

// floor((T - m) / s) + 1
std::size_t window_count(std::size_t samples, std::size_t window_len, std::size_t stride);

WindowBatch segment(const Tensor& signal, std::size_t window_len = 500, std::size_t stride = 250,
                    std::string source_id = {});
inline WindowBatch segment(const EcgRecord& record, std::size_t window_len = 500, std::size_t stride = 250) {
    return segment(record.signal, window_len, stride, record.record_id);
}

}  // namespace ecgad

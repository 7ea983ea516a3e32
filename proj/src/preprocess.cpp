#include "ecgad/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "ecgad/error.hpp"
#include "ecgad/kernels.hpp"

namespace ecgad {

using cplx = std::complex<double>;

void FilterSpec::validate(int sampling_rate) const {
    const double nyquist = sampling_rate / 2.0;
    if (notch_freq >= nyquist || notch_freq <= 0.0)
        fail(ErrorKind::Config, "notch frequency " + std::to_string(notch_freq) + " Hz must lie in (0, " +
                                    std::to_string(nyquist) + ") Hz");
    if (!(band_low > 0.0 && band_low < band_high && band_high < nyquist))
        fail(ErrorKind::Config, "bandpass edges must satisfy 0 < low < high < fs/2");
    if (band_order < 1) fail(ErrorKind::Config, "bandpass order must be at least 1");
    if (notch_quality <= 0.0) fail(ErrorKind::Config, "notch quality must be positive");
}

cplx Sos::response(double f, double fs) const {
    const cplx zinv = std::polar(1.0, -2.0 * std::numbers::pi * f / fs);
    cplx h = 1.0;
    for (std::size_t s = 0; s < sections(); ++s) {
        const double* c = coeffs.data() + 6 * s;
        h *= (c[0] + c[1] * zinv + c[2] * zinv * zinv) / (c[3] + c[4] * zinv + c[5] * zinv * zinv);
    }
    return h;
}

Sos design_butterworth_bandpass(int order, double low, double high, double fs) {
    const double pi = std::numbers::pi;
    // Prewarped analog band edges (rad/s).
    const double wl = 2.0 * fs * std::tan(pi * low / fs);
    const double wh = 2.0 * fs * std::tan(pi * high / fs);
    const double bw = wh - wl;
    const double w0 = std::sqrt(wl * wh);

    // Analog lowpass prototype poles on the unit circle, left half plane.
    std::vector<cplx> poles;
    for (int k = 0; k < order; ++k)
        poles.push_back(std::polar(1.0, pi * (2.0 * k + order + 1) / (2.0 * order)));

    // Lowpass -> bandpass: each pole splits into two; `order` zeros at s = 0.
    std::vector<cplx> bp;
    for (const cplx& p : poles) {
        const cplx pl = p * bw / 2.0;
        const cplx root = std::sqrt(pl * pl - w0 * w0);
        bp.push_back(pl + root);
        bp.push_back(pl - root);
    }
    double gain = std::pow(bw, order);

    // Bilinear transform. Zeros: s = 0 -> z = 1, s = inf -> z = -1.
    const double fs2 = 2.0 * fs;
    cplx num = 1.0, den = 1.0;
    for (int k = 0; k < order; ++k) num *= fs2;  // (fs2 - 0) for each zero at the origin
    std::vector<cplx> zp;
    for (const cplx& p : bp) {
        den *= (fs2 - p);
        zp.push_back((fs2 + p) / (fs2 - p));
    }
    gain *= (num / den).real();

    // Pair poles into sections: conjugate pairs first, then real poles two by two.
    std::vector<cplx> complex_poles, real_poles;
    for (const cplx& p : zp) {
        if (std::abs(p.imag()) > 1e-12 * std::max(1.0, std::abs(p)))
            complex_poles.push_back(p);
        else
            real_poles.push_back(p.real());
    }
    std::vector<std::array<double, 2>> denominators;
    std::vector<bool> taken(complex_poles.size(), false);
    for (std::size_t i = 0; i < complex_poles.size(); ++i) {
        if (taken[i] || complex_poles[i].imag() < 0) continue;
        taken[i] = true;
        // its conjugate partner
        for (std::size_t j = 0; j < complex_poles.size(); ++j)
            if (!taken[j] && std::abs(complex_poles[j] - std::conj(complex_poles[i])) < 1e-9) {
                taken[j] = true;
                break;
            }
        const cplx p = complex_poles[i];
        denominators.push_back({-2.0 * p.real(), std::norm(p)});
    }
    std::sort(real_poles.begin(), real_poles.end(), [](cplx a, cplx b) { return a.real() < b.real(); });
    for (std::size_t i = 0; i + 1 < real_poles.size(); i += 2) {
        const double p1 = real_poles[i].real(), p2 = real_poles[i + 1].real();
        denominators.push_back({-(p1 + p2), p1 * p2});
    }
    if (denominators.size() != static_cast<std::size_t>(order))
        fail(ErrorKind::Config, "bandpass design failed to pair poles into sections");

    // Every section gets one zero at +1 and one at -1: b = [1, 0, -1].
    Sos sos;
    for (std::size_t s = 0; s < denominators.size(); ++s) {
        const double k = s == 0 ? gain : 1.0;
        sos.coeffs.insert(sos.coeffs.end(), {k, 0.0, -k, 1.0, denominators[s][0], denominators[s][1]});
    }
    return sos;
}

Sos design_notch(double f0, double quality, double fs) {
    const double w0 = 2.0 * std::numbers::pi * f0 / fs;
    const double bw = w0 / quality;
    const double beta = std::tan(bw / 2.0);
    const double gain = 1.0 / (1.0 + beta);
    const double c = std::cos(w0);
    return Sos{{gain, -2.0 * gain * c, gain, 1.0, -2.0 * gain * c, 2.0 * gain - 1.0}};
}

std::size_t filtfilt_padlen(const Sos& sos) { return 3 * 2 * sos.sections(); }

namespace {

EcgRecord apply_filtfilt(const EcgRecord& record, const Sos& sos) {
    const std::size_t padlen = filtfilt_padlen(sos);
    if (record.samples() <= padlen)
        fail(ErrorKind::Data, "record '" + record.record_id + "' has " + std::to_string(record.samples()) +
                                  " samples, filtering needs more than " + std::to_string(padlen));
    EcgRecord out = record;
    kernels::sosfiltfilt_rows(sos.coeffs, out.signal.data(), out.leads(), out.samples(), padlen);
    return out;
}

}  // namespace

EcgRecord bandpass(const EcgRecord& record, const FilterSpec& spec) {
    spec.validate(record.sampling_rate);
    return apply_filtfilt(record, design_butterworth_bandpass(spec.band_order, spec.band_low, spec.band_high,
                                                              record.sampling_rate));
}

EcgRecord notch(const EcgRecord& record, const FilterSpec& spec) {
    spec.validate(record.sampling_rate);
    return apply_filtfilt(record, design_notch(spec.notch_freq, spec.notch_quality, record.sampling_rate));
}

EcgRecord zscore(const EcgRecord& record, double eps) {
    EcgRecord out = record;
    const std::size_t T = record.samples();
    for (std::size_t l = 0; l < record.leads(); ++l) {
        double* x = out.signal.data() + l * T;
        double mean = 0.0;
        for (std::size_t t = 0; t < T; ++t) mean += x[t];
        mean /= static_cast<double>(T);
        double var = 0.0;
        for (std::size_t t = 0; t < T; ++t) var += (x[t] - mean) * (x[t] - mean);
        const double sd = std::sqrt(var / static_cast<double>(T));
        const double inv = 1.0 / (sd + eps);
        for (std::size_t t = 0; t < T; ++t) x[t] = (x[t] - mean) * inv;
    }
    return out;
}

EcgRecord preprocess(const EcgRecord& record, const PreprocessOptions& options) {
    EcgRecord out = record;
    if (options.apply_bandpass) out = bandpass(out, options.filter);
    if (options.apply_notch) out = notch(out, options.filter);
    if (options.apply_zscore) out = zscore(out, options.eps);
    return out;
}

std::size_t window_count(std::size_t samples, std::size_t window_len, std::size_t stride) {
    if (stride == 0 || stride >= window_len)
        fail(ErrorKind::Config, "stride must satisfy 0 < s < m (s=" + std::to_string(stride) +
                                    ", m=" + std::to_string(window_len) + ")");
    if (window_len > samples)
        fail(ErrorKind::Shape, "window length " + std::to_string(window_len) + " exceeds record length " +
                                   std::to_string(samples));
    return (samples - window_len) / stride + 1;
}

WindowBatch segment(const Tensor& signal, std::size_t window_len, std::size_t stride, std::string source_id) {
    if (signal.rank() != 2) fail(ErrorKind::Shape, "segment expects a [leads x T] signal");
    const std::size_t leads = signal.dim(0), T = signal.dim(1);
    const std::size_t n = window_count(T, window_len, stride);
    WindowBatch batch;
    batch.windows = Tensor({n, leads, window_len});
    batch.window_len = window_len;
    batch.stride = stride;
    batch.source_id = std::move(source_id);
    for (std::size_t i = 0; i < n; ++i) {
        batch.starts.push_back(i * stride);
        for (std::size_t l = 0; l < leads; ++l)
            std::copy_n(signal.data() + l * T + i * stride, window_len, &batch.windows.at(i, l, 0));
    }
    return batch;
}

}  // namespace ecgad

#include <doctest.h>

#include <cmath>
#include <random>

#include "ecgad/preprocess.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ecgad;

using oracle::tone_amplitude;
using oracle::tone_record;

namespace {

double max_abs(const EcgRecord& r) {
    double m = 0.0;
    for (double v : r.signal.values()) m = std::max(m, std::abs(v));
    return m;
}

PreprocessOptions filters_only() {
    PreprocessOptions o;
    o.apply_zscore = false;
    return o;
}

}  // namespace

TEST_CASE("window count formula and index-enumeration oracle") {
    CHECK(window_count(5000, 500, 250) == 19);
    CHECK(window_count(5001, 500, 250) == 19);
    CHECK(window_count(500, 500, 250) == 1);

    std::mt19937_64 rng(1);
    for (int k = 0; k < 1000; ++k) {
        const std::size_t T = std::uniform_int_distribution<std::size_t>(2, 10000)(rng);
        const std::size_t m = std::uniform_int_distribution<std::size_t>(2, T)(rng);
        const std::size_t s = std::uniform_int_distribution<std::size_t>(1, m - 1)(rng);
        CHECK(window_count(T, m, s) == (T - m) / s + 1);
        CHECK(oracle::windows_match(T, m, s));
    }

    const Tensor sig({12, 1000}, 0.0);
    CHECK(test::error_kind([&] { segment(sig, 500, 500); }) == ErrorKind::Config);
    CHECK(test::error_kind([&] { segment(sig, 500, 0); }) == ErrorKind::Config);
    CHECK(test::error_kind([&] { segment(sig, 1001, 250); }) == ErrorKind::Shape);
}

TEST_CASE("bandpass design meets its band edges") {
    const Sos bp = design_butterworth_bandpass(3, 0.5, 100.0, 500.0);
    CHECK(bp.sections() == 3);
    CHECK(std::abs(std::abs(bp.response(10.0, 500.0)) - 1.0) < 1e-3);
    // -3 dB at both prewarped edges.
    CHECK(std::abs(bp.response(0.5, 500.0)) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
    CHECK(std::abs(bp.response(100.0, 500.0)) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
    CHECK(std::abs(bp.response(0.0, 500.0)) < 1e-9);
    CHECK(20.0 * std::log10(std::abs(bp.response(150.0, 500.0))) <= -10.0);

    const Sos n60 = design_notch(60.0, 30.0, 500.0);
    CHECK(std::abs(n60.response(60.0, 500.0)) < 1e-9);
    CHECK(std::abs(n60.response(0.0, 500.0)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(n60.response(61.0, 500.0)) == doctest::Approx(std::sqrt(0.5)).epsilon(0.02));
    CHECK(filtfilt_padlen(bp) == 18);
}

TEST_CASE("zero-phase filtering of pure tones") {
    const std::size_t n = 5000, lo = 1000, hi = 4000;
    const PreprocessOptions o = filters_only();

    const EcgRecord t10 = tone_record(10.0, n);
    const EcgRecord y10 = preprocess(t10, o);
    for (std::size_t l = 0; l < 12; ++l) CHECK(std::abs(tone_amplitude(y10, l, 10.0, lo, hi) - 1.0) < 0.02);

    const EcgRecord y60 = notch(tone_record(60.0, n), o.filter);
    for (std::size_t l = 0; l < 12; ++l) CHECK(20.0 * std::log10(tone_amplitude(y60, l, 60.0, lo, hi)) <= -20.0);

    FilterSpec fifty = o.filter;
    fifty.notch_freq = 50.0;
    const EcgRecord y50 = notch(tone_record(50.0, n), fifty);
    CHECK(20.0 * std::log10(tone_amplitude(y50, 0, 50.0, lo, hi)) <= -20.0);

    const EcgRecord y150 = bandpass(tone_record(150.0, n), o.filter);
    CHECK(20.0 * std::log10(tone_amplitude(y150, 0, 150.0, lo, hi)) <= -10.0);

    EcgRecord dc = tone_record(0.0, n);
    for (double& v : dc.signal.values()) v = 2.5;
    CHECK(max_abs(preprocess(dc, o)) / 2.5 < 1e-3);

    EcgRecord tiny = tone_record(10.0, 18);
    CHECK(test::error_kind([&] { bandpass(tiny, o.filter); }) == ErrorKind::Data);
    FilterSpec bad = o.filter;
    bad.band_high = 300.0;
    CHECK(test::error_kind([&] { bandpass(t10, bad); }) == ErrorKind::Config);
}

TEST_CASE("passband tones come back aligned sample for sample") {
    // Zero phase once the high-pass start-up transient has decayed.
    for (double f : {5.0, 10.0, 40.0}) {
        const EcgRecord x = tone_record(f, 5000);
        const EcgRecord y = preprocess(x, filters_only());
        double err = 0.0;
        for (std::size_t l = 0; l < 12; ++l)
            for (std::size_t t = 2000; t < 3000; ++t) err = std::max(err, std::abs(y.signal.at(l, t) - x.signal.at(l, t)));
        CHECK(err < 0.02);
    }
}

TEST_CASE("z-score normalizes each lead") {
    std::mt19937_64 rng(9);
    for (int k = 0; k < 50; ++k) {
        EcgRecord r = tone_record(0.0, 5000);
        std::normal_distribution<double> g(std::uniform_real_distribution<double>(-50, 50)(rng),
                                           std::uniform_real_distribution<double>(1e-2, 1e2)(rng));
        for (double& v : r.signal.values()) v = g(rng);
        const EcgRecord z = zscore(r);
        for (std::size_t l = 0; l < 12; ++l) {
            double mean = 0.0, var = 0.0;
            for (std::size_t t = 0; t < 5000; ++t) mean += z.signal.at(l, t);
            mean /= 5000.0;
            for (std::size_t t = 0; t < 5000; ++t) var += std::pow(z.signal.at(l, t) - mean, 2);
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(std::sqrt(var / 5000.0) - 1.0) < 1e-3);
        }
    }
    EcgRecord c = tone_record(10.0, 1000);
    for (std::size_t t = 0; t < 1000; ++t) c.signal.at(3, t) = 7.25;
    const EcgRecord z = zscore(c);
    for (std::size_t t = 0; t < 1000; ++t) CHECK(z.signal.at(3, t) == 0.0);
}

TEST_CASE("preprocess composes the enabled steps") {
    const EcgRecord x = tone_record(10.0, 2000);
    PreprocessOptions none;
    none.apply_bandpass = none.apply_notch = none.apply_zscore = false;
    CHECK(preprocess(x, none).signal.values() == x.signal.values());
    PreprocessOptions z_only = none;
    z_only.apply_zscore = true;
    CHECK(preprocess(x, z_only).signal.values() == zscore(x).signal.values());
    const PreprocessOptions all;
    const FilterSpec& f = all.filter;
    CHECK(preprocess(x, all).signal.values() == zscore(notch(bandpass(x, f), f)).signal.values());
}

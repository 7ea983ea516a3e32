#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ecgad/preprocess.hpp"
#include "ecgad/scoring.hpp"
#include "ecgad/synth.hpp"
#include "ecgad/train.hpp"
#include "test_util.hpp"

using namespace ecgad;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    for (double& x : v) x = g(rng);
    return v;
}

ModelConfig small_config(ModelKind kind) {
    ModelConfig c = ModelConfig::defaults(kind);
    c.channels = {8, 8, 4};
    c.latent_dim = 4;
    c.hidden_dim = 8;
    c.mha_heads = 2;
    c.lead_heads = 2;
    return c;
}

EcgRecord random_record(std::size_t T, std::uint64_t seed) {
    EcgRecord r;
    r.record_id = "r" + std::to_string(seed);
    r.signal = Tensor({12, T});
    const auto v = randn(12 * T, seed);
    std::copy(v.begin(), v.end(), r.signal.data());
    return r;
}

}  // namespace

TEST_CASE("cae score examples") {
    const auto w = randn(12 * 500, 1);
    CHECK(score_cae(w, w) == 0.0);
    std::vector<double> r(w);
    for (double& v : r) v -= 1.0;
    CHECK(score_cae(w, r) == doctest::Approx(1.0).epsilon(1e-12));
    const std::vector<double> zeros(w.size(), 0.0);
    CHECK(score_cae(w, zeros) > 0.0);

    // Joint MSE over leads equals the mean of per-lead MSEs.
    const auto noisy = randn(w.size(), 2);
    double per_lead = 0.0;
    for (std::size_t l = 0; l < 12; ++l) {
        double s = 0.0;
        for (std::size_t t = 0; t < 500; ++t) s += std::pow(w[l * 500 + t] - noisy[l * 500 + t], 2);
        per_lead += s / 500.0;
    }
    CHECK(score_cae(w, noisy) == doctest::Approx(per_lead / 12.0).epsilon(1e-12));
}

TEST_CASE("vae score examples") {
    const auto w = randn(24, 3);
    const std::vector<double> zero(4, 0.0);
    CHECK(score_vae(w, w, zero, zero) == 0.0);
    const std::vector<double> mu{1.0}, lv{0.0};
    CHECK(score_vae(w, w, mu, lv) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(test::error_kind([&] { score_vae(w, w, mu, zero); }) == ErrorKind::Shape);
}

TEST_CASE("attention-weighted score identities") {
    const std::size_t L = 12, T = 500, d = 3;
    const auto w = randn(L * T, 4);
    const auto r = randn(L * T, 5);
    const std::vector<double> zero(T * d, 0.0);

    const std::vector<double> uniform(T, 1.0 / T);
    CHECK(std::abs(score_vae_mha(w, r, uniform, zero, zero, L) - score_cae(w, r)) <= 1e-10);

    std::vector<double> point(T, 0.0);
    const std::size_t t_star = 123;
    point[t_star] = 1.0;
    double e = 0.0;
    for (std::size_t l = 0; l < L; ++l) e += std::pow(w[l * T + t_star] - r[l * T + t_star], 2);
    CHECK(score_vae_mha(w, r, point, zero, zero, L) == doctest::Approx(e / L).epsilon(1e-12));

    // Perfect reconstruction at the prior scores zero for any attention.
    std::vector<double> alpha(T);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u;
    double sum = 0.0;
    for (double& a : alpha) sum += (a = u(rng));
    for (double& a : alpha) a /= sum;
    CHECK(score_vae_mha(w, w, alpha, zero, zero, L) == 0.0);

    CHECK(test::error_kind([&] { score_vae_mha(w, r, {}, zero, zero, L); }) == ErrorKind::ModelKind);
    const std::vector<double> short_alpha(T - 1, 1.0 / (T - 1));
    CHECK(test::error_kind([&] { score_vae_mha(w, r, short_alpha, zero, zero, L); }) == ErrorKind::Shape);
}

TEST_CASE("aggregate and decide") {
    CHECK(aggregate(std::vector<double>{2, 2, 2}) == 2.0);
    CHECK(aggregate(std::vector<double>{0, 1}) == 0.5);
    CHECK(test::error_kind([] { aggregate(std::vector<double>{}); }) == ErrorKind::Data);

    auto s = randn(19, 7);
    for (double& v : s) v = std::abs(v);
    long double oracle = 0.0L;
    for (double v : s) oracle += v;
    const double S = aggregate(s);
    CHECK(S == doctest::Approx(static_cast<double>(oracle / 19.0L)).epsilon(1e-14));
    CHECK(S >= *std::min_element(s.begin(), s.end()));
    CHECK(S <= *std::max_element(s.begin(), s.end()));
    std::reverse(s.begin(), s.end());
    CHECK(aggregate(s) == doctest::Approx(S).epsilon(1e-14));

    CHECK(decide(0.9, 0.5) == Decision::Anomalous);
    CHECK(decide(0.5, 0.5) == Decision::Normal);
    CHECK(to_string(Decision::Anomalous) == "anomalous");
    // The decision steps exactly once as S crosses tau.
    int flips = 0;
    Decision prev = decide(-1.0, 0.3);
    for (double x = -1.0; x <= 1.0; x += 0.01) {
        const Decision cur = decide(x, 0.3);
        flips += cur != prev;
        prev = cur;
    }
    CHECK(flips == 1);
}

TEST_CASE("explain overlap-averages onto the timeline") {
    const auto model = make_model(small_config(ModelKind::Cae), 1);
    const EcgRecord rec = random_record(5100, 8);
    const AnomalyReport rep = explain(rec, *model, 0.5);
    REQUIRE(rep.scores.size() == 19);
    CHECK(rep.pointwise_error.shape() == std::vector<std::size_t>{12, 5100});
    CHECK(rep.attention.empty());
    CHECK(rep.aggregate == aggregate(rep.scores));
    CHECK(rep.decision == decide(rep.aggregate, 0.5));

    // Direct enumeration of the windows covering each sample.
    const WindowBatch wb = segment(rec);
    const WindowScores ws = score_windows(*model, wb.windows);
    for (std::size_t t : {0u, 100u, 250u, 499u, 500u, 2600u, 4999u}) {
        for (std::size_t l : {0u, 7u}) {
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < wb.count(); ++i) {
                const std::size_t s0 = wb.starts[i];
                if (t < s0 || t >= s0 + 500) continue;
                sum += std::pow(wb.windows.at(i, l, t - s0) - ws.recon.at(i, l, t - s0), 2);
                ++n;
            }
            CHECK(n == (t < 250 || t >= 4750 ? 1u : 2u));
            CHECK(rep.pointwise_error.at(l, t) == doctest::Approx(sum / n).epsilon(1e-14));
        }
    }
    for (std::size_t t = 5000; t < 5100; ++t) CHECK(std::isnan(rep.pointwise_error.at(3, t)));

    // Pure function of (record, model, tau).
    CHECK(report_to_json(explain(rec, *model, 0.5)).dump() == report_to_json(rep).dump());

    const nlohmann::json j = report_to_json(rep);
    CHECK(j["attention"].is_null());
    CHECK(j["pointwise_error"].size() == 12);
    CHECK(j["pointwise_error"][0][5050].is_null());
    CHECK(j["decision"] == to_string(rep.decision));

    CHECK(test::error_kind([&] { explain(random_record(400, 9), *model, 0.5); }) == ErrorKind::Data);
    EcgRecord two_leads;
    two_leads.signal = Tensor({2, 1000});
    CHECK(test::error_kind([&] { explain(two_leads, *model, 0.5); }) == ErrorKind::Shape);
}

TEST_CASE("attention variant reports a normalized attention timeline") {
    const auto model = make_model(small_config(ModelKind::VaeMha), 2);
    const EcgRecord rec = random_record(1000, 10);
    const AnomalyReport rep = explain(rec, *model, 1.0);
    REQUIRE(rep.attention.shape() == std::vector<std::size_t>{1000});
    const WindowScores ws = score_windows(*model, segment(rec).windows);
    for (std::size_t i = 0; i < ws.scores.size(); ++i) {
        double s = 0.0;
        for (std::size_t t = 0; t < 500; ++t) s += ws.attention.at(i, t);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::isfinite(ws.scores[i]));
    }
    CHECK(report_to_json(rep)["attention"].size() == 1000);
}

TEST_CASE("multi-draw scoring is seeded") {
    const auto model = make_model(small_config(ModelKind::Vae), 3);
    const WindowBatch wb = segment(random_record(1000, 11));
    ScoreOptions o;
    o.num_draws = 4;
    o.seed = 42;
    const auto a = score_windows(*model, wb.windows, o).scores;
    const auto b = score_windows(*model, wb.windows, o).scores;
    CHECK(a == b);
    const auto mean = score_windows(*model, wb.windows).scores;
    CHECK(a != mean);
}

TEST_CASE("json numbers carry six significant digits") {
    CHECK(round_sig6(0.123456789) == 0.123457);
    CHECK(round_sig6(123456789.0) == 123457000.0);
    CHECK(round_sig6(0.0) == 0.0);
    CHECK(std::isnan(round_sig6(std::nan(""))));
}

TEST_CASE("trained cae scores amplified windows above normal ones") {
    PreprocessOptions prep;
    std::vector<EcgRecord> recs;
    for (std::uint64_t s = 0; s < 48; ++s) recs.push_back(preprocess(synth_record(1000 + s, std::nullopt), prep));
    std::vector<Tensor> parts;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 40; ++i) {
        parts.push_back(segment(recs[i]).windows);
        n += parts.back().dim(0);
    }
    Tensor train_w({n, 12, 500});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data(), p.size(), train_w.data() + off);
        off += p.size();
    }
    ModelConfig cfg = small_config(ModelKind::Cae);
    cfg.epochs = 4;
    cfg.batch_size = 32;
    TrainOptions to;
    to.seed = 1;
    to.schedule = BetaSchedule::for_kind(ModelKind::Cae, cfg.epochs);
    const TrainResult tr = train(cfg, train_w, gather_windows(train_w, {0, 1, 2, 3}), to);

    std::mt19937_64 rng(12);
    int wins = 0;
    const int seeds = 40;
    for (int k = 0; k < seeds; ++k) {
        const auto& rec = recs[40 + static_cast<std::size_t>(k) % 8];
        const WindowBatch wb = segment(rec);
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, wb.count() - 1)(rng);
        Tensor pair({2, 12, 500});
        std::copy_n(wb.windows.data() + i * 6000, 6000, pair.data());
        for (std::size_t e = 0; e < 6000; ++e) pair[6000 + e] = 3.0 * pair[e];
        const auto s = score_windows(*tr.best, pair).scores;
        wins += s[1] > s[0];
    }
    CHECK(wins >= 0.95 * seeds);
}

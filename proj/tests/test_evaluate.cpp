#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ecgad/evaluate.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ecgad;


TEST_CASE("confusion counts") {
    const std::vector<int> d{1, 1, 0, 0}, y{1, 0, 1, 0};
    CHECK(confusion(d, y) == Confusion{1, 1, 1, 1});
    const std::vector<int> all{1, 1, 1};
    CHECK(confusion(all, all) == Confusion{3, 0, 0, 0});
    const std::vector<int> shorter{1};
    CHECK(test::error_kind([&] { confusion(shorter, y); }) == ErrorKind::Data);

    std::mt19937_64 rng(5);
    std::bernoulli_distribution b(0.4);
    std::vector<int> dd(500), yy(500);
    for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = b(rng), yy[i] = b(rng);
    const Confusion c = confusion(dd, yy);
    CHECK(c.tp + c.fp + c.fn + c.tn == dd.size());
}

TEST_CASE("precision recall f1") {
    const Prf1 r = prf1({8, 2, 2, 88});
    CHECK(r.precision == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(r.recall == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(r.f1 == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_FALSE(r.precision_degenerate);

    const Prf1 none = prf1({0, 0, 5, 5});
    CHECK(none.precision_degenerate);
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1_degenerate);

    const Prf1 no_pos = prf1({0, 3, 0, 5});
    CHECK(no_pos.recall_degenerate);
    CHECK_FALSE(no_pos.precision_degenerate);
}

TEST_CASE("auroc examples") {
    const std::vector<double> s{0.1, 0.2, 0.8, 0.9};
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(auroc(s, y) == 1.0);
    const std::vector<int> flipped{1, 1, 0, 0};
    CHECK(auroc(s, flipped) == 0.0);
    const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
    CHECK(auroc(flat, y) == 0.5);
    const std::vector<int> one_class{1, 1, 1, 1};
    CHECK(test::error_kind([&] { auroc(s, one_class); }) == ErrorKind::Data);
    const std::vector<int> bad_label{0, 2, 1, 1};
    CHECK(test::error_kind([&] { auroc(s, bad_label); }) == ErrorKind::Data);

    // Uninformative scores on a large sample sit near one half.
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u;
    std::vector<double> rs(10000);
    std::vector<int> ry(10000);
    for (std::size_t i = 0; i < rs.size(); ++i) rs[i] = u(rng), ry[i] = u(rng) < 0.5;
    CHECK(std::abs(auroc(rs, ry) - 0.5) < 0.02);
}

TEST_CASE("auprc examples") {
    const std::vector<double> s{0.1, 0.2, 0.8, 0.9};
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(auprc(s, y) == 1.0);
    const std::vector<double> flat{0.3, 0.3, 0.3, 0.3, 0.3};
    const std::vector<int> y5{1, 0, 0, 1, 0};
    CHECK(auprc(flat, y5) == doctest::Approx(0.4).epsilon(1e-15));
    const std::vector<int> no_pos{0, 0, 0, 0};
    CHECK(test::error_kind([&] { auprc(s, no_pos); }) == ErrorKind::Data);
    // Ranking: pos, neg, pos -> (1/2)(1) + (1/2)(2/3).
    const std::vector<double> s3{3.0, 2.0, 1.0};
    const std::vector<int> y3{1, 0, 1};
    CHECK(auprc(s3, y3) == doctest::Approx(0.5 + 1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("auroc and auprc equal their brute-force oracles on random tied instances") {
    std::mt19937_64 rng(2024);
    for (int k = 0; k < 200; ++k) {
        const oracle::Instance in = oracle::random_instance(rng, 1000);
        CHECK(auroc(in.scores, in.labels) == oracle::auroc(in.scores, in.labels));
        CHECK(auprc(in.scores, in.labels) == oracle::auprc(in.scores, in.labels));
    }
}

TEST_CASE("metric properties") {
    std::mt19937_64 rng(77);
    for (int k = 0; k < 50; ++k) {
        const oracle::Instance in = oracle::random_instance(rng, 300);
        const double a = auroc(in.scores, in.labels);
        const double p = auprc(in.scores, in.labels);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        CHECK(p > 0.0);
        CHECK(p <= 1.0);

        // Rank statistics are invariant under strictly increasing maps.
        std::vector<double> mapped(in.scores.size());
        std::transform(in.scores.begin(), in.scores.end(), mapped.begin(),
                       [](double v) { return std::exp(3.0 * v) + v; });
        CHECK(auroc(mapped, in.labels) == a);
        CHECK(auprc(mapped, in.labels) == p);

        // Negating scores mirrors AUROC.
        std::vector<double> neg(in.scores.size());
        std::transform(in.scores.begin(), in.scores.end(), neg.begin(), [](double v) { return -v; });
        CHECK(auroc(neg, in.labels) == doctest::Approx(1.0 - a).epsilon(1e-12));
    }
}

TEST_CASE("evaluate_scores applies the strict decision rule") {
    const std::vector<double> s{0.1, 0.5, 0.5, 0.9};
    const std::vector<int> y{0, 0, 1, 1};
    ThresholdModel t;
    t.strategy = Strategy::F1Opt;
    t.tau = 0.5;
    const MetricsReport r = evaluate_scores(s, y, t, "cae", "synthetic");
    CHECK(r.confusion == Confusion{1, 0, 1, 2});
    CHECK(r.prf.precision == 1.0);
    CHECK(r.prf.recall == 0.5);
    CHECK(r.strategy == "f1opt");

    const nlohmann::json j = r;
    CHECK(j["confusion"]["tp"] == 1);
    CHECK(j["model"] == "cae");
    CHECK(j["dataset_id"] == "synthetic");

    const std::string csv = benchmark_csv({r});
    CHECK(csv.rfind("model,strategy,precision,recall,f1,auroc,auprc,tp,fp,fn,tn\n", 0) == 0);
    CHECK(csv.find("cae,f1opt,1.000000,0.500000,") != std::string::npos);
}

TEST_CASE("binary labels reject unlabeled records") {
    std::vector<EcgRecord> recs(2);
    recs[0].record_id = "a";
    recs[0].label = Label::Normal;
    recs[1].record_id = "b";
    recs[1].label = Label::Anomalous;
    CHECK(binary_labels(recs) == std::vector<int>{0, 1});
    recs[1].label = Label::Unlabeled;
    CHECK(test::error_kind([&] { binary_labels(recs); }) == ErrorKind::Data);
}

#include "ecgad/evaluate.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ecgad/error.hpp"
#include "ecgad/preprocess.hpp"
#include "ecgad/scoring.hpp"

namespace ecgad {

namespace {

std::size_t count_positives(std::span<const double> scores, std::span<const int> labels, const char* what) {
    if (scores.size() != labels.size())
        fail(ErrorKind::Data, std::string(what) + ": scores and labels differ in length");
    std::size_t P = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) fail(ErrorKind::Data, std::string(what) + ": labels must be 0 or 1");
        P += static_cast<std::size_t>(l);
    }
    return P;
}

std::vector<std::size_t> argsort(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    return order;
}

}  // namespace

Confusion confusion(std::span<const int> decisions, std::span<const int> labels) {
    if (decisions.size() != labels.size())
        fail(ErrorKind::Data, "confusion: " + std::to_string(decisions.size()) + " decisions vs " +
                                  std::to_string(labels.size()) + " labels");
    Confusion c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool d = decisions[i] != 0, l = labels[i] != 0;
        if (d && l) ++c.tp;
        else if (d) ++c.fp;
        else if (l) ++c.fn;
        else ++c.tn;
    }
    return c;
}

Prf1 prf1(const Confusion& c) {
    Prf1 r;
    if (c.tp + c.fp == 0) r.precision_degenerate = true;
    else r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn == 0) r.recall_degenerate = true;
    else r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (r.precision + r.recall == 0.0) r.f1_degenerate = true;
    else r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
    const std::size_t P = count_positives(scores, labels, "auroc");
    const std::size_t N = scores.size() - P;
    if (P == 0 || N == 0) fail(ErrorKind::Data, "auroc is undefined without both classes");
    const auto order = argsort(scores);
    // Twice the rank sum of positives, with tied groups sharing midranks.
    unsigned long long twice_rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const unsigned long long twice_mid = i + 1 + j;  // 2 * mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) twice_rank_sum += twice_mid;
        i = j;
    }
    const unsigned long long twice_u = twice_rank_sum - static_cast<unsigned long long>(P) * (P + 1);
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
    const std::size_t P = count_positives(scores, labels, "auprc");
    if (P == 0) fail(ErrorKind::Data, "auprc is undefined without positives");
    auto order = argsort(scores);
    std::reverse(order.begin(), order.end());
    double ap = 0.0;
    std::size_t tp = 0, fp = 0, prev_tp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double v = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == v; ++i) (labels[order[i]] ? tp : fp)++;
        if (tp != prev_tp) {
            const double dr = static_cast<double>(tp - prev_tp) / static_cast<double>(P);
            ap += dr * (static_cast<double>(tp) / static_cast<double>(tp + fp));
            prev_tp = tp;
        }
    }
    return ap;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = nlohmann::json{{"model", r.model},
                       {"strategy", r.strategy},
                       {"dataset_id", r.dataset_id},
                       {"tau", r.tau},
                       {"precision", r.prf.precision},
                       {"recall", r.prf.recall},
                       {"f1", r.prf.f1},
                       {"auroc", r.auroc},
                       {"auprc", r.auprc},
                       {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn},
                                      {"tn", r.confusion.tn}}},
                       {"degenerate", {{"precision", r.prf.precision_degenerate},
                                       {"recall", r.prf.recall_degenerate},
                                       {"f1", r.prf.f1_degenerate}}}};
}

MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                              const ThresholdModel& threshold, std::string model, std::string dataset_id) {
    std::vector<int> decisions(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i)
        decisions[i] = decide(scores[i], threshold.tau) == Decision::Anomalous ? 1 : 0;
    MetricsReport r;
    r.model = std::move(model);
    r.strategy = to_string(threshold.strategy);
    r.dataset_id = std::move(dataset_id);
    r.tau = threshold.tau;
    r.confusion = confusion(decisions, labels);
    r.prf = prf1(r.confusion);
    r.auroc = auroc(scores, labels);
    r.auprc = auprc(scores, labels);
    return r;
}

std::vector<double> record_scores(const Model& model, const std::vector<EcgRecord>& records, std::size_t stride) {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        if (rec.samples() < model.config().window_len)
            fail(ErrorKind::Data, "record " + rec.record_id + " is shorter than one window");
        const WindowBatch wb = segment(rec.signal, model.config().window_len, stride, rec.record_id);
        out.push_back(aggregate(score_windows(model, wb.windows).scores));
    }
    return out;
}

std::vector<int> binary_labels(const std::vector<EcgRecord>& records) {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (r.label == Label::Unlabeled) fail(ErrorKind::Data, "record " + r.record_id + " has no label");
        out.push_back(r.label == Label::Anomalous ? 1 : 0);
    }
    return out;
}

std::vector<MetricsReport> benchmark(const std::vector<BenchmarkModel>& models,
                                     const std::vector<EcgRecord>& test_records, const std::string& dataset_id,
                                     std::size_t stride) {
    const auto labels = binary_labels(test_records);
    std::vector<MetricsReport> rows;
    for (const auto& m : models) {
        if (!m.model) fail(ErrorKind::Config, "benchmark: model " + m.name + " is not loaded");
        const auto scores = record_scores(*m.model, test_records, stride);
        for (const auto& t : m.thresholds) rows.push_back(evaluate_scores(scores, labels, t, m.name, dataset_id));
    }
    return rows;
}

std::string benchmark_csv(const std::vector<MetricsReport>& rows) {
    std::string out = "model,strategy,precision,recall,f1,auroc,auprc,tp,fp,fn,tn\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%zu,%zu\n", r.prf.precision, r.prf.recall,
                      r.prf.f1, r.auroc, r.auprc, r.confusion.tp, r.confusion.fp, r.confusion.fn, r.confusion.tn);
        out += r.model + "," + r.strategy + buf;
    }
    return out;
}

void write_benchmark(const std::filesystem::path& out_dir, const std::vector<MetricsReport>& rows) {
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(out_dir / "benchmark.csv");
    std::ofstream js(out_dir / "benchmark.json");
    if (!csv || !js) fail(ErrorKind::Runtime, "cannot write benchmark files under " + out_dir.string());
    csv << benchmark_csv(rows);
    js << nlohmann::json(rows).dump(2) << '\n';
}

}  // namespace ecgad

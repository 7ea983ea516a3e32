#pragma once

// Classification metrics and the model x strategy benchmark table.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgad/calibrate.hpp"
#include "ecgad/ingest.hpp"
#include "ecgad/models.hpp"

namespace ecgad {

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    bool operator==(const Confusion&) const = default;
};

// Anomalous (1) is the positive class. Length mismatch is a data error.
Confusion confusion(std::span<const int> decisions, std::span<const int> labels);

struct Prf1 {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    // Undefined ratios are reported as 0 with the flag set.
    bool precision_degenerate = false, recall_degenerate = false, f1_degenerate = false;
};

Prf1 prf1(const Confusion& c);

// P(score of a random positive > score of a random negative), ties counting
// one half. Needs both classes.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Average precision: sum over descending distinct thresholds of
// (R_k - R_{k-1}) P_k. Needs at least one positive.
double auprc(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
    std::string model;
    std::string strategy;
    std::string dataset_id;
    double tau = 0.0;
    Confusion confusion;
    Prf1 prf;
    double auroc = 0.0, auprc = 0.0;
};

void to_json(nlohmann::json& j, const MetricsReport& r);

MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                              const ThresholdModel& threshold, std::string model, std::string dataset_id);

// Aggregate score per prepared record (mean of its window scores).
std::vector<double> record_scores(const Model& model, const std::vector<EcgRecord>& records,
                                  std::size_t stride = 250);

// 1 for anomalous, 0 for normal; unlabeled records are data errors.
std::vector<int> binary_labels(const std::vector<EcgRecord>& records);

struct BenchmarkModel {
    std::string name;
    const Model* model = nullptr;
    std::vector<ThresholdModel> thresholds;
};

// One row per (model, threshold) in input order.
std::vector<MetricsReport> benchmark(const std::vector<BenchmarkModel>& models,
                                     const std::vector<EcgRecord>& test_records, const std::string& dataset_id,
                                     std::size_t stride = 250);

// model,strategy,precision,recall,f1,auroc,auprc,tp,fp,fn,tn
std::string benchmark_csv(const std::vector<MetricsReport>& rows);
void write_benchmark(const std::filesystem::path& out_dir, const std::vector<MetricsReport>& rows);

}  // namespace ecgad

#pragma once

// Experiment configuration, run manifests and the stage functions shared by
// the command-line subcommands and the end-to-end pipeline.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgad/calibrate.hpp"
#include "ecgad/evaluate.hpp"
#include "ecgad/ingest.hpp"
#include "ecgad/models.hpp"
#include "ecgad/preprocess.hpp"
#include "ecgad/scoring.hpp"
#include "ecgad/synth.hpp"

namespace ecgad {

// --- configuration ------------------------------------------------------------

enum class DataSource { Synthetic, Manifest, Raw };

struct ExperimentConfig {
    std::uint64_t seed = 0;

    // [data] synthetic: generate with [synth]. manifest: an index CSV with
    // splits. raw: a CSV of path,codes[,record_id] curated with [curate].
    DataSource source = DataSource::Synthetic;
    std::filesystem::path manifest;
    // Optional separate test index; defaults to the test split of the data.
    std::filesystem::path test_manifest;
    std::string dataset_id = "synthetic";

    SynthDatasetOptions synth;
    CurationOptions curation;
    PreprocessOptions preprocess;
    std::size_t window_len = 500;
    std::size_t stride = 250;

    // [train]
    std::vector<ModelKind> models{ModelKind::Cae, ModelKind::VaeMha};
    std::map<ModelKind, ModelConfig> model_configs;
    std::size_t windows_per_epoch = 0;
    std::size_t val_windows = 0;

    // [calibrate]
    std::vector<Strategy> strategies = all_strategies();
    Strategy default_strategy = Strategy::P95;
    double pot_q = 1e-2;

    // [score]
    ScoreOptions score;

    ExperimentConfig();
    const ModelConfig& model_config(ModelKind kind) const { return model_configs.at(kind); }
    // Cross-field checks; violations are config errors.
    void validate() const;
};

// INI text: sections run, data, synth, curate, preprocess, train, cae, vae,
// vae_mha, calibrate, score. Unknown sections or keys are config errors.
ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every key with its default, loadable by parse_config.
std::string default_config_text();
nlohmann::json config_json(const ExperimentConfig& config);

// --- run manifests ----------------------------------------------------------------

struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> input_hashes;  // path -> hex digest
    std::vector<std::string> outputs;
    std::string started, finished;
    std::string version;
    std::string status = "running";
    std::string failed_stage;
    std::string error;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

inline constexpr const char* kRunManifestName = "run_manifest.json";

// Version plus build identity, e.g. "0.3.0+g1a2b3c4".
std::string version_string();
std::string utc_timestamp();

// Hashes input files (directories recursively, in path order).
std::map<std::string, std::string> hash_inputs(const std::vector<std::filesystem::path>& paths);

// Inputs whose digest differs from the previous manifest in out_dir, each
// logged as a warning. Empty when there is no previous manifest.
std::vector<std::string> detect_drift(const std::filesystem::path& out_dir,
                                      const std::map<std::string, std::string>& current);

void write_run_manifest(const std::filesystem::path& out_dir, const RunManifest& manifest);
RunManifest read_run_manifest(const std::filesystem::path& out_dir);

// --- stages -------------------------------------------------------------------------

// Raw listing: CSV with header path,codes[,record_id]; codes '|' separated,
// relative paths resolved against the CSV's directory.
std::vector<RawEntry> read_raw_listing(const std::filesystem::path& csv);

// <out>/records and <out>/manifest.csv.
DatasetIndex synth_stage(const ExperimentConfig& config, const std::filesystem::path& out);
// <out>/manifest.csv with normal-only train/val splits.
DatasetIndex curate_stage(const std::filesystem::path& raw_csv, const ExperimentConfig& config,
                          const std::filesystem::path& out);
// Per record <out>/<record_id>.npy [n, 12, m] and <record_id>.json
// {record_id, m, s, starts}.
void preprocess_stage(const DatasetIndex& index, const ExperimentConfig& config, const std::filesystem::path& out);
// Windows of one split read back from a preprocess_stage directory, in index order.
Tensor load_split_windows(const DatasetIndex& index, Split split, const std::filesystem::path& windows_dir);

// Best checkpoint in <out>/<kind>, last-epoch weights in <out>/<kind>/final.
// Windows come from windows_dir when given, else are prepared in memory.
std::filesystem::path train_stage(const DatasetIndex& index, const ExperimentConfig& config, ModelKind kind,
                                  const std::filesystem::path& out,
                                  const std::filesystem::path& windows_dir = {});

// Scores the val split (p95, pot) and the calibration split (f1opt,
// youden) and writes <ckpt>/threshold.json. Optional strategies that
// cannot be fitted are skipped with a warning; the default one must fit.
ThresholdSet calibrate_stage(const DatasetIndex& index, const ExperimentConfig& config,
                             const std::filesystem::path& ckpt_dir);

// Scores the test split with every checkpoint and its thresholds; writes
// <out>/benchmark.csv, benchmark.json and scores.csv.
std::vector<MetricsReport> evaluate_stage(const DatasetIndex& test_index, const ExperimentConfig& config,
                                          const std::vector<std::filesystem::path>& ckpt_dirs,
                                          const std::filesystem::path& out);

// Reports for individual recordings; tau defaults to the checkpoint's
// calibrated default threshold. Writes <out>/<record_id>.json.
std::vector<AnomalyReport> score_stage(const std::vector<std::filesystem::path>& inputs,
                                       const ExperimentConfig& config, const std::filesystem::path& ckpt_dir,
                                       std::optional<double> tau, const std::filesystem::path& out);

// curate -> preprocess -> train -> calibrate -> evaluate under out. A
// failing stage is named in the rethrown error, its partial output moved to
// <out>/quarantine and the manifest marked failed.
RunManifest run_pipeline(const ExperimentConfig& config, const std::filesystem::path& config_path,
                         const std::filesystem::path& out);

}  // namespace ecgad

#pragma once

// Training loop and checkpoint storage.
//
// A checkpoint is a directory:
//   weights.bin        float64 little-endian, parameters concatenated
//   weights.json       [{name, shape, offset}] in parameter order
//   config.json        ModelConfig
//   schedule.json      BetaSchedule
//   training_log.csv   epoch,total,recon,kl,beta,val_loss
//   threshold.json     ThresholdModel, written by calibration (optional)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ecgad/ingest.hpp"
#include "ecgad/models.hpp"
#include "ecgad/preprocess.hpp"

namespace ecgad {

struct EpochLog {
    std::size_t epoch = 0;
    double total = 0.0, recon = 0.0, kl = 0.0, beta = 0.0, val_loss = 0.0;
    double mean_abs_mu = 0.0, mean_abs_logvar = 0.0;
    bool collapse = false;
    double seconds = 0.0;
};

struct TrainOptions {
    BetaSchedule schedule;
    std::uint64_t seed = 0;
    // Windows drawn (without replacement) per epoch; 0 uses all.
    std::size_t windows_per_epoch = 0;
    // Validation windows evaluated per epoch (fixed subset); 0 uses all.
    std::size_t val_windows = 0;
    double collapse_tolerance = 1e-3;
    // Checkpoints go to <out_dir>/best and <out_dir>/final when set.
    std::filesystem::path out_dir;
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    std::unique_ptr<Model> best;   // lowest validation loss
    std::unique_ptr<Model> final;  // after the last epoch
    std::vector<EpochLog> log;
    std::vector<std::size_t> collapse_epochs;
    std::filesystem::path best_dir, final_dir;
};

// Window tensors are [N, leads, window_len]. Empty training data is a
// config error; a non-finite loss aborts with a training error.
TrainResult train(const ModelConfig& config, const Tensor& train_windows, const Tensor& val_windows,
                  const TrainOptions& options);

// Loads, standardizes and preprocesses the train/val splits, then trains.
TrainResult train(const ModelConfig& config, const DatasetIndex& index, const PreprocessOptions& preprocess,
                  const TrainOptions& options, std::size_t stride = 250);

// Mean eval-mode loss over windows, in batches.
LossTerms evaluate_loss(const Model& model, const Tensor& windows, double beta, std::size_t batch_size);

// Copies of a window subset, [idx.size(), leads, m].
Tensor gather_windows(const Tensor& windows, const std::vector<std::size_t>& idx);

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const BetaSchedule& schedule,
                     const std::vector<EpochLog>& log);

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    BetaSchedule schedule;
    std::vector<EpochLog> log;
    std::string id;  // fingerprint of the weights
    std::filesystem::path dir;
};

// Missing or malformed checkpoints are config errors.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Hex digest of the parameter values.
std::string weights_fingerprint(const Model& model);

// Flat float32 archive (weights.f32) plus a names manifest
// (weights_manifest.json: [{name, shape, offset, count}]).
void export_weights(const std::filesystem::path& dir, const Model& model);

}  // namespace ecgad

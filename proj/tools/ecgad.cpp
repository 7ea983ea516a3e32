// ecgad: curate, preprocess, train, calibrate, score, evaluate, serve, synth
// and the end-to-end pipeline. Exit codes: 0 success, 2 configuration
// error, 3 data error, 4 runtime failure.

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "ecgad/error.hpp"
#include "ecgad/pipeline.hpp"
#include "ecgad/service.hpp"
#include "ecgad/train.hpp"

namespace fs = std::filesystem;
using namespace ecgad;

namespace {

struct Common {
    std::optional<std::uint64_t> seed;
    fs::path config;
    fs::path out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
    cmd->add_option("--seed", c.seed, "Master seed (overrides run.seed)");
    cmd->add_option("--config", c.config, "INI experiment config")->check(CLI::ExistingFile);
    auto* out = cmd->add_option("--out", c.out, "Output directory");
    if (out_required) out->required();
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    return cfg;
}

// Writes the run manifest around a subcommand body; a failure is recorded
// before it propagates.
void recorded(const std::string& command, const ExperimentConfig& cfg, const Common& c, const fs::path& out,
              std::vector<fs::path> inputs, const std::function<std::vector<fs::path>()>& body) {
    inputs.push_back(c.config);
    RunManifest m;
    m.command = command;
    m.config = config_json(cfg);
    m.seed = cfg.seed;
    m.version = version_string();
    m.started = utc_timestamp();
    m.input_hashes = hash_inputs(inputs);
    detect_drift(out, m.input_hashes);
    try {
        for (const auto& p : body()) m.outputs.push_back(p.string());
        m.status = "ok";
    } catch (const std::exception& e) {
        m.status = "failed";
        m.failed_stage = command;
        m.error = e.what();
        m.finished = utc_timestamp();
        write_run_manifest(out, m);
        throw;
    }
    m.finished = utc_timestamp();
    write_run_manifest(out, m);
}

service::Server* g_server = nullptr;

void on_signal(int) {
    if (g_server != nullptr) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"12-lead ECG anomaly detection: training, calibration, evaluation and serving"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version_string());
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
    bool print_config = false;
    app.add_flag("--print-default-config", print_config, "Print every config key with its default and exit")
        ->trigger_on_parse();

    // synth
    Common synth_c;
    std::optional<std::size_t> n_normal, n_anomalous;
    std::vector<std::string> kinds;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled 12-lead corpus");
    add_common(synth, synth_c, true);
    synth->add_option("--n-normal", n_normal, "Normal records");
    synth->add_option("--n-anomalous", n_anomalous, "Anomalous records");
    synth->add_option("--kinds", kinds, "Anomaly kinds: qrs_amplitude, st_shift, beat_dropout, rate_jitter")
        ->delimiter(',');

    // curate
    Common curate_c;
    fs::path raw_listing;
    auto* curate_cmd = app.add_subcommand("curate", "Keep normal-rhythm records and split them train/val");
    add_common(curate_cmd, curate_c, true);
    curate_cmd->add_option("--input", raw_listing, "CSV with columns path,codes[,record_id]")
        ->required()
        ->check(CLI::ExistingFile);

    // preprocess
    Common prep_c;
    fs::path prep_manifest;
    std::vector<std::string> prep_splits;
    auto* prep = app.add_subcommand("preprocess", "Filter, normalize and window every record of an index");
    add_common(prep, prep_c, true);
    prep->add_option("--manifest", prep_manifest, "Dataset index CSV")->required()->check(CLI::ExistingFile);
    prep->add_option("--splits", prep_splits, "Only these splits (train, val, calibration, test)")->delimiter(',');

    // train
    Common train_c;
    fs::path train_manifest, train_windows;
    std::vector<std::string> train_models;
    std::optional<std::size_t> train_epochs;
    auto* train_cmd = app.add_subcommand("train", "Train models; checkpoints land in <out>/<model>");
    add_common(train_cmd, train_c, true);
    train_cmd->add_option("--manifest", train_manifest, "Dataset index CSV")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--model", train_models, "cae, vae or vae_mha (default: train.models)")->delimiter(',');
    train_cmd->add_option("--windows", train_windows, "Windows written by preprocess")->check(CLI::ExistingDirectory);
    train_cmd->add_option("--epochs", train_epochs, "Override the epoch count of every model");

    // calibrate
    Common cal_c;
    fs::path cal_manifest;
    std::vector<fs::path> cal_ckpts;
    std::vector<std::string> cal_strategies;
    std::string cal_default;
    auto* cal = app.add_subcommand("calibrate", "Fit decision thresholds into <ckpt>/threshold.json");
    add_common(cal, cal_c, false);
    cal->add_option("--manifest", cal_manifest, "Dataset index CSV")->required()->check(CLI::ExistingFile);
    cal->add_option("--ckpt", cal_ckpts, "Checkpoint directories")->required()->check(CLI::ExistingDirectory);
    cal->add_option("--strategy", cal_strategies, "p95, f1opt, youden, pot (default: calibrate.strategies)")
        ->delimiter(',');
    cal->add_option("--default", cal_default, "Default strategy");

    // score
    Common score_c;
    fs::path score_ckpt;
    std::optional<double> score_tau;
    std::vector<fs::path> score_inputs;
    auto* score = app.add_subcommand("score", "Score recordings and write per-record reports");
    add_common(score, score_c, true);
    score->add_option("--ckpt", score_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    score->add_option("--tau", score_tau, "Threshold (default: calibrated default)");
    score->add_option("inputs", score_inputs, "Recordings (.hea or .npy)")->required()->check(CLI::ExistingFile);

    // evaluate
    Common eval_c;
    fs::path eval_manifest;
    std::vector<fs::path> eval_ckpts;
    std::string dataset_id;
    auto* eval = app.add_subcommand("evaluate", "Benchmark checkpoints on the test split of an index");
    add_common(eval, eval_c, true);
    eval->add_option("--manifest", eval_manifest, "Dataset index CSV")->required()->check(CLI::ExistingFile);
    eval->add_option("--ckpt", eval_ckpts, "Checkpoint directories")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--dataset-id", dataset_id, "Dataset label in the report");

    // serve
    service::ServiceConfig serve_cfg = service::ServiceConfig::from_env();
    auto* serve = app.add_subcommand("serve", "Run the HTTP analysis service");
    serve->add_option("--ckpt-dir", serve_cfg.ckpt_dir, "Directory holding cae/ and vae_mha/ checkpoints");
    serve->add_option("--port", serve_cfg.port, "Port (0 picks a free one)");
    serve->add_option("--bind", serve_cfg.bind_address, "Bind address");
    serve->add_option("--notch", serve_cfg.default_notch, "Default mains notch frequency")
        ->check(CLI::IsMember({50, 60}));
    serve->add_option("--cors-origin", serve_cfg.cors_origin, "Allowed dashboard origin");

    // pipeline
    Common pipe_c;
    auto* pipe = app.add_subcommand("pipeline", "curate -> preprocess -> train -> calibrate -> evaluate");
    add_common(pipe, pipe_c, true);
    pipe->get_option("--config")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (print_config) {
            std::cout << default_config_text();
            return 0;
        }
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (print_config) {
        std::cout << default_config_text();
        return 0;
    }
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*synth) {
            ExperimentConfig cfg = resolve(synth_c);
            if (n_normal) cfg.synth.n_normal = *n_normal;
            if (n_anomalous) cfg.synth.n_anomalous = *n_anomalous;
            if (!kinds.empty()) {
                cfg.synth.kinds.clear();
                for (const auto& k : kinds) cfg.synth.kinds.push_back(parse_anomaly_kind(k));
            }
            cfg.validate();
            recorded("synth", cfg, synth_c, synth_c.out, {}, [&] {
                const DatasetIndex idx = synth_stage(cfg, synth_c.out);
                spdlog::info("wrote {} records to {}", idx.entries.size(), synth_c.out.string());
                return std::vector<fs::path>{synth_c.out / "manifest.csv", synth_c.out / "records"};
            });
        } else if (*curate_cmd) {
            const ExperimentConfig cfg = resolve(curate_c);
            recorded("curate", cfg, curate_c, curate_c.out, {raw_listing}, [&] {
                curate_stage(raw_listing, cfg, curate_c.out);
                return std::vector<fs::path>{curate_c.out / "manifest.csv"};
            });
        } else if (*prep) {
            const ExperimentConfig cfg = resolve(prep_c);
            recorded("preprocess", cfg, prep_c, prep_c.out, {prep_manifest}, [&] {
                DatasetIndex idx = read_manifest(prep_manifest, cfg.curation.normal_codes);
                if (!prep_splits.empty()) {
                    std::vector<Split> keep;
                    for (const auto& s : prep_splits) keep.push_back(parse_split(s));
                    std::erase_if(idx.entries, [&](const IndexEntry& e) {
                        return std::find(keep.begin(), keep.end(), e.split) == keep.end();
                    });
                }
                preprocess_stage(idx, cfg, prep_c.out);
                return std::vector<fs::path>{prep_c.out};
            });
        } else if (*train_cmd) {
            ExperimentConfig cfg = resolve(train_c);
            if (!train_models.empty()) {
                cfg.models.clear();
                for (const auto& m : train_models) cfg.models.push_back(parse_model_kind(m));
            }
            if (train_epochs)
                for (auto& [kind, mc] : cfg.model_configs) mc.epochs = *train_epochs;
            cfg.validate();
            recorded("train", cfg, train_c, train_c.out, {train_manifest, train_windows}, [&] {
                const DatasetIndex idx = read_manifest(train_manifest, cfg.curation.normal_codes);
                std::vector<fs::path> outs;
                for (ModelKind k : cfg.models) outs.push_back(train_stage(idx, cfg, k, train_c.out, train_windows));
                return outs;
            });
        } else if (*cal) {
            ExperimentConfig cfg = resolve(cal_c);
            if (!cal_strategies.empty()) {
                cfg.strategies.clear();
                for (const auto& s : cal_strategies) cfg.strategies.push_back(parse_strategy(s));
                if (cal_default.empty()) cfg.default_strategy = cfg.strategies.front();
            }
            if (!cal_default.empty()) cfg.default_strategy = parse_strategy(cal_default);
            cfg.validate();
            const fs::path out = cal_c.out.empty() ? cal_ckpts.front() : cal_c.out;
            std::vector<fs::path> inputs{cal_manifest};
            recorded("calibrate", cfg, cal_c, out, inputs, [&] {
                const DatasetIndex idx = read_manifest(cal_manifest, cfg.curation.normal_codes);
                std::vector<fs::path> outs;
                for (const auto& ck : cal_ckpts) {
                    calibrate_stage(idx, cfg, ck);
                    outs.push_back(ck / "threshold.json");
                }
                return outs;
            });
        } else if (*score) {
            const ExperimentConfig cfg = resolve(score_c);
            std::vector<fs::path> inputs = score_inputs;
            inputs.push_back(score_ckpt);
            recorded("score", cfg, score_c, score_c.out, inputs, [&] {
                for (const AnomalyReport& r : score_stage(score_inputs, cfg, score_ckpt, score_tau, score_c.out))
                    std::cout << r.record_id << '\t' << r.aggregate << '\t' << to_string(r.decision) << '\n';
                return std::vector<fs::path>{score_c.out};
            });
        } else if (*eval) {
            ExperimentConfig cfg = resolve(eval_c);
            if (!dataset_id.empty()) cfg.dataset_id = dataset_id;
            std::vector<fs::path> inputs = eval_ckpts;
            inputs.push_back(eval_manifest);
            recorded("evaluate", cfg, eval_c, eval_c.out, inputs, [&] {
                const DatasetIndex idx = read_manifest(eval_manifest, cfg.curation.normal_codes);
                std::cout << benchmark_csv(evaluate_stage(idx, cfg, eval_ckpts, eval_c.out));
                return std::vector<fs::path>{eval_c.out / "benchmark.csv", eval_c.out / "benchmark.json",
                                             eval_c.out / "scores.csv"};
            });
        } else if (*serve) {
            service::Server server(serve_cfg);
            const int port = server.bind();
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            const auto snap = server.registry().current();
            spdlog::info("serving {} model(s) from '{}' on http://{}:{}", snap->models.size(),
                         serve_cfg.ckpt_dir.string(), serve_cfg.bind_address, port);
            for (const auto& e : snap->load_errors) spdlog::warn("degraded: {}", e);
            server.listen();
            g_server = nullptr;
        } else if (*pipe) {
            const ExperimentConfig cfg = resolve(pipe_c);
            const RunManifest m = run_pipeline(cfg, pipe_c.config, pipe_c.out);
            std::cout << "pipeline finished: " << (pipe_c.out / "evaluate" / "benchmark.csv").string() << '\n';
            (void)m;
        }
    } catch (const Error& e) {
        spdlog::error("{}: {}", to_string(e.kind()), e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 4;
    }
    return 0;
}

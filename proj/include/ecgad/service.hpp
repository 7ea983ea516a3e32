#pragma once

// HTTP analysis service: upload a recording, run preprocessing, a model and
// scoring, return the report plus plot-ready series.

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgad/calibrate.hpp"
#include "ecgad/models.hpp"
#include "ecgad/preprocess.hpp"

namespace ecgad::service {

inline constexpr std::size_t kMaxPayloadBytes = 20u * 1024u * 1024u;

// Kinds the service serves, one checkpoint directory each under ckpt_dir.
const std::vector<ModelKind>& served_kinds();

struct ServiceConfig {
    std::filesystem::path ckpt_dir;
    std::string bind_address = "127.0.0.1";
    int port = 8080;
    int default_notch = 60;
    std::string cors_origin = "*";

    // ECGAD_BIND, ECGAD_PORT, ECGAD_CKPT_DIR, ECGAD_NOTCH, ECGAD_CORS_ORIGIN
    // override the defaults.
    static ServiceConfig from_env();
};

struct ServedModel {
    ModelKind kind = ModelKind::Cae;
    std::shared_ptr<const Model> model;
    std::string checkpoint_id;
    std::filesystem::path dir;
    // Default threshold from <dir>/threshold.json; absent when uncalibrated.
    std::optional<ThresholdModel> threshold;
};

// Immutable view of the loaded models; requests hold one for their lifetime.
struct Snapshot {
    std::vector<ServedModel> models;
    std::vector<std::string> load_errors;

    const ServedModel* find(ModelKind kind) const;
    bool degraded() const { return !load_errors.empty(); }
};

// Loads <ckpt_dir>/<kind> for every served kind. Missing or broken
// checkpoints are recorded as load errors, never thrown.
std::shared_ptr<const Snapshot> load_snapshot(const std::filesystem::path& ckpt_dir);

// Holds the current snapshot; reload swaps it atomically so in-flight
// requests finish on the models they started with.
class Registry {
public:
    explicit Registry(std::filesystem::path ckpt_dir);
    std::shared_ptr<const Snapshot> current() const;
    std::shared_ptr<const Snapshot> reload();
    const std::filesystem::path& ckpt_dir() const { return ckpt_dir_; }

private:
    std::filesystem::path ckpt_dir_;
    mutable std::mutex mutex_;
    std::shared_ptr<const Snapshot> snapshot_;
};

enum class PayloadFormat { Array, Wfdb };
PayloadFormat parse_payload_format(const std::string& text);

struct AnalysisRequest {
    // npy bytes for Array, the format-16 signal file for Wfdb.
    std::string payload;
    PayloadFormat format = PayloadFormat::Array;
    // WFDB header text; required for Wfdb.
    std::string header;
    // Array sampling rate; 500 Hz when absent.
    std::optional<int> sampling_rate;
    ModelKind model_kind = ModelKind::VaeMha;
    std::optional<double> tau_override;
    std::optional<int> notch_freq;
    // Leads returned in series; empty means all 12. Scores always use all 12.
    std::vector<std::size_t> leads_selected;
};

// Outcome with the HTTP status it maps to.
struct Outcome {
    int status = 200;
    nlohmann::json body;
};

// JSON error body {error, kind}.
nlohmann::json error_body(const std::string& message, const std::string& kind);

// Pure request handler: identical request and snapshot give identical JSON.
// Status: 400 malformed payload or fields, 413 oversize, 422 wrong shape or
// too short, 503 model or threshold unavailable.
Outcome analyze(const Snapshot& snapshot, const AnalysisRequest& request, int default_notch = 60);

// [{model_kind, checkpoint_id, tau_default, strategy}]
nlohmann::json models_json(const Snapshot& snapshot);
// {status: "ok", degraded, versions, load_errors}
nlohmann::json health_json(const Snapshot& snapshot);

// Blocking HTTP server on config.bind_address:config.port.
class Server {
public:
    explicit Server(ServiceConfig config);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    // Binds to config.port, or to a free port when it is 0; returns the port.
    int bind();
    // Serves until stop(); bind() first.
    void listen();
    void stop();
    Registry& registry();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ecgad::service

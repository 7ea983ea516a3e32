#include "ecgad/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <sstream>

#include <spdlog/spdlog.h>

#include "ecgad/error.hpp"
#include "ecgad/ingest.hpp"
#include "ecgad/npy.hpp"
#include "ecgad/scoring.hpp"
#include "ecgad/train.hpp"

namespace ecgad::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kServiceRate = 500;

std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
}

Outcome failure(int status, const std::string& message, const std::string& kind) {
    return {status, error_body(message, kind)};
}

int status_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Format:
        case ErrorKind::ModelKind:
            return 400;
        case ErrorKind::Shape:
        case ErrorKind::Data:
            return 422;
        default:
            return 500;
    }
}

// "format error" -> "format"
std::string kind_token(ErrorKind kind) {
    std::string s = to_string(kind);
    if (const auto sp = s.find(' '); sp != std::string::npos) s.resize(sp);
    return s;
}

EcgRecord decode(const AnalysisRequest& request) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(request.payload.data());
    const std::span<const std::uint8_t> view(bytes, request.payload.size());
    if (request.format == PayloadFormat::Wfdb) {
        if (request.header.empty()) fail(ErrorKind::Format, "WFDB upload needs a header");
        return parse_wfdb(request.header, view, "upload");
    }
    const int rate = request.sampling_rate.value_or(kServiceRate);
    if (rate <= 0) fail(ErrorKind::Config, "sampling rate must be positive");
    return record_from_array(npy::parse(view), rate, "upload");
}

// Resampled to the model rate, never cropped, then filtered and z-scored.
EcgRecord prepare_upload(EcgRecord record, int notch_freq) {
    if (record.sampling_rate != kServiceRate) {
        record.signal = resample_poly(record.signal, kServiceRate, static_cast<std::size_t>(record.sampling_rate));
        record.sampling_rate = kServiceRate;
    }
    PreprocessOptions options;
    options.filter.notch_freq = notch_freq;
    return preprocess(record, options);
}

json lead_series(const EcgRecord& prepared, const AnomalyReport& report, std::size_t lead) {
    const std::size_t T = prepared.samples();
    auto row = [&](const Tensor& t) { return series_json(std::span<const double>(t.data() + lead * T, T)); };
    return json{{"lead", lead},
                {"name", prepared.lead_names[lead]},
                {"original", row(prepared.signal)},
                {"reconstructed", row(report.reconstruction)},
                {"pointwise_mse", row(report.pointwise_error)}};
}

}  // namespace

const std::vector<ModelKind>& served_kinds() {
    static const std::vector<ModelKind> kinds{ModelKind::Cae, ModelKind::VaeMha};
    return kinds;
}

ServiceConfig ServiceConfig::from_env() {
    ServiceConfig c;
    if (auto v = env("ECGAD_BIND")) c.bind_address = *v;
    if (auto v = env("ECGAD_PORT")) c.port = std::stoi(*v);
    if (auto v = env("ECGAD_CKPT_DIR")) c.ckpt_dir = *v;
    if (auto v = env("ECGAD_NOTCH")) c.default_notch = std::stoi(*v);
    if (auto v = env("ECGAD_CORS_ORIGIN")) c.cors_origin = *v;
    return c;
}

const ServedModel* Snapshot::find(ModelKind kind) const {
    const auto it = std::find_if(models.begin(), models.end(), [&](const ServedModel& m) { return m.kind == kind; });
    return it == models.end() ? nullptr : &*it;
}

std::shared_ptr<const Snapshot> load_snapshot(const fs::path& ckpt_dir) {
    auto snap = std::make_shared<Snapshot>();
    if (ckpt_dir.empty()) return snap;
    for (ModelKind kind : served_kinds()) {
        const fs::path dir = ckpt_dir / to_string(kind);
        if (!fs::exists(dir)) continue;
        try {
            LoadedCheckpoint ck = load_checkpoint(dir);
            if (ck.model->kind() != kind)
                fail(ErrorKind::ModelKind, dir.string() + " holds a " + to_string(ck.model->kind()) + " checkpoint");
            ServedModel m;
            m.kind = kind;
            m.model = std::shared_ptr<const Model>(std::move(ck.model));
            m.checkpoint_id = ck.id;
            m.dir = dir;
            if (auto set = load_thresholds(dir))
                if (const ThresholdModel* t = set->default_threshold()) m.threshold = *t;
            snap->models.push_back(std::move(m));
        } catch (const std::exception& e) {
            spdlog::error("cannot load {}: {}", dir.string(), e.what());
            snap->load_errors.push_back(to_string(kind) + ": " + e.what());
        }
    }
    return snap;
}

Registry::Registry(fs::path ckpt_dir) : ckpt_dir_(std::move(ckpt_dir)), snapshot_(load_snapshot(ckpt_dir_)) {}

std::shared_ptr<const Snapshot> Registry::current() const {
    std::lock_guard lock(mutex_);
    return snapshot_;
}

std::shared_ptr<const Snapshot> Registry::reload() {
    // Load outside the lock; only the pointer swap is serialized.
    auto fresh = load_snapshot(ckpt_dir_);
    std::lock_guard lock(mutex_);
    snapshot_ = fresh;
    return fresh;
}

PayloadFormat parse_payload_format(const std::string& text) {
    if (text == "array" || text == "npy") return PayloadFormat::Array;
    if (text == "wfdb") return PayloadFormat::Wfdb;
    fail(ErrorKind::Format, "unknown payload format '" + text + "' (expected array or wfdb)");
}

json error_body(const std::string& message, const std::string& kind) {
    return json{{"error", message}, {"kind", kind}};
}

Outcome analyze(const Snapshot& snapshot, const AnalysisRequest& request, int default_notch) {
    if (request.payload.size() + request.header.size() > kMaxPayloadBytes)
        return failure(413, "payload exceeds 20 MB", "payload");
    const ServedModel* served = snapshot.find(request.model_kind);
    if (served == nullptr)
        return failure(503, "model " + to_string(request.model_kind) + " is not loaded", "unavailable");
    const int notch_freq = request.notch_freq.value_or(default_notch);
    if (notch_freq != 50 && notch_freq != 60) return failure(400, "notch frequency must be 50 or 60", "config");
    for (std::size_t l : request.leads_selected)
        if (l >= kLeads) return failure(400, "lead index " + std::to_string(l) + " out of range", "config");

    double tau = 0.0;
    if (request.tau_override) {
        tau = *request.tau_override;
        if (std::isnan(tau)) return failure(400, "tau_override is not a number", "config");
    } else if (served->threshold) {
        tau = served->threshold->tau;
    } else {
        return failure(503, "model " + to_string(request.model_kind) + " has no calibrated threshold", "unavailable");
    }

    try {
        const EcgRecord prepared = prepare_upload(decode(request), notch_freq);
        const AnomalyReport report = explain(prepared, *served->model, tau);

        std::vector<std::size_t> leads = request.leads_selected;
        if (leads.empty())
            for (std::size_t l = 0; l < kLeads; ++l) leads.push_back(l);
        json series = json::array();
        for (std::size_t l : leads) series.push_back(lead_series(prepared, report, l));
        json trace = json::array();
        for (std::size_t i = 0; i < report.scores.size(); ++i)
            trace.push_back({{"start", report.window_starts[i]}, {"score", round_sig6(report.scores[i])}});

        json body;
        body["report"] = report_to_json(report);
        body["series"] = std::move(series);
        body["score_trace"] = std::move(trace);
        body["attention_trace"] = report.attention.size() == 0 ? json(nullptr) : series_json(report.attention.values());
        body["decision"] = to_string(report.decision);
        body["tau_used"] = round_sig6(tau);
        body["model"] = {{"model_kind", to_string(served->kind)}, {"checkpoint_id", served->checkpoint_id}};
        body["sampling_rate"] = kServiceRate;
        return {200, std::move(body)};
    } catch (const Error& e) {
        return failure(status_for(e.kind()), e.what(), kind_token(e.kind()));
    }
}

json models_json(const Snapshot& snapshot) {
    json out = json::array();
    for (const auto& m : snapshot.models) {
        json entry{{"model_kind", to_string(m.kind)}, {"checkpoint_id", m.checkpoint_id}};
        entry["tau_default"] = m.threshold ? json(round_sig6(m.threshold->tau)) : json(nullptr);
        entry["strategy"] = m.threshold ? json(to_string(m.threshold->strategy)) : json(nullptr);
        out.push_back(std::move(entry));
    }
    return out;
}

json health_json(const Snapshot& snapshot) {
    return json{{"status", "ok"},
                {"degraded", snapshot.degraded()},
                {"load_errors", snapshot.load_errors},
                {"versions",
                 {{"ecgad", ECGAD_VERSION}, {"httplib", CPPHTTPLIB_VERSION}, {"api", "1"}}}};
}

// --- HTTP ---------------------------------------------------------------------

struct Server::Impl {
    ServiceConfig config;
    Registry registry;
    httplib::Server http;
    int port = 0;

    explicit Impl(ServiceConfig c) : config(std::move(c)), registry(config.ckpt_dir) {}

    void reply(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static std::string field(const httplib::Request& req, const std::string& name) {
        if (req.has_file(name)) return req.get_file_value(name).content;
        if (req.has_param(name)) return req.get_param_value(name);
        return {};
    }

    static double parse_real(const std::string& text, const std::string& what) {
        char* end = nullptr;
        const double v = std::strtod(text.c_str(), &end);
        if (end == text.c_str() || *end != '\0') fail(ErrorKind::Format, "unreadable " + what + " '" + text + "'");
        return v;
    }

    static std::vector<std::size_t> parse_leads(const std::string& text) {
        std::vector<std::size_t> out;
        const auto names = EcgRecord::default_lead_names();
        std::stringstream in(text);
        std::string item;
        while (std::getline(in, item, ',')) {
            if (item.empty()) continue;
            const auto it = std::find(names.begin(), names.end(), item);
            if (it != names.end()) {
                out.push_back(static_cast<std::size_t>(it - names.begin()));
                continue;
            }
            const double v = parse_real(item, "lead");
            if (v < 0 || v != std::floor(v)) fail(ErrorKind::Format, "unreadable lead '" + item + "'");
            out.push_back(static_cast<std::size_t>(v));
        }
        return out;
    }

    AnalysisRequest parse_request(const httplib::Request& req) {
        if (!req.is_multipart_form_data()) fail(ErrorKind::Format, "expected a multipart/form-data upload");
        if (!req.has_file("file")) fail(ErrorKind::Format, "missing 'file' part");
        AnalysisRequest r;
        const auto file = req.get_file_value("file");
        r.payload = file.content;
        std::string format = field(req, "format");
        if (format.empty()) format = file.filename.ends_with(".dat") ? "wfdb" : "array";
        r.format = parse_payload_format(format);
        r.header = field(req, "header");
        if (auto v = field(req, "sampling_rate"); !v.empty())
            r.sampling_rate = static_cast<int>(parse_real(v, "sampling_rate"));
        std::string kind = field(req, "model_kind");
        if (kind.empty()) kind = field(req, "model");
        if (!kind.empty()) {
            if (kind != "cae" && kind != "vae_mha") fail(ErrorKind::Format, "model_kind must be cae or vae_mha");
            r.model_kind = parse_model_kind(kind);
        }
        if (auto v = field(req, "tau_override"); !v.empty()) r.tau_override = parse_real(v, "tau_override");
        if (auto v = field(req, "notch_freq"); !v.empty()) r.notch_freq = static_cast<int>(parse_real(v, "notch_freq"));
        if (auto v = field(req, "leads_selected"); !v.empty()) r.leads_selected = parse_leads(v);
        return r;
    }

    void routes() {
        http.set_payload_max_length(kMaxPayloadBytes);
        http.set_default_headers({{"Access-Control-Allow-Origin", config.cors_origin},
                                  {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                  {"Access-Control-Allow-Headers", "Content-Type"}});
        http.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

        http.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, health_json(*registry.current()));
        });
        http.Get("/api/models", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, models_json(*registry.current()));
        });
        http.Post("/api/reload", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, models_json(*registry.reload()));
        });
        http.Post("/api/analyze", [this](const httplib::Request& req, httplib::Response& res) {
            // The snapshot stays alive for this request even if a reload swaps it.
            const auto snap = registry.current();
            AnalysisRequest request;
            try {
                request = parse_request(req);
            } catch (const Error& e) {
                reply(res, status_for(e.kind()), error_body(e.what(), kind_token(e.kind())));
                return;
            }
            const Outcome out = analyze(*snap, request, config.default_notch);
            reply(res, out.status, out.body);
        });
        http.set_error_handler([this](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                const std::string kind = res.status == 413 ? "payload" : "http";
                reply(res, res.status, error_body(httplib::status_message(res.status), kind));
            }
        });
        http.set_exception_handler([this](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string message = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                message = e.what();
            } catch (...) {
            }
            reply(res, 500, error_body(message, "runtime"));
        });
    }
};

Server::Server(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) { impl_->routes(); }

Server::~Server() { stop(); }

int Server::bind() {
    if (impl_->config.port == 0) {
        impl_->port = impl_->http.bind_to_any_port(impl_->config.bind_address);
    } else if (impl_->http.bind_to_port(impl_->config.bind_address, impl_->config.port)) {
        impl_->port = impl_->config.port;
    } else {
        impl_->port = -1;
    }
    if (impl_->port < 0)
        fail(ErrorKind::Runtime, "cannot bind " + impl_->config.bind_address + ":" + std::to_string(impl_->config.port));
    return impl_->port;
}

void Server::listen() { impl_->http.listen_after_bind(); }

void Server::stop() {
    if (impl_->http.is_running()) impl_->http.stop();
}

Registry& Server::registry() { return impl_->registry; }

}  // namespace ecgad::service

#include <doctest.h>

#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include "ecgad/npy.hpp"
#include "ecgad/service.hpp"
#include "ecgad/synth.hpp"
#include "ecgad/train.hpp"

using namespace ecgad;
using namespace ecgad::service;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("ecgad_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ModelConfig stub_config(ModelKind kind) {
    ModelConfig c = ModelConfig::defaults(kind);
    c.channels = {4, 4};
    c.latent_dim = 4;
    c.hidden_dim = 4;
    c.lead_heads = 2;
    c.mha_heads = 2;
    return c;
}

// <dir>/<kind> with a p95 threshold of tau.
void write_stub(const fs::path& dir, ModelKind kind, std::uint64_t seed, double tau) {
    const auto model = make_model(stub_config(kind), seed);
    const fs::path sub = dir / to_string(kind);
    save_checkpoint(sub, *model, BetaSchedule::for_kind(kind, 1), {});
    ThresholdSet set;
    ThresholdModel t;
    t.tau = tau;
    t.calibration_size = 100;
    set.thresholds.push_back(t);
    save_thresholds(sub, set);
}

std::string as_string(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }

std::string npy_payload(const Tensor& t) { return as_string(npy::serialize(t)); }

std::string record_payload(std::uint64_t seed) { return npy_payload(synth_record(seed, std::nullopt).signal); }

AnalysisRequest request_for(ModelKind kind, std::string payload) {
    AnalysisRequest r;
    r.model_kind = kind;
    r.payload = std::move(payload);
    return r;
}

// Everything except the fields a threshold is allowed to change.
json without_threshold_fields(json body) {
    body.erase("decision");
    body.erase("tau_used");
    body["report"].erase("decision");
    body["report"].erase("tau");
    return body;
}

struct StubDeployment {
    fs::path dir;
    std::shared_ptr<const Snapshot> snapshot;

    explicit StubDeployment(const std::string& name) : dir(scratch_dir(name)) {
        write_stub(dir, ModelKind::Cae, 1, 0.5);
        write_stub(dir, ModelKind::VaeMha, 2, 0.5);
        snapshot = load_snapshot(dir);
    }
    ~StubDeployment() { fs::remove_all(dir); }
};

struct RunningServer {
    Server server;
    int port;
    std::thread thread;

    explicit RunningServer(ServiceConfig config) : server(std::move(config)), port(server.bind()) {
        thread = std::thread([this] { server.listen(); });
    }
    ~RunningServer() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(60, 0);
        return c;
    }
};

ServiceConfig local_config(const fs::path& dir) {
    ServiceConfig c;
    c.ckpt_dir = dir;
    c.port = 0;
    return c;
}

}  // namespace

TEST_CASE("analysis returns plot-ready series for both served models") {
    StubDeployment d("svc_models");
    REQUIRE(d.snapshot->models.size() == 2);
    CHECK_FALSE(d.snapshot->degraded());

    const std::string payload = record_payload(3);
    const Outcome mha = analyze(*d.snapshot, request_for(ModelKind::VaeMha, payload));
    REQUIRE(mha.status == 200);
    CHECK(mha.body["attention_trace"].size() == 5000);
    CHECK(mha.body["series"].size() == 12);
    for (const auto& s : mha.body["series"]) {
        CHECK(s["original"].size() == 5000);
        CHECK(s["reconstructed"].size() == 5000);
        CHECK(s["pointwise_mse"].size() == 5000);
    }
    CHECK(mha.body["score_trace"].size() == 19);
    CHECK(mha.body["score_trace"][1]["start"] == 250);
    CHECK(mha.body["tau_used"] == 0.5);
    CHECK(mha.body["model"]["checkpoint_id"] == d.snapshot->find(ModelKind::VaeMha)->checkpoint_id);
    const double S = mha.body["report"]["S"];
    CHECK(mha.body["decision"] == (S > 0.5 ? "anomalous" : "normal"));

    const Outcome cae = analyze(*d.snapshot, request_for(ModelKind::Cae, payload));
    REQUIRE(cae.status == 200);
    CHECK(cae.body["attention_trace"].is_null());
    CHECK(cae.body["report"]["attention"].is_null());

    AnalysisRequest some = request_for(ModelKind::Cae, payload);
    some.leads_selected = {0, 6, 11};
    const Outcome sub = analyze(*d.snapshot, some);
    REQUIRE(sub.status == 200);
    REQUIRE(sub.body["series"].size() == 3);
    CHECK(sub.body["series"][1]["name"] == "V1");
    // Lead selection never changes the scores.
    CHECK(sub.body["report"]["scores"] == cae.body["report"]["scores"]);
}

TEST_CASE("threshold override changes only the decision") {
    StubDeployment d("svc_tau");
    AnalysisRequest r = request_for(ModelKind::VaeMha, record_payload(4));
    r.tau_override = 0.0;
    const Outcome low = analyze(*d.snapshot, r);
    r.tau_override = std::numeric_limits<double>::infinity();
    const Outcome high = analyze(*d.snapshot, r);
    REQUIRE(low.status == 200);
    REQUIRE(high.status == 200);
    CHECK(low.body["decision"] == "anomalous");
    CHECK(high.body["decision"] == "normal");
    CHECK(low.body["report"]["S"] == high.body["report"]["S"]);
    CHECK(without_threshold_fields(low.body).dump() == without_threshold_fields(high.body).dump());
}

TEST_CASE("inputs are decoded in every supported form") {
    StubDeployment d("svc_inputs");
    const EcgRecord rec = synth_record(5, std::nullopt);

    // [T, 12] orientation.
    Tensor tl({5000, 12});
    for (std::size_t l = 0; l < 12; ++l)
        for (std::size_t t = 0; t < 5000; ++t) tl.at(t, l) = rec.signal.at(l, t);
    const Outcome a = analyze(*d.snapshot, request_for(ModelKind::Cae, npy_payload(rec.signal)));
    const Outcome b = analyze(*d.snapshot, request_for(ModelKind::Cae, npy_payload(tl)));
    REQUIRE(b.status == 200);
    CHECK(a.body.dump() == b.body.dump());

    // A 250 Hz upload is resampled onto the 500 Hz timeline.
    Tensor half({12, 2500});
    for (std::size_t l = 0; l < 12; ++l)
        for (std::size_t t = 0; t < 2500; ++t) half.at(l, t) = rec.signal.at(l, 2 * t);
    AnalysisRequest slow = request_for(ModelKind::Cae, npy_payload(half));
    slow.sampling_rate = 250;
    const Outcome c = analyze(*d.snapshot, slow);
    REQUIRE(c.status == 200);
    CHECK(c.body["series"][0]["original"].size() == 5000);

    // WFDB header plus signal file.
    const fs::path wdir = d.dir / "wfdb";
    write_wfdb(rec, wdir, "rec", 1000.0, 0);
    std::ifstream hea(wdir / "rec.hea"), dat(wdir / "rec.dat", std::ios::binary);
    AnalysisRequest w = request_for(ModelKind::Cae, {std::istreambuf_iterator<char>(dat), {}});
    w.format = PayloadFormat::Wfdb;
    w.header.assign(std::istreambuf_iterator<char>(hea), {});
    const Outcome e = analyze(*d.snapshot, w);
    REQUIRE(e.status == 200);
    CHECK(e.body["series"].size() == 12);

    AnalysisRequest fifty = request_for(ModelKind::Cae, npy_payload(rec.signal));
    fifty.notch_freq = 50;
    const Outcome f = analyze(*d.snapshot, fifty);
    REQUIRE(f.status == 200);
    CHECK(f.body["report"]["S"] != a.body["report"]["S"]);
}

TEST_CASE("request errors map to status codes") {
    StubDeployment d("svc_errors");
    const auto status = [&](const AnalysisRequest& r) { return analyze(*d.snapshot, r).status; };

    CHECK(status(request_for(ModelKind::Cae, "not an npy file")) == 400);
    CHECK(status(request_for(ModelKind::Cae, npy_payload(Tensor({8, 5000}, 0.0)))) == 422);
    CHECK(status(request_for(ModelKind::Cae, npy_payload(Tensor({12, 400}, 0.0)))) == 422);
    CHECK(status(request_for(ModelKind::Cae, std::string(kMaxPayloadBytes + 1, 'x'))) == 413);
    CHECK(status(request_for(ModelKind::Vae, record_payload(1))) == 503);

    AnalysisRequest bad_notch = request_for(ModelKind::Cae, record_payload(1));
    bad_notch.notch_freq = 55;
    CHECK(status(bad_notch) == 400);
    AnalysisRequest bad_lead = request_for(ModelKind::Cae, record_payload(1));
    bad_lead.leads_selected = {12};
    CHECK(status(bad_lead) == 400);
    AnalysisRequest no_header = request_for(ModelKind::Cae, record_payload(1));
    no_header.format = PayloadFormat::Wfdb;
    CHECK(status(no_header) == 400);

    const json body = analyze(*d.snapshot, request_for(ModelKind::Cae, "junk")).body;
    CHECK(body.contains("error"));
    CHECK(body["kind"] == "format");

    // A model without a calibrated threshold serves only explicit overrides.
    fs::remove(d.dir / "cae" / "threshold.json");
    const auto uncalibrated = load_snapshot(d.dir);
    CHECK(analyze(*uncalibrated, request_for(ModelKind::Cae, record_payload(1))).status == 503);
    AnalysisRequest with_tau = request_for(ModelKind::Cae, record_payload(1));
    with_tau.tau_override = 1.0;
    CHECK(analyze(*uncalibrated, with_tau).status == 200);
    CHECK(models_json(*uncalibrated)[0]["tau_default"].is_null());
}

TEST_CASE("model listing, health and reload") {
    const fs::path dir = scratch_dir("svc_registry");
    Registry empty(dir);
    CHECK(models_json(*empty.current()) == json::array());
    CHECK_FALSE(empty.current()->degraded());

    write_stub(dir, ModelKind::Cae, 1, 0.25);
    write_stub(dir, ModelKind::VaeMha, 2, 0.75);
    Registry reg(dir);
    const json models = models_json(*reg.current());
    REQUIRE(models.size() == 2);
    CHECK(models[0]["model_kind"] == "cae");
    CHECK(models[0]["tau_default"] == 0.25);
    CHECK(models[0]["strategy"] == "p95");
    CHECK(models[1]["model_kind"] == "vae_mha");

    const json health = health_json(*reg.current());
    CHECK(health["status"] == "ok");
    CHECK(health["degraded"] == false);
    CHECK(health["versions"]["ecgad"] == ECGAD_VERSION);

    // Hot reload swaps in the new weights; the old snapshot stays usable.
    const auto before = reg.current();
    write_stub(dir, ModelKind::Cae, 99, 0.25);
    const auto after = reg.reload();
    CHECK(after->find(ModelKind::Cae)->checkpoint_id != before->find(ModelKind::Cae)->checkpoint_id);
    CHECK(after->find(ModelKind::VaeMha)->checkpoint_id == before->find(ModelKind::VaeMha)->checkpoint_id);
    CHECK(analyze(*before, request_for(ModelKind::Cae, record_payload(2))).status == 200);

    // A broken checkpoint degrades the service without taking it down.
    std::ofstream(dir / "cae" / "config.json") << "{ not json";
    const auto broken = reg.reload();
    CHECK(broken->degraded());
    CHECK(broken->find(ModelKind::Cae) == nullptr);
    CHECK(broken->find(ModelKind::VaeMha) != nullptr);
    CHECK(health_json(*broken)["status"] == "ok");
    CHECK(health_json(*broken)["degraded"] == true);
    fs::remove_all(dir);
}

TEST_CASE("http api serves deterministic byte-identical responses") {
    StubDeployment d("svc_http");
    RunningServer srv(local_config(d.dir));
    auto cli = srv.client();

    const std::string payload = record_payload(6);
    const auto post = [&](const std::string& model, const std::string& tau) {
        httplib::MultipartFormDataItems items{{"file", payload, "rec.npy", "application/octet-stream"},
                                              {"model_kind", model, "", ""}};
        if (!tau.empty()) items.push_back({"tau_override", tau, "", ""});
        return cli.Post("/api/analyze", items);
    };

    const auto r1 = post("vae_mha", "");
    const auto r2 = post("vae_mha", "");
    REQUIRE(r1);
    REQUIRE(r2);
    REQUIRE(r1->status == 200);
    CHECK(r1->body == r2->body);
    CHECK(r1->get_header_value("Access-Control-Allow-Origin") == "*");
    CHECK(r1->get_header_value("Content-Type") == "application/json");

    const auto lo = post("vae_mha", "0");
    const auto hi = post("vae_mha", "inf");
    REQUIRE(lo->status == 200);
    REQUIRE(hi->status == 200);
    const json jl = json::parse(lo->body), jh = json::parse(hi->body);
    CHECK(jl["decision"] == "anomalous");
    CHECK(jh["decision"] == "normal");
    CHECK(without_threshold_fields(jl).dump() == without_threshold_fields(jh).dump());

    // The in-process handler and the HTTP route agree byte for byte.
    CHECK(analyze(*d.snapshot, request_for(ModelKind::VaeMha, payload)).body.dump() == r1->body);

    const auto cae = post("cae", "");
    REQUIRE(cae->status == 200);
    CHECK(json::parse(cae->body)["attention_trace"].is_null());

    CHECK(post("lstm", "")->status == 400);
    CHECK(post("cae", "abc")->status == 400);
    CHECK(cli.Post("/api/analyze", "{}", "application/json")->status == 400);
    httplib::MultipartFormDataItems no_file{{"model_kind", "cae", "", ""}};
    CHECK(cli.Post("/api/analyze", no_file)->status == 400);
    httplib::MultipartFormDataItems short_rec{{"file", npy_payload(Tensor({12, 100}, 0.0)), "x.npy", ""}};
    CHECK(cli.Post("/api/analyze", short_rec)->status == 422);

    const auto big = cli.Post("/api/analyze", std::string(kMaxPayloadBytes + 1024, 'x'), "application/octet-stream");
    REQUIRE(big);
    CHECK(big->status == 413);

    const auto models = cli.Get("/api/models");
    REQUIRE(models->status == 200);
    CHECK(json::parse(models->body).size() == 2);
    const auto health = cli.Get("/api/health");
    REQUIRE(health->status == 200);
    CHECK(json::parse(health->body)["status"] == "ok");

    const auto pre = cli.Options("/api/analyze");
    REQUIRE(pre);
    CHECK(pre->status == 204);
    CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    write_stub(d.dir, ModelKind::Cae, 77, 0.5);
    const auto reloaded = cli.Post("/api/reload");
    REQUIRE(reloaded->status == 200);
    CHECK(json::parse(reloaded->body)[0]["checkpoint_id"] != json::parse(models->body)[0]["checkpoint_id"]);
}

TEST_CASE("concurrent analyses do not interleave") {
    StubDeployment d("svc_concurrent");
    RunningServer srv(local_config(d.dir));
    const std::string payload = record_payload(8);
    const std::string expected = analyze(*d.snapshot, request_for(ModelKind::VaeMha, payload)).body.dump();
    std::vector<std::string> bodies(4);
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < bodies.size(); ++i)
        workers.emplace_back([&, i] {
            auto cli = srv.client();
            httplib::MultipartFormDataItems items{{"file", payload, "r.npy", ""}, {"model_kind", "vae_mha", "", ""}};
            if (auto r = cli.Post("/api/analyze", items)) bodies[i] = r->body;
        });
    for (auto& w : workers) w.join();
    for (const auto& b : bodies) CHECK(b == expected);
}

TEST_CASE("a service without checkpoints is alive but empty") {
    const fs::path dir = scratch_dir("svc_empty");
    RunningServer srv(local_config(dir));
    auto cli = srv.client();
    const auto models = cli.Get("/api/models");
    REQUIRE(models);
    CHECK(models->status == 200);
    CHECK(models->body == "[]");
    CHECK(cli.Get("/api/health")->status == 200);
    httplib::MultipartFormDataItems items{{"file", record_payload(1), "r.npy", ""}};
    CHECK(cli.Post("/api/analyze", items)->status == 503);
    fs::remove_all(dir);
}

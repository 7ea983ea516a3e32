#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ecgad/hash.hpp"
#include "ecgad/npy.hpp"
#include "ecgad/synth.hpp"
#include "ecgad/train.hpp"
#include "test_util.hpp"

using namespace ecgad;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("ecgad_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double max_abs_diff(const Tensor& a, const Tensor& b, std::size_t lo, std::size_t hi) {
    double m = 0.0;
    for (std::size_t l = 0; l < a.dim(0); ++l)
        for (std::size_t t = lo; t < hi; ++t) m = std::max(m, std::abs(a.at(l, t) - b.at(l, t)));
    return m;
}

ModelConfig small_cae() {
    ModelConfig c = ModelConfig::defaults(ModelKind::Cae);
    c.channels = {16, 16, 8};
    c.batch_size = 32;
    return c;
}

}  // namespace

TEST_CASE("synthetic records are deterministic in the seed") {
    const EcgRecord a = synth_record(7, std::nullopt);
    const EcgRecord b = synth_record(7, std::nullopt);
    const EcgRecord c = synth_record(8, std::nullopt);
    CHECK(a.signal.shape() == std::vector<std::size_t>{12, 5000});
    CHECK(a.signal.values() == b.signal.values());
    CHECK(a.signal.values() != c.signal.values());
    CHECK(a.label == Label::Normal);
    a.validate();
    for (AnomalyKind k : all_anomaly_kinds()) {
        const EcgRecord x = synth_record(9, SynthAnomaly{k, 0, 0});
        const EcgRecord y = synth_record(9, SynthAnomaly{k, 0, 0});
        CHECK(x.signal.values() == y.signal.values());
        CHECK(x.label == Label::Anomalous);
        CHECK(parse_anomaly_kind(to_string(k)) == k);
    }
    CHECK(test::error_kind([] { parse_anomaly_kind("flutter"); }) == ErrorKind::Config);
}

TEST_CASE("an ST shift acts only inside its span") {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        const EcgRecord base = synth_record(seed, std::nullopt);
        const EcgRecord st = synth_record(seed, SynthAnomaly{AnomalyKind::StShift, 3500, 4000});
        CHECK(max_abs_diff(base.signal, st.signal, 0, 3500) == 0.0);
        // A plateau starts at most one beat's ST segment after the span.
        CHECK(max_abs_diff(base.signal, st.signal, 4250, 5000) == 0.0);
        CHECK(max_abs_diff(base.signal, st.signal, 3500, 4250) > 0.05);
    }
}

TEST_CASE("QRS attenuation and beat dropout change the signal") {
    const EcgRecord base = synth_record(5, std::nullopt);
    const EcgRecord q = synth_record(5, SynthAnomaly{AnomalyKind::QrsAmplitude, 0, 0});
    const EcgRecord d = synth_record(5, SynthAnomaly{AnomalyKind::BeatDropout, 0, 0});
    double peak_base = 0.0, peak_q = 0.0;
    for (std::size_t i = 0; i < base.signal.size(); ++i) {
        peak_base = std::max(peak_base, std::abs(base.signal[i]));
        peak_q = std::max(peak_q, std::abs(q.signal[i]));
    }
    CHECK(peak_q < 0.7 * peak_base);
    CHECK(max_abs_diff(base.signal, d.signal, 0, 5000) > 0.3);
}

TEST_CASE("synthetic datasets") {
    const auto dir = scratch_dir("synth");
    SynthDatasetOptions o;
    o.n_normal = 10;
    o.n_anomalous = 4;
    o.seed = 3;
    const DatasetIndex none = synth_dataset(o, dir / "none");
    CHECK(none.entries.size() == 10);
    for (const auto& e : none.entries) CHECK(e.label == Label::Normal);

    o.kinds = all_anomaly_kinds();
    const DatasetIndex idx = synth_dataset(o, dir / "a");
    const DatasetIndex again = synth_dataset(o, dir / "b");
    REQUIRE(idx.entries.size() == 14);
    std::size_t anomalous = 0;
    for (std::size_t i = 0; i < idx.entries.size(); ++i) {
        const auto& e = idx.entries[i];
        anomalous += e.label == Label::Anomalous;
        if (e.split == Split::Train || e.split == Split::Val) CHECK(e.label == Label::Normal);
        CHECK(hash_file(e.path) == hash_file(again.entries[i].path));
        CHECK(e.split == again.entries[i].split);
    }
    CHECK(anomalous == 4);
    CHECK(fs::exists(dir / "a" / "manifest.csv"));
    const DatasetIndex back = read_manifest(dir / "a" / "manifest.csv");
    REQUIRE(back.entries.size() == idx.entries.size());
    for (std::size_t i = 0; i < back.entries.size(); ++i) {
        CHECK(back.entries[i].record_id == idx.entries[i].record_id);
        CHECK(back.entries[i].label == idx.entries[i].label);
        CHECK(back.entries[i].split == idx.entries[i].split);
    }
    CHECK(npy::load(idx.entries[0].path).shape() == std::vector<std::size_t>{12, 5000});
    fs::remove_all(dir);
}

TEST_CASE("cae smoke training on a synthetic normal corpus") {
    const auto dir = scratch_dir("smoke");
    SynthDatasetOptions o;
    o.n_normal = 256;
    o.seed = 11;
    o.train_fraction = 0.8;
    o.val_fraction = 0.2;
    const DatasetIndex idx = synth_dataset(o, dir / "data");

    ModelConfig cfg = small_cae();
    cfg.epochs = 5;
    TrainOptions to;
    to.seed = 5;
    to.schedule = BetaSchedule::for_kind(ModelKind::Cae, cfg.epochs);
    to.windows_per_epoch = 1500;
    to.val_windows = 600;
    to.out_dir = dir / "ckpt";
    const TrainResult r = train(cfg, idx, PreprocessOptions{}, to);
    REQUIRE(r.log.size() == 5);
    CHECK(r.log[1].val_loss < r.log[0].val_loss);
    CHECK(r.log[2].val_loss < r.log[1].val_loss);
    CHECK(r.collapse_epochs.empty());

    // The best checkpoint round-trips bit for bit.
    const LoadedCheckpoint ck = load_checkpoint(r.best_dir);
    CHECK(ck.id == weights_fingerprint(*r.best));
    CHECK(ck.log.size() == r.log.size());
    fs::remove_all(dir);
}

TEST_CASE("checkpoints round trip for every model kind") {
    const auto dir = scratch_dir("ckpt");
    Tensor x({2, 12, 500});
    const EcgRecord rec = synth_record(1, std::nullopt);
    std::copy_n(rec.signal.data(), x.size(), x.data());
    for (ModelKind k : {ModelKind::Cae, ModelKind::Vae, ModelKind::VaeMha}) {
        ModelConfig c = ModelConfig::defaults(k);
        c.channels = {4, 4};
        c.latent_dim = 4;
        c.hidden_dim = 4;
        c.lead_heads = 2;
        c.mha_heads = 2;
        const auto m = make_model(c, 9);
        const auto sub = dir / to_string(k);
        save_checkpoint(sub, *m, BetaSchedule::for_kind(k, c.epochs), {});
        const LoadedCheckpoint ck = load_checkpoint(sub);
        CHECK(ck.model->kind() == k);
        CHECK(ck.id == weights_fingerprint(*m));
        CHECK(ck.model->forward(x).recon.mean.values() == m->forward(x).recon.mean.values());
    }
    CHECK(test::error_kind([&] { load_checkpoint(dir / "missing"); }) == ErrorKind::Config);
    fs::remove_all(dir);
}

TEST_CASE("training is deterministic in the seed") {
    Tensor w({64, 12, 500});
    for (std::size_t i = 0; i < 4; ++i) {
        const EcgRecord rec = preprocess(synth_record(20 + i, std::nullopt), PreprocessOptions{});
        const WindowBatch wb = segment(rec, 500, 300);
        std::copy_n(wb.windows.data(), 16 * 6000, w.data() + i * 16 * 6000);
    }
    ModelConfig cfg = small_cae();
    cfg.epochs = 2;
    TrainOptions to;
    to.seed = 4;
    to.schedule = BetaSchedule::for_kind(ModelKind::Cae, cfg.epochs);
    const TrainResult a = train(cfg, w, Tensor(), to);
    const TrainResult b = train(cfg, w, Tensor(), to);
    CHECK(weights_fingerprint(*a.final) == weights_fingerprint(*b.final));
    to.seed = 5;
    const TrainResult c = train(cfg, w, Tensor(), to);
    CHECK(weights_fingerprint(*a.final) != weights_fingerprint(*c.final));
    CHECK(test::error_kind([&] { train(cfg, Tensor({0, 12, 500}), Tensor(), to); }) == ErrorKind::Config);
}

#include "ecgad/train.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "ecgad/dataset.hpp"
#include "ecgad/error.hpp"
#include "ecgad/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace ecgad {

namespace {

void copy_weights(const Model& from, Model& to) {
    const auto src = from.params();
    const auto dst = to.params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
}

std::unique_ptr<Model> clone(const Model& m) {
    auto out = make_model(m.config());
    copy_weights(m, *out);
    return out;
}

void check_windows(const Tensor& w, const ModelConfig& c, const char* what) {
    if (w.empty()) return;
    if (w.rank() != 3 || w.dim(1) != c.leads || w.dim(2) != c.window_len)
        fail(ErrorKind::Shape, std::string(what) + " windows " + shape_string(w.shape()) + " do not match [N, " +
                                   std::to_string(c.leads) + ", " + std::to_string(c.window_len) + "]");
}

}  // namespace

Tensor gather_windows(const Tensor& windows, const std::vector<std::size_t>& idx) {
    const std::size_t stride = windows.size() / windows.dim(0);
    Tensor out({idx.size(), windows.dim(1), windows.dim(2)});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(windows.data() + idx[i] * stride, stride, out.data() + i * stride);
    return out;
}

LossTerms evaluate_loss(const Model& model, const Tensor& windows, double beta, std::size_t batch_size) {
    LossTerms sum;
    const std::size_t n = windows.dim(0);
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, n - start));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor batch = gather_windows(windows, idx);
        const ForwardPass p = model.forward(batch);
        const LossTerms t = compute_loss(model.kind(), batch, p.recon, p.stats, beta);
        const double w = static_cast<double>(idx.size()) / static_cast<double>(n);
        sum.total += w * t.total;
        sum.recon += w * t.recon;
        sum.kl += w * t.kl;
        sum.attention += w * t.attention;
    }
    sum.beta = beta;
    return sum;
}

TrainResult train(const ModelConfig& config, const Tensor& train_windows, const Tensor& val_windows,
                  const TrainOptions& options) {
    config.validate();
    if (train_windows.empty() || train_windows.dim(0) == 0) fail(ErrorKind::Config, "training set is empty");
    check_windows(train_windows, config, "training");
    check_windows(val_windows, config, "validation");
    if (options.schedule.total_epochs < config.epochs)
        fail(ErrorKind::Config, "beta schedule covers fewer epochs than configured");

    auto model = make_model(config, derive_seed(options.seed, "init"));
    std::mt19937_64 rng(derive_seed(options.seed, "train"));
    nn::Adam opt(model->params(), config.learning_rate);

    const std::size_t N = train_windows.dim(0);
    const std::size_t per_epoch =
        options.windows_per_epoch == 0 ? N : std::min(options.windows_per_epoch, N);

    Tensor val = val_windows;
    if (!val.empty() && options.val_windows > 0 && options.val_windows < val.dim(0)) {
        std::mt19937_64 vrng(derive_seed(options.seed, "val"));
        std::vector<std::size_t> all(val.dim(0));
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), vrng);
        all.resize(options.val_windows);
        std::sort(all.begin(), all.end());
        val = gather_windows(val_windows, all);
    }

    TrainResult result;
    std::unique_ptr<Model> best;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double beta = beta_at(epoch, options.schedule);
        std::shuffle(order.begin(), order.end(), rng);

        EpochLog log;
        log.epoch = epoch;
        log.beta = beta;
        double mu_abs = 0.0, lv_abs = 0.0;
        std::size_t mu_count = 0;
        for (std::size_t start = 0; start < per_epoch; start += config.batch_size) {
            const std::size_t end = std::min(per_epoch, start + config.batch_size);
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
            const Tensor batch = gather_windows(train_windows, idx);
            opt.zero_grad();
            ForwardOptions fo;
            fo.training = true;
            fo.rng = &rng;
            const ForwardPass pass = model->forward(batch, fo);
            OutputGrads grads;
            const LossTerms t = compute_loss(config.kind, batch, pass.recon, pass.stats, beta, &grads);
            if (!std::isfinite(t.total))
                fail(ErrorKind::Training, "non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                              std::to_string(start) + " (recon " + std::to_string(t.recon) +
                                              ", kl " + std::to_string(t.kl) + ", beta " + std::to_string(beta) +
                                              ")");
            model->backward(pass, grads);
            opt.clip_grad_norm(config.grad_clip);
            opt.step();

            const double w = static_cast<double>(idx.size()) / static_cast<double>(per_epoch);
            log.total += w * t.total;
            log.recon += w * (t.recon + t.attention);
            log.kl += w * t.kl;
            for (double v : pass.stats.mu.values()) mu_abs += std::abs(v);
            for (double v : pass.stats.logvar.values()) lv_abs += std::abs(v);
            mu_count += pass.stats.mu.size();
        }
        if (mu_count > 0) {
            log.mean_abs_mu = mu_abs / static_cast<double>(mu_count);
            log.mean_abs_logvar = lv_abs / static_cast<double>(mu_count);
            log.collapse = log.mean_abs_mu < options.collapse_tolerance &&
                           log.mean_abs_logvar < options.collapse_tolerance;
        }
        log.val_loss = val.empty() ? log.total : evaluate_loss(*model, val, beta, config.batch_size).total;
        if (!std::isfinite(log.val_loss))
            fail(ErrorKind::Training, "non-finite validation loss at epoch " + std::to_string(epoch));
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (log.collapse) {
            result.collapse_epochs.push_back(epoch);
            spdlog::warn("posterior collapse at epoch {}: mean |mu| {:.3g}, mean |logvar| {:.3g}", epoch,
                         log.mean_abs_mu, log.mean_abs_logvar);
        }
        spdlog::info("{} epoch {}/{} loss {:.5g} recon {:.5g} kl {:.5g} beta {:.3g} val {:.5g} ({:.1f}s)",
                     to_string(config.kind), epoch, config.epochs, log.total, log.recon, log.kl, beta, log.val_loss,
                     log.seconds);
        if (log.val_loss < best_val) {
            best_val = log.val_loss;
            best = clone(*model);
        }
        result.log.push_back(log);
        if (options.on_epoch) options.on_epoch(log);
    }

    result.best = std::move(best);
    result.final = std::move(model);
    if (!options.out_dir.empty()) {
        result.best_dir = options.out_dir / "best";
        result.final_dir = options.out_dir / "final";
        save_checkpoint(result.best_dir, *result.best, options.schedule, result.log);
        save_checkpoint(result.final_dir, *result.final, options.schedule, result.log);
    }
    return result;
}

TrainResult train(const ModelConfig& config, const DatasetIndex& index, const PreprocessOptions& preprocess,
                  const TrainOptions& options, std::size_t stride) {
    index.validate();
    const auto train_entries = index.in(Split::Train);
    if (train_entries.empty()) fail(ErrorKind::Config, "dataset index has no training records");
    const Tensor tw = stack_windows(load_prepared(train_entries, preprocess), config.window_len, stride);
    const auto val_entries = index.in(Split::Val);
    const Tensor vw = val_entries.empty()
                          ? Tensor()
                          : stack_windows(load_prepared(val_entries, preprocess), config.window_len, stride);
    return train(config, tw, vw, options);
}

// ------------------------------------------------------------ checkpoints

std::string weights_fingerprint(const Model& model) {
    std::uint64_t h = fnv1a64(to_string(model.kind()));
    for (const nn::Param* p : model.params()) {
        h = fnv1a64(p->name, h);
        h = fnv1a64({reinterpret_cast<const std::uint8_t*>(p->value.data()), p->value.size() * sizeof(double)}, h);
    }
    return hex64(h);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Runtime, "cannot write '" + path.string() + "'");
    out << text;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Config, "checkpoint file '" + path.string() + "' is missing");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, "malformed '" + path.string() + "': " + e.what());
    }
}

std::string format_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,total,recon,kl,beta,val_loss\n";
    for (const EpochLog& e : log)
        out << e.epoch << ',' << e.total << ',' << e.recon << ',' << e.kl << ',' << e.beta << ',' << e.val_loss
            << '\n';
    return out.str();
}

std::vector<EpochLog> parse_log_csv(const fs::path& path) {
    std::vector<EpochLog> log;
    std::ifstream in(path);
    if (!in) return log;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        EpochLog e;
        char comma;
        row >> e.epoch >> comma >> e.total >> comma >> e.recon >> comma >> e.kl >> comma >> e.beta >> comma >>
            e.val_loss;
        log.push_back(e);
    }
    return log;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Model& model, const BetaSchedule& schedule,
                     const std::vector<EpochLog>& log) {
    fs::create_directories(dir);
    json manifest = json::array();
    std::ofstream blob(dir / "weights.bin", std::ios::binary);
    if (!blob) fail(ErrorKind::Runtime, "cannot write checkpoint in '" + dir.string() + "'");
    std::size_t offset = 0;
    for (const nn::Param* p : model.params()) {
        manifest.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
        blob.write(reinterpret_cast<const char*>(p->value.data()),
                   static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        offset += p->value.size();
    }
    blob.close();
    write_text(dir / "weights.json", manifest.dump(1) + "\n");
    write_text(dir / "config.json", json(model.config()).dump(1) + "\n");
    write_text(dir / "schedule.json", json(schedule).dump(1) + "\n");
    write_text(dir / "training_log.csv", format_log_csv(log));
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorKind::Config, "checkpoint directory '" + dir.string() + "' not found");
    LoadedCheckpoint ck;
    ck.dir = dir;
    ModelConfig config;
    try {
        config = read_json(dir / "config.json").get<ModelConfig>();
        ck.schedule = read_json(dir / "schedule.json").get<BetaSchedule>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, "malformed checkpoint config in '" + dir.string() + "': " + e.what());
    }
    ck.model = make_model(config);
    const json manifest = read_json(dir / "weights.json");
    const auto params = ck.model->params();
    if (!manifest.is_array() || manifest.size() != params.size())
        fail(ErrorKind::Config, "checkpoint manifest does not match the model architecture");

    std::ifstream blob(dir / "weights.bin", std::ios::binary);
    if (!blob) fail(ErrorKind::Config, "checkpoint weights missing in '" + dir.string() + "'");
    for (std::size_t i = 0; i < params.size(); ++i) {
        nn::Param* p = params[i];
        const json& m = manifest[i];
        if (m.at("name").get<std::string>() != p->name || m.at("shape").get<Shape>() != p->value.shape())
            fail(ErrorKind::Config, "checkpoint tensor '" + m.at("name").get<std::string>() +
                                        "' does not match parameter '" + p->name + "'");
        blob.seekg(static_cast<std::streamoff>(m.at("offset").get<std::size_t>() * sizeof(double)));
        blob.read(reinterpret_cast<char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!blob) fail(ErrorKind::Config, "checkpoint weights truncated at '" + p->name + "'");
    }
    ck.log = parse_log_csv(dir / "training_log.csv");
    ck.id = weights_fingerprint(*ck.model);
    return ck;
}

void export_weights(const fs::path& dir, const Model& model) {
    fs::create_directories(dir);
    std::ofstream blob(dir / "weights.f32", std::ios::binary);
    if (!blob) fail(ErrorKind::Runtime, "cannot write export in '" + dir.string() + "'");
    json manifest = {{"model_kind", to_string(model.kind())}, {"dtype", "float32"}, {"tensors", json::array()}};
    std::size_t offset = 0;
    for (const nn::Param* p : model.params()) {
        std::vector<float> f(p->value.values().begin(), p->value.values().end());
        blob.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
        manifest["tensors"].push_back(
            {{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}, {"count", f.size()}});
        offset += f.size();
    }
    write_text(dir / "weights_manifest.json", manifest.dump(1) + "\n");
}

}  // namespace ecgad

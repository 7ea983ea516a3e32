#include "ecgad/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ecgad/dataset.hpp"
#include "ecgad/error.hpp"
#include "ecgad/hash.hpp"
#include "ecgad/npy.hpp"
#include "ecgad/train.hpp"

#ifndef ECGAD_BUILD_ID
#define ECGAD_BUILD_ID ""
#endif

namespace ecgad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Records held in memory at once while preparing or scoring a split.
constexpr std::size_t kChunk = 64;

std::vector<std::string> split_list(const std::string& text, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, sep)) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = item.find_last_not_of(" \t");
        out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& f) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + std::string(f(items[i]));
    return out;
}

double to_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) fail(ErrorKind::Config, "'" + key + "' expects a number, got '" + v + "'");
    return x;
}

std::uint64_t to_count(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        fail(ErrorKind::Config, "'" + key + "' expects a non-negative integer, got '" + v + "'");
    return std::stoull(v);
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorKind::Config, "'" + key + "' expects true or false, got '" + v + "'");
}

std::string real_text(double v) { return fmt::format("{}", v); }

std::string to_string(DataSource s) {
    switch (s) {
        case DataSource::Synthetic: return "synthetic";
        case DataSource::Manifest: return "manifest";
        case DataSource::Raw: return "raw";
    }
    return "?";
}

DataSource parse_source(const std::string& v) {
    if (v == "synthetic") return DataSource::Synthetic;
    if (v == "manifest") return DataSource::Manifest;
    if (v == "raw") return DataSource::Raw;
    fail(ErrorKind::Config, "data source must be synthetic, manifest or raw, got '" + v + "'");
}

struct Field {
    std::string section, key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define ECGAD_REAL(sec, name, member)                                                                         \
    Field {                                                                                                   \
        sec, name, [](ExperimentConfig& c, const std::string& v) { c.member = to_real(sec "." name, v); }, \
            [](const ExperimentConfig& c) { return real_text(c.member); }                                      \
    }
#define ECGAD_COUNT(sec, name, member)                                                                   \
    Field {                                                                                              \
        sec, name,                                                                                       \
            [](ExperimentConfig& c, const std::string& v) {                                              \
                c.member = static_cast<decltype(c.member)>(to_count(sec "." name, v));                   \
            },                                                                                           \
            [](const ExperimentConfig& c) { return std::to_string(c.member); }                           \
    }
#define ECGAD_BOOL(sec, name, member)                                                                         \
    Field {                                                                                                   \
        sec, name, [](ExperimentConfig& c, const std::string& v) { c.member = to_bool(sec "." name, v); }, \
            [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }                 \
    }

void add_model_fields(std::vector<Field>& f, ModelKind kind) {
    const std::string sec = to_string(kind);
    auto real = [&](const std::string& key, double ModelConfig::*m) {
        f.push_back({sec, key,
                     [kind, key, m, sec](ExperimentConfig& c, const std::string& v) {
                         c.model_configs[kind].*m = to_real(sec + "." + key, v);
                     },
                     [kind, m](const ExperimentConfig& c) { return real_text(c.model_configs.at(kind).*m); }});
    };
    auto count = [&](const std::string& key, std::size_t ModelConfig::*m) {
        f.push_back({sec, key,
                     [kind, key, m, sec](ExperimentConfig& c, const std::string& v) {
                         c.model_configs[kind].*m = to_count(sec + "." + key, v);
                     },
                     [kind, m](const ExperimentConfig& c) { return std::to_string(c.model_configs.at(kind).*m); }});
    };
    if (kind == ModelKind::Cae) {
        f.push_back({sec, "channels",
                     [kind, sec](ExperimentConfig& c, const std::string& v) {
                         auto& ch = c.model_configs[kind].channels;
                         ch.clear();
                         for (const auto& s : split_list(v)) ch.push_back(to_count(sec + ".channels", s));
                     },
                     [kind](const ExperimentConfig& c) {
                         return join(c.model_configs.at(kind).channels, [](std::size_t n) { return std::to_string(n); });
                     }});
        count("kernel_size", &ModelConfig::kernel_size);
        count("stride", &ModelConfig::stride);
    } else {
        count("latent_dim", &ModelConfig::latent_dim);
        count("hidden_dim", &ModelConfig::hidden_dim);
        real("encoder_dropout", &ModelConfig::encoder_dropout);
        real("input_noise_sigma", &ModelConfig::input_noise_sigma);
        if (kind == ModelKind::VaeMha) {
            count("lead_heads", &ModelConfig::lead_heads);
            count("mha_heads", &ModelConfig::mha_heads);
        }
    }
    real("learning_rate", &ModelConfig::learning_rate);
    count("epochs", &ModelConfig::epochs);
    count("batch_size", &ModelConfig::batch_size);
    real("grad_clip", &ModelConfig::grad_clip);
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(ECGAD_COUNT("run", "seed", seed));

        f.push_back({"data", "source", [](ExperimentConfig& c, const std::string& v) { c.source = parse_source(v); },
                     [](const ExperimentConfig& c) { return to_string(c.source); }});
        f.push_back({"data", "manifest", [](ExperimentConfig& c, const std::string& v) { c.manifest = v; },
                     [](const ExperimentConfig& c) { return c.manifest.string(); }});
        f.push_back({"data", "test_manifest", [](ExperimentConfig& c, const std::string& v) { c.test_manifest = v; },
                     [](const ExperimentConfig& c) { return c.test_manifest.string(); }});
        f.push_back({"data", "dataset_id", [](ExperimentConfig& c, const std::string& v) { c.dataset_id = v; },
                     [](const ExperimentConfig& c) { return c.dataset_id; }});

        f.push_back(ECGAD_COUNT("synth", "n_normal", synth.n_normal));
        f.push_back(ECGAD_COUNT("synth", "n_anomalous", synth.n_anomalous));
        f.push_back({"synth", "kinds",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.synth.kinds.clear();
                         for (const auto& s : split_list(v)) c.synth.kinds.push_back(parse_anomaly_kind(s));
                     },
                     [](const ExperimentConfig& c) {
                         return join(c.synth.kinds, [](AnomalyKind k) { return to_string(k); });
                     }});
        f.push_back(ECGAD_REAL("synth", "train_fraction", synth.train_fraction));
        f.push_back(ECGAD_REAL("synth", "val_fraction", synth.val_fraction));
        f.push_back(ECGAD_REAL("synth", "calibration_fraction", synth.calibration_fraction));
        f.push_back(ECGAD_REAL("synth", "anomalous_calibration_fraction", synth.anomalous_calibration_fraction));

        f.push_back({"curate", "normal_codes",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.curation.normal_codes.clear();
                         for (const auto& s : split_list(v)) c.curation.normal_codes.insert(s);
                     },
                     [](const ExperimentConfig& c) {
                         return join(std::vector<std::string>(c.curation.normal_codes.begin(),
                                                              c.curation.normal_codes.end()),
                                     [](const std::string& s) { return s; });
                     }});
        f.push_back(ECGAD_REAL("curate", "train_fraction", curation.train_fraction));

        f.push_back(ECGAD_REAL("preprocess", "band_low", preprocess.filter.band_low));
        f.push_back(ECGAD_REAL("preprocess", "band_high", preprocess.filter.band_high));
        f.push_back({"preprocess", "band_order",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.preprocess.filter.band_order = static_cast<int>(to_count("preprocess.band_order", v));
                     },
                     [](const ExperimentConfig& c) { return std::to_string(c.preprocess.filter.band_order); }});
        f.push_back(ECGAD_REAL("preprocess", "notch_freq", preprocess.filter.notch_freq));
        f.push_back(ECGAD_REAL("preprocess", "notch_quality", preprocess.filter.notch_quality));
        f.push_back(ECGAD_REAL("preprocess", "eps", preprocess.eps));
        f.push_back(ECGAD_BOOL("preprocess", "bandpass", preprocess.apply_bandpass));
        f.push_back(ECGAD_BOOL("preprocess", "notch", preprocess.apply_notch));
        f.push_back(ECGAD_BOOL("preprocess", "zscore", preprocess.apply_zscore));
        f.push_back(ECGAD_COUNT("preprocess", "window_len", window_len));
        f.push_back(ECGAD_COUNT("preprocess", "stride", stride));

        f.push_back({"train", "models",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.models.clear();
                         for (const auto& s : split_list(v)) c.models.push_back(parse_model_kind(s));
                     },
                     [](const ExperimentConfig& c) {
                         return join(c.models, [](ModelKind k) { return to_string(k); });
                     }});
        f.push_back(ECGAD_COUNT("train", "windows_per_epoch", windows_per_epoch));
        f.push_back(ECGAD_COUNT("train", "val_windows", val_windows));

        for (ModelKind k : {ModelKind::Cae, ModelKind::Vae, ModelKind::VaeMha}) add_model_fields(f, k);

        f.push_back({"calibrate", "strategies",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.strategies.clear();
                         for (const auto& s : split_list(v)) c.strategies.push_back(parse_strategy(s));
                     },
                     [](const ExperimentConfig& c) {
                         return join(c.strategies, [](Strategy s) { return to_string(s); });
                     }});
        f.push_back({"calibrate", "default",
                     [](ExperimentConfig& c, const std::string& v) { c.default_strategy = parse_strategy(v); },
                     [](const ExperimentConfig& c) { return to_string(c.default_strategy); }});
        f.push_back(ECGAD_REAL("calibrate", "q", pot_q));

        f.push_back(ECGAD_COUNT("score", "num_draws", score.num_draws));
        f.push_back(ECGAD_COUNT("score", "batch_size", score.batch_size));
        return f;
    }();
    return table;
}

#undef ECGAD_REAL
#undef ECGAD_COUNT
#undef ECGAD_BOOL

// Config with the model window length tied to the segmentation length.
ModelConfig model_config_for(const ExperimentConfig& config, ModelKind kind) {
    ModelConfig m = config.model_config(kind);
    m.window_len = config.window_len;
    return m;
}

std::vector<double> score_entries(const Model& model, const std::vector<IndexEntry>& entries,
                                  const ExperimentConfig& config) {
    std::vector<double> out;
    out.reserve(entries.size());
    for (std::size_t b = 0; b < entries.size(); b += kChunk) {
        const std::vector<IndexEntry> chunk(entries.begin() + static_cast<std::ptrdiff_t>(b),
                                            entries.begin() + static_cast<std::ptrdiff_t>(std::min(b + kChunk, entries.size())));
        const auto s = record_scores(model, load_prepared(chunk, config.preprocess), config.stride);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

std::vector<int> entry_labels(const std::vector<IndexEntry>& entries) {
    std::vector<int> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        if (e.label == Label::Unlabeled) fail(ErrorKind::Data, "record '" + e.record_id + "' has no label");
        out.push_back(e.label == Label::Anomalous ? 1 : 0);
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Runtime, "cannot write " + path.string());
    out << text;
}

}  // namespace

// --- configuration ------------------------------------------------------------

ExperimentConfig::ExperimentConfig() {
    curation.normal_codes = default_normal_codes();
    for (ModelKind k : {ModelKind::Cae, ModelKind::Vae, ModelKind::VaeMha}) model_configs[k] = ModelConfig::defaults(k);
}

void ExperimentConfig::validate() const {
    if (models.empty()) fail(ErrorKind::Config, "train.models lists no model");
    if (strategies.empty()) fail(ErrorKind::Config, "calibrate.strategies lists no strategy");
    if (std::find(strategies.begin(), strategies.end(), default_strategy) == strategies.end())
        fail(ErrorKind::Config, "calibrate.default must be one of calibrate.strategies");
    if (!(pot_q > 0.0 && pot_q < 1.0)) fail(ErrorKind::Config, "calibrate.q must lie in (0, 1)");
    if (score.num_draws == 0) fail(ErrorKind::Config, "score.num_draws must be positive");
    if (source != DataSource::Synthetic && manifest.empty())
        fail(ErrorKind::Config, "data.manifest is required for source " + to_string(source));
    const double f = synth.train_fraction + synth.val_fraction + synth.calibration_fraction;
    if (synth.train_fraction < 0 || synth.val_fraction < 0 || synth.calibration_fraction < 0 || f > 1.0 + 1e-12)
        fail(ErrorKind::Config, "synth split fractions must be non-negative and sum to at most 1");
    if (!(curation.train_fraction > 0.0 && curation.train_fraction <= 1.0))
        fail(ErrorKind::Config, "curate.train_fraction must lie in (0, 1]");
    preprocess.filter.validate(500);
    for (ModelKind k : models) model_config_for(*this, k).validate();
}

ExperimentConfig parse_config(const std::string& ini_text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(ini_text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        fail(ErrorKind::Config, std::string("unreadable config: ") + e.what());
    }
    ExperimentConfig c;
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty())
            fail(ErrorKind::Config, "config key '" + section + "' must sit inside a [section]");
        for (const auto& [key, value] : keys) {
            const auto& table = fields();
            const auto it = std::find_if(table.begin(), table.end(),
                                         [&](const Field& f) { return f.section == section && f.key == key; });
            if (it == table.end()) fail(ErrorKind::Config, "unknown config key '" + section + "." + key + "'");
            it->set(c, value.data());
        }
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Config, "cannot open config " + path.string());
    std::stringstream text;
    text << in.rdbuf();
    ExperimentConfig c = parse_config(text.str());
    // Data paths are relative to the config file.
    for (fs::path* p : {&c.manifest, &c.test_manifest})
        if (!p->empty() && p->is_relative()) *p = path.parent_path() / *p;
    return c;
}

std::string default_config_text() {
    const ExperimentConfig c;
    std::string out, section;
    for (const auto& f : fields()) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

json config_json(const ExperimentConfig& config) {
    json j = json::object();
    for (const auto& f : fields()) j[f.section][f.key] = f.get(config);
    return j;
}

// --- run manifests ------------------------------------------------------------------

void to_json(json& j, const RunManifest& m) {
    j = json{{"command", m.command},   {"config", m.config},   {"seed", m.seed},
             {"input_hashes", m.input_hashes}, {"outputs", m.outputs}, {"started", m.started},
             {"finished", m.finished}, {"version", m.version}, {"status", m.status}};
    if (!m.failed_stage.empty()) j["failed_stage"] = m.failed_stage;
    if (!m.error.empty()) j["error"] = m.error;
}

void from_json(const json& j, RunManifest& m) {
    j.at("command").get_to(m.command);
    m.config = j.value("config", json::object());
    j.at("seed").get_to(m.seed);
    m.input_hashes = j.value("input_hashes", std::map<std::string, std::string>{});
    m.outputs = j.value("outputs", std::vector<std::string>{});
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
    m.version = j.value("version", "");
    m.status = j.value("status", "");
    m.failed_stage = j.value("failed_stage", "");
    m.error = j.value("error", "");
}

std::string version_string() {
    const std::string id = ECGAD_BUILD_ID;
    return id.empty() ? std::string(ECGAD_VERSION) : std::string(ECGAD_VERSION) + "+g" + id;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

std::map<std::string, std::string> hash_inputs(const std::vector<fs::path>& paths) {
    std::map<std::string, std::string> out;
    for (const auto& p : paths) {
        if (p.empty()) continue;
        if (!fs::exists(p)) fail(ErrorKind::Config, "input " + p.string() + " does not exist");
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(p))
                if (e.is_regular_file()) files.push_back(e.path());
            std::sort(files.begin(), files.end());
            std::uint64_t h = fnv1a64(std::string_view("dir"));
            for (const auto& f : files) {
                h = fnv1a64(fs::relative(f, p).generic_string(), h);
                h = fnv1a64(hex64(hash_file(f)), h);
            }
            out[p.string()] = hex64(h);
        } else {
            out[p.string()] = hex64(hash_file(p));
        }
    }
    return out;
}

std::vector<std::string> detect_drift(const fs::path& out_dir, const std::map<std::string, std::string>& current) {
    std::vector<std::string> drifted;
    if (!fs::exists(out_dir / kRunManifestName)) return drifted;
    RunManifest previous;
    try {
        previous = read_run_manifest(out_dir);
    } catch (const std::exception& e) {
        spdlog::warn("ignoring unreadable previous manifest in {}: {}", out_dir.string(), e.what());
        return drifted;
    }
    for (const auto& [path, digest] : current) {
        const auto it = previous.input_hashes.find(path);
        if (it != previous.input_hashes.end() && it->second != digest) {
            spdlog::warn("input drift: {} changed since the previous run ({} -> {})", path, it->second, digest);
            drifted.push_back(path);
        }
    }
    return drifted;
}

void write_run_manifest(const fs::path& out_dir, const RunManifest& manifest) {
    fs::create_directories(out_dir);
    write_text(out_dir / kRunManifestName, json(manifest).dump(2) + "\n");
}

RunManifest read_run_manifest(const fs::path& out_dir) {
    std::ifstream in(out_dir / kRunManifestName);
    if (!in) fail(ErrorKind::Config, "no run manifest in " + out_dir.string());
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) fail(ErrorKind::Format, "malformed run manifest in " + out_dir.string());
    return j.get<RunManifest>();
}

// --- stages ------------------------------------------------------------------------------

std::vector<RawEntry> read_raw_listing(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) fail(ErrorKind::Config, "cannot open raw listing " + csv.string());
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::Curation, "raw listing " + csv.string() + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_list(line);
    const auto col = [&](const std::string& name) -> std::optional<std::size_t> {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto path_col = col("path"), codes_col = col("codes"), id_col = col("record_id");
    if (!path_col || !codes_col) fail(ErrorKind::Format, "raw listing needs columns path and codes");
    std::vector<RawEntry> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() < header.size())
            fail(ErrorKind::Format, "raw listing line " + std::to_string(lineno) + " has too few fields");
        RawEntry e;
        e.path = f[*path_col];
        if (e.path.is_relative()) e.path = csv.parent_path() / e.path;
        e.codes = split_list(f[*codes_col], '|');
        if (id_col) e.record_id = f[*id_col];
        out.push_back(std::move(e));
    }
    return out;
}

DatasetIndex synth_stage(const ExperimentConfig& config, const fs::path& out) {
    SynthDatasetOptions o = config.synth;
    o.seed = derive_seed(config.seed, "synth");
    return synth_dataset(o, out);
}

DatasetIndex curate_stage(const fs::path& raw_csv, const ExperimentConfig& config, const fs::path& out) {
    CurationOptions o = config.curation;
    o.seed = derive_seed(config.seed, "curate");
    const DatasetIndex index = curate(read_raw_listing(raw_csv), o);
    fs::create_directories(out);
    write_manifest(index, out / "manifest.csv");
    spdlog::info("curated {} normal records ({} train, {} val)", index.entries.size(), index.in(Split::Train).size(),
                 index.in(Split::Val).size());
    return index;
}

void preprocess_stage(const DatasetIndex& index, const ExperimentConfig& config, const fs::path& out) {
    // Validates the windowing before any record is touched.
    segment(Tensor({1, config.window_len}, 0.0), config.window_len, config.stride);
    fs::create_directories(out);
    const auto& entries = index.entries;
    for (std::size_t b = 0; b < entries.size(); b += kChunk) {
        const std::vector<IndexEntry> chunk(entries.begin() + static_cast<std::ptrdiff_t>(b),
                                            entries.begin() + static_cast<std::ptrdiff_t>(std::min(b + kChunk, entries.size())));
        for (const EcgRecord& rec : load_prepared(chunk, config.preprocess)) {
            const WindowBatch wb = segment(rec, config.window_len, config.stride);
            npy::save(out / (rec.record_id + ".npy"), wb.windows);
            const json meta{{"record_id", rec.record_id}, {"m", wb.window_len}, {"s", wb.stride}, {"starts", wb.starts}};
            write_text(out / (rec.record_id + ".json"), meta.dump() + "\n");
        }
    }
    spdlog::info("preprocessed {} records into {}", entries.size(), out.string());
}

Tensor load_split_windows(const DatasetIndex& index, Split split, const fs::path& windows_dir) {
    std::vector<Tensor> parts;
    std::size_t n = 0, leads = 0, m = 0;
    for (const auto& e : index.in(split)) {
        const fs::path p = windows_dir / (e.record_id + ".npy");
        if (!fs::exists(p)) fail(ErrorKind::Config, "no preprocessed windows for '" + e.record_id + "' in " + windows_dir.string());
        Tensor t = npy::load(p);
        if (t.rank() != 3) fail(ErrorKind::Shape, p.string() + " is not a [n, leads, m] window array");
        if (parts.empty()) {
            leads = t.dim(1);
            m = t.dim(2);
        } else if (t.dim(1) != leads || t.dim(2) != m) {
            fail(ErrorKind::Shape, p.string() + " disagrees with the window shape of earlier records");
        }
        n += t.dim(0);
        parts.push_back(std::move(t));
    }
    if (parts.empty()) return Tensor();
    Tensor out({n, leads, m});
    std::size_t off = 0;
    for (const auto& t : parts) {
        std::copy_n(t.data(), t.size(), out.data() + off);
        off += t.size();
    }
    return out;
}

fs::path train_stage(const DatasetIndex& index, const ExperimentConfig& config, ModelKind kind, const fs::path& out,
                     const fs::path& windows_dir) {
    const ModelConfig cfg = model_config_for(config, kind);
    TrainOptions o;
    o.schedule = BetaSchedule::for_kind(kind, cfg.epochs);
    o.seed = derive_seed(config.seed, "train/" + to_string(kind));
    o.windows_per_epoch = config.windows_per_epoch;
    o.val_windows = config.val_windows;
    const TrainResult r = windows_dir.empty()
                              ? train(cfg, index, config.preprocess, o, config.stride)
                              : train(cfg, load_split_windows(index, Split::Train, windows_dir),
                                      load_split_windows(index, Split::Val, windows_dir), o);
    if (!r.collapse_epochs.empty())
        spdlog::warn("{}: posterior-collapse alarm raised in {} epoch(s)", to_string(kind), r.collapse_epochs.size());
    const fs::path dir = out / to_string(kind);
    fs::remove_all(dir);
    save_checkpoint(dir, *r.best, o.schedule, r.log);
    save_checkpoint(dir / "final", *r.final, o.schedule, r.log);
    return dir;
}

ThresholdSet calibrate_stage(const DatasetIndex& index, const ExperimentConfig& config, const fs::path& ckpt_dir) {
    const LoadedCheckpoint ck = load_checkpoint(ckpt_dir);
    CalibrationInputs in;
    in.q = config.pot_q;
    in.val_scores = score_entries(*ck.model, index.in(Split::Val), config);
    const auto calib = index.in(Split::Calibration);
    in.calib_scores = score_entries(*ck.model, calib, config);
    in.calib_labels = entry_labels(calib);

    ThresholdSet set;
    set.default_strategy = config.default_strategy;
    for (Strategy s : config.strategies) {
        try {
            set.thresholds.push_back(calibrate(s, in));
        } catch (const Error& e) {
            if (s == config.default_strategy) throw;
            spdlog::warn("{}: skipping {} threshold: {}", to_string(ck.model->kind()), to_string(s), e.what());
        }
    }
    save_thresholds(ckpt_dir, set);
    if (const ThresholdModel* t = set.default_threshold())
        spdlog::info("{}: default {} threshold tau = {:.6g}", to_string(ck.model->kind()), to_string(t->strategy), t->tau);
    return set;
}

std::vector<MetricsReport> evaluate_stage(const DatasetIndex& test_index, const ExperimentConfig& config,
                                          const std::vector<fs::path>& ckpt_dirs, const fs::path& out) {
    const auto test = test_index.in(Split::Test);
    if (test.empty()) fail(ErrorKind::Data, "the test split is empty");
    const std::vector<int> labels = entry_labels(test);
    std::vector<MetricsReport> rows;
    std::string scores_csv = "model,record_id,label,score\n";
    for (const auto& dir : ckpt_dirs) {
        const LoadedCheckpoint ck = load_checkpoint(dir);
        const auto set = load_thresholds(dir);
        if (!set || set->thresholds.empty())
            fail(ErrorKind::Config, "checkpoint " + dir.string() + " has no thresholds; run calibrate first");
        const std::string name = to_string(ck.model->kind());
        const std::vector<double> scores = score_entries(*ck.model, test, config);
        for (const auto& t : set->thresholds) rows.push_back(evaluate_scores(scores, labels, t, name, config.dataset_id));
        for (std::size_t i = 0; i < test.size(); ++i)
            scores_csv += fmt::format("{},{},{},{}\n", name, test[i].record_id, labels[i], scores[i]);
    }
    write_benchmark(out, rows);
    write_text(out / "scores.csv", scores_csv);
    return rows;
}

std::vector<AnomalyReport> score_stage(const std::vector<fs::path>& inputs, const ExperimentConfig& config,
                                       const fs::path& ckpt_dir, std::optional<double> tau, const fs::path& out) {
    const LoadedCheckpoint ck = load_checkpoint(ckpt_dir);
    if (!tau) {
        const auto set = load_thresholds(ckpt_dir);
        const ThresholdModel* t = set ? set->default_threshold() : nullptr;
        if (t == nullptr)
            fail(ErrorKind::Config, "checkpoint " + ckpt_dir.string() + " has no calibrated threshold; pass --tau");
        tau = t->tau;
    }
    fs::create_directories(out);
    std::vector<AnomalyReport> reports;
    for (const auto& path : inputs) {
        const EcgRecord rec = prepare_record(read_record(path), config.preprocess);
        ScoreOptions so = config.score;
        so.seed = derive_seed(config.seed, "score/" + rec.record_id);
        AnomalyReport r = explain(rec, *ck.model, *tau, config.stride, so);
        write_text(out / (rec.record_id + ".json"), report_to_json(r).dump() + "\n");
        reports.push_back(std::move(r));
    }
    return reports;
}

RunManifest run_pipeline(const ExperimentConfig& config, const fs::path& config_path, const fs::path& out) {
    config.validate();
    fs::create_directories(out);
    RunManifest m;
    m.command = "pipeline";
    m.config = config_json(config);
    m.seed = config.seed;
    m.version = version_string();
    m.started = utc_timestamp();
    m.input_hashes = hash_inputs({config_path, config.manifest, config.test_manifest});
    detect_drift(out, m.input_hashes);
    write_run_manifest(out, m);

    const auto stage = [&](const std::string& name, const std::function<void(const fs::path&)>& body) {
        const fs::path dir = out / name;
        fs::remove_all(dir);
        fs::create_directories(dir);
        spdlog::info("stage {}", name);
        auto quarantine_and_record = [&](const std::string& what) {
            const fs::path q = out / "quarantine" / (name + "-" + std::to_string(std::chrono::system_clock::now().time_since_epoch().count()));
            fs::create_directories(q.parent_path());
            fs::rename(dir, q);
            m.status = "failed";
            m.failed_stage = name;
            m.error = what;
            m.finished = utc_timestamp();
            write_run_manifest(out, m);
            spdlog::error("stage {} failed: {} (partial output moved to {})", name, what, q.string());
        };
        try {
            body(dir);
        } catch (const Error& e) {
            quarantine_and_record(e.what());
            throw Error(e.kind(), "stage " + name + " failed: " + e.what());
        } catch (const std::exception& e) {
            quarantine_and_record(e.what());
            throw Error(ErrorKind::Runtime, "stage " + name + " failed: " + e.what());
        }
        m.outputs.push_back(dir.string());
    };

    DatasetIndex index;
    stage("curate", [&](const fs::path& dir) {
        switch (config.source) {
            case DataSource::Synthetic: index = synth_stage(config, dir); break;
            case DataSource::Raw: index = curate_stage(config.manifest, config, dir); break;
            case DataSource::Manifest:
                index = read_manifest(config.manifest, config.curation.normal_codes);
                write_manifest(index, dir / "manifest.csv");
                break;
        }
    });
    const DatasetIndex test_index =
        config.test_manifest.empty() ? index : read_manifest(config.test_manifest, config.curation.normal_codes);

    stage("preprocess", [&](const fs::path& dir) {
        DatasetIndex fit;
        for (const auto& e : index.entries)
            if (e.split == Split::Train || e.split == Split::Val) fit.entries.push_back(e);
        preprocess_stage(fit, config, dir);
    });

    std::vector<fs::path> ckpts;
    stage("train", [&](const fs::path& dir) {
        for (ModelKind k : config.models) ckpts.push_back(train_stage(index, config, k, dir, out / "preprocess"));
    });

    stage("calibrate", [&](const fs::path& dir) {
        json summary = json::object();
        for (const auto& ck : ckpts) {
            const ThresholdSet set = calibrate_stage(index, config, ck);
            summary[ck.filename().string()] = set.thresholds;
        }
        write_text(dir / "thresholds.json", summary.dump(2) + "\n");
    });

    stage("evaluate", [&](const fs::path& dir) { evaluate_stage(test_index, config, ckpts, dir); });

    m.status = "ok";
    m.finished = utc_timestamp();
    write_run_manifest(out, m);
    return m;
}

}  // namespace ecgad

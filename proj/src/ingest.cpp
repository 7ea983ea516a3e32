#include "ecgad/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "ecgad/error.hpp"
#include "ecgad/npy.hpp"

namespace ecgad {

namespace fs = std::filesystem;

std::string_view to_string(Label v) {
    switch (v) {
    case Label::Normal: return "normal";
    case Label::Anomalous: return "anomalous";
    case Label::Unlabeled: return "unlabeled";
    }
    return "unlabeled";
}

std::string_view to_string(Provenance v) {
    switch (v) {
    case Provenance::Ptbxl: return "ptbxl";
    case Provenance::Mimic: return "mimic";
    case Provenance::Cpsc: return "cpsc";
    case Provenance::Synthetic: return "synthetic";
    case Provenance::UserUpload: return "user_upload";
    }
    return "user_upload";
}

std::string_view to_string(Split v) {
    switch (v) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Calibration: return "calibration";
    case Split::Test: return "test";
    }
    return "test";
}

Label parse_label(std::string_view s) {
    if (s == "normal") return Label::Normal;
    if (s == "anomalous") return Label::Anomalous;
    if (s == "unlabeled" || s.empty()) return Label::Unlabeled;
    fail(ErrorKind::Config, "unknown label '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "calibration") return Split::Calibration;
    if (s == "test") return Split::Test;
    fail(ErrorKind::Config, "unknown split '" + std::string(s) + "'");
}

std::vector<std::string> EcgRecord::default_lead_names() {
    return {kLeadNames.begin(), kLeadNames.end()};
}

void EcgRecord::validate() const {
    if (signal.rank() != 2 || signal.dim(0) != kLeads)
        fail(ErrorKind::Shape, "record '" + record_id + "' must have 12 leads, got shape " +
                                   shape_string(signal.shape()));
    if (sampling_rate <= 0)
        fail(ErrorKind::Data, "record '" + record_id + "' has non-positive sampling rate");
    if (lead_names.size() != kLeads) fail(ErrorKind::Shape, "record '" + record_id + "' needs 12 lead names");
    for (double v : signal.values())
        if (!std::isfinite(v)) fail(ErrorKind::Data, "record '" + record_id + "' contains non-finite samples");
}

// --- WFDB ----------------------------------------------------------------------

namespace {

std::vector<std::string> tokens(const std::string& line) {
    std::istringstream ss(line);
    return {std::istream_iterator<std::string>(ss), std::istream_iterator<std::string>()};
}

double parse_number(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        fail(ErrorKind::Format, "unreadable " + what + " '" + s + "'");
    }
    if (used != s.size()) fail(ErrorKind::Format, "unreadable " + what + " '" + s + "'");
    return v;
}

struct WfdbSignal {
    std::string file;
    double gain = 200.0;
    double baseline = 0.0;
    std::string description;
};

struct WfdbHeader {
    std::string name;
    int nsig = 0;
    double fs = 250.0;
    std::size_t nsamp = 0;
    std::vector<WfdbSignal> signals;
};

WfdbHeader parse_wfdb_header(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    WfdbHeader h;
    bool record_line = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        auto t = tokens(line);
        if (!record_line) {
            record_line = true;
            if (t.size() < 2) fail(ErrorKind::Format, "WFDB record line needs a name and signal count");
            h.name = t[0].substr(0, t[0].find('/'));
            h.nsig = static_cast<int>(parse_number(t[1], "signal count"));
            if (t.size() > 2) {
                std::string f = t[2].substr(0, t[2].find_first_of("/("));
                h.fs = parse_number(f, "sampling frequency");
            }
            if (t.size() > 3) h.nsamp = static_cast<std::size_t>(parse_number(t[3], "sample count"));
            continue;
        }
        if (t.size() < 2) fail(ErrorKind::Format, "WFDB signal line too short");
        WfdbSignal sig;
        sig.file = t[0];
        const std::string fmt = t[1].substr(0, t[1].find_first_of("x:+"));
        if (fmt != "16") fail(ErrorKind::Format, "unsupported WFDB signal format " + fmt + " (only 16)");
        std::optional<double> baseline;
        double adc_zero = 0.0;
        if (t.size() > 2) {
            std::string g = t[2];
            const auto slash = g.find('/');
            if (slash != std::string::npos) g = g.substr(0, slash);
            const auto paren = g.find('(');
            if (paren != std::string::npos) {
                const auto close = g.find(')', paren);
                if (close == std::string::npos) fail(ErrorKind::Format, "unreadable gain '" + t[2] + "'");
                baseline = parse_number(g.substr(paren + 1, close - paren - 1), "baseline");
                g = g.substr(0, paren);
            }
            sig.gain = parse_number(g, "gain");
            if (sig.gain == 0.0) sig.gain = 200.0;  // WFDB default for unspecified gain
            if (sig.gain < 0.0 || !std::isfinite(sig.gain)) fail(ErrorKind::Format, "unreadable gain '" + t[2] + "'");
        }
        if (t.size() > 4) adc_zero = parse_number(t[4], "ADC zero");
        sig.baseline = baseline.value_or(adc_zero);
        if (t.size() > 8) {
            sig.description = t[8];
            for (std::size_t k = 9; k < t.size(); ++k) sig.description += " " + t[k];
        }
        h.signals.push_back(std::move(sig));
    }
    if (!record_line) fail(ErrorKind::Format, "empty WFDB header");
    if (static_cast<int>(h.signals.size()) != h.nsig)
        fail(ErrorKind::Format, "WFDB header declares " + std::to_string(h.nsig) + " signals but lists " +
                                    std::to_string(h.signals.size()));
    return h;
}

void check_wfdb_shape(const WfdbHeader& h) {
    if (h.nsig != static_cast<int>(kLeads))
        fail(ErrorKind::Shape, "WFDB record declares " + std::to_string(h.nsig) + " channels, expected 12");
    for (const auto& s : h.signals)
        if (s.file != h.signals.front().file)
            fail(ErrorKind::Format, "WFDB signals split across several files are not supported");
}

EcgRecord decode_wfdb(const WfdbHeader& h, std::span<const std::uint8_t> bytes, std::string record_id) {
    const std::size_t frame = kLeads * 2;
    std::size_t nsamp = h.nsamp;
    if (nsamp == 0) nsamp = bytes.size() / frame;
    if (bytes.size() < nsamp * frame)
        fail(ErrorKind::Format, "WFDB signal file holds " + std::to_string(bytes.size() / frame) +
                                    " frames, header declares " + std::to_string(nsamp));
    if (std::abs(h.fs - std::round(h.fs)) > 1e-9 || h.fs <= 0)
        fail(ErrorKind::Format, "non-integer sampling frequency is not supported");

    EcgRecord rec;
    rec.record_id = record_id.empty() ? h.name : std::move(record_id);
    rec.sampling_rate = static_cast<int>(std::lround(h.fs));
    rec.signal = Tensor({kLeads, nsamp});
    for (std::size_t t = 0; t < nsamp; ++t)
        for (std::size_t l = 0; l < kLeads; ++l) {
            const std::size_t off = (t * kLeads + l) * 2;
            const auto raw = static_cast<std::int16_t>(bytes[off] | (bytes[off + 1] << 8));
            rec.signal.at(l, t) = (raw - h.signals[l].baseline) / h.signals[l].gain;
        }
    rec.lead_names = EcgRecord::default_lead_names();
    for (std::size_t l = 0; l < kLeads; ++l)
        if (!h.signals[l].description.empty()) rec.lead_names[l] = h.signals[l].description;
    rec.validate();
    return rec;
}

}  // namespace

EcgRecord parse_wfdb(std::string_view header_text, std::span<const std::uint8_t> signal_bytes,
                     std::string record_id) {
    const auto h = parse_wfdb_header(header_text);
    check_wfdb_shape(h);
    return decode_wfdb(h, signal_bytes, std::move(record_id));
}

EcgRecord read_wfdb(const fs::path& header_path) {
    std::ifstream hin(header_path);
    if (!hin) fail(ErrorKind::Format, "cannot open WFDB header " + header_path.string());
    const std::string text((std::istreambuf_iterator<char>(hin)), std::istreambuf_iterator<char>());
    const auto h = parse_wfdb_header(text);
    check_wfdb_shape(h);
    const fs::path dat = header_path.parent_path() / h.signals.front().file;
    std::ifstream din(dat, std::ios::binary);
    if (!din) fail(ErrorKind::Format, "missing WFDB signal file " + dat.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(din)), std::istreambuf_iterator<char>());
    return decode_wfdb(h, bytes, header_path.stem().string());
}

void write_wfdb(const EcgRecord& record, const fs::path& dir, const std::string& name, double gain,
                int baseline) {
    record.validate();
    fs::create_directories(dir);
    const std::size_t n = record.samples();
    {
        std::ofstream hea(dir / (name + ".hea"));
        hea << name << ' ' << kLeads << ' ' << record.sampling_rate << ' ' << n << '\n';
        for (std::size_t l = 0; l < kLeads; ++l)
            hea << name << ".dat 16 " << gain << '(' << baseline << ")/mV 16 0 0 0 0 " << record.lead_names[l]
                << '\n';
    }
    std::vector<std::uint8_t> bytes(n * kLeads * 2);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t l = 0; l < kLeads; ++l) {
            const double v = std::round(record.signal.at(l, t) * gain) + baseline;
            const auto raw = static_cast<std::int16_t>(std::clamp(v, -32768.0, 32767.0));
            const auto u = static_cast<std::uint16_t>(raw);
            bytes[(t * kLeads + l) * 2] = static_cast<std::uint8_t>(u & 0xff);
            bytes[(t * kLeads + l) * 2 + 1] = static_cast<std::uint8_t>(u >> 8);
        }
    std::ofstream dat(dir / (name + ".dat"), std::ios::binary);
    dat.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// --- arrays ----------------------------------------------------------------------

EcgRecord record_from_array(const Tensor& array, int sampling_rate, std::string record_id) {
    if (array.rank() != 2)
        fail(ErrorKind::Shape, "expected a 2-D array of shape [12, T] or [T, 12], got " + shape_string(array.shape()));
    EcgRecord rec;
    rec.record_id = std::move(record_id);
    rec.sampling_rate = sampling_rate;
    rec.label = Label::Unlabeled;
    if (array.dim(0) == kLeads) {
        // Also covers the square case: axis 0 is leads.
        rec.signal = array;
    } else if (array.dim(1) == kLeads) {
        const std::size_t T = array.dim(0);
        rec.signal = Tensor({kLeads, T});
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t l = 0; l < kLeads; ++l) rec.signal.at(l, t) = array.at(t, l);
    } else {
        fail(ErrorKind::Shape, "neither axis of " + shape_string(array.shape()) + " has 12 leads");
    }
    for (double v : rec.signal.values())
        if (!std::isfinite(v)) fail(ErrorKind::Data, "array contains non-finite entries");
    rec.validate();
    return rec;
}

EcgRecord read_array(const fs::path& path, std::optional<int> rate_override) {
    int rate = 500;
    if (rate_override) {
        rate = *rate_override;
    } else {
        fs::path sidecar = path;
        sidecar.replace_extension(".json");
        if (fs::exists(sidecar)) {
            std::ifstream in(sidecar);
            const auto meta = nlohmann::json::parse(in, nullptr, false);
            if (meta.is_discarded() || !meta.contains("sampling_rate"))
                fail(ErrorKind::Format, "sidecar " + sidecar.string() + " lacks sampling_rate");
            rate = meta.at("sampling_rate").get<int>();
        } else {
            spdlog::warn("no sampling-rate sidecar for {}, assuming 500 Hz", path.string());
        }
    }
    return record_from_array(npy::load(path), rate, path.stem().string());
}

void write_array(const EcgRecord& record, const fs::path& path) {
    npy::save(path, record.signal);
    fs::path sidecar = path;
    sidecar.replace_extension(".json");
    std::ofstream out(sidecar);
    out << nlohmann::json{{"sampling_rate", record.sampling_rate}, {"record_id", record.record_id}}.dump() << '\n';
}

EcgRecord read_record(const fs::path& path, std::optional<int> rate_override) {
    if (path.extension() == ".hea") return read_wfdb(path);
    return read_array(path, rate_override);
}

// --- standardization -------------------------------------------------------------

Tensor resample_poly(const Tensor& signal, std::size_t up, std::size_t down) {
    const std::size_t g = std::gcd(up, down);
    up /= g;
    down /= g;
    if (up == 1 && down == 1) return signal;
    const std::size_t rows = signal.dim(0), n = signal.dim(1);
    const std::size_t max_rate = std::max(up, down);
    const std::size_t half = 10 * max_rate;
    const std::size_t taps = 2 * half + 1;
    const double cutoff = 1.0 / static_cast<double>(max_rate);  // relative to Nyquist of the upsampled rate
    const double beta = 5.0;
    const double i0_beta = std::cyl_bessel_i(0.0, beta);

    std::vector<double> h(taps);
    double sum = 0.0;
    for (std::size_t k = 0; k < taps; ++k) {
        const double m = static_cast<double>(k) - static_cast<double>(half);
        const double x = cutoff * m;
        const double sinc = x == 0.0 ? 1.0 : std::sin(M_PI * x) / (M_PI * x);
        const double r = m / static_cast<double>(half);
        const double w = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
        h[k] = cutoff * sinc * w;
        sum += h[k];
    }
    // Unity DC gain after zero-stuffing.
    for (double& v : h) v *= static_cast<double>(up) / sum;

    const std::size_t out_len = (n * up + down - 1) / down;
    Tensor out({rows, out_len});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = signal.data() + r * n;
        double* y = out.data() + r * out_len;
        for (std::size_t k = 0; k < out_len; ++k) {
            // Position in the upsampled stream, centred on the filter delay.
            const long pos = static_cast<long>(k * down + half);
            double acc = 0.0;
            // taps j with (pos - j) divisible by up
            long j0 = pos % static_cast<long>(up);
            for (long j = j0; j < static_cast<long>(taps); j += static_cast<long>(up)) {
                const long src = (pos - j) / static_cast<long>(up);
                if (src < 0) break;
                if (src < static_cast<long>(n)) acc += h[static_cast<std::size_t>(j)] * x[src];
            }
            y[k] = acc;
        }
    }
    return out;
}

EcgRecord standardize(const EcgRecord& record, int target_rate, int target_seconds) {
    if (record.samples() == 0) fail(ErrorKind::Data, "record '" + record.record_id + "' has no samples");
    if (target_rate <= 0 || target_seconds <= 0) fail(ErrorKind::Config, "target rate and duration must be positive");
    record.validate();
    EcgRecord out = record;
    if (record.sampling_rate != target_rate) {
        out.signal = resample_poly(record.signal, static_cast<std::size_t>(target_rate),
                                   static_cast<std::size_t>(record.sampling_rate));
        out.sampling_rate = target_rate;
    }
    const std::size_t target = static_cast<std::size_t>(target_rate) * static_cast<std::size_t>(target_seconds);
    const std::size_t T = out.samples();
    if (T != target) {
        Tensor fitted({kLeads, target}, 0.0);
        if (T > target) {
            const std::size_t start = (T - target) / 2;
            for (std::size_t l = 0; l < kLeads; ++l)
                std::copy_n(out.signal.data() + l * T + start, target, fitted.data() + l * target);
        } else {
            for (std::size_t l = 0; l < kLeads; ++l)
                std::copy_n(out.signal.data() + l * T, T, fitted.data() + l * target);
        }
        out.signal = std::move(fitted);
    }
    return out;
}

// --- curation ----------------------------------------------------------------------

std::vector<IndexEntry> DatasetIndex::in(Split split) const {
    std::vector<IndexEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
                 [&](const IndexEntry& e) { return e.split == split; });
    return out;
}

void DatasetIndex::validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.record_id).second) fail(ErrorKind::Data, "duplicate record_id '" + e.record_id + "'");
        if ((e.split == Split::Train || e.split == Split::Val) && e.label != Label::Normal)
            fail(ErrorKind::Data, "record '" + e.record_id + "' in " + std::string(to_string(e.split)) +
                                      " split is not labeled normal");
    }
}

const std::set<std::string>& default_normal_codes() {
    // Sinus-rhythm / normal ECG codes: synthetic corpus, PTB-XL, CPSC, SNOMED.
    static const std::set<std::string> codes = {"SR", "NORM", "SinusRhythm", "Normal", "426783006"};
    return codes;
}

Label label_from_codes(std::span<const std::string> codes, const std::set<std::string>& normal_codes) {
    if (codes.empty()) return Label::Unlabeled;
    for (const auto& c : codes)
        if (!normal_codes.contains(c)) return Label::Anomalous;
    return Label::Normal;
}

DatasetIndex curate(std::span<const RawEntry> manifest, const CurationOptions& options) {
    if (manifest.empty()) fail(ErrorKind::Curation, "empty manifest");
    std::vector<IndexEntry> kept;
    std::size_t empty_codes = 0, other_diagnoses = 0;
    for (const auto& raw : manifest) {
        const Label label = label_from_codes(raw.codes, options.normal_codes);
        if (label == Label::Unlabeled) {
            ++empty_codes;
            continue;
        }
        if (label == Label::Anomalous) {
            ++other_diagnoses;
            continue;
        }
        IndexEntry e;
        e.record_id = raw.record_id.empty() ? raw.path.stem().string() : raw.record_id;
        e.path = raw.path;
        e.label = Label::Normal;
        e.provenance = options.provenance;
        e.codes = raw.codes;
        kept.push_back(std::move(e));
    }
    if (kept.empty())
        fail(ErrorKind::Curation, "curation kept no records (" + std::to_string(other_diagnoses) +
                                      " with non-normal diagnoses, " + std::to_string(empty_codes) +
                                      " without labels)");
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.record_id < b.record_id; });
    std::mt19937_64 rng(options.seed);
    std::shuffle(kept.begin(), kept.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(kept.size())));
    for (std::size_t i = 0; i < kept.size(); ++i) kept[i].split = i < n_train ? Split::Train : Split::Val;
    DatasetIndex index{std::move(kept)};
    index.validate();
    return index;
}

// --- manifest CSV ------------------------------------------------------------------

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

DatasetIndex read_manifest(const fs::path& csv, const std::set<std::string>& normal_codes) {
    std::ifstream in(csv);
    if (!in) fail(ErrorKind::Config, "cannot open manifest " + csv.string());
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::Format, "manifest " + csv.string() + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_on(line, ',');
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* need : {"record_id", "path", "codes", "split"})
        if (!col.contains(need)) fail(ErrorKind::Format, std::string("manifest lacks column '") + need + "'");

    DatasetIndex index;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_on(line, ',');
        if (f.size() < header.size())
            fail(ErrorKind::Format, "manifest line " + std::to_string(lineno) + " has too few fields");
        IndexEntry e;
        e.record_id = f[col["record_id"]];
        e.path = f[col["path"]];
        if (e.path.is_relative()) e.path = csv.parent_path() / e.path;
        for (auto& c : split_on(f[col["codes"]], '|'))
            if (!c.empty()) e.codes.push_back(c);
        e.split = parse_split(f[col["split"]]);
        e.label = label_from_codes(e.codes, normal_codes);
        index.entries.push_back(std::move(e));
    }
    index.validate();
    return index;
}

void write_manifest(const DatasetIndex& index, const fs::path& csv) {
    std::ofstream out(csv);
    if (!out) fail(ErrorKind::Runtime, "cannot write manifest " + csv.string());
    out << "record_id,path,codes,split\n";
    for (const auto& e : index.entries) {
        std::string codes;
        for (std::size_t i = 0; i < e.codes.size(); ++i) codes += (i ? "|" : "") + e.codes[i];
        fs::path p = e.path;
        if (p.is_absolute()) {
            std::error_code ec;
            auto rel = fs::relative(p, csv.parent_path().empty() ? fs::current_path() : fs::absolute(csv.parent_path()), ec);
            if (!ec && !rel.empty()) p = rel;
        }
        out << e.record_id << ',' << p.generic_string() << ',' << codes << ',' << to_string(e.split) << '\n';
    }
}

}  // namespace ecgad

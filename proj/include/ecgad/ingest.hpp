#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgad/tensor.hpp"

namespace ecgad {

inline constexpr std::size_t kLeads = 12;
inline constexpr std::array<std::string_view, kLeads> kLeadNames = {
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"};

enum class Label { Normal, Anomalous, Unlabeled };
enum class Provenance { Ptbxl, Mimic, Cpsc, Synthetic, UserUpload };
enum class Split { Train, Val, Calibration, Test };

std::string_view to_string(Label v);
std::string_view to_string(Provenance v);
std::string_view to_string(Split v);
Label parse_label(std::string_view s);
Split parse_split(std::string_view s);

// One recording. signal is [12 x T]: millivolts when raw, unitless after
// z-scoring.
struct EcgRecord {
    Tensor signal;
    int sampling_rate = 500;
    std::vector<std::string> lead_names = default_lead_names();
    std::string record_id;
    Label label = Label::Unlabeled;
    Provenance provenance = Provenance::UserUpload;

    std::size_t leads() const { return signal.rank() == 2 ? signal.dim(0) : 0; }
    std::size_t samples() const { return signal.rank() == 2 ? signal.dim(1) : 0; }

    // Throws on a non-12-row signal, non-finite samples or a bad rate.
    void validate() const;

    static std::vector<std::string> default_lead_names();
};

// --- readers ---------------------------------------------------------------

// WFDB record: text header plus format-16 interleaved signal file. Physical
// value is (raw - baseline) / gain per channel.
EcgRecord read_wfdb(const std::filesystem::path& header_path);
EcgRecord parse_wfdb(std::string_view header_text, std::span<const std::uint8_t> signal_bytes,
                     std::string record_id = {});

// Writes <dir>/<name>.hea and <dir>/<name>.dat with one shared gain.
void write_wfdb(const EcgRecord& record, const std::filesystem::path& dir, const std::string& name,
                double gain = 1000.0, int baseline = 0);

// Array-backed record, [12, T] or [T, 12]. Square arrays are read as
// [leads, samples]. The sampling rate comes from rate_override, then from a
// sidecar <stem>.json {"sampling_rate": N}, and falls back to 500 Hz with a
// warning.
EcgRecord read_array(const std::filesystem::path& path, std::optional<int> rate_override = {});
EcgRecord record_from_array(const Tensor& array, int sampling_rate, std::string record_id);
void write_array(const EcgRecord& record, const std::filesystem::path& path);

// Dispatch on extension: .hea -> WFDB, anything else -> array.
EcgRecord read_record(const std::filesystem::path& path, std::optional<int> rate_override = {});

// --- standardization ---------------------------------------------------------

// Polyphase rational-rate resampling of each row of [rows x T] with a
// Kaiser-windowed sinc FIR (beta 5, half length 10 * max(up, down)).
Tensor resample_poly(const Tensor& signal, std::size_t up, std::size_t down);

// Resample to target_rate, then centre-crop or zero-pad the tail to
// target_rate * target_seconds samples.
EcgRecord standardize(const EcgRecord& record, int target_rate = 500, int target_seconds = 10);

// --- curation and dataset index -------------------------------------------

struct IndexEntry {
    std::string record_id;
    std::filesystem::path path;
    Label label = Label::Unlabeled;
    Provenance provenance = Provenance::UserUpload;
    Split split = Split::Test;
    std::vector<std::string> codes;
};

struct DatasetIndex {
    std::vector<IndexEntry> entries;

    std::vector<IndexEntry> in(Split split) const;
    // record_id uniqueness and normal-only train/val.
    void validate() const;
};

struct RawEntry {
    std::filesystem::path path;
    std::vector<std::string> codes;
    std::string record_id;  // defaults to the file stem
};

struct CurationOptions {
    std::set<std::string> normal_codes;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    Provenance provenance = Provenance::UserUpload;
};

// Keep records whose diagnosis set is non-empty and contained in
// normal_codes; split them train/val.
DatasetIndex curate(std::span<const RawEntry> manifest, const CurationOptions& options);

// Codes that mean "sinus rhythm / normal" across the supported corpora.
const std::set<std::string>& default_normal_codes();
Label label_from_codes(std::span<const std::string> codes, const std::set<std::string>& normal_codes);

// CSV with header record_id,path,codes,split; codes '|' separated. Relative
// paths are resolved against the manifest's directory.
DatasetIndex read_manifest(const std::filesystem::path& csv,
                           const std::set<std::string>& normal_codes = default_normal_codes());
void write_manifest(const DatasetIndex& index, const std::filesystem::path& csv);

}  // namespace ecgad

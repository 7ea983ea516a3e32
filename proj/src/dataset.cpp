#include "ecgad/dataset.hpp"

#include <exception>

#include "ecgad/error.hpp"

namespace ecgad {

EcgRecord prepare_record(const EcgRecord& raw, const PreprocessOptions& options) {
    return preprocess(standardize(raw), options);
}

EcgRecord load_prepared(const IndexEntry& entry, const PreprocessOptions& options) {
    EcgRecord raw = read_record(entry.path);
    raw.record_id = entry.record_id;
    raw.label = entry.label;
    raw.provenance = entry.provenance;
    return prepare_record(raw, options);
}

std::vector<EcgRecord> load_prepared(const std::vector<IndexEntry>& entries, const PreprocessOptions& options) {
    std::vector<EcgRecord> out(entries.size());
    std::vector<std::exception_ptr> errors(entries.size());
    const auto n = static_cast<std::ptrdiff_t>(entries.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        try {
            out[static_cast<std::size_t>(i)] = load_prepared(entries[static_cast<std::size_t>(i)], options);
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

Tensor stack_windows(const std::vector<EcgRecord>& records, std::size_t window_len, std::size_t stride) {
    std::size_t total = 0, leads = 0;
    for (const EcgRecord& r : records) {
        total += window_count(r.samples(), window_len, stride);
        leads = r.leads();
    }
    Tensor out({total, leads, window_len});
    std::size_t at = 0;
    for (const EcgRecord& r : records) {
        const WindowBatch b = segment(r, window_len, stride);
        if (r.leads() != leads) fail(ErrorKind::Shape, "records disagree on lead count");
        std::copy(b.windows.values().begin(), b.windows.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(at * leads * window_len));
        at += b.count();
    }
    return out;
}

}  // namespace ecgad

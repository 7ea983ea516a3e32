#pragma once

// Glue from index entries to model-ready window tensors.

#include <vector>

#include "ecgad/ingest.hpp"
#include "ecgad/preprocess.hpp"

namespace ecgad {

// standardize (500 Hz, 10 s) then preprocess.
EcgRecord prepare_record(const EcgRecord& raw, const PreprocessOptions& options);
EcgRecord load_prepared(const IndexEntry& entry, const PreprocessOptions& options);
// Order follows `entries`; labels are taken from the index.
std::vector<EcgRecord> load_prepared(const std::vector<IndexEntry>& entries, const PreprocessOptions& options);

// All windows of all records stacked into [N, leads, m].
Tensor stack_windows(const std::vector<EcgRecord>& records, std::size_t window_len, std::size_t stride);

}  // namespace ecgad

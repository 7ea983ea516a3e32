#pragma once

#include <stdexcept>
#include <string>

namespace ecgad {

// Error categories map onto CLI exit codes (config 2, data 3, runtime 4).
enum class ErrorKind {
    Config,
    Data,
    Shape,
    Format,
    Curation,
    Calibration,
    ModelKind,
    Training,
    Runtime,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    // 2 for configuration problems, 3 for bad input data, 4 otherwise.
    int exit_code() const noexcept;

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace ecgad

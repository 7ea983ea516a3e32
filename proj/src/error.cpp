#include "ecgad/error.hpp"

namespace ecgad {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::Config: return "config error";
    case ErrorKind::Data: return "data error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Curation: return "curation error";
    case ErrorKind::Calibration: return "calibration error";
    case ErrorKind::ModelKind: return "model-kind error";
    case ErrorKind::Training: return "training error";
    case ErrorKind::Runtime: return "runtime error";
    }
    return "error";
}

int Error::exit_code() const noexcept {
    switch (kind_) {
    case ErrorKind::Config:
    case ErrorKind::ModelKind: return 2;
    case ErrorKind::Data:
    case ErrorKind::Shape:
    case ErrorKind::Format:
    case ErrorKind::Curation:
    case ErrorKind::Calibration: return 3;
    case ErrorKind::Training:
    case ErrorKind::Runtime: return 4;
    }
    return 4;
}

}  // namespace ecgad

#pragma once

#include <optional>

#include "ecgad/error.hpp"

namespace ecgad::test {

// Kind of the ecgad::Error thrown by f, or nullopt when it returns normally.
template <class F>
std::optional<ErrorKind> error_kind(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return std::nullopt;
}

}  // namespace ecgad::test

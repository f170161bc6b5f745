#include "mipr/error.hpp"

namespace mipr {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Invalid: return "invalid";
        case ErrorKind::Io: return "io";
        case ErrorKind::Config: return "config";
        case ErrorKind::Data: return "data";
        case ErrorKind::Numeric: return "numeric";
    }
    return "unknown";
}

}  // namespace mipr

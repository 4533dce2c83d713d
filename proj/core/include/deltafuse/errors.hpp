#pragma once

#include <stdexcept>
#include <string>

namespace deltafuse {

// A file or byte stream could not be read, written, or decoded.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Well-formed input that violates a semantic contract (schema fields,
// compatibility, fingerprints, parameter ranges).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace deltafuse

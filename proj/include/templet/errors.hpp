// errors.hpp - exception types used across the library
#pragma once

#include <stdexcept>
#include <string>

namespace templet {

// Incompatible tensor shapes or non-finite values in checked ops.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed manifest, archive, or dataset text.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checksum mismatch on package or cache bytes. Distinct from ParseError.
struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

// template_kind not present in the registry.
struct RegistryError : std::runtime_error {
    explicit RegistryError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unsupported archive or manifest format version.
struct VersionError : std::runtime_error {
    explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Network-level failure while resolving a remote package.
struct TransportError : std::runtime_error {
    explicit TransportError(const std::string& msg) : std::runtime_error(msg) {}
};

// Ref digest and manifest digest disagree for the same package.
struct ConflictError : std::runtime_error {
    explicit ConflictError(const std::string& msg) : std::runtime_error(msg) {}
};

// A gradient was requested for (or an update attempted on) a frozen parameter.
struct FrozenParamError : std::runtime_error {
    explicit FrozenParamError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace templet

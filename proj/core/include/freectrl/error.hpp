#pragma once

#include <stdexcept>
#include <string>

namespace freectrl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A checkpoint tensor is missing, mis-shaped or stored in an unsupported dtype.
class CheckpointError : public Error {
public:
    CheckpointError(std::string tensor, const std::string& what)
        : Error(what + ": " + tensor), tensor_(std::move(tensor)) {}
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

/// A persisted artifact was produced by a different model.
class FingerprintMismatch : public Error {
public:
    using Error::Error;
};

/// Arguments violate an operation's precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

}  // namespace freectrl

#pragma once

#include <stdexcept>
#include <string>

namespace adaptsr {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidConfig : public Error {
public:
    explicit InvalidConfig(const std::string& what) : Error("invalid config: " + what) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error("dimension error: " + what) {}
};

/// Raised when an operation is illegal in the object's current lifecycle state
/// (double merge, double injection, lora step on an uninjected model, ...).
class StateError : public Error {
public:
    explicit StateError(const std::string& what) : Error("state error: " + what) {}
};

class TargetResolutionError : public Error {
public:
    explicit TargetResolutionError(const std::string& what)
        : Error("target resolution error: " + what) {}
};

class CheckpointIncompatible : public Error {
public:
    explicit CheckpointIncompatible(const std::string& what)
        : Error("checkpoint incompatible: " + what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("i/o error: " + what) {}
};

} // namespace adaptsr

#pragma once

#include <stdexcept>
#include <string>

namespace eksft {

// Base for every error raised by the library. The CLI maps ConfigError and
// its subclasses to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class LengthError : public InputError {
public:
    using InputError::InputError;
};

class DegenerateInputError : public InputError {
public:
    using InputError::InputError;
};

class TokenizationError : public InputError {
public:
    TokenizationError(const std::string& what, std::size_t offset)
        : InputError(what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class GenerationError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class ExportError : public Error {
public:
    using Error::Error;
};

// Checkpoint loading failures, one subclass per failure mode.
class LoadError : public Error {
public:
    using Error::Error;
};

class CorruptManifestError : public LoadError {
public:
    using LoadError::LoadError;
};

class ShapeMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

class TruncatedBlobError : public LoadError {
public:
    using LoadError::LoadError;
};

class ConfigHashMismatchError : public LoadError {
public:
    using LoadError::LoadError;
};

}  // namespace eksft

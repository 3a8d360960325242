#pragma once

#include <stdexcept>
#include <string>

namespace visirnet {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A projected point fell on or beyond the horizon line (|z'| below threshold).
class DegenerateProjection : public Error {
public:
    using Error::Error;
};

/// Rank-deficient linear system or non-invertible matrix.
class SingularSystem : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

/// Rejection sampling gave up; the jitter radius is infeasible for the frame.
class SamplingExhausted : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class EmptyInput : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training produced a NaN/Inf loss. Carries the offending batch.
class NonFiniteLoss : public Error {
public:
    NonFiniteLoss(const std::string& stage, int epoch, int batch)
        : Error("non-finite loss in " + stage + " at epoch " + std::to_string(epoch) +
                ", batch " + std::to_string(batch)),
          epoch_(epoch),
          batch_(batch) {}

    int epoch() const noexcept { return epoch_; }
    int batch() const noexcept { return batch_; }

private:
    int epoch_;
    int batch_;
};

}  // namespace visirnet

// errors.hpp -- exception taxonomy shared by all fusenet modules.
#pragma once

#include <stdexcept>
#include <string>

namespace fusenet {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension disagreements.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid layer/model/run configuration (bad groups, widths, rates, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Dataset problems: manifests, labels, image payloads.
struct DataError : Error {
    using Error::Error;
};

// Malformed binary image input (PGM decoding).
struct FormatError : DataError {
    using DataError::DataError;
};

// Checkpoint file problems: magic, version, CRC, key/shape mismatches.
struct CheckpointError : Error {
    using Error::Error;
};

// Metric evaluation impossible (e.g. single-class test set).
struct EvalError : Error {
    using Error::Error;
};

// Training-loop failures (missing gradients, non-finite loss).
struct TrainError : Error {
    using Error::Error;
};

// API misuse: wrong call sequence, incompatible argument combinations.
struct UsageError : Error {
    using Error::Error;
};

// Operation requires double precision but was invoked in single precision.
struct PrecisionError : Error {
    using Error::Error;
};

} // namespace fusenet

#pragma once

#include <stdexcept>
#include <string>

namespace datwep {

// Tensor extents disagree with what an op requires.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An integer index (token id, embedding row, position) is out of range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Input values violate a contract (non-binary mask, non-positive weight, ...).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Character not present in the vocabulary.
struct UnknownCharacterError : ValidationError {
  using ValidationError::ValidationError;
};

// Tokenized question longer than the configured maximum length.
struct OverflowError : ValidationError {
  using ValidationError::ValidationError;
};

// Token sequence does not follow <sos> (<sow> chars <eow>)* <eos> <pad>*.
struct StructureError : ValidationError {
  using ValidationError::ValidationError;
};

// A curriculum update was asked to consume a non-finite loss or gradient.
struct SchedulerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk data (dataset directory, checkpoint, vocabulary file).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss or gradient.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace datwep

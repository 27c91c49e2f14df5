#pragma once

#include <stdexcept>
#include <string>

namespace msi {

// Raised when configuration, layout or calibration inputs are unusable.
// The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for malformed or inconsistent data (bad frames, shape mismatch,
// degenerate spectra). The CLI maps it to exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violations on function arguments.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// W - D <= 0 somewhere in a calibration pair.
class CalibrationDegenerateError : public DataError {
 public:
  CalibrationDegenerateError(std::size_t row, std::size_t col, std::size_t band)
      : DataError("calibration degenerate: white - dark <= 0 at (" +
                  std::to_string(row) + ", " + std::to_string(col) + ", " +
                  std::to_string(band) + ")"),
        row_(row),
        col_(col),
        band_(band) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }
  std::size_t band() const noexcept { return band_; }

 private:
  std::size_t row_;
  std::size_t col_;
  std::size_t band_;
};

// All-zero spectrum handed to l1 normalization (dark or occluded ROI).
class DegenerateSpectrumError : public DataError {
 public:
  using DataError::DataError;
};

// Operation on an object that is not ready (e.g. unfitted embedding).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace msi

#pragma once

// White/dark reference normalization, ROI median spectra and l1 band
// normalization. Order of use is fixed: normalize -> median -> l1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msi/error.hpp"
#include "msi/mosaic.hpp"

namespace msi {

using Spectrum = std::array<double, kBandCount>;

enum class Phase { before, during };

inline std::string_view to_string(Phase p) noexcept {
  return p == Phase::before ? "before" : "during";
}

inline Phase parse_phase(std::string_view text) {
  if (text == "before") return Phase::before;
  if (text == "during") return Phase::during;
  throw DataError("unknown phase label '" + std::string(text) + "'");
}

struct CalibrationPair {
  BandCube<double> white;
  BandCube<double> dark;
  std::string target_note;

  // Throws if shapes differ or W - D <= 0 anywhere.
  void validate() const {
    if (white.empty() || !white.same_shape(dark))
      throw ConfigError("calibration: white and dark references must be non-empty and equal in size");
    for (std::size_t i = 0; i < white.rows(); ++i)
      for (std::size_t j = 0; j < white.cols(); ++j)
        for (std::size_t k = 0; k < kBandCount; ++k)
          if (!(white(i, j, k) - dark(i, j, k) > 0.0)) throw CalibrationDegenerateError(i, j, k);
  }
};

struct NormalizedCube {
  BandCube<double> data;
  // Values outside [-tolerance, 1 + tolerance]; kept, not clipped.
  std::size_t out_of_range = 0;
  static constexpr double tolerance = 0.05;

  double timestamp() const noexcept { return data.timestamp(); }
};

// (I - D) / (W - D) per pixel and band.
template <typename T>
NormalizedCube normalize_white_dark(const BandCube<T>& image, const CalibrationPair& cal) {
  if (!image.same_shape(cal.white) || !image.same_shape(cal.dark))
    throw DataError("normalize_white_dark: image " + std::to_string(image.rows()) + "x" +
                    std::to_string(image.cols()) + " does not match calibration " +
                    std::to_string(cal.white.rows()) + "x" + std::to_string(cal.white.cols()));

  NormalizedCube out{BandCube<double>(image.rows(), image.cols(), 0.0, image.timestamp()), 0};
  const auto in = image.values();
  const auto w = cal.white.values();
  const auto d = cal.dark.values();
  auto o = out.data.values();
  std::size_t flagged = 0;
  for (std::size_t n = 0; n < in.size(); ++n) {
    const double den = w[n] - d[n];
    if (!(den > 0.0)) {
      const std::size_t pixel = n / kBandCount;
      throw CalibrationDegenerateError(pixel / image.cols(), pixel % image.cols(), n % kBandCount);
    }
    const double v = (static_cast<double>(in[n]) - d[n]) / den;
    o[n] = v;
    flagged += (v < -NormalizedCube::tolerance || v > 1.0 + NormalizedCube::tolerance) ? 1 : 0;
  }
  out.out_of_range = flagged;
  return out;
}

namespace detail {

// Median of a scratch buffer (reordered in place). Even count: mean of the
// two central order statistics.
inline double median_inplace(std::span<double> values) {
  const std::size_t n = values.size();
  const std::size_t mid = n / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

}  // namespace detail

// Per-band independent median over the ROI pixels.
template <typename T>
Spectrum median_spectrum(const BandCube<T>& cube, const Rect& roi) {
  if (roi.empty()) throw ArgumentError("median_spectrum: empty roi");
  if (!roi.inside(cube.cols(), cube.rows()))
    throw BoundsError("median_spectrum: roi outside cube bounds");

  const auto count = static_cast<std::size_t>(roi.area());
  std::vector<double> scratch(count * kBandCount);
  // Band-major gather so each band's values are contiguous.
  std::size_t p = 0;
  for (int y = roi.y; y < roi.y + roi.height; ++y) {
    for (int x = roi.x; x < roi.x + roi.width; ++x, ++p) {
      const auto px = cube.pixel(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      for (std::size_t k = 0; k < kBandCount; ++k) scratch[k * count + p] = static_cast<double>(px[k]);
    }
  }
  Spectrum out{};
  for (std::size_t k = 0; k < kBandCount; ++k)
    out[k] = detail::median_inplace(std::span<double>(scratch.data() + k * count, count));
  return out;
}

inline Spectrum median_spectrum(const NormalizedCube& cube, const Rect& roi) {
  return median_spectrum(cube.data, roi);
}

struct L1Result {
  Spectrum bands{};
  std::size_t clamped = 0;  // negative inputs set to zero before summing
};

inline L1Result l1_normalize(const Spectrum& spectrum) {
  L1Result out;
  double sum = 0.0;
  for (std::size_t k = 0; k < kBandCount; ++k) {
    double v = spectrum[k];
    if (!std::isfinite(v)) throw DataError("l1_normalize: non-finite component");
    if (v < 0.0) {
      v = 0.0;
      ++out.clamped;
    }
    out.bands[k] = v;
    sum += v;
  }
  if (!(sum > 0.0))
    throw DegenerateSpectrumError("l1_normalize: spectrum has no positive component (dark or occluded roi)");
  for (auto& v : out.bands) v /= sum;
  return out;
}

struct SpectrumSample {
  Spectrum bands{};
  double timestamp = 0.0;
  Phase phase = Phase::before;

  friend bool operator==(const SpectrumSample&, const SpectrumSample&) = default;
};

using SpectrumSeries = std::vector<SpectrumSample>;

}  // namespace msi

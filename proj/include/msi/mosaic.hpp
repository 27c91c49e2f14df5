#pragma once

// Snapshot mosaic sensor model: raw frames carrying a repeating 4x4 filter
// tile, the tile-to-band layout, nearest-cell demosaicing into band cubes
// and ROI exposure validation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "msi/error.hpp"

namespace msi {

inline constexpr std::size_t kMosaicPeriod = 4;
inline constexpr std::size_t kBandCount = kMosaicPeriod * kMosaicPeriod;

// Axis-aligned pixel rectangle, half-open: [x, x + width) x [y, y + height).
struct Rect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  constexpr long area() const noexcept {
    return static_cast<long>(width) * static_cast<long>(height);
  }
  constexpr bool empty() const noexcept { return width <= 0 || height <= 0; }
  constexpr bool inside(std::size_t cols, std::size_t rows) const noexcept {
    return x >= 0 && y >= 0 && width >= 0 && height >= 0 &&
           static_cast<std::size_t>(x) + static_cast<std::size_t>(width) <= cols &&
           static_cast<std::size_t>(y) + static_cast<std::size_t>(height) <= rows;
  }
  friend constexpr bool operator==(const Rect&, const Rect&) = default;
};

class MosaicLayout {
 public:
  using Grid = std::array<std::array<int, kMosaicPeriod>, kMosaicPeriod>;

  // Row-major band order: cell (r, c) -> band 4r + c.
  MosaicLayout() {
    for (std::size_t r = 0; r < kMosaicPeriod; ++r)
      for (std::size_t c = 0; c < kMosaicPeriod; ++c)
        band_of_cell_[r][c] = static_cast<int>(r * kMosaicPeriod + c);
    rebuild_inverse();
  }

  explicit MosaicLayout(const Grid& band_of_cell) : band_of_cell_(band_of_cell) {
    std::array<bool, kBandCount> seen{};
    for (const auto& row : band_of_cell_) {
      for (int band : row) {
        if (band < 0 || band >= static_cast<int>(kBandCount))
          throw ConfigError("mosaic layout: band index " + std::to_string(band) +
                            " outside [0, 15]");
        if (seen[static_cast<std::size_t>(band)])
          throw ConfigError("mosaic layout: band " + std::to_string(band) +
                            " assigned to more than one cell");
        seen[static_cast<std::size_t>(band)] = true;
      }
    }
    rebuild_inverse();
  }

  static constexpr std::size_t period() noexcept { return kMosaicPeriod; }
  const Grid& band_of_cell() const noexcept { return band_of_cell_; }

  int band_at_cell(std::size_t r, std::size_t c) const noexcept {
    return band_of_cell_[r][c];
  }
  // Inverse map: mosaic cell (r, c) of a given band.
  std::pair<std::size_t, std::size_t> cell_of_band(std::size_t band) const noexcept {
    return cell_of_band_[band];
  }

  friend bool operator==(const MosaicLayout& a, const MosaicLayout& b) {
    return a.band_of_cell_ == b.band_of_cell_;
  }

 private:
  void rebuild_inverse() {
    for (std::size_t r = 0; r < kMosaicPeriod; ++r)
      for (std::size_t c = 0; c < kMosaicPeriod; ++c)
        cell_of_band_[static_cast<std::size_t>(band_of_cell_[r][c])] = {r, c};
  }

  Grid band_of_cell_{};
  std::array<std::pair<std::size_t, std::size_t>, kBandCount> cell_of_band_{};
};

struct RawMosaicFrame {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned bit_depth = 10;
  std::vector<std::uint16_t> pixels;  // row-major, height x width
  double timestamp = 0.0;             // seconds since sequence start
  double exposure_time_us = 0.0;

  RawMosaicFrame() = default;
  RawMosaicFrame(std::size_t w, std::size_t h, unsigned depth = 10, std::uint16_t fill = 0)
      : width(w), height(h), bit_depth(depth), pixels(w * h, fill) {}

  std::uint16_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::uint16_t& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }

  std::uint32_t full_scale() const noexcept { return (1u << bit_depth) - 1u; }

  // Throws DataError when the frame violates the sensor invariants.
  void validate() const {
    if (width == 0 || height == 0 || width % kMosaicPeriod != 0 || height % kMosaicPeriod != 0)
      throw DataError("raw frame " + std::to_string(width) + "x" + std::to_string(height) +
                      " is not a positive multiple of the 4x4 mosaic period");
    if (bit_depth == 0 || bit_depth > 16)
      throw DataError("raw frame bit depth " + std::to_string(bit_depth) + " outside [1, 16]");
    if (pixels.size() != width * height)
      throw DataError("raw frame pixel count does not match its dimensions");
    const std::uint32_t limit = 1u << bit_depth;
    for (std::uint16_t v : pixels)
      if (v >= limit)
        throw DataError("raw pixel value " + std::to_string(v) + " exceeds " +
                        std::to_string(bit_depth) + "-bit range");
  }
};

// N x M x 16 image cube, pixel-interleaved: element (i, j, k) lives at
// ((i * cols) + j) * 16 + k.
template <typename T>
class BandCube {
 public:
  using value_type = T;

  BandCube() = default;
  BandCube(std::size_t rows, std::size_t cols, T fill = T{}, double timestamp = 0.0)
      : rows_(rows), cols_(cols), timestamp_(timestamp), data_(rows * cols * kBandCount, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  static constexpr std::size_t bands() noexcept { return kBandCount; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double timestamp() const noexcept { return timestamp_; }
  void set_timestamp(double t) noexcept { timestamp_ = t; }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * cols_ + j) * kBandCount + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * cols_ + j) * kBandCount + k];
  }

  std::span<T, kBandCount> pixel(std::size_t i, std::size_t j) noexcept {
    return std::span<T, kBandCount>(data_.data() + (i * cols_ + j) * kBandCount, kBandCount);
  }
  std::span<const T, kBandCount> pixel(std::size_t i, std::size_t j) const noexcept {
    return std::span<const T, kBandCount>(data_.data() + (i * cols_ + j) * kBandCount,
                                          kBandCount);
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  bool same_shape(const auto& other) const noexcept {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  friend bool operator==(const BandCube& a, const BandCube& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  double timestamp_ = 0.0;
  std::vector<T> data_;
};

using RawCube = BandCube<std::uint16_t>;

inline int band_index(const MosaicLayout& layout, const RawMosaicFrame& frame, std::size_t row,
                      std::size_t col) {
  if (row >= frame.height || col >= frame.width)
    throw BoundsError("band_index: (" + std::to_string(row) + ", " + std::to_string(col) +
                      ") outside " + std::to_string(frame.height) + "x" +
                      std::to_string(frame.width) + " frame");
  return layout.band_at_cell(row % kMosaicPeriod, col % kMosaicPeriod);
}

// Nearest-cell demosaicing: one value per band per 4x4 super-pixel.
inline RawCube demosaic(const RawMosaicFrame& frame, const MosaicLayout& layout) {
  if (frame.width % kMosaicPeriod != 0 || frame.height % kMosaicPeriod != 0 ||
      frame.width == 0 || frame.height == 0)
    throw ConfigError("demosaic: frame " + std::to_string(frame.width) + "x" +
                      std::to_string(frame.height) + " not divisible by the mosaic period");
  if (frame.pixels.size() != frame.width * frame.height)
    throw DataError("demosaic: pixel buffer does not match frame dimensions");

  const std::size_t rows = frame.height / kMosaicPeriod;
  const std::size_t cols = frame.width / kMosaicPeriod;
  RawCube cube(rows, cols, 0, frame.timestamp);
  std::uint16_t* out = cube.values().data();
  const std::uint16_t* raw = frame.pixels.data();
  const auto& grid = layout.band_of_cell();

  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t r = 0; r < kMosaicPeriod; ++r) {
      const std::uint16_t* src = raw + (i * kMosaicPeriod + r) * frame.width;
      const auto& cells = grid[r];
      std::uint16_t* dst = out + i * cols * kBandCount;
      for (std::size_t j = 0; j < cols; ++j, src += kMosaicPeriod, dst += kBandCount) {
        dst[cells[0]] = src[0];
        dst[cells[1]] = src[1];
        dst[cells[2]] = src[2];
        dst[cells[3]] = src[3];
      }
    }
  }
  return cube;
}

// Exact inverse of demosaic. Floating-point cubes are rounded to the nearest
// count; values outside [0, 2^bit_depth) are a DataError.
template <typename T>
RawMosaicFrame remosaic(const BandCube<T>& cube, const MosaicLayout& layout,
                        unsigned bit_depth = 10) {
  if (cube.rows() == 0 || cube.cols() == 0) throw ArgumentError("remosaic: empty cube");
  if (bit_depth == 0 || bit_depth > 16) throw ArgumentError("remosaic: bit depth outside [1, 16]");
  RawMosaicFrame frame(cube.cols() * kMosaicPeriod, cube.rows() * kMosaicPeriod, bit_depth);
  frame.timestamp = cube.timestamp();
  const double limit = static_cast<double>(1u << bit_depth);

  for (std::size_t i = 0; i < cube.rows(); ++i) {
    for (std::size_t j = 0; j < cube.cols(); ++j) {
      const auto px = cube.pixel(i, j);
      for (std::size_t r = 0; r < kMosaicPeriod; ++r) {
        for (std::size_t c = 0; c < kMosaicPeriod; ++c) {
          const auto band = static_cast<std::size_t>(layout.band_at_cell(r, c));
          double v;
          if constexpr (std::is_floating_point_v<T>)
            v = std::nearbyint(static_cast<double>(px[band]));
          else
            v = static_cast<double>(px[band]);
          if (!(v >= 0.0 && v < limit))
            throw DataError("remosaic: value " + std::to_string(v) + " at (" +
                            std::to_string(i) + ", " + std::to_string(j) + ", " +
                            std::to_string(band) + ") outside the " +
                            std::to_string(bit_depth) + "-bit range");
          frame.at(i * kMosaicPeriod + r, j * kMosaicPeriod + c) = static_cast<std::uint16_t>(v);
        }
      }
    }
  }
  return frame;
}

struct ExposureThresholds {
  double low = 0.0;
  double high = 0.0;

  // 1% and 99% of full scale.
  static ExposureThresholds for_bit_depth(unsigned bit_depth) {
    const double full = static_cast<double>((1u << bit_depth) - 1u);
    return {0.01 * full, 0.99 * full};
  }
};

struct ExposureReport {
  std::array<std::size_t, kBandCount> under{};
  std::array<std::size_t, kBandCount> over{};
  bool pass = true;

  std::size_t total_under() const noexcept {
    std::size_t n = 0;
    for (auto v : under) n += v;
    return n;
  }
  std::size_t total_over() const noexcept {
    std::size_t n = 0;
    for (auto v : over) n += v;
    return n;
  }
};

// Counts ROI pixels below `low` (under) or above `high` (over) per band.
template <typename T>
ExposureReport check_exposure(const BandCube<T>& cube, const Rect& roi, double low, double high) {
  if (roi.empty()) throw ArgumentError("check_exposure: empty roi");
  if (!roi.inside(cube.cols(), cube.rows()))
    throw BoundsError("check_exposure: roi outside cube bounds");
  if (!(low < high)) throw ArgumentError("check_exposure: requires low < high");

  ExposureReport report;
  for (int y = roi.y; y < roi.y + roi.height; ++y) {
    for (int x = roi.x; x < roi.x + roi.width; ++x) {
      const auto px = cube.pixel(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      for (std::size_t k = 0; k < kBandCount; ++k) {
        const double v = static_cast<double>(px[k]);
        if (v < low) ++report.under[k];
        if (v > high) ++report.over[k];
      }
    }
  }
  report.pass = report.total_under() == 0 && report.total_over() == 0;
  return report;
}

template <typename T>
ExposureReport check_exposure(const BandCube<T>& cube, const Rect& roi,
                              const ExposureThresholds& t) {
  return check_exposure(cube, roi, t.low, t.high);
}

}  // namespace msi

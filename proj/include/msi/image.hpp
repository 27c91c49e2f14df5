#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "msi/error.hpp"

namespace msi {

// 8-bit interleaved RGB image.
struct RgbImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;  // rows * cols * 3, R G B order

  RgbImage() = default;
  RgbImage(std::size_t r, std::size_t c, std::uint8_t fill = 0)
      : rows(r), cols(c), data(r * c * 3, fill) {}

  std::uint8_t* pixel(std::size_t i, std::size_t j) noexcept { return data.data() + (i * cols + j) * 3; }
  const std::uint8_t* pixel(std::size_t i, std::size_t j) const noexcept {
    return data.data() + (i * cols + j) * 3;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Non-owning OpenCV view (RGB channel order).
inline cv::Mat as_mat(const RgbImage& image) {
  return cv::Mat(static_cast<int>(image.rows), static_cast<int>(image.cols), CV_8UC3,
                 const_cast<std::uint8_t*>(image.data.data()));
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& bgr) {
  if (!cv::imwrite(path.string(), bgr)) throw DataError("failed to write " + path.string());
}

inline void write_png(const std::filesystem::path& path, const RgbImage& image) {
  cv::Mat bgr;
  cv::cvtColor(as_mat(image), bgr, cv::COLOR_RGB2BGR);
  write_png(path, bgr);
}

}  // namespace msi

#pragma once

// Translation-only correlation filter tracker with channel and spatial
// reliability (CSR-DCF) on reconstructed RGB frames, plus sequence-level
// quality checks (jumps, low confidence, exposure).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "msi/error.hpp"
#include "msi/image.hpp"
#include "msi/io.hpp"
#include "msi/mosaic.hpp"

namespace msi {

inline constexpr int kMinRoiSide = 16;

struct Roi {
  double cx = 0.0;
  double cy = 0.0;
  int w = 0;
  int h = 0;

  // Integer rectangle covering the roi.
  Rect rect() const {
    return {static_cast<int>(std::lround(cx - 0.5 * w)), static_cast<int>(std::lround(cy - 0.5 * h)), w, h};
  }

  static Roi from_rect(const Rect& r) {
    return {r.x + 0.5 * r.width, r.y + 0.5 * r.height, r.width, r.height};
  }

  bool inside(std::size_t cols, std::size_t rows) const {
    return rect().inside(cols, rows);
  }
};

inline double iou(const Roi& a, const Roi& b) {
  const double x0 = std::max(a.cx - 0.5 * a.w, b.cx - 0.5 * b.w), x1 = std::min(a.cx + 0.5 * a.w, b.cx + 0.5 * b.w);
  const double y0 = std::max(a.cy - 0.5 * a.h, b.cy - 0.5 * b.h), y1 = std::min(a.cy + 0.5 * a.h, b.cy + 0.5 * b.h);
  const double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  return inter / (static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter);
}

// Feature planes (CV_64F, patch size) from an 8-bit RGB patch.
using FeatureExtractor = std::function<std::vector<cv::Mat>(const cv::Mat& rgb8)>;

inline constexpr int kOrientationBins = 8;

// Grayscale plus 8 unsigned gradient-orientation planes (magnitude split
// linearly between the two nearest bins, lightly blurred).
inline std::vector<cv::Mat> gray_orientation_features(const cv::Mat& rgb8) {
  cv::Mat gray8, gray;
  cv::cvtColor(rgb8, gray8, cv::COLOR_RGB2GRAY);
  gray8.convertTo(gray, CV_64F, 1.0 / 255.0, -0.5);
  cv::Mat gx, gy;
  cv::Sobel(gray, gx, CV_64F, 1, 0, 1, 0.5, 0.0, cv::BORDER_REPLICATE);
  cv::Sobel(gray, gy, CV_64F, 0, 1, 1, 0.5, 0.0, cv::BORDER_REPLICATE);

  std::vector<cv::Mat> planes(1 + kOrientationBins);
  planes[0] = gray;
  for (int b = 1; b <= kOrientationBins; ++b) planes[b] = cv::Mat::zeros(gray.size(), CV_64F);
  const double bin_width = CV_PI / kOrientationBins;
  for (int y = 0; y < gray.rows; ++y) {
    const double* px = gx.ptr<double>(y);
    const double* py = gy.ptr<double>(y);
    for (int x = 0; x < gray.cols; ++x) {
      const double mag = std::hypot(px[x], py[x]);
      if (mag == 0.0) continue;
      double theta = std::atan2(py[x], px[x]);
      if (theta < 0.0) theta += CV_PI;
      const double pos = theta / bin_width - 0.5;
      const double fl = std::floor(pos);
      const double frac = pos - fl;
      const int b0 = (static_cast<int>(fl) + kOrientationBins) % kOrientationBins;
      const int b1 = (b0 + 1) % kOrientationBins;
      planes[1 + b0].at<double>(y, x) += (1.0 - frac) * mag;
      planes[1 + b1].at<double>(y, x) += frac * mag;
    }
  }
  for (int b = 1; b <= kOrientationBins; ++b)
    cv::GaussianBlur(planes[b], planes[b], cv::Size(5, 5), 1.0, 1.0, cv::BORDER_REPLICATE);
  return planes;
}

struct TrackerConfig {
  double learning_rate = 0.02;   // eta
  double lambda = 0.01;          // filter regularization
  double padding = 2.0;          // search window side = padding * roi side
  double jump_threshold = 0.5;   // fraction of min(w, h)
  double confidence_floor = 0.15;
  int histogram_bins = 16;       // per color channel
  int max_window = 128;          // working window side cap (patch is downscaled above it)
  double output_sigma = 0.1;     // target response sigma, fraction of sqrt(w * h)
  int admm_iterations = 4;
  bool spatial_reliability = true;  // false: filter support is the whole roi box
  FeatureExtractor features = gray_orientation_features;

  void validate() const {
    if (!(learning_rate >= 0.0 && learning_rate <= 1.0)) throw ConfigError("tracker: learning rate outside [0, 1]");
    if (!(lambda > 0.0)) throw ConfigError("tracker: lambda must be positive");
    if (!(padding >= 1.0)) throw ConfigError("tracker: padding must be >= 1");
    if (!(jump_threshold > 0.0)) throw ConfigError("tracker: jump threshold must be positive");
    if (histogram_bins < 2 || histogram_bins > 64) throw ConfigError("tracker: histogram bins outside [2, 64]");
    if (max_window < 16) throw ConfigError("tracker: max_window below 16");
    if (!features) throw ConfigError("tracker: no feature extractor");
  }
};

struct TrackerState {
  TrackerConfig config;
  Roi roi;
  std::size_t frame_rows = 0;
  std::size_t frame_cols = 0;
  cv::Size window;                    // working window (pixels of the feature planes)
  double scale = 1.0;                 // working pixels per frame pixel
  std::vector<cv::Mat> filter;        // per channel, CV_64FC2 spectrum
  std::vector<double> channel_weights;
  cv::Mat spatial_map;                // CV_64F foreground posterior over the window, [0, 1]
  cv::Mat mask;                       // CV_64F binary support used for the filter
  cv::Mat target;                     // CV_64FC2 spectrum of the desired response
  cv::Mat hann;
  std::vector<double> fg_hist;
  std::vector<double> bg_hist;
  cv::Point2d bias;                   // sub-pixel peak of the model on its own training patch
  std::size_t updates = 0;
};

// ------------------------------------------------------------ correlation

inline cv::Mat dft2(const cv::Mat& real) {
  cv::Mat out;
  cv::dft(real, out, cv::DFT_COMPLEX_OUTPUT);
  return out;
}

inline cv::Mat idft2_real(const cv::Mat& spectrum) {
  cv::Mat out;
  cv::idft(spectrum, out, cv::DFT_SCALE | cv::DFT_REAL_OUTPUT);
  return out;
}

// Circular cross-correlation r(t) = sum_x f(x + t) h(x) via the frequency
// domain: R = F * conj(H).
inline cv::Mat circular_xcorr(const cv::Mat& f, const cv::Mat& h) {
  if (f.size() != h.size() || f.type() != CV_64F || h.type() != CV_64F)
    throw ArgumentError("circular_xcorr: operands must be CV_64F of equal size");
  cv::Mat r;
  cv::mulSpectrums(dft2(f), dft2(h), r, 0, true);
  return idft2_real(r);
}

// Moves the zero-displacement element from (0, 0) to the map center.
inline cv::Mat fftshift(const cv::Mat& m) {
  cv::Mat out(m.size(), m.type());
  const int cx = m.cols / 2, cy = m.rows / 2;
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out.at<double>((y + cy) % m.rows, (x + cx) % m.cols) = m.at<double>(y, x);
  return out;
}

inline cv::Mat circshift(const cv::Mat& m, int dx, int dy) {
  cv::Mat out(m.size(), m.type());
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const int ty = ((y + dy) % m.rows + m.rows) % m.rows, tx = ((x + dx) % m.cols + m.cols) % m.cols;
      out.at<double>(ty, tx) = m.at<double>(y, x);
    }
  return out;
}

namespace detail {

inline cv::Mat divide_by_real(const cv::Mat& spectrum, const cv::Mat& denom) {
  std::vector<cv::Mat> parts;
  cv::split(spectrum, parts);
  parts[0] /= denom;
  parts[1] /= denom;
  cv::Mat out;
  cv::merge(parts, out);
  return out;
}

inline cv::Mat power_spectrum(const cv::Mat& spectrum) {
  std::vector<cv::Mat> parts;
  cv::split(spectrum, parts);
  return parts[0].mul(parts[0]) + parts[1].mul(parts[1]);
}

// Gaussian desired response with its peak at (0, 0), wrapped.
inline cv::Mat gaussian_target(cv::Size size, double sigma) {
  cv::Mat y(size, CV_64F);
  for (int r = 0; r < size.height; ++r) {
    const int dy = r <= size.height / 2 ? r : r - size.height;
    for (int c = 0; c < size.width; ++c) {
      const int dx = c <= size.width / 2 ? c : c - size.width;
      y.at<double>(r, c) = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma));
    }
  }
  return y;
}

inline int even_at_least(double v, int floor_value) {
  const int n = std::max(floor_value, static_cast<int>(std::lround(v)));
  return n + (n % 2);
}

// Window extent in frame pixels around a center, replicate-padded, resized
// to the working size.
inline cv::Mat extract_patch(const RgbImage& frame, double cx, double cy, cv::Size frame_window, cv::Size working) {
  const cv::Mat img = as_mat(frame);
  const int x0 = static_cast<int>(std::lround(cx)) - frame_window.width / 2;
  const int y0 = static_cast<int>(std::lround(cy)) - frame_window.height / 2;
  cv::Mat patch(frame_window, CV_8UC3);
  for (int y = 0; y < frame_window.height; ++y) {
    const int sy = std::clamp(y0 + y, 0, img.rows - 1);
    const auto* src = img.ptr<cv::Vec3b>(sy);
    auto* dst = patch.ptr<cv::Vec3b>(y);
    for (int x = 0; x < frame_window.width; ++x) dst[x] = src[std::clamp(x0 + x, 0, img.cols - 1)];
  }
  if (working == frame_window) return patch;
  cv::Mat resized;
  cv::resize(patch, resized, working, 0, 0, cv::INTER_AREA);
  return resized;
}

inline std::size_t color_bin(const cv::Vec3b& px, int bins) {
  const int shift = 256 / bins;
  return (static_cast<std::size_t>(px[0] / shift) * bins + px[1] / shift) * bins + px[2] / shift;
}

inline cv::Rect roi_in_window(const TrackerState& s) {
  const int w = std::max(1, static_cast<int>(std::lround(s.roi.w * s.scale)));
  const int h = std::max(1, static_cast<int>(std::lround(s.roi.h * s.scale)));
  return {(s.window.width - w) / 2, (s.window.height - h) / 2, w, h};
}

// Foreground histogram inside the roi, background from the surrounding ring.
inline void color_histograms(const cv::Mat& patch, const cv::Rect& box, int bins, std::vector<double>& fg,
                             std::vector<double>& bg) {
  const std::size_t n = static_cast<std::size_t>(bins) * bins * bins;
  fg.assign(n, 0.0);
  bg.assign(n, 0.0);
  double nf = 0.0, nb = 0.0;
  for (int y = 0; y < patch.rows; ++y)
    for (int x = 0; x < patch.cols; ++x) {
      const std::size_t b = color_bin(patch.at<cv::Vec3b>(y, x), bins);
      if (box.contains({x, y})) {
        fg[b] += 1.0;
        nf += 1.0;
      } else {
        bg[b] += 1.0;
        nb += 1.0;
      }
    }
  if (nf > 0.0)
    for (auto& v : fg) v /= nf;
  if (nb > 0.0)
    for (auto& v : bg) v /= nb;
}

// Posterior P(foreground | color) with equal priors; 0.5 where neither
// histogram has mass.
inline cv::Mat color_posterior(const cv::Mat& patch, const std::vector<double>& fg, const std::vector<double>& bg,
                               int bins) {
  cv::Mat post(patch.size(), CV_64F);
  for (int y = 0; y < patch.rows; ++y)
    for (int x = 0; x < patch.cols; ++x) {
      const std::size_t b = color_bin(patch.at<cv::Vec3b>(y, x), bins);
      const double f = fg[b], g = bg[b];
      post.at<double>(y, x) = f + g > 0.0 ? f / (f + g) : 0.5;
    }
  return post;
}

// Binary support inside the roi box: the color posterior combined with a
// weak Epanechnikov center prior (clipped to [0.5, 0.9]) and thresholded at
// 0.5; the whole box when too little of it survives.
inline cv::Mat reliability_mask(const cv::Mat& posterior, const cv::Rect& box, bool use_posterior = true) {
  cv::Mat mask = cv::Mat::zeros(posterior.size(), CV_64F);
  int kept = 0;
  if (!use_posterior) {
    mask(box).setTo(1.0);
    return mask;
  }
  const double cx = box.x + 0.5 * (box.width - 1), cy = box.y + 0.5 * (box.height - 1);
  const double ax = 0.5 * box.width, ay = 0.5 * box.height;
  for (int y = box.y; y < box.y + box.height; ++y)
    for (int x = box.x; x < box.x + box.width; ++x) {
      const double u = (x - cx) / ax, v = (y - cy) / ay;
      const double prior = std::clamp(1.0 - (u * u + v * v), 0.5, 0.9);
      const double p = posterior.at<double>(y, x);
      const double combined = p * prior / (p * prior + (1.0 - p) * (1.0 - prior));
      if (combined > 0.5) {
        mask.at<double>(y, x) = 1.0;
        ++kept;
      }
    }
  if (kept < box.area() / 10) mask(box).setTo(1.0);
  return mask;
}

inline std::vector<cv::Mat> windowed_spectra(const TrackerState& s, const cv::Mat& patch) {
  std::vector<cv::Mat> planes = s.config.features(patch);
  if (planes.empty()) throw ConfigError("tracker: feature extractor returned no planes");
  std::vector<cv::Mat> spectra(planes.size());
  for (std::size_t c = 0; c < planes.size(); ++c) {
    if (planes[c].size() != s.window || planes[c].type() != CV_64F)
      throw ConfigError("tracker: feature planes must be CV_64F and window-sized");
    spectra[c] = dft2(planes[c].mul(s.hann));
  }
  return spectra;
}

// Constrained filter (ADMM) for one channel: data term |F conj(H) - Y|^2,
// support restricted to the mask.
inline cv::Mat solve_channel(const cv::Mat& F, const cv::Mat& Y, const cv::Mat& mask, double lambda, int iterations) {
  double mu = 5.0;
  const double beta = 3.0, mu_max = 20.0;
  const double D = static_cast<double>(F.total());
  cv::Mat sxy;
  cv::mulSpectrums(F, Y, sxy, 0, true);
  const cv::Mat sxx = power_spectrum(F);
  cv::Mat hm = dft2(idft2_real(divide_by_real(sxy, sxx + lambda)).mul(mask));
  cv::Mat L = cv::Mat::zeros(F.size(), F.type());
  for (int it = 0; it < iterations; ++it) {
    const cv::Mat hc = divide_by_real(sxy + mu * hm - L, sxx + mu);
    hm = dft2(idft2_real(L + mu * hc).mul(mask) / (lambda / (2.0 * D) + mu));
    L = L + mu * (hc - hm);
    mu = std::min(beta * mu, mu_max);
  }
  return hm;
}

inline double max_response(const cv::Mat& F, const cv::Mat& H) {
  cv::Mat r;
  cv::mulSpectrums(F, H, r, 0, true);
  double mx;
  cv::minMaxLoc(idft2_real(r), nullptr, &mx);
  return mx;
}

// Trains filters and channel reliabilities on one patch.
inline std::vector<cv::Mat> train(TrackerState& s, const cv::Mat& patch, std::vector<cv::Mat>& filters,
                                  std::vector<double>& weights) {
  auto spectra = windowed_spectra(s, patch);
  filters.resize(spectra.size());
  weights.resize(spectra.size());
  double sum = 0.0;
  for (std::size_t c = 0; c < spectra.size(); ++c) {
    filters[c] = solve_channel(spectra[c], s.target, s.mask, s.config.lambda, s.config.admm_iterations);
    weights[c] = std::max(0.0, max_response(spectra[c], filters[c]));
    sum += weights[c];
  }
  for (auto& w : weights) w = sum > 0.0 ? w / sum : 1.0 / static_cast<double>(weights.size());
  return spectra;
}

}  // namespace detail

// Weighted sum of per-channel responses for the given feature spectra;
// zero displacement at (0, 0).
inline cv::Mat correlation_response(const TrackerState& s, const std::vector<cv::Mat>& spectra) {
  if (spectra.size() != s.filter.size()) throw ArgumentError("tracker: channel count mismatch");
  cv::Mat acc = cv::Mat::zeros(s.window, CV_64FC2), prod;
  for (std::size_t c = 0; c < spectra.size(); ++c) {
    cv::mulSpectrums(spectra[c], s.filter[c], prod, 0, true);
    acc += s.channel_weights[c] * prod;
  }
  return idft2_real(acc);
}

// Response to feature planes taken as they are (no window applied).
inline cv::Mat response_from_planes(const TrackerState& s, const std::vector<cv::Mat>& planes) {
  std::vector<cv::Mat> spectra(planes.size());
  for (std::size_t c = 0; c < planes.size(); ++c) spectra[c] = dft2(planes[c]);
  return correlation_response(s, spectra);
}

// Response map for a frame around the current center, zero displacement at
// the map center.
inline cv::Mat response_map(const TrackerState& s, const RgbImage& frame) {
  const cv::Size fw(detail::even_at_least(s.window.width / s.scale, 2), detail::even_at_least(s.window.height / s.scale, 2));
  const cv::Mat patch = detail::extract_patch(frame, s.roi.cx, s.roi.cy, fw, s.window);
  return fftshift(correlation_response(s, detail::windowed_spectra(s, patch)));
}

namespace detail {

// Peak-to-sidelobe ratio, sidelobe excluding an 11x11 area around the peak.
inline double peak_to_sidelobe(const cv::Mat& r, cv::Point peak) {
  const double pv = r.at<double>(peak);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < r.rows; ++y) {
    int dy = std::abs(y - peak.y);
    dy = std::min(dy, r.rows - dy);
    for (int x = 0; x < r.cols; ++x) {
      int dx = std::abs(x - peak.x);
      dx = std::min(dx, r.cols - dx);
      if (dx <= 5 && dy <= 5) continue;
      const double v = r.at<double>(y, x);
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  if (n == 0) return 0.0;
  const double mean = sum / n;
  const double sd = std::sqrt(std::max(0.0, sq / n - mean * mean));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(pv)))) return 0.0;
  return (pv - mean) / sd;
}

inline double parabolic_offset(double left, double center, double right) {
  const double den = left - 2.0 * center + right;
  if (!(std::abs(den) > 1e-15)) return 0.0;
  return std::clamp(0.5 * (left - right) / den, -0.5, 0.5);
}

// Peak displacement with wraparound and parabolic sub-pixel refinement.
inline cv::Point2d subpixel_peak(const cv::Mat& r, cv::Point peak) {
  auto at = [&](int y, int x) { return r.at<double>((y + r.rows) % r.rows, (x + r.cols) % r.cols); };
  double dx = peak.x > r.cols / 2 ? peak.x - r.cols : peak.x;
  double dy = peak.y > r.rows / 2 ? peak.y - r.rows : peak.y;
  dx += parabolic_offset(at(peak.y, peak.x - 1), at(peak.y, peak.x), at(peak.y, peak.x + 1));
  dy += parabolic_offset(at(peak.y - 1, peak.x), at(peak.y, peak.x), at(peak.y + 1, peak.x));
  return {dx, dy};
}

inline cv::Point2d subpixel_peak(const cv::Mat& r) {
  cv::Point peak;
  cv::minMaxLoc(r, nullptr, nullptr, nullptr, &peak);
  return subpixel_peak(r, peak);
}

}  // namespace detail

inline TrackerState init_tracker(const RgbImage& frame, const Roi& roi, TrackerConfig config = {}) {
  config.validate();
  if (roi.w < kMinRoiSide || roi.h < kMinRoiSide)
    throw ArgumentError("tracker: roi sides must be at least " + std::to_string(kMinRoiSide) + " pixels");
  if (!roi.inside(frame.cols, frame.rows)) throw ArgumentError("tracker: roi is not inside the frame");

  TrackerState s;
  s.config = std::move(config);
  s.roi = roi;
  s.frame_rows = frame.rows;
  s.frame_cols = frame.cols;
  const int fw = detail::even_at_least(s.config.padding * roi.w, 2);
  const int fh = detail::even_at_least(s.config.padding * roi.h, 2);
  s.scale = std::min(1.0, static_cast<double>(s.config.max_window) / std::max(fw, fh));
  s.window = s.scale == 1.0 ? cv::Size(fw, fh)
                            : cv::Size(detail::even_at_least(fw * s.scale, 8), detail::even_at_least(fh * s.scale, 8));
  s.scale = static_cast<double>(s.window.width) / fw;
  cv::createHanningWindow(s.hann, s.window, CV_64F);
  const double sigma = s.config.output_sigma * std::sqrt(static_cast<double>(roi.w) * roi.h) * s.scale;
  s.target = dft2(detail::gaussian_target(s.window, std::max(sigma, 0.5)));

  const cv::Mat patch = detail::extract_patch(frame, roi.cx, roi.cy, {fw, fh}, s.window);
  const cv::Rect box = detail::roi_in_window(s);
  detail::color_histograms(patch, box, s.config.histogram_bins, s.fg_hist, s.bg_hist);
  s.spatial_map = detail::color_posterior(patch, s.fg_hist, s.bg_hist, s.config.histogram_bins);
  s.mask = detail::reliability_mask(s.spatial_map, box, s.config.spatial_reliability);
  s.bias = detail::subpixel_peak(correlation_response(s, detail::train(s, patch, s.filter, s.channel_weights)));
  return s;
}

struct TrackStep {
  Roi roi;
  double confidence = 0.0;
  double psr = 0.0;
  bool low_confidence = false;
};

inline double psr_to_confidence(double psr) { return psr > 0.0 ? 1.0 - std::exp(-psr / 8.0) : 0.0; }

inline TrackStep track_step(TrackerState& s, const RgbImage& frame) {
  if (s.filter.empty()) throw StateError("tracker: state not initialized");
  if (frame.rows != s.frame_rows || frame.cols != s.frame_cols)
    throw ArgumentError("tracker: frame size differs from the initialization frame");
  const cv::Size fw(detail::even_at_least(s.window.width / s.scale, 2), detail::even_at_least(s.window.height / s.scale, 2));
  const cv::Mat patch = detail::extract_patch(frame, s.roi.cx, s.roi.cy, fw, s.window);
  const cv::Mat r = correlation_response(s, detail::windowed_spectra(s, patch));

  cv::Point peak;
  cv::minMaxLoc(r, nullptr, nullptr, nullptr, &peak);
  TrackStep step;
  step.psr = detail::peak_to_sidelobe(r, peak);
  step.confidence = psr_to_confidence(step.psr);
  if (step.confidence < s.config.confidence_floor) {
    step.roi = s.roi;
    step.low_confidence = true;
    return step;
  }
  // Estimator bias measured on the training patch is removed, so an
  // unchanged frame yields zero displacement.
  const cv::Point2d d = detail::subpixel_peak(r, peak) - s.bias;
  const double dx = d.x, dy = d.y;

  // Displacement is relative to the integer center the patch was cut at.
  Roi next = s.roi;
  next.cx = std::round(s.roi.cx) + dx / s.scale;
  next.cy = std::round(s.roi.cy) + dy / s.scale;
  next.cx = std::clamp(next.cx, 0.5 * next.w, static_cast<double>(s.frame_cols) - 0.5 * next.w);
  next.cy = std::clamp(next.cy, 0.5 * next.h, static_cast<double>(s.frame_rows) - 0.5 * next.h);
  while (!next.inside(s.frame_cols, s.frame_rows)) {
    // lround at exact half-pixel edges can still poke out by one
    next.cx += next.rect().x < 0 ? 0.5 : (next.rect().x + next.w > static_cast<int>(s.frame_cols) ? -0.5 : 0.0);
    next.cy += next.rect().y < 0 ? 0.5 : (next.rect().y + next.h > static_cast<int>(s.frame_rows) ? -0.5 : 0.0);
  }
  s.roi = next;

  // Model update at the new location.
  const double eta = s.config.learning_rate;
  if (eta > 0.0) {
    const cv::Mat p = detail::extract_patch(frame, s.roi.cx, s.roi.cy, fw, s.window);
    const cv::Rect box = detail::roi_in_window(s);
    std::vector<double> fg, bg;
    detail::color_histograms(p, box, s.config.histogram_bins, fg, bg);
    for (std::size_t b = 0; b < fg.size(); ++b) {
      s.fg_hist[b] = (1.0 - eta) * s.fg_hist[b] + eta * fg[b];
      s.bg_hist[b] = (1.0 - eta) * s.bg_hist[b] + eta * bg[b];
    }
    s.spatial_map = detail::color_posterior(p, s.fg_hist, s.bg_hist, s.config.histogram_bins);
    s.mask = detail::reliability_mask(s.spatial_map, box, s.config.spatial_reliability);
    std::vector<cv::Mat> filters;
    std::vector<double> weights;
    const auto spectra = detail::train(s, p, filters, weights);
    double sum = 0.0;
    for (std::size_t c = 0; c < filters.size(); ++c) {
      s.filter[c] = (1.0 - eta) * s.filter[c] + eta * filters[c];
      s.channel_weights[c] = (1.0 - eta) * s.channel_weights[c] + eta * weights[c];
      sum += s.channel_weights[c];
    }
    for (auto& w : s.channel_weights) w /= sum;
    s.bias = detail::subpixel_peak(correlation_response(s, spectra));
  }
  ++s.updates;
  step.roi = s.roi;
  return step;
}

// ------------------------------------------------------------ sequences

enum TrackFlag : unsigned { kFlagNone = 0, kFlagJump = 1, kFlagLowConfidence = 2, kFlagExposure = 4 };

struct TrackRecord {
  std::size_t frame_index = 0;
  Roi roi;
  double confidence = 0.0;
  unsigned flags = kFlagNone;
};

struct QualityReport {
  std::vector<std::size_t> jumps;
  std::vector<std::pair<std::size_t, std::size_t>> low_confidence_spans;  // inclusive
  std::vector<std::size_t> exposure_failures;

  bool clean() const { return jumps.empty() && low_confidence_spans.empty() && exposure_failures.empty(); }
};

struct TrackResult {
  std::vector<TrackRecord> records;
  QualityReport quality;
};

// Exposure probe: frame index and tracked roi -> passes check_exposure.
using ExposureProbe = std::function<bool(std::size_t, const Rect&)>;

// Incremental sequence tracker; used by track_sequence and the streaming
// pipeline.
class SequenceTracker {
 public:
  // With retain_records off only the latest record is kept, so memory does
  // not grow with the sequence.
  explicit SequenceTracker(TrackerConfig config = {}, bool retain_records = true)
      : config_(std::move(config)), retain_(retain_records) {
    config_.validate();
  }

  const TrackRecord& push(const RgbImage& frame, const Roi& roi0, const ExposureProbe& probe = {}) {
    TrackRecord rec;
    rec.frame_index = pushed_++;
    if (!state_) {
      state_ = init_tracker(frame, roi0, config_);
      rec.roi = roi0;
      rec.confidence = 1.0;
    } else {
      const Roi prev = state_->roi;
      const TrackStep step = track_step(*state_, frame);
      rec.roi = step.roi;
      rec.confidence = step.confidence;
      if (step.low_confidence) rec.flags |= kFlagLowConfidence;
      const double moved = std::hypot(step.roi.cx - prev.cx, step.roi.cy - prev.cy);
      if (moved > config_.jump_threshold * std::min(prev.w, prev.h)) {
        rec.flags |= kFlagJump;
        result_.quality.jumps.push_back(rec.frame_index);
      }
    }
    if (rec.flags & kFlagLowConfidence) {
      auto& spans = result_.quality.low_confidence_spans;
      if (!spans.empty() && spans.back().second + 1 == rec.frame_index)
        spans.back().second = rec.frame_index;
      else
        spans.emplace_back(rec.frame_index, rec.frame_index);
    }
    if (probe && !probe(rec.frame_index, rec.roi.rect())) {
      rec.flags |= kFlagExposure;
      result_.quality.exposure_failures.push_back(rec.frame_index);
    }
    if (!retain_) result_.records.clear();
    result_.records.push_back(rec);
    return result_.records.back();
  }

  std::size_t frames() const noexcept { return pushed_; }

  const TrackResult& result() const noexcept { return result_; }
  const std::optional<TrackerState>& state() const noexcept { return state_; }

 private:
  TrackerConfig config_;
  bool retain_ = true;
  std::size_t pushed_ = 0;
  std::optional<TrackerState> state_;
  TrackResult result_;
};

inline TrackResult track_sequence(const std::vector<RgbImage>& frames, const Roi& roi0, const TrackerConfig& config = {},
                                  const ExposureProbe& probe = {}) {
  if (frames.empty()) throw ArgumentError("track_sequence: empty sequence");
  SequenceTracker t(config);
  for (const auto& f : frames) t.push(f, roi0, probe);
  return t.result();
}

inline std::string flags_to_string(unsigned flags) {
  std::string s;
  auto add = [&](const char* name) { s += s.empty() ? name : std::string(";") + name; };
  if (flags & kFlagJump) add("jump");
  if (flags & kFlagLowConfidence) add("low_confidence");
  if (flags & kFlagExposure) add("exposure");
  return s;
}

inline void write_track_csv(const fs::path& path, const std::vector<TrackRecord>& records) {
  CsvWriter w(path, {"frame_index", "cx", "cy", "w", "h", "confidence", "flags"});
  for (const auto& r : records)
    w.row({std::to_string(r.frame_index), detail::format_double(r.roi.cx), detail::format_double(r.roi.cy),
           std::to_string(r.roi.w), std::to_string(r.roi.h), detail::format_double(r.confidence),
           flags_to_string(r.flags)});
}

}  // namespace msi

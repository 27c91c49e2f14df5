#pragma once

// Spectral chain of the imaging system: per-band filter responses (with
// Fabry-Perot second-order peaks), band-pass filter, laparoscope, C-mount
// adapter and illuminant; forward camera model and RGB reconstruction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "msi/calibration.hpp"
#include "msi/error.hpp"
#include "msi/image.hpp"
#include "msi/mosaic.hpp"

namespace msi {

struct SpectralCurve {
  std::vector<double> wavelengths;  // nm, strictly ascending
  std::vector<double> values;

  std::size_t size() const noexcept { return wavelengths.size(); }
  bool empty() const noexcept { return wavelengths.empty(); }
  double front() const { return wavelengths.front(); }
  double back() const { return wavelengths.back(); }

  void validate() const {
    if (wavelengths.size() != values.size())
      throw DataError("spectral curve: wavelength and value counts differ");
    for (std::size_t i = 1; i < wavelengths.size(); ++i)
      if (!(wavelengths[i] > wavelengths[i - 1]))
        throw DataError("spectral curve: wavelengths must be strictly ascending");
    for (double v : values)
      if (!std::isfinite(v)) throw DataError("spectral curve: non-finite value");
  }

  friend bool operator==(const SpectralCurve&, const SpectralCurve&) = default;
};

inline std::vector<double> uniform_grid(double start_nm, double stop_nm, double step_nm) {
  if (!(step_nm > 0.0) || stop_nm < start_nm) throw ArgumentError("uniform_grid: bad range");
  const auto n = static_cast<std::size_t>(std::floor((stop_nm - start_nm) / step_nm + 1e-9)) + 1;
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = start_nm + static_cast<double>(i) * step_nm;
  return grid;
}

inline std::vector<double> default_grid() { return uniform_grid(400.0, 1000.0, 1.0); }

template <typename F>
SpectralCurve tabulate(const std::vector<double>& grid, F&& f) {
  SpectralCurve c{grid, std::vector<double>(grid.size())};
  for (std::size_t i = 0; i < grid.size(); ++i) c.values[i] = f(grid[i]);
  return c;
}

// Linear interpolation onto `grid`; zero outside the curve's support.
inline SpectralCurve resample(const SpectralCurve& curve, const std::vector<double>& grid) {
  SpectralCurve out{grid, std::vector<double>(grid.size(), 0.0)};
  if (curve.empty()) return out;
  const auto& xs = curve.wavelengths;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double x = grid[i];
    if (x < xs.front() || x > xs.back()) continue;
    auto hi = std::lower_bound(xs.begin(), xs.end(), x);
    const auto h = static_cast<std::size_t>(hi - xs.begin());
    if (xs[h] == x) {
      out.values[i] = curve.values[h];
      continue;
    }
    const std::size_t l = h - 1;
    const double t = (x - xs[l]) / (xs[h] - xs[l]);
    out.values[i] = curve.values[l] + t * (curve.values[h] - curve.values[l]);
  }
  return out;
}

// Shape-preserving piecewise cubic Hermite interpolation (Fritsch-Carlson)
// of tabulated knots; zero outside the knot range.
inline SpectralCurve pchip(const std::vector<double>& xs, const std::vector<double>& ys,
                           const std::vector<double>& grid) {
  const std::size_t n = xs.size();
  if (n < 2 || ys.size() != n) throw ConfigError("pchip: need at least two knots");
  std::vector<double> h(n - 1), delta(n - 1), d(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    h[i] = xs[i + 1] - xs[i];
    if (!(h[i] > 0.0)) throw ConfigError("pchip: knots must be strictly ascending");
    delta[i] = (ys[i + 1] - ys[i]) / h[i];
  }
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (delta[i - 1] * delta[i] <= 0.0) continue;
    const double w1 = 2.0 * h[i] + h[i - 1];
    const double w2 = h[i] + 2.0 * h[i - 1];
    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
  }
  d[0] = delta[0];
  d[n - 1] = delta[n - 2];

  SpectralCurve out{grid, std::vector<double>(grid.size(), 0.0)};
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double x = grid[g];
    if (x < xs.front() || x > xs.back()) continue;
    std::size_t i = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
    i = std::clamp<std::size_t>(i, 1, n - 1) - 1;
    const double t = (x - xs[i]) / h[i];
    const double t2 = t * t, t3 = t2 * t;
    out.values[g] = (2 * t3 - 3 * t2 + 1) * ys[i] + (t3 - 2 * t2 + t) * h[i] * d[i] +
                    (-2 * t3 + 3 * t2) * ys[i + 1] + (t3 - t2) * h[i] * d[i + 1];
  }
  return out;
}

// Trapezoidal integral over the curve's own grid.
inline double integrate(const SpectralCurve& c) {
  double s = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i)
    s += 0.5 * (c.values[i] + c.values[i - 1]) * (c.wavelengths[i] - c.wavelengths[i - 1]);
  return s;
}

// Trapezoidal integral restricted to wavelengths in [lo, hi] (grid samples only).
inline double integrate_range(const SpectralCurve& c, double lo, double hi) {
  double s = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i) {
    if (c.wavelengths[i - 1] < lo || c.wavelengths[i] > hi) continue;
    s += 0.5 * (c.values[i] + c.values[i - 1]) * (c.wavelengths[i] - c.wavelengths[i - 1]);
  }
  return s;
}

struct FilterBank {
  std::array<SpectralCurve, kBandCount> responses;
  std::array<double, kBandCount> band_centers{};
};

// Parameters of the parametric stand-in filter responses.
struct FilterBankSpec {
  std::array<double, kBandCount> centers{};
  double primary_sigma_nm = 12.0;
  double second_order_sigma_nm = 10.0;
  double second_order_ratio = 0.75;        // second-order peak at ratio * center
  double second_order_min_center_nm = 650.0;
  std::array<double, kBandCount> second_order_amplitude{};

  // 16 centers uniformly spaced over 470-630 nm, second-order amplitude 0.3.
  static FilterBankSpec defaults() {
    FilterBankSpec s;
    for (std::size_t k = 0; k < kBandCount; ++k) {
      s.centers[k] = 470.0 + static_cast<double>(k) * (160.0 / 15.0);
      s.second_order_amplitude[k] = 0.3;
    }
    return s;
  }
};

inline double gaussian(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z);
}

inline FilterBank make_filter_bank(const FilterBankSpec& spec,
                                   const std::vector<double>& grid = default_grid()) {
  FilterBank bank;
  bank.band_centers = spec.centers;
  for (std::size_t k = 0; k < kBandCount; ++k) {
    const double c = spec.centers[k];
    const bool second = c > spec.second_order_min_center_nm;
    const double c2 = spec.second_order_ratio * c;
    const double a2 = spec.second_order_amplitude[k];
    bank.responses[k] = tabulate(grid, [&](double l) {
      double v = gaussian(l, c, spec.primary_sigma_nm);
      if (second) v += a2 * gaussian(l, c2, spec.second_order_sigma_nm);
      return v;
    });
  }
  return bank;
}

inline FilterBank default_filter_bank(const std::vector<double>& grid = default_grid()) {
  return make_filter_bank(FilterBankSpec::defaults(), grid);
}

struct OpticalChain {
  SpectralCurve bandpass;
  SpectralCurve scope;
  SpectralCurve cmount;
  SpectralCurve illuminant;
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Stand-in transmission of a 335-610 nm band-pass filter: 0.9 in band,
// sub-nanometre edges, 1e-4 leakage out of band.
inline SpectralCurve default_bandpass(const std::vector<double>& grid = default_grid()) {
  return tabulate(grid, [](double l) {
    const double pass = logistic((l - 335.5) / 0.2) * logistic((609.5 - l) / 0.2);
    return 1e-4 + (0.9 - 1e-4) * pass;
  });
}

inline OpticalChain default_optical_chain(const std::vector<double>& grid = default_grid()) {
  OpticalChain chain;
  chain.bandpass = default_bandpass(grid);
  // Rod-lens laparoscope: blue absorption, flat red.
  chain.scope = tabulate(grid, [](double l) { return 0.45 + 0.4 * logistic((l - 470.0) / 35.0); });
  chain.cmount = tabulate(grid, [](double l) { return 0.93 - 0.05 * logistic((l - 800.0) / 60.0); });
  // Xenon arc: broadly flat with a mild roll-off toward the UV.
  chain.illuminant = tabulate(grid, [](double l) { return 0.6 + 0.4 * logistic((l - 430.0) / 25.0); });
  return chain;
}

namespace detail {

inline SpectralCurve on_grid(const SpectralCurve& c, const std::vector<double>& grid,
                             const char* what) {
  if (c.empty() || c.back() < grid.front() || c.front() > grid.back())
    throw DataError(std::string("effective_response: ") + what +
                    " has no wavelength overlap with the filter responses");
  if (c.wavelengths == grid) return c;
  return resample(c, grid);
}

}  // namespace detail

// Per band: response * bandpass * scope * cmount * illuminant.
inline FilterBank effective_response(const FilterBank& bank, const OpticalChain& chain) {
  FilterBank out;
  out.band_centers = bank.band_centers;
  for (std::size_t k = 0; k < kBandCount; ++k) {
    const auto& resp = bank.responses[k];
    if (resp.empty()) throw DataError("effective_response: empty response curve");
    const auto& grid = resp.wavelengths;
    const auto bp = detail::on_grid(chain.bandpass, grid, "bandpass");
    const auto sc = detail::on_grid(chain.scope, grid, "scope");
    const auto cm = detail::on_grid(chain.cmount, grid, "cmount");
    const auto il = detail::on_grid(chain.illuminant, grid, "illuminant");
    SpectralCurve e{grid, std::vector<double>(grid.size())};
    for (std::size_t i = 0; i < grid.size(); ++i)
      e.values[i] = std::max(0.0, resp.values[i] * bp.values[i] * sc.values[i] * cm.values[i] *
                                      il.values[i]);
    out.responses[k] = std::move(e);
  }
  return out;
}

// Band counts (relative units): integral of reflectance * effective response.
inline Spectrum forward_camera_signal(const SpectralCurve& reflectance, const FilterBank& eff) {
  for (double v : reflectance.values)
    if (v < 0.0) throw ArgumentError("forward_camera_signal: negative reflectance");
  Spectrum out{};
  for (std::size_t k = 0; k < kBandCount; ++k) {
    const auto& e = eff.responses[k];
    const SpectralCurve r =
        reflectance.wavelengths == e.wavelengths ? reflectance : resample(reflectance, e.wavelengths);
    double s = 0.0;
    for (std::size_t i = 1; i < e.size(); ++i)
      s += 0.5 * (r.values[i] * e.values[i] + r.values[i - 1] * e.values[i - 1]) *
           (e.wavelengths[i] - e.wavelengths[i - 1]);
    out[k] = s;
  }
  return out;
}

// Rows R, G, B; each row non-negative and summing to 1.
using RgbWeights = std::array<std::array<double, kBandCount>, 3>;

inline RgbWeights rgb_weights(const std::array<double, kBandCount>& band_centers,
                              double sigma_nm = 40.0) {
  constexpr std::array<double, 3> targets{600.0, 550.0, 470.0};
  RgbWeights w{};
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (std::size_t k = 0; k < kBandCount; ++k) {
      w[c][k] = gaussian(band_centers[k], targets[c], sigma_nm);
      sum += w[c][k];
    }
    for (auto& v : w[c]) v /= sum;
  }
  return w;
}

namespace detail {

// Linearly interpolated order statistic at fraction q of a scratch buffer.
inline double percentile_inplace(std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

}  // namespace detail

// Weighted band sums per pixel, then a per-channel 1st-99th percentile
// stretch to 8 bit. A channel with no spread maps to mid-gray if positive,
// black otherwise.
template <typename T>
RgbImage reconstruct_rgb(const BandCube<T>& cube, const RgbWeights& weights) {
  const std::size_t n = cube.rows() * cube.cols();
  RgbImage img(cube.rows(), cube.cols());
  if (n == 0) return img;
  std::array<std::vector<double>, 3> planes;
  for (auto& p : planes) p.resize(n);
  const auto vals = cube.values();
  for (std::size_t p = 0; p < n; ++p) {
    const T* px = vals.data() + p * kBandCount;
    double r = 0.0, g = 0.0, b = 0.0;
    for (std::size_t k = 0; k < kBandCount; ++k) {
      const double v = static_cast<double>(px[k]);
      r += weights[0][k] * v;
      g += weights[1][k] * v;
      b += weights[2][k] * v;
    }
    planes[0][p] = r;
    planes[1][p] = g;
    planes[2][p] = b;
  }
  std::vector<double> scratch;
  for (std::size_t c = 0; c < 3; ++c) {
    scratch = planes[c];
    const double lo = detail::percentile_inplace(scratch, 0.01);
    const double hi = detail::percentile_inplace(scratch, 0.99);
    const double range = hi - lo;
    const bool flat = !(range > std::abs(hi) * 1e-12) || range <= 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      std::uint8_t out;
      if (flat) {
        out = planes[c][p] > 0.0 ? 128 : 0;
      } else {
        const double s = (planes[c][p] - lo) / range;
        out = static_cast<std::uint8_t>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0));
      }
      img.data[p * 3 + c] = out;
    }
  }
  return img;
}

template <typename T>
RgbImage reconstruct_rgb(const BandCube<T>& cube, const FilterBank& bank) {
  return reconstruct_rgb(cube, rgb_weights(bank.band_centers));
}

inline RgbImage reconstruct_rgb(const NormalizedCube& cube, const FilterBank& bank) {
  return reconstruct_rgb(cube.data, bank);
}

}  // namespace msi

#pragma once

// Synthetic perfused/ischemic tissue sequences with ground-truth phase
// labels and motion, rendered through the optics model and the inverse of
// the white/dark normalization down to quantized raw mosaic frames.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msi/calibration.hpp"
#include "msi/error.hpp"
#include "msi/mosaic.hpp"
#include "msi/optics.hpp"
#include "msi/random.hpp"

namespace msi {

// Molar extinction coefficients of oxy- and deoxyhemoglobin, 1/(cm mol/L).
struct HemoglobinExtinction {
  SpectralCurve hbo2;
  SpectralCurve hb;
};

// Stand-in knot table shaped after commonly tabulated hemoglobin spectra:
// Soret peaks near 414/430 nm, the HbO2 double peak at 542/577 nm and the
// single Hb peak near 555 nm. Interpolated with PCHIP.
struct ExtinctionKnots {
  std::vector<double> wavelength_nm;
  std::vector<double> hbo2;
  std::vector<double> hb;

  static const ExtinctionKnots& builtin() {
    static const ExtinctionKnots k{
        {400, 414, 420, 430, 440, 450, 460, 470, 480, 490, 500, 510, 520, 530, 542,
         550, 555, 560, 570, 577, 584, 590, 600, 610, 620, 630, 640, 650, 660, 680,
         700, 750, 800, 850, 900, 950, 1000},
        {266232, 524280, 480360, 214120, 103000, 62816, 44480, 33209, 26629, 23684,
         20932, 20035, 24202, 39956, 53788, 43016, 37000, 32613, 44496, 55540,
         34000, 14400, 3200, 1506, 942, 610, 442, 368, 319, 294,
         290, 518, 816, 1058, 1198, 1204, 1126},
        {223296, 330000, 407560, 528600, 413280, 103292, 23684, 16156, 14550, 16684,
         20035, 25773, 31589, 39036, 48000, 53412, 54540, 53788, 45072, 39000,
         34500, 28324, 14677, 9443, 6509, 5148, 4345, 3750, 3226, 2407,
         1794, 1405, 761, 691, 761, 693, 620}};
    return k;
  }
};

inline HemoglobinExtinction make_extinction(const ExtinctionKnots& knots,
                                            const std::vector<double>& grid = default_grid()) {
  return {pchip(knots.wavelength_nm, knots.hbo2, grid), pchip(knots.wavelength_nm, knots.hb, grid)};
}

inline HemoglobinExtinction default_extinction(const std::vector<double>& grid = default_grid()) {
  return make_extinction(ExtinctionKnots::builtin(), grid);
}

// Total hemoglobin concentration of whole blood (standard physiological
// value, 150 g/L) over the molar mass of hemoglobin (64500 g/mol).
inline constexpr double kBloodHemoglobinMolar = 150.0 / 64500.0;

struct TissueState {
  double sao2 = 0.9;
  double vhb = 0.04;
  double scatter_a = 20.0;  // reduced scattering at 500 nm, 1/cm
  double scatter_b = 1.3;

  void validate() const {
    if (!(sao2 >= 0.0 && sao2 <= 1.0)) throw ConfigError("tissue state: sao2 outside [0, 1]");
    if (!(vhb > 0.0 && vhb <= 0.3)) throw ConfigError("tissue state: vhb outside (0, 0.3]");
    if (!(scatter_a > 0.0)) throw ConfigError("tissue state: scatter_a must be positive");
    if (!std::isfinite(scatter_b)) throw ConfigError("tissue state: scatter_b not finite");
  }
};

// Diffuse reflectance R = exp(-mu_a / mu_s'), sampled on the extinction grid.
// vhb is not range-checked here so that limits (vhb -> 0) can be evaluated.
inline SpectralCurve tissue_reflectance(const TissueState& s, const HemoglobinExtinction& ext) {
  if (ext.hbo2.empty() || ext.hb.empty())
    throw ConfigError("tissue_reflectance: hemoglobin extinction curves not loaded");
  if (ext.hbo2.wavelengths != ext.hb.wavelengths)
    throw ConfigError("tissue_reflectance: extinction curves on different grids");
  const auto& grid = ext.hbo2.wavelengths;
  SpectralCurve r{grid, std::vector<double>(grid.size())};
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double eps = s.sao2 * ext.hbo2.values[i] + (1.0 - s.sao2) * ext.hb.values[i];
    const double mua = std::numbers::ln10 * s.vhb * kBloodHemoglobinMolar * eps;
    const double musp = s.scatter_a * std::pow(grid[i] / 500.0, -s.scatter_b);
    r.values[i] = std::exp(-mua / musp);
  }
  return r;
}

struct PhaseSegment {
  double start_s = 0.0;
  TissueState state;
  Phase label = Phase::before;
};

struct SceneScript {
  std::size_t width = 1024;  // raw sensor pixels
  std::size_t height = 544;
  unsigned bit_depth = 10;
  double duration_s = 45.0;
  double fps = 26.7;
  std::vector<PhaseSegment> schedule{PhaseSegment{}};
  double motion_amplitude_px = 0.0;  // cube pixels
  double motion_period_s = 4.0;
  double noise_sigma = 0.0;          // counts
  double drift_amplitude = 0.0;      // multiplicative
  double drift_period_s = 9.0;
  double vhb_variation = 0.10;       // +-fraction of vhb across the texture
  double dark_level = 32.0;          // counts

  std::size_t cube_rows() const noexcept { return height / kMosaicPeriod; }
  std::size_t cube_cols() const noexcept { return width / kMosaicPeriod; }

  void validate() const {
    if (width == 0 || height == 0 || width % kMosaicPeriod || height % kMosaicPeriod)
      throw ConfigError("scene: raw size must be a positive multiple of 4");
    if (bit_depth == 0 || bit_depth > 16) throw ConfigError("scene: bit depth outside [1, 16]");
    if (!(fps > 0.0)) throw ConfigError("scene: fps must be positive");
    if (!(duration_s >= 0.0)) throw ConfigError("scene: negative duration");
    if (schedule.empty()) throw ConfigError("scene: empty phase schedule");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      schedule[i].state.validate();
      if (schedule[i].start_s < 0.0 || schedule[i].start_s > duration_s)
        throw ConfigError("scene: schedule time outside the sequence duration");
      if (i > 0 && !(schedule[i].start_s > schedule[i - 1].start_s))
        throw ConfigError("scene: schedule times must be ascending");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("scene: negative noise sigma");
    if (!(motion_period_s > 0.0) || !(drift_period_s > 0.0))
      throw ConfigError("scene: periods must be positive");
    if (!(vhb_variation >= 0.0 && vhb_variation < 1.0))
      throw ConfigError("scene: vhb_variation outside [0, 1)");
  }
};

// floor(duration * fps) + 1 frames, timestamps k / fps.
inline std::size_t frame_count(const SceneScript& s) {
  return static_cast<std::size_t>(std::floor(s.duration_s * s.fps + 1e-9)) + 1;
}

inline double frame_time(const SceneScript& s, std::size_t index) {
  return static_cast<double>(index) / s.fps;
}

inline const PhaseSegment& segment_at(const SceneScript& s, double t) {
  std::size_t idx = 0;
  for (std::size_t i = 0; i < s.schedule.size(); ++i)
    if (s.schedule[i].start_s <= t) idx = i;
  return s.schedule[idx];
}

struct Offset {
  double dx = 0.0;
  double dy = 0.0;
};

// Scene translation in cube pixels: x sinusoid of the configured amplitude,
// y at half amplitude and twice the frequency.
inline Offset motion_offset(const SceneScript& s, double t) {
  if (s.motion_amplitude_px == 0.0) return {};
  const double w = 2.0 * std::numbers::pi * t / s.motion_period_s;
  return {s.motion_amplitude_px * std::sin(w), 0.5 * s.motion_amplitude_px * std::sin(2.0 * w)};
}

// Smooth value-noise texture in [-1, 1], continuous in (u, v).
class TissueTexture {
 public:
  explicit TissueTexture(std::uint64_t seed) : seed_(seed) {}

  double operator()(double u, double v) const {
    return 0.5 * octave(u, v, 16.0, 0) + 0.3 * octave(u, v, 8.0, 1) + 0.2 * octave(u, v, 4.0, 2);
  }

 private:
  double lattice(std::int64_t x, std::int64_t y, std::uint64_t octave_id) const {
    const std::uint64_t h = mix64(seed_ ^ mix64(static_cast<std::uint64_t>(x) * 0x9e3779b97f4a7c15ULL ^
                                               mix64(static_cast<std::uint64_t>(y) + octave_id * 0x5851f42d4c957f2dULL)));
    return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
  }

  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

  double octave(double u, double v, double period, std::uint64_t id) const {
    const double x = u / period, y = v / period;
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = smooth(x - fx), ty = smooth(y - fy);
    const double a = lattice(ix, iy, id), b = lattice(ix + 1, iy, id);
    const double c = lattice(ix, iy + 1, id), d = lattice(ix + 1, iy + 1, id);
    return (a + (b - a) * tx) * (1.0 - ty) + (c + (d - c) * tx) * ty;
  }

  std::uint64_t seed_;
};

// Noise-free white/dark references for a scene: dark = dark level plus a
// +-2 count fixed pattern; white = dark + gain * white-target signal *
// vignetting, scaled so the brightest band reaches 85% of the headroom.
inline CalibrationPair make_phantom_calibration(const SceneScript& s, const FilterBank& eff,
                                                std::uint64_t seed) {
  const std::size_t rows = s.cube_rows(), cols = s.cube_cols();
  const auto& grid = eff.responses[0].wavelengths;
  const SpectralCurve white_target{grid, std::vector<double>(grid.size(), 1.0)};
  const Spectrum ws = forward_camera_signal(white_target, eff);
  const double peak = *std::max_element(ws.begin(), ws.end());
  if (!(peak > 0.0)) throw ConfigError("phantom calibration: effective responses integrate to zero");
  const double full = static_cast<double>((1u << s.bit_depth) - 1u);
  const double gain = 0.85 * (full - s.dark_level - 2.0) / peak;

  CalibrationPair cal{BandCube<double>(rows, cols), BandCube<double>(rows, cols),
                      "synthetic Spectralon-like white target"};
  const CounterRng fixed(seed, 0xda4c);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double yr = (static_cast<double>(i) + 0.5) / static_cast<double>(rows) - 0.5;
      const double xr = (static_cast<double>(j) + 0.5) / static_cast<double>(cols) - 0.5;
      const double vignette = 1.0 - 0.3 * (xr * xr + yr * yr);
      for (std::size_t k = 0; k < kBandCount; ++k) {
        const std::uint64_t idx = (i * cols + j) * kBandCount + k;
        const double d = s.dark_level + static_cast<double>(fixed.bits(idx) % 5) - 2.0;
        cal.dark(i, j, k) = d;
        cal.white(i, j, k) = d + std::max(1.0, std::nearbyint(gain * ws[k] * vignette));
      }
    }
  }
  return cal;
}

struct RenderedFrame {
  RawMosaicFrame frame;
  Phase label = Phase::before;
  Offset motion;
  std::size_t overexposed = 0;  // values clipped at full scale
};

// Renders frames of one scene. Each frame is a pure function of
// (script, seed, frame index); the renderer is immutable after construction
// and may be shared across threads.
class PhantomRenderer {
 public:
  PhantomRenderer(SceneScript script, const FilterBank& eff, CalibrationPair cal,
                  MosaicLayout layout, std::uint64_t seed,
                  const HemoglobinExtinction& ext = default_extinction())
      : script_(std::move(script)),
        cal_(std::move(cal)),
        layout_(layout),
        seed_(seed),
        texture_(derive_seed(seed, "phantom.texture")),
        noise_(derive_seed(seed, "phantom.noise"), 0) {
    script_.validate();
    if (cal_.white.rows() != script_.cube_rows() || cal_.white.cols() != script_.cube_cols())
      throw ConfigError("phantom: calibration size does not match the scene");
    cal_.validate();

    const auto& grid = eff.responses[0].wavelengths;
    const HemoglobinExtinction e = ext.hbo2.wavelengths == grid
                                       ? ext
                                       : HemoglobinExtinction{resample(ext.hbo2, grid), resample(ext.hb, grid)};
    const SpectralCurve white_target{grid, std::vector<double>(grid.size(), 1.0)};
    const Spectrum ws = forward_camera_signal(white_target, eff);

    // Per segment: normalized reflectance per band tabulated over the vhb factor.
    for (const auto& seg : script_.schedule) {
      std::vector<Spectrum> lut(kLutSize);
      for (std::size_t n = 0; n < kLutSize; ++n) {
        TissueState st = seg.state;
        st.vhb *= lut_factor(n);
        const Spectrum sig = forward_camera_signal(tissue_reflectance(st, e), eff);
        for (std::size_t k = 0; k < kBandCount; ++k) lut[n][k] = sig[k] / ws[k];
      }
      luts_.push_back(std::move(lut));
    }
  }

  const SceneScript& script() const noexcept { return script_; }
  const CalibrationPair& calibration() const noexcept { return cal_; }
  const MosaicLayout& layout() const noexcept { return layout_; }
  std::size_t size() const { return frame_count(script_); }

  Phase label(std::size_t index) const { return segment_at(script_, frame_time(script_, index)).label; }
  Offset motion(std::size_t index) const { return motion_offset(script_, frame_time(script_, index)); }

  // Noise-free normalized reflectance (I - D) / (W - D) at a cube pixel.
  Spectrum expected_normalized(std::size_t index, std::size_t i, std::size_t j) const {
    const double t = frame_time(script_, index);
    const Offset m = motion_offset(script_, t);
    return reflectance_at(segment_index(t), static_cast<double>(j) - m.dx,
                          static_cast<double>(i) - m.dy);
  }

  // Counts before noise and quantization.
  BandCube<double> render_signal(std::size_t index) const {
    const double t = frame_time(script_, index);
    const Offset m = motion_offset(script_, t);
    const std::size_t seg = segment_index(t);
    const double drift =
        1.0 + script_.drift_amplitude * std::sin(2.0 * std::numbers::pi * t / script_.drift_period_s);
    BandCube<double> cube(script_.cube_rows(), script_.cube_cols(), 0.0, t);
    for (std::size_t i = 0; i < cube.rows(); ++i) {
      for (std::size_t j = 0; j < cube.cols(); ++j) {
        const Spectrum rbar = reflectance_at(seg, static_cast<double>(j) - m.dx, static_cast<double>(i) - m.dy);
        auto px = cube.pixel(i, j);
        const auto w = cal_.white.pixel(i, j);
        const auto d = cal_.dark.pixel(i, j);
        for (std::size_t k = 0; k < kBandCount; ++k) px[k] = drift * rbar[k] * (w[k] - d[k]) + d[k];
      }
    }
    return cube;
  }

  RenderedFrame render(std::size_t index) const {
    if (index >= size()) throw ArgumentError("phantom: frame index out of range");
    BandCube<double> signal = render_signal(index);
    const double full = static_cast<double>((1u << script_.bit_depth) - 1u);
    RawCube counts(signal.rows(), signal.cols(), 0, signal.timestamp());
    auto in = signal.values();
    auto out = counts.values();
    const double sigma = script_.noise_sigma;
    const std::uint64_t base = static_cast<std::uint64_t>(index) * in.size();
    std::size_t over = 0;
    for (std::size_t n = 0; n < in.size(); ++n) {
      double v = in[n];
      if (sigma > 0.0) v += sigma * noise_.normal(base + n);
      v = std::nearbyint(v);
      if (v > full) {
        ++over;
        v = full;
      }
      out[n] = static_cast<std::uint16_t>(std::max(0.0, v));
    }
    RenderedFrame rf;
    rf.frame = remosaic(counts, layout_, script_.bit_depth);
    rf.frame.exposure_time_us = 10000.0;
    rf.label = label(index);
    rf.motion = motion(index);
    rf.overexposed = over;
    return rf;
  }

 private:
  static constexpr std::size_t kLutSize = 129;

  double lut_factor(std::size_t n) const {
    const double v = script_.vhb_variation;
    return 1.0 - v + 2.0 * v * static_cast<double>(n) / static_cast<double>(kLutSize - 1);
  }

  std::size_t segment_index(double t) const {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < script_.schedule.size(); ++i)
      if (script_.schedule[i].start_s <= t) idx = i;
    return idx;
  }

  Spectrum reflectance_at(std::size_t seg, double u, double v) const {
    const double tex = texture_(u, v);  // [-1, 1] -> LUT position
    const double pos = 0.5 * (tex + 1.0) * static_cast<double>(kLutSize - 1);
    const auto lo = std::min(static_cast<std::size_t>(pos), kLutSize - 2);
    const double f = pos - static_cast<double>(lo);
    const auto& a = luts_[seg][lo];
    const auto& b = luts_[seg][lo + 1];
    Spectrum out;
    for (std::size_t k = 0; k < kBandCount; ++k) out[k] = a[k] + f * (b[k] - a[k]);
    return out;
  }

  SceneScript script_;
  CalibrationPair cal_;
  MosaicLayout layout_;
  std::uint64_t seed_;
  TissueTexture texture_;
  CounterRng noise_;
  std::vector<std::vector<Spectrum>> luts_;
};

// Shared optical setup plus the before/during clamping scripts.
struct ClampingStudy {
  SceneScript before;
  SceneScript during;
  FilterBank effective;
  MosaicLayout layout;
  CalibrationPair calibration;
  std::uint64_t seed = 0;

  PhantomRenderer renderer(Phase phase) const {
    const SceneScript& s = phase == Phase::before ? before : during;
    return PhantomRenderer(s, effective, calibration, layout,
                           derive_seed(seed, phase == Phase::before ? "study.before" : "study.during"));
  }

  // Centered ROI in cube pixels.
  Rect default_roi() const {
    const int side = 32;
    return {static_cast<int>(before.cube_cols()) / 2 - side / 2,
            static_cast<int>(before.cube_rows()) / 2 - side / 2, side, side};
  }
};

inline SceneScript clamping_phase_script(Phase phase) {
  SceneScript s;
  s.duration_s = 45.0;
  s.fps = 26.7;
  PhaseSegment seg;
  seg.label = phase;
  seg.state = phase == Phase::before ? TissueState{0.9, 0.04, 20.0, 1.3}
                                     : TissueState{0.3, 0.02, 20.0, 1.3};
  s.schedule = {seg};
  s.motion_amplitude_px = 5.0;
  s.motion_period_s = 4.0;
  s.noise_sigma = 2.0;
  s.drift_amplitude = 0.05;
  s.drift_period_s = 9.0;
  return s;
}

// Two 45 s sequences before (sao2 0.9, vhb 0.04) and during (sao2 0.3,
// vhb 0.02) clamping, with motion, exposure drift and sensor noise.
inline ClampingStudy default_clamping_study(std::uint64_t seed = 2021) {
  ClampingStudy study;
  study.seed = seed;
  study.before = clamping_phase_script(Phase::before);
  study.during = clamping_phase_script(Phase::during);
  study.effective = effective_response(default_filter_bank(), default_optical_chain());
  study.calibration = make_phantom_calibration(study.before, study.effective, derive_seed(seed, "study.calibration"));
  return study;
}

}  // namespace msi

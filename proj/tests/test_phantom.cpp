#include <gtest/gtest.h>

#include <cmath>

#include "msi/calibration.hpp"
#include "msi/phantom.hpp"

using namespace msi;

namespace {

FilterBank default_effective() {
  return effective_response(default_filter_bank(), default_optical_chain());
}

SceneScript small_scene() {
  SceneScript s;
  s.width = 128;
  s.height = 96;
  s.duration_s = 1.0;
  s.fps = 10.0;
  return s;
}

double distance(const Spectrum& a, const Spectrum& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < kBandCount; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

}  // namespace

TEST(TissueReflectance, ZeroBloodIsWhite) {
  const auto ext = default_extinction();
  TissueState s;
  s.vhb = 1e-12;
  const auto r = tissue_reflectance(s, ext);
  for (double v : r.values) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(TissueReflectance, FullSaturationUsesOxyOnly) {
  const auto ext = default_extinction();
  TissueState s{1.0, 0.05, 25.0, 1.1};
  const auto r = tissue_reflectance(s, ext);
  // -ln R * mu_s' / eps_HbO2 is the same constant at every wavelength.
  std::vector<double> ratio;
  for (std::size_t i = 0; i < r.size(); i += 37) {
    const double musp = s.scatter_a * std::pow(r.wavelengths[i] / 500.0, -s.scatter_b);
    ratio.push_back(-std::log(r.values[i]) * musp / ext.hbo2.values[i]);
  }
  for (double v : ratio) EXPECT_NEAR(v / ratio.front(), 1.0, 1e-9);
}

TEST(TissueReflectance, InUnitIntervalAndMonotoneInBloodVolume) {
  const auto ext = default_extinction();
  TissueState lo{0.6, 0.02, 20.0, 1.3}, hi = lo;
  hi.vhb = 0.021;
  const auto a = tissue_reflectance(lo, ext), b = tissue_reflectance(hi, ext);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_GT(a.values[i], 0.0);
    EXPECT_LE(a.values[i], 1.0);
    EXPECT_LT(b.values[i], a.values[i]);
    EXPECT_LT(a.values[i] - b.values[i], 0.05);  // small step, small change
  }
}

TEST(TissueReflectance, MissingExtinctionIsConfigError) {
  EXPECT_THROW(tissue_reflectance(TissueState{}, HemoglobinExtinction{}), ConfigError);
}

TEST(TissueReflectance, ExtinctionShape) {
  const auto ext = default_extinction();
  auto at = [](const SpectralCurve& c, double nm) { return c.values[static_cast<std::size_t>(nm - 400.0)]; };
  // HbO2 double peak with a trough between; Hb single peak near 555 nm.
  EXPECT_GT(at(ext.hbo2, 542), at(ext.hbo2, 560));
  EXPECT_GT(at(ext.hbo2, 577), at(ext.hbo2, 560));
  EXPECT_GT(at(ext.hb, 555), at(ext.hb, 542));
  EXPECT_GT(at(ext.hb, 555), at(ext.hb, 577));
  EXPECT_GT(at(ext.hb, 600), 3.0 * at(ext.hbo2, 600));
}

// Forward model evaluated for both saturation endpoints: the band with the
// largest relative signal change lies in 550-610 nm.
TEST(TissueReflectance, OxygenationContrastPeaksBetween550And610) {
  const auto eff = default_effective();
  const auto ext = default_extinction();
  const Spectrum oxy = forward_camera_signal(tissue_reflectance({1.0, 0.04, 20.0, 1.3}, ext), eff);
  const Spectrum deoxy = forward_camera_signal(tissue_reflectance({0.0, 0.04, 20.0, 1.3}, ext), eff);
  std::size_t best = 0;
  double best_rel = 0.0;
  for (std::size_t k = 0; k < kBandCount; ++k) {
    const double rel = std::abs(oxy[k] - deoxy[k]) / std::max(oxy[k], deoxy[k]);
    EXPECT_GT(rel, 0.0);
    if (rel > best_rel) {
      best_rel = rel;
      best = k;
    }
  }
  const double center = eff.band_centers[best];
  EXPECT_GE(center, 550.0);
  EXPECT_LE(center, 610.0);
}

TEST(Scene, FrameCountFollowsDurationAndRate) {
  SceneScript s;
  s.duration_s = 45.0;
  s.fps = 26.7;
  EXPECT_EQ(frame_count(s), 1202u);  // floor(1201.5) + 1
  s.fps = 25.0;
  EXPECT_EQ(frame_count(s), 1126u);
  s.fps = 26.0;
  EXPECT_EQ(frame_count(s), 1171u);
}

TEST(Scene, ValidationErrors) {
  SceneScript s = small_scene();
  s.fps = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_scene();
  s.schedule = {PhaseSegment{0.5, {}, Phase::before}, PhaseSegment{0.2, {}, Phase::during}};
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_scene();
  s.width = 130;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Render, DegenerateScriptGivesIdenticalFrames) {
  const auto eff = default_effective();
  const SceneScript s = small_scene();
  const auto cal = make_phantom_calibration(s, eff, 3);
  const PhantomRenderer r(s, eff, cal, MosaicLayout{}, 7);
  ASSERT_EQ(r.size(), 11u);
  const auto first = r.render(0).frame.pixels;
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_EQ(r.render(i).frame.pixels, first);
}

TEST(Render, SameSeedIsByteIdentical) {
  const auto eff = default_effective();
  SceneScript s = small_scene();
  s.noise_sigma = 3.0;
  s.motion_amplitude_px = 4.0;
  s.drift_amplitude = 0.1;
  const auto cal = make_phantom_calibration(s, eff, 3);
  const PhantomRenderer a(s, eff, cal, MosaicLayout{}, 99), b(s, eff, cal, MosaicLayout{}, 99),
      c(s, eff, cal, MosaicLayout{}, 100);
  for (std::size_t i : {0u, 4u, 10u}) {
    EXPECT_EQ(a.render(i).frame.pixels, b.render(i).frame.pixels);
    EXPECT_EQ(a.render(i).frame.timestamp, b.render(i).frame.timestamp);
    EXPECT_NE(a.render(i).frame.pixels, c.render(i).frame.pixels);
  }
}

TEST(Render, NoiseFreeRoundTripWithinOneCount) {
  const auto eff = default_effective();
  SceneScript s = small_scene();
  const auto cal = make_phantom_calibration(s, eff, 5);
  const PhantomRenderer r(s, eff, cal, MosaicLayout{}, 1);
  const auto rendered = r.render(3);
  const RawCube cube = demosaic(rendered.frame, r.layout());
  const auto expected = r.render_signal(3);
  for (std::size_t n = 0; n < cube.size(); ++n)
    EXPECT_LE(std::abs(cube.values()[n] - expected.values()[n]), 1.0);

  // White/dark normalization recovers the forward-model reflectance to one count over W - D.
  const auto norm = normalize_white_dark(cube, r.calibration());
  for (std::size_t i = 0; i < cube.rows(); i += 5)
    for (std::size_t j = 0; j < cube.cols(); j += 5) {
      const Spectrum truth = r.expected_normalized(3, i, j);
      for (std::size_t k = 0; k < kBandCount; ++k) {
        const double span = cal.white(i, j, k) - cal.dark(i, j, k);
        EXPECT_LE(std::abs(norm.data(i, j, k) - truth[k]) * span, 1.0);
      }
    }
}

TEST(Render, RespectsLayoutAndBitDepth) {
  const auto eff = default_effective();
  SceneScript s = small_scene();
  s.bit_depth = 12;
  MosaicLayout::Grid g{};
  for (int i = 0; i < 16; ++i) g[i / 4][i % 4] = 15 - i;
  const MosaicLayout layout(g);
  const auto cal = make_phantom_calibration(s, eff, 5);
  const PhantomRenderer r(s, eff, cal, layout, 1);
  const auto frame = r.render(0).frame;
  EXPECT_NO_THROW(frame.validate());
  EXPECT_EQ(frame.bit_depth, 12u);
  const RawCube cube = demosaic(frame, layout);
  const auto expected = r.render_signal(0);
  for (std::size_t n = 0; n < cube.size(); ++n)
    EXPECT_LE(std::abs(cube.values()[n] - expected.values()[n]), 1.0);
}

TEST(Render, SyntheticOverexposureReported) {
  const auto eff = default_effective();
  SceneScript s = small_scene();
  s.schedule[0].state.vhb = 0.001;
  s.drift_amplitude = 0.6;
  s.drift_period_s = 4.0;
  const auto cal = make_phantom_calibration(s, eff, 5);
  const PhantomRenderer r(s, eff, cal, MosaicLayout{}, 1);
  const auto frame = r.render(10);  // t = 1 s, drift factor 1.6
  EXPECT_GT(frame.overexposed, 0u);
  const RawCube cube = demosaic(frame.frame, r.layout());
  const auto report = check_exposure(cube, Rect{0, 0, 32, 24}, ExposureThresholds::for_bit_depth(10));
  EXPECT_FALSE(report.pass);
  EXPECT_GT(report.total_over(), 0u);
}

TEST(Render, MotionTranslatesContent) {
  const auto eff = default_effective();
  SceneScript s = small_scene();
  s.motion_amplitude_px = 3.0;
  s.motion_period_s = 4.0;  // frame 10: t = 1 s, dx = 3, dy = 0
  const auto cal = make_phantom_calibration(s, eff, 5);
  const PhantomRenderer r(s, eff, cal, MosaicLayout{}, 1);
  const Offset m = r.motion(10);
  EXPECT_NEAR(m.dx, 3.0, 1e-12);
  EXPECT_NEAR(m.dy, 0.0, 1e-12);
  for (std::size_t i = 2; i < 20; i += 3)
    for (std::size_t j = 2; j < 20; j += 3) {
      const Spectrum moved = r.expected_normalized(10, i, j + 3);
      const Spectrum still = r.expected_normalized(0, i, j);
      for (std::size_t k = 0; k < kBandCount; ++k) EXPECT_NEAR(moved[k], still[k], 1e-12);
    }
}

TEST(ClampingStudy, LengthsLabelsAndSeparation) {
  const ClampingStudy study = default_clamping_study();
  const PhantomRenderer before = study.renderer(Phase::before);
  const PhantomRenderer during = study.renderer(Phase::during);
  EXPECT_EQ(before.size(), 1202u);
  EXPECT_EQ(during.size(), 1202u);
  for (std::size_t i = 0; i < before.size(); i += 50) {
    EXPECT_EQ(before.label(i), Phase::before);
    EXPECT_EQ(during.label(i), Phase::during);
  }

  // Calibrated, ROI-median, l1-normalized spectra on ground-truth-tracked ROIs.
  const Rect roi0 = study.default_roi();
  auto spectra = [&](const PhantomRenderer& r) {
    std::vector<Spectrum> out;
    for (std::size_t i = 0; i < r.size(); i += 40) {
      const auto f = r.render(i);
      const auto norm = normalize_white_dark(demosaic(f.frame, r.layout()), r.calibration());
      Rect roi = roi0;
      roi.x += static_cast<int>(std::lround(f.motion.dx));
      roi.y += static_cast<int>(std::lround(f.motion.dy));
      out.push_back(l1_normalize(median_spectrum(norm, roi)).bands);
    }
    return out;
  };
  const auto a = spectra(before), b = spectra(during);
  double within = 0.0, between = 0.0;
  std::size_t nw = 0, nb = 0;
  for (const auto* set : {&a, &b})
    for (std::size_t i = 0; i < set->size(); ++i)
      for (std::size_t j = i + 1; j < set->size(); ++j, ++nw) within += distance((*set)[i], (*set)[j]);
  for (const auto& x : a)
    for (const auto& y : b) {
      between += distance(x, y);
      ++nb;
    }
  within /= static_cast<double>(nw);
  between /= static_cast<double>(nb);
  EXPECT_GT(between, 3.0 * within) << "between " << between << " within " << within;
}

#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "msi/io.hpp"

using namespace msi;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("msi_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

RawMosaicFrame random_frame(std::size_t w, std::size_t h, unsigned depth, std::mt19937_64& rng, double t) {
  RawMosaicFrame f(w, h, depth);
  std::uniform_int_distribution<int> d(0, (1 << depth) - 1);
  for (auto& p : f.pixels) p = static_cast<std::uint16_t>(d(rng));
  f.timestamp = t;
  return f;
}

std::vector<unsigned char> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

using Io = TempDir;

TEST_F(Io, MsrawHeaderLayout) {
  std::mt19937_64 rng(1);
  const auto path = dir_ / "a.msraw";
  write_msraw(path, {random_frame(8, 4, 12, rng, 0.25)}, 26.7);
  const auto b = bytes_of(path);
  ASSERT_EQ(b.size(), 32u + 8u + 8u * 4u * 2u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "MSR1");
  auto u32 = [&](std::size_t off) { return b[off] | b[off + 1] << 8 | b[off + 2] << 16 | b[off + 3] << 24; };
  EXPECT_EQ(u32(4), 8u);
  EXPECT_EQ(u32(8), 4u);
  EXPECT_EQ(u32(12), 12u);
  EXPECT_EQ(u32(16), 1u);
  float fps;
  std::memcpy(&fps, b.data() + 20, 4);
  EXPECT_FLOAT_EQ(fps, 26.7f);
  for (std::size_t i = 24; i < 32; ++i) EXPECT_EQ(b[i], 0);
  double ts;
  std::memcpy(&ts, b.data() + 32, 8);
  EXPECT_EQ(ts, 0.25);
}

TEST_F(Io, MsrawRoundTrip) {
  std::mt19937_64 rng(2);
  std::vector<RawMosaicFrame> frames;
  for (int i = 0; i < 5; ++i) frames.push_back(random_frame(64, 32, 10, rng, i / 26.7));
  const auto path = dir_ / "seq.msraw";
  write_msraw(path, frames, 26.7);
  MsrawReader r(path);
  EXPECT_EQ(r.size(), 5u);
  EXPECT_EQ(r.header().width, 64u);
  RawMosaicFrame f;
  for (std::size_t i : {3u, 0u, 4u, 1u, 2u}) {
    r.read(i, f);
    EXPECT_EQ(f.pixels, frames[i].pixels);
    EXPECT_EQ(f.timestamp, frames[i].timestamp);
  }
  EXPECT_THROW(r.read(5), BoundsError);
}

TEST_F(Io, MsrawRejectsBadFiles) {
  std::mt19937_64 rng(3);
  const auto path = dir_ / "t.msraw";
  write_msraw(path, {random_frame(8, 8, 10, rng, 0.0), random_frame(8, 8, 10, rng, 0.1)}, 10.0);
  fs::resize_file(path, fs::file_size(path) - 3);
  EXPECT_THROW(MsrawReader{path}, DataError);

  const auto junk = dir_ / "junk.msraw";
  std::ofstream(junk) << "not a sequence file at all, definitely longer than 32 bytes";
  EXPECT_THROW(MsrawReader{junk}, DataError);
  EXPECT_THROW(MsrawReader{dir_ / "missing.msraw"}, DataError);

  // Value beyond the declared bit depth.
  auto f = random_frame(8, 8, 12, rng, 0.0);
  f.pixels[5] = 4000;
  const auto deep = dir_ / "deep.msraw";
  write_msraw(deep, {f}, 1.0);
  auto b = bytes_of(deep);
  b[12] = 10;  // claim 10-bit
  std::ofstream(deep, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  MsrawReader r(deep);
  EXPECT_THROW(r.read(0), DataError);
}

TEST_F(Io, LayoutJson) {
  MosaicLayout::Grid g{};
  for (int i = 0; i < 16; ++i) g[i / 4][i % 4] = (i * 5) % 16;
  const MosaicLayout layout(g);
  save_layout(dir_ / "layout.json", layout);
  EXPECT_EQ(load_layout(dir_ / "layout.json"), layout);

  std::ofstream(dir_ / "bad.json") << R"({"band_of_cell": [[0,1,2,3],[4,5,6,7],[8,9,10,11],[12,13,14,14]]})";
  EXPECT_THROW(load_layout(dir_ / "bad.json"), ConfigError);
  std::ofstream(dir_ / "short.json") << R"({"band_of_cell": [[0,1,2,3]]})";
  EXPECT_THROW(load_layout(dir_ / "short.json"), ConfigError);
  std::ofstream(dir_ / "broken.json") << "{";
  EXPECT_THROW(load_layout(dir_ / "broken.json"), ConfigError);
}

TEST_F(Io, CalibrationManifestRoundTrip) {
  SceneScript s;
  s.width = 64;
  s.height = 32;
  const auto eff = effective_response(default_filter_bank(), default_optical_chain());
  const auto cal = make_phantom_calibration(s, eff, 11);
  MosaicLayout::Grid g{};
  for (int i = 0; i < 16; ++i) g[i / 4][i % 4] = 15 - i;
  const MosaicLayout layout(g);
  save_calibration(dir_ / "calib.json", cal, layout);
  const auto back = load_calibration(dir_ / "calib.json", layout);
  EXPECT_EQ(back.white, cal.white);
  EXPECT_EQ(back.dark, cal.dark);
  EXPECT_EQ(back.target_note, cal.target_note);

  fs::remove(dir_ / "calib_dark.msraw");
  EXPECT_THROW(load_calibration(dir_ / "calib.json", layout), ConfigError);
  EXPECT_THROW(load_calibration(dir_ / "nope.json", layout), ConfigError);
}

TEST_F(Io, CurveCsvAndFilterBank) {
  const auto bank = default_filter_bank();
  save_filter_bank(dir_ / "bank.json", bank);
  const auto back = load_filter_bank(dir_ / "bank.json");
  EXPECT_EQ(back.band_centers, bank.band_centers);
  for (std::size_t k = 0; k < kBandCount; ++k) EXPECT_EQ(back.responses[k], bank.responses[k]);

  std::ofstream(dir_ / "c.csv") << "wavelength_nm,value\n500,1\n400,2\n";
  EXPECT_THROW(read_curve(dir_ / "c.csv"), DataError);
  std::ofstream(dir_ / "d.csv") << "nm,value\n500,1\n";
  EXPECT_THROW(read_curve(dir_ / "d.csv"), DataError);
  std::ofstream(dir_ / "e.csv") << "wavelength_nm,value\n500,abc\n";
  EXPECT_THROW(read_curve(dir_ / "e.csv"), DataError);
}

TEST_F(Io, ExtinctionFixturesMatchBuiltin) {
  const auto& k = ExtinctionKnots::builtin();
  write_curve(dir_ / "hbo2.csv", {k.wavelength_nm, k.hbo2});
  write_curve(dir_ / "hb.csv", {k.wavelength_nm, k.hb});
  const auto loaded = load_extinction(dir_ / "hbo2.csv", dir_ / "hb.csv");
  const auto builtin = default_extinction();
  EXPECT_EQ(loaded.hbo2, builtin.hbo2);
  EXPECT_EQ(loaded.hb, builtin.hb);
}

TEST_F(Io, ShippedDataFilesLoad) {
  const fs::path data = MSI_DATA_DIR;
  const auto ext = load_extinction(data / "extinction_hbo2.csv", data / "extinction_hb.csv");
  EXPECT_EQ(ext.hbo2, default_extinction().hbo2);
  EXPECT_EQ(load_layout(data / "layout_row_major.json"), MosaicLayout{});
  const SceneScript s = load_scene(data / "scene_default.json");
  EXPECT_EQ(frame_count(s), 1202u);
}

TEST_F(Io, SpectrumSeriesCsvIsExact) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SpectrumSeries series;
  for (int i = 0; i < 20; ++i) {
    SpectrumSample s;
    for (auto& v : s.bands) v = u(rng);
    s.bands = l1_normalize(s.bands).bands;
    s.timestamp = i / 26.7;
    s.phase = i < 10 ? Phase::before : Phase::during;
    series.push_back(s);
  }
  write_spectrum_series(dir_ / "s.csv", series);
  EXPECT_EQ(read_spectrum_series(dir_ / "s.csv"), series);
  std::ifstream in(dir_ / "s.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "timestamp,phase,b00,b01,b02,b03,b04,b05,b06,b07,b08,b09,b10,b11,b12,b13,b14,b15");
}

TEST_F(Io, LabelsCsv) {
  std::vector<FrameLabel> labels{{0, 0.0, Phase::before}, {1, 0.5, Phase::during}};
  write_labels(dir_ / "l.csv", labels);
  EXPECT_EQ(read_labels(dir_ / "l.csv"), labels);
  std::ofstream(dir_ / "m.csv") << "frame_index,time_s,label\n0,0,sideways\n";
  EXPECT_THROW(read_labels(dir_ / "m.csv"), DataError);
}

TEST_F(Io, SceneJson) {
  SceneScript s = clamping_phase_script(Phase::during);
  s.width = 256;
  s.noise_sigma = 1.5;
  const SceneScript back = scene_from_json(scene_to_json(s));
  EXPECT_EQ(back.width, 256u);
  EXPECT_EQ(back.noise_sigma, 1.5);
  ASSERT_EQ(back.schedule.size(), 1u);
  EXPECT_EQ(back.schedule[0].label, Phase::during);
  EXPECT_EQ(back.schedule[0].state.sao2, 0.3);

  EXPECT_THROW(scene_from_json(json{{"fps", -1.0}}), ConfigError);
  EXPECT_THROW(scene_from_json(json{{"fps", "fast"}}), ConfigError);
  EXPECT_THROW(scene_from_json(json::parse(R"({"schedule":[{"label":"after"}]})")), ConfigError);
}

TEST_F(Io, RenderSequenceMatchesRendererAndIsThreadIndependent) {
  SceneScript s;
  s.width = 64;
  s.height = 48;
  s.duration_s = 1.0;
  s.fps = 8.0;
  s.noise_sigma = 2.0;
  s.motion_amplitude_px = 2.0;
  const auto eff = effective_response(default_filter_bank(), default_optical_chain());
  const PhantomRenderer r(s, eff, make_phantom_calibration(s, eff, 1), MosaicLayout{}, 5);
  const auto one = render_sequence(r, dir_ / "a.msraw", dir_ / "a.csv", 1);
  const auto three = render_sequence(r, dir_ / "b.msraw", dir_ / "b.csv", 3);
  EXPECT_EQ(one.frames, 9u);
  EXPECT_EQ(three.frames, 9u);
  EXPECT_EQ(bytes_of(dir_ / "a.msraw"), bytes_of(dir_ / "b.msraw"));
  EXPECT_EQ(read_labels(dir_ / "a.csv"), read_labels(dir_ / "b.csv"));
  MsrawReader reader(dir_ / "a.msraw");
  EXPECT_EQ(reader.read(6).pixels, r.render(6).frame.pixels);
}

#include <gtest/gtest.h>

#include <random>

#include "msi/phantom.hpp"
#include "msi/pipeline.hpp"

using namespace msi;

namespace {

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("msi_pipe_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Small two-phase phantom written to disk; returns a config pointing at it.
  PipelineConfig make_input(SceneScript s, std::uint64_t seed = 3) {
    const auto eff = effective_response(default_filter_bank(), default_optical_chain());
    const auto cal = make_phantom_calibration(s, eff, seed);
    const PhantomRenderer r(s, eff, cal, MosaicLayout{}, seed + 1);
    render_sequence(r, dir_ / "seq.msraw", dir_ / "labels.csv", 1);
    save_calibration(dir_ / "calib.json", cal, MosaicLayout{});
    PipelineConfig cfg;
    cfg.input = dir_ / "seq.msraw";
    cfg.calibration = dir_ / "calib.json";
    cfg.labels = dir_ / "labels.csv";
    const int side = 24;
    cfg.roi0 = {static_cast<int>(s.cube_cols()) / 2 - side / 2, static_cast<int>(s.cube_rows()) / 2 - side / 2, side, side};
    cfg.threads = 2;
    return cfg;
  }

  static SceneScript small_scene() {
    SceneScript s;
    s.width = 384;
    s.height = 256;
    s.duration_s = 2.0;
    s.fps = 20.0;
    s.noise_sigma = 2.0;
    s.motion_amplitude_px = 3.0;
    s.motion_period_s = 1.5;
    s.drift_amplitude = 0.05;
    PhaseSegment during;
    during.label = Phase::during;
    during.start_s = 1.0;
    during.state = TissueState{0.3, 0.02, 20.0, 1.3};
    s.schedule.push_back(during);
    return s;
  }

  fs::path dir_;
};

}  // namespace

TEST(Queues, BoundedQueueKeepsFifoAndCapacity) {
  BoundedQueue<int> q(3);
  std::jthread producer([&] {
    for (int i = 0; i < 200; ++i) q.push(i);
    q.close();
  });
  int expected = 0;
  while (auto v = q.pop()) EXPECT_EQ(*v, expected++);
  EXPECT_EQ(expected, 200);
  EXPECT_LE(q.high_water(), 3u);
  EXPECT_FALSE(q.push(1));
}

TEST(Queues, OrderedBufferRestoresOrder) {
  OrderedBuffer<std::size_t> buf(4);
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (int w = 0; w < 3; ++w)
    workers.emplace_back([&, w] {
      std::mt19937 rng(static_cast<unsigned>(w));
      for (std::size_t i = next++; i < 300; i = next++) {
        std::this_thread::sleep_for(std::chrono::microseconds(rng() % 200));
        buf.put(i, i * 10);
      }
    });
  for (std::size_t i = 0; i < 300; ++i) {
    auto v = buf.take();
    ASSERT_TRUE(v);
    EXPECT_EQ(*v, i * 10);
  }
  EXPECT_LE(buf.high_water(), 4u);
  buf.abort();
  EXPECT_FALSE(buf.take());
}

TEST_F(PipelineTest, StreamingIsBitIdenticalToBatchForAnyWorkerCount) {
  PipelineConfig cfg = make_input(small_scene());
  const auto batch = run_batch(cfg);
  ASSERT_EQ(batch.series.size(), 41u);
  for (unsigned threads : {1u, 2u, 4u}) {
    cfg.threads = threads;
    const auto stream = run_pipeline(cfg);
    EXPECT_EQ(stream.series, batch.series) << threads << " workers";
    ASSERT_EQ(stream.track.records.size(), batch.track.records.size());
    for (std::size_t i = 0; i < batch.track.records.size(); ++i) {
      EXPECT_EQ(stream.track.records[i].roi.cx, batch.track.records[i].roi.cx);
      EXPECT_EQ(stream.track.records[i].flags, batch.track.records[i].flags);
    }
    EXPECT_LE(stream.max_in_flight, 2 * cfg.queue_capacity);
  }
  EXPECT_EQ(batch.series.front().phase, Phase::before);
  EXPECT_EQ(batch.series.back().phase, Phase::during);
}

TEST_F(PipelineTest, StagesRunInDocumentedOrder) {
  const SceneScript s = small_scene();
  const PipelineConfig cfg = make_input(s);
  const auto out = run_pipeline(cfg);

  // same chain spelled out by hand
  const auto cal = load_calibration(cfg.calibration, MosaicLayout{});
  MsrawReader in(cfg.input);
  std::vector<RgbImage> rgb;
  std::vector<NormalizedCube> cubes;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const NormalizedCube n = normalize_white_dark(demosaic(in.read(i), MosaicLayout{}), cal);
    rgb.push_back(reconstruct_rgb(n.data, rgb_weights(FilterBankSpec::defaults().centers)));
    cubes.push_back(n);
  }
  const auto track = track_sequence(rgb, Roi::from_rect(cfg.roi0));
  ASSERT_EQ(out.series.size(), cubes.size());
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    const auto expect = l1_normalize(median_spectrum(cubes[i], track.records[i].roi.rect())).bands;
    EXPECT_EQ(out.series[i].bands, expect) << "frame " << i;
    EXPECT_EQ(out.series[i].timestamp, frame_time(s, i));
  }
}

TEST_F(PipelineTest, MotionAndNoiseFreeSpectraAreIdentical) {
  SceneScript s;
  s.width = 256;
  s.height = 192;
  s.duration_s = 1.0;
  s.fps = 20.0;
  const auto out = run_pipeline(make_input(s));
  ASSERT_EQ(out.series.size(), 21u);
  for (const auto& smp : out.series)
    for (std::size_t k = 0; k < kBandCount; ++k) EXPECT_NEAR(smp.bands[k], out.series[0].bands[k], 1e-6);
  EXPECT_TRUE(out.track.quality.clean());
}

TEST_F(PipelineTest, MissingCalibrationFailsBeforeAnyOutput) {
  PipelineConfig cfg = make_input(small_scene());
  cfg.out_dir = dir_ / "out";
  fs::remove(dir_ / "calib_white.msraw");
  EXPECT_THROW(run_pipeline(cfg), ConfigError);
  EXPECT_FALSE(fs::exists(cfg.out_dir));
  cfg.calibration = dir_ / "none.json";
  EXPECT_THROW(run_pipeline(cfg), ConfigError);
  EXPECT_FALSE(fs::exists(cfg.out_dir));
}

TEST_F(PipelineTest, BadInputsReportTheRightErrorKind) {
  PipelineConfig cfg = make_input(small_scene());
  PipelineConfig missing = cfg;
  missing.input = dir_ / "nope.msraw";
  EXPECT_THROW(run_pipeline(missing), DataError);
  PipelineConfig roi = cfg;
  roi.roi0 = {90, 60, 24, 24};
  EXPECT_THROW(run_pipeline(roi), ConfigError);
  PipelineConfig q = cfg;
  q.queue_capacity = 1;
  EXPECT_THROW(run_pipeline(q), ConfigError);
  PipelineConfig fps = cfg;
  fps.fps_target = 0.0;
  EXPECT_THROW(run_pipeline(fps), ConfigError);

  // calibration for a different frame size
  SceneScript other = small_scene();
  other.width = 256;
  const auto eff = effective_response(default_filter_bank(), default_optical_chain());
  save_calibration(dir_ / "other.json", make_phantom_calibration(other, eff, 1), MosaicLayout{});
  PipelineConfig size = cfg;
  size.calibration = dir_ / "other.json";
  EXPECT_THROW(run_pipeline(size), ConfigError);
}

TEST_F(PipelineTest, OutputsAreWritten) {
  PipelineConfig cfg = make_input(small_scene());
  cfg.out_dir = dir_ / "out";
  const auto r = run_pipeline(cfg);
  EXPECT_EQ(read_spectrum_series(cfg.out_dir / "spectra.csv"), r.series);
  const auto rows = detail::read_csv(cfg.out_dir / "track.csv", {"frame_index", "cx", "cy", "w", "h", "confidence", "flags"});
  EXPECT_EQ(rows.size(), r.series.size());
  const json q = read_json(cfg.out_dir / "quality.json");
  EXPECT_EQ(q.at("frames").get<std::size_t>(), r.series.size());
  EXPECT_TRUE(q.contains("jumps"));
}

TEST_F(PipelineTest, BenchReportsSaneNumbers) {
  PipelineConfig cfg = make_input(small_scene());
  const auto r = bench(cfg, {0.5, 0.1});
  EXPECT_GT(r.throughput_fps, 0.0);
  EXPECT_GT(r.frames, 0u);
  EXPECT_GE(r.duration_s, 0.5);
  EXPECT_EQ(r.dropped_frames, 0u);
  EXPECT_GT(r.peak_memory_mb, 0.0);
  ASSERT_EQ(r.stages.size(), static_cast<std::size_t>(kStageCount));
  for (const auto& [name, l] : r.stages) {
    EXPECT_GE(l.mean_ms, 0.0) << name;
    EXPECT_GE(l.p95_ms, 0.0) << name;
  }
  const json j = bench_to_json(r);
  EXPECT_TRUE(j.contains("note"));
  EXPECT_EQ(j.at("stages").size(), static_cast<std::size_t>(kStageCount));
  EXPECT_NE(bench_to_text(r).find("throughput"), std::string::npos);
}

TEST_F(PipelineTest, TwoWorkersAreNotSlowerThanOne) {
  if (std::thread::hardware_concurrency() < 2) GTEST_SKIP() << "single hardware thread";
  PipelineConfig cfg = make_input(small_scene());
  cfg.threads = 1;
  const auto one = bench(cfg, {2.0, 0.5});
  cfg.threads = 2;
  const auto two = bench(cfg, {2.0, 0.5});
  EXPECT_GE(two.throughput_fps, 0.9 * one.throughput_fps);
}

TEST_F(PipelineTest, AnalyzeWritesArtifactsAndIdenticalSeriesDoNotSeparate) {
  PipelineConfig cfg = make_input(small_scene());
  const auto r = run_pipeline(cfg);
  SpectrumSeries before, during;
  for (const auto& s : r.series) (s.phase == Phase::before ? before : during).push_back(s);
  SearchConfig sc;
  sc.n_trials = 3;
  sc.seed = 1;
  sc.n_epochs = 100;
  const auto a = analyze(before, during, sc, dir_ / "analysis");
  for (const char* f : {"trials.csv", "embedding.csv", "embedding.png", "separation.json"})
    EXPECT_TRUE(fs::exists(dir_ / "analysis" / f)) << f;
  EXPECT_EQ(a.search.trials.size(), 3u);
  EXPECT_EQ(a.model.size(), r.series.size());
  const json sep = read_json(dir_ / "analysis" / "separation.json");
  EXPECT_NE(sep.at("score_interpretation").get<std::string>().find("fidelity"), std::string::npos);

  const auto same = analyze(before, before, sc);
  EXPECT_NEAR(same.separation.silhouette, 0.0, 0.1);
  EXPECT_THROW(analyze({}, during, sc), ArgumentError);
}

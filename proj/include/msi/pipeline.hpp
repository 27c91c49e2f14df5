#pragma once

// Streaming per-frame path: read -> demosaic -> white/dark -> RGB ->
// track -> exposure -> median -> l1. Reader, prep workers and the
// sequential tracker stage are connected by bounded queues; output order
// is restored before the tracker. A batch runner executes the same stages
// pass by pass as the reference.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "msi/calibration.hpp"
#include "msi/embedding.hpp"
#include "msi/error.hpp"
#include "msi/io.hpp"
#include "msi/mosaic.hpp"
#include "msi/optics.hpp"
#include "msi/tracker.hpp"

namespace msi {

struct PipelineConfig {
  fs::path input;        // .msraw
  fs::path calibration;  // manifest json
  fs::path layout;       // empty: row-major default
  fs::path labels;       // optional frame label csv
  fs::path filter_bank;  // optional; band centers drive the RGB weights
  fs::path out_dir;      // empty: nothing written
  Phase phase = Phase::before;  // used when no labels are given
  Rect roi0;                    // cube pixels
  TrackerConfig tracker;
  double fps_target = 25.0;
  std::size_t queue_capacity = 8;
  unsigned threads = 0;  // prep workers, 0: hardware concurrency
  std::uint64_t seed = 2021;

  void validate() const {
    if (!(fps_target > 0.0)) throw ConfigError("pipeline: fps target must be positive");
    if (queue_capacity < 2) throw ConfigError("pipeline: queue capacity must be at least 2");
    if (input.empty()) throw ConfigError("pipeline: no input sequence");
    if (calibration.empty()) throw ConfigError("pipeline: no calibration manifest");
    if (roi0.empty()) throw ConfigError("pipeline: empty initial roi");
    tracker.validate();
  }

  unsigned worker_count() const { return threads ? threads : std::max(1u, std::thread::hardware_concurrency()); }
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"read", "demosaic", "normalize", "rgb", "track", "exposure", "median", "l1"};
  return names;
}

enum Stage : std::size_t { kRead, kDemosaic, kNormalize, kRgb, kTrack, kExposure, kMedian, kL1, kStageCount };

using StageTimes = std::array<double, kStageCount>;  // ms

// Everything a run needs besides the frames, loaded and checked up front.
struct PipelineContext {
  MosaicLayout layout;
  CalibrationPair calibration;
  RgbWeights rgb;
  std::vector<FrameLabel> labels;
  ExposureThresholds exposure;
  MsrawHeader header;
  std::size_t frames = 0;
};

inline PipelineContext load_context(const PipelineConfig& cfg) {
  cfg.validate();
  PipelineContext ctx;
  ctx.layout = cfg.layout.empty() ? MosaicLayout{} : load_layout(cfg.layout);
  if (!fs::exists(cfg.calibration)) throw ConfigError("pipeline: calibration manifest not found: " + cfg.calibration.string());
  ctx.calibration = load_calibration(cfg.calibration, ctx.layout);
  ctx.calibration.validate();
  const auto centers = cfg.filter_bank.empty() ? FilterBankSpec::defaults().centers : load_filter_bank(cfg.filter_bank).band_centers;
  ctx.rgb = rgb_weights(centers);
  if (!fs::exists(cfg.input)) throw DataError("pipeline: input sequence not found: " + cfg.input.string());
  const MsrawReader reader(cfg.input);
  ctx.header = reader.header();
  ctx.frames = reader.size();
  if (ctx.frames == 0) throw DataError("pipeline: input sequence has no frames");
  if (ctx.header.width / kMosaicPeriod != ctx.calibration.white.cols() ||
      ctx.header.height / kMosaicPeriod != ctx.calibration.white.rows())
    throw ConfigError("pipeline: calibration size does not match the input frames");
  if (!cfg.roi0.inside(ctx.calibration.white.cols(), ctx.calibration.white.rows()))
    throw ConfigError("pipeline: initial roi outside the frame");
  if (!cfg.labels.empty()) {
    ctx.labels = read_labels(cfg.labels);
    if (ctx.labels.size() != ctx.frames) throw DataError("pipeline: label count differs from frame count");
  }
  ctx.exposure = ExposureThresholds::for_bit_depth(ctx.header.bit_depth);
  return ctx;
}

// Stateless part of the per-frame path.
struct PreparedFrame {
  std::size_t index = 0;
  RawCube raw;
  NormalizedCube normalized;
  RgbImage rgb;
  StageTimes times{};
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point& t) {
  const auto now = Clock::now();
  const double ms = std::chrono::duration<double, std::milli>(now - t).count();
  t = now;
  return ms;
}

[[noreturn]] inline void rethrow_for_frame(std::size_t index) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError("frame " + std::to_string(index) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError("frame " + std::to_string(index) + ": " + e.what());
  }
}

}  // namespace detail

inline PreparedFrame prepare_frame(std::size_t index, const RawMosaicFrame& frame, const PipelineContext& ctx) {
  PreparedFrame p;
  p.index = index;
  try {
    auto t = detail::Clock::now();
    p.raw = demosaic(frame, ctx.layout);
    p.times[kDemosaic] = detail::ms_since(t);
    p.normalized = normalize_white_dark(p.raw, ctx.calibration);
    p.times[kNormalize] = detail::ms_since(t);
    p.rgb = reconstruct_rgb(p.normalized.data, ctx.rgb);
    p.times[kRgb] = detail::ms_since(t);
  } catch (...) {
    detail::rethrow_for_frame(index);
  }
  return p;
}

// Sequential tail: tracker, exposure check on the tracked roi, median and
// l1 normalization.
class SpectrumStage {
 public:
  SpectrumStage(const PipelineConfig& cfg, const PipelineContext& ctx, bool retain_records)
      : cfg_(cfg), ctx_(ctx), tracker_(cfg.tracker, retain_records) {}

  SpectrumSample push(PreparedFrame& p) {
    try {
      auto t = detail::Clock::now();
      double exposure_ms = 0.0;
      const TrackRecord& rec = tracker_.push(p.rgb, Roi::from_rect(cfg_.roi0), [&](std::size_t, const Rect& r) {
        auto e = detail::Clock::now();
        const bool pass = check_exposure(p.raw, r, ctx_.exposure).pass;
        exposure_ms = detail::ms_since(e);
        return pass;
      });
      const double total = detail::ms_since(t);
      p.times[kTrack] = total - exposure_ms;
      p.times[kExposure] = exposure_ms;
      const Rect roi = rec.roi.rect();
      const Spectrum med = median_spectrum(p.normalized, roi);
      p.times[kMedian] = detail::ms_since(t);
      SpectrumSample s;
      s.bands = l1_normalize(med).bands;
      s.timestamp = p.raw.timestamp();
      s.phase = ctx_.labels.empty() ? cfg_.phase : ctx_.labels[p.index % ctx_.labels.size()].label;
      p.times[kL1] = detail::ms_since(t);
      return s;
    } catch (...) {
      detail::rethrow_for_frame(p.index);
    }
  }

  const TrackResult& track() const { return tracker_.result(); }

 private:
  const PipelineConfig& cfg_;
  const PipelineContext& ctx_;
  SequenceTracker tracker_;
};

// ------------------------------------------------------------ queues

// FIFO with capacity; push blocks while full.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity < 1) throw ArgumentError("queue: capacity must be positive");
  }

  bool push(T item) {
    std::unique_lock lock(m_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    not_empty_.notify_one();
    return true;
  }

  // Empty optional once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(m_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(m_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  std::size_t high_water() const {
    std::lock_guard lock(m_);
    return high_water_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex m_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
  std::size_t high_water_ = 0;
};

// Reorders items by sequence number. put blocks while the index is more
// than `capacity` ahead of the next one to be taken.
template <typename T>
class OrderedBuffer {
 public:
  explicit OrderedBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity < 1) throw ArgumentError("ordered buffer: capacity must be positive");
  }

  bool put(std::size_t index, T item) {
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return aborted_ || index < next_ + capacity_; });
    if (aborted_) return false;
    items_.emplace(index, std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    cv_.notify_all();
    return true;
  }

  // Waits for item `next`; empty optional on abort.
  std::optional<T> take() {
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return aborted_ || items_.count(next_) > 0; });
    if (aborted_) return std::nullopt;
    auto node = items_.extract(next_);
    ++next_;
    cv_.notify_all();
    return std::move(node.mapped());
  }

  void abort() {
    std::lock_guard lock(m_);
    aborted_ = true;
    cv_.notify_all();
  }

  std::size_t high_water() const {
    std::lock_guard lock(m_);
    return high_water_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex m_;
  std::condition_variable cv_;
  std::map<std::size_t, T> items_;
  std::size_t next_ = 0;
  bool aborted_ = false;
  std::size_t high_water_ = 0;
};

// ------------------------------------------------------------ streaming

struct FrameSlot {
  std::size_t index = 0;
  RawMosaicFrame frame;
  double read_ms = 0.0;
};

// Receives each sample with its stage times; return false to stop early.
using SampleSink = std::function<bool(std::size_t, const SpectrumSample&, const StageTimes&)>;

struct StreamStats {
  std::size_t frames = 0;
  std::size_t max_in_flight = 0;
  double wall_s = 0.0;
};

// Frame i of the run reads file frame i % n, so a short file can feed a
// long run. `limit` 0 means one pass.
inline StreamStats stream_frames(const PipelineConfig& cfg, const PipelineContext& ctx, SpectrumStage& tail,
                                 const SampleSink& sink, std::size_t limit = 0) {
  const std::size_t total = limit ? limit : ctx.frames;
  const std::size_t cap = cfg.queue_capacity;
  BoundedQueue<FrameSlot> raw(cap);
  OrderedBuffer<PreparedFrame> ready(cap);
  std::atomic<bool> stop{false};
  std::exception_ptr error;
  std::mutex error_m;
  auto fail = [&](std::exception_ptr e) {
    {
      std::lock_guard lock(error_m);
      if (!error) error = e;
    }
    stop = true;
    raw.close();
    ready.abort();
  };

  const auto start = detail::Clock::now();
  std::jthread reader([&] {
    try {
      MsrawReader in(cfg.input);
      for (std::size_t i = 0; i < total && !stop; ++i) {
        FrameSlot slot;
        slot.index = i;
        auto t = detail::Clock::now();
        in.read(i % ctx.frames, slot.frame);
        slot.read_ms = detail::ms_since(t);
        if (!raw.push(std::move(slot))) break;
      }
    } catch (...) {
      fail(std::current_exception());
    }
    raw.close();
  });
  std::vector<std::jthread> workers;
  for (unsigned w = 0; w < cfg.worker_count(); ++w)
    workers.emplace_back([&] {
      try {
        while (auto slot = raw.pop()) {
          PreparedFrame p = prepare_frame(slot->index, slot->frame, ctx);
          p.times[kRead] = slot->read_ms;
          if (!ready.put(slot->index, std::move(p))) break;
        }
      } catch (...) {
        fail(std::current_exception());
      }
    });

  StreamStats stats;
  try {
    for (std::size_t i = 0; i < total; ++i) {
      auto p = ready.take();
      if (!p) break;
      const SpectrumSample s = tail.push(*p);
      ++stats.frames;
      if (sink && !sink(i, s, p->times)) break;
    }
  } catch (...) {
    fail(std::current_exception());
  }
  stop = true;
  raw.close();
  ready.abort();
  reader.join();
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
  stats.max_in_flight = raw.high_water() + ready.high_water();
  stats.wall_s = std::chrono::duration<double>(detail::Clock::now() - start).count();
  return stats;
}

struct PipelineResult {
  SpectrumSeries series;
  TrackResult track;
  std::size_t frames = 0;
  std::size_t max_in_flight = 0;
  double wall_s = 0.0;
};

inline json quality_to_json(const QualityReport& q, std::size_t frames) {
  json spans = json::array();
  for (const auto& [a, b] : q.low_confidence_spans) spans.push_back({a, b});
  return {{"frames", frames},
          {"jumps", q.jumps},
          {"low_confidence_spans", spans},
          {"exposure_failures", q.exposure_failures},
          {"clean", q.clean()}};
}

inline void write_pipeline_outputs(const fs::path& dir, const PipelineResult& r) {
  fs::create_directories(dir);
  write_spectrum_series(dir / "spectra.csv", r.series);
  write_track_csv(dir / "track.csv", r.track.records);
  write_json(dir / "quality.json", quality_to_json(r.track.quality, r.frames));
}

// Everything is loaded and checked before any output is written.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  const PipelineContext ctx = load_context(cfg);
  SpectrumStage tail(cfg, ctx, true);
  PipelineResult r;
  r.series.reserve(ctx.frames);
  const auto stats = stream_frames(cfg, ctx, tail, [&](std::size_t, const SpectrumSample& s, const StageTimes&) {
    r.series.push_back(s);
    return true;
  });
  r.track = tail.track();
  r.frames = stats.frames;
  r.max_in_flight = stats.max_in_flight;
  r.wall_s = stats.wall_s;
  if (!cfg.out_dir.empty()) write_pipeline_outputs(cfg.out_dir, r);
  return r;
}

// Reference execution, one stage over the whole sequence at a time: RGB for
// every frame, then tracking over all of them, then spectra. Cubes are
// recomputed in the last pass instead of being held for the whole run.
inline PipelineResult run_batch(const PipelineConfig& cfg) {
  const PipelineContext ctx = load_context(cfg);
  MsrawReader in(cfg.input);
  std::vector<RgbImage> rgb(ctx.frames);
  RawMosaicFrame frame;
  for (std::size_t i = 0; i < ctx.frames; ++i) {
    in.read(i, frame);
    rgb[i] = prepare_frame(i, frame, ctx).rgb;
  }
  SequenceTracker tracker(cfg.tracker);
  for (std::size_t i = 0; i < ctx.frames; ++i) tracker.push(rgb[i], Roi::from_rect(cfg.roi0), {});
  rgb.clear();
  PipelineResult r;
  r.track = tracker.result();
  for (std::size_t i = 0; i < ctx.frames; ++i) {
    in.read(i, frame);
    const PreparedFrame p = prepare_frame(i, frame, ctx);
    const Rect roi = r.track.records[i].roi.rect();
    if (!check_exposure(p.raw, roi, ctx.exposure).pass) {
      r.track.records[i].flags |= kFlagExposure;
      r.track.quality.exposure_failures.push_back(i);
    }
    SpectrumSample s;
    s.bands = l1_normalize(median_spectrum(p.normalized, roi)).bands;
    s.timestamp = p.raw.timestamp();
    s.phase = ctx.labels.empty() ? cfg.phase : ctx.labels[i].label;
    r.series.push_back(s);
  }
  r.frames = ctx.frames;
  return r;
}

// ------------------------------------------------------------ bench

struct StageLatency {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

struct BenchReport {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned workers = 0;
  double fps_target = 25.0;
  double duration_s = 0.0;  // steady-state window
  std::size_t frames = 0;   // frames inside the window
  double throughput_fps = 0.0;
  std::size_t dropped_frames = 0;
  double peak_memory_mb = 0.0;
  std::size_t max_in_flight = 0;
  std::vector<std::pair<std::string, StageLatency>> stages;

  bool meets_target() const { return throughput_fps >= fps_target; }
};

inline double peak_memory_mb() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream ss(line.substr(6));
      double kb = 0.0;
      ss >> kb;
      return kb / 1024.0;
    }
  return 0.0;
}

namespace detail {

inline StageLatency latency_of(std::vector<double> v) {
  StageLatency l;
  if (v.empty()) return l;
  double sum = 0.0;
  for (double x : v) sum += x;
  l.mean_ms = sum / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(v.size()))) - 1;
  l.p95_ms = v[std::min(idx, v.size() - 1)];
  return l;
}

}  // namespace detail

struct BenchOptions {
  double duration_s = 30.0;  // steady-state window
  double warmup_s = 2.0;
};

// Runs the per-frame path over the input, looping it as needed, until the
// steady-state window has elapsed. File sources apply backpressure, so no
// frame is ever dropped.
inline BenchReport bench(const PipelineConfig& cfg, const BenchOptions& opt = {}) {
  if (!(opt.duration_s > 0.0) || opt.warmup_s < 0.0) throw ConfigError("bench: duration must be positive");
  const PipelineContext ctx = load_context(cfg);
  SpectrumStage tail(cfg, ctx, false);
  std::array<std::vector<double>, kStageCount> times;
  const auto start = detail::Clock::now();
  std::optional<detail::Clock::time_point> window_start;
  std::size_t window_frames = 0;
  double window_s = 0.0;
  const auto stats = stream_frames(
      cfg, ctx, tail,
      [&](std::size_t, const SpectrumSample&, const StageTimes& t) {
        const auto now = detail::Clock::now();
        if (!window_start) {
          if (std::chrono::duration<double>(now - start).count() >= opt.warmup_s) window_start = now;
          return true;
        }
        ++window_frames;
        for (std::size_t s = 0; s < kStageCount; ++s) times[s].push_back(t[s]);
        window_s = std::chrono::duration<double>(now - *window_start).count();
        return window_s < opt.duration_s;
      },
      std::numeric_limits<std::size_t>::max());

  BenchReport r;
  r.width = ctx.header.width;
  r.height = ctx.header.height;
  r.workers = cfg.worker_count();
  r.fps_target = cfg.fps_target;
  r.duration_s = window_s;
  r.frames = window_frames;
  r.throughput_fps = window_s > 0.0 ? static_cast<double>(window_frames) / window_s : 0.0;
  r.dropped_frames = 0;
  r.peak_memory_mb = peak_memory_mb();
  r.max_in_flight = stats.max_in_flight;
  for (std::size_t s = 0; s < kStageCount; ++s) r.stages.emplace_back(stage_names()[s], detail::latency_of(times[s]));
  return r;
}

inline constexpr const char* kBenchNote =
    "The fps target is applied to the whole per-frame analysis path (read, demosaic, white/dark normalization, "
    "RGB, tracking, exposure check, median, l1), which is stricter than an acquisition-only rate.";

inline json bench_to_json(const BenchReport& r) {
  json stages = json::object();
  for (const auto& [name, l] : r.stages) stages[name] = {{"mean_ms", l.mean_ms}, {"p95_ms", l.p95_ms}};
  return {{"note", kBenchNote},
          {"raw_width", r.width},
          {"raw_height", r.height},
          {"workers", r.workers},
          {"hardware_threads", std::thread::hardware_concurrency()},
          {"fps_target", r.fps_target},
          {"steady_state_s", r.duration_s},
          {"frames", r.frames},
          {"throughput_fps", r.throughput_fps},
          {"meets_target", r.meets_target()},
          {"dropped_frames", r.dropped_frames},
          {"peak_memory_mb", r.peak_memory_mb},
          {"max_in_flight", r.max_in_flight},
          {"stages", stages}};
}

inline std::string bench_to_text(const BenchReport& r) {
  std::ostringstream o;
  o << "# " << kBenchNote << "\n";
  o << "input " << r.width << "x" << r.height << " raw, " << r.workers << " prep worker(s), "
    << std::thread::hardware_concurrency() << " hardware thread(s)\n";
  o << "throughput " << r.throughput_fps << " fps over " << r.duration_s << " s (" << r.frames << " frames), target "
    << r.fps_target << " fps: " << (r.meets_target() ? "met" : "missed") << "\n";
  o << "dropped " << r.dropped_frames << ", peak memory " << r.peak_memory_mb << " MB, max in flight "
    << r.max_in_flight << "\n";
  o << "stage        mean_ms   p95_ms\n";
  for (const auto& [name, l] : r.stages) {
    char line[96];
    std::snprintf(line, sizeof line, "%-10s %9.3f %8.3f\n", name.c_str(), l.mean_ms, l.p95_ms);
    o << line;
  }
  return o.str();
}

// ------------------------------------------------------------ analyze

inline constexpr const char* kScoreNote =
    "Trials are ranked by embedding fidelity: KL divergence between the normalized high-dimensional fuzzy "
    "memberships and the low-dimensional memberships over the same edges (lower is better). Phase separation "
    "(silhouette, 2-means agreement) is reported alongside and is never optimized directly.";

struct SeparationReport {
  UmapParams params;
  double score = 0.0;
  double silhouette = 0.0;
  double two_means_agreement = 0.0;
  std::size_t n_before = 0;
  std::size_t n_during = 0;
};

inline SeparationReport separation_of(const EmbeddingModel& m, std::size_t n_before, std::size_t n_during,
                                      ScoreMode mode = ScoreMode::fidelity) {
  const auto labels = pooled_labels(n_before, n_during);
  const auto s = embedding_score(m, labels, mode);
  SeparationReport r;
  r.params = m.params;
  r.score = s.score;
  r.silhouette = s.silhouette;
  r.two_means_agreement = cluster_agreement(two_means(m.coords), labels);
  r.n_before = n_before;
  r.n_during = n_during;
  return r;
}

struct AnalyzeResult {
  SearchResult search;
  EmbeddingModel model;
  SeparationReport separation;
};

inline json separation_to_json(const SeparationReport& r, const SearchConfig& cfg, const SearchResult& search) {
  return {{"score_interpretation", cfg.mode == ScoreMode::fidelity ? kScoreNote : "phase histogram KL (diagnostic mode)"},
          {"n_trials", search.n_trials},
          {"failed_trials", search.failures()},
          {"best_trial", search.best},
          {"min_dist", r.params.min_dist},
          {"n_neighbors", r.params.n_neighbors},
          {"seed", r.params.seed},
          {"score", r.score},
          {"silhouette", r.silhouette},
          {"two_means_agreement", r.two_means_agreement},
          {"n_before", r.n_before},
          {"n_during", r.n_during}};
}

// Search, refit the best trial on the pooled spectra and write the trial
// table, embedding csv/png and separation report into out_dir if given.
inline AnalyzeResult analyze(const SpectrumSeries& before, const SpectrumSeries& during, const SearchConfig& cfg,
                             const fs::path& out_dir = {}) {
  if (before.empty() || during.empty()) throw ArgumentError("analyze: both series must be non-empty");
  AnalyzeResult r;
  r.search = random_search(before, during, cfg);
  SpectrumSeries pooled = before;
  pooled.insert(pooled.end(), during.begin(), during.end());
  r.model = fit_umap(to_points(pooled), r.search.best_trial().params);
  r.separation = separation_of(r.model, before.size(), during.size(), cfg.mode);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_trial_table(out_dir / "trials.csv", r.search);
    std::vector<double> ts;
    std::vector<Phase> ph;
    for (const auto& s : pooled) {
      ts.push_back(s.timestamp);
      ph.push_back(s.phase);
    }
    export_embedding_plot(r.model, ts, ph, out_dir / "embedding.csv", out_dir / "embedding.png");
    write_json(out_dir / "separation.json", separation_to_json(r.separation, cfg, r.search));
  }
  return r;
}

}  // namespace msi

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "msi/phantom.hpp"
#include "msi/pipeline.hpp"

using namespace msi;

namespace {

Rect parse_roi(const std::string& text) {
  std::istringstream in(text);
  int v[4];
  char sep;
  for (int i = 0; i < 4; ++i) {
    if (!(in >> v[i])) throw ConfigError("--roi expects x,y,w,h, got '" + text + "'");
    if (i < 3 && !(in >> sep && sep == ',')) throw ConfigError("--roi expects x,y,w,h, got '" + text + "'");
  }
  if (in >> sep) throw ConfigError("--roi expects x,y,w,h, got '" + text + "'");
  return {v[0], v[1], v[2], v[3]};
}

Phase parse_phase_flag(const std::string& s) {
  try {
    return parse_phase(s);
  } catch (const std::exception&) {
    throw ConfigError("--phase must be 'before' or 'during'");
  }
}

// 32x32 centered roi when none is given.
Rect default_roi_for(const fs::path& input) {
  const MsrawReader r(input);
  const int cols = static_cast<int>(r.header().width / kMosaicPeriod), rows = static_cast<int>(r.header().height / kMosaicPeriod);
  return {cols / 2 - 16, rows / 2 - 16, 32, 32};
}

struct PipelineFlags {
  std::string input, calib, layout, labels, roi, out, phase = "before";
  unsigned threads = 0;
  double fps_target = 25.0;
  std::size_t queue = 8;
  std::uint64_t seed = 2021;

  void add_to(CLI::App* app, bool with_out = true) {
    app->add_option("--input", input, "input .msraw sequence")->required();
    app->add_option("--calib", calib, "calibration manifest (json)")->required();
    app->add_option("--layout", layout, "mosaic layout json (default row-major)");
    app->add_option("--labels", labels, "frame label csv");
    app->add_option("--phase", phase, "phase label when no label file is given");
    app->add_option("--roi", roi, "initial roi x,y,w,h in cube pixels");
    if (with_out) app->add_option("--out", out, "output directory");
    app->add_option("--threads", threads, "prep workers (0: all cores)");
    app->add_option("--fps-target", fps_target, "throughput target");
    app->add_option("--queue", queue, "queue capacity in frames");
    app->add_option("--seed", seed, "root seed");
  }

  PipelineConfig config() const {
    PipelineConfig c;
    c.input = input;
    c.calibration = calib;
    c.layout = layout;
    c.labels = labels;
    c.out_dir = out;
    c.phase = parse_phase_flag(phase);
    if (!fs::exists(c.input)) throw DataError("input sequence not found: " + input);
    c.roi0 = roi.empty() ? default_roi_for(c.input) : parse_roi(roi);
    c.threads = threads;
    c.fps_target = fps_target;
    c.queue_capacity = queue;
    c.seed = seed;
    return c;
  }
};

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_phantom(const std::string& scene_path, const std::string& out, const std::string& layout_path, std::uint64_t seed,
                unsigned threads, double duration, const std::string& size) {
  if (out.empty()) throw ConfigError("phantom: --out is required");
  const fs::path dir = out;
  ClampingStudy study = default_clamping_study(seed);
  if (!layout_path.empty()) study.layout = load_layout(layout_path);
  auto adjust = [&](SceneScript& s) {
    if (duration > 0.0) s.duration_s = duration;
    if (!size.empty()) {
      unsigned w = 0, h = 0;
      if (std::sscanf(size.c_str(), "%ux%u", &w, &h) != 2) throw ConfigError("--size expects WxH");
      s.width = w;
      s.height = h;
    }
    s.validate();
  };
  fs::create_directories(dir);
  json summary;
  if (scene_path.empty()) {
    adjust(study.before);
    adjust(study.during);
    study.calibration = make_phantom_calibration(study.before, study.effective, derive_seed(seed, "study.calibration"));
    save_calibration(dir / "calib.json", study.calibration, study.layout, study.before.bit_depth);
    save_layout(dir / "layout.json", study.layout);
    for (Phase p : {Phase::before, Phase::during}) {
      const std::string name(to_string(p));
      const auto r = render_sequence(study.renderer(p), dir / (name + ".msraw"), dir / (name + "_labels.csv"), threads);
      summary[name] = {{"frames", r.frames}, {"overexposed_frames", r.overexposed_frames}};
    }
  } else {
    SceneScript s = load_scene(scene_path);
    adjust(s);
    const auto cal = make_phantom_calibration(s, study.effective, derive_seed(seed, "scene.calibration"));
    save_calibration(dir / "calib.json", cal, study.layout, s.bit_depth);
    save_layout(dir / "layout.json", study.layout);
    const PhantomRenderer r(s, study.effective, cal, study.layout, derive_seed(seed, "scene"));
    const auto res = render_sequence(r, dir / "sequence.msraw", dir / "sequence_labels.csv", threads);
    summary["sequence"] = {{"frames", res.frames}, {"overexposed_frames", res.overexposed_frames}};
  }
  write_json(dir / "phantom.json", summary);
  print_json(summary);
  return 0;
}

int cmd_pipeline(const PipelineFlags& f) {
  const PipelineConfig cfg = f.config();
  const auto r = run_pipeline(cfg);
  json j = quality_to_json(r.track.quality, r.frames);
  j["wall_s"] = r.wall_s;
  j["fps"] = r.wall_s > 0.0 ? static_cast<double>(r.frames) / r.wall_s : 0.0;
  print_json(j);
  return 0;
}

int cmd_bench(const PipelineFlags& f, double duration, double warmup) {
  const PipelineConfig cfg = f.config();
  const BenchReport r = bench(cfg, {duration, warmup});
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_json(cfg.out_dir / "bench.json", bench_to_json(r));
    std::ofstream(cfg.out_dir / "bench.txt") << bench_to_text(r);
  }
  std::cout << bench_to_text(r);
  return 0;
}

int cmd_analyze(const std::vector<std::string>& inputs, const std::string& out, std::size_t trials, std::uint64_t seed,
                unsigned threads, int epochs, const std::string& score) {
  SpectrumSeries before, during;
  if (inputs.size() == 1) {
    for (const auto& s : read_spectrum_series(inputs[0])) (s.phase == Phase::before ? before : during).push_back(s);
  } else if (inputs.size() == 2) {
    before = read_spectrum_series(inputs[0]);
    during = read_spectrum_series(inputs[1]);
  } else {
    throw ConfigError("analyze: --input takes one pooled or two per-phase spectra csv files");
  }
  if (before.empty() || during.empty()) throw DataError("analyze: both phases need spectra");
  SearchConfig cfg;
  cfg.n_trials = trials;
  cfg.seed = seed;
  cfg.threads = threads;
  cfg.n_epochs = epochs;
  if (score == "fidelity") cfg.mode = ScoreMode::fidelity;
  else if (score == "phase-histogram") cfg.mode = ScoreMode::phase_histogram;
  else throw ConfigError("--score must be 'fidelity' or 'phase-histogram'");
  const auto r = analyze(before, during, cfg, out);
  print_json(separation_to_json(r.separation, cfg, r.search));
  return 0;
}

int cmd_rgb(const PipelineFlags& f, std::size_t first, std::size_t count) {
  PipelineConfig cfg = f.config();
  if (cfg.out_dir.empty()) throw ConfigError("rgb: --out is required");
  const PipelineContext ctx = load_context(cfg);
  fs::create_directories(cfg.out_dir);
  MsrawReader in(cfg.input);
  RawMosaicFrame frame;
  const std::size_t last = std::min(ctx.frames, first + count);
  for (std::size_t i = first; i < last; ++i) {
    in.read(i, frame);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05zu.png", i);
    write_png(cfg.out_dir / name, prepare_frame(i, frame, ctx).rgb);
  }
  print_json({{"written", last > first ? last - first : 0}});
  return 0;
}

int cmd_inspect(const std::string& input, std::size_t index) {
  MsrawReader in(input);
  const auto& h = in.header();
  json j{{"width", h.width}, {"height", h.height}, {"bit_depth", h.bit_depth}, {"frames", in.size()}, {"fps", h.fps}};
  if (in.size() > 0) {
    const RawMosaicFrame f = in.read(std::min(index, in.size() - 1));
    double sum = 0.0;
    std::uint16_t lo = 0xffff, hi = 0;
    for (auto v : f.pixels) {
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const auto full = static_cast<std::uint16_t>((1u << h.bit_depth) - 1u);
    const auto saturated = std::count(f.pixels.begin(), f.pixels.end(), full);
    j["frame"] = {{"index", std::min(index, in.size() - 1)},
                  {"timestamp", f.timestamp},
                  {"min", lo},
                  {"max", hi},
                  {"mean", sum / static_cast<double>(f.pixels.size())},
                  {"saturated_pixels", saturated}};
  }
  print_json(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multispectral snapshot video toolkit"};
  app.require_subcommand(1);

  auto* phantom = app.add_subcommand("phantom", "render a phantom sequence (default: the clamping study)");
  std::string scene, ph_out, ph_layout, ph_size;
  std::uint64_t ph_seed = 2021;
  unsigned ph_threads = 1;
  double ph_duration = 0.0;
  phantom->add_option("--scene", scene, "scene script json");
  phantom->add_option("--out", ph_out, "output directory")->required();
  phantom->add_option("--layout", ph_layout, "mosaic layout json");
  phantom->add_option("--seed", ph_seed, "root seed");
  phantom->add_option("--threads", ph_threads, "render threads");
  phantom->add_option("--duration", ph_duration, "override duration in seconds");
  phantom->add_option("--size", ph_size, "override raw size WxH");

  PipelineFlags pipe_flags, bench_flags, rgb_flags;
  auto* pipeline = app.add_subcommand("pipeline", "run the per-frame path and write spectra, track and quality");
  pipe_flags.add_to(pipeline);

  auto* bench_cmd = app.add_subcommand("bench", "measure sustained throughput and stage latencies");
  bench_flags.add_to(bench_cmd);
  double bench_duration = 30.0, bench_warmup = 2.0;
  bench_cmd->add_option("--duration", bench_duration, "steady-state seconds");
  bench_cmd->add_option("--warmup", bench_warmup, "warm-up seconds");

  auto* analyze_cmd = app.add_subcommand("analyze", "UMAP random search and separation report");
  std::vector<std::string> an_inputs;
  std::string an_out, an_score = "fidelity";
  std::size_t an_trials = 1000;
  std::uint64_t an_seed = 2021;
  unsigned an_threads = 0;
  int an_epochs = 500;
  analyze_cmd->add_option("--input", an_inputs, "spectra csv: pooled, or before then during")->required();
  analyze_cmd->add_option("--out", an_out, "output directory");
  analyze_cmd->add_option("--trials", an_trials, "random search trials");
  analyze_cmd->add_option("--seed", an_seed, "root seed");
  analyze_cmd->add_option("--threads", an_threads, "search workers (0: all cores)");
  analyze_cmd->add_option("--epochs", an_epochs, "optimization epochs per fit");
  analyze_cmd->add_option("--score", an_score, "fidelity | phase-histogram");

  auto* rgb = app.add_subcommand("rgb", "write reconstructed RGB frames as PNG");
  rgb_flags.add_to(rgb);
  std::size_t rgb_first = 0, rgb_count = 1;
  rgb->add_option("--first", rgb_first, "first frame");
  rgb->add_option("--count", rgb_count, "number of frames");

  auto* inspect = app.add_subcommand("inspect", "print the sequence header and frame statistics");
  std::string in_input;
  std::size_t in_frame = 0;
  inspect->add_option("--input", in_input, "input .msraw")->required();
  inspect->add_option("--frame", in_frame, "frame index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*phantom) return cmd_phantom(scene, ph_out, ph_layout, ph_seed, ph_threads, ph_duration, ph_size);
    if (*pipeline) return cmd_pipeline(pipe_flags);
    if (*bench_cmd) return cmd_bench(bench_flags, bench_duration, bench_warmup);
    if (*analyze_cmd) return cmd_analyze(an_inputs, an_out, an_trials, an_seed, an_threads, an_epochs, an_score);
    if (*rgb) return cmd_rgb(rgb_flags, rgb_first, rgb_count);
    if (*inspect) return cmd_inspect(in_input, in_frame);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ArgumentError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const BoundsError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

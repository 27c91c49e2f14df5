#pragma once

// File formats: .msraw frame sequences, layout / calibration / filter bank
// manifests (JSON), curves and tables (CSV), scene scripts (JSON).

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "msi/calibration.hpp"
#include "msi/error.hpp"
#include "msi/mosaic.hpp"
#include "msi/optics.hpp"
#include "msi/phantom.hpp"

namespace msi {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- .msraw

inline constexpr std::size_t kMsrawHeaderSize = 32;
inline constexpr char kMsrawMagic[4] = {'M', 'S', 'R', '1'};

struct MsrawHeader {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t bit_depth = 10;
  std::uint32_t frame_count = 0;
  float fps = 0.0f;

  std::size_t frame_bytes() const noexcept {
    return sizeof(double) + std::size_t{width} * height * sizeof(std::uint16_t);
  }
};

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put_le(unsigned char* dst, T v) {
  v = byteswap_if_big(v);
  std::memcpy(dst, &v, sizeof(T));
}

template <typename T>
T get_le(const unsigned char* src) {
  T v;
  std::memcpy(&v, src, sizeof(T));
  return byteswap_if_big(v);
}

inline void swap_pixels_if_big(std::vector<std::uint16_t>& px) {
  if constexpr (std::endian::native == std::endian::big)
    for (auto& p : px) p = byteswap_if_big(p);
}

}  // namespace detail

class MsrawWriter {
 public:
  MsrawWriter(const fs::path& path, std::uint32_t width, std::uint32_t height, unsigned bit_depth, double fps)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw DataError("cannot open " + path.string() + " for writing");
    if (width == 0 || height == 0 || width % kMosaicPeriod || height % kMosaicPeriod)
      throw ArgumentError("msraw: frame size must be a positive multiple of 4");
    header_ = {width, height, bit_depth, 0, static_cast<float>(fps)};
    write_header();
  }

  MsrawWriter(const MsrawWriter&) = delete;
  MsrawWriter& operator=(const MsrawWriter&) = delete;
  ~MsrawWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  void write(const RawMosaicFrame& f) {
    if (f.width != header_.width || f.height != header_.height || f.bit_depth != header_.bit_depth)
      throw DataError("msraw: frame does not match the sequence header");
    unsigned char ts[8];
    detail::put_le(ts, f.timestamp);
    out_.write(reinterpret_cast<const char*>(ts), 8);
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(f.pixels.data()),
                 static_cast<std::streamsize>(f.pixels.size() * sizeof(std::uint16_t)));
    } else {
      auto px = f.pixels;
      detail::swap_pixels_if_big(px);
      out_.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size() * 2));
    }
    if (!out_) throw DataError("msraw: write failed for " + path_.string());
    ++header_.frame_count;
  }

  // Patches the frame count into the header.
  void close() {
    if (!out_.is_open()) return;
    out_.seekp(0);
    write_header();
    out_.close();
    if (out_.fail()) throw DataError("msraw: failed to finalize " + path_.string());
  }

  std::uint32_t frames_written() const noexcept { return header_.frame_count; }

 private:
  void write_header() {
    unsigned char h[kMsrawHeaderSize] = {};
    std::memcpy(h, kMsrawMagic, 4);
    detail::put_le(h + 4, header_.width);
    detail::put_le(h + 8, header_.height);
    detail::put_le(h + 12, header_.bit_depth);
    detail::put_le(h + 16, header_.frame_count);
    detail::put_le(h + 20, header_.fps);
    out_.write(reinterpret_cast<const char*>(h), kMsrawHeaderSize);
  }

  fs::path path_;
  std::ofstream out_;
  MsrawHeader header_;
};

class MsrawReader {
 public:
  explicit MsrawReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open " + path.string());
    unsigned char h[kMsrawHeaderSize];
    in_.read(reinterpret_cast<char*>(h), kMsrawHeaderSize);
    if (in_.gcount() != static_cast<std::streamsize>(kMsrawHeaderSize) || std::memcmp(h, kMsrawMagic, 4) != 0)
      throw DataError(path.string() + " is not an .msraw file");
    header_.width = detail::get_le<std::uint32_t>(h + 4);
    header_.height = detail::get_le<std::uint32_t>(h + 8);
    header_.bit_depth = detail::get_le<std::uint32_t>(h + 12);
    header_.frame_count = detail::get_le<std::uint32_t>(h + 16);
    header_.fps = detail::get_le<float>(h + 20);
    if (header_.width == 0 || header_.height == 0 || header_.width % kMosaicPeriod ||
        header_.height % kMosaicPeriod)
      throw DataError(path.string() + ": frame size is not a positive multiple of 4");
    if (header_.bit_depth == 0 || header_.bit_depth > 16)
      throw DataError(path.string() + ": bit depth outside [1, 16]");
    const auto size = fs::file_size(path);
    if (size < kMsrawHeaderSize + std::uintmax_t{header_.frame_count} * header_.frame_bytes())
      throw DataError(path.string() + ": file shorter than its header claims (truncated)");
  }

  const MsrawHeader& header() const noexcept { return header_; }
  std::size_t size() const noexcept { return header_.frame_count; }

  // Reads frame `index` into `f`, reusing its buffer.
  void read(std::size_t index, RawMosaicFrame& f) {
    if (index >= size()) throw BoundsError("msraw: frame index out of range");
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(kMsrawHeaderSize + index * header_.frame_bytes()));
    unsigned char ts[8];
    in_.read(reinterpret_cast<char*>(ts), 8);
    f.width = header_.width;
    f.height = header_.height;
    f.bit_depth = header_.bit_depth;
    f.timestamp = detail::get_le<double>(ts);
    f.pixels.resize(std::size_t{header_.width} * header_.height);
    in_.read(reinterpret_cast<char*>(f.pixels.data()),
             static_cast<std::streamsize>(f.pixels.size() * sizeof(std::uint16_t)));
    if (!in_) throw DataError(path_.string() + ": short read at frame " + std::to_string(index));
    detail::swap_pixels_if_big(f.pixels);
    const std::uint32_t limit = 1u << header_.bit_depth;
    const std::uint16_t peak = *std::max_element(f.pixels.begin(), f.pixels.end());
    if (peak >= limit)
      throw DataError(path_.string() + ": frame " + std::to_string(index) + " has value " +
                      std::to_string(peak) + " beyond its bit depth");
  }

  RawMosaicFrame read(std::size_t index) {
    RawMosaicFrame f;
    read(index, f);
    return f;
  }

 private:
  fs::path path_;
  std::ifstream in_;
  MsrawHeader header_;
};

inline void write_msraw(const fs::path& path, const std::vector<RawMosaicFrame>& frames, double fps) {
  if (frames.empty()) throw ArgumentError("write_msraw: no frames");
  MsrawWriter w(path, static_cast<std::uint32_t>(frames[0].width), static_cast<std::uint32_t>(frames[0].height),
                frames[0].bit_depth, fps);
  for (const auto& f : frames) w.write(f);
  w.close();
}

inline std::vector<RawMosaicFrame> read_msraw(const fs::path& path) {
  MsrawReader r(path);
  std::vector<RawMosaicFrame> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) r.read(i, out[i]);
  return out;
}

// ---------------------------------------------------------------- JSON

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

inline MosaicLayout layout_from_json(const json& j) {
  try {
    const auto& g = j.at("band_of_cell");
    if (!g.is_array() || g.size() != kMosaicPeriod) throw ConfigError("layout: band_of_cell must be 4x4");
    MosaicLayout::Grid grid{};
    for (std::size_t r = 0; r < kMosaicPeriod; ++r) {
      if (!g[r].is_array() || g[r].size() != kMosaicPeriod) throw ConfigError("layout: band_of_cell must be 4x4");
      for (std::size_t c = 0; c < kMosaicPeriod; ++c) grid[r][c] = g[r][c].get<int>();
    }
    return MosaicLayout(grid);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("layout: ") + e.what());
  }
}

inline json layout_to_json(const MosaicLayout& layout) {
  json g = json::array();
  for (const auto& row : layout.band_of_cell()) g.push_back(json(row));
  return {{"band_of_cell", g}};
}

inline MosaicLayout load_layout(const fs::path& path) { return layout_from_json(read_json(path)); }
inline void save_layout(const fs::path& path, const MosaicLayout& layout) { write_json(path, layout_to_json(layout)); }

// Calibration cubes are stored as single-frame .msraw files (remosaiced with
// the layout) plus a manifest {"white", "dark", "target_note"}; relative
// paths resolve against the manifest directory.
inline void save_calibration(const fs::path& manifest, const CalibrationPair& cal, const MosaicLayout& layout,
                             unsigned bit_depth = 10) {
  const fs::path dir = manifest.parent_path();
  const std::string stem = manifest.stem().string();
  const std::string white = stem + "_white.msraw", dark = stem + "_dark.msraw";
  write_msraw(dir / white, {remosaic(cal.white, layout, bit_depth)}, 1.0);
  write_msraw(dir / dark, {remosaic(cal.dark, layout, bit_depth)}, 1.0);
  write_json(manifest, {{"white", white}, {"dark", dark}, {"target_note", cal.target_note}});
}

inline CalibrationPair load_calibration(const fs::path& manifest, const MosaicLayout& layout) {
  if (!fs::exists(manifest)) throw ConfigError("calibration manifest " + manifest.string() + " not found");
  const json j = read_json(manifest);
  auto resolve = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw ConfigError("calibration manifest: missing \"" + std::string(key) + "\"");
    fs::path p = j[key].get<std::string>();
    if (p.is_relative()) p = manifest.parent_path() / p;
    if (!fs::exists(p)) throw ConfigError("calibration reference " + p.string() + " not found");
    return p;
  };
  auto load_cube = [&](const fs::path& p) {
    MsrawReader r(p);
    if (r.size() != 1) throw ConfigError(p.string() + ": calibration reference must hold exactly one frame");
    const RawCube raw = demosaic(r.read(0), layout);
    BandCube<double> cube(raw.rows(), raw.cols());
    std::copy(raw.values().begin(), raw.values().end(), cube.values().begin());
    return cube;
  };
  CalibrationPair cal{load_cube(resolve("white")), load_cube(resolve("dark")), j.value("target_note", std::string{})};
  if (!cal.white.same_shape(cal.dark)) throw ConfigError("calibration: white and dark sizes differ");
  return cal;
}

// ---------------------------------------------------------------- CSV

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw DataError(where + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().remove_suffix(1);
  return out;
}

// Reads a CSV with a required header; returns data rows.
inline std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  const auto cols = split(line);
  if (cols.size() != header.size() || !std::equal(cols.begin(), cols.end(), header.begin()))
    throw DataError(path.string() + ": unexpected header '" + line + "'");
  std::vector<std::vector<std::string>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != header.size())
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                      " columns");
    rows.emplace_back(cells.begin(), cells.end());
  }
  return rows;
}

}  // namespace detail

// Writes rows of pre-formatted cells under a header.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : path_(path), out_(path) {
    if (!out_) throw DataError("cannot open " + path.string() + " for writing");
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
    if (!out_) throw DataError("write failed for " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

inline SpectralCurve read_curve(const fs::path& path) {
  SpectralCurve c;
  for (const auto& r : detail::read_csv(path, {"wavelength_nm", "value"})) {
    c.wavelengths.push_back(detail::parse_double(r[0], path.string()));
    c.values.push_back(detail::parse_double(r[1], path.string()));
  }
  if (c.empty()) throw DataError(path.string() + ": no samples");
  c.validate();
  return c;
}

inline void write_curve(const fs::path& path, const SpectralCurve& c) {
  CsvWriter w(path, {"wavelength_nm", "value"});
  for (std::size_t i = 0; i < c.size(); ++i)
    w.row({detail::format_double(c.wavelengths[i]), detail::format_double(c.values[i])});
}

// {"curves": [16 curve CSV paths], "band_centers": [16 numbers]}; curves are
// resampled onto `grid`.
inline FilterBank load_filter_bank(const fs::path& manifest, const std::vector<double>& grid = default_grid()) {
  const json j = read_json(manifest);
  try {
    const auto& curves = j.at("curves");
    const auto& centers = j.at("band_centers");
    if (curves.size() != kBandCount || centers.size() != kBandCount)
      throw ConfigError("filter bank manifest: expected 16 curves and 16 band centers");
    FilterBank bank;
    for (std::size_t k = 0; k < kBandCount; ++k) {
      fs::path p = curves[k].get<std::string>();
      if (p.is_relative()) p = manifest.parent_path() / p;
      bank.responses[k] = resample(read_curve(p), grid);
      bank.band_centers[k] = centers[k].get<double>();
    }
    return bank;
  } catch (const json::exception& e) {
    throw ConfigError("filter bank manifest: " + std::string(e.what()));
  }
}

inline void save_filter_bank(const fs::path& manifest, const FilterBank& bank) {
  json curves = json::array();
  const std::string stem = manifest.stem().string();
  for (std::size_t k = 0; k < kBandCount; ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_band%02zu.csv", stem.c_str(), k);
    write_curve(manifest.parent_path() / name, bank.responses[k]);
    curves.push_back(name);
  }
  write_json(manifest, {{"curves", curves}, {"band_centers", bank.band_centers}});
}

// Knot tables as two curve CSVs, interpolated with PCHIP onto `grid`.
inline HemoglobinExtinction load_extinction(const fs::path& hbo2, const fs::path& hb,
                                            const std::vector<double>& grid = default_grid()) {
  const SpectralCurve a = read_curve(hbo2), b = read_curve(hb);
  return {pchip(a.wavelengths, a.values, grid), pchip(b.wavelengths, b.values, grid)};
}

inline std::vector<std::string> spectrum_csv_header() {
  std::vector<std::string> h{"timestamp", "phase"};
  for (std::size_t k = 0; k < kBandCount; ++k) {
    char name[8];
    std::snprintf(name, sizeof name, "b%02zu", k);
    h.emplace_back(name);
  }
  return h;
}

inline void write_spectrum_series(const fs::path& path, const SpectrumSeries& series) {
  CsvWriter w(path, spectrum_csv_header());
  std::vector<std::string> cells(2 + kBandCount);
  for (const auto& s : series) {
    cells[0] = detail::format_double(s.timestamp);
    cells[1] = std::string(to_string(s.phase));
    for (std::size_t k = 0; k < kBandCount; ++k) cells[2 + k] = detail::format_double(s.bands[k]);
    w.row(cells);
  }
}

inline SpectrumSeries read_spectrum_series(const fs::path& path) {
  SpectrumSeries out;
  for (const auto& r : detail::read_csv(path, spectrum_csv_header())) {
    SpectrumSample s;
    s.timestamp = detail::parse_double(r[0], path.string());
    s.phase = parse_phase(r[1]);
    for (std::size_t k = 0; k < kBandCount; ++k) s.bands[k] = detail::parse_double(r[2 + k], path.string());
    out.push_back(s);
  }
  return out;
}

struct FrameLabel {
  std::size_t frame_index = 0;
  double time_s = 0.0;
  Phase label = Phase::before;

  friend bool operator==(const FrameLabel&, const FrameLabel&) = default;
};

inline void write_labels(const fs::path& path, const std::vector<FrameLabel>& labels) {
  CsvWriter w(path, {"frame_index", "time_s", "label"});
  for (const auto& l : labels)
    w.row({std::to_string(l.frame_index), detail::format_double(l.time_s), std::string(to_string(l.label))});
}

inline std::vector<FrameLabel> read_labels(const fs::path& path) {
  std::vector<FrameLabel> out;
  for (const auto& r : detail::read_csv(path, {"frame_index", "time_s", "label"}))
    out.push_back({static_cast<std::size_t>(detail::parse_double(r[0], path.string())),
                   detail::parse_double(r[1], path.string()), parse_phase(r[2])});
  return out;
}

// ---------------------------------------------------------------- scenes

inline json scene_to_json(const SceneScript& s) {
  json schedule = json::array();
  for (const auto& seg : s.schedule)
    schedule.push_back({{"start_s", seg.start_s},
                        {"label", std::string(to_string(seg.label))},
                        {"sao2", seg.state.sao2},
                        {"vhb", seg.state.vhb},
                        {"scatter_a", seg.state.scatter_a},
                        {"scatter_b", seg.state.scatter_b}});
  return {{"width", s.width},
          {"height", s.height},
          {"bit_depth", s.bit_depth},
          {"duration_s", s.duration_s},
          {"fps", s.fps},
          {"schedule", schedule},
          {"motion_amplitude_px", s.motion_amplitude_px},
          {"motion_period_s", s.motion_period_s},
          {"noise_sigma", s.noise_sigma},
          {"drift_amplitude", s.drift_amplitude},
          {"drift_period_s", s.drift_period_s},
          {"vhb_variation", s.vhb_variation},
          {"dark_level", s.dark_level}};
}

// Missing keys keep their defaults.
inline SceneScript scene_from_json(const json& j) {
  SceneScript s;
  try {
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.bit_depth = j.value("bit_depth", s.bit_depth);
    s.duration_s = j.value("duration_s", s.duration_s);
    s.fps = j.value("fps", s.fps);
    s.motion_amplitude_px = j.value("motion_amplitude_px", s.motion_amplitude_px);
    s.motion_period_s = j.value("motion_period_s", s.motion_period_s);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.drift_amplitude = j.value("drift_amplitude", s.drift_amplitude);
    s.drift_period_s = j.value("drift_period_s", s.drift_period_s);
    s.vhb_variation = j.value("vhb_variation", s.vhb_variation);
    s.dark_level = j.value("dark_level", s.dark_level);
    if (j.contains("schedule")) {
      s.schedule.clear();
      for (const auto& e : j.at("schedule")) {
        PhaseSegment seg;
        seg.start_s = e.value("start_s", 0.0);
        try {
          seg.label = parse_phase(e.value("label", std::string("before")));
        } catch (const DataError& err) {
          throw ConfigError(err.what());
        }
        seg.state.sao2 = e.value("sao2", seg.state.sao2);
        seg.state.vhb = e.value("vhb", seg.state.vhb);
        seg.state.scatter_a = e.value("scatter_a", seg.state.scatter_a);
        seg.state.scatter_b = e.value("scatter_b", seg.state.scatter_b);
        s.schedule.push_back(seg);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  s.validate();
  return s;
}

inline SceneScript load_scene(const fs::path& path) { return scene_from_json(read_json(path)); }

struct RenderSummary {
  std::size_t frames = 0;
  std::size_t overexposed_frames = 0;
};

// Renders every frame of `r` to an .msraw file and the label track to CSV.
// Frames are rendered in parallel batches and written in index order.
inline RenderSummary render_sequence(const PhantomRenderer& r, const fs::path& msraw, const fs::path& labels,
                                     unsigned threads = 1) {
  const SceneScript& s = r.script();
  threads = std::max(1u, threads);
  MsrawWriter w(msraw, static_cast<std::uint32_t>(s.width), static_cast<std::uint32_t>(s.height), s.bit_depth, s.fps);
  std::vector<FrameLabel> track;
  RenderSummary summary;
  std::vector<RenderedFrame> batch(threads);
  for (std::size_t start = 0; start < r.size(); start += threads) {
    const std::size_t n = std::min<std::size_t>(threads, r.size() - start);
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back([&, t] { batch[t] = r.render(start + t); });
    batch[0] = r.render(start);
    pool.clear();
    for (std::size_t t = 0; t < n; ++t) {
      w.write(batch[t].frame);
      track.push_back({start + t, batch[t].frame.timestamp, batch[t].label});
      summary.overexposed_frames += batch[t].overexposed > 0;
    }
  }
  w.close();
  write_labels(labels, track);
  summary.frames = track.size();
  return summary;
}

}  // namespace msi

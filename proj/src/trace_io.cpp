// SPDX-License-Identifier: Apache-2.0
#include "anableps/trace_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>

#include "anableps/common.hpp"
#include "text_util.hpp"

namespace anableps::trace {
namespace {

constexpr double kGridTolerance = 1e-9;
constexpr double kMinGeneratedKbps = 100.0;

bool on_grid(double dt, double step) {
  return std::abs(dt - step) <= kGridTolerance;
}

std::vector<std::string_view> data_lines(std::string_view text,
                                         std::string_view header) {
  std::vector<std::string_view> out;
  bool seen_header = false;
  for (auto line : text::lines(text)) {
    line = text::trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (!seen_header) {
      // Header is compared with whitespace removed around fields.
      auto fields = text::split(line, ',');
      auto expected = text::split(header, ',');
      if (fields != expected) {
        throw ParseError("expected header '" + std::string(header) +
                         "', got '" + std::string(line) + "'");
      }
      seen_header = true;
      continue;
    }
    out.push_back(line);
  }
  if (!seen_header) throw ParseError("missing header '" + std::string(header) + "'");
  return out;
}

double sample_mean(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) /
         static_cast<double>(xs.size());
}

double sample_stddev(std::span<const double> xs) {
  const double mu = sample_mean(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(xs.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// NetworkTrace

NetworkTrace::NetworkTrace(std::vector<BandwidthSample> samples)
    : samples_(std::move(samples)) {
  if (samples_.size() < 2) {
    throw ValidationError("network trace needs at least 2 samples");
  }
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& s = samples_[i];
    if (!std::isfinite(s.kbps) || s.kbps <= 0.0) {
      throw ValidationError("non-positive bandwidth at t=" +
                            text::format_double(s.time_s));
    }
    if (!std::isfinite(s.time_s)) throw ValidationError("non-finite time");
    if (i > 0 &&
        !on_grid(s.time_s - samples_[i - 1].time_s, kTraceGranularitySec)) {
      throw ValidationError("trace samples must be spaced by 0.5 s");
    }
  }
}

double NetworkTrace::mean_kbps() const {
  double acc = 0.0;
  for (const auto& s : samples_) acc += s.kbps;
  return acc / static_cast<double>(samples_.size());
}

double NetworkTrace::kbps_at(double t) const {
  const auto idx = static_cast<long>(std::floor(t / kTraceGranularitySec));
  const long last = static_cast<long>(samples_.size()) - 1;
  return samples_[static_cast<std::size_t>(std::clamp(idx, 0L, last))].kbps;
}

double NetworkTrace::finish_time(double start, double bytes) const {
  double remaining_bits = bytes * 8.0;
  double t = start;
  const double end_of_trace = duration();
  while (true) {
    const double bps = kbps_at(t) * 1000.0;
    if (t >= end_of_trace - kGridTolerance) return t + remaining_bits / bps;
    double boundary =
        (std::floor(t / kTraceGranularitySec + kGridTolerance) + 1.0) *
        kTraceGranularitySec;
    if (t < 0.0) boundary = 0.0;
    const double capacity = (boundary - t) * bps;
    if (capacity >= remaining_bits) return t + remaining_bits / bps;
    remaining_bits -= capacity;
    t = boundary;
  }
}

double NetworkTrace::min_kbps_in(double t0, double t1) const {
  double best = std::numeric_limits<double>::infinity();
  const double base = start_time();
  for (const auto& s : samples_) {
    const double rel = s.time_s - base;
    if (rel >= t0 - kGridTolerance && rel <= t1 + kGridTolerance) {
      best = std::min(best, s.kbps);
    }
  }
  return std::isfinite(best) ? best : kbps_at(t0);
}

NetworkTrace NetworkTrace::slice(double offset, double duration) const {
  const auto first =
      static_cast<std::size_t>(std::llround(offset / kTraceGranularitySec));
  const auto count =
      static_cast<std::size_t>(std::ceil(duration / kTraceGranularitySec - 1e-9));
  if (first + count > samples_.size() || count < 2) {
    throw ValidationError("trace slice out of range");
  }
  std::vector<BandwidthSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({static_cast<double>(i) * kTraceGranularitySec,
                   samples_[first + i].kbps});
  }
  return NetworkTrace(std::move(out));
}

// ---------------------------------------------------------------------------
// ComplexityTrace

ComplexityTrace::ComplexityTrace(std::vector<ComplexitySample> samples,
                                 double fps, int gop_frames,
                                 std::vector<double> iframe_times)
    : samples_(std::move(samples)),
      fps_(fps),
      gop_frames_(gop_frames),
      iframe_times_(std::move(iframe_times)) {
  std::sort(iframe_times_.begin(), iframe_times_.end());
  validate();
}

ComplexityTrace::ComplexityTrace(std::vector<ComplexitySample> samples,
                                 double fps, int gop_frames)
    : samples_(std::move(samples)), fps_(fps), gop_frames_(gop_frames) {
  if (fps_ <= 0.0 || gop_frames_ < 1) {
    throw ValidationError("fps and gop_frames must be positive");
  }
  const double gop_s = gop_frames_ / fps_;
  for (double t = 0.0; t < duration() - 1e-9; t += gop_s) {
    iframe_times_.push_back(t);
  }
  validate();
}

void ComplexityTrace::validate() const {
  if (fps_ <= 0.0 || gop_frames_ < 1) {
    throw ValidationError("fps and gop_frames must be positive");
  }
  if (samples_.empty()) throw ValidationError("complexity trace is empty");
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& s = samples_[i];
    if (!std::isfinite(s.si) || !std::isfinite(s.ti) || s.si < 0.0 ||
        s.ti < 0.0) {
      throw ValidationError("si/ti must be finite and non-negative at t=" +
                            text::format_double(s.time_s));
    }
    const double expected = static_cast<double>(i) * kComplexityPeriodSec;
    if (std::abs(s.time_s - expected) > kGridTolerance) {
      throw ValidationError("complexity samples must start at 0 and be "
                            "spaced by 0.25 s");
    }
  }
  const double frame_period = 1.0 / fps_;
  const double gop_s = gop_seconds();
  for (std::size_t i = 0; i < iframe_times_.size(); ++i) {
    const double t = iframe_times_[i];
    const double frames = t / frame_period;
    if (t < -kGridTolerance || t >= duration() + kGridTolerance ||
        std::abs(frames - std::round(frames)) > 1e-6) {
      throw ValidationError("I-frame time " + text::format_double(t) +
                            " is not a frame timestamp of the video");
    }
    if (i > 0 && std::abs((t - iframe_times_[i - 1]) - gop_s) > 1e-6) {
      throw ValidationError("consecutive I frames must be one GoP apart");
    }
  }
}

std::span<const ComplexitySample> ComplexityTrace::window(double t0,
                                                          double t1) const {
  auto by_time = [](const ComplexitySample& s, double t) {
    return s.time_s < t - kGridTolerance;
  };
  auto lo = std::lower_bound(samples_.begin(), samples_.end(), t0, by_time);
  auto hi = std::lower_bound(samples_.begin(), samples_.end(), t1, by_time);
  return {lo, hi};
}

bool ComplexityTrace::is_iframe(double capture_time) const {
  const double half_frame = 0.5 / fps_;
  auto it = std::lower_bound(iframe_times_.begin(), iframe_times_.end(),
                             capture_time - half_frame);
  return it != iframe_times_.end() && std::abs(*it - capture_time) < half_frame;
}

bool ComplexityTrace::has_iframe_in(double t0, double t1) const {
  const double half_frame = 0.5 / fps_;
  auto it = std::lower_bound(iframe_times_.begin(), iframe_times_.end(),
                             t0 - half_frame * 1e-3);
  return it != iframe_times_.end() && *it < t1 - half_frame * 1e-3;
}

// ---------------------------------------------------------------------------
// Network trace IO

TraceModel parse_trace_model(const std::string& name) {
  if (name == "markov-step") return TraceModel::kMarkovStep;
  if (name == "ar1") return TraceModel::kAr1;
  if (name == "square-wave") return TraceModel::kSquareWave;
  throw ConfigError("unknown trace model '" + name + "'");
}

std::string to_string(TraceModel model) {
  switch (model) {
    case TraceModel::kMarkovStep: return "markov-step";
    case TraceModel::kAr1: return "ar1";
    case TraceModel::kSquareWave: return "square-wave";
  }
  return "unknown";
}

NetworkTrace parse_network_trace(const std::string& csv_text) {
  std::vector<BandwidthSample> raw;
  for (auto line : data_lines(csv_text, "time_s,bandwidth_kbps")) {
    auto fields = text::split(line, ',');
    if (fields.size() != 2) {
      throw ParseError("malformed trace row '" + std::string(line) + "'");
    }
    raw.push_back({text::parse_double(fields[0], "time"),
                   text::parse_double(fields[1], "bandwidth")});
  }
  if (raw.size() < 2) throw ValidationError("network trace needs at least 2 samples");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].kbps <= 0.0) {
      throw ValidationError("non-positive bandwidth at t=" +
                            text::format_double(raw[i].time_s));
    }
    if (i > 0 && raw[i].time_s <= raw[i - 1].time_s) {
      throw ValidationError("trace timestamps must be strictly increasing");
    }
  }
  bool already_on_grid = true;
  for (std::size_t i = 1; i < raw.size(); ++i) {
    already_on_grid &=
        on_grid(raw[i].time_s - raw[i - 1].time_s, kTraceGranularitySec);
  }
  if (already_on_grid) return NetworkTrace(std::move(raw));

  std::vector<BandwidthSample> grid;
  const double t0 = raw.front().time_s;
  const double t_last = raw.back().time_s;
  std::size_t seg = 0;
  for (std::size_t i = 0;; ++i) {
    const double t = t0 + static_cast<double>(i) * kTraceGranularitySec;
    if (t > t_last + kGridTolerance) break;
    while (seg + 2 < raw.size() && raw[seg + 1].time_s < t) ++seg;
    const auto& a = raw[seg];
    const auto& b = raw[seg + 1];
    const double w = std::clamp((t - a.time_s) / (b.time_s - a.time_s), 0.0, 1.0);
    grid.push_back({t, a.kbps + w * (b.kbps - a.kbps)});
  }
  return NetworkTrace(std::move(grid));
}

NetworkTrace load_network_trace(const std::filesystem::path& path) {
  return parse_network_trace(text::read_file(path));
}

std::string format_network_trace(const NetworkTrace& trace) {
  std::string out = "time_s,bandwidth_kbps\n";
  for (const auto& s : trace.samples()) {
    out += text::format_double(s.time_s);
    out += ',';
    out += text::format_double(s.kbps);
    out += '\n';
  }
  return out;
}

void save_network_trace(const NetworkTrace& trace,
                        const std::filesystem::path& path) {
  text::write_file(path, format_network_trace(trace));
}

NetworkTrace generate_synthetic_network_trace(const TraceGenSpec& spec) {
  if (!(spec.duration_s > 0.0) || !(spec.std_kbps >= 0.0) ||
      !(spec.mean_kbps > spec.std_kbps)) {
    throw ValidationError("trace spec requires duration > 0 and mean > std >= 0");
  }
  const auto n = std::max<std::size_t>(
      2, static_cast<std::size_t>(
             std::ceil(spec.duration_s / kTraceGranularitySec - 1e-9)));
  std::mt19937_64 rng(mix_seed(spec.seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> raw(n, 0.0);
  switch (spec.model) {
    case TraceModel::kMarkovStep: {
      constexpr double kSwitchProb = 0.15;
      bool high = unit(rng) < 0.5;
      for (auto& x : raw) {
        x = high ? 1.0 : -1.0;
        if (unit(rng) < kSwitchProb) high = !high;
      }
      break;
    }
    case TraceModel::kAr1: {
      constexpr double kPhi = 0.8;
      double x = normal(rng);
      for (auto& v : raw) {
        v = x;
        x = kPhi * x + std::sqrt(1.0 - kPhi * kPhi) * normal(rng);
      }
      break;
    }
    case TraceModel::kSquareWave: {
      constexpr std::size_t kHalfPeriod = 10;  // 5 s high, 5 s low
      for (std::size_t i = 0; i < n; ++i) {
        raw[i] = ((i / kHalfPeriod) % 2 == 0) ? 1.0 : -1.0;
      }
      break;
    }
  }

  // Affine standardisation pins the sample mean/std to the requested values
  // before the floor clamp.
  double sd = sample_stddev(raw);
  if (sd == 0.0) {
    for (std::size_t i = n / 2; i < n; ++i) raw[i] += 1.0;
    sd = sample_stddev(raw);
  }
  const double mu2 = sample_mean(raw);
  std::vector<BandwidthSample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    double kbps = spec.mean_kbps;
    if (spec.std_kbps > 0.0) kbps += spec.std_kbps * (raw[i] - mu2) / sd;
    samples[i] = {static_cast<double>(i) * kTraceGranularitySec,
                  std::max(kbps, kMinGeneratedKbps)};
  }
  return NetworkTrace(std::move(samples));
}

// ---------------------------------------------------------------------------
// Complexity trace IO

std::filesystem::path iframe_sidecar_path(const std::filesystem::path& path) {
  auto out = path;
  out.replace_extension();
  out += ".iframes.csv";
  return out;
}

ComplexityTrace parse_complexity_trace(const std::string& csv_text,
                                       const std::string* sidecar_text) {
  std::vector<ComplexitySample> samples;
  for (auto line : data_lines(csv_text, "time_s,si,ti")) {
    auto fields = text::split(line, ',');
    if (fields.size() != 3) {
      throw ParseError("malformed complexity row '" + std::string(line) + "'");
    }
    samples.push_back({text::parse_double(fields[0], "time"),
                       text::parse_double(fields[1], "si"),
                       text::parse_double(fields[2], "ti")});
  }
  if (sidecar_text == nullptr) return ComplexityTrace(std::move(samples));

  // Sidecar: optional "# meta: fps=25,gop_frames=125" line, then a CSV with
  // header iframe_times_s and one timestamp per row.
  double fps = 25.0;
  int gop = 125;
  for (auto line : text::lines(*sidecar_text)) {
    line = text::trim(line);
    constexpr std::string_view kMeta = "# meta:";
    if (line.substr(0, kMeta.size()) != kMeta) continue;
    for (auto kv : text::split(line.substr(kMeta.size()), ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string_view::npos) throw ParseError("bad meta entry");
      const auto key = text::trim(kv.substr(0, eq));
      const double value = text::parse_double(kv.substr(eq + 1), key);
      if (key == "fps") {
        fps = value;
      } else if (key == "gop_frames") {
        gop = static_cast<int>(std::lround(value));
      } else {
        throw ParseError("unknown meta key '" + std::string(key) + "'");
      }
    }
  }
  std::vector<double> iframes;
  for (auto line : data_lines(*sidecar_text, "iframe_times_s")) {
    iframes.push_back(text::parse_double(line, "iframe time"));
  }
  return ComplexityTrace(std::move(samples), fps, gop, std::move(iframes));
}

ComplexityTrace load_complexity_trace(const std::filesystem::path& path) {
  const auto csv = text::read_file(path);
  const auto sidecar = iframe_sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    const auto side = text::read_file(sidecar);
    return parse_complexity_trace(csv, &side);
  }
  return parse_complexity_trace(csv, nullptr);
}

void save_complexity_trace(const ComplexityTrace& trace,
                           const std::filesystem::path& path) {
  std::string csv = "time_s,si,ti\n";
  for (const auto& s : trace.samples()) {
    csv += text::format_double(s.time_s) + ',' + text::format_double(s.si) +
           ',' + text::format_double(s.ti) + '\n';
  }
  text::write_file(path, csv);
  std::string side = "# meta: fps=" + text::format_double(trace.fps()) +
                     ",gop_frames=" + std::to_string(trace.gop_frames()) +
                     "\niframe_times_s\n";
  for (double t : trace.iframe_times()) side += text::format_double(t) + '\n';
  text::write_file(iframe_sidecar_path(path), side);
}

ComplexityTrace generate_synthetic_complexity_trace(const VideoGenSpec& spec) {
  if (!(spec.duration_s > 0.0) || spec.mean_si < 0.0 || spec.mean_ti < 0.0 ||
      !(spec.mean_scene_s > 0.0)) {
    throw ValidationError("invalid video generation spec");
  }
  const auto n = static_cast<std::size_t>(
      std::ceil(spec.duration_s / kComplexityPeriodSec - 1e-9));
  std::mt19937_64 rng(mix_seed(spec.seed ^ 0x5157ULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::exponential_distribution<double> scene_len(1.0 / spec.mean_scene_s);

  constexpr double kJitterPhi = 0.9;
  constexpr double kJitterScale = 0.06;
  std::vector<ComplexitySample> samples(n);
  double scene_end = 0.0;
  double si_level = spec.mean_si;
  double ti_level = spec.mean_ti;
  double si_jitter = 0.0;
  double ti_jitter = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * kComplexityPeriodSec;
    if (t >= scene_end) {
      scene_end = t + std::max(2.0, scene_len(rng));
      si_level = spec.mean_si * std::exp(0.25 * normal(rng));
      ti_level = spec.mean_ti * std::exp(0.35 * normal(rng));
    }
    si_jitter = kJitterPhi * si_jitter + kJitterScale * normal(rng);
    ti_jitter = kJitterPhi * ti_jitter + kJitterScale * normal(rng);
    samples[i] = {t, std::max(0.0, si_level * (1.0 + si_jitter)),
                  std::max(0.0, ti_level * (1.0 + ti_jitter))};
  }
  return ComplexityTrace(std::move(samples), spec.fps, spec.gop_frames);
}

// ---------------------------------------------------------------------------
// SI/TI

namespace detail {

std::vector<double> area_downsample(std::span<const std::uint8_t> plane,
                                    int width, int height, int out_width,
                                    int out_height) {
  std::vector<double> out(static_cast<std::size_t>(out_width) * out_height, 0.0);
  const double sx = static_cast<double>(width) / out_width;
  const double sy = static_cast<double>(height) / out_height;
  for (int oy = 0; oy < out_height; ++oy) {
    const double y0 = oy * sy;
    const double y1 = y0 + sy;
    for (int ox = 0; ox < out_width; ++ox) {
      const double x0 = ox * sx;
      const double x1 = x0 + sx;
      double acc = 0.0;
      for (int y = static_cast<int>(std::floor(y0));
           y < std::min(height, static_cast<int>(std::ceil(y1))); ++y) {
        const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        if (wy <= 0.0) continue;
        for (int x = static_cast<int>(std::floor(x0));
             x < std::min(width, static_cast<int>(std::ceil(x1))); ++x) {
          const double wx =
              std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          if (wx <= 0.0) continue;
          acc += wx * wy * plane[static_cast<std::size_t>(y) * width + x];
        }
      }
      out[static_cast<std::size_t>(oy) * out_width + ox] = acc / (sx * sy);
    }
  }
  return out;
}

double sobel_magnitude_stddev(std::span<const double> p, int width,
                              int height) {
  if (width < 3 || height < 3) return 0.0;
  const auto at = [&](int x, int y) {
    return p[static_cast<std::size_t>(y) * width + x];
  };
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t count = 0;
  for (int y = 1; y + 1 < height; ++y) {
    for (int x = 1; x + 1 < width; ++x) {
      const double gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)) -
                        (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
      const double gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)) -
                        (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
      const double mag = std::sqrt(gx * gx + gy * gy);
      sum += mag;
      sum_sq += mag * mag;
      ++count;
    }
  }
  const double mean = sum / static_cast<double>(count);
  return std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean));
}

}  // namespace detail

std::vector<ComplexitySample> compute_si_ti(const FrameSequence& seq,
                                            const SiTiConfig& cfg) {
  if (seq.frames.empty()) throw ValidationError("frame sequence is empty");
  if (!(seq.fps > 0.0) || seq.width <= 0 || seq.height <= 0) {
    throw ValidationError("frame sequence needs positive fps and dimensions");
  }
  const auto plane_size = static_cast<std::size_t>(seq.width) * seq.height;
  for (const auto& f : seq.frames) {
    if (f.size() != plane_size) {
      throw ValidationError("frame dimension mismatch");
    }
  }
  const int out_w = std::min(seq.width, cfg.target_width);
  const int out_h = std::min(seq.height, cfg.target_height);
  const auto n_frames = static_cast<double>(seq.frames.size());
  const auto n_out = static_cast<std::size_t>(
      std::ceil(n_frames * cfg.target_fps / seq.fps - 1e-9));

  std::vector<ComplexitySample> out;
  out.reserve(n_out);
  std::vector<double> prev;
  for (std::size_t j = 0; j < n_out; ++j) {
    const auto src = static_cast<std::size_t>(
        std::floor(static_cast<double>(j) * seq.fps / cfg.target_fps + 1e-9));
    const auto cur = detail::area_downsample(seq.frames[src], seq.width,
                                             seq.height, out_w, out_h);
    const double si = detail::sobel_magnitude_stddev(cur, out_w, out_h);
    double ti = 0.0;
    if (!prev.empty()) {
      double sum = 0.0;
      double sum_sq = 0.0;
      for (std::size_t k = 0; k < cur.size(); ++k) {
        const double d = cur[k] - prev[k];
        sum += d;
        sum_sq += d * d;
      }
      const double n = static_cast<double>(cur.size());
      ti = std::sqrt(std::max(0.0, sum_sq / n - (sum / n) * (sum / n)));
    }
    out.push_back({static_cast<double>(j) / cfg.target_fps, si, ti});
    prev = cur;
  }
  return out;
}

FrameSequence load_raw_frames(const std::filesystem::path& path, int width,
                              int height, double fps) {
  if (width <= 0 || height <= 0 || !(fps > 0.0)) {
    throw ConfigError("raw frames need positive width, height and fps");
  }
  const auto bytes = text::read_file(path);
  const auto plane = static_cast<std::size_t>(width) * height;
  if (bytes.empty() || bytes.size() % plane != 0) {
    throw ParseError("raw frame file size is not a multiple of the plane size");
  }
  FrameSequence seq{width, height, fps, {}};
  for (std::size_t off = 0; off < bytes.size(); off += plane) {
    seq.frames.emplace_back(bytes.begin() + static_cast<long>(off),
                            bytes.begin() + static_cast<long>(off + plane));
  }
  return seq;
}

}  // namespace anableps::trace

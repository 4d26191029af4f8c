// SPDX-License-Identifier: Apache-2.0
//
// Network bandwidth traces, video complexity traces and SI/TI extraction.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace anableps::trace {

inline constexpr double kTraceGranularitySec = 0.5;
inline constexpr double kComplexityPeriodSec = 0.25;

struct BandwidthSample {
  double time_s = 0.0;
  double kbps = 0.0;
};

// Available bandwidth on a fixed 0.5 s grid. Sample i holds for
// [time_i, time_i + 0.5).
class NetworkTrace {
 public:
  NetworkTrace() = default;
  // Validates; throws ValidationError.
  explicit NetworkTrace(std::vector<BandwidthSample> samples);

  const std::vector<BandwidthSample>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  double start_time() const { return samples_.front().time_s; }
  // Covered span in seconds (last sample extends one granularity step).
  double duration() const {
    return static_cast<double>(samples_.size()) * kTraceGranularitySec;
  }
  double mean_kbps() const;

  // Bandwidth at session-relative time t (t = 0 maps to start_time()).
  // Clamps to the first/last sample outside the covered span.
  double kbps_at(double t) const;

  // Earliest time at which `bytes` have been served when transmission starts
  // at session-relative time `start` on a link following this trace.
  double finish_time(double start, double bytes) const;

  // Minimum over samples whose timestamps fall in [t0, t1] (session-relative).
  double min_kbps_in(double t0, double t1) const;

  // Sub-trace starting at session-relative `offset` (multiple of 0.5 s),
  // re-based to time 0.
  NetworkTrace slice(double offset, double duration) const;

 private:
  std::vector<BandwidthSample> samples_;
};

struct ComplexitySample {
  double time_s = 0.0;
  double si = 0.0;
  double ti = 0.0;
};

// Per-0.25 s SI/TI series plus the I-frame schedule of one video.
class ComplexityTrace {
 public:
  ComplexityTrace() = default;
  ComplexityTrace(std::vector<ComplexitySample> samples, double fps,
                  int gop_frames, std::vector<double> iframe_times);
  // Default schedule: an I frame every gop_frames/fps seconds from t = 0.
  ComplexityTrace(std::vector<ComplexitySample> samples, double fps = 25.0,
                  int gop_frames = 125);

  const std::vector<ComplexitySample>& samples() const { return samples_; }
  const std::vector<double>& iframe_times() const { return iframe_times_; }
  double fps() const { return fps_; }
  int gop_frames() const { return gop_frames_; }
  double gop_seconds() const { return gop_frames_ / fps_; }
  double duration() const {
    return static_cast<double>(samples_.size()) * kComplexityPeriodSec;
  }

  // Samples whose time lies in [t0, t1).
  std::span<const ComplexitySample> window(double t0, double t1) const;
  // True when a frame captured at `capture_time` is an I frame.
  bool is_iframe(double capture_time) const;
  // True when any I frame is captured in [t0, t1).
  bool has_iframe_in(double t0, double t1) const;

 private:
  void validate() const;

  std::vector<ComplexitySample> samples_;
  double fps_ = 25.0;
  int gop_frames_ = 125;
  std::vector<double> iframe_times_;
};

enum class TraceModel { kMarkovStep, kAr1, kSquareWave };

struct TraceGenSpec {
  double duration_s = 300.0;
  double mean_kbps = 4000.0;
  double std_kbps = 1000.0;
  TraceModel model = TraceModel::kMarkovStep;
  std::uint64_t seed = 0;
};

TraceModel parse_trace_model(const std::string& name);
std::string to_string(TraceModel model);

struct FrameSequence {
  int width = 0;
  int height = 0;
  double fps = 25.0;
  std::vector<std::vector<std::uint8_t>> frames;  // row-major luma planes
};

struct SiTiConfig {
  int target_width = 192;
  int target_height = 108;
  double target_fps = 4.0;
};

// Loads a `time_s,bandwidth_kbps` CSV, resampling onto the 0.5 s grid by
// linear interpolation when the source spacing differs.
NetworkTrace load_network_trace(const std::filesystem::path& path);
NetworkTrace parse_network_trace(const std::string& csv_text);
void save_network_trace(const NetworkTrace& trace,
                        const std::filesystem::path& path);
std::string format_network_trace(const NetworkTrace& trace);

NetworkTrace generate_synthetic_network_trace(const TraceGenSpec& spec);

// Loads `time_s,si,ti` plus the optional `<stem>.iframes.csv` sidecar.
ComplexityTrace load_complexity_trace(const std::filesystem::path& path);
ComplexityTrace parse_complexity_trace(const std::string& csv_text,
                                       const std::string* sidecar_text);
void save_complexity_trace(const ComplexityTrace& trace,
                           const std::filesystem::path& path);
std::filesystem::path iframe_sidecar_path(const std::filesystem::path& path);

struct VideoGenSpec {
  double duration_s = 120.0;
  double mean_si = 60.0;
  double mean_ti = 25.0;
  double mean_scene_s = 8.0;
  double fps = 25.0;
  int gop_frames = 125;
  std::uint64_t seed = 0;
};

// Synthetic scene-structured SI/TI series standing in for decoded clips.
ComplexityTrace generate_synthetic_complexity_trace(const VideoGenSpec& spec);

// Per retained frame (4 FPS after area-average downscaling): SI as the
// standard deviation of the Sobel magnitude, TI as the standard deviation
// of the difference with the previous retained frame.
std::vector<ComplexitySample> compute_si_ti(const FrameSequence& seq,
                                            const SiTiConfig& cfg = {});

// Raw concatenated 8-bit luma planes.
FrameSequence load_raw_frames(const std::filesystem::path& path, int width,
                              int height, double fps);

namespace detail {
std::vector<double> area_downsample(std::span<const std::uint8_t> plane,
                                    int width, int height, int out_width,
                                    int out_height);
double sobel_magnitude_stddev(std::span<const double> plane, int width,
                              int height);
}  // namespace detail

}  // namespace anableps::trace

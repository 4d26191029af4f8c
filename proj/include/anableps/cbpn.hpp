// SPDX-License-Identifier: Apache-2.0
//
// Bitrate range predictor: given recent targets, encoder error and content
// statistics, predict the bitrate the encoder will actually produce in the
// next second as a baseline value v and an error offset e.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "anableps/media_model.hpp"
#include "anableps/neural.hpp"
#include "anableps/trace_io.hpp"

namespace anableps::cbpn {

inline constexpr double kKbpsScale = 6100.0;
inline constexpr int kStateRows = 5;  // b, I, si, ti, dif

// `window_length` L scales every row: L targets and L encoder errors, I-frame
// flags for the past L-1 seconds plus the predicted one, and L content
// samples over the last L/2 seconds. L = 4 gives the reference windows.
struct StateLayout {
  int window_length = 4;
  double si_max = 120.0;
  double ti_max = 80.0;

  void validate() const;
};

// Row-major 5 x L matrix, oldest column first.
struct CbpnState {
  int length = 4;
  std::vector<double> values;

  std::span<const double> row(int r) const;
};

// Builds the state for predicting slot `slot` (the second [slot, slot+1)).
// `targets` and `actuals` hold at least slots 0..slot-1; `next_target` is the
// target of `slot` itself. Requires slot >= L.
CbpnState assemble_state(std::span<const double> targets, std::span<const double> actuals,
                         double next_target, int slot, const trace::ComplexityTrace& video,
                         const StateLayout& layout);

struct BitrateRange {
  double v = 0.0;  // kbps
  double e = 0.0;  // kbps, >= 0

  double lower() const { return v - e; }
  double upper() const { return v + e; }
};

struct ModelConfig {
  StateLayout layout;
  int conv_filters = 32;
  int gru_hidden = 32;
  int hidden = 32;
  int error_filters = 32;
  int error_kernel = 2;
};

class CbpnModel {
 public:
  explicit CbpnModel(ModelConfig cfg = {}, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  nn::Network& baseline() { return baseline_; }
  const nn::Network& baseline() const { return baseline_; }
  nn::Network& error() { return error_; }
  const nn::Network& error() const { return error_; }

  // Normalised baseline value and the features shared with the error head.
  struct BaselineOut {
    double v = 0.0;
    std::vector<double> features;
  };
  BaselineOut baseline_forward(const CbpnState& s) const;
  // Pre-softplus output of the error head.
  double error_logit(const CbpnState& s, std::span<const double> features) const;

  BitrateRange predict(const CbpnState& s) const;

  void save(const std::filesystem::path& path) const;
  static CbpnModel load(const std::filesystem::path& path);

 private:
  ModelConfig cfg_;
  nn::Network baseline_;
  nn::Network error_;
};

struct Sample {
  CbpnState state;
  double actual = 0.0;       // kbps
  double next_target = 0.0;  // kbps, the target of the predicted slot
  int session = 0;
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  // Samples whose session id satisfies session % 10 != 9 / == 9.
  std::pair<Dataset, Dataset> split_by_session() const;
};

// Random target walk: with probability `jump_prob` a fresh uniform draw in
// [300, 6100], otherwise a uniform step in [-max_step, max_step], clamped.
struct WalkConfig {
  double jump_prob = 0.25;
  double max_step = 800.0;
};

struct DatasetConfig {
  int sessions_per_video = 3;
  WalkConfig walk;
  media::EncoderConfig encoder;
  StateLayout layout;
  std::uint64_t seed = 0;
};

// Encodes every video end to end under random target walks. Session ids are
// assigned sequentially across (video, repeat).
Dataset build_dataset(std::span<const trace::ComplexityTrace> videos, const DatasetConfig& cfg);

void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct TrainConfig {
  int epochs = 30;
  int batch = 32;
  nn::AdamConfig adam{};
  // The learning rate decays linearly to this fraction of adam.lr.
  double final_lr_fraction = 0.1;
  double coverage = 0.85;
  std::uint64_t seed = 0;
};

// Mean training loss per epoch.
using Curve = std::vector<double>;

// MSE on the normalised scale; updates only the baseline network.
Curve train_baseline(CbpnModel& model, const Dataset& data, const TrainConfig& cfg);
// Pinball loss at quantile cfg.coverage on |actual - v|; the baseline network
// is read-only throughout.
Curve train_error(CbpnModel& model, const Dataset& data, const TrainConfig& cfg);

struct Metrics {
  double mad = 0.0;            // mean |v - actual| / 6100
  std::optional<double> pcc;   // empty when either series has zero variance
  double cr = 0.0;             // fraction of actuals inside [v - e, v + e]
  std::size_t count = 0;
};

Metrics compute_metrics(std::span<const BitrateRange> predictions, std::span<const double> actuals);
Metrics eval_metrics(const CbpnModel& model, const Dataset& data);
// Reference predictor v = next target, e = 0.
Metrics eval_last_target(const Dataset& data);

}  // namespace anableps::cbpn

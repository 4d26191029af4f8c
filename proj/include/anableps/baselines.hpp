// SPDX-License-Identifier: Apache-2.0
//
// Non-learned reference controllers: a GCC-style delay and loss controller,
// a fixed bitrate and a lookahead oracle that reads the link trace.
#pragma once

#include <deque>

#include "anableps/netsim.hpp"
#include "anableps/trace_io.hpp"

namespace anableps::baselines {

struct GccConfig {
  double high_loss = 0.10;       // above: back off by (1 - 0.5 p)
  double low_loss = 0.02;        // below: grow
  double increase = 1.05;
  double overuse_backoff = 0.85;  // times the received rate
  int trend_window = 6;           // RTT samples in the slope fit
  double threshold_init = 0.0125;  // s of RTT per s
  double threshold_gain = 0.05;
  double threshold_min = 0.01;
  double threshold_max = 0.2;
  // Slopes further than this above the threshold do not move it, so a
  // sudden overuse cannot drag the threshold up with it.
  double threshold_outlier = 0.05;

  void validate() const;
};

enum class DetectorState { kIncrease, kHold, kDecrease };

struct GccState {
  double delay_rate = 1000.0;
  double loss_rate = 1000.0;
  double slope = 0.0;
  double threshold = 0.01;
  DetectorState detector = DetectorState::kHold;
  std::deque<double> rtts;  // oldest first
};

GccState gcc_init(double start_kbps, const GccConfig& cfg = {});

// Least-squares slope of `y` against its index; 0 with fewer than 2 points.
double trend_slope(const std::deque<double>& y);

// Folds in one receiver report and returns the new target. Both branches are
// re-based on the returned target so neither drifts away from what is sent.
double gcc_step(GccState& state, const netsim::ReceiverObservation& obs,
                const GccConfig& cfg = {});

class GccController : public netsim::BitrateController {
 public:
  explicit GccController(GccConfig cfg = {});
  double next_target(const netsim::DecisionContext& ctx) override;
  const GccState& state() const { return state_; }

 private:
  GccConfig cfg_;
  GccState state_;
  bool started_ = false;
  std::size_t consumed_ = 0;
};

class FixedController : public netsim::BitrateController {
 public:
  // Throws ValidationError outside [300, 6100].
  explicit FixedController(double kbps);
  double next_target(const netsim::DecisionContext&) override { return kbps_; }

 private:
  double kbps_;
};

// Target for second t is safety x the minimum bandwidth over [t, t + 1].
class OracleController : public netsim::BitrateController {
 public:
  OracleController(trace::NetworkTrace trace, double safety = 0.85);
  double next_target(const netsim::DecisionContext& ctx) override;

 private:
  trace::NetworkTrace trace_;
  double safety_;
};

}  // namespace anableps::baselines

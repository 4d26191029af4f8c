// SPDX-License-Identifier: Apache-2.0
#include "anableps/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "anableps/common.hpp"

namespace anableps::baselines {

void GccConfig::validate() const {
  if (!(low_loss >= 0.0 && low_loss <= high_loss && high_loss <= 1.0)) {
    throw ValidationError("gcc: need 0 <= low_loss <= high_loss <= 1");
  }
  if (!(increase >= 1.0)) throw ValidationError("gcc: increase must be >= 1");
  if (!(overuse_backoff > 0.0 && overuse_backoff <= 1.0)) {
    throw ValidationError("gcc: overuse_backoff must lie in (0, 1]");
  }
  if (trend_window < 2) throw ValidationError("gcc: trend_window must be >= 2");
  if (!(threshold_min > 0.0 && threshold_min <= threshold_init && threshold_init <= threshold_max)) {
    throw ValidationError("gcc: need 0 < threshold_min <= threshold_init <= threshold_max");
  }
  if (!(threshold_gain >= 0.0 && threshold_gain <= 1.0)) {
    throw ValidationError("gcc: threshold_gain must lie in [0, 1]");
  }
}

GccState gcc_init(double start_kbps, const GccConfig& cfg) {
  cfg.validate();
  GccState s;
  s.delay_rate = s.loss_rate = clamp_bitrate(start_kbps);
  s.threshold = cfg.threshold_init;
  return s;
}

double trend_slope(const std::deque<double>& y) {
  const std::size_t n = y.size();
  if (n < 2) return 0.0;
  const double mean_x = static_cast<double>(n - 1) / 2.0;
  double mean_y = 0.0;
  for (double v : y) mean_y += v;
  mean_y /= static_cast<double>(n);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - mean_x;
    sxy += dx * (y[i] - mean_y);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

double gcc_step(GccState& s, const netsim::ReceiverObservation& obs, const GccConfig& cfg) {
  // Loss branch.
  if (obs.p > cfg.high_loss) {
    s.loss_rate *= 1.0 - 0.5 * obs.p;
  } else if (obs.p < cfg.low_loss) {
    s.loss_rate *= cfg.increase;
  }

  // Delay branch.
  s.rtts.push_back(obs.d);
  while (s.rtts.size() > static_cast<std::size_t>(cfg.trend_window)) s.rtts.pop_front();
  s.slope = trend_slope(s.rtts);
  if (s.slope > s.threshold) {
    s.detector = DetectorState::kDecrease;
    s.delay_rate = cfg.overuse_backoff * obs.r;
  } else {
    s.detector = DetectorState::kIncrease;
    s.delay_rate *= cfg.increase;
  }
  const double excess = std::abs(s.slope) - s.threshold;
  if (excess < cfg.threshold_outlier) {
    s.threshold = std::clamp(s.threshold + cfg.threshold_gain * excess, cfg.threshold_min,
                             cfg.threshold_max);
  }

  const double target = clamp_bitrate(std::min(s.loss_rate, s.delay_rate));
  s.loss_rate = s.delay_rate = target;
  return target;
}

GccController::GccController(GccConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double GccController::next_target(const netsim::DecisionContext& ctx) {
  if (!started_) {
    state_ = gcc_init(ctx.previous_target, cfg_);
    started_ = true;
  }
  double target = clamp_bitrate(ctx.previous_target);
  state_.detector = DetectorState::kHold;
  for (; consumed_ < ctx.delivered.size(); ++consumed_) {
    target = gcc_step(state_, ctx.delivered[consumed_], cfg_);
  }
  return target;
}

FixedController::FixedController(double kbps) : kbps_(kbps) {
  if (!(kbps >= kMinBitrateKbps && kbps <= kMaxBitrateKbps)) {
    throw ValidationError("fixed bitrate must lie in [300, 6100] kbps");
  }
}

OracleController::OracleController(trace::NetworkTrace trace, double safety)
    : trace_(std::move(trace)), safety_(safety) {
  if (!(safety > 0.0 && safety <= 1.0)) throw ValidationError("oracle safety must lie in (0, 1]");
}

double OracleController::next_target(const netsim::DecisionContext& ctx) {
  const double t = static_cast<double>(ctx.second);
  return clamp_bitrate(safety_ * trace_.min_kbps_in(t, t + 1.0));
}

}  // namespace anableps::baselines

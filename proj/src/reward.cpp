// SPDX-License-Identifier: Apache-2.0
#include "anableps/reward.hpp"

#include <algorithm>
#include <cmath>

#include "anableps/common.hpp"

namespace anableps::abrn {

void RewardParams::validate() const {
  if (alpha < 0.0 || lambda < 0.0 || gamma < 0.0 || delta < 0.0) {
    throw ValidationError("reward weights must be non-negative");
  }
}

double reward(double quality, double previous_quality, double lost_frame_rate,
              double frame_delay_s, const RewardParams& params) {
  const double f = std::clamp(frame_delay_s, 0.0, kMaxFrameDelayPenaltySec);
  return params.alpha * quality -
         params.lambda * std::abs(quality - previous_quality) -
         params.gamma * lost_frame_rate - params.delta * f;
}

}  // namespace anableps::abrn

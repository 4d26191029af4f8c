// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace anableps::abrn {

struct RewardParams {
  double alpha = 8.0;   // quality
  double lambda = 0.5;  // quality smoothness
  double gamma = 4.0;   // lost frame rate
  double delta = 2.0;   // frame delay, seconds

  void validate() const;
};

inline constexpr double kMaxFrameDelayPenaltySec = 2.0;

// R = alpha*m - lambda*|m - m_prev| - gamma*h - delta*min(f, 2).
double reward(double quality, double previous_quality, double lost_frame_rate,
              double frame_delay_s, const RewardParams& params = {});

}  // namespace anableps::abrn

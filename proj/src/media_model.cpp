// SPDX-License-Identifier: Apache-2.0
#include "anableps/media_model.hpp"

#include <algorithm>
#include <cmath>

namespace anableps::media {

void EncoderConfig::validate() const {
  if (!(fps > 0.0) || gop_frames < 1) {
    throw ValidationError("encoder fps and gop_frames must be positive");
  }
  if (!(min_bitrate > 0.0) || !(min_bitrate < max_bitrate)) {
    throw ValidationError("encoder requires 0 < min_bitrate < max_bitrate");
  }
  if (!(iframe_weight >= 1.0)) throw ValidationError("iframe_weight must be >= 1");
  if (!(fluct.phi >= 0.0 && fluct.phi < 1.0)) {
    throw ValidationError("phi must lie in [0, 1)");
  }
  if (!(fluct.sigma >= 0.0)) throw ValidationError("sigma must be >= 0");
  if (!(vbv_multiplier >= 1.0)) throw ValidationError("vbv_multiplier must be >= 1");
  if (!(ti_max > 0.0)) throw ValidationError("ti_max must be positive");
}

std::uint64_t EncodedSlot::total_bytes() const {
  std::uint64_t total = 0;
  for (const auto& f : frames) total += f.size_bytes;
  return total;
}

double normalized_ti(std::span<const trace::ComplexitySample> complexity,
                     double ti_max) {
  if (complexity.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : complexity) acc += s.ti;
  return std::clamp(acc / static_cast<double>(complexity.size()) / ti_max, 0.0, 1.0);
}

EncodeResult encode_slot(double target,
                         std::span<const trace::ComplexitySample> complexity,
                         std::span<const bool> iframe_flags, int slot_index,
                         const EncoderState& state, const EncoderConfig& cfg,
                         std::mt19937_64& rng) {
  if (!(target >= cfg.min_bitrate && target <= cfg.max_bitrate)) {
    throw ValidationError("target bitrate outside encoder range");
  }
  const auto n_frames = static_cast<std::size_t>(std::lround(cfg.fps));
  if (iframe_flags.size() != n_frames) {
    throw ValidationError("I-frame flags must cover every frame of the slot");
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  const double eps = normal(rng);

  const double ti_n = normalized_ti(complexity, cfg.ti_max);
  const double b_eff = (cfg.rate_lag && state.previous_target > 0.0)
                           ? 0.5 * (target + state.previous_target)
                           : target;
  EncoderState next;
  next.previous_target = target;
  next.log_multiplier = cfg.fluct.phi * state.log_multiplier +
                        cfg.fluct.sigma * (1.0 + ti_n) * eps;
  const double mean_gain = 1.0 + cfg.fluct.beta_ti * (ti_n - 0.5);
  const double gain = std::exp(next.log_multiplier) * mean_gain;
  const double actual_ideal =
      std::clamp(b_eff * gain, 0.5 * b_eff, cfg.vbv_multiplier * b_eff);

  const auto total_bytes =
      static_cast<std::uint64_t>(std::llround(actual_ideal * 1000.0 / 8.0));
  std::size_t n_iframes = 0;
  for (bool f : iframe_flags) n_iframes += f ? 1 : 0;
  const double units = static_cast<double>(n_frames - n_iframes) +
                       cfg.iframe_weight * static_cast<double>(n_iframes);
  const double unit_bytes = static_cast<double>(total_bytes) / units;

  EncodedSlot slot;
  slot.slot_index = slot_index;
  slot.target = target;
  slot.effective_target = b_eff;
  slot.frames.reserve(n_frames);
  // Cumulative rounding keeps the frame sizes summing to total_bytes.
  double cumulative = 0.0;
  std::uint64_t assigned = 0;
  for (std::size_t k = 0; k < n_frames; ++k) {
    cumulative += iframe_flags[k] ? cfg.iframe_weight * unit_bytes : unit_bytes;
    const auto upto = (k + 1 == n_frames)
                          ? total_bytes
                          : static_cast<std::uint64_t>(std::llround(cumulative));
    const auto size = static_cast<std::uint32_t>(upto - assigned);
    assigned = upto;
    slot.frames.push_back({static_cast<double>(slot_index) +
                               static_cast<double>(k) / cfg.fps,
                           size, iframe_flags[k]});
  }
  slot.actual = static_cast<double>(total_bytes) * 8.0 / 1000.0;
  return {std::move(slot), next};
}

ComplexityLevel normalized_complexity(
    std::span<const trace::ComplexitySample> complexity,
    const QualityModel& qm) {
  if (complexity.empty()) return {};
  double si = 0.0;
  double ti = 0.0;
  for (const auto& s : complexity) {
    si += s.si;
    ti += s.ti;
  }
  const auto n = static_cast<double>(complexity.size());
  return {std::clamp(si / n / qm.si_max, 0.0, 1.0),
          std::clamp(ti / n / qm.ti_max, 0.0, 1.0)};
}

double quality_score(double played_kbps, ComplexityLevel level,
                     const QualityModel& qm) {
  if (!(played_kbps > 0.0)) return 0.0;
  const double theta = qm.theta0 * (1.0 + 0.5 * (level.si_n + level.ti_n));
  const double m = std::log1p(played_kbps / theta) /
                   std::log1p(kMaxBitrateKbps / theta);
  return std::clamp(m, 0.0, 1.0);
}

std::vector<Packet> packetize(std::uint32_t frame_bytes, double capture_time,
                              std::uint32_t frame_id, std::uint32_t mtu) {
  if (frame_bytes == 0 || mtu == 0) {
    throw ValidationError("packetize needs a positive frame size and MTU");
  }
  const std::uint32_t count = (frame_bytes + mtu - 1) / mtu;
  std::vector<Packet> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t size =
        (i + 1 == count) ? frame_bytes - mtu * (count - 1) : mtu;
    out.push_back({frame_id, static_cast<std::uint16_t>(i),
                   static_cast<std::uint16_t>(count), size, capture_time});
  }
  return out;
}

}  // namespace anableps::media

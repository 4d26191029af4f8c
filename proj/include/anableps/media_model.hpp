// SPDX-License-Identifier: Apache-2.0
//
// Parametric VBR encoder, RTP-style packetizer and a bounded rate-quality
// proxy.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "anableps/common.hpp"
#include "anableps/trace_io.hpp"

namespace anableps::media {

struct FluctuationParams {
  double phi = 0.6;      // AR(1) coefficient of the log multiplier
  double sigma = 0.15;   // innovation scale, multiplied by (1 + ti_n)
  double beta_ti = 0.5;  // TI coupling of the mean multiplier
};

struct EncoderConfig {
  double fps = 25.0;
  int gop_frames = 125;
  double vbv_multiplier = 2.0;
  double min_bitrate = kMinBitrateKbps;
  double max_bitrate = kMaxBitrateKbps;
  double iframe_weight = 6.0;
  FluctuationParams fluct;
  bool rate_lag = true;
  double ti_max = 80.0;  // TI normaliser for ti_n

  void validate() const;
};

struct EncoderState {
  double log_multiplier = 0.0;  // AR(1) state z
  double previous_target = -1.0;  // < 0 before the first slot
};

struct EncodedFrame {
  double capture_time = 0.0;
  std::uint32_t size_bytes = 0;
  bool is_iframe = false;
};

struct EncodedSlot {
  int slot_index = 0;
  double target = 0.0;            // kbps requested
  double effective_target = 0.0;  // kbps after rate-control lag
  double actual = 0.0;            // kbps produced
  std::vector<EncodedFrame> frames;

  std::uint64_t total_bytes() const;
};

struct EncodeResult {
  EncodedSlot slot;
  EncoderState state;
};

// Normalised mean TI of a slot, in [0, 1].
double normalized_ti(std::span<const trace::ComplexitySample> complexity,
                     double ti_max);

// Encodes one 1 s slot. `iframe_flags` has one entry per frame of the slot.
// Exactly one standard-normal draw is taken from `rng` per call, so the
// random stream is independent of the requested targets.
EncodeResult encode_slot(double target,
                         std::span<const trace::ComplexitySample> complexity,
                         std::span<const bool> iframe_flags, int slot_index,
                         const EncoderState& state, const EncoderConfig& cfg,
                         std::mt19937_64& rng);

struct QualityModel {
  double theta0 = 500.0;
  double si_max = 120.0;
  double ti_max = 80.0;
};

struct ComplexityLevel {
  double si_n = 0.0;
  double ti_n = 0.0;
};

ComplexityLevel normalized_complexity(
    std::span<const trace::ComplexitySample> complexity, const QualityModel& qm);

// Log-law quality of the bitrate played in one second, normalised so that
// 6100 kbps maps to 1. Zero when nothing was played.
double quality_score(double played_kbps, ComplexityLevel level,
                     const QualityModel& qm);

inline constexpr std::uint32_t kDefaultMtu = 1200;

struct Packet {
  std::uint32_t frame_id = 0;
  std::uint16_t index_in_frame = 0;
  std::uint16_t packets_in_frame = 0;
  std::uint32_t size_bytes = 0;
  double capture_time = 0.0;
};

std::vector<Packet> packetize(std::uint32_t frame_bytes, double capture_time,
                              std::uint32_t frame_id,
                              std::uint32_t mtu = kDefaultMtu);

}  // namespace anableps::media

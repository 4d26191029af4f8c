// SPDX-License-Identifier: Apache-2.0
//
// Tick-driven simulation of sender -> drop-tail bottleneck -> receiver with
// NACK-based retransmission, frame assembly and per-second receiver reports.
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "anableps/media_model.hpp"
#include "anableps/reward.hpp"
#include "anableps/trace_io.hpp"

namespace anableps::netsim {

struct LinkConfig {
  trace::NetworkTrace trace;
  double base_owd = 0.025;
  // Bytes; <= 0 selects 150% of one second at the trace's mean bandwidth.
  double queue_capacity = 0.0;
  double tick = 0.010;
  double random_loss = 0.0;
  std::uint32_t mtu = media::kDefaultMtu;
  // A packet that goes missing this many times (original plus NACK-driven
  // retransmissions) takes its frame down with it.
  int retx_limit = 3;
  double frame_deadline = 2.0;
  // Test hook: return true to drop transmission `attempt` (0 = first) of a
  // packet before it reaches the queue.
  std::function<bool(std::uint64_t seq, int attempt)> forced_drop;

  double resolved_queue_capacity() const;
  void validate() const;
};

struct ReceiverObservation {
  int second_index = 0;
  double s = 0.0;  // sending bitrate, kbps
  double r = 0.0;  // receiving bitrate, kbps
  double d = 0.0;  // mean RTT, s
  double p = 0.0;  // first-transmission loss rate
  double n = 0.0;  // NACKs emitted
  double f = 0.0;  // mean frame delay, s
  double h = 0.0;  // lost frame rate
  double played_fps = 0.0;
  double played_kbps = 0.0;
};

enum class EventKind : std::uint8_t {
  kFrameCaptured,
  kSend,
  kRetransmit,
  kDrop,
  kArrive,
  kNack,
  kFrameComplete,
  kFrameLost,
};

const char* to_string(EventKind kind);

// `value` carries the RTT sample for kArrive and the capture time for the
// frame events; it is 0 otherwise.
struct PacketEvent {
  double time = 0.0;
  EventKind kind = EventKind::kSend;
  std::uint64_t seq = 0;
  std::uint32_t frame_id = 0;
  std::uint32_t bytes = 0;
  std::uint8_t attempt = 0;
  double value = 0.0;
};

// Aggregates the events with time in [window_start, window_end).
ReceiverObservation receiver_stats(std::span<const PacketEvent> events,
                                   int second_index, double window_start,
                                   double window_end, double base_owd);

inline constexpr double kStallFpsThreshold = 12.0;

// Fraction of seconds whose played frame rate is below 12 fps.
double stalling_ratio(std::span<const double> played_fps);

struct SlotSummary {
  int slot_index = 0;
  double target = 0.0;
  double effective_target = 0.0;
  double actual = 0.0;
  double ti_n = 0.0;
};

struct SecondRecord {
  int second = 0;
  SlotSummary slot;
  ReceiverObservation obs;
  double quality = 0.0;
  double reward = 0.0;
};

struct SessionLog {
  std::vector<SecondRecord> seconds;
  std::vector<PacketEvent> events;

  std::vector<double> played_fps() const;
  std::string to_csv() const;
  std::string events_to_csv() const;
};

inline constexpr const char* kSessionCsvHeader =
    "second,decision_kbps,actual_kbps,send_kbps,recv_kbps,rtt_s,loss,nack,"
    "frame_delay_s,lost_frame_rate,played_fps,quality,reward";

// What the sender knows when choosing the target for slot `second`.
struct DecisionContext {
  int second = 0;
  double previous_target = 0.0;
  std::span<const ReceiverObservation> delivered;  // oldest first
  std::span<const SlotSummary> slots;              // encoded so far
  const trace::ComplexityTrace* video = nullptr;
};

class BitrateController {
 public:
  virtual ~BitrateController() = default;
  virtual double next_target(const DecisionContext& ctx) = 0;
};

struct SessionConfig {
  LinkConfig link;
  media::EncoderConfig encoder;
  media::QualityModel quality;
  abrn::RewardParams reward;
  double duration = 60.0;
  double start_bitrate = 1000.0;
  std::uint64_t seed = 0;
};

class Session {
 public:
  // `video` must outlive the session.
  Session(const trace::ComplexityTrace& video, SessionConfig cfg);

  int second() const { return second_; }
  bool done() const { return second_ >= total_seconds_; }
  int total_seconds() const { return total_seconds_; }
  double previous_target() const { return previous_target_; }
  const SessionConfig& config() const { return cfg_; }

  DecisionContext context() const;
  // Encodes the next slot at `target` (clamped to the encoder range) and
  // simulates one second.
  const SecondRecord& step(double target);

  const SessionLog& log() const { return log_; }
  SessionLog take_log() { return std::move(log_); }

 private:
  struct PacketState {
    std::uint32_t frame_id = 0;
    std::uint32_t size = 0;
  };
  struct FrameState {
    double capture_time = 0.0;
    std::uint64_t first_seq = 0;
    std::uint32_t packet_count = 0;
    std::uint32_t received = 0;
    std::uint32_t bytes = 0;
    enum class Status : std::uint8_t { kPending, kComplete, kLost } status =
        Status::kPending;
  };
  struct Transmission {
    double time = 0.0;
    std::uint64_t seq = 0;
    int attempt = 0;
  };
  struct Queued {
    std::uint64_t seq = 0;
    int attempt = 0;
    double enqueue_time = 0.0;
    std::uint32_t bytes = 0;
  };
  struct Arrival {
    double time = 0.0;
    std::uint64_t seq = 0;
    int attempt = 0;
    double send_time = 0.0;
  };
  struct Missing {
    int nack_count = 0;
    double last_nack = -1.0;
  };

  void encode_and_enqueue(double target);
  void run_tick(double t0, double t1);
  void transmit(const Transmission& tx);
  void advance_link(double t);
  void receive(const Arrival& a);
  void scan_receiver(double t);
  void declare_lost(std::uint32_t frame_id, double t);
  void emit(const PacketEvent& e) { log_.events.push_back(e); }

  const trace::ComplexityTrace& video_;
  SessionConfig cfg_;
  int total_seconds_ = 0;
  int ticks_per_second_ = 0;
  double queue_capacity_ = 0.0;
  std::mt19937_64 encoder_rng_;
  std::mt19937_64 link_rng_;

  int second_ = 0;
  double previous_target_ = 0.0;
  media::EncoderState encoder_state_;
  double previous_quality_ = 0.0;

  std::vector<PacketState> packets_;
  std::vector<FrameState> frames_;
  std::size_t oldest_pending_frame_ = 0;
  std::deque<Transmission> paced_;
  std::deque<Transmission> retx_;
  double pacer_free_ = 0.0;

  std::deque<Queued> queue_;
  double queue_bytes_ = 0.0;
  double link_free_ = 0.0;
  double head_finish_ = -1.0;
  std::deque<Arrival> arrivals_;

  std::vector<std::uint8_t> received_;
  std::uint64_t next_expected_ = 0;
  std::map<std::uint64_t, Missing> missing_;
  double rtt_estimate_ = 0.0;

  std::vector<std::size_t> second_event_start_;
  std::vector<ReceiverObservation> observations_;  // ground truth per second
  std::vector<double> delivery_times_;
  std::size_t delivered_count_ = 0;
  std::vector<SlotSummary> slots_;
  SessionLog log_;
};

SessionLog run_session(BitrateController& policy,
                       const trace::ComplexityTrace& video,
                       const SessionConfig& cfg);

}  // namespace anableps::netsim

// SPDX-License-Identifier: Apache-2.0
#include "anableps/netsim.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "text_util.hpp"

namespace anableps::netsim {

double LinkConfig::resolved_queue_capacity() const {
  if (queue_capacity > 0.0) return queue_capacity;
  return 1.5 * trace.mean_kbps() * 1000.0 / 8.0;
}

void LinkConfig::validate() const {
  if (trace.size() < 2) throw ValidationError("link needs a network trace");
  if (!(base_owd >= 0.0)) throw ValidationError("base_owd must be >= 0");
  if (!(tick > 0.0) || tick > 1.0) throw ValidationError("tick must be in (0, 1]");
  const double per_second = 1.0 / tick;
  if (std::abs(per_second - std::round(per_second)) > 1e-9) {
    throw ValidationError("tick must divide one second");
  }
  if (!(random_loss >= 0.0 && random_loss < 1.0)) {
    throw ValidationError("random_loss must lie in [0, 1)");
  }
  if (!(resolved_queue_capacity() > 0.0)) {
    throw ValidationError("queue_capacity must be positive");
  }
  if (mtu == 0 || retx_limit < 1 || !(frame_deadline > 0.0)) {
    throw ValidationError("invalid mtu, retx_limit or frame_deadline");
  }
}

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::kFrameCaptured: return "capture";
    case EventKind::kSend: return "send";
    case EventKind::kRetransmit: return "retx";
    case EventKind::kDrop: return "drop";
    case EventKind::kArrive: return "arrive";
    case EventKind::kNack: return "nack";
    case EventKind::kFrameComplete: return "frame_complete";
    case EventKind::kFrameLost: return "frame_lost";
  }
  return "unknown";
}

ReceiverObservation receiver_stats(std::span<const PacketEvent> events,
                                   int second_index, double window_start,
                                   double window_end, double base_owd) {
  ReceiverObservation obs;
  obs.second_index = second_index;
  const double span_s = window_end - window_start;
  double sent_bytes = 0.0;
  double arrived_bytes = 0.0;
  double rtt_sum = 0.0;
  std::size_t rtt_count = 0;
  std::size_t first_sent = 0;
  std::size_t first_lost = 0;
  std::size_t nacks = 0;
  double delay_sum = 0.0;
  std::size_t completed = 0;
  std::size_t lost = 0;
  double played_bytes = 0.0;
  // Earliest capture among frames captured before window_end that are not
  // resolved by then; used when nothing completes in the window.
  std::map<std::uint32_t, double> unresolved;

  for (const auto& e : events) {
    if (e.kind == EventKind::kFrameCaptured && e.time < window_end) {
      unresolved.emplace(e.frame_id, e.time);
    }
    if ((e.kind == EventKind::kFrameComplete || e.kind == EventKind::kFrameLost) &&
        e.time < window_end) {
      unresolved.erase(e.frame_id);
    }
    if (e.time < window_start || e.time >= window_end) continue;
    switch (e.kind) {
      case EventKind::kSend:
        sent_bytes += e.bytes;
        ++first_sent;
        break;
      case EventKind::kRetransmit:
        sent_bytes += e.bytes;
        break;
      case EventKind::kDrop:
        if (e.attempt == 0) ++first_lost;
        break;
      case EventKind::kArrive:
        arrived_bytes += e.bytes;
        rtt_sum += e.value;
        ++rtt_count;
        break;
      case EventKind::kNack:
        ++nacks;
        break;
      case EventKind::kFrameComplete:
        delay_sum += e.time - e.value;
        played_bytes += e.bytes;
        ++completed;
        break;
      case EventKind::kFrameLost:
        ++lost;
        break;
      case EventKind::kFrameCaptured:
        break;
    }
  }
  obs.s = sent_bytes * 8.0 / 1000.0 / span_s;
  obs.r = arrived_bytes * 8.0 / 1000.0 / span_s;
  obs.d = rtt_count > 0 ? rtt_sum / static_cast<double>(rtt_count) : 2.0 * base_owd;
  obs.p = first_sent > 0
              ? static_cast<double>(first_lost) / static_cast<double>(first_sent)
              : 0.0;
  obs.n = static_cast<double>(nacks);
  if (completed > 0) {
    obs.f = delay_sum / static_cast<double>(completed);
  } else if (!unresolved.empty()) {
    double oldest = window_end;
    for (const auto& [id, capture] : unresolved) oldest = std::min(oldest, capture);
    obs.f = std::max(base_owd, window_end - oldest);
  } else {
    obs.f = base_owd;
  }
  const std::size_t resolved = completed + lost;
  obs.h = resolved > 0 ? static_cast<double>(lost) / static_cast<double>(resolved) : 0.0;
  obs.played_fps = static_cast<double>(completed) / span_s;
  obs.played_kbps = played_bytes * 8.0 / 1000.0 / span_s;
  return obs;
}

double stalling_ratio(std::span<const double> played_fps) {
  if (played_fps.empty()) throw ValidationError("stalling_ratio needs samples");
  std::size_t stalled = 0;
  for (double fps : played_fps) stalled += fps < kStallFpsThreshold ? 1 : 0;
  return static_cast<double>(stalled) / static_cast<double>(played_fps.size());
}

std::vector<double> SessionLog::played_fps() const {
  std::vector<double> out;
  out.reserve(seconds.size());
  for (const auto& s : seconds) out.push_back(s.obs.played_fps);
  return out;
}

std::string SessionLog::to_csv() const {
  using text::format_double;
  std::string out = std::string(kSessionCsvHeader) + "\n";
  for (const auto& s : seconds) {
    out += std::to_string(s.second) + ',' + format_double(s.slot.target) + ',' +
           format_double(s.slot.actual) + ',' + format_double(s.obs.s) + ',' +
           format_double(s.obs.r) + ',' + format_double(s.obs.d) + ',' +
           format_double(s.obs.p) + ',' + format_double(s.obs.n) + ',' +
           format_double(s.obs.f) + ',' + format_double(s.obs.h) + ',' +
           format_double(s.obs.played_fps) + ',' + format_double(s.quality) +
           ',' + format_double(s.reward) + '\n';
  }
  return out;
}

std::string SessionLog::events_to_csv() const {
  using text::format_double;
  std::string out = "time_s,event,seq,frame_id,bytes,attempt,value\n";
  for (const auto& e : events) {
    out += format_double(e.time) + ',' + to_string(e.kind) + ',' +
           std::to_string(e.seq) + ',' + std::to_string(e.frame_id) + ',' +
           std::to_string(e.bytes) + ',' + std::to_string(e.attempt) + ',' +
           format_double(e.value) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Session

Session::Session(const trace::ComplexityTrace& video, SessionConfig cfg)
    : video_(video),
      cfg_(std::move(cfg)),
      encoder_rng_(derive_seed(cfg_.seed, 1)),
      link_rng_(derive_seed(cfg_.seed, 2)) {
  cfg_.link.validate();
  cfg_.encoder.validate();
  cfg_.reward.validate();
  if (!(cfg_.duration >= 1.0)) throw ValidationError("session duration must be >= 1 s");
  if (cfg_.duration > cfg_.link.trace.duration() + 1e-9 ||
      cfg_.duration > video_.duration() + 1e-9) {
    throw ValidationError("session duration exceeds the trace or video length");
  }
  if (std::abs(cfg_.encoder.fps - video_.fps()) > 1e-9) {
    throw ValidationError("encoder fps does not match the video");
  }
  total_seconds_ = static_cast<int>(std::floor(cfg_.duration + 1e-9));
  ticks_per_second_ = static_cast<int>(std::lround(1.0 / cfg_.link.tick));
  queue_capacity_ = cfg_.link.resolved_queue_capacity();
  previous_target_ = std::clamp(cfg_.start_bitrate, cfg_.encoder.min_bitrate,
                                cfg_.encoder.max_bitrate);
  rtt_estimate_ = 2.0 * cfg_.link.base_owd;
}

DecisionContext Session::context() const {
  DecisionContext ctx;
  ctx.second = second_;
  ctx.previous_target = previous_target_;
  ctx.delivered = std::span<const ReceiverObservation>(observations_.data(),
                                                       delivered_count_);
  ctx.slots = slots_;
  ctx.video = &video_;
  return ctx;
}

void Session::encode_and_enqueue(double target) {
  const double t_slot = static_cast<double>(second_);
  const auto n_frames = static_cast<std::size_t>(std::lround(cfg_.encoder.fps));
  auto flags = std::make_unique<bool[]>(n_frames);
  for (std::size_t k = 0; k < n_frames; ++k) {
    flags[k] = video_.is_iframe(t_slot + static_cast<double>(k) / cfg_.encoder.fps);
  }
  const auto complexity = video_.window(t_slot, t_slot + 1.0);
  auto result = media::encode_slot(target, complexity,
                                   std::span<const bool>(flags.get(), n_frames),
                                   second_, encoder_state_, cfg_.encoder,
                                   encoder_rng_);
  encoder_state_ = result.state;
  const auto& slot = result.slot;
  slots_.push_back({second_, slot.target, slot.effective_target, slot.actual,
                    media::normalized_ti(complexity, cfg_.encoder.ti_max)});

  const double slot_bytes = static_cast<double>(slot.total_bytes());
  for (const auto& frame : slot.frames) {
    const auto frame_id = static_cast<std::uint32_t>(frames_.size());
    FrameState fs;
    fs.capture_time = frame.capture_time;
    fs.first_seq = packets_.size();
    fs.bytes = frame.size_bytes;
    emit({frame.capture_time, EventKind::kFrameCaptured, fs.first_seq, frame_id,
          frame.size_bytes, 0, frame.capture_time});
    for (const auto& pkt : media::packetize(frame.size_bytes, frame.capture_time,
                                            frame_id, cfg_.link.mtu)) {
      const std::uint64_t seq = packets_.size();
      packets_.push_back({frame_id, pkt.size_bytes});
      received_.push_back(0);
      const double send = std::max(frame.capture_time, pacer_free_);
      pacer_free_ = send + static_cast<double>(pkt.size_bytes) / slot_bytes;
      paced_.push_back({send, seq, 0});
    }
    fs.packet_count = static_cast<std::uint32_t>(packets_.size() - fs.first_seq);
    frames_.push_back(fs);
  }
}

void Session::advance_link(double t) {
  while (!queue_.empty()) {
    const auto& head = queue_.front();
    if (head_finish_ < 0.0) {
      const double start = std::max(head.enqueue_time, link_free_);
      head_finish_ = cfg_.link.trace.finish_time(start, head.bytes);
    }
    if (head_finish_ > t) break;
    link_free_ = head_finish_;
    queue_bytes_ -= head.bytes;
    arrivals_.push_back({head_finish_ + cfg_.link.base_owd, head.seq,
                         head.attempt, head.enqueue_time});
    queue_.pop_front();
    head_finish_ = -1.0;
  }
}

void Session::transmit(const Transmission& tx) {
  const auto& pkt = packets_[tx.seq];
  emit({tx.time, tx.attempt == 0 ? EventKind::kSend : EventKind::kRetransmit,
        tx.seq, pkt.frame_id, pkt.size, static_cast<std::uint8_t>(tx.attempt), 0.0});
  bool dropped = cfg_.link.forced_drop && cfg_.link.forced_drop(tx.seq, tx.attempt);
  if (!dropped && cfg_.link.random_loss > 0.0) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    dropped = unit(link_rng_) < cfg_.link.random_loss;
  }
  if (!dropped) {
    advance_link(tx.time);
    dropped = queue_bytes_ + pkt.size > queue_capacity_;
  }
  if (dropped) {
    emit({tx.time, EventKind::kDrop, tx.seq, pkt.frame_id, pkt.size,
          static_cast<std::uint8_t>(tx.attempt), 0.0});
    return;
  }
  queue_.push_back({tx.seq, tx.attempt, tx.time, pkt.size});
  queue_bytes_ += pkt.size;
}

void Session::receive(const Arrival& a) {
  const auto& pkt = packets_[a.seq];
  const double rtt = a.time - a.send_time + cfg_.link.base_owd;
  rtt_estimate_ = rtt;
  emit({a.time, EventKind::kArrive, a.seq, pkt.frame_id, pkt.size,
        static_cast<std::uint8_t>(a.attempt), rtt});
  if (received_[a.seq] != 0) return;
  received_[a.seq] = 1;
  if (a.seq >= next_expected_) {
    for (std::uint64_t s = next_expected_; s < a.seq; ++s) {
      if (received_[s] == 0 &&
          frames_[packets_[s].frame_id].status == FrameState::Status::kPending) {
        missing_.emplace(s, Missing{});
      }
    }
    next_expected_ = a.seq + 1;
  }
  missing_.erase(a.seq);
  auto& frame = frames_[pkt.frame_id];
  if (frame.status != FrameState::Status::kPending) return;
  if (++frame.received == frame.packet_count) {
    frame.status = FrameState::Status::kComplete;
    emit({a.time, EventKind::kFrameComplete, frame.first_seq, pkt.frame_id,
          frame.bytes, 0, frame.capture_time});
  }
}

void Session::declare_lost(std::uint32_t frame_id, double t) {
  auto& frame = frames_[frame_id];
  if (frame.status != FrameState::Status::kPending) return;
  frame.status = FrameState::Status::kLost;
  emit({t, EventKind::kFrameLost, frame.first_seq, frame_id, frame.bytes, 0,
        frame.capture_time});
  for (std::uint64_t s = frame.first_seq; s < frame.first_seq + frame.packet_count; ++s) {
    missing_.erase(s);
  }
}

void Session::scan_receiver(double t) {
  const double nack_interval = std::max(rtt_estimate_, cfg_.link.tick);
  std::vector<std::uint32_t> exhausted;
  for (auto it = missing_.begin(); it != missing_.end();) {
    const std::uint64_t seq = it->first;
    auto& m = it->second;
    const auto frame_id = packets_[seq].frame_id;
    if (frames_[frame_id].status != FrameState::Status::kPending) {
      it = missing_.erase(it);
      continue;
    }
    if (m.last_nack >= 0.0 && t - m.last_nack < nack_interval - 1e-12) {
      ++it;
      continue;
    }
    if (m.nack_count + 1 >= cfg_.link.retx_limit) {
      exhausted.push_back(frame_id);
      ++it;
      continue;
    }
    ++m.nack_count;
    m.last_nack = t;
    emit({t, EventKind::kNack, seq, frame_id, packets_[seq].size,
          static_cast<std::uint8_t>(m.nack_count), 0.0});
    retx_.push_back({t + cfg_.link.base_owd, seq, m.nack_count});
    ++it;
  }
  for (auto frame_id : exhausted) declare_lost(frame_id, t);
  while (oldest_pending_frame_ < frames_.size()) {
    auto& frame = frames_[oldest_pending_frame_];
    if (frame.status != FrameState::Status::kPending) {
      ++oldest_pending_frame_;
      continue;
    }
    if (frame.capture_time + cfg_.link.frame_deadline > t + 1e-12) break;
    declare_lost(static_cast<std::uint32_t>(oldest_pending_frame_), t);
    ++oldest_pending_frame_;
  }
}

void Session::run_tick(double t0, double t1) {
  (void)t0;
  while (true) {
    const bool has_paced = !paced_.empty() && paced_.front().time < t1;
    const bool has_retx = !retx_.empty() && retx_.front().time < t1;
    if (!has_paced && !has_retx) break;
    if (has_retx && (!has_paced || retx_.front().time <= paced_.front().time)) {
      transmit(retx_.front());
      retx_.pop_front();
    } else {
      transmit(paced_.front());
      paced_.pop_front();
    }
  }
  advance_link(t1);
  while (!arrivals_.empty() && arrivals_.front().time < t1) {
    receive(arrivals_.front());
    arrivals_.pop_front();
  }
  scan_receiver(t1);
}

const SecondRecord& Session::step(double target) {
  if (done()) throw ValidationError("session already finished");
  const double clamped =
      std::clamp(target, cfg_.encoder.min_bitrate, cfg_.encoder.max_bitrate);
  second_event_start_.push_back(log_.events.size());
  encode_and_enqueue(clamped);
  previous_target_ = clamped;

  const double base = static_cast<double>(second_);
  for (int i = 0; i < ticks_per_second_; ++i) {
    const double t0 = base + static_cast<double>(i) * cfg_.link.tick;
    const double t1 = (i + 1 == ticks_per_second_)
                          ? base + 1.0
                          : base + static_cast<double>(i + 1) * cfg_.link.tick;
    run_tick(t0, t1);
  }

  // Events of window [T, T+1) were all logged during seconds T-1 and T.
  const std::size_t scan_from =
      second_event_start_[static_cast<std::size_t>(std::max(0, second_ - 2))];
  const auto window = std::span<const PacketEvent>(log_.events).subspan(scan_from);
  auto obs = receiver_stats(window, second_, base, base + 1.0, cfg_.link.base_owd);

  SecondRecord rec;
  rec.second = second_;
  rec.slot = slots_.back();
  rec.obs = obs;
  const auto level = media::normalized_complexity(video_.window(base, base + 1.0),
                                                  cfg_.quality);
  rec.quality = media::quality_score(obs.played_kbps, level, cfg_.quality);
  const double prev_q = second_ == 0 ? rec.quality : previous_quality_;
  rec.reward = abrn::reward(rec.quality, prev_q, obs.h, obs.f, cfg_.reward);
  previous_quality_ = rec.quality;

  observations_.push_back(obs);
  delivery_times_.push_back(base + 1.0 + 2.0 * cfg_.link.base_owd);
  ++second_;
  const double now = static_cast<double>(second_);
  while (delivered_count_ < delivery_times_.size() &&
         delivery_times_[delivered_count_] <= now + 1e-12) {
    ++delivered_count_;
  }
  log_.seconds.push_back(rec);
  return log_.seconds.back();
}

SessionLog run_session(BitrateController& policy,
                       const trace::ComplexityTrace& video,
                       const SessionConfig& cfg) {
  Session session(video, cfg);
  while (!session.done()) {
    session.step(policy.next_target(session.context()));
  }
  return session.take_log();
}

}  // namespace anableps::netsim

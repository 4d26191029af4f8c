// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "anableps/netsim.hpp"
#include "test_support.hpp"

using namespace anableps;
using namespace anableps::netsim;

namespace {

class Constant : public BitrateController {
 public:
  explicit Constant(double kbps) : kbps_(kbps) {}
  double next_target(const DecisionContext&) override { return kbps_; }

 private:
  double kbps_;
};

class RandomWalk : public BitrateController {
 public:
  explicit RandomWalk(std::uint64_t seed) : rng_(seed) {}
  double next_target(const DecisionContext&) override {
    std::uniform_real_distribution<double> u(300.0, 6100.0);
    return u(rng_);
  }

 private:
  std::mt19937_64 rng_;
};

SessionConfig quiet_config(trace::NetworkTrace link, double duration) {
  SessionConfig cfg;
  cfg.link.trace = std::move(link);
  cfg.encoder.fluct.sigma = 0.0;
  cfg.duration = duration;
  return cfg;
}

PacketEvent ev(double t, EventKind k, std::uint64_t seq, std::uint32_t frame,
               std::uint32_t bytes, std::uint8_t attempt = 0, double value = 0.0) {
  return {t, k, seq, frame, bytes, attempt, value};
}

}  // namespace

TEST_CASE("stalling ratio") {
  CHECK(stalling_ratio(std::vector<double>{25, 25, 25, 25}) == 0.0);
  CHECK(stalling_ratio(std::vector<double>{25, 25, 10, 25}) == 0.25);
  CHECK(stalling_ratio(std::vector<double>{0, 0}) == 1.0);
  CHECK(stalling_ratio(std::vector<double>{12.0, 11.999}) == 0.5);
  CHECK_THROWS_AS(stalling_ratio(std::vector<double>{}), ValidationError);
}

TEST_CASE("receiver stats on hand-built event lists") {
  SUBCASE("no loss, no queueing") {
    std::vector<PacketEvent> e;
    for (int i = 0; i < 10; ++i) {
      const double t = 0.1 * i;
      e.push_back(ev(t, EventKind::kFrameCaptured, i, i, 1000, 0, t));
      e.push_back(ev(t, EventKind::kSend, i, i, 1000));
      e.push_back(ev(t + 0.025, EventKind::kArrive, i, i, 1000, 0, 0.05));
      e.push_back(ev(t + 0.025, EventKind::kFrameComplete, i, i, 1000, 0, t));
    }
    auto o = receiver_stats(e, 0, 0.0, 1.0, 0.025);
    CHECK(o.p == 0.0);
    CHECK(o.n == 0.0);
    CHECK(o.d == doctest::Approx(0.05));
    CHECK(o.f == doctest::Approx(0.025));
    CHECK(o.s == doctest::Approx(80.0));
    CHECK(o.r == doctest::Approx(80.0));
    CHECK(o.played_fps == 10.0);
    CHECK(o.h == 0.0);
  }
  SUBCASE("2 of 100 packets dropped and recovered") {
    std::vector<PacketEvent> e;
    for (std::uint64_t i = 0; i < 100; ++i) {
      const double t = 0.005 * static_cast<double>(i);
      e.push_back(ev(t, EventKind::kSend, i, 0, 100));
      if (i == 10 || i == 50) {
        e.push_back(ev(t, EventKind::kDrop, i, 0, 100));
        e.push_back(ev(t + 0.05, EventKind::kNack, i, 0, 100, 1));
        e.push_back(ev(t + 0.075, EventKind::kRetransmit, i, 0, 100, 1));
        e.push_back(ev(t + 0.1, EventKind::kArrive, i, 0, 100, 1, 0.05));
      } else {
        e.push_back(ev(t + 0.025, EventKind::kArrive, i, 0, 100, 0, 0.05));
      }
    }
    auto o = receiver_stats(e, 0, 0.0, 1.0, 0.025);
    CHECK(o.p == doctest::Approx(0.02));
    CHECK(o.n == 2.0);
    CHECK(o.h == 0.0);
  }
  SUBCASE("window boundaries are half open") {
    std::vector<PacketEvent> e = {ev(1.0, EventKind::kSend, 0, 0, 1000),
                                  ev(0.999, EventKind::kSend, 1, 0, 1000)};
    CHECK(receiver_stats(e, 0, 0.0, 1.0, 0.025).s == doctest::Approx(8.0));
    CHECK(receiver_stats(e, 1, 1.0, 2.0, 0.025).s == doctest::Approx(8.0));
  }
  SUBCASE("an unresolved frame reports its age as delay") {
    std::vector<PacketEvent> e = {ev(0.2, EventKind::kFrameCaptured, 0, 0, 1000, 0, 0.2)};
    CHECK(receiver_stats(e, 1, 1.0, 2.0, 0.025).f == doctest::Approx(1.8));
  }
}

TEST_CASE("under-provisioned application rate matches the analytic delay") {
  // 6000 kbps paced onto a 6500 kbps link never queues, so each frame
  // completes once its last packet is serialized and propagated.
  auto cfg = quiet_config(testing::constant_trace(6500.0, 30.0), 20.0);
  auto video = testing::flat_video(60.0, 40.0, 30.0);
  Constant policy(6000.0);
  auto log = run_session(policy, video, cfg);
  REQUIRE(log.seconds.size() == 20);

  // Oracle: frame sizes (I = 6 P, one I frame every 5 s) and uniform pacing.
  const double slot_bytes = 750000.0;
  const double link_bps = 6500.0 * 1000.0 / 8.0;
  std::map<int, std::vector<double>> delays_by_second;
  double pacer = 0.0;
  for (int sec = 0; sec < 20; ++sec) {
    const bool has_i = sec % 5 == 0;
    const double p = has_i ? slot_bytes / 30.0 : slot_bytes / 25.0;
    double cum = 0.0;
    double prev_rounded = 0.0;
    for (int k = 0; k < 25; ++k) {
      cum += (k == 0 && has_i) ? 6.0 * p : p;
      const double rounded = std::round(cum);
      const double bytes = rounded - prev_rounded;
      prev_rounded = rounded;
      const double capture = sec + k / 25.0;
      double remaining = bytes;
      double last_send = 0.0;
      double last_size = 0.0;
      while (remaining > 0.0) {
        const double sz = std::min(1200.0, remaining);
        remaining -= sz;
        last_send = std::max(capture, pacer);
        pacer = last_send + sz / slot_bytes;
        last_size = sz;
      }
      const double complete = last_send + last_size / link_bps + 0.025;
      delays_by_second[static_cast<int>(std::floor(complete))].push_back(complete - capture);
    }
  }
  for (const auto& rec : log.seconds) {
    CHECK(rec.obs.p == 0.0);
    CHECK(rec.obs.n == 0.0);
    CHECK(rec.obs.h == 0.0);
    CHECK(rec.slot.actual == 6000.0);
    const auto& d = delays_by_second[rec.second];
    REQUIRE(!d.empty());
    double mean = 0.0;
    for (double x : d) mean += x;
    mean /= static_cast<double>(d.size());
    CHECK(rec.obs.f == doctest::Approx(mean).epsilon(1e-9));
    CHECK(rec.obs.f >= 0.025 + 1200.0 / link_bps - 1e-12);
  }
  CHECK(stalling_ratio(log.played_fps()) == 0.0);
}

TEST_CASE("over-provisioned application rate hits the fill-time oracle") {
  auto cfg = quiet_config(testing::constant_trace(6500.0, 30.0), 20.0);
  cfg.encoder.max_bitrate = 10000.0;
  auto video = testing::flat_video(60.0, 40.0, 30.0);
  Constant policy(8000.0);
  auto log = run_session(policy, video, cfg);
  double first_drop = -1.0;
  for (const auto& e : log.events) {
    if (e.kind == EventKind::kDrop) {
      first_drop = e.time;
      break;
    }
  }
  const double capacity = cfg.link.resolved_queue_capacity();
  CHECK(capacity == doctest::Approx(1218750.0));
  const double expected = capacity / ((8000.0 - 6500.0) * 1000.0 / 8.0);
  REQUIRE(first_drop > 0.0);
  CHECK(std::abs(first_drop - expected) <= cfg.link.tick);
  double total_p = 0.0;
  for (const auto& rec : log.seconds) total_p += rec.obs.p;
  CHECK(total_p > 0.0);
}

TEST_CASE("scripted losses") {
  auto video = testing::flat_video(60.0, 40.0, 10.0);
  SUBCASE("first transmissions dropped once are recovered") {
    auto cfg = quiet_config(testing::constant_trace(6500.0, 10.0), 4.0);
    // Second 2 carries P frames of 20000 bytes (17 packets each) at 4000 kbps.
    std::set<std::uint64_t> victims;
    cfg.link.forced_drop = [&](std::uint64_t seq, int attempt) {
      return attempt == 0 && victims.count(seq) > 0;
    };
    Constant policy(4000.0);
    Session session(video, cfg);
    session.step(4000.0);
    session.step(4000.0);
    // Seconds 0-1 used up the sequence numbers below this value.
    std::uint64_t next_seq = 0;
    for (const auto& e : session.log().events) {
      if (e.kind == EventKind::kSend) next_seq = std::max(next_seq, e.seq + 1);
    }
    victims = {next_seq + 20, next_seq + 60};
    const auto& rec = session.step(4000.0);
    std::size_t first_sends = 0;
    for (const auto& e : session.log().events) {
      if (e.kind == EventKind::kSend && e.time >= 2.0) ++first_sends;
    }
    CHECK(rec.obs.p == doctest::Approx(2.0 / static_cast<double>(first_sends)));
    CHECK(rec.obs.n == 2.0);
    CHECK(rec.obs.h == 0.0);
    CHECK(rec.obs.played_fps == 25.0);
  }
  SUBCASE("a packet lost retx_limit times loses its frame") {
    auto cfg = quiet_config(testing::constant_trace(6500.0, 10.0), 5.0);
    cfg.link.forced_drop = [](std::uint64_t seq, int) { return seq == 5; };
    Session session(video, cfg);
    int lost_frames = 0;
    int nacks = 0;
    while (!session.done()) {
      const auto& rec = session.step(3000.0);
      lost_frames += static_cast<int>(std::lround(rec.obs.h * 25.0));
      nacks += static_cast<int>(rec.obs.n);
    }
    CHECK(lost_frames == 1);
    CHECK(nacks == cfg.link.retx_limit - 1);
    int attempts = 0;
    for (const auto& e : session.log().events) {
      if (e.seq == 5 && (e.kind == EventKind::kSend || e.kind == EventKind::kRetransmit)) {
        ++attempts;
      }
    }
    CHECK(attempts == cfg.link.retx_limit);
  }
}

TEST_CASE("feedback arrives with one RTT of latency") {
  auto cfg = quiet_config(testing::constant_trace(3000.0, 10.0), 5.0);
  auto video = testing::flat_video(60.0, 40.0, 10.0);
  Session session(video, cfg);
  for (int k = 0; k < 5; ++k) {
    auto ctx = session.context();
    CHECK(ctx.second == k);
    CHECK(ctx.delivered.size() == static_cast<std::size_t>(std::max(0, k - 1)));
    CHECK(ctx.slots.size() == static_cast<std::size_t>(k));
    session.step(1000.0);
  }
  CHECK_THROWS_AS(session.step(1000.0), ValidationError);
}

TEST_CASE("session configuration errors") {
  auto video = testing::flat_video(60.0, 40.0, 10.0);
  auto cfg = quiet_config(testing::constant_trace(3000.0, 10.0), 20.0);
  CHECK_THROWS_AS(Session(video, cfg), ValidationError);
  cfg.duration = 5.0;
  cfg.encoder.fps = 30.0;
  CHECK_THROWS_AS(Session(video, cfg), ValidationError);
  cfg.encoder.fps = 25.0;
  cfg.link.random_loss = 1.0;
  CHECK_THROWS_AS(Session(video, cfg), ValidationError);
}

TEST_CASE("determinism") {
  auto video = trace::generate_synthetic_complexity_trace({40.0, 60.0, 25.0, 8.0, 25.0, 125, 4});
  auto link = trace::generate_synthetic_network_trace({40.0, 3000.0, 1200.0,
                                                       trace::TraceModel::kMarkovStep, 4});
  SessionConfig cfg;
  cfg.link.trace = link;
  cfg.link.random_loss = 0.01;
  cfg.duration = 30.0;
  cfg.seed = 77;
  RandomWalk a(1);
  RandomWalk b(1);
  auto la = run_session(a, video, cfg);
  auto lb = run_session(b, video, cfg);
  CHECK(la.to_csv() == lb.to_csv());
  CHECK(la.events_to_csv() == lb.events_to_csv());
  cfg.seed = 78;
  RandomWalk c(1);
  CHECK(run_session(c, video, cfg).to_csv() != la.to_csv());
}

TEST_CASE("conservation and delay bounds on fuzzed sessions") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mean(800.0, 7000.0);
    std::uniform_real_distribution<double> owd(0.0, 0.08);
    const double mu = mean(rng);
    auto link = trace::generate_synthetic_network_trace(
        {30.0, mu, 0.4 * mu, static_cast<trace::TraceModel>(seed % 3), seed});
    auto video = trace::generate_synthetic_complexity_trace({30.0, 60.0, 25.0, 6.0, 25.0, 125, seed});
    SessionConfig cfg;
    cfg.link.trace = link;
    cfg.link.base_owd = owd(rng);
    cfg.link.random_loss = seed % 2 ? 0.02 : 0.0;
    cfg.duration = 30.0;
    cfg.seed = seed;
    RandomWalk policy(seed);
    auto log = run_session(policy, video, cfg);
    const double base = cfg.link.base_owd;

    REQUIRE(log.seconds.size() == 30);
    std::map<std::pair<std::uint64_t, int>, double> sent_at;
    double sent_bytes = 0.0;
    double arrived_bytes = 0.0;
    bool ok = true;
    for (const auto& e : log.events) {
      if (e.kind == EventKind::kSend || e.kind == EventKind::kRetransmit) {
        sent_at[{e.seq, e.attempt}] = e.time;
        sent_bytes += e.bytes;
      } else if (e.kind == EventKind::kArrive) {
        arrived_bytes += e.bytes;
        auto it = sent_at.find({e.seq, e.attempt});
        ok = ok && it != sent_at.end() && e.time >= it->second + base - 1e-12;
        ok = ok && e.value >= 2.0 * base - 1e-12;
      } else if (e.kind == EventKind::kFrameComplete) {
        ok = ok && e.time - e.value >= base - 1e-12;
      }
    }
    CHECK(ok);
    CHECK(arrived_bytes <= sent_bytes);
    for (std::size_t i = 0; i < log.seconds.size(); ++i) {
      const auto& o = log.seconds[i].obs;
      CHECK(log.seconds[i].second == static_cast<int>(i));
      CHECK(o.p >= 0.0);
      CHECK(o.p <= 1.0);
      CHECK(o.h >= 0.0);
      CHECK(o.h <= 1.0);
      CHECK(o.d >= 2.0 * base - 1e-12);
      CHECK(o.f >= base - 1e-12);
      CHECK(log.seconds[i].quality >= 0.0);
      CHECK(log.seconds[i].quality <= 1.0);
    }
  }
}

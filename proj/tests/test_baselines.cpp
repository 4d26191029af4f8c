// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "anableps/baselines.hpp"
#include "anableps/common.hpp"
#include "test_support.hpp"

using namespace anableps;
using namespace anableps::baselines;

namespace {

netsim::ReceiverObservation report(double p, double rtt, double recv) {
  netsim::ReceiverObservation o;
  o.p = p;
  o.d = rtt;
  o.r = recv;
  return o;
}

std::vector<double> run_session(netsim::BitrateController& ctl, const trace::NetworkTrace& link,
                                double duration, double* stall = nullptr) {
  const auto video = testing::flat_video(60, 25, duration);
  netsim::SessionConfig cfg;
  cfg.link.trace = link;
  cfg.duration = duration;
  cfg.seed = 3;
  netsim::Session session(video, cfg);
  std::vector<double> targets;
  while (!session.done()) {
    const double t = ctl.next_target(session.context());
    targets.push_back(t);
    session.step(t);
  }
  if (stall) *stall = netsim::stalling_ratio(session.log().played_fps());
  return targets;
}

}  // namespace

TEST_CASE("trend slope") {
  CHECK(trend_slope({}) == 0.0);
  CHECK(trend_slope({0.3}) == 0.0);
  CHECK(trend_slope({1, 2, 3, 4}) == doctest::Approx(1.0));
  CHECK(trend_slope({0.05, 0.05, 0.05}) == 0.0);
  // Straight loop reference on a noisy series.
  const std::deque<double> y = {0.1, 0.3, 0.2, 0.5, 0.4, 0.7};
  double sx = 0, sy = 0, sxy = 0, sxx = 0;
  for (int i = 0; i < 6; ++i) {
    sx += i;
    sy += y[static_cast<std::size_t>(i)];
    sxy += i * y[static_cast<std::size_t>(i)];
    sxx += i * i;
  }
  CHECK(trend_slope(y) == doctest::Approx((6 * sxy - sx * sy) / (6 * sxx - sx * sx)));
}

TEST_CASE("gcc branch rules") {
  SUBCASE("heavy loss backs off") {
    auto s = gcc_init(4000);
    s.delay_rate = 6100;
    CHECK(gcc_step(s, report(0.20, 0.05, 4000)) == doctest::Approx(3600));
  }
  SUBCASE("clean report grows both branches") {
    auto s = gcc_init(4000);
    CHECK(gcc_step(s, report(0.0, 0.05, 4000)) == doctest::Approx(4200));
    CHECK(s.detector == DetectorState::kIncrease);
  }
  SUBCASE("dead zone holds the loss branch") {
    auto s = gcc_init(4000);
    gcc_step(s, report(0.05, 0.05, 4000));
    // Loss branch held at 4000; delay branch grew to 4200.
    CHECK(s.loss_rate == doctest::Approx(4000));
  }
  SUBCASE("rising RTT trips the detector") {
    auto s = gcc_init(5000);
    for (double rtt : {0.05, 0.05, 0.05}) gcc_step(s, report(0.0, rtt, 5000));
    double t = 0;
    for (double rtt : {0.2, 0.4, 0.6}) t = gcc_step(s, report(0.0, rtt, 3000));
    CHECK(s.detector == DetectorState::kDecrease);
    CHECK(t == doctest::Approx(0.85 * 3000));
  }
  SUBCASE("sustained loss never increases") {
    auto s = gcc_init(6000);
    double prev = 6100;
    for (int i = 0; i < 60; ++i) {
      const double t = gcc_step(s, report(0.15, 0.05, 6000));
      CHECK(t <= prev);
      CHECK(t >= 300);
      prev = t;
    }
    CHECK(prev == 300);
  }
  GccConfig bad;
  bad.low_loss = 0.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("gcc follows a bandwidth drop within three decisions") {
  GccController gcc;
  const auto targets = run_session(gcc, testing::step_trace(6000, 2000, 60, 90), 90);
  bool dropped = false;
  for (int t = 60; t <= 62; ++t) dropped = dropped || targets[static_cast<std::size_t>(t)] < 2600;
  CHECK(dropped);
}

TEST_CASE("gcc climbs monotonically to the cap on a clean link") {
  // Headroom above the cap absorbs encoder overshoot.
  GccController gcc;
  double stall = 1;
  const auto targets = run_session(gcc, testing::constant_trace(10000, 90), 90, &stall);
  for (std::size_t i = 1; i < targets.size(); ++i) CHECK(targets[i] >= targets[i - 1]);
  CHECK(targets.back() == 6100);
  CHECK(stall == 0.0);
}

TEST_CASE("fixed policy") {
  FixedController f(6000);
  netsim::DecisionContext ctx;
  for (int i = 0; i < 5; ++i) CHECK(f.next_target(ctx) == 6000);
  CHECK(FixedController(300).next_target(ctx) == 300);
  CHECK_THROWS_AS(FixedController(7000), ValidationError);
  CHECK_THROWS_AS(FixedController(299), ValidationError);

  double stall = 1;
  run_session(f, testing::constant_trace(6500, 30), 30, &stall);
  CHECK(stall == 0.0);
}

TEST_CASE("oracle policy") {
  netsim::DecisionContext ctx;
  OracleController c(testing::constant_trace(6500, 20));
  CHECK(c.next_target(ctx) == doctest::Approx(5525));
  OracleController one(testing::constant_trace(5000, 20), 1.0);
  CHECK(one.next_target(ctx) == 5000);
  OracleController step(testing::step_trace(6500, 2000, 10, 20));
  ctx.second = 8;
  CHECK(step.next_target(ctx) == doctest::Approx(5525));
  ctx.second = 9;
  CHECK(step.next_target(ctx) == doctest::Approx(1700));
  ctx.second = 15;
  CHECK(step.next_target(ctx) == doctest::Approx(1700));
  OracleController low(testing::constant_trace(200, 20));
  CHECK(low.next_target(ctx) == 300);
  CHECK_THROWS_AS(OracleController(testing::constant_trace(100, 5), 0.0), ValidationError);

  // Lookahead beats overloading the link.
  double s_oracle = 0;
  double s_fixed = 0;
  OracleController o(testing::constant_trace(2000, 40));
  FixedController f(6100);
  run_session(o, testing::constant_trace(2000, 40), 40, &s_oracle);
  run_session(f, testing::constant_trace(2000, 40), 40, &s_fixed);
  CHECK(s_oracle < s_fixed);
}

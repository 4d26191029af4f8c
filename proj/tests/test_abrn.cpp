// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "anableps/abrn.hpp"
#include "anableps/common.hpp"
#include "anableps/reward.hpp"
#include "test_support.hpp"

using namespace anableps;
using namespace anableps::abrn;

namespace {

NetConfig small_net() { return {8, 3, 8, 8, 8}; }

AbrnState random_state(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AbrnState s;
  s.v = u(rng);
  s.e = u(rng);
  s.s = u(rng);
  s.r = u(rng);
  for (auto* a : {&s.d, &s.p, &s.n, &s.f, &s.h}) {
    for (double& x : *a) x = u(rng);
  }
  return s;
}

netsim::ReceiverObservation obs(double d, double p, double n, double f, double h) {
  netsim::ReceiverObservation o;
  o.s = 3050.0;
  o.r = 6100.0;
  o.d = d;
  o.p = p;
  o.n = n;
  o.f = f;
  o.h = h;
  return o;
}

}  // namespace

TEST_CASE("reward matches hand-computed values") {
  CHECK(reward(0.8, 0.8, 0.0, 0.0) == doctest::Approx(6.4).epsilon(1e-12));
  CHECK(std::abs(reward(1.0, 0.5, 0.2, 0.3) - 6.35) < 1e-9);
  CHECK(reward(0.0, 0.0, 0.0, 0.0) == 0.0);
  // Frame delay saturates at 2 s.
  CHECK(reward(0.0, 0.0, 0.0, 5.0) == doctest::Approx(-4.0));
}

TEST_CASE("action table: clamp and loss back-off") {
  const double bitrates[] = {300, 500, 4000, 6000, 6100};
  const double losses[] = {0.0, 0.25, 1.0};
  for (double b : bitrates) {
    for (double p : losses) {
      for (int a = 0; a < kActionCount; ++a) {
        const double raw = a == 0 ? b * (1.0 - p) : b + kActionDeltas[static_cast<std::size_t>(a)];
        const double want = std::min(std::max(raw, 300.0), 6100.0);
        CHECK(apply_action(b, a, p) == want);
      }
    }
  }
  CHECK(apply_action(4000, 0, 0.25) == 3000.0);
  CHECK(apply_action(6000, 5, 0.0) == 6100.0);
  CHECK(apply_action(500, 1, 0.0) == 300.0);
  CHECK(std::string(action_name(0)) == "X");
  CHECK_THROWS_AS(apply_action(1000, 6, 0.0), ValidationError);
  CHECK_THROWS_AS(apply_action(1000, 0, 1.5), ValidationError);
}

TEST_CASE("state normalisation, clamps and padding") {
  std::vector<netsim::ReceiverObservation> hist;
  for (int i = 0; i < 8; ++i) hist.push_back(obs(0.1 * i, 0.01 * i, 10.0 * i, 0.5 * i, 0.1));
  hist.back() = obs(3.0, 1.0, 100.0, -1.0, 0.2);
  const auto s = assemble_state({3050.0, 610.0}, hist);
  CHECK(s.v == doctest::Approx(0.5));
  CHECK(s.e == doctest::Approx(0.1));
  CHECK(s.s == doctest::Approx(0.5));
  CHECK(s.r == doctest::Approx(1.0));
  CHECK_FALSE(s.warmup);
  // Oldest kept observation is index 2.
  CHECK(s.d[0] == doctest::Approx(0.1));
  CHECK(s.n[0] == doctest::Approx(20.0 / 50.0));
  CHECK(s.f[0] == doctest::Approx(0.5));
  CHECK(s.d[5] == 1.0);
  CHECK(s.n[5] == 1.0);
  CHECK(s.f[5] == 0.0);
  CHECK(s.p[5] == 1.0);
  CHECK(s.h[5] == doctest::Approx(0.2));

  const std::vector<netsim::ReceiverObservation> two = {obs(0.2, 0.1, 5, 0.4, 0), obs(0.4, 0.2, 5, 0.4, 0)};
  const auto w = assemble_state({}, two);
  CHECK(w.warmup);
  for (int i = 0; i < 4; ++i) CHECK(w.d[static_cast<std::size_t>(i)] == 0.0);
  CHECK(w.d[4] == doctest::Approx(0.1));
  CHECK(w.d[5] == doctest::Approx(0.2));
  const auto none = assemble_state({}, {});
  CHECK(none.s == 0.0);
}

TEST_CASE("ablation masks") {
  const std::vector<netsim::ReceiverObservation> h = {obs(0.1, 0, 0, 0.1, 0)};
  const cbpn::BitrateRange r{3000.0, 500.0};
  const auto full = assemble_state(r, h, Ablation::kFull);
  const auto c = assemble_state(r, h, Ablation::kC);
  const auto s = assemble_state(r, h, Ablation::kS);
  CHECK(full.v == doctest::Approx(3000.0 / 6100.0));
  CHECK(full.e == doctest::Approx(500.0 / 6100.0));
  CHECK(c.v == full.v);
  CHECK(c.e == 0.0);
  CHECK(s.v == 0.0);
  CHECK(s.e == 0.0);
  CHECK(s.d == full.d);
  CHECK(parse_ablation("c") == Ablation::kC);
  CHECK(to_string(parse_ablation("s")) == "s");
  CHECK_THROWS_AS(parse_ablation("x"), ConfigError);
}

TEST_CASE("select_action") {
  std::mt19937_64 rng(1);
  const std::vector<double> onehot = {0, 0, 0, 1, 0, 0};
  for (int i = 0; i < 100; ++i) CHECK(select_action(onehot, SelectMode::kSample, rng) == 3);
  const std::vector<double> tie = {0.1, 0.4, 0.4, 0.1, 0, 0};
  CHECK(select_action(tie, SelectMode::kArgmax, rng) == 1);
  const std::vector<double> probs = {0.1, 0.2, 0.3, 0.4, 0.0, 0.0};
  std::vector<int> counts(6);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(select_action(probs, SelectMode::kSample, rng))];
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(static_cast<double>(counts[i]) / draws == doctest::Approx(probs[i]).epsilon(0.03));
  }
  CHECK(counts[4] == 0);
  CHECK_THROWS_AS(select_action({}, SelectMode::kSample, rng), ValidationError);
}

TEST_CASE("actor is a distribution; critic a scalar") {
  std::mt19937_64 rng(5);
  for (int draw = 0; draw < 200; ++draw) {
    const Agent agent(small_net(), static_cast<std::uint64_t>(draw));
    const auto p = agent.policy(random_state(rng));
    REQUIRE(p.size() == 6);
    double sum = 0.0;
    for (double x : p) {
      CHECK(x > 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
    CHECK(std::isfinite(agent.value(random_state(rng))));
  }
}

TEST_CASE("zeroed logits give a uniform policy") {
  Agent agent(small_net(), 3);
  auto w = agent.actor().layer_params("logits");
  std::fill(w.begin(), w.end(), 0.0);
  std::mt19937_64 rng(2);
  for (double x : agent.policy(random_state(rng))) CHECK(x == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("policy depends on the lost-frame history") {
  const Agent agent(NetConfig{}, 11);
  AbrnState a;
  AbrnState b = a;
  b.h.fill(1.0);
  const auto pa = agent.policy(a);
  const auto pb = agent.policy(b);
  double diff = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) diff += std::abs(pa[i] - pb[i]);
  CHECK(diff > 1e-4);
}

TEST_CASE("full-size networks pass the gradient check") {
  std::mt19937_64 rng(9);
  const NetConfig cfg;
  const auto actor = build_actor(cfg, 1);
  const auto critic = build_critic(cfg, 2);
  CHECK(actor.param_count() == critic.param_count() + 128 * 5 + 5);
  const auto in = network_inputs(random_state(rng));
  CHECK(nn::grad_check(actor, in, 1e-5, 300, 4) < 1e-4);
  CHECK(nn::grad_check(critic, in, 1e-5, 300, 5) < 1e-4);
}

TEST_CASE("bandit env: the rewarded action dominates within 500 updates") {
  Agent agent(NetConfig{}, 1);
  A3cConfig cfg;
  cfg.workers = 1;
  cfg.updates = 500;
  cfg.seed = 1;
  const auto result = train_a3c(
      agent, [](std::uint64_t) { return std::make_unique<BanditEnv>(5, 10); }, cfg);
  CHECK(agent.policy(BanditEnv::state())[5] > 0.9);
  REQUIRE(result.curve.size() == 500);
  // Smoothed entropy falls over training.
  auto window_mean = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 50; ++i) s += result.curve[i].entropy;
    return s / 50.0;
  };
  CHECK(window_mean(0) > window_mean(225));
  CHECK(window_mean(225) > window_mean(450));
  CHECK(result.curve.back().mean_reward > 9.0);
}

TEST_CASE("single-worker training is deterministic; multi-worker runs") {
  auto run = [](int workers) {
    Agent agent(small_net(), 4);
    A3cConfig cfg;
    cfg.workers = workers;
    cfg.updates = 60;
    cfg.seed = 2;
    auto res = train_a3c(agent, [](std::uint64_t) { return std::make_unique<BanditEnv>(); }, cfg);
    return std::make_pair(agent.actor().params(), curve_to_csv(res.curve));
  };
  const auto a = run(1);
  const auto b = run(1);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.second.rfind("update,mean_reward,entropy,critic_loss\n", 0) == 0);
  const auto m = run(3);
  CHECK(m.first.size() == a.first.size());

  A3cConfig bad;
  bad.discount = 1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("session env and controllers") {
  const auto video = testing::flat_video(60, 25, 40);
  SessionEnvSpec spec;
  spec.video = &video;
  spec.session.link.trace = testing::constant_trace(3000, 60);
  spec.session.duration = 20;
  const StateBuilder builder(nullptr, Ablation::kS, 4);
  CHECK_THROWS_AS(StateBuilder(nullptr, Ablation::kFull, 4), ValidationError);

  SessionEnv env({spec}, builder, 3);
  auto s = env.reset();
  CHECK(env.session()->second() == 4);
  CHECK(s.v == 0.0);
  int steps = 0;
  double prev = env.session()->previous_target();
  CHECK(prev == 1000.0);
  while (true) {
    const auto tr = env.step(5);
    ++steps;
    const double now = env.session()->previous_target();
    CHECK(now == std::min(prev + 600.0, 6100.0));
    prev = now;
    if (tr.done) break;
  }
  CHECK(steps == 16);

  const Agent agent(small_net(), 1);
  AnablepsController ctl(agent, builder);
  RandomActionController rnd(builder, 1);
  for (netsim::BitrateController* c : {static_cast<netsim::BitrateController*>(&ctl),
                                       static_cast<netsim::BitrateController*>(&rnd)}) {
    netsim::Session session(video, spec.session);
    while (!session.done()) {
      const auto ctx = session.context();
      const double t = c->next_target(ctx);
      CHECK(t >= 300.0);
      CHECK(t <= 6100.0);
      if (ctx.second < 4) CHECK(t == 1000.0);
      session.step(t);
    }
  }
}

TEST_CASE("checkpoint round trip keeps ablation and outputs") {
  const auto dir = testing::temp_dir("abrn_ckpt");
  const Agent agent(small_net(), 8);
  agent.save(dir / "agent.json", Ablation::kC);
  const auto [loaded, ablation] = Agent::load(dir / "agent.json");
  CHECK(ablation == Ablation::kC);
  CHECK(loaded.actor().params() == agent.actor().params());
  CHECK(loaded.critic().params() == agent.critic().params());
  std::mt19937_64 rng(1);
  const auto st = random_state(rng);
  CHECK(loaded.policy(st) == agent.policy(st));
  CHECK(loaded.value(st) == agent.value(st));
}

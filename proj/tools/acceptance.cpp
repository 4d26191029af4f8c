// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner: one PASS/FAIL line per criterion with the measured
// values and the tolerance they were held to. Exits 0 once every check has
// run; --strict turns any FAIL into exit code 1.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "anableps/abrn.hpp"
#include "anableps/baselines.hpp"
#include "anableps/cbpn.hpp"
#include "anableps/common.hpp"
#include "anableps/harness.hpp"
#include "anableps/netsim.hpp"
#include "anableps/neural.hpp"
#include "anableps/reward.hpp"

namespace fs = std::filesystem;
using namespace anableps;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Options {
  fs::path workdir = "acceptance_work";
  std::uint64_t seed = 1;
  int abrn_updates = 20000;
};

// ---------------------------------------------------------------------------
// Fixtures

trace::NetworkTrace constant_trace(double kbps, double duration_s) {
  std::vector<trace::BandwidthSample> s;
  const auto n = static_cast<std::size_t>(duration_s / trace::kTraceGranularitySec);
  for (std::size_t i = 0; i < n; ++i) s.push_back({0.5 * static_cast<double>(i), kbps});
  return trace::NetworkTrace(std::move(s));
}

trace::NetworkTrace step_trace(double before, double after, double step_at, double duration_s) {
  std::vector<trace::BandwidthSample> s;
  const auto n = static_cast<std::size_t>(duration_s / trace::kTraceGranularitySec);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = 0.5 * static_cast<double>(i);
    s.push_back({t, t < step_at ? before : after});
  }
  return trace::NetworkTrace(std::move(s));
}

trace::ComplexityTrace flat_video(double si, double ti, double duration_s) {
  std::vector<trace::ComplexitySample> s;
  const auto n = static_cast<std::size_t>(duration_s / trace::kComplexityPeriodSec);
  for (std::size_t i = 0; i < n; ++i) s.push_back({0.25 * static_cast<double>(i), si, ti});
  return trace::ComplexityTrace(std::move(s), 25.0, 125);
}

class Constant : public netsim::BitrateController {
 public:
  explicit Constant(double kbps) : kbps_(kbps) {}
  double next_target(const netsim::DecisionContext&) override { return kbps_; }

 private:
  double kbps_;
};

class RandomWalk : public netsim::BitrateController {
 public:
  explicit RandomWalk(std::uint64_t seed) : rng_(seed) {}
  double next_target(const netsim::DecisionContext&) override {
    return std::uniform_real_distribution<double>(300.0, 6100.0)(rng_);
  }

 private:
  std::mt19937_64 rng_;
};

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

std::vector<std::vector<double>> random_inputs(const nn::Network& net, std::mt19937_64& rng) {
  std::vector<std::vector<double>> in;
  for (int id : net.inputs()) in.push_back(random_vec(net.shape(id).size(), rng));
  return in;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Relative path -> bytes for every file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome c1_reward() {
  const double a = abrn::reward(0.8, 0.8, 0.0, 0.0);
  const double b = abrn::reward(1.0, 0.5, 0.2, 0.3);
  const double ea = std::abs(a - 6.4);
  const double eb = std::abs(b - 6.35);
  return {ea <= 1e-9 && eb <= 1e-9,
          fmt("R=%.12g (want 6.4), R=%.12g (want 6.35), tol 1e-9", a, b)};
}

Outcome c2_actions() {
  int checked = 0;
  int wrong = 0;
  for (int a = 0; a < abrn::kActionCount; ++a) {
    for (double prev : {300.0, 500.0, 4000.0, 6000.0, 6100.0}) {
      for (double p : {0.0, 0.25, 1.0}) {
        const double want = a == 0 ? std::clamp(prev * (1.0 - p), 300.0, 6100.0)
                                   : std::clamp(prev + abrn::kActionDeltas[static_cast<std::size_t>(a)],
                                                300.0, 6100.0);
        ++checked;
        if (abrn::apply_action(prev, a, p) != want) ++wrong;
      }
    }
  }
  // Spot values written out by hand.
  const bool spots = abrn::apply_action(4000, 0, 0.25) == 3000 &&
                     abrn::apply_action(300, 0, 1.0) == 300 &&
                     abrn::apply_action(500, 1, 0.0) == 300 &&
                     abrn::apply_action(6000, 5, 0.0) == 6100 &&
                     abrn::apply_action(4000, 2, 1.0) == 4000 &&
                     abrn::apply_action(6000, 3, 0.0) == 6100 &&
                     abrn::apply_action(4000, 4, 0.25) == 4400;
  return {wrong == 0 && checked == 90 && spots,
          fmt("%d/%d table entries exact, hand-written spots %s", checked - wrong, checked,
              spots ? "ok" : "mismatch")};
}

Outcome c3_metrics() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> kbps(300.0, 6100.0);
  std::uniform_real_distribution<double> err(0.0, 1500.0);
  std::vector<cbpn::BitrateRange> p(1000);
  std::vector<double> a(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    p[i] = {kbps(rng), err(rng)};
    a[i] = kbps(rng);
  }
  const auto m = cbpn::compute_metrics(p, a);
  double mad = 0.0, in = 0.0, mv = 0.0, ma = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    mad += std::abs(p[i].v - a[i]) / 6100.0;
    in += (a[i] >= p[i].v - p[i].e && a[i] <= p[i].v + p[i].e) ? 1.0 : 0.0;
    mv += p[i].v;
    ma += a[i];
  }
  mv /= 1000.0;
  ma /= 1000.0;
  double num = 0.0, dv = 0.0, da = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    num += (p[i].v - mv) * (a[i] - ma);
    dv += (p[i].v - mv) * (p[i].v - mv);
    da += (a[i] - ma) * (a[i] - ma);
  }
  const double e_mad = std::abs(m.mad - mad / 1000.0);
  const double e_cr = std::abs(m.cr - in / 1000.0);
  const double e_pcc = m.pcc ? std::abs(*m.pcc - num / std::sqrt(dv * da)) : 1.0;
  const std::vector<cbpn::BitrateRange> ex(4, {5.0, 1.0});
  const double cr = cbpn::compute_metrics(ex, std::vector<double>{5.5, 6.5, 4.2, 4.8}).cr;
  const double worst = std::max({e_mad, e_cr, e_pcc});
  return {worst <= 1e-12 && cr == 0.75,
          fmt("max |metric - oracle| = %.3g (tol 1e-12), worked-example CR = %.4g (want 0.75)",
              worst, cr)};
}

Outcome c4_gradients() {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> dim(1, 6);
  auto randomize = [&](nn::Network& net) {
    for (double& p : net.params()) p = std::normal_distribution<double>(0.0, 0.5)(rng);
  };
  std::size_t kinks = 0;
  std::size_t probes = 0;
  auto check = [&](const nn::Network& net, std::size_t max_params = SIZE_MAX) {
    std::size_t k = 0;
    const auto in = random_inputs(net, rng);
    const double e = nn::grad_check(net, in, 1e-5, max_params, rng(), &k);
    kinks += k;
    for (const auto& x : in) probes += x.size();
    probes += std::min(max_params, net.param_count());
    return e;
  };
  std::map<std::string, double> worst;
  auto note = [&](const std::string& k, double e) { worst[k] = std::max(worst[k], e); };
  for (int trial = 0; trial < 100; ++trial) {
    {
      nn::Network net;
      const int in = net.input("x", {dim(rng), dim(rng)});
      net.mark_output(net.dense("d", in, dim(rng)));
      randomize(net);
      note("dense", check(net));
    }
    {
      nn::Network net;
      const int len = dim(rng) + 2;
      const int in = net.input("x", {dim(rng), len});
      const int k = std::uniform_int_distribution<int>(1, len)(rng);
      net.mark_output(
          net.conv1d("c", in, dim(rng), k, std::uniform_int_distribution<int>(1, 3)(rng)));
      randomize(net);
      note("conv1d", check(net));
    }
    {
      nn::Network net;
      const int in = net.input("x", {dim(rng), dim(rng)});
      net.mark_output(net.gru("g", in, dim(rng)));
      randomize(net);
      note("gru", check(net));
    }
    {
      nn::Network net;
      const int in = net.input("x", {dim(rng), 1});
      const int d = net.dense("d", in, dim(rng) + 1);
      net.mark_output(net.relu("r", d));
      randomize(net);
      note("relu", check(net));
    }
    {
      nn::Network net;
      const int in = net.input("x", {dim(rng), 1});
      net.mark_output(net.softmax("s", net.dense("d", in, dim(rng) + 1)));
      randomize(net);
      note("softmax", check(net));
    }
    {
      nn::Network net;
      const int a = net.input("a", {dim(rng), 1});
      const int b = net.input("b", {dim(rng), 1});
      net.mark_output(net.dense("o", net.concat("c", {net.dense("da", a, dim(rng)),
                                                     net.dense("db", b, dim(rng))}),
                                dim(rng)));
      randomize(net);
      note("concat", check(net));
    }
    // Full networks from fresh initialisations; a random subset of
    // parameters per configuration keeps this under a minute.
    {
      cbpn::CbpnModel model(cbpn::ModelConfig{}, rng());
      note("cbpn-baseline", check(model.baseline(), 60));
      note("cbpn-error", check(model.error(), 60));
    }
    {
      const auto seed = rng();
      note("abrn-actor", check(abrn::build_actor(abrn::NetConfig{}, seed), 30));
      note("abrn-critic", check(abrn::build_critic(abrn::NetConfig{}, seed), 30));
    }
  }
  double overall = 0.0;
  std::string parts;
  for (const auto& [k, v] : worst) {
    overall = std::max(overall, v);
    parts += (parts.empty() ? "" : " ") + k + "=" + fmt("%.2g", v);
  }
  return {overall < 1e-4, fmt("max rel err %.3g over 100 configs (tol 1e-4); %zu of %zu probes "
                              "skipped on relu kinks: ",
                              overall, kinks, probes) +
                              parts};
}

Outcome c5_distribution() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_sum = 0.0;
  double min_p = 1.0;
  int draws = 0;
  for (int net_draw = 0; net_draw < 100; ++net_draw) {
    abrn::Agent agent(abrn::NetConfig{}, rng());
    // Stretch the initialisation so some draws produce peaked policies.
    const double stretch = 1.0 + 2.0 * u(rng);
    for (double& p : agent.actor().params()) p *= stretch;
    for (int s = 0; s < 100; ++s) {
      abrn::AbrnState st;
      st.v = u(rng);
      st.e = u(rng);
      st.s = u(rng);
      st.r = u(rng);
      for (auto* h : {&st.d, &st.p, &st.n, &st.f, &st.h}) {
        for (double& x : *h) x = u(rng);
      }
      const auto pi = agent.policy(st);
      double sum = 0.0;
      for (double x : pi) {
        sum += x;
        min_p = std::min(min_p, x);
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      ++draws;
    }
  }
  return {min_p > 0.0 && worst_sum <= 1e-6,
          fmt("%d draws: min prob %.3g (> 0), max |sum - 1| %.3g (tol 1e-6)", draws, min_p,
              worst_sum)};
}

Outcome c6_physics() {
  std::string detail;
  bool pass = true;
  // (a) application rate under the link rate with a noise-free encoder.
  {
    int bad = 0;
    for (double rate : {1000.0, 3000.0, 6000.0}) {
      netsim::SessionConfig cfg;
      cfg.link.trace = constant_trace(6500.0, 40.0);
      cfg.encoder.fluct.sigma = 0.0;
      cfg.duration = 30.0;
      Constant policy(rate);
      const auto log = netsim::run_session(policy, flat_video(60.0, 40.0, 40.0), cfg);
      for (const auto& rec : log.seconds) bad += rec.obs.p != 0.0 || rec.obs.h != 0.0;
      bad += netsim::stalling_ratio(log.played_fps()) != 0.0;
    }
    pass = pass && bad == 0;
    detail += fmt("(a) %d nonzero p/h/stall values; ", bad);
  }
  // (b) application rate over the link rate: first drop vs the fill time.
  {
    double worst = 0.0;
    double tick = 0.0;
    for (auto [rate, link] : {std::pair{8000.0, 6500.0}, {7000.0, 3000.0}, {9000.0, 5000.0}}) {
      netsim::SessionConfig cfg;
      cfg.link.trace = constant_trace(link, 40.0);
      cfg.encoder.fluct.sigma = 0.0;
      cfg.encoder.max_bitrate = 10000.0;
      cfg.duration = 30.0;
      Constant policy(rate);
      const auto log = netsim::run_session(policy, flat_video(60.0, 40.0, 40.0), cfg);
      double first = -1.0;
      for (const auto& e : log.events) {
        if (e.kind == netsim::EventKind::kDrop) {
          first = e.time;
          break;
        }
      }
      const double expected =
          cfg.link.resolved_queue_capacity() / ((rate - link) * 1000.0 / 8.0);
      tick = cfg.link.tick;
      worst = std::max(worst, first < 0.0 ? 1e9 : std::abs(first - expected));
    }
    pass = pass && worst <= tick;
    detail += fmt("(b) max |first drop - fill time| %.4g s (tol %.4g); ", worst, tick);
  }
  // (c) conservation and delay bounds on fuzzed sessions.
  {
    int failed = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      std::mt19937_64 rng(seed);
      const double mu = std::uniform_real_distribution<double>(800.0, 7000.0)(rng);
      const double owd = std::uniform_real_distribution<double>(0.0, 0.08)(rng);
      netsim::SessionConfig cfg;
      cfg.link.trace = trace::generate_synthetic_network_trace(
          {20.0, mu, 0.4 * mu, static_cast<trace::TraceModel>(seed % 3), seed});
      cfg.link.base_owd = owd;
      cfg.link.random_loss = seed % 2 ? 0.02 : 0.0;
      cfg.duration = 20.0;
      cfg.seed = seed;
      RandomWalk policy(seed);
      const auto video =
          trace::generate_synthetic_complexity_trace({20.0, 60.0, 25.0, 6.0, 25.0, 125, seed});
      const auto log = netsim::run_session(policy, video, cfg);
      const double base = cfg.link.base_owd;
      std::map<std::pair<std::uint64_t, int>, double> sent_at;
      double sent = 0.0;
      double arrived = 0.0;
      bool ok = log.seconds.size() == 20;
      for (const auto& e : log.events) {
        if (e.kind == netsim::EventKind::kSend || e.kind == netsim::EventKind::kRetransmit) {
          sent_at[{e.seq, e.attempt}] = e.time;
          sent += e.bytes;
        } else if (e.kind == netsim::EventKind::kArrive) {
          arrived += e.bytes;
          const auto it = sent_at.find({e.seq, e.attempt});
          ok = ok && it != sent_at.end() && e.time >= it->second + base - 1e-12;
          ok = ok && e.value >= 2.0 * base - 1e-12;
        } else if (e.kind == netsim::EventKind::kFrameComplete) {
          ok = ok && e.time - e.value >= base - 1e-12;
        }
      }
      ok = ok && arrived <= sent;
      for (const auto& rec : log.seconds) {
        const auto& o = rec.obs;
        ok = ok && o.p >= 0.0 && o.p <= 1.0 && o.h >= 0.0 && o.h <= 1.0 &&
             o.d >= 2.0 * base - 1e-12 && o.f >= base - 1e-12;
      }
      failed += !ok;
    }
    pass = pass && failed == 0;
    detail += fmt("(c) %d/1000 fuzzed sessions violate conservation or delay bounds", failed);
  }
  return {pass, detail};
}

// Small corpus under `dir` for checks that only need the harness plumbing.
harness::ExperimentConfig small_config(const fs::path& dir, std::uint64_t seed) {
  harness::ExperimentConfig cfg;
  cfg.base_dir = dir;
  cfg.seed = seed;
  cfg.corpus.trace_count = 5;
  cfg.corpus.trace_seconds = 60.0;
  cfg.corpus.video_count = 4;
  cfg.corpus.train_videos = 2;
  cfg.corpus.video_seconds = 40.0;
  cfg.eval.session_seconds = 30.0;
  cfg.abrn.episode_seconds = 20.0;
  cfg.abrn.net = {16, 3, 16, 16, 16};
  cfg.abrn.a3c.workers = 1;
  cfg.abrn.a3c.updates = 60;
  return cfg;
}

Outcome c7_determinism(const Options& opt) {
  const fs::path dir = opt.workdir / "determinism";
  fs::remove_all(dir);
  auto cfg = small_config(dir, opt.seed);
  harness::generate_corpus(cfg);
  cfg.ablation = abrn::Ablation::kS;
  auto run = [&](harness::Mode mode, const std::string& policy, const std::string& out) {
    auto c = cfg;
    c.mode = mode;
    c.policy = policy;
    c.out_dir = out;
    harness::run_experiment(c);
    return tree(dir / out);
  };
  int compared = 0;
  int differing = 0;
  auto compare = [&](const std::map<std::string, std::string>& a,
                     const std::map<std::string, std::string>& b) {
    compared += static_cast<int>(a.size());
    differing += a.size() != b.size();
    for (const auto& [k, v] : a) {
      const auto it = b.find(k);
      differing += it == b.end() || it->second != v;
    }
  };
  for (const char* policy : {"random", "gcc"}) {
    compare(run(harness::Mode::kSimulate, policy, std::string("sim_a_") + policy),
            run(harness::Mode::kSimulate, policy, std::string("sim_b_") + policy));
  }
  // Single-worker training, including the checkpoint it writes.
  const auto ta = run(harness::Mode::kTrainAbrn, "anableps", "train_a");
  const auto ckpt_a = slurp(cfg.resolve(cfg.paths.abrn_s));
  const auto tb = run(harness::Mode::kTrainAbrn, "anableps", "train_b");
  const auto ckpt_b = slurp(cfg.resolve(cfg.paths.abrn_s));
  compare(ta, tb);
  ++compared;
  differing += ckpt_a != ckpt_b;
  // A different seed must change the session log.
  auto other = cfg;
  other.seed = opt.seed + 1;
  other.mode = harness::Mode::kSimulate;
  other.policy = "random";
  other.out_dir = "sim_other";
  harness::run_experiment(other);
  const bool seed_matters = tree(dir / "sim_other") != tree(dir / "sim_a_random");
  return {differing == 0 && compared > 4 && seed_matters,
          fmt("%d files compared byte for byte, %d differ; another seed changes output: %s",
              compared, differing, seed_matters ? "yes" : "no")};
}

harness::ExperimentConfig pipeline_config(const Options& opt) {
  harness::ExperimentConfig cfg;
  cfg.base_dir = opt.workdir / "pipeline";
  cfg.seed = opt.seed;
  cfg.abrn.a3c.workers = 1;
  cfg.abrn.a3c.updates = opt.abrn_updates;
  return cfg;
}

// Regenerates the corpus unless it was produced from the same settings.
void ensure_corpus(const harness::ExperimentConfig& cfg) {
  const fs::path stamp = cfg.base_dir / "corpus.stamp";
  const std::string want = harness::format_config(cfg);
  if (fs::exists(stamp) && slurp(stamp) == want) return;
  harness::generate_corpus(cfg);
  fs::create_directories(stamp.parent_path());
  std::ofstream(stamp, std::ios::binary) << want;
}

Outcome c8_cbpn(const Options& opt) {
  const auto cfg = pipeline_config(opt);
  ensure_corpus(cfg);
  const auto run = harness::train_cbpn(cfg);
  run.model.save(cfg.resolve(cfg.paths.cbpn_checkpoint));
  const auto m = cbpn::eval_metrics(run.model, run.heldout);
  const auto last = cbpn::eval_last_target(run.heldout);
  const double gain = 1.0 - m.mad / last.mad;
  const bool frozen = run.model.baseline().params() == run.baseline_params;
  const bool pass = m.cr >= 0.80 && m.cr <= 0.90 && gain >= 0.30 && frozen;
  return {pass, fmt("held-out CR %.4f (want [0.80, 0.90]); MAD %.4f vs last-target %.4f, "
                    "%.1f%% better (want >= 30%%); baseline frozen across error training: %s; "
                    "%zu held-out samples",
                    m.cr, m.mad, last.mad, 100.0 * gain, frozen ? "yes" : "no",
                    run.heldout.size())};
}

Outcome c9_abrn(const Options& opt) {
  // (a) bandit
  abrn::Agent bandit_agent(abrn::NetConfig{}, 1);
  abrn::A3cConfig bcfg;
  bcfg.workers = 1;
  bcfg.updates = 500;
  bcfg.seed = 1;
  abrn::train_a3c(bandit_agent, [](std::uint64_t) { return std::make_unique<abrn::BanditEnv>(5, 10); },
                  bcfg);
  const double p_rewarded = bandit_agent.policy(abrn::BanditEnv::state())[5];

  // (b) tiny suite: 2 traces x 2 videos, 60 s, no predictor input.
  std::vector<trace::NetworkTrace> traces;
  std::vector<trace::ComplexityTrace> videos;
  for (std::uint64_t i = 0; i < 2; ++i) {
    trace::TraceGenSpec t;
    t.duration_s = 60.0;
    t.seed = 100 + i;
    traces.push_back(trace::generate_synthetic_network_trace(t));
    trace::VideoGenSpec v;
    v.duration_s = 60.0;
    v.seed = 200 + i;
    videos.push_back(trace::generate_synthetic_complexity_trace(v));
  }
  std::vector<abrn::SessionEnvSpec> specs;
  for (const auto& t : traces) {
    for (const auto& v : videos) {
      abrn::SessionEnvSpec s;
      s.video = &v;
      s.session.link.trace = t;
      s.session.duration = 60.0;
      specs.push_back(s);
    }
  }
  const abrn::StateBuilder builder(nullptr, abrn::Ablation::kS, 4);
  const abrn::EnvFactory make_env = [&](std::uint64_t seed) {
    return std::make_unique<abrn::SessionEnv>(specs, builder, seed);
  };
  abrn::Agent agent(abrn::NetConfig{}, opt.seed);
  abrn::A3cConfig cfg;
  cfg.workers = 1;
  cfg.updates = opt.abrn_updates;
  cfg.seed = derive_seed(opt.seed, 9);
  abrn::train_a3c(agent, make_env, cfg);
  constexpr int kEpisodes = 40;
  const double random_mean =
      abrn::evaluate_policy(make_env, kEpisodes, 7, [](const abrn::AbrnState&, std::mt19937_64& g) {
        return std::uniform_int_distribution<int>(0, abrn::kActionCount - 1)(g);
      });
  // The trained agent acts with the harness's default selection; the other
  // mode is reported alongside.
  auto trained = [&](abrn::SelectMode mode) {
    return abrn::evaluate_policy(make_env, kEpisodes, 7,
                                 [&](const abrn::AbrnState& s, std::mt19937_64& g) {
                                   return abrn::select_action(agent.policy(s), mode, g);
                                 });
  };
  const bool argmax = harness::EvalConfig{}.selection == "argmax";
  const double argmax_mean = trained(abrn::SelectMode::kArgmax);
  const double sample_mean = trained(abrn::SelectMode::kSample);
  const double trained_mean = argmax ? argmax_mean : sample_mean;
  const double ratio = trained_mean / random_mean;
  return {p_rewarded >= 0.9 && random_mean > 0.0 && ratio >= 1.3,
          fmt("(a) bandit P(rewarded) %.4f after 500 updates (want >= 0.9); (b) trained (%s) "
              "%.1f vs random %.1f over %d episodes, ratio %.3f (want >= 1.3), %d updates; "
              "argmax %.1f, sample %.1f",
              p_rewarded, argmax ? "argmax" : "sample", trained_mean, random_mean, kEpisodes,
              ratio, opt.abrn_updates, argmax_mean, sample_mean)};
}

Outcome c10_pipeline(const Options& opt) {
  auto cfg = pipeline_config(opt);
  ensure_corpus(cfg);
  if (!fs::exists(cfg.resolve(cfg.paths.cbpn_checkpoint))) {
    cfg.mode = harness::Mode::kTrainCbpn;
    cfg.out_dir = "train_cbpn";
    harness::run_experiment(cfg);
  }
  // Agents are retrained only when the settings or the predictor changed;
  // evaluation settings do not affect training.
  std::string settings = harness::format_config(pipeline_config(opt));
  settings.erase(settings.find("[eval]"));
  const std::string stamp_text = settings + slurp(cfg.resolve(cfg.paths.cbpn_checkpoint));
  for (auto ab : {abrn::Ablation::kFull, abrn::Ablation::kC, abrn::Ablation::kS}) {
    auto c = cfg;
    c.mode = harness::Mode::kTrainAbrn;
    c.ablation = ab;
    c.out_dir = "train_abrn_" + abrn::to_string(ab);
    const fs::path ckpt = ab == abrn::Ablation::kFull ? c.resolve(c.paths.abrn_full)
                          : ab == abrn::Ablation::kC  ? c.resolve(c.paths.abrn_c)
                                                      : c.resolve(c.paths.abrn_s);
    const fs::path stamp = fs::path(ckpt).replace_extension(".stamp");
    if (fs::exists(ckpt) && fs::exists(stamp) && slurp(stamp) == stamp_text) continue;
    harness::run_experiment(c);
    std::ofstream(stamp, std::ios::binary) << stamp_text;
  }
  auto c = cfg;
  c.mode = harness::Mode::kCompare;
  c.eval.policies = "gcc,anableps-full,anableps-c,anableps-s";
  c.eval.anchor = "gcc";
  c.out_dir = "compare";
  const auto summary = harness::run_experiment(c);
  const auto& aggs = summary["result"]["policies"];
  std::map<std::string, nlohmann::json> mean;
  for (const auto& a : aggs) mean[a["policy"].get<std::string>()] = a["mean"];
  auto get = [&](const std::string& p, const char* k) { return mean.at(p)[k].get<double>(); };
  const double q_full = get("anableps-full", "quality");
  const double q_gcc = get("gcc", "quality");
  const bool stall = get("anableps-full", "stalling_ratio") < get("gcc", "stalling_ratio");
  const bool rate = get("anableps-full", "sending_kbps") < get("gcc", "sending_kbps");
  const bool delay = get("anableps-full", "frame_delay_s") < get("gcc", "frame_delay_s");
  const bool quality = q_full >= 0.95 * q_gcc;
  const double r_full = get("anableps-full", "reward");
  const double r_c = get("anableps-c", "reward");
  const double r_s = get("anableps-s", "reward");
  auto at_least = [](double a, double b) { return a >= b - 0.02 * std::abs(b); };
  const bool order = at_least(r_full, r_c) && at_least(r_c, r_s);
  std::string detail = fmt("cells %d; ", summary["result"]["cells"].get<int>());
  for (const char* p : {"gcc", "anableps-full", "anableps-c", "anableps-s"}) {
    detail += fmt("%s q=%.4f kbps=%.0f stall=%.4f delay=%.3f R=%.2f; ", p, get(p, "quality"),
                  get(p, "sending_kbps"), get(p, "stalling_ratio"), get(p, "frame_delay_s"),
                  get(p, "reward"));
  }
  detail += fmt("full<gcc stall %s bitrate %s delay %s, quality within 5%% %s, "
                "reward full>=c>=s (2%% ties) %s",
                stall ? "yes" : "no", rate ? "yes" : "no", delay ? "yes" : "no",
                quality ? "yes" : "no", order ? "yes" : "no");
  return {stall && rate && delay && quality && order, detail};
}

Outcome c11_gcc() {
  auto run = [](const trace::NetworkTrace& link, double duration, double* stall) {
    baselines::GccController gcc;
    netsim::SessionConfig cfg;
    cfg.link.trace = link;
    cfg.duration = duration;
    cfg.seed = 3;
    const auto video = flat_video(60.0, 25.0, duration);
    netsim::Session session(video, cfg);
    std::vector<double> targets;
    while (!session.done()) {
      const double t = gcc.next_target(session.context());
      targets.push_back(t);
      session.step(t);
    }
    if (stall) *stall = netsim::stalling_ratio(session.log().played_fps());
    return targets;
  };
  const auto drop = run(step_trace(6000.0, 2000.0, 60.0, 90.0), 90.0, nullptr);
  int drop_at = -1;
  for (int t = 60; t < static_cast<int>(drop.size()); ++t) {
    if (drop[static_cast<std::size_t>(t)] < 2600.0) {
      drop_at = t;
      break;
    }
  }
  const bool dropped = drop_at >= 60 && drop_at <= 62;
  double stall = 1.0;
  const auto climb = run(constant_trace(10000.0, 90.0), 90.0, &stall);
  bool monotone = true;
  for (std::size_t i = 1; i < climb.size(); ++i) monotone = monotone && climb[i] >= climb[i - 1];
  int cap_at = -1;
  for (std::size_t i = 0; i < climb.size(); ++i) {
    if (climb[i] == kMaxBitrateKbps) {
      cap_at = static_cast<int>(i);
      break;
    }
  }
  const bool capped = climb.back() == kMaxBitrateKbps;
  return {dropped && monotone && capped,
          fmt("step 6000->2000 at t=60: target %.0f kbps at t=%d (want < 2600 by t=62); clean "
              "10000 kbps link: monotone %s, cap 6100 reached at t=%d, stall %.3g",
              drop_at >= 0 ? drop[static_cast<std::size_t>(drop_at)] : drop.back(), drop_at,
              monotone ? "yes" : "no", cap_at, stall)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Runs every acceptance check and prints one PASS/FAIL line each.");
  Options opt;
  std::string only;
  bool strict = false;
  app.add_option("--workdir", opt.workdir, "Scratch directory for corpora and checkpoints");
  app.add_option("--seed", opt.seed, "Experiment seed");
  app.add_option("--abrn-updates", opt.abrn_updates, "A3C updates per trained agent");
  app.add_option("--only", only, "Comma-separated criterion numbers");
  app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  opt.workdir = fs::absolute(opt.workdir);
  fs::create_directories(opt.workdir);

  std::set<int> selected;
  for (const auto& tok : harness::split_policies(only)) selected.insert(std::stoi(tok));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"reward formula", c1_reward},
      {"action semantics", c2_actions},
      {"metric oracle", c3_metrics},
      {"gradient checks", c4_gradients},
      {"policy distribution", c5_distribution},
      {"simulator physics", c6_physics},
      {"determinism", [&] { return c7_determinism(opt); }},
      {"cbpn training", [&] { return c8_cbpn(opt); }},
      {"abrn training", [&] { return c9_abrn(opt); }},
      {"end-to-end vs gcc", [&] { return c10_pipeline(opt); }},
      {"gcc behaviour", c11_gcc},
  };
  int passed = 0;
  int ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2d %-20s [%.1fs] %s\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
    ++ran;
    passed += o.pass;
  }
  std::printf("%d/%d criteria passed\n", passed, ran);
  return strict && passed != ran ? 1 : 0;
}

// SPDX-License-Identifier: Apache-2.0
#include "anableps/abrn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

#include "anableps/common.hpp"
#include "text_util.hpp"

namespace anableps::abrn {

const char* action_name(int index) {
  static constexpr const char* kNames[] = {"X", "-400", "0", "+200", "+400", "+600"};
  if (index < 0 || index >= kActionCount) throw ValidationError("invalid action index");
  return kNames[index];
}

double apply_action(double prev_kbps, int action, double p_latest, double min_kbps,
                    double max_kbps) {
  if (action < 0 || action >= kActionCount) {
    throw ValidationError("invalid action index " + std::to_string(action));
  }
  if (!(p_latest >= 0.0 && p_latest <= 1.0)) throw ValidationError("loss rate outside [0, 1]");
  const double next = action == 0 ? prev_kbps * (1.0 - p_latest)
                                  : prev_kbps + kActionDeltas[static_cast<std::size_t>(action)];
  return std::clamp(next, min_kbps, max_kbps);
}

Ablation parse_ablation(const std::string& name) {
  if (name == "full") return Ablation::kFull;
  if (name == "s") return Ablation::kS;
  if (name == "c") return Ablation::kC;
  throw ConfigError("unknown ablation '" + name + "' (expected full, s or c)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kS: return "s";
    case Ablation::kC: return "c";
  }
  return "full";
}

AbrnState assemble_state(const cbpn::BitrateRange& range,
                         std::span<const netsim::ReceiverObservation> recent,
                         Ablation ablation) {
  AbrnState st;
  st.v = range.v / kKbpsScale;
  st.e = range.e / kKbpsScale;
  const std::size_t have = std::min<std::size_t>(recent.size(), kHistory);
  st.warmup = have < kHistory;
  const auto last = recent.subspan(recent.size() - have);
  const std::size_t pad = kHistory - have;
  auto delay = [](double s) { return std::clamp(s, 0.0, kDelayClampSec) / kDelayClampSec; };
  for (std::size_t i = 0; i < have; ++i) {
    const auto& o = last[i];
    st.d[pad + i] = delay(o.d);
    st.p[pad + i] = std::clamp(o.p, 0.0, 1.0);
    st.n[pad + i] = std::min(o.n / kNackScale, 1.0);
    st.f[pad + i] = delay(o.f);
    st.h[pad + i] = std::clamp(o.h, 0.0, 1.0);
  }
  if (have > 0) {
    st.s = last[have - 1].s / kKbpsScale;
    st.r = last[have - 1].r / kKbpsScale;
  }
  if (ablation == Ablation::kS) st.v = 0.0;
  if (ablation != Ablation::kFull) st.e = 0.0;
  return st;
}

// ---------------------------------------------------------------------------
// Networks

namespace {

int trunk(nn::Network& n, const NetConfig& cfg) {
  const int ve = n.input("ve", {2, 1});
  const int sr = n.input("sr", {2, 1});
  const int d = n.input("d", {1, kHistory});
  const int p = n.input("p", {1, kHistory});
  const int nk = n.input("n", {1, kHistory});
  const int fh = n.input("fh", {2, kHistory});
  const int ve_f = n.relu("ve_relu", n.dense("ve_fc", ve, cfg.scalar_units));
  const int sr_f = n.relu("sr_relu", n.dense("sr_fc", sr, cfg.scalar_units));
  const int d_f = n.relu("d_relu", n.conv1d("d_conv", d, cfg.conv_filters, cfg.conv_kernel));
  const int p_f = n.relu("p_relu", n.conv1d("p_conv", p, cfg.conv_filters, cfg.conv_kernel));
  const int n_f = n.relu("n_relu", n.conv1d("n_conv", nk, cfg.conv_filters, cfg.conv_kernel));
  const int fh_f = n.gru("fh_gru", fh, cfg.gru_hidden);
  const int merged = n.concat("merge", {ve_f, sr_f, d_f, p_f, n_f, fh_f});
  return n.relu("hidden_relu", n.dense("hidden", merged, cfg.hidden));
}

}  // namespace

nn::Network build_actor(const NetConfig& cfg, std::uint64_t seed) {
  nn::Network n;
  const int h = trunk(n, cfg);
  n.mark_output(n.softmax("policy", n.dense("logits", h, kActionCount)));
  n.init(seed);
  return n;
}

nn::Network build_critic(const NetConfig& cfg, std::uint64_t seed) {
  nn::Network n;
  const int h = trunk(n, cfg);
  n.mark_output(n.dense("value", h, 1));
  n.init(seed);
  return n;
}

std::vector<std::vector<double>> network_inputs(const AbrnState& s) {
  std::vector<std::vector<double>> in(6);
  in[0] = {s.v, s.e};
  in[1] = {s.s, s.r};
  in[2].assign(s.d.begin(), s.d.end());
  in[3].assign(s.p.begin(), s.p.end());
  in[4].assign(s.n.begin(), s.n.end());
  in[5].assign(s.f.begin(), s.f.end());
  in[5].insert(in[5].end(), s.h.begin(), s.h.end());
  return in;
}

int select_action(std::span<const double> probs, SelectMode mode, std::mt19937_64& rng) {
  if (probs.empty()) throw ValidationError("empty distribution");
  if (mode == SelectMode::kArgmax) {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding left u above the cumulative sum: take the last non-zero entry.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

Agent::Agent(NetConfig cfg, std::uint64_t seed)
    : cfg_(cfg),
      actor_(build_actor(cfg, derive_seed(seed, 31))),
      critic_(build_critic(cfg, derive_seed(seed, 32))) {}

std::vector<double> Agent::policy(const AbrnState& s) const {
  const auto in = network_inputs(s);
  const auto cache = actor_.forward(in);
  return actor_.output(cache);
}

double Agent::value(const AbrnState& s) const {
  const auto in = network_inputs(s);
  const auto cache = critic_.forward(in);
  return critic_.output(cache)[0];
}

void Agent::save(const std::filesystem::path& path, Ablation ablation) const {
  const nn::NetworkRef nets[] = {{"actor", &actor_}, {"critic", &critic_}};
  nlohmann::json meta = {{"model", "abrn"},
                         {"ablation", to_string(ablation)},
                         {"conv_filters", cfg_.conv_filters},
                         {"conv_kernel", cfg_.conv_kernel},
                         {"gru_hidden", cfg_.gru_hidden},
                         {"scalar_units", cfg_.scalar_units},
                         {"hidden", cfg_.hidden},
                         {"actions", {"X", "-400", "0", "+200", "+400", "+600"}}};
  nn::save_checkpoint(path, nets, meta);
}

std::pair<Agent, Ablation> Agent::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  const auto meta = j.value("meta", nlohmann::json::object());
  if (meta.value("model", "") != "abrn") throw ParseError(path.string() + " is not an ABRN checkpoint");
  NetConfig cfg;
  cfg.conv_filters = meta.at("conv_filters").get<int>();
  cfg.conv_kernel = meta.at("conv_kernel").get<int>();
  cfg.gru_hidden = meta.at("gru_hidden").get<int>();
  cfg.scalar_units = meta.at("scalar_units").get<int>();
  cfg.hidden = meta.at("hidden").get<int>();
  Agent agent(cfg);
  const nn::NamedNetwork nets[] = {{"actor", &agent.actor_}, {"critic", &agent.critic_}};
  nn::load_checkpoint(path, nets);
  return {std::move(agent), parse_ablation(meta.at("ablation").get<std::string>())};
}

// ---------------------------------------------------------------------------
// Environments

AbrnState BanditEnv::state() {
  AbrnState s;
  s.v = s.e = s.s = s.r = 0.5;
  for (auto* a : {&s.d, &s.p, &s.n, &s.f, &s.h}) a->fill(0.5);
  return s;
}

AbrnState BanditEnv::reset() {
  t_ = 0;
  return state();
}

Transition BanditEnv::step(int action) {
  ++t_;
  return {state(), action == rewarded_ ? 1.0 : 0.0, t_ >= length_};
}

StateBuilder::StateBuilder(const cbpn::CbpnModel* predictor, Ablation ablation,
                           int warmup_seconds)
    : predictor_(predictor), ablation_(ablation), warmup_(warmup_seconds) {
  const int needed = predictor_ ? predictor_->config().layout.window_length : 0;
  if (ablation_ != Ablation::kS && predictor_ == nullptr) {
    throw ValidationError("ablation " + to_string(ablation_) + " needs a range predictor");
  }
  if (warmup_ < std::max(1, needed)) {
    throw ValidationError("warm-up must cover the predictor's history window");
  }
}

double StateBuilder::latest_loss(const netsim::DecisionContext& ctx) {
  return ctx.delivered.empty() ? 0.0 : std::clamp(ctx.delivered.back().p, 0.0, 1.0);
}

AbrnState StateBuilder::build(const netsim::DecisionContext& ctx) const {
  cbpn::BitrateRange range;
  if (ablation_ != Ablation::kS) {
    std::vector<double> targets;
    std::vector<double> actuals;
    targets.reserve(ctx.slots.size());
    actuals.reserve(ctx.slots.size());
    for (const auto& s : ctx.slots) {
      targets.push_back(s.target);
      actuals.push_back(s.actual);
    }
    // The next target is not chosen yet; assume it holds.
    const auto state = cbpn::assemble_state(targets, actuals, ctx.previous_target, ctx.second,
                                            *ctx.video, predictor_->config().layout);
    range = predictor_->predict(state);
  }
  return assemble_state(range, ctx.delivered, ablation_);
}

SessionEnv::SessionEnv(std::vector<SessionEnvSpec> specs, const StateBuilder& builder,
                       std::uint64_t seed)
    : specs_(std::move(specs)), builder_(builder), rng_(mix_seed(seed)) {
  if (specs_.empty()) throw ValidationError("session env needs at least one spec");
  for (const auto& s : specs_) {
    if (s.video == nullptr) throw ValidationError("session env spec without a video");
  }
}

AbrnState SessionEnv::reset() {
  const auto pick = std::uniform_int_distribution<std::size_t>(0, specs_.size() - 1)(rng_);
  const auto& spec = specs_[pick];
  auto cfg = spec.session;
  // Random start offset within the trace, on its 0.5 s grid.
  const double spare = cfg.link.trace.duration() - cfg.duration;
  const auto steps = static_cast<int>(std::floor(spare / trace::kTraceGranularitySec + 1e-9));
  if (steps > 0) {
    const int k = std::uniform_int_distribution<int>(0, steps)(rng_);
    cfg.link.trace = cfg.link.trace.slice(k * trace::kTraceGranularitySec, cfg.duration);
  }
  cfg.seed = rng_();
  session_ = std::make_unique<netsim::Session>(*spec.video, cfg);
  while (!session_->done() && builder_.in_warmup(session_->context())) {
    session_->step(cfg.start_bitrate);
  }
  if (session_->done()) throw ValidationError("session shorter than the warm-up");
  return builder_.build(session_->context());
}

Transition SessionEnv::step(int action) {
  if (!session_ || session_->done()) throw ValidationError("step() on a finished session");
  const auto ctx = session_->context();
  const auto& enc = session_->config().encoder;
  const double target = apply_action(ctx.previous_target, action,
                                     StateBuilder::latest_loss(ctx), enc.min_bitrate,
                                     enc.max_bitrate);
  const auto& rec = session_->step(target);
  Transition tr;
  tr.reward = rec.reward;
  tr.done = session_->done();
  if (!tr.done) tr.state = builder_.build(session_->context());
  return tr;
}

AnablepsController::AnablepsController(const Agent& agent, const StateBuilder& builder,
                                       SelectMode mode, std::uint64_t seed)
    : agent_(agent), builder_(builder), mode_(mode), rng_(mix_seed(seed)) {}

double AnablepsController::next_target(const netsim::DecisionContext& ctx) {
  if (builder_.in_warmup(ctx)) return ctx.previous_target;
  const auto probs = agent_.policy(builder_.build(ctx));
  const int a = select_action(probs, mode_, rng_);
  return apply_action(ctx.previous_target, a, StateBuilder::latest_loss(ctx));
}

RandomActionController::RandomActionController(const StateBuilder& builder, std::uint64_t seed)
    : builder_(builder), rng_(mix_seed(seed)) {}

double RandomActionController::next_target(const netsim::DecisionContext& ctx) {
  if (builder_.in_warmup(ctx)) return ctx.previous_target;
  const int a = std::uniform_int_distribution<int>(0, kActionCount - 1)(rng_);
  return apply_action(ctx.previous_target, a, StateBuilder::latest_loss(ctx));
}

// ---------------------------------------------------------------------------
// A3C

void A3cConfig::validate() const {
  if (workers < 1) throw ValidationError("workers must be >= 1");
  if (!(discount > 0.0 && discount < 1.0)) throw ValidationError("discount must lie in (0, 1)");
  if (!(reward_scale > 0.0)) throw ValidationError("reward_scale must be > 0");
  if (max_grad_norm < 0.0) throw ValidationError("max_grad_norm must be >= 0");
  if (entropy_weight < 0.0) throw ValidationError("entropy_weight must be >= 0");
  if (n_step < 1 || updates < 1 || smoothing < 1) {
    throw ValidationError("n_step, updates and smoothing must be >= 1");
  }
  actor_adam.validate();
  critic_adam.validate();
}

namespace {

void clip_norm(std::vector<double>& g, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (double& x : g) x *= k;
  }
}

struct Trainer {
  const EnvFactory& make_env;
  const A3cConfig& cfg;
  nn::SharedParameters actor_params;
  nn::SharedParameters critic_params;
  std::atomic<int> next_ticket{0};
  std::mutex log_mu;
  std::deque<double> recent_episodes;
  int episodes = 0;
  std::vector<CurvePoint> curve;

  Trainer(const EnvFactory& f, const A3cConfig& c, const Agent& agent)
      : make_env(f),
        cfg(c),
        actor_params(agent.actor().params(), c.actor_adam),
        critic_params(agent.critic().params(), c.critic_adam) {}

  void run_worker(int worker, const Agent& prototype) {
    nn::Network actor = prototype.actor();
    nn::Network critic = prototype.critic();
    std::mt19937_64 rng(derive_seed(cfg.seed, 41, static_cast<std::uint64_t>(worker)));
    std::uint64_t episode_index = 0;
    auto new_env = [&] {
      return make_env(derive_seed(cfg.seed, static_cast<std::uint64_t>(worker) + 1000,
                                  episode_index++));
    };
    auto env = new_env();
    AbrnState state = env->reset();
    double episode_reward = 0.0;

    std::vector<double> actor_grads(actor.param_count());
    std::vector<double> critic_grads(critic.param_count());
    struct Step {
      nn::Cache actor_cache;
      nn::Cache critic_cache;
      int action = 0;
      double value = 0.0;
      double reward = 0.0;
    };
    std::vector<Step> steps;

    while (true) {
      const int ticket = next_ticket.fetch_add(1);
      if (ticket >= cfg.updates) break;
      actor_params.snapshot(actor.params());
      critic_params.snapshot(critic.params());

      steps.clear();
      bool done = false;
      std::vector<double> finished;
      for (int k = 0; k < cfg.n_step; ++k) {
        const auto in = network_inputs(state);
        Step s;
        s.actor_cache = actor.forward(in);
        s.critic_cache = critic.forward(in);
        s.value = critic.output(s.critic_cache)[0];
        s.action = select_action(actor.output(s.actor_cache), SelectMode::kSample, rng);
        const Transition tr = env->step(s.action);
        s.reward = tr.reward;
        episode_reward += tr.reward;
        steps.push_back(std::move(s));
        if (tr.done) {
          finished.push_back(episode_reward);
          episode_reward = 0.0;
          done = true;
          break;
        }
        state = tr.state;
      }

      double ret = 0.0;
      if (!done) {
        const auto in = network_inputs(state);
        ret = critic.output(critic.forward(in))[0];
      }
      const double beta = cfg.entropy_weight *
                          (1.0 - static_cast<double>(ticket) / static_cast<double>(cfg.updates));
      const double scale = 1.0 / static_cast<double>(steps.size());
      std::fill(actor_grads.begin(), actor_grads.end(), 0.0);
      std::fill(critic_grads.begin(), critic_grads.end(), 0.0);
      double entropy_sum = 0.0;
      double critic_loss = 0.0;
      for (std::size_t k = steps.size(); k-- > 0;) {
        const auto& s = steps[k];
        ret = cfg.reward_scale * s.reward + cfg.discount * ret;
        const double adv = ret - s.value;
        const auto& probs = actor.output(s.actor_cache);
        std::vector<double> dp(probs.size());
        for (std::size_t i = 0; i < probs.size(); ++i) {
          const double logp = std::log(std::max(probs[i], 1e-12));
          entropy_sum -= probs[i] * logp;
          // d/dp of -beta * H = beta * (log p + 1)
          dp[i] = beta * (logp + 1.0) * scale;
        }
        const auto a = static_cast<std::size_t>(s.action);
        dp[a] -= adv / std::max(probs[a], 1e-12) * scale;
        const std::vector<double> ag[] = {dp};
        actor.backward(s.actor_cache, ag, actor_grads);
        const std::vector<double> cg[] = {{(s.value - ret) * scale}};
        critic.backward(s.critic_cache, cg, critic_grads);
        critic_loss += (ret - s.value) * (ret - s.value);
      }
      clip_norm(actor_grads, cfg.max_grad_norm);
      clip_norm(critic_grads, cfg.max_grad_norm);
      actor_params.apply(actor_grads);
      critic_params.apply(critic_grads);

      {
        std::lock_guard lock(log_mu);
        for (double r : finished) {
          recent_episodes.push_back(r);
          if (recent_episodes.size() > static_cast<std::size_t>(cfg.smoothing)) {
            recent_episodes.pop_front();
          }
          ++episodes;
        }
        CurvePoint pt;
        pt.update = ticket;
        pt.entropy = entropy_sum * scale;
        pt.critic_loss = critic_loss * scale;
        pt.episodes = episodes;
        double total = 0.0;
        for (double r : recent_episodes) total += r;
        pt.mean_reward = recent_episodes.empty()
                             ? 0.0
                             : total / static_cast<double>(recent_episodes.size());
        curve.push_back(pt);
      }
      if (done) {
        env = new_env();
        state = env->reset();
      }
    }
  }
};

}  // namespace

TrainResult train_a3c(Agent& agent, const EnvFactory& make_env, const A3cConfig& cfg) {
  cfg.validate();
  Trainer trainer(make_env, cfg, agent);
  if (cfg.workers == 1) {
    trainer.run_worker(0, agent);
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.workers));
    for (int w = 0; w < cfg.workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          trainer.run_worker(w, agent);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
          trainer.next_ticket.store(cfg.updates);
        }
      });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  trainer.actor_params.snapshot(agent.actor().params());
  trainer.critic_params.snapshot(agent.critic().params());
  std::sort(trainer.curve.begin(), trainer.curve.end(),
            [](const CurvePoint& a, const CurvePoint& b) { return a.update < b.update; });
  return {std::move(trainer.curve)};
}

std::string curve_to_csv(std::span<const CurvePoint> curve) {
  std::string out = "update,mean_reward,entropy,critic_loss\n";
  for (const auto& p : curve) {
    out += std::to_string(p.update) + ',' + text::format_double(p.mean_reward) + ',' +
           text::format_double(p.entropy) + ',' + text::format_double(p.critic_loss) + '\n';
  }
  return out;
}

double evaluate_policy(const EnvFactory& make_env, int episodes, std::uint64_t seed,
                       const std::function<int(const AbrnState&, std::mt19937_64&)>& choose) {
  if (episodes < 1) throw ValidationError("episodes must be >= 1");
  std::mt19937_64 rng(mix_seed(seed));
  double total = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    auto env = make_env(derive_seed(seed, 51, static_cast<std::uint64_t>(ep)));
    AbrnState s = env->reset();
    while (true) {
      const Transition tr = env->step(choose(s, rng));
      total += tr.reward;
      if (tr.done) break;
      s = tr.state;
    }
  }
  return total / static_cast<double>(episodes);
}

}  // namespace anableps::abrn

// SPDX-License-Identifier: Apache-2.0
//
// Bitrate controller trained with advantage actor-critic: state assembly,
// relative actions, actor/critic networks and the asynchronous trainer.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "anableps/cbpn.hpp"
#include "anableps/netsim.hpp"
#include "anableps/neural.hpp"
#include "anableps/reward.hpp"

namespace anableps::abrn {

inline constexpr int kHistory = 6;
inline constexpr int kActionCount = 6;
inline constexpr double kKbpsScale = 6100.0;
inline constexpr double kDelayClampSec = 2.0;
inline constexpr double kNackScale = 50.0;

// Index 0 is the loss-proportional back-off X; the rest add a fixed delta.
inline constexpr std::array<double, kActionCount> kActionDeltas = {0.0, -400.0, 0.0,
                                                                   200.0, 400.0, 600.0};
const char* action_name(int index);

// b_next = clamp(prev * (1 - p_latest)) for X, clamp(prev + delta) otherwise.
double apply_action(double prev_kbps, int action, double p_latest,
                    double min_kbps = kMinBitrateKbps, double max_kbps = kMaxBitrateKbps);

enum class Ablation { kFull, kS, kC };
Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);

// Normalised state; histories are oldest first.
struct AbrnState {
  double v = 0.0;
  double e = 0.0;
  double s = 0.0;
  double r = 0.0;
  std::array<double, kHistory> d{}, p{}, n{}, f{}, h{};
  bool warmup = false;  // fewer than kHistory observations were available
};

// `recent` holds the latest observations, oldest first; only the last
// kHistory are used and missing ones are zero. The ablation mask is applied
// last: s zeroes v and e, c zeroes e.
AbrnState assemble_state(const cbpn::BitrateRange& range,
                         std::span<const netsim::ReceiverObservation> recent,
                         Ablation ablation = Ablation::kFull);

struct NetConfig {
  int conv_filters = 128;
  int conv_kernel = 3;
  int gru_hidden = 128;
  int scalar_units = 128;
  int hidden = 128;
};

// Inputs in declaration order: ve {2x1}, sr {2x1}, d, p, n {1x6}, fh {2x6}.
nn::Network build_actor(const NetConfig& cfg, std::uint64_t seed);
nn::Network build_critic(const NetConfig& cfg, std::uint64_t seed);
std::vector<std::vector<double>> network_inputs(const AbrnState& s);

enum class SelectMode { kSample, kArgmax };
// Argmax ties go to the lowest index.
int select_action(std::span<const double> probs, SelectMode mode, std::mt19937_64& rng);

class Agent {
 public:
  Agent(NetConfig cfg = {}, std::uint64_t seed = 0);

  const NetConfig& config() const { return cfg_; }
  nn::Network& actor() { return actor_; }
  const nn::Network& actor() const { return actor_; }
  nn::Network& critic() { return critic_; }
  const nn::Network& critic() const { return critic_; }

  std::vector<double> policy(const AbrnState& s) const;
  double value(const AbrnState& s) const;

  void save(const std::filesystem::path& path, Ablation ablation) const;
  // Returns the agent and the ablation it was trained with.
  static std::pair<Agent, Ablation> load(const std::filesystem::path& path);

 private:
  NetConfig cfg_;
  nn::Network actor_;
  nn::Network critic_;
};

// ---------------------------------------------------------------------------
// Environments

struct Transition {
  AbrnState state;  // state after the action
  double reward = 0.0;
  bool done = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual AbrnState reset() = 0;
  virtual Transition step(int action) = 0;
};

using EnvFactory = std::function<std::unique_ptr<Env>(std::uint64_t seed)>;

// Constant state with every feature at 0.5; action `rewarded` pays 1,
// everything else 0.
class BanditEnv : public Env {
 public:
  explicit BanditEnv(int rewarded = 5, int episode_length = 10)
      : rewarded_(rewarded), length_(episode_length) {}
  AbrnState reset() override;
  Transition step(int action) override;
  static AbrnState state();

 private:
  int rewarded_;
  int length_;
  int t_ = 0;
};

// Decision-side logic shared by the trainer's environment and deployment:
// runs the range predictor on the local encoder history and assembles the
// controller state. The first `warmup_seconds` decisions hold the start
// bitrate.
class StateBuilder {
 public:
  StateBuilder(const cbpn::CbpnModel* predictor, Ablation ablation, int warmup_seconds);

  int warmup_seconds() const { return warmup_; }
  Ablation ablation() const { return ablation_; }
  bool in_warmup(const netsim::DecisionContext& ctx) const { return ctx.second < warmup_; }
  AbrnState build(const netsim::DecisionContext& ctx) const;
  // Loss rate of the most recent delivered observation.
  static double latest_loss(const netsim::DecisionContext& ctx);

 private:
  const cbpn::CbpnModel* predictor_;
  Ablation ablation_;
  int warmup_;
};

struct SessionEnvSpec {
  const trace::ComplexityTrace* video = nullptr;
  netsim::SessionConfig session;
};

// One episode = one simulated session. The chosen spec and link offset are
// drawn from the seed supplied by the factory.
class SessionEnv : public Env {
 public:
  SessionEnv(std::vector<SessionEnvSpec> specs, const StateBuilder& builder,
             std::uint64_t seed);
  AbrnState reset() override;
  Transition step(int action) override;
  const netsim::Session* session() const { return session_.get(); }

 private:
  std::vector<SessionEnvSpec> specs_;
  StateBuilder builder_;
  std::mt19937_64 rng_;
  std::unique_ptr<netsim::Session> session_;
};

// Deployable controller; argmax by default.
class AnablepsController : public netsim::BitrateController {
 public:
  AnablepsController(const Agent& agent, const StateBuilder& builder,
                     SelectMode mode = SelectMode::kArgmax, std::uint64_t seed = 0);
  double next_target(const netsim::DecisionContext& ctx) override;

 private:
  const Agent& agent_;
  StateBuilder builder_;
  SelectMode mode_;
  std::mt19937_64 rng_;
};

// Uniformly random actions through the same action semantics.
class RandomActionController : public netsim::BitrateController {
 public:
  RandomActionController(const StateBuilder& builder, std::uint64_t seed);
  double next_target(const netsim::DecisionContext& ctx) override;

 private:
  StateBuilder builder_;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Training

struct A3cConfig {
  int workers = 4;
  double discount = 0.9;
  double entropy_weight = 0.01;  // decays linearly to 0 over `updates`
  int n_step = 5;
  int updates = 20000;
  // Rewards are multiplied by this before computing returns; keeps critic
  // targets near unit scale. Curves report unscaled rewards.
  double reward_scale = 0.1;
  // Global L2 clip applied separately to actor and critic gradients; 0 disables.
  double max_grad_norm = 0.0;
  nn::AdamConfig actor_adam{1e-4};
  nn::AdamConfig critic_adam{1e-3};
  // Episodic reward smoothing window for the curve.
  int smoothing = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CurvePoint {
  int update = 0;
  double mean_reward = 0.0;  // smoothed mean episodic reward
  double entropy = 0.0;      // mean policy entropy over the batch
  double critic_loss = 0.0;
  int episodes = 0;          // episodes finished so far
};

struct TrainResult {
  std::vector<CurvePoint> curve;
};

// Trains `agent` in place. With workers == 1 everything runs on the calling
// thread and the result is a pure function of the inputs.
TrainResult train_a3c(Agent& agent, const EnvFactory& make_env, const A3cConfig& cfg);

std::string curve_to_csv(std::span<const CurvePoint> curve);

// Mean episodic reward of `choose` over `episodes` episodes.
double evaluate_policy(const EnvFactory& make_env, int episodes, std::uint64_t seed,
                       const std::function<int(const AbrnState&, std::mt19937_64&)>& choose);

}  // namespace anableps::abrn

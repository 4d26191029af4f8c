// SPDX-License-Identifier: Apache-2.0
#include "anableps/harness.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <variant>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "anableps/common.hpp"
#include "text_util.hpp"

namespace anableps::harness {

namespace fs = std::filesystem;

Mode parse_mode(const std::string& name) {
  if (name == "simulate") return Mode::kSimulate;
  if (name == "train-cbpn") return Mode::kTrainCbpn;
  if (name == "train-abrn") return Mode::kTrainAbrn;
  if (name == "evaluate") return Mode::kEvaluate;
  if (name == "compare") return Mode::kCompare;
  if (name == "gen-traces") return Mode::kGenTraces;
  throw ConfigError("unknown mode '" + name + "'");
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kSimulate: return "simulate";
    case Mode::kTrainCbpn: return "train-cbpn";
    case Mode::kTrainAbrn: return "train-abrn";
    case Mode::kEvaluate: return "evaluate";
    case Mode::kCompare: return "compare";
    case Mode::kGenTraces: return "gen-traces";
  }
  return "simulate";
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

using Field = std::variant<double*, int*, std::uint64_t*, std::string*, fs::path*, bool*>;

struct Binding {
  std::string section;
  std::string key;
  Field field;
};

// Mode and ablation are enums; they travel through these strings.
struct EnumProxies {
  std::string mode;
  std::string ablation;
};

std::vector<Binding> bindings(ExperimentConfig& c, EnumProxies& e) {
  auto& enc = c.encoder;
  auto& cb = c.cbpn;
  auto& ab = c.abrn;
  return {
      {"experiment", "mode", &e.mode},
      {"experiment", "seed", &c.seed},
      {"experiment", "out_dir", &c.out_dir},
      {"experiment", "policy", &c.policy},
      {"experiment", "ablation", &e.ablation},

      {"paths", "traces_dir", &c.paths.traces_dir},
      {"paths", "videos_dir", &c.paths.videos_dir},
      {"paths", "cbpn_checkpoint", &c.paths.cbpn_checkpoint},
      {"paths", "abrn_full", &c.paths.abrn_full},
      {"paths", "abrn_c", &c.paths.abrn_c},
      {"paths", "abrn_s", &c.paths.abrn_s},
      {"paths", "trace_file", &c.paths.trace_file},
      {"paths", "video_file", &c.paths.video_file},

      {"corpus", "trace_count", &c.corpus.trace_count},
      {"corpus", "trace_seconds", &c.corpus.trace_seconds},
      {"corpus", "trace_mean_kbps", &c.corpus.trace_mean_kbps},
      {"corpus", "trace_std_kbps", &c.corpus.trace_std_kbps},
      {"corpus", "trace_model", &c.corpus.trace_model},
      {"corpus", "train_trace_fraction", &c.corpus.train_trace_fraction},
      {"corpus", "video_count", &c.corpus.video_count},
      {"corpus", "train_videos", &c.corpus.train_videos},
      {"corpus", "video_seconds", &c.corpus.video_seconds},
      {"corpus", "video_mean_si", &c.corpus.video_mean_si},
      {"corpus", "video_mean_ti", &c.corpus.video_mean_ti},
      {"corpus", "video_mean_scene_s", &c.corpus.video_mean_scene_s},

      {"link", "base_owd", &c.link.base_owd},
      {"link", "queue_capacity", &c.link.queue_capacity},
      {"link", "tick", &c.link.tick},
      {"link", "random_loss", &c.link.random_loss},
      {"link", "retx_limit", &c.link.retx_limit},
      {"link", "frame_deadline", &c.link.frame_deadline},

      {"encoder", "fps", &enc.fps},
      {"encoder", "gop_frames", &enc.gop_frames},
      {"encoder", "vbv_multiplier", &enc.vbv_multiplier},
      {"encoder", "min_bitrate", &enc.min_bitrate},
      {"encoder", "max_bitrate", &enc.max_bitrate},
      {"encoder", "iframe_weight", &enc.iframe_weight},
      {"encoder", "phi", &enc.fluct.phi},
      {"encoder", "sigma", &enc.fluct.sigma},
      {"encoder", "beta_ti", &enc.fluct.beta_ti},
      {"encoder", "rate_lag", &enc.rate_lag},
      {"encoder", "ti_max", &enc.ti_max},

      {"quality", "theta0", &c.quality.theta0},
      {"quality", "si_max", &c.quality.si_max},
      {"quality", "ti_max", &c.quality.ti_max},

      {"reward", "alpha", &c.reward.alpha},
      {"reward", "lambda", &c.reward.lambda},
      {"reward", "gamma", &c.reward.gamma},
      {"reward", "delta", &c.reward.delta},

      {"gcc", "high_loss", &c.gcc.high_loss},
      {"gcc", "low_loss", &c.gcc.low_loss},
      {"gcc", "increase", &c.gcc.increase},
      {"gcc", "overuse_backoff", &c.gcc.overuse_backoff},
      {"gcc", "trend_window", &c.gcc.trend_window},
      {"gcc", "threshold_init", &c.gcc.threshold_init},
      {"gcc", "threshold_gain", &c.gcc.threshold_gain},
      {"gcc", "threshold_min", &c.gcc.threshold_min},
      {"gcc", "threshold_max", &c.gcc.threshold_max},
      {"gcc", "threshold_outlier", &c.gcc.threshold_outlier},

      {"cbpn", "window_length", &cb.model.layout.window_length},
      {"cbpn", "si_max", &cb.model.layout.si_max},
      {"cbpn", "ti_max", &cb.model.layout.ti_max},
      {"cbpn", "conv_filters", &cb.model.conv_filters},
      {"cbpn", "gru_hidden", &cb.model.gru_hidden},
      {"cbpn", "hidden", &cb.model.hidden},
      {"cbpn", "error_filters", &cb.model.error_filters},
      {"cbpn", "error_kernel", &cb.model.error_kernel},
      {"cbpn", "sessions_per_video", &cb.data.sessions_per_video},
      {"cbpn", "jump_prob", &cb.data.walk.jump_prob},
      {"cbpn", "max_step", &cb.data.walk.max_step},
      {"cbpn", "epochs", &cb.train.epochs},
      {"cbpn", "batch", &cb.train.batch},
      {"cbpn", "lr", &cb.train.adam.lr},
      {"cbpn", "final_lr_fraction", &cb.train.final_lr_fraction},
      {"cbpn", "coverage", &cb.train.coverage},

      {"abrn", "conv_filters", &ab.net.conv_filters},
      {"abrn", "conv_kernel", &ab.net.conv_kernel},
      {"abrn", "gru_hidden", &ab.net.gru_hidden},
      {"abrn", "scalar_units", &ab.net.scalar_units},
      {"abrn", "hidden", &ab.net.hidden},
      {"abrn", "workers", &ab.a3c.workers},
      {"abrn", "discount", &ab.a3c.discount},
      {"abrn", "entropy_weight", &ab.a3c.entropy_weight},
      {"abrn", "n_step", &ab.a3c.n_step},
      {"abrn", "updates", &ab.a3c.updates},
      {"abrn", "actor_lr", &ab.a3c.actor_adam.lr},
      {"abrn", "critic_lr", &ab.a3c.critic_adam.lr},
      {"abrn", "reward_scale", &ab.a3c.reward_scale},
      {"abrn", "max_grad_norm", &ab.a3c.max_grad_norm},
      {"abrn", "smoothing", &ab.a3c.smoothing},
      {"abrn", "warmup_seconds", &ab.warmup_seconds},
      {"abrn", "episode_seconds", &ab.episode_seconds},

      {"eval", "session_seconds", &c.eval.session_seconds},
      {"eval", "start_bitrate", &c.eval.start_bitrate},
      {"eval", "policies", &c.eval.policies},
      {"eval", "anchor", &c.eval.anchor},
      {"eval", "fixed_kbps", &c.eval.fixed_kbps},
      {"eval", "oracle_safety", &c.eval.oracle_safety},
      {"eval", "selection", &c.eval.selection},
  };
}

std::string format_field(const Field& f) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          return text::format_double(*p);
        } else if constexpr (std::is_same_v<T, bool>) {
          return *p ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return *p;
        } else if constexpr (std::is_same_v<T, fs::path>) {
          return p->generic_string();
        } else {
          return std::to_string(*p);
        }
      },
      f);
}

void parse_field(const Field& f, const std::string& raw, const std::string& where) {
  const std::string v(text::trim(raw));
  auto fail = [&](const char* kind) {
    throw ConfigError(where + ": expected " + kind + ", got '" + v + "'");
  };
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          try {
            std::size_t used = 0;
            *p = std::stod(v, &used);
            if (used != v.size() || !std::isfinite(*p)) fail("a number");
          } catch (const std::logic_error&) {
            fail("a number");
          }
        } else if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) {
          try {
            std::size_t used = 0;
            const long long x = std::stoll(v, &used);
            if (used != v.size()) fail("an integer");
            if constexpr (std::is_same_v<T, std::uint64_t>) {
              if (x < 0) fail("a non-negative integer");
              *p = static_cast<std::uint64_t>(std::stoull(v));
            } else {
              *p = static_cast<int>(x);
            }
          } catch (const std::logic_error&) {
            fail("an integer");
          }
        } else if constexpr (std::is_same_v<T, bool>) {
          if (v == "true" || v == "1") {
            *p = true;
          } else if (v == "false" || v == "0") {
            *p = false;
          } else {
            fail("true or false");
          }
        } else {
          *p = v;
        }
      },
      f);
}

}  // namespace

fs::path ExperimentConfig::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return base_dir / p;
}

void ExperimentConfig::validate() const {
  try {
    // The link's trace comes from the corpus; validate the rest against a stand-in.
    auto probe = link;
    probe.trace = trace::NetworkTrace({{0.0, 1000.0}, {0.5, 1000.0}});
    probe.validate();
    encoder.validate();
    reward.validate();
    gcc.validate();
    cbpn.model.layout.validate();
    abrn.a3c.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  trace::parse_trace_model(corpus.trace_model);
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(corpus.trace_count >= 2, "corpus.trace_count must be >= 2");
  need(corpus.train_trace_fraction > 0.0 && corpus.train_trace_fraction < 1.0,
       "corpus.train_trace_fraction must lie in (0, 1)");
  need(corpus.video_count >= 2 && corpus.train_videos >= 1 &&
           corpus.train_videos < corpus.video_count,
       "corpus: need 1 <= train_videos < video_count");
  need(corpus.trace_seconds >= 1.0 && corpus.video_seconds >= 1.0,
       "corpus durations must be >= 1 s");
  need(cbpn.data.sessions_per_video >= 1, "cbpn.sessions_per_video must be >= 1");
  need(cbpn.train.epochs >= 1 && cbpn.train.batch >= 1, "cbpn epochs and batch must be >= 1");
  need(cbpn.train.coverage > 0.0 && cbpn.train.coverage < 1.0, "cbpn.coverage must lie in (0, 1)");
  need(abrn.net.conv_filters >= 1 && abrn.net.gru_hidden >= 1 && abrn.net.hidden >= 1 &&
           abrn.net.scalar_units >= 1 && abrn.net.conv_kernel >= 1 &&
           abrn.net.conv_kernel <= abrn::kHistory,
       "abrn network sizes must be positive and conv_kernel <= 6");
  need(abrn.warmup_seconds >= cbpn.model.layout.window_length,
       "abrn.warmup_seconds must cover cbpn.window_length");
  need(abrn.episode_seconds > abrn.warmup_seconds, "abrn.episode_seconds must exceed the warm-up");
  need(eval.session_seconds >= 1.0, "eval.session_seconds must be >= 1");
  need(eval.start_bitrate >= kMinBitrateKbps && eval.start_bitrate <= kMaxBitrateKbps,
       "eval.start_bitrate must lie in [300, 6100]");
  need(eval.fixed_kbps >= kMinBitrateKbps && eval.fixed_kbps <= kMaxBitrateKbps,
       "eval.fixed_kbps must lie in [300, 6100]");
  need(eval.oracle_safety > 0.0 && eval.oracle_safety <= 1.0,
       "eval.oracle_safety must lie in (0, 1]");
  need(eval.selection == "argmax" || eval.selection == "sample",
       "eval.selection must be argmax or sample");
  need(!split_policies(eval.policies).empty(), "eval.policies is empty");
}

ExperimentConfig parse_config(const std::string& ini_text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(ini_text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  EnumProxies proxies{to_string(cfg.mode), abrn::to_string(cfg.ablation)};
  const auto table = bindings(cfg, proxies);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config: key '" + section + "' outside any section");
    }
    bool known_section = false;
    for (const auto& b : table) known_section = known_section || b.section == section;
    if (!known_section) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      auto it = std::find_if(table.begin(), table.end(), [&](const Binding& b) {
        return b.section == section && b.key == key;
      });
      if (it == table.end()) throw ConfigError("config: unknown key " + section + "." + key);
      parse_field(it->field, value.data(), section + "." + key);
    }
  }
  cfg.mode = parse_mode(proxies.mode);
  cfg.ablation = abrn::parse_ablation(proxies.ablation);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = text::read_file(path);
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  auto cfg = parse_config(text);
  cfg.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  return cfg;
}

std::string format_config(const ExperimentConfig& original) {
  ExperimentConfig cfg = original;
  EnumProxies proxies{to_string(cfg.mode), abrn::to_string(cfg.ablation)};
  std::string out;
  std::string current;
  for (const auto& b : bindings(cfg, proxies)) {
    if (b.section != current) {
      if (!current.empty()) out += '\n';
      out += "[" + b.section + "]\n";
      current = b.section;
    }
    out += b.key + " = " + format_field(b.field) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

namespace {

std::string indexed(const char* stem, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", stem, i);
  return buf;
}

std::vector<fs::path> csv_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("missing directory " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && e.path().extension() == ".csv" &&
        name.find(".iframes.") == std::string::npos) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

void generate_corpus(const ExperimentConfig& cfg) {
  const auto& c = cfg.corpus;
  const auto traces_dir = cfg.resolve(cfg.paths.traces_dir);
  const auto videos_dir = cfg.resolve(cfg.paths.videos_dir);
  const int train_traces = std::clamp(
      static_cast<int>(std::lround(c.train_trace_fraction * c.trace_count)), 1, c.trace_count - 1);
  for (int i = 0; i < c.trace_count; ++i) {
    trace::TraceGenSpec spec;
    spec.duration_s = c.trace_seconds;
    spec.mean_kbps = c.trace_mean_kbps;
    spec.std_kbps = c.trace_std_kbps;
    spec.model = trace::parse_trace_model(c.trace_model);
    spec.seed = derive_seed(cfg.seed, 101, static_cast<std::uint64_t>(i));
    const auto split = i < train_traces ? "train" : "test";
    trace::save_network_trace(trace::generate_synthetic_network_trace(spec),
                              traces_dir / split / (indexed("trace", i) + ".csv"));
  }
  // Per-clip content level varies so the corpus spans easy and hard content.
  std::mt19937_64 rng(derive_seed(cfg.seed, 102));
  std::uniform_real_distribution<double> level(0.5, 1.5);
  for (int i = 0; i < c.video_count; ++i) {
    trace::VideoGenSpec spec;
    spec.duration_s = c.video_seconds;
    spec.mean_si = c.video_mean_si * level(rng);
    spec.mean_ti = c.video_mean_ti * level(rng);
    spec.mean_scene_s = c.video_mean_scene_s;
    spec.fps = cfg.encoder.fps;
    spec.gop_frames = cfg.encoder.gop_frames;
    spec.seed = derive_seed(cfg.seed, 103, static_cast<std::uint64_t>(i));
    const auto split = i < c.train_videos ? "train" : "test";
    trace::save_complexity_trace(trace::generate_synthetic_complexity_trace(spec),
                                 videos_dir / split / (indexed("video", i) + ".csv"));
  }
}

Corpus load_corpus(const ExperimentConfig& cfg, const std::string& split) {
  if (split != "train" && split != "test") throw ValidationError("split must be train or test");
  Corpus corpus;
  for (const auto& p : csv_files(cfg.resolve(cfg.paths.traces_dir) / split)) {
    corpus.traces.emplace_back(p.stem().string(), trace::load_network_trace(p));
  }
  for (const auto& p : csv_files(cfg.resolve(cfg.paths.videos_dir) / split)) {
    corpus.videos.emplace_back(p.stem().string(), trace::load_complexity_trace(p));
  }
  if (corpus.traces.empty() || corpus.videos.empty()) {
    throw ConfigError("no " + split + " traces or videos found; run gen-traces first");
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Policies

netsim::SessionConfig session_config(const ExperimentConfig& cfg, const trace::NetworkTrace& link,
                                     double duration, std::uint64_t seed) {
  netsim::SessionConfig s;
  s.link = cfg.link;
  s.link.trace = link;
  s.encoder = cfg.encoder;
  s.quality = cfg.quality;
  s.reward = cfg.reward;
  s.duration = duration;
  s.start_bitrate = cfg.eval.start_bitrate;
  s.seed = seed;
  return s;
}

std::vector<std::string> split_policies(const std::string& list) {
  std::vector<std::string> out;
  for (auto part : text::split(list, ',')) {
    const auto name = std::string(text::trim(part));
    if (!name.empty()) out.push_back(name);
  }
  return out;
}

struct PolicyFactory::Impl {
  ExperimentConfig cfg;
  std::optional<cbpn::CbpnModel> predictor;
  std::map<abrn::Ablation, abrn::Agent> agents;

  std::optional<abrn::Ablation> anableps_ablation(const std::string& name) const {
    if (name == "anableps") return cfg.ablation;
    if (name == "anableps-full") return abrn::Ablation::kFull;
    if (name == "anableps-c") return abrn::Ablation::kC;
    if (name == "anableps-s") return abrn::Ablation::kS;
    return std::nullopt;
  }

  fs::path checkpoint_for(abrn::Ablation a) const {
    switch (a) {
      case abrn::Ablation::kFull: return cfg.resolve(cfg.paths.abrn_full);
      case abrn::Ablation::kC: return cfg.resolve(cfg.paths.abrn_c);
      case abrn::Ablation::kS: return cfg.resolve(cfg.paths.abrn_s);
    }
    return {};
  }

  const cbpn::CbpnModel* load_predictor() {
    if (!predictor) {
      const auto path = cfg.resolve(cfg.paths.cbpn_checkpoint);
      if (path.empty() || !fs::exists(path)) {
        throw ConfigError("missing CBPN checkpoint " + path.string());
      }
      predictor = cbpn::CbpnModel::load(path);
    }
    return &*predictor;
  }

  abrn::StateBuilder builder(abrn::Ablation a) {
    const cbpn::CbpnModel* p = a == abrn::Ablation::kS ? nullptr : load_predictor();
    return abrn::StateBuilder(p, a, cfg.abrn.warmup_seconds);
  }

  const abrn::Agent& agent(abrn::Ablation a) {
    auto it = agents.find(a);
    if (it != agents.end()) return it->second;
    const auto path = checkpoint_for(a);
    if (path.empty() || !fs::exists(path)) {
      throw ConfigError("missing ABRN checkpoint for ablation " + abrn::to_string(a) + ": " +
                        path.string());
    }
    auto [loaded, trained_with] = abrn::Agent::load(path);
    if (trained_with != a) {
      throw ConfigError(path.string() + " was trained with ablation " +
                        abrn::to_string(trained_with) + ", expected " + abrn::to_string(a));
    }
    return agents.emplace(a, std::move(loaded)).first->second;
  }
};

PolicyFactory::PolicyFactory(const ExperimentConfig& cfg) : impl_(std::make_unique<Impl>()) {
  impl_->cfg = cfg;
}

PolicyFactory::~PolicyFactory() = default;

void PolicyFactory::require(const std::string& name) {
  if (name == "gcc" || name == "fixed" || name == "oracle") return;
  if (name == "random") {
    impl_->builder(abrn::Ablation::kS);
    return;
  }
  const auto a = impl_->anableps_ablation(name);
  if (!a) throw ConfigError("unknown policy '" + name + "'");
  impl_->agent(*a);
  impl_->builder(*a);
}

std::unique_ptr<netsim::BitrateController> PolicyFactory::make(const std::string& name,
                                                                const trace::NetworkTrace& link,
                                                                std::uint64_t seed) {
  const auto& cfg = impl_->cfg;
  if (name == "gcc") return std::make_unique<baselines::GccController>(cfg.gcc);
  if (name == "fixed") return std::make_unique<baselines::FixedController>(cfg.eval.fixed_kbps);
  if (name == "oracle") {
    return std::make_unique<baselines::OracleController>(link, cfg.eval.oracle_safety);
  }
  if (name == "random") {
    return std::make_unique<abrn::RandomActionController>(impl_->builder(abrn::Ablation::kS),
                                                          seed);
  }
  const auto a = impl_->anableps_ablation(name);
  if (!a) throw ConfigError("unknown policy '" + name + "'");
  const auto mode =
      cfg.eval.selection == "sample" ? abrn::SelectMode::kSample : abrn::SelectMode::kArgmax;
  return std::make_unique<abrn::AnablepsController>(impl_->agent(*a), impl_->builder(*a), mode,
                                                    seed);
}

// ---------------------------------------------------------------------------
// Reports

SessionMetrics session_metrics(const netsim::SessionLog& log) {
  SessionMetrics m;
  const auto n = static_cast<double>(log.seconds.size());
  if (log.seconds.empty()) return m;
  for (const auto& s : log.seconds) {
    m.quality += s.quality;
    m.sending_kbps += s.obs.s;
    m.frame_delay_s += s.obs.f;
    m.reward += s.reward;
  }
  m.quality /= n;
  m.sending_kbps /= n;
  m.frame_delay_s /= n;
  m.reward /= n;
  m.stalling_ratio = netsim::stalling_ratio(log.played_fps());
  return m;
}

nlohmann::json to_json(const SessionMetrics& m) {
  return {{"quality", m.quality},
          {"sending_kbps", m.sending_kbps},
          {"stalling_ratio", m.stalling_ratio},
          {"frame_delay_s", m.frame_delay_s},
          {"reward", m.reward}};
}

namespace {

template <typename F>
void for_each_metric(SessionMetrics& out, const SessionMetrics& a, const SessionMetrics& b, F f) {
  out.quality = f(a.quality, b.quality);
  out.sending_kbps = f(a.sending_kbps, b.sending_kbps);
  out.stalling_ratio = f(a.stalling_ratio, b.stalling_ratio);
  out.frame_delay_s = f(a.frame_delay_s, b.frame_delay_s);
  out.reward = f(a.reward, b.reward);
}

}  // namespace

std::vector<PolicyAggregate> aggregate(const std::vector<Cell>& cells,
                                       const std::vector<std::string>& policy_order) {
  std::vector<PolicyAggregate> out;
  for (const auto& name : policy_order) {
    PolicyAggregate agg;
    agg.policy = name;
    SessionMetrics sum;
    SessionMetrics sq;
    for (const auto& c : cells) {
      if (c.policy != name) continue;
      ++agg.cells;
      for_each_metric(sum, sum, c.metrics, [](double s, double x) { return s + x; });
      for_each_metric(sq, sq, c.metrics, [](double s, double x) { return s + x * x; });
    }
    if (agg.cells > 0) {
      const double n = static_cast<double>(agg.cells);
      for_each_metric(agg.mean, sum, sum, [n](double s, double) { return s / n; });
      for_each_metric(agg.stddev, sq, agg.mean,
                      [n](double q, double m) { return std::sqrt(std::max(0.0, q / n - m * m)); });
    }
    out.push_back(agg);
  }
  return out;
}

SessionMetrics relative_delta(const SessionMetrics& value, const SessionMetrics& anchor) {
  SessionMetrics d;
  for_each_metric(d, value, anchor, [](double v, double a) {
    if (a == 0.0) return v == 0.0 ? 0.0 : (v > 0.0 ? HUGE_VAL : -HUGE_VAL);
    return 100.0 * (v - a) / std::abs(a);
  });
  return d;
}

std::string report_csv(const ComparisonReport& r) {
  std::string out = std::string(kReportCsvHeader) + '\n';
  for (const auto& c : r.cells) {
    const auto& m = c.metrics;
    out += c.policy + ',' + c.trace + ',' + c.video + ',' + std::to_string(c.seed) + ',' +
           text::format_double(m.quality) + ',' + text::format_double(m.sending_kbps) + ',' +
           text::format_double(m.stalling_ratio) + ',' + text::format_double(m.frame_delay_s) +
           ',' + text::format_double(m.reward) + ',' + c.session_id + '\n';
  }
  return out;
}

namespace {

nlohmann::json finite_or_null(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json report_json(const ComparisonReport& r) {
  nlohmann::json policies = nlohmann::json::array();
  const PolicyAggregate* anchor = nullptr;
  for (const auto& a : r.aggregates) {
    if (a.policy == r.anchor) anchor = &a;
  }
  for (const auto& a : r.aggregates) {
    nlohmann::json p = {{"policy", a.policy},
                        {"cells", a.cells},
                        {"mean", to_json(a.mean)},
                        {"std", to_json(a.stddev)}};
    if (anchor) {
      const auto d = relative_delta(a.mean, anchor->mean);
      // Signed so that positive is better: quality and reward up, the rest down.
      p["improvement_vs_anchor_percent"] = {
          {"quality", finite_or_null(d.quality)},
          {"sending_kbps", finite_or_null(0.0 - d.sending_kbps)},
          {"stalling_ratio", finite_or_null(0.0 - d.stalling_ratio)},
          {"frame_delay_s", finite_or_null(0.0 - d.frame_delay_s)},
          {"reward", finite_or_null(d.reward)}};
    }
    policies.push_back(p);
  }
  nlohmann::json j = {{"policies", policies}, {"cells", r.cells.size()}};
  if (!r.anchor.empty()) j["anchor"] = r.anchor;
  return j;
}

ComparisonReport compare_policies(const ExperimentConfig& cfg,
                                  const std::vector<std::string>& policies, const Corpus& corpus,
                                  PolicyFactory& factory, const std::optional<fs::path>& out_dir) {
  if (policies.empty()) throw ConfigError("no policies to compare");
  for (const auto& p : policies) factory.require(p);
  ComparisonReport report;
  for (const auto& policy : policies) {
    for (std::size_t ti = 0; ti < corpus.traces.size(); ++ti) {
      for (std::size_t vi = 0; vi < corpus.videos.size(); ++vi) {
        const auto& [tname, link] = corpus.traces[ti];
        const auto& [vname, video] = corpus.videos[vi];
        const double duration =
            std::floor(std::min({cfg.eval.session_seconds, link.duration(), video.duration()}));
        Cell cell;
        cell.policy = policy;
        cell.trace = tname;
        cell.video = vname;
        cell.seed = derive_seed(cfg.seed, 201 + ti, vi);
        cell.session_id = policy + "__" + tname + "__" + vname;
        auto controller = factory.make(policy, link, cell.seed);
        auto log = netsim::run_session(*controller, video, session_config(cfg, link, duration, cell.seed));
        cell.metrics = session_metrics(log);
        if (out_dir) {
          text::write_file(*out_dir / "sessions" / (cell.session_id + ".csv"), log.to_csv());
        }
        report.cells.push_back(std::move(cell));
      }
    }
  }
  report.aggregates = aggregate(report.cells, policies);
  return report;
}

std::string timeseries_csv(const netsim::SessionLog& log, const trace::NetworkTrace& link) {
  std::string out = std::string(kTimeseriesCsvHeader) + '\n';
  for (const auto& s : log.seconds) {
    out += std::to_string(s.second) + ',' + text::format_double(link.kbps_at(s.second)) + ',' +
           text::format_double(s.slot.target) + ',' + text::format_double(s.slot.actual) + ',' +
           text::format_double(s.obs.s) + ',' + text::format_double(s.obs.f) + ',' +
           text::format_double(s.quality) + '\n';
  }
  return out;
}

std::string scatter_csv(const ComparisonReport& r) {
  std::string out = std::string(kScatterCsvHeader) + '\n';
  // One point per (policy, video): mean over traces.
  std::map<std::pair<std::string, std::string>, std::pair<SessionMetrics, int>> acc;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& c : r.cells) {
    const auto key = std::make_pair(c.policy, c.video);
    auto [it, fresh] = acc.try_emplace(key);
    if (fresh) order.push_back(key);
    for_each_metric(it->second.first, it->second.first, c.metrics,
                    [](double s, double x) { return s + x; });
    ++it->second.second;
  }
  for (const auto& key : order) {
    const auto& [m, n] = acc[key];
    const double k = n;
    out += key.first + ',' + key.second + ',' + text::format_double(m.sending_kbps / k) + ',' +
           text::format_double(m.quality / k) + ',' + text::format_double(m.stalling_ratio / k) +
           ',' + text::format_double(m.frame_delay_s / k) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Modes

CbpnTraining train_cbpn(const ExperimentConfig& cfg) {
  const auto corpus = load_corpus(cfg, "train");
  std::vector<trace::ComplexityTrace> videos;
  for (const auto& v : corpus.videos) videos.push_back(v.second);
  auto data_cfg = cfg.cbpn.data;
  data_cfg.encoder = cfg.encoder;
  data_cfg.layout = cfg.cbpn.model.layout;
  data_cfg.seed = derive_seed(cfg.seed, 401);
  auto [train, held] = cbpn::build_dataset(videos, data_cfg).split_by_session();
  if (train.size() == 0) throw ConfigError("cbpn: no training samples");
  CbpnTraining run{cbpn::CbpnModel(cfg.cbpn.model, derive_seed(cfg.seed, 402)), std::move(train),
                   std::move(held), {}, {}, {}};
  auto tcfg = cfg.cbpn.train;
  tcfg.seed = derive_seed(cfg.seed, 403);
  run.baseline_curve = cbpn::train_baseline(run.model, run.train, tcfg);
  run.baseline_params = run.model.baseline().params();
  run.error_curve = cbpn::train_error(run.model, run.train, tcfg);
  return run;
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  text::write_file(path, j.dump(2) + '\n');
}

std::pair<std::string, trace::NetworkTrace> pick_trace(const ExperimentConfig& cfg) {
  if (!cfg.paths.trace_file.empty()) {
    const auto p = cfg.resolve(cfg.paths.trace_file);
    return {p.stem().string(), trace::load_network_trace(p)};
  }
  auto c = load_corpus(cfg, "test");
  return std::move(c.traces.front());
}

std::pair<std::string, trace::ComplexityTrace> pick_video(const ExperimentConfig& cfg) {
  if (!cfg.paths.video_file.empty()) {
    const auto p = cfg.resolve(cfg.paths.video_file);
    return {p.stem().string(), trace::load_complexity_trace(p)};
  }
  auto c = load_corpus(cfg, "test");
  return std::move(c.videos.front());
}

nlohmann::json metrics_json(const cbpn::Metrics& m) {
  return {{"mad", m.mad},
          {"pcc", m.pcc ? nlohmann::json(*m.pcc) : nlohmann::json(nullptr)},
          {"cr", m.cr},
          {"count", m.count}};
}

nlohmann::json run_simulate(const ExperimentConfig& cfg, const fs::path& out) {
  PolicyFactory factory(cfg);
  factory.require(cfg.policy);
  auto [tname, link] = pick_trace(cfg);
  auto [vname, video] = pick_video(cfg);
  const double duration =
      std::floor(std::min({cfg.eval.session_seconds, link.duration(), video.duration()}));
  const auto seed = derive_seed(cfg.seed, 301);
  auto controller = factory.make(cfg.policy, link, seed);
  const auto log =
      netsim::run_session(*controller, video, session_config(cfg, link, duration, seed));
  const std::string id = cfg.policy + "__" + tname + "__" + vname;
  text::write_file(out / "sessions" / (id + ".csv"), log.to_csv());
  text::write_file(out / "plots" / "timeseries.csv", timeseries_csv(log, link));
  ComparisonReport report;
  report.cells.push_back({cfg.policy, tname, vname, seed, session_metrics(log), id});
  report.aggregates = aggregate(report.cells, {cfg.policy});
  text::write_file(out / "report.csv", report_csv(report));
  return {{"policy", cfg.policy},
          {"trace", tname},
          {"video", vname},
          {"seconds", log.seconds.size()},
          {"metrics", to_json(report.cells.front().metrics)}};
}

nlohmann::json run_compare(const ExperimentConfig& cfg, const fs::path& out,
                           const std::vector<std::string>& policies, const std::string& anchor) {
  PolicyFactory factory(cfg);
  for (const auto& p : policies) factory.require(p);
  const auto corpus = load_corpus(cfg, "test");
  auto report = compare_policies(cfg, policies, corpus, factory, out);
  report.anchor = anchor;
  text::write_file(out / "report.csv", report_csv(report));
  text::write_file(out / "plots" / "scatter.csv", scatter_csv(report));
  // Time series for the first cell of each policy.
  const auto& [tname, link] = corpus.traces.front();
  for (const auto& policy : policies) {
    const auto& cell = *std::find_if(report.cells.begin(), report.cells.end(),
                                     [&](const Cell& c) { return c.policy == policy; });
    const auto& video = corpus.videos.front().second;
    const double duration =
        std::floor(std::min({cfg.eval.session_seconds, link.duration(), video.duration()}));
    auto controller = factory.make(policy, link, cell.seed);
    const auto log =
        netsim::run_session(*controller, video, session_config(cfg, link, duration, cell.seed));
    text::write_file(out / "plots" / ("timeseries_" + policy + ".csv"),
                     timeseries_csv(log, link));
  }
  auto j = report_json(report);
  j["traces"] = corpus.traces.size();
  j["videos"] = corpus.videos.size();
  return j;
}

nlohmann::json run_train_cbpn(const ExperimentConfig& cfg, const fs::path& out) {
  const auto run = train_cbpn(cfg);
  const auto ckpt = cfg.resolve(cfg.paths.cbpn_checkpoint);
  run.model.save(ckpt);
  std::string curve = "epoch,baseline_loss,error_loss\n";
  for (std::size_t i = 0; i < run.baseline_curve.size(); ++i) {
    curve += std::to_string(i) + ',' + text::format_double(run.baseline_curve[i]) + ',' +
             text::format_double(i < run.error_curve.size() ? run.error_curve[i] : 0.0) + '\n';
  }
  text::write_file(out / "plots" / "cbpn_curve.csv", curve);
  const auto& held = run.heldout;
  return {{"checkpoint", ckpt.generic_string()},
          {"train_samples", run.train.size()},
          {"heldout_samples", held.size()},
          // Every tenth session is held out; small corpora may have none.
          {"heldout", held.size() ? metrics_json(cbpn::eval_metrics(run.model, held)) : nullptr},
          {"heldout_last_target",
           held.size() ? metrics_json(cbpn::eval_last_target(held)) : nullptr}};
}

nlohmann::json run_train_abrn(const ExperimentConfig& cfg, const fs::path& out) {
  const auto corpus = load_corpus(cfg, "train");
  std::optional<cbpn::CbpnModel> predictor;
  if (cfg.ablation != abrn::Ablation::kS) {
    const auto p = cfg.resolve(cfg.paths.cbpn_checkpoint);
    if (!fs::exists(p)) throw ConfigError("missing CBPN checkpoint " + p.string());
    predictor = cbpn::CbpnModel::load(p);
  }
  const abrn::StateBuilder builder(predictor ? &*predictor : nullptr, cfg.ablation,
                                   cfg.abrn.warmup_seconds);
  std::vector<abrn::SessionEnvSpec> specs;
  for (const auto& [tn, t] : corpus.traces) {
    for (const auto& [vn, v] : corpus.videos) {
      const double duration = std::floor(std::min({cfg.abrn.episode_seconds, t.duration(),
                                                   v.duration()}));
      specs.push_back({&v, session_config(cfg, t, duration, 0)});
    }
  }
  const abrn::EnvFactory make_env = [&](std::uint64_t seed) {
    return std::make_unique<abrn::SessionEnv>(specs, builder, seed);
  };
  abrn::Agent agent(cfg.abrn.net, derive_seed(cfg.seed, 501));
  auto a3c = cfg.abrn.a3c;
  a3c.seed = derive_seed(cfg.seed, 502);
  const auto result = abrn::train_a3c(agent, make_env, a3c);
  fs::path ckpt;
  switch (cfg.ablation) {
    case abrn::Ablation::kFull: ckpt = cfg.resolve(cfg.paths.abrn_full); break;
    case abrn::Ablation::kC: ckpt = cfg.resolve(cfg.paths.abrn_c); break;
    case abrn::Ablation::kS: ckpt = cfg.resolve(cfg.paths.abrn_s); break;
  }
  agent.save(ckpt, cfg.ablation);
  text::write_file(out / "plots" / "abrn_curve.csv", abrn::curve_to_csv(result.curve));
  const auto& last = result.curve.back();
  return {{"checkpoint", ckpt.generic_string()},
          {"ablation", abrn::to_string(cfg.ablation)},
          {"updates", result.curve.size()},
          {"episodes", last.episodes},
          {"final_mean_reward", last.mean_reward},
          {"final_entropy", last.entropy}};
}

nlohmann::json run_gen_traces(const ExperimentConfig& cfg) {
  generate_corpus(cfg);
  const auto train = load_corpus(cfg, "train");
  const auto test = load_corpus(cfg, "test");
  return {{"train_traces", train.traces.size()},
          {"test_traces", test.traces.size()},
          {"train_videos", train.videos.size()},
          {"test_videos", test.videos.size()},
          {"traces_dir", cfg.resolve(cfg.paths.traces_dir).generic_string()},
          {"videos_dir", cfg.resolve(cfg.paths.videos_dir).generic_string()}};
}

}  // namespace

namespace {

// Evaluate mode scores a trained agent; non-agent policy names fall back to
// the configured ablation.
std::string evaluated_policy(const ExperimentConfig& cfg) {
  return cfg.policy.rfind("anableps", 0) == 0 ? cfg.policy : "anableps";
}

}  // namespace

nlohmann::json run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path out = cfg.resolve(cfg.out_dir);
  // Check every input a mode needs before the output directory appears.
  if (cfg.mode == Mode::kSimulate || cfg.mode == Mode::kEvaluate) {
    PolicyFactory probe(cfg);
    probe.require(cfg.mode == Mode::kEvaluate ? evaluated_policy(cfg) : cfg.policy);
  } else if (cfg.mode == Mode::kCompare) {
    PolicyFactory probe(cfg);
    for (const auto& p : split_policies(cfg.eval.policies)) probe.require(p);
  }

  nlohmann::json result;
  switch (cfg.mode) {
    case Mode::kSimulate: result = run_simulate(cfg, out); break;
    case Mode::kEvaluate: {
      const std::string policy = evaluated_policy(cfg);
      result = run_compare(cfg, out, {policy}, policy);
      break;
    }
    case Mode::kCompare: {
      const auto policies = split_policies(cfg.eval.policies);
      if (std::find(policies.begin(), policies.end(), cfg.eval.anchor) == policies.end()) {
        throw ConfigError("eval.anchor '" + cfg.eval.anchor + "' is not among eval.policies");
      }
      result = run_compare(cfg, out, policies, cfg.eval.anchor);
      break;
    }
    case Mode::kTrainCbpn: result = run_train_cbpn(cfg, out); break;
    case Mode::kTrainAbrn: result = run_train_abrn(cfg, out); break;
    case Mode::kGenTraces: result = run_gen_traces(cfg); break;
  }
  nlohmann::json summary = {{"mode", to_string(cfg.mode)}, {"seed", cfg.seed}};
  summary["result"] = result;
  write_json(out / "summary.json", summary);
  return summary;
}

}  // namespace anableps::harness

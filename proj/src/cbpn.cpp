// SPDX-License-Identifier: Apache-2.0
#include "anableps/cbpn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "anableps/common.hpp"
#include "text_util.hpp"

namespace anableps::cbpn {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

std::vector<double> dif_row(const CbpnState& s) {
  auto r = s.row(4);
  return {r.begin(), r.end()};
}

nn::AdamConfig epoch_adam(const TrainConfig& cfg, int epoch) {
  nn::AdamConfig a = cfg.adam;
  const double progress = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 1.0;
  a.lr *= 1.0 - (1.0 - cfg.final_lr_fraction) * progress;
  return a;
}

void shuffled(std::vector<std::size_t>& idx, std::uint64_t seed) {
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed));
  std::shuffle(idx.begin(), idx.end(), rng);
}

}  // namespace

void StateLayout::validate() const {
  if (window_length < 2 || window_length % 2 != 0) {
    throw ValidationError("window_length must be an even number >= 2");
  }
  if (!(si_max > 0.0) || !(ti_max > 0.0)) throw ValidationError("si_max and ti_max must be > 0");
}

std::span<const double> CbpnState::row(int r) const {
  if (r < 0 || r >= kStateRows) throw ValidationError("state row out of range");
  return std::span<const double>(values).subspan(sz(r) * sz(length), sz(length));
}

CbpnState assemble_state(std::span<const double> targets, std::span<const double> actuals,
                         double next_target, int slot, const trace::ComplexityTrace& video,
                         const StateLayout& layout) {
  layout.validate();
  const int L = layout.window_length;
  if (slot < L) {
    throw ValidationError("CBPN needs " + std::to_string(L) + " seconds of history");
  }
  if (targets.size() < sz(slot) || actuals.size() < sz(slot)) {
    throw ValidationError("history shorter than the requested slot");
  }
  CbpnState s;
  s.length = L;
  s.values.assign(sz(kStateRows * L), 0.0);
  auto at = [&](int row, int col) -> double& { return s.values[sz(row * L + col)]; };

  for (int c = 0; c < L; ++c) {
    // Targets of slots slot-L+1 .. slot; the last one is the predicted slot.
    const int b_slot = slot - L + 1 + c;
    const double b = b_slot == slot ? next_target : targets[sz(b_slot)];
    at(0, c) = b / kKbpsScale;
    at(1, c) = video.has_iframe_in(b_slot, b_slot + 1.0) ? 1.0 : 0.0;
    // Encoder error of the L completed slots before the predicted one.
    const int d_slot = slot - L + c;
    at(4, c) = (targets[sz(d_slot)] - actuals[sz(d_slot)]) / kKbpsScale;
  }

  // Every other 4 Hz sample over the last L/2 seconds, latest sample kept.
  const double t0 = slot - L / 2.0;
  const auto window = video.window(t0, slot);
  const auto n = static_cast<int>(window.size());
  for (int c = 0; c < L; ++c) {
    const int idx = n - 1 - 2 * (L - 1 - c);
    if (idx < 0) continue;  // content shorter than the window: leave zero
    at(2, c) = window[sz(idx)].si / layout.si_max;
    at(3, c) = window[sz(idx)].ti / layout.ti_max;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Model

CbpnModel::CbpnModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.layout.validate();
  const int L = cfg_.layout.window_length;
  {
    auto& n = baseline_;
    const int x = n.input("state", {kStateRows, L});
    const int conv = n.relu("conv_relu", n.conv1d("conv", x, cfg_.conv_filters, 1));
    const int gru = n.gru("gru", x, cfg_.gru_hidden);
    const int merged = n.concat("merge", {conv, gru});
    const int feat = n.relu("feat", n.dense("fc", merged, cfg_.hidden));
    n.mark_output(n.dense("v", feat, 1));
    n.mark_output(feat);
    n.init(derive_seed(seed, 11));
  }
  {
    auto& n = error_;
    const int dif = n.input("dif", {1, L});
    const int feat = n.input("features", {cfg_.hidden, 1});
    const int conv = n.relu("econv_relu",
                            n.conv1d("econv", dif, cfg_.error_filters,
                                     std::min(cfg_.error_kernel, L)));
    const int merged = n.concat("emerge", {conv, feat});
    const int h = n.relu("efc_relu", n.dense("efc", merged, cfg_.hidden));
    n.mark_output(n.dense("e", h, 1));
    n.init(derive_seed(seed, 12));
  }
}

CbpnModel::BaselineOut CbpnModel::baseline_forward(const CbpnState& s) const {
  const std::vector<double> in[] = {s.values};
  const auto cache = baseline_.forward(in);
  return {baseline_.output(cache, 0)[0], baseline_.output(cache, 1)};
}

double CbpnModel::error_logit(const CbpnState& s, std::span<const double> features) const {
  const std::vector<double> in[] = {dif_row(s), {features.begin(), features.end()}};
  const auto cache = error_.forward(in);
  return error_.output(cache, 0)[0];
}

BitrateRange CbpnModel::predict(const CbpnState& s) const {
  if (s.length != cfg_.layout.window_length) throw ValidationError("state window mismatch");
  const auto b = baseline_forward(s);
  return {b.v * kKbpsScale, nn::softplus(error_logit(s, b.features)) * kKbpsScale};
}

void CbpnModel::save(const std::filesystem::path& path) const {
  const nn::NetworkRef nets[] = {{"baseline", &baseline_}, {"error", &error_}};
  nlohmann::json meta = {{"model", "cbpn"},
                         {"window_length", cfg_.layout.window_length},
                         {"si_max", cfg_.layout.si_max},
                         {"ti_max", cfg_.layout.ti_max},
                         {"conv_filters", cfg_.conv_filters},
                         {"gru_hidden", cfg_.gru_hidden},
                         {"hidden", cfg_.hidden},
                         {"error_filters", cfg_.error_filters},
                         {"error_kernel", cfg_.error_kernel}};
  nn::save_checkpoint(path, nets, meta);
}

CbpnModel CbpnModel::load(const std::filesystem::path& path) {
  // Read the meta first to rebuild the architecture, then the weights.
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  const auto meta = j.value("meta", nlohmann::json::object());
  if (meta.value("model", "") != "cbpn") throw ParseError(path.string() + " is not a CBPN checkpoint");
  ModelConfig cfg;
  cfg.layout.window_length = meta.at("window_length").get<int>();
  cfg.layout.si_max = meta.at("si_max").get<double>();
  cfg.layout.ti_max = meta.at("ti_max").get<double>();
  cfg.conv_filters = meta.at("conv_filters").get<int>();
  cfg.gru_hidden = meta.at("gru_hidden").get<int>();
  cfg.hidden = meta.at("hidden").get<int>();
  cfg.error_filters = meta.at("error_filters").get<int>();
  cfg.error_kernel = meta.at("error_kernel").get<int>();
  CbpnModel m(cfg);
  const nn::NamedNetwork nets[] = {{"baseline", &m.baseline_}, {"error", &m.error_}};
  nn::load_checkpoint(path, nets);
  return m;
}

// ---------------------------------------------------------------------------
// Data

std::pair<Dataset, Dataset> Dataset::split_by_session() const {
  Dataset train;
  Dataset held_out;
  for (const auto& s : samples) (s.session % 10 == 9 ? held_out : train).samples.push_back(s);
  return {std::move(train), std::move(held_out)};
}

Dataset build_dataset(std::span<const trace::ComplexityTrace> videos, const DatasetConfig& cfg) {
  cfg.layout.validate();
  cfg.encoder.validate();
  if (cfg.sessions_per_video < 1) throw ValidationError("sessions_per_video must be >= 1");
  Dataset out;
  const double lo = cfg.encoder.min_bitrate;
  const double hi = cfg.encoder.max_bitrate;
  const auto n_frames = static_cast<std::size_t>(std::lround(cfg.encoder.fps));
  int session = 0;
  for (const auto& video : videos) {
    if (std::abs(video.fps() - cfg.encoder.fps) > 1e-9) {
      throw ValidationError("video fps does not match the encoder");
    }
    const int n_slots = static_cast<int>(std::floor(video.duration() + 1e-9));
    for (int rep = 0; rep < cfg.sessions_per_video; ++rep, ++session) {
      std::mt19937_64 walk_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(session), 1));
      std::mt19937_64 enc_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(session), 2));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::uniform_real_distribution<double> fresh(lo, hi);
      std::uniform_real_distribution<double> step(-cfg.walk.max_step, cfg.walk.max_step);
      std::vector<double> targets;
      std::vector<double> actuals;
      media::EncoderState state;
      auto flags = std::make_unique<bool[]>(n_frames);
      double b = fresh(walk_rng);
      for (int t = 0; t < n_slots; ++t) {
        if (t > 0) {
          b = unit(walk_rng) < cfg.walk.jump_prob ? fresh(walk_rng)
                                                  : std::clamp(b + step(walk_rng), lo, hi);
        }
        for (std::size_t k = 0; k < n_frames; ++k) {
          flags[k] = video.is_iframe(t + static_cast<double>(k) / cfg.encoder.fps);
        }
        auto res = media::encode_slot(b, video.window(t, t + 1.0),
                                      std::span<const bool>(flags.get(), n_frames), t, state,
                                      cfg.encoder, enc_rng);
        state = res.state;
        targets.push_back(b);
        actuals.push_back(res.slot.actual);
      }
      for (int t = cfg.layout.window_length; t < n_slots; ++t) {
        Sample s;
        s.state = assemble_state(targets, actuals, targets[sz(t)], t, video, cfg.layout);
        s.actual = actuals[sz(t)];
        s.next_target = targets[sz(t)];
        s.session = session;
        out.samples.push_back(std::move(s));
      }
    }
  }
  return out;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::string out = "session,next_target_kbps,actual_kbps,window_length";
  const int L = d.samples.empty() ? 4 : d.samples.front().state.length;
  for (int i = 0; i < kStateRows * L; ++i) out += ",s" + std::to_string(i);
  out += '\n';
  for (const auto& s : d.samples) {
    out += std::to_string(s.session) + ',' + text::format_double(s.next_target) + ',' +
           text::format_double(s.actual) + ',' + std::to_string(s.state.length);
    for (double v : s.state.values) out += ',' + text::format_double(v);
    out += '\n';
  }
  text::write_file(path, out);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Dataset d;
  const std::string content = text::read_file(path);
  const auto lines = text::lines(content);
  bool header = true;
  for (const auto& raw : lines) {
    const auto line = text::trim(raw);
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto f = text::split(line, ',');
    if (f.size() < 4) throw ParseError("dataset row too short");
    Sample s;
    s.session = static_cast<int>(text::parse_double(f[0], "session"));
    s.next_target = text::parse_double(f[1], "next_target_kbps");
    s.actual = text::parse_double(f[2], "actual_kbps");
    s.state.length = static_cast<int>(text::parse_double(f[3], "window_length"));
    if (f.size() != 4 + sz(kStateRows * s.state.length)) throw ParseError("dataset row width");
    for (std::size_t i = 4; i < f.size(); ++i) s.state.values.push_back(text::parse_double(f[i], "state"));
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training

namespace {

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1 || cfg.batch < 1) throw ValidationError("epochs and batch must be >= 1");
  if (!(cfg.coverage > 0.0 && cfg.coverage < 1.0)) throw ValidationError("coverage must lie in (0, 1)");
  if (!(cfg.final_lr_fraction > 0.0 && cfg.final_lr_fraction <= 1.0)) {
    throw ValidationError("final_lr_fraction must lie in (0, 1]");
  }
  cfg.adam.validate();
}

}  // namespace

Curve train_baseline(CbpnModel& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.samples.empty()) throw ValidationError("empty dataset");
  validate(cfg);
  auto& net = model.baseline();
  nn::AdamState adam;
  std::vector<double> grads(net.param_count());
  std::vector<std::size_t> order(data.size());
  Curve curve;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffled(order, derive_seed(cfg.seed, 21, static_cast<std::uint64_t>(epoch)));
    const auto adam_cfg = epoch_adam(cfg, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += sz(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + sz(cfg.batch));
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = data.samples[order[k]];
        const std::vector<double> in[] = {s.state.values};
        const auto cache = net.forward(in);
        const double diff = net.output(cache, 0)[0] - s.actual / kKbpsScale;
        total += diff * diff;
        const std::vector<double> dy[] = {{2.0 * diff * scale}, {}};
        net.backward(cache, dy, grads);
      }
      nn::adam_step(net.params(), grads, adam_cfg, adam);
    }
    curve.push_back(total / static_cast<double>(data.size()));
  }
  return curve;
}

Curve train_error(CbpnModel& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.samples.empty()) throw ValidationError("empty dataset");
  validate(cfg);
  const double c = cfg.coverage;
  // The baseline is frozen, so its outputs can be computed once.
  std::vector<CbpnModel::BaselineOut> base;
  base.reserve(data.size());
  for (const auto& s : data.samples) base.push_back(model.baseline_forward(s.state));

  auto& net = model.error();
  nn::AdamState adam;
  std::vector<double> grads(net.param_count());
  std::vector<std::size_t> order(data.size());
  Curve curve;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffled(order, derive_seed(cfg.seed, 22, static_cast<std::uint64_t>(epoch)));
    const auto adam_cfg = epoch_adam(cfg, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += sz(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + sz(cfg.batch));
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = data.samples[order[k]];
        const auto& b = base[order[k]];
        const double rho = std::abs(s.actual / kKbpsScale - b.v);
        const std::vector<double> in[] = {dif_row(s.state), b.features};
        const auto cache = net.forward(in);
        const double raw = net.output(cache, 0)[0];
        const double e = nn::softplus(raw);
        total += std::max(c * (rho - e), (1.0 - c) * (e - rho));
        const double de = rho > e ? -c : (1.0 - c);
        const std::vector<double> dy[] = {{de * nn::sigmoid(raw) * scale}};
        net.backward(cache, dy, grads);
      }
      nn::adam_step(net.params(), grads, adam_cfg, adam);
    }
    curve.push_back(total / static_cast<double>(data.size()));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Metrics

Metrics compute_metrics(std::span<const BitrateRange> predictions, std::span<const double> actuals) {
  if (predictions.empty()) throw ValidationError("metrics need at least one prediction");
  if (predictions.size() != actuals.size()) throw ValidationError("prediction/actual count mismatch");
  const auto n = static_cast<double>(predictions.size());
  Metrics m;
  m.count = predictions.size();
  double mean_v = 0.0;
  double mean_a = 0.0;
  std::size_t covered = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    m.mad += std::abs(p.v - actuals[i]) / kKbpsScale;
    mean_v += p.v;
    mean_a += actuals[i];
    if (actuals[i] >= p.lower() && actuals[i] <= p.upper()) ++covered;
  }
  m.mad /= n;
  m.cr = static_cast<double>(covered) / n;
  mean_v /= n;
  mean_a /= n;
  double sv = 0.0;
  double sa = 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double dv = predictions[i].v - mean_v;
    const double da = actuals[i] - mean_a;
    sv += dv * dv;
    sa += da * da;
    cov += dv * da;
  }
  if (sv > 0.0 && sa > 0.0) m.pcc = cov / std::sqrt(sv * sa);
  return m;
}

Metrics eval_metrics(const CbpnModel& model, const Dataset& data) {
  std::vector<BitrateRange> pred;
  std::vector<double> actual;
  for (const auto& s : data.samples) {
    pred.push_back(model.predict(s.state));
    actual.push_back(s.actual);
  }
  return compute_metrics(pred, actual);
}

Metrics eval_last_target(const Dataset& data) {
  std::vector<BitrateRange> pred;
  std::vector<double> actual;
  for (const auto& s : data.samples) {
    pred.push_back({s.next_target, 0.0});
    actual.push_back(s.actual);
  }
  return compute_metrics(pred, actual);
}

}  // namespace anableps::cbpn

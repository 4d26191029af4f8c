// SPDX-License-Identifier: Apache-2.0
#include "anableps/neural.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "anableps/common.hpp"
#include "text_util.hpp"

namespace anableps::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using MutMatMap = Eigen::Map<RowMat>;
using VecMap = Eigen::Map<const Eigen::VectorXd>;
using MutVecMap = Eigen::Map<Eigen::VectorXd>;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

// Offsets of the nine GRU parameter blocks.
struct GruLayout {
  std::size_t wz, uz, bz, wr, ur, br, wh, uh, bh, total;
  GruLayout(int d, int h) {
    const std::size_t ih = sz(h) * sz(d);
    const std::size_t hh = sz(h) * sz(h);
    const std::size_t block = ih + hh + sz(h);
    wz = 0;
    uz = ih;
    bz = ih + hh;
    wr = block;
    ur = block + ih;
    br = block + ih + hh;
    wh = 2 * block;
    uh = 2 * block + ih;
    bh = 2 * block + ih + hh;
    total = 3 * block;
  }
};

// im2col for valid 1D convolution: (C*K) x Lout.
RowMat conv_columns(std::span<const double> x, Shape in, int kernel, int stride, int lout) {
  RowMat cols(in.rows * kernel, lout);
  for (int c = 0; c < in.rows; ++c) {
    for (int k = 0; k < kernel; ++k) {
      for (int t = 0; t < lout; ++t) {
        cols(c * kernel + k, t) = x[sz(c) * sz(in.cols) + sz(t * stride + k)];
      }
    }
  }
  return cols;
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return "input";
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv1d: return "conv1d";
    case LayerKind::kGru: return "gru";
    case LayerKind::kSoftmax: return "softmax";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kConcat: return "concat";
  }
  return "unknown";
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ValidationError("softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

// ---------------------------------------------------------------------------
// Graph construction

int Network::add(LayerSpec spec, std::size_t n_params) {
  for (const auto& l : layers_) {
    if (l.name == spec.name) throw ValidationError("duplicate layer name: " + spec.name);
  }
  for (int i : spec.inputs) {
    if (i < 0 || sz(i) >= layers_.size()) {
      throw ValidationError("layer " + spec.name + " refers to an unknown node");
    }
  }
  spec.param_offset = params_.size();
  spec.param_count = n_params;
  params_.resize(params_.size() + n_params, 0.0);
  layers_.push_back(std::move(spec));
  return static_cast<int>(layers_.size() - 1);
}

int Network::input(const std::string& name, Shape shape) {
  if (shape.rows < 1 || shape.cols < 1) throw ValidationError("input dims must be >= 1");
  LayerSpec s;
  s.kind = LayerKind::kInput;
  s.name = name;
  s.out = shape;
  const int id = add(std::move(s), 0);
  inputs_.push_back(id);
  return id;
}

int Network::dense(const std::string& name, int from, int units) {
  if (units < 1) throw ValidationError("dense units must be >= 1");
  LayerSpec s;
  s.kind = LayerKind::kDense;
  s.name = name;
  s.inputs = {from};
  s.units = units;
  s.out = {units, 1};
  const std::size_t in = shape(from).size();
  return add(std::move(s), sz(units) * in + sz(units));
}

int Network::conv1d(const std::string& name, int from, int filters, int kernel, int stride) {
  if (filters < 1 || kernel < 1 || stride < 1) {
    throw ValidationError("conv1d filters, kernel and stride must be >= 1");
  }
  const Shape in = shape(from);
  if (kernel > in.cols) throw ValidationError("conv1d kernel longer than its input");
  LayerSpec s;
  s.kind = LayerKind::kConv1d;
  s.name = name;
  s.inputs = {from};
  s.units = filters;
  s.kernel = kernel;
  s.stride = stride;
  s.out = {filters, (in.cols - kernel) / stride + 1};
  return add(std::move(s), sz(filters) * sz(in.rows) * sz(kernel) + sz(filters));
}

int Network::gru(const std::string& name, int from, int hidden) {
  if (hidden < 1) throw ValidationError("GRU hidden size must be >= 1");
  LayerSpec s;
  s.kind = LayerKind::kGru;
  s.name = name;
  s.inputs = {from};
  s.units = hidden;
  s.out = {hidden, 1};
  return add(std::move(s), GruLayout(shape(from).rows, hidden).total);
}

int Network::relu(const std::string& name, int from) {
  LayerSpec s;
  s.kind = LayerKind::kRelu;
  s.name = name;
  s.inputs = {from};
  s.out = shape(from);
  return add(std::move(s), 0);
}

int Network::softmax(const std::string& name, int from) {
  LayerSpec s;
  s.kind = LayerKind::kSoftmax;
  s.name = name;
  s.inputs = {from};
  s.out = {static_cast<int>(shape(from).size()), 1};
  return add(std::move(s), 0);
}

int Network::concat(const std::string& name, std::vector<int> from) {
  if (from.empty()) throw ValidationError("concat needs inputs");
  std::size_t total = 0;
  for (int i : from) total += shape(i).size();
  LayerSpec s;
  s.kind = LayerKind::kConcat;
  s.name = name;
  s.inputs = std::move(from);
  s.out = {static_cast<int>(total), 1};
  return add(std::move(s), 0);
}

void Network::mark_output(int node) {
  if (node < 0 || sz(node) >= layers_.size()) throw ValidationError("unknown output node");
  outputs_.push_back(node);
}

void Network::init(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed));
  for (const auto& l : layers_) {
    if (l.param_count == 0) continue;
    double* p = params_.data() + l.param_offset;
    std::fill(p, p + l.param_count, 0.0);
    auto fill = [&](std::size_t offset, std::size_t n, double limit) {
      std::uniform_real_distribution<double> u(-limit, limit);
      for (std::size_t i = 0; i < n; ++i) p[offset + i] = u(rng);
    };
    const Shape in = shape(l.inputs[0]);
    switch (l.kind) {
      case LayerKind::kDense: {
        const std::size_t fan_in = in.size();
        fill(0, sz(l.units) * fan_in, std::sqrt(6.0 / static_cast<double>(fan_in)));
        break;
      }
      case LayerKind::kConv1d: {
        const std::size_t fan_in = sz(in.rows) * sz(l.kernel);
        fill(0, sz(l.units) * fan_in, std::sqrt(6.0 / static_cast<double>(fan_in)));
        break;
      }
      case LayerKind::kGru: {
        const GruLayout g(in.rows, l.units);
        const double limit = 1.0 / std::sqrt(static_cast<double>(l.units));
        for (std::size_t off : {g.wz, g.wr, g.wh}) fill(off, sz(l.units) * sz(in.rows), limit);
        for (std::size_t off : {g.uz, g.ur, g.uh}) fill(off, sz(l.units) * sz(l.units), limit);
        break;
      }
      default:
        break;
    }
  }
}

Shape Network::shape(int node) const {
  if (node < 0 || sz(node) >= layers_.size()) throw ValidationError("unknown node index");
  return layers_[sz(node)].out;
}

const LayerSpec& Network::layer(const std::string& name) const {
  return layers_.at(sz(node(name)));
}

int Network::node(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return static_cast<int>(i);
  }
  throw ValidationError("no layer named " + name);
}

std::span<double> Network::layer_params(const std::string& name) {
  const auto& l = layer(name);
  return std::span<double>(params_.data() + l.param_offset, l.param_count);
}

std::string Network::signature() const {
  std::string out;
  for (const auto& l : layers_) {
    out += l.name + ':' + to_string(l.kind) + ':' + std::to_string(l.out.rows) + 'x' +
           std::to_string(l.out.cols) + ':' + std::to_string(l.param_count) + ';';
  }
  return out;
}

// ---------------------------------------------------------------------------
// GRU step

std::vector<double> gru_step(const GruWeights& w, std::span<const double> x,
                             std::span<const double> h, int hidden) {
  const auto H = sz(hidden);
  const auto D = x.size();
  if (h.size() != H) throw ValidationError("gru_step hidden size mismatch");
  std::vector<double> out(H);
  std::vector<double> z(H), r(H);
  for (std::size_t i = 0; i < H; ++i) {
    double az = w.bz[i];
    double ar = w.br[i];
    for (std::size_t j = 0; j < D; ++j) {
      az += w.wz[i * D + j] * x[j];
      ar += w.wr[i * D + j] * x[j];
    }
    for (std::size_t j = 0; j < H; ++j) {
      az += w.uz[i * H + j] * h[j];
      ar += w.ur[i * H + j] * h[j];
    }
    z[i] = sigmoid(az);
    r[i] = sigmoid(ar);
  }
  for (std::size_t i = 0; i < H; ++i) {
    double ah = w.bh[i];
    for (std::size_t j = 0; j < D; ++j) ah += w.wh[i * D + j] * x[j];
    for (std::size_t j = 0; j < H; ++j) ah += w.uh[i * H + j] * r[j] * h[j];
    out[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(ah);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

Cache Network::forward(std::span<const std::vector<double>> inputs) const {
  if (inputs.size() != inputs_.size()) {
    throw ValidationError("expected " + std::to_string(inputs_.size()) + " inputs, got " +
                          std::to_string(inputs.size()));
  }
  Cache c;
  c.values.resize(layers_.size());
  c.aux.resize(layers_.size());
  std::size_t next_input = 0;
  for (std::size_t n = 0; n < layers_.size(); ++n) {
    const auto& l = layers_[n];
    auto& y = c.values[n];
    const double* p = params_.data() + l.param_offset;
    switch (l.kind) {
      case LayerKind::kInput: {
        const auto& x = inputs[next_input++];
        if (x.size() != l.out.size()) {
          throw ValidationError("input " + l.name + " expects " + std::to_string(l.out.size()) +
                                " values, got " + std::to_string(x.size()));
        }
        for (double v : x) {
          if (!std::isfinite(v)) throw ValidationError("non-finite value in input " + l.name);
        }
        y = x;
        break;
      }
      case LayerKind::kDense: {
        const auto& x = c.values[sz(l.inputs[0])];
        const auto in = static_cast<Eigen::Index>(x.size());
        y.resize(sz(l.units));
        MatMap W(p, l.units, in);
        VecMap b(p + sz(l.units) * x.size(), l.units);
        MutVecMap(y.data(), l.units).noalias() = W * VecMap(x.data(), in) + b;
        break;
      }
      case LayerKind::kConv1d: {
        const Shape in = shape(l.inputs[0]);
        const auto& x = c.values[sz(l.inputs[0])];
        const RowMat cols = conv_columns(x, in, l.kernel, l.stride, l.out.cols);
        const int ck = in.rows * l.kernel;
        MatMap W(p, l.units, ck);
        VecMap b(p + sz(l.units) * sz(ck), l.units);
        y.resize(l.out.size());
        MutMatMap Y(y.data(), l.units, l.out.cols);
        Y.noalias() = W * cols;
        Y.colwise() += b;
        break;
      }
      case LayerKind::kGru: {
        const Shape in = shape(l.inputs[0]);
        const auto& x = c.values[sz(l.inputs[0])];
        const int H = l.units;
        const int D = in.rows;
        const int T = in.cols;
        const GruLayout g(D, H);
        // aux per step: h_prev, z, r, candidate.
        auto& aux = c.aux[n];
        aux.assign(sz(T) * 4 * sz(H), 0.0);
        Eigen::VectorXd h = Eigen::VectorXd::Zero(H);
        Eigen::VectorXd xt(D);
        for (int t = 0; t < T; ++t) {
          for (int d = 0; d < D; ++d) xt(d) = x[sz(d) * sz(T) + sz(t)];
          double* base = aux.data() + sz(t) * 4 * sz(H);
          MutVecMap hp(base, H), z(base + H, H), r(base + 2 * H, H), hc(base + 3 * H, H);
          hp = h;
          Eigen::VectorXd az = MatMap(p + g.wz, H, D) * xt + MatMap(p + g.uz, H, H) * h +
                               VecMap(p + g.bz, H);
          Eigen::VectorXd ar = MatMap(p + g.wr, H, D) * xt + MatMap(p + g.ur, H, H) * h +
                               VecMap(p + g.br, H);
          for (int i = 0; i < H; ++i) {
            z(i) = sigmoid(az(i));
            r(i) = sigmoid(ar(i));
          }
          const Eigen::VectorXd rh = r.cwiseProduct(h);
          hc = (MatMap(p + g.wh, H, D) * xt + MatMap(p + g.uh, H, H) * rh +
                VecMap(p + g.bh, H))
                   .array()
                   .tanh()
                   .matrix();
          h = (Eigen::VectorXd::Ones(H) - z).cwiseProduct(h) + z.cwiseProduct(hc);
        }
        y.assign(h.data(), h.data() + H);
        break;
      }
      case LayerKind::kRelu: {
        y = c.values[sz(l.inputs[0])];
        for (double& v : y) v = v > 0.0 ? v : 0.0;
        break;
      }
      case LayerKind::kSoftmax: {
        y = nn::softmax(c.values[sz(l.inputs[0])]);
        break;
      }
      case LayerKind::kConcat: {
        y.clear();
        y.reserve(l.out.size());
        for (int i : l.inputs) {
          const auto& x = c.values[sz(i)];
          y.insert(y.end(), x.begin(), x.end());
        }
        break;
      }
    }
  }
  return c;
}

const std::vector<double>& Network::output(const Cache& cache, std::size_t i) const {
  return cache.values.at(sz(outputs_.at(i)));
}

// ---------------------------------------------------------------------------
// Backward

void Network::backward(const Cache& cache, std::span<const std::vector<double>> output_grads,
                       std::span<double> param_grads,
                       std::vector<std::vector<double>>* input_grads) const {
  if (cache.values.size() != layers_.size()) throw ValidationError("missing forward cache");
  if (param_grads.size() != params_.size()) throw ValidationError("gradient buffer size");
  if (output_grads.size() != outputs_.size()) throw ValidationError("output gradient count");

  std::vector<std::vector<double>> grad(layers_.size());
  std::vector<bool> live(layers_.size(), false);
  for (std::size_t o = 0; o < outputs_.size(); ++o) {
    if (output_grads[o].empty()) continue;
    const auto n = sz(outputs_[o]);
    if (output_grads[o].size() != layers_[n].out.size()) {
      throw ValidationError("output gradient shape for " + layers_[n].name);
    }
    if (!live[n]) grad[n].assign(layers_[n].out.size(), 0.0);
    live[n] = true;
    for (std::size_t i = 0; i < grad[n].size(); ++i) grad[n][i] += output_grads[o][i];
  }
  auto grad_of = [&](int node) -> std::vector<double>& {
    const auto n = sz(node);
    if (!live[n]) {
      grad[n].assign(layers_[n].out.size(), 0.0);
      live[n] = true;
    }
    return grad[n];
  };

  for (std::size_t n = layers_.size(); n-- > 0;) {
    if (!live[n]) continue;
    const auto& l = layers_[n];
    const auto& dy = grad[n];
    const double* p = params_.data() + l.param_offset;
    double* gp = param_grads.data() + l.param_offset;
    switch (l.kind) {
      case LayerKind::kInput:
        break;
      case LayerKind::kDense: {
        const auto& x = cache.values[sz(l.inputs[0])];
        const auto in = static_cast<Eigen::Index>(x.size());
        VecMap g(dy.data(), l.units);
        VecMap xv(x.data(), in);
        MutMatMap(gp, l.units, in).noalias() += g * xv.transpose();
        MutVecMap(gp + sz(l.units) * x.size(), l.units) += g;
        auto& dx = grad_of(l.inputs[0]);
        MutVecMap(dx.data(), in).noalias() += MatMap(p, l.units, in).transpose() * g;
        break;
      }
      case LayerKind::kConv1d: {
        const Shape in = shape(l.inputs[0]);
        const auto& x = cache.values[sz(l.inputs[0])];
        const RowMat cols = conv_columns(x, in, l.kernel, l.stride, l.out.cols);
        const int ck = in.rows * l.kernel;
        MatMap G(dy.data(), l.units, l.out.cols);
        MutMatMap(gp, l.units, ck).noalias() += G * cols.transpose();
        MutVecMap(gp + sz(l.units) * sz(ck), l.units) += G.rowwise().sum();
        const RowMat dcols = MatMap(p, l.units, ck).transpose() * G;
        auto& dx = grad_of(l.inputs[0]);
        for (int c = 0; c < in.rows; ++c) {
          for (int k = 0; k < l.kernel; ++k) {
            for (int t = 0; t < l.out.cols; ++t) {
              dx[sz(c) * sz(in.cols) + sz(t * l.stride + k)] += dcols(c * l.kernel + k, t);
            }
          }
        }
        break;
      }
      case LayerKind::kGru: {
        const Shape in = shape(l.inputs[0]);
        const auto& x = cache.values[sz(l.inputs[0])];
        const auto& aux = cache.aux[n];
        const int H = l.units;
        const int D = in.rows;
        const int T = in.cols;
        const GruLayout g(D, H);
        MatMap Wz(p + g.wz, H, D), Uz(p + g.uz, H, H);
        MatMap Wr(p + g.wr, H, D), Ur(p + g.ur, H, H);
        MatMap Wh(p + g.wh, H, D), Uh(p + g.uh, H, H);
        MutMatMap gWz(gp + g.wz, H, D), gUz(gp + g.uz, H, H);
        MutMatMap gWr(gp + g.wr, H, D), gUr(gp + g.ur, H, H);
        MutMatMap gWh(gp + g.wh, H, D), gUh(gp + g.uh, H, H);
        MutVecMap gbz(gp + g.bz, H), gbr(gp + g.br, H), gbh(gp + g.bh, H);
        auto& dx = grad_of(l.inputs[0]);
        Eigen::VectorXd dh = VecMap(dy.data(), H);
        Eigen::VectorXd xt(D);
        for (int t = T - 1; t >= 0; --t) {
          for (int d = 0; d < D; ++d) xt(d) = x[sz(d) * sz(T) + sz(t)];
          const double* base = aux.data() + sz(t) * 4 * sz(H);
          VecMap hp(base, H), z(base + H, H), r(base + 2 * H, H), hc(base + 3 * H, H);
          const Eigen::VectorXd rh = r.cwiseProduct(hp);
          const Eigen::VectorXd dz = dh.cwiseProduct(hc - hp);
          const Eigen::VectorXd dhc = dh.cwiseProduct(z);
          Eigen::VectorXd dh_prev = dh.cwiseProduct(Eigen::VectorXd::Ones(H) - z);

          const Eigen::VectorXd dah =
              dhc.array() * (1.0 - hc.array().square());
          gWh.noalias() += dah * xt.transpose();
          gUh.noalias() += dah * rh.transpose();
          gbh += dah;
          const Eigen::VectorXd drh = Uh.transpose() * dah;
          const Eigen::VectorXd dr = drh.cwiseProduct(hp);
          dh_prev += drh.cwiseProduct(r);
          Eigen::VectorXd dxt = Wh.transpose() * dah;

          const Eigen::VectorXd daz = dz.array() * z.array() * (1.0 - z.array());
          gWz.noalias() += daz * xt.transpose();
          gUz.noalias() += daz * hp.transpose();
          gbz += daz;
          dh_prev.noalias() += Uz.transpose() * daz;
          dxt.noalias() += Wz.transpose() * daz;

          const Eigen::VectorXd dar = dr.array() * r.array() * (1.0 - r.array());
          gWr.noalias() += dar * xt.transpose();
          gUr.noalias() += dar * hp.transpose();
          gbr += dar;
          dh_prev.noalias() += Ur.transpose() * dar;
          dxt.noalias() += Wr.transpose() * dar;

          for (int d = 0; d < D; ++d) dx[sz(d) * sz(T) + sz(t)] += dxt(d);
          dh = dh_prev;
        }
        break;
      }
      case LayerKind::kRelu: {
        const auto& x = cache.values[sz(l.inputs[0])];
        auto& dx = grad_of(l.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (x[i] > 0.0) dx[i] += dy[i];
        }
        break;
      }
      case LayerKind::kSoftmax: {
        const auto& y = cache.values[n];
        double dot = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
        auto& dx = grad_of(l.inputs[0]);
        for (std::size_t i = 0; i < y.size(); ++i) dx[i] += y[i] * (dy[i] - dot);
        break;
      }
      case LayerKind::kConcat: {
        std::size_t offset = 0;
        for (int i : l.inputs) {
          auto& dx = grad_of(i);
          for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += dy[offset + k];
          offset += dx.size();
        }
        break;
      }
    }
  }

  if (input_grads != nullptr) {
    input_grads->clear();
    for (int i : inputs_) {
      const auto n = sz(i);
      input_grads->push_back(live[n] ? grad[n] : std::vector<double>(layers_[n].out.size(), 0.0));
    }
  }
}

// ---------------------------------------------------------------------------
// Optimiser

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ValidationError("adam lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ValidationError("adam eps must be > 0");
}

void adam_step(std::span<double> params, std::span<const double> grads,
               const AdamConfig& cfg, AdamState& state) {
  if (params.size() != grads.size()) throw ValidationError("adam: parameter/gradient size");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ValidationError("adam: state size");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

SharedParameters::SharedParameters(std::vector<double> initial, AdamConfig cfg)
    : params_(std::move(initial)), cfg_(cfg) {
  cfg_.validate();
}

void SharedParameters::apply(std::span<const double> grads) {
  std::lock_guard lock(mu_);
  adam_step(params_, grads, cfg_, state_);
}

void SharedParameters::snapshot(std::vector<double>& out) const {
  std::lock_guard lock(mu_);
  out = params_;
}

std::vector<double> SharedParameters::snapshot() const {
  std::vector<double> out;
  snapshot(out);
  return out;
}

std::uint64_t SharedParameters::updates() const {
  std::lock_guard lock(mu_);
  return state_.step;
}

void SharedParameters::set_lr(double lr) {
  std::lock_guard lock(mu_);
  cfg_.lr = lr;
  cfg_.validate();
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const Network& net, std::span<const std::vector<double>> inputs,
                  double eps, std::size_t max_params, std::uint64_t seed, std::size_t* kinks) {
  std::mt19937_64 rng(mix_seed(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> proj;
  for (int o : net.outputs()) {
    std::vector<double> w(net.shape(o).size());
    for (double& v : w) v = normal(rng);
    proj.push_back(std::move(w));
  }
  auto loss_of = [&](const Network& n, const Cache& c) {
    double total = 0.0;
    for (std::size_t o = 0; o < proj.size(); ++o) {
      const auto& y = n.output(c, o);
      for (std::size_t i = 0; i < y.size(); ++i) total += proj[o][i] * y[i];
    }
    return total;
  };
  std::vector<int> relu_inputs;
  for (const auto& l : net.layers()) {
    if (l.kind == LayerKind::kRelu) relu_inputs.push_back(l.inputs[0]);
  }
  auto crosses_kink = [&](const Cache& a, const Cache& b) {
    for (int node : relu_inputs) {
      const auto& x = a.values[static_cast<std::size_t>(node)];
      const auto& y = b.values[static_cast<std::size_t>(node)];
      for (std::size_t i = 0; i < x.size(); ++i) {
        if ((x[i] > 0.0) != (y[i] > 0.0)) return true;
      }
    }
    return false;
  };
  std::size_t skipped = 0;
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-5);
  };

  const Cache cache = net.forward(inputs);
  std::vector<double> analytic(net.param_count(), 0.0);
  std::vector<std::vector<double>> input_grads;
  net.backward(cache, proj, analytic, &input_grads);

  std::vector<std::size_t> idx(net.param_count());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (max_params < idx.size()) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_params);
  }
  Network probe = net;
  double worst = 0.0;
  for (std::size_t i : idx) {
    const double orig = probe.params()[i];
    probe.params()[i] = orig + eps;
    const Cache up = probe.forward(inputs);
    probe.params()[i] = orig - eps;
    const Cache down = probe.forward(inputs);
    probe.params()[i] = orig;
    if (crosses_kink(up, down)) {
      ++skipped;
      continue;
    }
    const double numeric = (loss_of(probe, up) - loss_of(probe, down)) / (2.0 * eps);
    worst = std::max(worst, rel(analytic[i], numeric));
  }
  std::vector<std::vector<double>> in(inputs.begin(), inputs.end());
  for (std::size_t k = 0; k < in.size(); ++k) {
    for (std::size_t i = 0; i < in[k].size(); ++i) {
      const double orig = in[k][i];
      in[k][i] = orig + eps;
      const Cache up = net.forward(in);
      in[k][i] = orig - eps;
      const Cache down = net.forward(in);
      in[k][i] = orig;
      if (crosses_kink(up, down)) {
        ++skipped;
        continue;
      }
      const double numeric = (loss_of(net, up) - loss_of(net, down)) / (2.0 * eps);
      worst = std::max(worst, rel(input_grads[k][i], numeric));
    }
  }
  if (kinks) *kinks = skipped;
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json network_to_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    if (l.param_count == 0) continue;
    std::vector<double> p(net.params().begin() + static_cast<std::ptrdiff_t>(l.param_offset),
                          net.params().begin() +
                              static_cast<std::ptrdiff_t>(l.param_offset + l.param_count));
    for (double v : p) {
      if (!std::isfinite(v)) throw ValidationError("non-finite parameter in layer " + l.name);
    }
    layers.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"params", p}});
  }
  return {{"signature", net.signature()}, {"layers", layers}};
}

void network_from_json(Network& net, const nlohmann::json& j) {
  if (j.at("signature").get<std::string>() != net.signature()) {
    throw ValidationError("checkpoint does not match the network architecture");
  }
  for (const auto& entry : j.at("layers")) {
    auto dst = net.layer_params(entry.at("name").get<std::string>());
    const auto& src = entry.at("params");
    if (src.size() != dst.size()) throw ValidationError("checkpoint layer size mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i].get<double>();
  }
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NetworkRef> nets,
                     const nlohmann::json& meta) {
  nlohmann::json j;
  j["format"] = "anableps-params";
  j["version"] = 1;
  j["networks"] = nlohmann::json::object();
  for (const auto& n : nets) j["networks"][n.name] = network_to_json(*n.net);
  j["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  text::write_file(path, j.dump() + "\n");
}

nlohmann::json load_checkpoint(const std::filesystem::path& path,
                               std::span<const NamedNetwork> nets) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "anableps-params" || j.value("version", 0) != 1) {
    throw ParseError("checkpoint " + path.string() + ": unknown format");
  }
  try {
    for (const auto& n : nets) network_from_json(*n.net, j.at("networks").at(n.name));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  return j.value("meta", nlohmann::json::object());
}

}  // namespace anableps::nn

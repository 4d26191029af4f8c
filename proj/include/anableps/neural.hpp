// SPDX-License-Identifier: Apache-2.0
//
// Small static-graph networks with hand-written reverse mode. Values are
// row-major (rows x cols); sequences are stored channels x time.
#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace anableps::nn {

struct Shape {
  int rows = 1;
  int cols = 1;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  bool operator==(const Shape&) const = default;
};

enum class LayerKind : std::uint8_t { kInput, kDense, kConv1d, kGru, kSoftmax, kRelu, kConcat };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::kInput;
  std::string name;
  std::vector<int> inputs;  // node indices
  int units = 0;            // dense units, conv filters, GRU hidden size
  int kernel = 1;
  int stride = 1;
  Shape out;
  std::size_t param_offset = 0;
  std::size_t param_count = 0;
};

// Per-call activation record produced by forward().
struct Cache {
  std::vector<std::vector<double>> values;  // one per node
  std::vector<std::vector<double>> aux;     // GRU per-step gates
};

class Network {
 public:
  int input(const std::string& name, Shape shape);
  int dense(const std::string& name, int from, int units);
  int conv1d(const std::string& name, int from, int filters, int kernel, int stride = 1);
  // Runs over the columns of `from` and yields the final hidden state.
  int gru(const std::string& name, int from, int hidden);
  int relu(const std::string& name, int from);
  int softmax(const std::string& name, int from);
  int concat(const std::string& name, std::vector<int> from);
  void mark_output(int node);

  // He-style uniform weights (GRU: +-1/sqrt(hidden)), zero biases.
  void init(std::uint64_t seed);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(const std::string& name) const;
  int node(const std::string& name) const;
  const std::vector<int>& inputs() const { return inputs_; }
  const std::vector<int>& outputs() const { return outputs_; }
  Shape shape(int node) const;

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::span<double> layer_params(const std::string& name);
  std::size_t param_count() const { return params_.size(); }

  // `inputs` follow declaration order, each flattened row-major.
  Cache forward(std::span<const std::vector<double>> inputs) const;
  const std::vector<double>& output(const Cache& cache, std::size_t i = 0) const;

  // Accumulates dL/dparams into `param_grads` (size param_count()). Output
  // gradients follow mark_output order; an empty vector means zero. When
  // `input_grads` is non-null it receives dL/dinputs.
  void backward(const Cache& cache, std::span<const std::vector<double>> output_grads,
                std::span<double> param_grads,
                std::vector<std::vector<double>>* input_grads = nullptr) const;

  // Layer names, kinds and parameter counts; used to verify checkpoints.
  std::string signature() const;

 private:
  int add(LayerSpec spec, std::size_t n_params);

  std::vector<LayerSpec> layers_;
  std::vector<int> inputs_;
  std::vector<int> outputs_;
  std::vector<double> params_;
};

// One GRU update; exposed for tests. Weight blocks are row-major
// (hidden x input) and (hidden x hidden).
struct GruWeights {
  std::span<const double> wz, uz, bz, wr, ur, br, wh, uh, bh;
};
std::vector<double> gru_step(const GruWeights& w, std::span<const double> x,
                             std::span<const double> h, int hidden);

double sigmoid(double x);
double softplus(double x);
std::vector<double> softmax(std::span<const double> logits);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// Bias-corrected Adam.
void adam_step(std::span<double> params, std::span<const double> grads,
               const AdamConfig& cfg, AdamState& state);

// Maximum relative error |a - n| / max(|a| + |n|, 1e-5) between analytic and
// central-difference gradients of L = sum_o <w_o, output_o> for fixed random
// projections w_o. Checks every parameter unless `max_params` is smaller, in
// which case a seeded random subset is used; input gradients are checked too.
// A coordinate whose +-eps probes flip the sign of some ReLU input straddles
// a kink where L is not differentiable; it is skipped and counted in `kinks`.
double grad_check(const Network& net, std::span<const std::vector<double>> inputs,
                  double eps = 1e-5, std::size_t max_params = SIZE_MAX,
                  std::uint64_t seed = 0, std::size_t* kinks = nullptr);

// Parameters shared by asynchronous workers; apply() is serialized.
class SharedParameters {
 public:
  SharedParameters(std::vector<double> initial, AdamConfig cfg);

  void apply(std::span<const double> grads);
  void snapshot(std::vector<double>& out) const;
  std::vector<double> snapshot() const;
  std::uint64_t updates() const;
  void set_lr(double lr);

 private:
  mutable std::mutex mu_;
  std::vector<double> params_;
  AdamConfig cfg_;
  AdamState state_;
};

// Checkpoints: {"format": "anableps-params", "version": 1,
//   "networks": {name: {"signature": s, "layers": [{"name", "params"}]}},
//   "meta": {...}}. Doubles are written in shortest round-trip form.
nlohmann::json network_to_json(const Network& net);
void network_from_json(Network& net, const nlohmann::json& j);

struct NamedNetwork {
  std::string name;
  Network* net;
};
struct NetworkRef {
  std::string name;
  const Network* net;
};
void save_checkpoint(const std::filesystem::path& path, std::span<const NetworkRef> nets,
                     const nlohmann::json& meta);
// Returns the stored meta object.
nlohmann::json load_checkpoint(const std::filesystem::path& path,
                               std::span<const NamedNetwork> nets);

}  // namespace anableps::nn

// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: configuration, corpus generation, training,
// evaluation and paired policy comparison, plus the files they write.
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "anableps/abrn.hpp"
#include "anableps/baselines.hpp"
#include "anableps/cbpn.hpp"
#include "anableps/netsim.hpp"
#include "json.hpp"

namespace anableps::harness {

enum class Mode { kSimulate, kTrainCbpn, kTrainAbrn, kEvaluate, kCompare, kGenTraces };
Mode parse_mode(const std::string& name);
std::string to_string(Mode m);

struct CorpusConfig {
  int trace_count = 30;
  double trace_seconds = 300.0;
  double trace_mean_kbps = 4000.0;
  double trace_std_kbps = 1000.0;
  std::string trace_model = "markov-step";  // markov-step | ar1 | square-wave
  double train_trace_fraction = 0.8;
  int video_count = 57;
  int train_videos = 47;
  double video_seconds = 120.0;
  double video_mean_si = 60.0;
  double video_mean_ti = 25.0;
  double video_mean_scene_s = 8.0;
};

struct PathsConfig {
  std::filesystem::path traces_dir = "data/traces";
  std::filesystem::path videos_dir = "data/videos";
  std::filesystem::path cbpn_checkpoint = "checkpoints/cbpn.json";
  std::filesystem::path abrn_full = "checkpoints/abrn_full.json";
  std::filesystem::path abrn_c = "checkpoints/abrn_c.json";
  std::filesystem::path abrn_s = "checkpoints/abrn_s.json";
  // simulate mode: explicit trace/video files; empty picks the first held-out ones.
  std::filesystem::path trace_file;
  std::filesystem::path video_file;
};

struct CbpnSection {
  cbpn::ModelConfig model;
  cbpn::DatasetConfig data;
  cbpn::TrainConfig train;
};

struct AbrnSection {
  abrn::NetConfig net;
  abrn::A3cConfig a3c;
  int warmup_seconds = 4;
  double episode_seconds = 60.0;
};

struct EvalConfig {
  double session_seconds = 120.0;
  double start_bitrate = 1000.0;
  // Compare mode: comma-separated policy names; the anchor is the reference
  // for relative deltas.
  std::string policies = "gcc,anableps-full,anableps-c,anableps-s";
  std::string anchor = "gcc";
  double fixed_kbps = 3000.0;
  double oracle_safety = 0.85;
  // Anableps action selection: argmax | sample.
  std::string selection = "argmax";
};

struct ExperimentConfig {
  Mode mode = Mode::kSimulate;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "out";
  std::string policy = "gcc";
  abrn::Ablation ablation = abrn::Ablation::kFull;

  PathsConfig paths;
  CorpusConfig corpus;
  netsim::LinkConfig link;
  media::EncoderConfig encoder;
  media::QualityModel quality;
  abrn::RewardParams reward;
  baselines::GccConfig gcc;
  CbpnSection cbpn;
  AbrnSection abrn;
  EvalConfig eval;

  // Relative paths are resolved against this directory (the config file's).
  std::filesystem::path base_dir = ".";

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  void validate() const;
};

// INI text with one section per module. Unknown sections or keys and
// malformed values throw ConfigError.
ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every key with its current value; parse_config(format_config(c)) == c.
std::string format_config(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Corpus

struct Corpus {
  std::vector<std::pair<std::string, trace::NetworkTrace>> traces;
  std::vector<std::pair<std::string, trace::ComplexityTrace>> videos;
};

// Writes <traces_dir>/{train,test}/*.csv and <videos_dir>/{train,test}/*.csv.
void generate_corpus(const ExperimentConfig& cfg);
// split is "train" or "test"; files are returned in name order.
Corpus load_corpus(const ExperimentConfig& cfg, const std::string& split);

// ---------------------------------------------------------------------------
// Policies

netsim::SessionConfig session_config(const ExperimentConfig& cfg, const trace::NetworkTrace& link,
                                     double duration, std::uint64_t seed);

// Holds whatever a named policy needs (loaded agents, predictor) and builds
// one controller per session.
class PolicyFactory {
 public:
  explicit PolicyFactory(const ExperimentConfig& cfg);
  ~PolicyFactory();
  PolicyFactory(const PolicyFactory&) = delete;
  PolicyFactory& operator=(const PolicyFactory&) = delete;

  // Known: gcc, fixed, oracle, random, anableps (ablation from the config),
  // anableps-full, anableps-c, anableps-s. Loads checkpoints on first use;
  // a missing checkpoint throws ConfigError.
  void require(const std::string& name);
  std::unique_ptr<netsim::BitrateController> make(const std::string& name,
                                                  const trace::NetworkTrace& link,
                                                  std::uint64_t seed);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::vector<std::string> split_policies(const std::string& list);

// ---------------------------------------------------------------------------
// Reports

struct SessionMetrics {
  double quality = 0.0;
  double sending_kbps = 0.0;
  double stalling_ratio = 0.0;
  double frame_delay_s = 0.0;
  double reward = 0.0;
};

SessionMetrics session_metrics(const netsim::SessionLog& log);
nlohmann::json to_json(const SessionMetrics& m);

struct Cell {
  std::string policy;
  std::string trace;
  std::string video;
  std::uint64_t seed = 0;
  SessionMetrics metrics;
  std::string session_id;  // sessions/<id>.csv
};

struct PolicyAggregate {
  std::string policy;
  SessionMetrics mean;
  SessionMetrics stddev;  // population std over cells
  std::size_t cells = 0;
};

struct ComparisonReport {
  std::vector<Cell> cells;
  std::vector<PolicyAggregate> aggregates;  // in policy order
  std::string anchor;
};

std::vector<PolicyAggregate> aggregate(const std::vector<Cell>& cells,
                                       const std::vector<std::string>& policy_order);
// Percent change of each mean against the anchor's.
SessionMetrics relative_delta(const SessionMetrics& value, const SessionMetrics& anchor);

inline constexpr const char* kReportCsvHeader =
    "policy,trace,video,seed,quality,sending_kbps,stalling_ratio,frame_delay_s,reward,session";

std::string report_csv(const ComparisonReport& r);
nlohmann::json report_json(const ComparisonReport& r);

// Runs the full cross product with one seed per (trace, video) shared by all
// policies. When `out_dir` is set, per-session CSVs go to out_dir/sessions.
ComparisonReport compare_policies(const ExperimentConfig& cfg,
                                  const std::vector<std::string>& policies, const Corpus& corpus,
                                  PolicyFactory& factory,
                                  const std::optional<std::filesystem::path>& out_dir);

// Plot data: per-second time series of one session and per (policy, video)
// scatter points.
inline constexpr const char* kTimeseriesCsvHeader =
    "second,bandwidth_kbps,decision_kbps,actual_kbps,send_kbps,frame_delay_s,quality";
inline constexpr const char* kScatterCsvHeader =
    "policy,video,sending_kbps,quality,stalling_ratio,frame_delay_s";
std::string timeseries_csv(const netsim::SessionLog& log, const trace::NetworkTrace& link);
std::string scatter_csv(const ComparisonReport& r);

// ---------------------------------------------------------------------------
// Modes

// CBPN training on the train split with the seeds train-cbpn uses.
// `baseline_params` is the baseline network right after its own stage.
struct CbpnTraining {
  cbpn::CbpnModel model;
  cbpn::Dataset train;
  cbpn::Dataset heldout;
  cbpn::Curve baseline_curve;
  cbpn::Curve error_curve;
  std::vector<double> baseline_params;
};
CbpnTraining train_cbpn(const ExperimentConfig& cfg);

// Executes cfg.mode and writes its artifacts under cfg.out_dir. Returns the
// summary that was written to summary.json.
nlohmann::json run_experiment(const ExperimentConfig& cfg);

}  // namespace anableps::harness

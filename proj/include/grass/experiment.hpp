#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/model.hpp"
#include "grass/sim.hpp"
#include "grass/train.hpp"

// Config-driven experiment commands shared by the CLI and the acceptance suite.

namespace grass::experiment {

struct EvalConfig {
  inference::Engine engine = inference::Engine::MeanField;
  std::string split = "test";
  std::size_t limit = 0;  ///< episodes evaluated; 0 = all
  bool use_final = false;  ///< evaluate checkpoint_final.bin instead of the best checkpoint
};

struct AblateConfig {
  std::vector<std::size_t> objects{3, 5, 10};
  std::vector<std::size_t> modes{3, 5, 10};
  std::vector<bool> interaction{true, false};
  std::vector<std::string> variants{"GRASS"};
  bool fix_interactions = true;  ///< recalibrate the radius per object count
  double target_events_per_object = 2.3;
  std::size_t calibration_episodes = 64;
};

struct ExperimentConfig {
  sim::SimConfig sim;
  sim::SplitCounts splits;
  std::uint64_t data_seed = 0;
  model::ModelConfig model;
  train::TrainConfig train;
  EvalConfig eval;
  AblateConfig ablate;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output = "grass_out";

  void validate() const;
  nlohmann::json to_json() const;
  /// Keys missing from j keep the values of base.
  static ExperimentConfig from_json(const nlohmann::json& j, const ExperimentConfig& base);
  static ExperimentConfig from_json(const nlohmann::json& j) { return from_json(j, ExperimentConfig{}); }
  /// "paper" or "desk".
  static ExperimentConfig profile(const std::string& name);
};

nlohmann::json sim_to_json(const sim::SimConfig& c);
sim::SimConfig sim_from_json(const nlohmann::json& j, const sim::SimConfig& base = {});

/// Relative paths are placed under $GRASS_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output(const std::filesystem::path& p);

/// Deterministic pretty JSON plus trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

double mean_events_per_object(const std::vector<sim::Episode>& episodes);

/// Bisection on the collision radius so the mean events per object of a fixed
/// calibration batch lands near target.
double calibrate_radius(const sim::SimConfig& base, double target, std::size_t episodes, std::uint64_t seed);

struct GenerateResult {
  std::filesystem::path dir;
  double events_per_object = 0;  ///< over the training split
};
GenerateResult cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

std::vector<sim::Episode> load_split(const std::filesystem::path& data_dir, const std::string& split);

struct TrainRun {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  std::filesystem::path best;
  std::filesystem::path final_checkpoint;
  train::TrainResult result;
};
/// One run per seed under out_dir/<variant>_seed<k>.
std::vector<TrainRun> cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                                const std::filesystem::path& out_dir);

struct EvalSummary {
  std::vector<std::string> checkpoints;
  std::vector<train::EvalReport> reports;
  metrics::Scores mean;  ///< over checkpoints, pooled scores
  metrics::Scores std;
  double interaction_mass = 0;
  nlohmann::json json;
};
/// Writes report.json and report.csv under out_dir.
EvalSummary cmd_eval(const ExperimentConfig& cfg, const std::vector<std::filesystem::path>& checkpoints,
                     const std::filesystem::path& data_dir, const std::filesystem::path& out_dir);

/// segment_<split>_<episode>.csv and optionally .svg under out_dir.
train::Segmentation cmd_segment(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                const std::filesystem::path& data_dir, std::size_t episode,
                                const std::filesystem::path& out_dir, bool svg);

std::string segmentation_csv(const train::Segmentation& s, const sim::Episode& ep);
std::string segmentation_svg(const train::Segmentation& s, const sim::Episode& ep);

/// Sweeps over object count, model mode count and interaction on/off. Failed
/// points are recorded in the report and the sweep continues.
nlohmann::json cmd_ablate(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace grass::experiment

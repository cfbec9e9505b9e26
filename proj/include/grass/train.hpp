#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/inference.hpp"
#include "grass/metrics.hpp"
#include "grass/model.hpp"
#include "grass/params.hpp"
#include "grass/sim.hpp"

namespace grass::train {

struct TrainConfig {
  std::size_t batch_size = 20;
  std::size_t total_steps = 60000;
  std::size_t warmup_steps = 2000;
  double lr_min = 5e-5;
  double lr_peak = 2e-4;
  double weight_decay = 1e-5;
  double clip_norm = 10.0;
  double decay_rate = 0.99;  ///< per-epoch factor on the cosine part
  /// Steps per epoch for the decay factor; 0 derives it from the dataset.
  std::size_t steps_per_epoch = 0;
  double tau_start = 1.0;
  double tau_end = 0.5;
  double gumbel_tau_start = 1.0;
  double gumbel_tau_end = 0.5;
  bool hard_edges = true;
  double weight_y = 1.0;
  double weight_x = 1.0;
  /// Belief-usage term weight at step 0, decayed linearly to 0 at usage_steps.
  double usage_weight = 0.0;
  std::size_t usage_steps = 0;
  std::size_t samples = 1;  ///< Monte-Carlo draws of (x, e) per episode
  std::uint64_t seed = 0;
  std::size_t max_bad_steps = 50;
  std::size_t eval_every = 250;  ///< 0: only at the start and the end
  std::size_t val_limit = 0;     ///< validation episodes used; 0 = all
  std::size_t log_every = 25;
  inference::Engine engine = inference::Engine::MeanField;  ///< for validation decoding

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

double lr_schedule(std::size_t step, const TrainConfig& cfg);

struct Temperatures {
  double softmax = 1.0;
  double gumbel = 1.0;
};
Temperatures temperature_schedule(std::size_t step, const TrainConfig& cfg);

double usage_schedule(std::size_t step, const TrainConfig& cfg);

/// Adam moments with decoupled weight decay.
struct OptimizerState {
  ParameterStore m;
  ParameterStore v;
  std::size_t step = 0;

  static OptimizerState for_params(const ParameterStore& params);
};

void adamw_update(ParameterStore& params, const ParameterStore& grads, OptimizerState& opt, double lr,
                  double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

double global_norm(const ParameterStore& grads);
/// Rescales grads in place so the global norm is at most max_norm. Returns the pre-clip norm.
double clip_global_norm(ParameterStore& grads, double max_norm);

struct BatchGradient {
  double objective = 0;  ///< mean over episodes and samples
  double elbo = 0;
  double loglik = 0;
  double edge_kl = 0;
  ParameterStore grads;  ///< gradient of the mean loss (= -objective)
  bool finite = true;
  std::string error;
};

/// Noise for sample s of episode idx at a given step.
model::Noise episode_noise(const model::ModelConfig& mcfg, std::size_t T, std::uint64_t seed, std::uint64_t step,
                           std::uint64_t idx, std::size_t sample = 0);

/// noises[i] drives batch[i]; one entry per episode per sample, episode-major.
BatchGradient batch_gradient(const ParameterStore& params, const model::ModelConfig& mcfg,
                             const std::vector<const sim::Episode*>& batch, const std::vector<model::Noise>& noises,
                             const model::ElboOptions& opt);

struct StepResult {
  double objective = 0;
  double elbo = 0;
  double lr = 0;
  Temperatures tau;
  double grad_norm = 0;
  bool skipped = false;
  std::string error;
};

/// One optimizer step on the given episodes. indices feed the noise streams.
StepResult train_step(ParameterStore& params, OptimizerState& opt, const model::ModelConfig& mcfg,
                      const TrainConfig& cfg, const std::vector<const sim::Episode*>& batch,
                      const std::vector<std::size_t>& indices, std::size_t step);

// --- segmentation ---------------------------------------------------------------

struct SegmentOptions {
  inference::Engine engine = inference::Engine::MeanField;
  double tau = 0.5;
  double gumbel_tau = 0.5;
};

struct Segmentation {
  std::size_t T = 0, N = 0;
  inference::PosteriorMarginals marginals;
  std::vector<std::vector<int>> modes;  ///< [n][t]
  std::vector<double> confidence;       ///< [t][n] max_k gamma
  std::vector<double> w;                ///< [t][n][m], zero at t = 0
  std::vector<double> edges;            ///< [t][m][n] mass on interaction types
  double interaction_mass = 0;
};

/// Zero-noise, hard-edge decoding of one episode.
Segmentation segment_episode(const ParameterStore& params, const model::ModelConfig& mcfg, const sim::Episode& ep,
                             const SegmentOptions& opt = {});

struct EvalReport {
  metrics::Scores pooled;         ///< all objects and timesteps as one labeling
  metrics::Scores episode_mean;   ///< mean of per-episode scores
  metrics::Scores episode_std;
  double interaction_mass = 0;    ///< mean over episodes
  std::size_t episodes = 0;
  std::vector<metrics::Scores> per_episode;
};

EvalReport evaluate_segmentation(const ParameterStore& params, const model::ModelConfig& mcfg,
                                 const std::vector<sim::Episode>& episodes, const SegmentOptions& opt = {},
                                 std::size_t limit = 0);

/// Mean ELBO with fixed seeded noise and the final temperatures.
double validation_elbo(const ParameterStore& params, const model::ModelConfig& mcfg, const TrainConfig& cfg,
                       const std::vector<sim::Episode>& episodes);

// --- checkpoints and the loop ---------------------------------------------------

struct Checkpoint {
  model::ModelConfig model;
  ParameterStore params;
  nlohmann::json manifest;
};

/// "GRSSCKPT", u64 manifest length, JSON manifest, little-endian float64 blob.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const model::ModelConfig& mcfg, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
  ParameterStore best;
  ParameterStore final_params;
  std::size_t best_step = 0;
  double best_val_elbo = 0;
  std::size_t skipped_steps = 0;
  std::size_t steps = 0;
};

/// Writes train_log.csv, checkpoint.bin (best validation ELBO) and
/// checkpoint_final.bin under out_dir. Throws after too many consecutive bad steps.
TrainResult train_loop(const TrainConfig& cfg, const model::ModelConfig& mcfg, const std::vector<sim::Episode>& train,
                       const std::vector<sim::Episode>& val, const std::filesystem::path& out_dir);

}  // namespace grass::train

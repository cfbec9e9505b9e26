#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/autodiff.hpp"
#include "grass/inference.hpp"
#include "grass/params.hpp"
#include "grass/sim.hpp"

// Generative model over modes z, counts c, states x and interaction edges e,
// plus the amortized posteriors for x and e. Mode indices are 0-based; edge
// type 0 is "no interaction".

namespace grass::model {

using ad::Var;

enum class Variant {
  Grass,    ///< inferred sparse graph, mixture over incoming edges
  Mosds,    ///< monolithic transition network over all objects, no graph
  GrassGt,  ///< ground-truth collision events as hard edges
  Indep,    ///< self transitions only (independent objects)
};

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::Grass;
  std::size_t K = 3;
  std::size_t M = 20;
  std::size_t L = 1;
  std::size_t N = 2;
  std::size_t x_dim = 2;
  std::size_t y_dim = 2;

  std::size_t bigru_hidden = 4;
  std::size_t rnn_hidden = 16;
  std::size_t post_hidden = 8;
  std::size_t edge_hidden = 128;
  std::size_t emission_hidden = 8;
  std::size_t dyn_hidden = 8;
  std::size_t pair_hidden = 8;
  std::size_t pair_out = 8;
  std::size_t z_hidden = 4;
  std::size_t mosds_hidden = 16;

  double edge_prior = 0.9;  ///< prior mass on "no interaction"
  double y_center = 32.0;   ///< y is fed to the model as (y - center) / scale
  double y_scale = 16.0;
  /// Starting log-variance of the Gaussian heads (posterior, transitions, emission).
  double init_logvar = -4.0;
  /// Transition into t uses edges inferred from x_{t - edge_lag}.
  std::size_t edge_lag = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

void init_params(ParameterStore& store, const ModelConfig& cfg, Rng& rng);

// --- numeric building blocks ---------------------------------------------------

/// edges[m] is the weight vector over L+1 types of edge m -> n. Returns w over
/// sources; falls back to w[n] = 1 when no edge carries an interaction type.
std::vector<double> local_dynamic_factors(const std::vector<std::vector<double>>& edges, std::size_t n);

/// sum_{l >= 1} edge[l] * f_e^l([x_m, x_n]).
std::vector<double> pair_state_aggregate(const ParameterStore& store, const ModelConfig& cfg,
                                         const std::vector<double>& x_m, const std::vector<double>& x_n,
                                         const std::vector<double>& edge);

/// K×K row-stochastic softmax(f_z(pair_state) / tau).
Tensor mode_transition_matrix(const ParameterStore& store, const ModelConfig& cfg,
                              const std::vector<double>& pair_state, double tau = 1.0);

/// Per-object K×K transition. Identity when count > 1 (1-based count). Otherwise
/// row j is w[n] T[n][j] + sum_{m != n} w[m] sum_i belief[m][i] T[m][i].
Tensor mixture_mode_transition(const std::vector<Tensor>& pair_T, const std::vector<double>& w, std::size_t n,
                               std::size_t count, const std::vector<std::vector<double>>& belief);
/// Same with a joint assignment of the neighbors' previous modes.
Tensor mixture_mode_transition(const std::vector<Tensor>& pair_T, const std::vector<double>& w, std::size_t n,
                               std::size_t count, const std::vector<std::size_t>& modes);

/// K×M hazards h[k][c] = p(d = c+1) / P(d >= c+1) from duration logits.
Tensor hazard_from_durations(const Tensor& duration_logits);

/// Distribution over the next (1-based) count 1..M given the previous mode and count.
std::vector<double> count_transition(const Tensor& hazard, std::size_t z_prev, std::size_t c_prev);

/// (p0, (1-p0)/L, ...).
std::vector<double> edge_prior(std::size_t L, double p0);

struct InitialDistributions {
  std::vector<double> pi;      ///< over modes
  Tensor mean;                 ///< K×x_dim
  Tensor logvar;               ///< K×x_dim
  std::vector<double> count;   ///< over counts 1..M, mass 1 on count 1
};
InitialDistributions initial_distributions(const ParameterStore& store, const ModelConfig& cfg);

/// Gaussian over x_t given x_{t-1} and mode k: mean x + MLP_k(x), per-mode logvar.
struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> logvar;
  double log_density(const std::vector<double>& x) const;
};
DiagGaussian continuous_transition(const ParameterStore& store, const ModelConfig& cfg,
                                   const std::vector<double>& x_prev, std::size_t mode);
DiagGaussian emission(const ParameterStore& store, const ModelConfig& cfg, const std::vector<double>& x);

// --- per-episode autodiff graph -----------------------------------------------------

struct Noise {
  std::vector<Tensor> eps;  ///< per t: N×x_dim
  Tensor gumbel;            ///< (T*N*N)×(L+1)
};
Noise sample_noise(const ModelConfig& cfg, std::size_t T, Rng& rng);
Noise zero_noise(const ModelConfig& cfg, std::size_t T);

struct GraphOptions {
  double tau = 1.0;         ///< tempered softmax of mode transitions
  double gumbel_tau = 1.0;
  bool hard_edges = true;   ///< straight-through one-hot edges
  bool force_no_interaction = false;
  const std::vector<sim::Event>* events = nullptr;  ///< required by GrassGt
};

struct EpisodeGraph {
  std::size_t T = 0, N = 0;
  Var x;            ///< (T*N)×x_dim, row t*N + n
  Var x_mean, x_logvar;
  Var entropy;      ///< entropy of q(x | y), scalar
  Var emission;     ///< sum_t,n log p(y | x), scalar
  Var y_norm;       ///< (T*N)×y_dim
  Var edge_logits;  ///< (T*N*N)×(L+1), row t*N*N + m*N + n; invalid unless Grass
  Var edges;        ///< effective edges, same layout; invalid for Mosds
  Var log_init;     ///< 1×K
  Var obs;          ///< (T*N*K)×1: log p(x_t^n | x_{t-1}^n, z = k), initial Gaussian at t = 0
  std::vector<Var> dyn_means;  ///< per k: ((T-1)*N)×x_dim mean of x_t given x_{t-1}
  Var log_hazard;   ///< K×M
  Var log_survive;  ///< K×(M-1); invalid when M = 1
  Var pair_T;       ///< ((T-1)*N*N*K)×K, row (((t-1)*N + n)*N + m)*K + i
  Var w;            ///< ((T-1)*N)×N, row (t-1)*N + n, column source m
};

/// Episode observations as rows (t, n) of y.
Tensor episode_observations(const sim::Episode& ep);

EpisodeGraph build_episode_graph(const BoundParams& p, const ModelConfig& cfg, const sim::Episode& ep,
                                 const Noise& noise, const GraphOptions& opt);

struct MeanFieldResult {
  Var loglik;                  ///< sum over objects of the chain log-likelihoods
  std::vector<Var> beliefs;    ///< per t: N×K filtered mode beliefs
  std::vector<Var> log_beliefs;
};

/// Differentiable mean-field forward recursion over the graph.
MeanFieldResult mean_field_forward(const EpisodeGraph& g, const ModelConfig& cfg);

struct ElboOptions {
  GraphOptions graph;
  double weight_y = 1.0;  ///< consistency term log p(y | emit(x_hat))
  double weight_x = 1.0;  ///< consistency term log p(x | x_hat)
  /// Weight of sum_{t,n} mean_k log belief, which pulls beliefs toward uniform.
  double usage_weight = 0.0;
};

struct ElboTerms {
  Var objective;  ///< elbo + weighted consistency terms
  Var elbo;
  Var loglik;
  Var emission;
  Var entropy;
  Var edge_kl;
  Var cons_y;
  Var cons_x;
  Var usage;
};

ElboTerms elbo(const BoundParams& p, const ModelConfig& cfg, const sim::Episode& ep, const Noise& noise,
               const ElboOptions& opt);

/// Numeric tables of a graph for the inference engines.
inference::TransitionBundle make_bundle(const EpisodeGraph& g, const ModelConfig& cfg);

/// Mean over non-self pairs and all t of q(e != no interaction).
double mean_interaction_mass(const EpisodeGraph& g);

}  // namespace grass::model

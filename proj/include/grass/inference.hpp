#pragma once

#include <cstddef>
#include <vector>

// Exact inference of per-object modes z and counts c given pseudo-observations.
// All tables are log domain. Counts are stored 0-based: index c holds count c+1.

namespace grass::inference {

/// Numeric tensors of one episode, laid out flat.
struct TransitionBundle {
  std::size_t T = 0, N = 0, K = 0, M = 0;
  std::vector<double> log_obs;     ///< [t][n][k]  log p(x_t^n | ., z_t^n = k)
  std::vector<double> log_init;    ///< [n][k]     log pi
  std::vector<double> hazard;      ///< [k][c]     P(segment ends after count c+1); hazard[k][M-1] = 1
  std::vector<double> pair_trans;  ///< [t][n][m][i][k]  T_t^{(m,n)}: source m in mode i -> target n mode k
  std::vector<double> weights;     ///< [t][n][m]  w_t^{m->n}, sums to 1 over m

  void resize(std::size_t T, std::size_t N, std::size_t K, std::size_t M);
  double& obs(std::size_t t, std::size_t n, std::size_t k) { return log_obs[(t * N + n) * K + k]; }
  double obs(std::size_t t, std::size_t n, std::size_t k) const { return log_obs[(t * N + n) * K + k]; }
  double& trans(std::size_t t, std::size_t n, std::size_t m, std::size_t i, std::size_t k) {
    return pair_trans[(((t * N + n) * N + m) * K + i) * K + k];
  }
  double trans(std::size_t t, std::size_t n, std::size_t m, std::size_t i, std::size_t k) const {
    return pair_trans[(((t * N + n) * N + m) * K + i) * K + k];
  }
  double& weight(std::size_t t, std::size_t n, std::size_t m) { return weights[(t * N + n) * N + m]; }
  double weight(std::size_t t, std::size_t n, std::size_t m) const { return weights[(t * N + n) * N + m]; }

  /// Throws std::invalid_argument on non-stochastic rows, bad weights, T = 0.
  void validate(double tol = 1e-10) const;
};

enum class Engine {
  BruteForce,      ///< enumerates every valid trajectory (oracle)
  ExactJoint,      ///< dense joint (z, c) tuples over all objects
  ExactNeighbors,  ///< joint tuples, per-object sparse successor sets
  MeanField,       ///< per-object chains; neighbors enter through filtered beliefs
};

const char* engine_name(Engine e);
Engine parse_engine(const char* name);

struct PosteriorMarginals {
  std::size_t T = 0, N = 0, K = 0, M = 0;
  std::vector<double> gamma;        ///< [t][n][k][c]
  std::vector<double> xi;           ///< [t][n][j][k] mode pairs (t-1, t); zero at t = 0
  std::vector<double> xi_full;      ///< [t][n][(j,c)][(k,c')] when requested
  std::vector<double> joint_gamma;  ///< [t][s] joint engines only, when requested
  std::vector<double> object_loglik;  ///< mean-field only: per-object chain log-likelihood
  double loglik = 0;

  double g(std::size_t t, std::size_t n, std::size_t k, std::size_t c) const {
    return gamma[((t * N + n) * K + k) * M + c];
  }
  double mode_prob(std::size_t t, std::size_t n, std::size_t k) const;
  double x(std::size_t t, std::size_t n, std::size_t j, std::size_t k) const {
    return xi[((t * N + n) * K + j) * K + k];
  }
};

/// Forward/backward tables. Joint engines: [t][s] with s = sum_n idx_n (KM)^n,
/// idx_n = k*M + c. Mean-field: [t][n][k][c].
struct AlphaBeta {
  Engine engine = Engine::MeanField;
  std::size_t states = 0;             ///< per-t table width
  std::vector<double> log_alpha;
  std::vector<double> log_beta;
  std::vector<double> log_mixture;    ///< mean-field: [t][n][j][k] log of the reset transition
};

struct InferOptions {
  bool full_xi = false;
  bool joint_gamma = false;
  double max_sequences = 1e7;  ///< brute-force guard
};

AlphaBeta forward_pass(const TransitionBundle& b, Engine engine);
void backward_pass(const TransitionBundle& b, AlphaBeta& ab);
PosteriorMarginals posterior_marginals(const TransitionBundle& b, const AlphaBeta& ab, const InferOptions& opt = {});

PosteriorMarginals brute_force_oracle(const TransitionBundle& b, const InferOptions& opt = {});

/// forward + backward + marginals (or the oracle for Engine::BruteForce).
PosteriorMarginals infer(const TransitionBundle& b, Engine engine, const InferOptions& opt = {});

/// Per-object reset distribution for a joint previous assignment:
/// row k of sum_m w^{m->n} T^{(m,n)}[z^m, k].
void joint_mixture_row(const TransitionBundle& b, std::size_t t, std::size_t n, const std::vector<std::size_t>& modes,
                       double* out);

/// argmax over modes of sum_c gamma, ties toward the lower index. Result [n][t].
std::vector<int> decode_modes(const PosteriorMarginals& pm);

}  // namespace grass::inference

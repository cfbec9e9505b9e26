#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "grass/autodiff.hpp"
#include "grass/params.hpp"

// Network blocks. Every block batches over rows: a row is one object (or one
// ordered pair for the edge encoder), columns are features.

namespace grass::nn {

using ad::Var;

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct MlpSpec {
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t out = 0;
};

/// Registers prefix.w1 [in×hidden], .b1, .w2 [hidden×out], .b2.
void add_mlp(ParameterStore& store, const std::string& prefix, MlpSpec spec, Rng& rng);

/// affine -> ReLU -> affine.
struct Mlp {
  Var w1, b1, w2, b2;
  static Mlp bind(const BoundParams& p, const std::string& prefix);
  Var operator()(Var x) const;
};

/// Registers prefix.wi [in×3H], .wh [H×3H], .bi, .bh (gate order r, z, n).
void add_gru(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng);

struct Gru {
  Var wi, wh, bi, bh;
  std::size_t hidden = 0;
  static Gru bind(const BoundParams& p, const std::string& prefix);
  Var step(Var x, Var h) const;
  Var zero_state(std::size_t rows) const;
};

/// Forward and backward GRU over time; output per t is [h_fwd, h_bwd].
void add_bigru(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng);
std::vector<Var> bidirectional_encode(const BoundParams& p, const std::string& prefix,
                                      const std::vector<Var>& inputs);

struct Gaussian {
  Var mean;
  Var logvar;  ///< clamped to [kLogvarMin, kLogvarMax]
};

/// q(x_t | x_{1:t-1}, h_{1:t}): GRU over [h_t, x_{t-1}] followed by an MLP head
/// producing mean and log-variance. Steps must be taken in order t = 0, 1, ...
void add_causal_posterior(ParameterStore& store, const std::string& prefix, std::size_t h_dim,
                          std::size_t rnn_hidden, std::size_t mlp_hidden, std::size_t x_dim, Rng& rng);

class CausalPosterior {
 public:
  CausalPosterior(const BoundParams& p, const std::string& prefix, std::size_t rows, std::size_t x_dim);
  /// x_prev is ignored at t == 0 (a zero state is used).
  Gaussian step(std::size_t t, Var h_t, Var x_prev);
  std::size_t next_step() const { return t_; }

 private:
  Gru gru_;
  Mlp head_;
  Var state_;
  Var zero_x_;
  std::size_t x_dim_;
  std::size_t t_ = 0;
};

/// mean + exp(logvar/2) * eps.
Var reparameterize(const Gaussian& g, const Tensor& eps);

/// Two-round message passing over a fully connected graph with self loops.
struct EdgeEncoderSpec {
  std::size_t x_dim = 4;
  std::size_t hidden = 128;
  std::size_t edge_types = 2;  ///< L + 1
};
void add_edge_encoder(ParameterStore& store, const std::string& prefix, EdgeEncoderSpec spec, Rng& rng);

/// x holds `groups` consecutive blocks of n_objects rows (one block per
/// timestep). Output row g*N*N + m*N + n holds logits for edge m -> n.
Var edge_encoder(const BoundParams& p, const std::string& prefix, Var x, std::size_t n_objects);

/// Standard Gumbel(0,1) draws.
Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng);
/// softmax((logits + g)/tau); with hard=true the forward value is one-hot and
/// the backward pass flows through the soft sample.
Var gumbel_softmax(Var logits, const Tensor& gumbel, double tau, bool hard);

Var tempered_softmax(Var logits, double tau);

/// Sum over all entries of log N(x | mean, exp(logvar)). logvar may be a single
/// row broadcast over the rows of x.
Var gaussian_log_density(Var x, Var mean, Var logvar);
/// Per-row log density, r×1.
Var gaussian_log_density_rows(Var x, Var mean, Var logvar);
/// Sum of diagonal Gaussian entropies: sum 1/2 (1 + ln 2pi + logvar).
Var gaussian_entropy(Var logvar);

}  // namespace grass::nn

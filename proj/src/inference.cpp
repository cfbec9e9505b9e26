#include "grass/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

#include "grass/tensor.hpp"

namespace grass::inference {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

double safe_log(double p) { return p > 0 ? std::log(p) : kNegInf; }

double log_hazard(const TransitionBundle& b, std::size_t k, std::size_t c) { return safe_log(b.hazard[k * b.M + c]); }

double log_stay(const TransitionBundle& b, std::size_t k, std::size_t c) {
  if (c + 1 >= b.M) return kNegInf;
  return safe_log(1.0 - b.hazard[k * b.M + c]);
}

std::size_t joint_states(const TransitionBundle& b) {
  const double s = std::pow(static_cast<double>(b.K * b.M), static_cast<double>(b.N));
  if (s > 4e6) throw std::invalid_argument("joint state space too large: " + std::to_string(s) + " tuples");
  return static_cast<std::size_t>(s);
}

struct Tuple {
  std::vector<std::size_t> k, c;
};

Tuple decode_state(const TransitionBundle& b, std::size_t s) {
  Tuple out{std::vector<std::size_t>(b.N), std::vector<std::size_t>(b.N)};
  const std::size_t S1 = b.K * b.M;
  for (std::size_t n = 0; n < b.N; ++n) {
    const std::size_t idx = s % S1;
    s /= S1;
    out.k[n] = idx / b.M;
    out.c[n] = idx % b.M;
  }
  return out;
}

double joint_obs(const TransitionBundle& b, std::size_t t, const Tuple& tup) {
  double v = 0;
  for (std::size_t n = 0; n < b.N; ++n) v += b.obs(t, n, tup.k[n]);
  return v;
}

// Per-object successor options (index k*M + c, log factor) out of a joint tuple.
using Options = std::vector<std::vector<std::pair<std::size_t, double>>>;

Options successor_options(const TransitionBundle& b, std::size_t t, const Tuple& tup) {
  Options opts(b.N);
  std::vector<double> row(b.K);
  for (std::size_t n = 0; n < b.N; ++n) {
    const std::size_t k = tup.k[n], c = tup.c[n];
    const double ls = log_stay(b, k, c);
    if (ls != kNegInf) opts[n].emplace_back(k * b.M + c + 1, ls);
    const double lh = log_hazard(b, k, c);
    if (lh != kNegInf) {
      joint_mixture_row(b, t, n, tup.k, row.data());
      for (std::size_t kk = 0; kk < b.K; ++kk) {
        const double la = safe_log(row[kk]);
        if (la != kNegInf) opts[n].emplace_back(kk * b.M, lh + la);
      }
    }
  }
  return opts;
}

// Calls fn(s', log P(s -> s')) for every successor with nonzero probability.
void for_each_successor(const TransitionBundle& b, Engine engine, std::size_t t, std::size_t s, std::size_t S,
                        const std::function<void(std::size_t, double)>& fn) {
  const Tuple tup = decode_state(b, s);
  const Options opts = successor_options(b, t, tup);
  const std::size_t S1 = b.K * b.M;
  if (engine == Engine::ExactJoint) {
    // Dense sweep: every tuple, factor looked up per object.
    for (std::size_t sp = 0; sp < S; ++sp) {
      double lp = 0;
      std::size_t rest = sp;
      for (std::size_t n = 0; n < b.N && lp != kNegInf; ++n) {
        const std::size_t idx = rest % S1;
        rest /= S1;
        double f = kNegInf;
        for (const auto& [i, v] : opts[n])
          if (i == idx) f = v;
        lp += f;
      }
      if (lp != kNegInf) fn(sp, lp);
    }
    return;
  }
  // Sparse: cartesian product of per-object option lists.
  std::vector<std::size_t> pos(b.N, 0);
  for (const auto& o : opts)
    if (o.empty()) return;
  while (true) {
    std::size_t sp = 0, mult = 1;
    double lp = 0;
    for (std::size_t n = 0; n < b.N; ++n) {
      sp += opts[n][pos[n]].first * mult;
      mult *= S1;
      lp += opts[n][pos[n]].second;
    }
    fn(sp, lp);
    std::size_t n = 0;
    while (n < b.N && ++pos[n] == opts[n].size()) pos[n++] = 0;
    if (n == b.N) break;
  }
}

AlphaBeta joint_forward(const TransitionBundle& b, Engine engine) {
  const std::size_t S = joint_states(b), T = b.T;
  AlphaBeta ab;
  ab.engine = engine;
  ab.states = S;
  ab.log_alpha.assign(T * S, kNegInf);
  for (std::size_t s = 0; s < S; ++s) {
    const Tuple tup = decode_state(b, s);
    bool all_one = true;
    double v = 0;
    for (std::size_t n = 0; n < b.N; ++n) {
      all_one &= tup.c[n] == 0;
      v += b.log_init[n * b.K + tup.k[n]] + b.obs(0, n, tup.k[n]);
    }
    if (all_one) ab.log_alpha[s] = v;
  }
  for (std::size_t t = 1; t < T; ++t) {
    const double* prev = &ab.log_alpha[(t - 1) * S];
    double* cur = &ab.log_alpha[t * S];
    for (std::size_t s = 0; s < S; ++s) {
      if (prev[s] == kNegInf) continue;
      for_each_successor(b, engine, t, s, S, [&](std::size_t sp, double lp) { cur[sp] = log_add(cur[sp], prev[s] + lp); });
    }
    for (std::size_t sp = 0; sp < S; ++sp)
      if (cur[sp] != kNegInf) cur[sp] += joint_obs(b, t, decode_state(b, sp));
  }
  return ab;
}

void joint_backward(const TransitionBundle& b, AlphaBeta& ab) {
  const std::size_t S = ab.states, T = b.T;
  ab.log_beta.assign(T * S, kNegInf);
  std::fill(ab.log_beta.begin() + (T - 1) * S, ab.log_beta.end(), 0.0);
  std::vector<double> obs(S);
  for (std::size_t t = T - 1; t >= 1; --t) {
    for (std::size_t sp = 0; sp < S; ++sp) obs[sp] = joint_obs(b, t, decode_state(b, sp));
    const double* next = &ab.log_beta[t * S];
    double* cur = &ab.log_beta[(t - 1) * S];
    for (std::size_t s = 0; s < S; ++s) {
      for_each_successor(b, ab.engine, t, s, S, [&](std::size_t sp, double lp) {
        if (next[sp] != kNegInf) cur[s] = log_add(cur[s], lp + obs[sp] + next[sp]);
      });
    }
  }
}

PosteriorMarginals make_empty(const TransitionBundle& b, const InferOptions& opt) {
  PosteriorMarginals pm;
  pm.T = b.T;
  pm.N = b.N;
  pm.K = b.K;
  pm.M = b.M;
  pm.gamma.assign(b.T * b.N * b.K * b.M, 0.0);
  pm.xi.assign(b.T * b.N * b.K * b.K, 0.0);
  if (opt.full_xi) pm.xi_full.assign(b.T * b.N * b.K * b.M * b.K * b.M, 0.0);
  return pm;
}

double lse(const double* v, std::size_t n) {
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
  if (mx == kNegInf) return kNegInf;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - mx);
  return mx + std::log(s);
}

PosteriorMarginals joint_marginals(const TransitionBundle& b, const AlphaBeta& ab, const InferOptions& opt) {
  const std::size_t S = ab.states, T = b.T, K = b.K, M = b.M, KM = K * M;
  PosteriorMarginals pm = make_empty(b, opt);
  pm.loglik = lse(&ab.log_alpha[(T - 1) * S], S);
  if (!std::isfinite(pm.loglik)) throw NumericError("forward pass collapsed: every joint state has zero probability");
  if (opt.joint_gamma) pm.joint_gamma.assign(T * S, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const double la = ab.log_alpha[t * S + s];
      if (la == kNegInf) continue;
      const double p = std::exp(la + ab.log_beta[t * S + s] - pm.loglik);
      if (opt.joint_gamma) pm.joint_gamma[t * S + s] = p;
      const Tuple tup = decode_state(b, s);
      for (std::size_t n = 0; n < b.N; ++n) pm.gamma[((t * b.N + n) * K + tup.k[n]) * M + tup.c[n]] += p;
    }
  for (std::size_t t = 1; t < T; ++t) {
    std::vector<double> obs(S);
    for (std::size_t sp = 0; sp < S; ++sp) obs[sp] = joint_obs(b, t, decode_state(b, sp));
    for (std::size_t s = 0; s < S; ++s) {
      const double la = ab.log_alpha[(t - 1) * S + s];
      if (la == kNegInf) continue;
      const Tuple from = decode_state(b, s);
      for_each_successor(b, ab.engine, t, s, S, [&](std::size_t sp, double lp) {
        const double lb = ab.log_beta[t * S + sp];
        if (lb == kNegInf) return;
        const double p = std::exp(la + lp + obs[sp] + lb - pm.loglik);
        const Tuple to = decode_state(b, sp);
        for (std::size_t n = 0; n < b.N; ++n) {
          pm.xi[((t * b.N + n) * K + from.k[n]) * K + to.k[n]] += p;
          if (opt.full_xi) {
            const std::size_t i = from.k[n] * M + from.c[n], j = to.k[n] * M + to.c[n];
            pm.xi_full[((t * b.N + n) * KM + i) * KM + j] += p;
          }
        }
      });
    }
  }
  return pm;
}

// --- mean-field --------------------------------------------------------------------

AlphaBeta mean_field_forward(const TransitionBundle& b) {
  const std::size_t T = b.T, N = b.N, K = b.K, M = b.M, KM = K * M;
  AlphaBeta ab;
  ab.engine = Engine::MeanField;
  ab.states = N * KM;
  ab.log_alpha.assign(T * N * KM, kNegInf);
  ab.log_mixture.assign(T * N * K * K, 0.0);
  auto la = [&](std::size_t t, std::size_t n, std::size_t k, std::size_t c) -> double& {
    return ab.log_alpha[((t * N + n) * K + k) * M + c];
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) la(0, n, k, 0) = b.log_init[n * K + k] + b.obs(0, n, k);

  std::vector<double> belief(N * K), reset(K), terms(K);
  for (std::size_t t = 1; t < T; ++t) {
    // Filtered mode beliefs of every object at t-1.
    for (std::size_t m = 0; m < N; ++m) {
      double* bm = &belief[m * K];
      for (std::size_t k = 0; k < K; ++k) bm[k] = lse(&la(t - 1, m, k, 0), M);
      const double z = lse(bm, K);
      for (std::size_t k = 0; k < K; ++k) bm[k] = std::exp(bm[k] - z);
    }
    for (std::size_t n = 0; n < N; ++n) {
      double* logA = &ab.log_mixture[(t * N + n) * K * K];
      // Neighbor part is the same for every previous mode j of n.
      std::vector<double> shared(K, 0.0);
      for (std::size_t m = 0; m < N; ++m) {
        if (m == n) continue;
        const double w = b.weight(t, n, m);
        for (std::size_t k = 0; k < K; ++k) {
          double v = 0;
          for (std::size_t i = 0; i < K; ++i) v += belief[m * K + i] * b.trans(t, n, m, i, k);
          shared[k] += w * v;
        }
      }
      const double wnn = b.weight(t, n, n);
      for (std::size_t j = 0; j < K; ++j)
        for (std::size_t k = 0; k < K; ++k) logA[j * K + k] = safe_log(wnn * b.trans(t, n, n, j, k) + shared[k]);

      for (std::size_t j = 0; j < K; ++j) {
        double r = kNegInf;
        for (std::size_t c = 0; c < M; ++c) r = log_add(r, la(t - 1, n, j, c) + log_hazard(b, j, c));
        reset[j] = r;
      }
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < K; ++j) terms[j] = reset[j] + logA[j * K + k];
        const double o = b.obs(t, n, k);
        la(t, n, k, 0) = lse(terms.data(), K) + o;
        for (std::size_t c = 0; c + 1 < M; ++c) la(t, n, k, c + 1) = la(t - 1, n, k, c) + log_stay(b, k, c) + o;
      }
    }
  }
  return ab;
}

void mean_field_backward(const TransitionBundle& b, AlphaBeta& ab) {
  const std::size_t T = b.T, N = b.N, K = b.K, M = b.M;
  ab.log_beta.assign(T * N * K * M, kNegInf);
  auto lb = [&](std::size_t t, std::size_t n, std::size_t k, std::size_t c) -> double& {
    return ab.log_beta[((t * N + n) * K + k) * M + c];
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < M; ++c) lb(T - 1, n, k, c) = 0.0;
  std::vector<double> terms(K);
  for (std::size_t t = T - 1; t >= 1; --t)
    for (std::size_t n = 0; n < N; ++n) {
      const double* logA = &ab.log_mixture[(t * N + n) * K * K];
      for (std::size_t j = 0; j < K; ++j) {
        for (std::size_t k = 0; k < K; ++k) terms[k] = logA[j * K + k] + b.obs(t, n, k) + lb(t, n, k, 0);
        const double reset = lse(terms.data(), K);
        for (std::size_t c = 0; c < M; ++c) {
          double v = log_hazard(b, j, c) + reset;
          if (c + 1 < M) v = log_add(v, log_stay(b, j, c) + b.obs(t, n, j) + lb(t, n, j, c + 1));
          lb(t - 1, n, j, c) = v;
        }
      }
    }
}

PosteriorMarginals mean_field_marginals(const TransitionBundle& b, const AlphaBeta& ab, const InferOptions& opt) {
  const std::size_t T = b.T, N = b.N, K = b.K, M = b.M, KM = K * M;
  PosteriorMarginals pm = make_empty(b, opt);
  pm.object_loglik.assign(N, 0.0);
  auto la = [&](std::size_t t, std::size_t n, std::size_t k, std::size_t c) {
    return ab.log_alpha[((t * N + n) * K + k) * M + c];
  };
  auto lb = [&](std::size_t t, std::size_t n, std::size_t k, std::size_t c) {
    return ab.log_beta[((t * N + n) * K + k) * M + c];
  };
  for (std::size_t n = 0; n < N; ++n) {
    const double ll = lse(&ab.log_alpha[((T - 1) * N + n) * KM], KM);
    if (!std::isfinite(ll)) throw NumericError("forward pass collapsed for object " + std::to_string(n));
    pm.object_loglik[n] = ll;
    pm.loglik += ll;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < M; ++c) {
          const double a = la(t, n, k, c);
          pm.gamma[((t * N + n) * K + k) * M + c] = a == kNegInf ? 0.0 : std::exp(a + lb(t, n, k, c) - ll);
        }
    for (std::size_t t = 1; t < T; ++t) {
      const double* logA = &ab.log_mixture[(t * N + n) * K * K];
      for (std::size_t j = 0; j < K; ++j)
        for (std::size_t c = 0; c < M; ++c) {
          const double a = la(t - 1, n, j, c);
          if (a == kNegInf) continue;
          if (c + 1 < M) {
            const double p = std::exp(a + log_stay(b, j, c) + b.obs(t, n, j) + lb(t, n, j, c + 1) - ll);
            pm.xi[((t * N + n) * K + j) * K + j] += p;
            if (opt.full_xi) pm.xi_full[((t * N + n) * KM + j * M + c) * KM + j * M + c + 1] += p;
          }
          const double lh = log_hazard(b, j, c);
          if (lh == kNegInf) continue;
          for (std::size_t k = 0; k < K; ++k) {
            const double p = std::exp(a + lh + logA[j * K + k] + b.obs(t, n, k) + lb(t, n, k, 0) - ll);
            pm.xi[((t * N + n) * K + j) * K + k] += p;
            if (opt.full_xi) pm.xi_full[((t * N + n) * KM + j * M + c) * KM + k * M] += p;
          }
        }
    }
  }
  return pm;
}

}  // namespace

void TransitionBundle::resize(std::size_t T_, std::size_t N_, std::size_t K_, std::size_t M_) {
  T = T_;
  N = N_;
  K = K_;
  M = M_;
  log_obs.assign(T * N * K, 0.0);
  log_init.assign(N * K, -std::log(static_cast<double>(K)));
  hazard.assign(K * M, 0.0);
  for (std::size_t k = 0; k < K; ++k) hazard[k * M + M - 1] = 1.0;
  pair_trans.assign(T * N * N * K * K, 1.0 / static_cast<double>(K));
  weights.assign(T * N * N, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n) weights[(t * N + n) * N + n] = 1.0;
}

void TransitionBundle::validate(double tol) const {
  if (T == 0) throw std::invalid_argument("bundle: T must be >= 1");
  if (N == 0 || K == 0 || M == 0) throw std::invalid_argument("bundle: N, K, M must be >= 1");
  if (log_obs.size() != T * N * K || log_init.size() != N * K || hazard.size() != K * M ||
      pair_trans.size() != T * N * N * K * K || weights.size() != T * N * N) {
    throw std::invalid_argument("bundle: table sizes do not match (T, N, K, M)");
  }
  for (double v : log_obs)
    if (!std::isfinite(v)) throw std::invalid_argument("bundle: non-finite emission log-likelihood");
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(log_init[n * K + k]);
    if (std::abs(s - 1.0) > tol) throw std::invalid_argument("bundle: initial distribution does not sum to 1");
  }
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t c = 0; c < M; ++c) {
      const double h = hazard[k * M + c];
      if (!(h >= 0.0 && h <= 1.0)) throw std::invalid_argument("bundle: hazard outside [0, 1]");
    }
    if (std::abs(hazard[k * M + M - 1] - 1.0) > tol) throw std::invalid_argument("bundle: hazard at the count cap must be 1");
  }
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n) {
      double ws = 0;
      for (std::size_t m = 0; m < N; ++m) {
        const double w = weight(t, n, m);
        if (!(w >= 0)) throw std::invalid_argument("bundle: negative interaction weight");
        ws += w;
        for (std::size_t i = 0; i < K; ++i) {
          double rs = 0;
          for (std::size_t k = 0; k < K; ++k) {
            const double p = trans(t, n, m, i, k);
            if (!(p >= 0)) throw std::invalid_argument("bundle: negative transition probability");
            rs += p;
          }
          if (std::abs(rs - 1.0) > tol) throw std::invalid_argument("bundle: transition row does not sum to 1");
        }
      }
      if (std::abs(ws - 1.0) > tol) throw std::invalid_argument("bundle: interaction weights do not sum to 1");
    }
}

const char* engine_name(Engine e) {
  switch (e) {
    case Engine::BruteForce: return "brute-force";
    case Engine::ExactJoint: return "exact-joint";
    case Engine::ExactNeighbors: return "exact-neighbors";
    case Engine::MeanField: return "mean-field";
  }
  return "?";
}

Engine parse_engine(const char* name) {
  for (Engine e : {Engine::BruteForce, Engine::ExactJoint, Engine::ExactNeighbors, Engine::MeanField})
    if (std::strcmp(engine_name(e), name) == 0) return e;
  throw std::invalid_argument(std::string("unknown inference engine '") + name + "'");
}

double PosteriorMarginals::mode_prob(std::size_t t, std::size_t n, std::size_t k) const {
  double s = 0;
  for (std::size_t c = 0; c < M; ++c) s += g(t, n, k, c);
  return s;
}

void joint_mixture_row(const TransitionBundle& b, std::size_t t, std::size_t n, const std::vector<std::size_t>& modes,
                       double* out) {
  for (std::size_t k = 0; k < b.K; ++k) out[k] = 0.0;
  for (std::size_t m = 0; m < b.N; ++m) {
    const double w = b.weight(t, n, m);
    if (w == 0.0) continue;
    for (std::size_t k = 0; k < b.K; ++k) out[k] += w * b.trans(t, n, m, modes[m], k);
  }
}

AlphaBeta forward_pass(const TransitionBundle& b, Engine engine) {
  b.validate();
  switch (engine) {
    case Engine::MeanField: return mean_field_forward(b);
    case Engine::ExactJoint:
    case Engine::ExactNeighbors: return joint_forward(b, engine);
    case Engine::BruteForce: break;
  }
  throw std::invalid_argument("forward_pass: the brute-force oracle has no alpha tables");
}

void backward_pass(const TransitionBundle& b, AlphaBeta& ab) {
  if (ab.engine == Engine::MeanField)
    mean_field_backward(b, ab);
  else
    joint_backward(b, ab);
}

PosteriorMarginals posterior_marginals(const TransitionBundle& b, const AlphaBeta& ab, const InferOptions& opt) {
  if (ab.log_beta.size() != ab.log_alpha.size()) throw std::invalid_argument("posterior_marginals: run backward_pass first");
  return ab.engine == Engine::MeanField ? mean_field_marginals(b, ab, opt) : joint_marginals(b, ab, opt);
}

PosteriorMarginals infer(const TransitionBundle& b, Engine engine, const InferOptions& opt) {
  if (engine == Engine::BruteForce) return brute_force_oracle(b, opt);
  AlphaBeta ab = forward_pass(b, engine);
  backward_pass(b, ab);
  return posterior_marginals(b, ab, opt);
}

// --- brute force -------------------------------------------------------------------

PosteriorMarginals brute_force_oracle(const TransitionBundle& b, const InferOptions& opt) {
  b.validate();
  const std::size_t T = b.T, N = b.N, K = b.K, M = b.M, KM = K * M;
  const double Sd = std::pow(static_cast<double>(KM), static_cast<double>(N));
  if (Sd > 1e6) throw std::invalid_argument("brute force: instance too large");
  const std::size_t S = static_cast<std::size_t>(Sd);

  std::vector<Tuple> tuples(S);
  for (std::size_t s = 0; s < S; ++s) tuples[s] = decode_state(b, s);

  // Joint transition log-probability written out term by term.
  auto log_trans = [&](std::size_t t, const Tuple& a, const Tuple& z) {
    double lp = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const double h = b.hazard[a.k[n] * M + a.c[n]];
      if (z.c[n] == a.c[n] + 1 && z.k[n] == a.k[n]) {
        lp += safe_log(1.0 - h);
      } else if (z.c[n] == 0) {
        double mix = 0;
        for (std::size_t m = 0; m < N; ++m) mix += b.weight(t, n, m) * b.trans(t, n, m, a.k[m], z.k[n]);
        lp += safe_log(h) + safe_log(mix);
      } else {
        return kNegInf;
      }
      if (lp == kNegInf) return kNegInf;
    }
    return lp;
  };
  auto log_start = [&](const Tuple& a) {
    double lp = 0;
    for (std::size_t n = 0; n < N; ++n) {
      if (a.c[n] != 0) return kNegInf;
      lp += b.log_init[n * K + a.k[n]] + b.obs(0, n, a.k[n]);
    }
    return lp;
  };
  auto obs = [&](std::size_t t, const Tuple& a) { return joint_obs(b, t, a); };

  // Count trajectories with nonzero probability before enumerating them.
  std::vector<double> count(S, 0.0), next(S);
  for (std::size_t s = 0; s < S; ++s) count[s] = log_start(tuples[s]) == kNegInf ? 0.0 : 1.0;
  for (std::size_t t = 1; t < T; ++t) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      if (count[s] == 0) continue;
      for (std::size_t sp = 0; sp < S; ++sp)
        if (log_trans(t, tuples[s], tuples[sp]) != kNegInf) next[sp] += count[s];
    }
    count.swap(next);
  }
  double total = 0;
  for (double c : count) total += c;
  if (total > opt.max_sequences) {
    throw std::invalid_argument("brute force: " + std::to_string(total) + " sequences exceed the guard");
  }

  std::vector<std::size_t> path(T);
  std::vector<double> leaf_logp;
  std::vector<std::vector<std::size_t>> leaf_paths;
  std::function<void(std::size_t, double)> dfs = [&](std::size_t t, double lp) {
    if (t + 1 == T) {
      leaf_logp.push_back(lp);
      leaf_paths.push_back(path);
      return;
    }
    for (std::size_t sp = 0; sp < S; ++sp) {
      const double tr = log_trans(t + 1, tuples[path[t]], tuples[sp]);
      if (tr == kNegInf) continue;
      path[t + 1] = sp;
      dfs(t + 1, lp + tr + obs(t + 1, tuples[sp]));
    }
  };
  for (std::size_t s = 0; s < S; ++s) {
    const double lp = log_start(tuples[s]);
    if (lp == kNegInf) continue;
    path[0] = s;
    dfs(0, lp);
  }

  PosteriorMarginals pm = make_empty(b, opt);
  if (opt.joint_gamma) pm.joint_gamma.assign(T * S, 0.0);
  // Two passes: the maximum first, then scaled sums.
  double mx = kNegInf;
  for (double v : leaf_logp) mx = std::max(mx, v);
  if (mx == kNegInf) throw NumericError("brute force: every trajectory has zero probability");
  double z = 0;
  for (double v : leaf_logp) z += std::exp(v - mx);
  pm.loglik = mx + std::log(z);
  for (std::size_t i = 0; i < leaf_logp.size(); ++i) {
    const double p = std::exp(leaf_logp[i] - pm.loglik);
    const auto& pth = leaf_paths[i];
    for (std::size_t t = 0; t < T; ++t) {
      const Tuple& a = tuples[pth[t]];
      if (opt.joint_gamma) pm.joint_gamma[t * S + pth[t]] += p;
      for (std::size_t n = 0; n < N; ++n) {
        pm.gamma[((t * N + n) * K + a.k[n]) * M + a.c[n]] += p;
        if (t == 0) continue;
        const Tuple& prev = tuples[pth[t - 1]];
        pm.xi[((t * N + n) * K + prev.k[n]) * K + a.k[n]] += p;
        if (opt.full_xi)
          pm.xi_full[((t * N + n) * KM + prev.k[n] * M + prev.c[n]) * KM + a.k[n] * M + a.c[n]] += p;
      }
    }
  }
  return pm;
}

std::vector<int> decode_modes(const PosteriorMarginals& pm) {
  std::vector<int> out(pm.N * pm.T, 0);
  for (std::size_t n = 0; n < pm.N; ++n)
    for (std::size_t t = 0; t < pm.T; ++t) {
      std::size_t best = 0;
      double bv = pm.mode_prob(t, n, 0);
      for (std::size_t k = 1; k < pm.K; ++k) {
        const double v = pm.mode_prob(t, n, k);
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[n * pm.T + t] = static_cast<int>(best);
    }
  return out;
}

}  // namespace grass::inference

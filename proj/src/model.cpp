#include "grass/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include "grass/nn.hpp"

namespace grass::model {

namespace {

// Finite stand-in for log 0 inside differentiable recursions.
constexpr double kLogZero = -1e30;
constexpr double kLog2Pi = 1.8378770664093453;

std::string fe_name(std::size_t l) { return "fe" + std::to_string(l); }
std::string dyn_name(std::size_t k) { return "dyn" + std::to_string(k); }

Var clamp_logvar(Var v) { return ad::clamp(v, nn::kLogvarMin, nn::kLogvarMax); }

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  std::vector<double> out(t.cols());
  for (std::size_t c = 0; c < t.cols(); ++c) out[c] = t(r, c);
  return out;
}

std::vector<double> run_mlp(const ParameterStore& store, const std::string& prefix, const std::vector<double>& in) {
  ad::Tape tape(false);
  BoundParams p(tape, store);
  Var out = nn::Mlp::bind(p, prefix)(tape.constant(Tensor::row(in)));
  return out.value().storage();
}

double clamp_lv(double v) { return std::clamp(v, nn::kLogvarMin, nn::kLogvarMax); }

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Grass: return "GRASS";
    case Variant::Mosds: return "MOSDS";
    case Variant::GrassGt: return "GRASS-GT";
    case Variant::Indep: return "INDEP";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  std::string up = name;
  std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  std::replace(up.begin(), up.end(), '_', '-');
  for (Variant v : {Variant::Grass, Variant::Mosds, Variant::GrassGt, Variant::Indep})
    if (variant_name(v) == up) return v;
  throw std::invalid_argument("unknown model variant '" + name + "' (GRASS, MOSDS, GRASS-GT, INDEP)");
}

void ModelConfig::validate() const {
  if (K < 1 || M < 1 || L < 1 || N < 1) throw std::invalid_argument("model: K, M, L, N must be >= 1");
  if (x_dim < 1 || y_dim < 1) throw std::invalid_argument("model: state dims must be >= 1");
  for (std::size_t h : {bigru_hidden, rnn_hidden, post_hidden, edge_hidden, emission_hidden, dyn_hidden, pair_hidden,
                        pair_out, z_hidden, mosds_hidden})
    if (h == 0) throw std::invalid_argument("model: hidden sizes must be positive");
  if (!(edge_prior > 0.0 && edge_prior < 1.0)) throw std::invalid_argument("model: edge_prior must lie in (0, 1)");
  if (!(init_logvar >= nn::kLogvarMin && init_logvar <= nn::kLogvarMax))
    throw std::invalid_argument("model: init_logvar outside the clamp range");
  if (!(y_scale > 0.0)) throw std::invalid_argument("model: y_scale must be positive");
  if (edge_lag > 1) throw std::invalid_argument("model: edge_lag must be 0 or 1");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"K", K},
          {"M", M},
          {"L", L},
          {"N", N},
          {"x_dim", x_dim},
          {"y_dim", y_dim},
          {"bigru_hidden", bigru_hidden},
          {"rnn_hidden", rnn_hidden},
          {"post_hidden", post_hidden},
          {"edge_hidden", edge_hidden},
          {"emission_hidden", emission_hidden},
          {"dyn_hidden", dyn_hidden},
          {"pair_hidden", pair_hidden},
          {"pair_out", pair_out},
          {"z_hidden", z_hidden},
          {"mosds_hidden", mosds_hidden},
          {"edge_prior", edge_prior},
          {"y_center", y_center},
          {"y_scale", y_scale},
          {"init_logvar", init_logvar},
          {"edge_lag", edge_lag}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("K", c.K);
  get("M", c.M);
  get("L", c.L);
  get("N", c.N);
  get("x_dim", c.x_dim);
  get("y_dim", c.y_dim);
  get("bigru_hidden", c.bigru_hidden);
  get("rnn_hidden", c.rnn_hidden);
  get("post_hidden", c.post_hidden);
  get("edge_hidden", c.edge_hidden);
  get("emission_hidden", c.emission_hidden);
  get("dyn_hidden", c.dyn_hidden);
  get("pair_hidden", c.pair_hidden);
  get("pair_out", c.pair_out);
  get("z_hidden", c.z_hidden);
  get("mosds_hidden", c.mosds_hidden);
  get("edge_prior", c.edge_prior);
  get("y_center", c.y_center);
  get("y_scale", c.y_scale);
  get("init_logvar", c.init_logvar);
  get("edge_lag", c.edge_lag);
  c.validate();
  return c;
}

void init_params(ParameterStore& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t K = cfg.K, D = cfg.x_dim;
  nn::add_bigru(store, "post.bigru", cfg.y_dim, cfg.bigru_hidden, rng);
  nn::add_causal_posterior(store, "post.causal", 2 * cfg.bigru_hidden, cfg.rnn_hidden, cfg.post_hidden, D, rng);
  Tensor& head_bias = store.get("post.causal.head.b2");
  for (std::size_t d = 0; d < D; ++d) head_bias[D + d] += cfg.init_logvar;
  nn::add_mlp(store, "emit", {D, cfg.emission_hidden, cfg.y_dim}, rng);
  store.add("emit.logvar", Tensor({1, cfg.y_dim}, cfg.init_logvar));
  for (std::size_t k = 0; k < K; ++k) nn::add_mlp(store, dyn_name(k), {D, cfg.dyn_hidden, D}, rng);
  store.add("dyn.logvar", Tensor({K, D}, cfg.init_logvar));
  store.add("init.logits", Tensor({1, K}, 0.0));
  store.add("init.mean", uniform_init({K, D}, 1, rng));
  store.add("init.logvar", Tensor({K, D}, cfg.init_logvar));
  store.add("dur.logits", Tensor({K, cfg.M}, 0.0));
  // Variant-specific blocks last so shared parameters get identical draws.
  if (cfg.variant == Variant::Mosds) {
    const std::size_t NK = cfg.N * K;
    nn::add_mlp(store, "mosds", {cfg.N * D, cfg.mosds_hidden, NK * NK}, rng);
    return;
  }
  for (std::size_t l = 1; l <= cfg.L; ++l) nn::add_mlp(store, fe_name(l), {2 * D, cfg.pair_hidden, cfg.pair_out}, rng);
  nn::add_mlp(store, "fz", {cfg.pair_out, cfg.z_hidden, K * K}, rng);
  if (cfg.variant == Variant::Grass) nn::add_edge_encoder(store, "enc", {D, cfg.edge_hidden, cfg.L + 1}, rng);
}

// --- numeric building blocks ---------------------------------------------------

std::vector<double> local_dynamic_factors(const std::vector<std::vector<double>>& edges, std::size_t n) {
  if (n >= edges.size()) throw std::invalid_argument("local_dynamic_factors: target out of range");
  std::vector<double> w(edges.size(), 0.0);
  double total = 0;
  for (std::size_t m = 0; m < edges.size(); ++m) {
    for (std::size_t l = 1; l < edges[m].size(); ++l) w[m] += edges[m][l];
    total += w[m];
  }
  if (total <= 0.0) {
    std::fill(w.begin(), w.end(), 0.0);
    w[n] = 1.0;
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

std::vector<double> pair_state_aggregate(const ParameterStore& store, const ModelConfig& cfg,
                                         const std::vector<double>& x_m, const std::vector<double>& x_n,
                                         const std::vector<double>& edge) {
  if (edge.size() != cfg.L + 1) throw std::invalid_argument("pair_state_aggregate: edge must have L+1 entries");
  if (x_m.size() != cfg.x_dim || x_n.size() != cfg.x_dim) throw ShapeError("pair_state_aggregate: state size");
  std::vector<double> in(x_m);
  in.insert(in.end(), x_n.begin(), x_n.end());
  std::vector<double> out(cfg.pair_out, 0.0);
  for (std::size_t l = 1; l <= cfg.L; ++l) {
    if (edge[l] == 0.0) continue;
    const auto f = run_mlp(store, fe_name(l), in);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += edge[l] * f[i];
  }
  return out;
}

Tensor mode_transition_matrix(const ParameterStore& store, const ModelConfig& cfg,
                              const std::vector<double>& pair_state, double tau) {
  ad::Tape tape(false);
  BoundParams p(tape, store);
  Var logits = nn::Mlp::bind(p, "fz")(tape.constant(Tensor::row(pair_state)));
  return ad::softmax_rows(ad::reshape(logits, cfg.K, cfg.K), tau).value();
}

namespace {

Tensor mixture_impl(const std::vector<Tensor>& pair_T, const std::vector<double>& w, std::size_t n, std::size_t count,
                    const std::vector<std::vector<double>>& belief) {
  const std::size_t N = pair_T.size();
  if (N == 0 || w.size() != N || n >= N) throw std::invalid_argument("mixture_mode_transition: inconsistent sizes");
  double ws = 0;
  for (double v : w) {
    if (!(v >= 0)) throw std::invalid_argument("mixture_mode_transition: negative weight");
    ws += v;
  }
  if (std::abs(ws - 1.0) > 1e-10) throw std::invalid_argument("mixture_mode_transition: w not normalized");
  if (count == 0) throw std::invalid_argument("mixture_mode_transition: counts start at 1");
  const std::size_t K = pair_T[n].rows();
  if (count > 1) return Tensor::identity(K);
  std::vector<double> shared(K, 0.0);
  for (std::size_t m = 0; m < N; ++m) {
    if (m == n || w[m] == 0.0) continue;
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t k = 0; k < K; ++k) shared[k] += w[m] * belief[m][i] * pair_T[m](i, k);
  }
  Tensor out({K, K});
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t k = 0; k < K; ++k) out(j, k) = w[n] * pair_T[n](j, k) + shared[k];
  return out;
}

}  // namespace

Tensor mixture_mode_transition(const std::vector<Tensor>& pair_T, const std::vector<double>& w, std::size_t n,
                               std::size_t count, const std::vector<std::vector<double>>& belief) {
  if (belief.size() != pair_T.size()) throw std::invalid_argument("mixture_mode_transition: one belief per source");
  return mixture_impl(pair_T, w, n, count, belief);
}

Tensor mixture_mode_transition(const std::vector<Tensor>& pair_T, const std::vector<double>& w, std::size_t n,
                               std::size_t count, const std::vector<std::size_t>& modes) {
  if (modes.size() != pair_T.size()) throw std::invalid_argument("mixture_mode_transition: one mode per source");
  std::vector<std::vector<double>> belief(modes.size());
  for (std::size_t m = 0; m < modes.size(); ++m) {
    const std::size_t K = pair_T[m].rows();
    if (modes[m] >= K) throw std::invalid_argument("mixture_mode_transition: mode out of range");
    belief[m].assign(K, 0.0);
    belief[m][modes[m]] = 1.0;
  }
  return mixture_impl(pair_T, w, n, count, belief);
}

Tensor hazard_from_durations(const Tensor& logits) {
  const std::size_t K = logits.rows(), M = logits.cols();
  Tensor h({K, M});
  for (std::size_t k = 0; k < K; ++k) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < M; ++c) mx = std::max(mx, logits(k, c));
    std::vector<double> p(M);
    double z = 0;
    for (std::size_t c = 0; c < M; ++c) z += (p[c] = std::exp(logits(k, c) - mx));
    double tail = 0;
    for (std::size_t c = M; c-- > 0;) {
      tail += p[c] / z;
      h(k, c) = c + 1 == M ? 1.0 : (p[c] / z) / tail;
    }
  }
  return h;
}

std::vector<double> count_transition(const Tensor& hazard, std::size_t z_prev, std::size_t c_prev) {
  const std::size_t M = hazard.cols();
  if (c_prev < 1 || c_prev > M) throw std::invalid_argument("count_transition: count out of range");
  if (z_prev >= hazard.rows()) throw std::invalid_argument("count_transition: mode out of range");
  std::vector<double> out(M, 0.0);
  const double h = c_prev == M ? 1.0 : hazard(z_prev, c_prev - 1);
  out[0] = h;
  if (c_prev < M) out[c_prev] += 1.0 - h;
  return out;
}

std::vector<double> edge_prior(std::size_t L, double p0) {
  if (L < 1) throw std::invalid_argument("edge_prior: L must be >= 1");
  if (!(p0 > 0.0 && p0 < 1.0)) throw std::invalid_argument("edge_prior: p0 must lie in (0, 1)");
  std::vector<double> out(L + 1, (1.0 - p0) / static_cast<double>(L));
  out[0] = p0;
  return out;
}

InitialDistributions initial_distributions(const ParameterStore& store, const ModelConfig& cfg) {
  InitialDistributions d;
  const Tensor& logits = store.get("init.logits");
  double mx = -INFINITY, z = 0;
  for (double v : logits.data()) mx = std::max(mx, v);
  for (double v : logits.data()) {
    d.pi.push_back(std::exp(v - mx));
    z += d.pi.back();
  }
  for (double& v : d.pi) v /= z;
  d.mean = store.get("init.mean");
  d.logvar = store.get("init.logvar");
  for (double& v : d.logvar.storage()) v = clamp_lv(v);
  d.count.assign(cfg.M, 0.0);
  d.count[0] = 1.0;
  return d;
}

double DiagGaussian::log_density(const std::vector<double>& x) const {
  if (x.size() != mean.size()) throw ShapeError("log_density: dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    s += d * d * std::exp(-logvar[i]) + logvar[i] + kLog2Pi;
  }
  return -0.5 * s;
}

DiagGaussian continuous_transition(const ParameterStore& store, const ModelConfig& cfg,
                                   const std::vector<double>& x_prev, std::size_t mode) {
  if (mode >= cfg.K) throw std::invalid_argument("continuous_transition: mode out of range");
  DiagGaussian g;
  g.mean = run_mlp(store, dyn_name(mode), x_prev);
  for (std::size_t i = 0; i < g.mean.size(); ++i) g.mean[i] += x_prev[i];
  g.logvar = row_of(store.get("dyn.logvar"), mode);
  for (double& v : g.logvar) v = clamp_lv(v);
  return g;
}

DiagGaussian emission(const ParameterStore& store, const ModelConfig&, const std::vector<double>& x) {
  DiagGaussian g;
  g.mean = run_mlp(store, "emit", x);
  g.logvar = row_of(store.get("emit.logvar"), 0);
  for (double& v : g.logvar) v = clamp_lv(v);
  return g;
}

// --- per-episode graph ---------------------------------------------------------------

Noise sample_noise(const ModelConfig& cfg, std::size_t T, Rng& rng) {
  Noise nz;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor e({cfg.N, cfg.x_dim});
    for (double& v : e.storage()) v = standard_normal(rng);
    nz.eps.push_back(std::move(e));
  }
  nz.gumbel = nn::sample_gumbel(T * cfg.N * cfg.N, cfg.L + 1, rng);
  return nz;
}

Noise zero_noise(const ModelConfig& cfg, std::size_t T) {
  Noise nz;
  nz.eps.assign(T, Tensor({cfg.N, cfg.x_dim}, 0.0));
  nz.gumbel = Tensor({T * cfg.N * cfg.N, cfg.L + 1}, 0.0);
  return nz;
}

Tensor episode_observations(const sim::Episode& ep) {
  const std::size_t T = ep.n_steps, N = ep.n_objects;
  Tensor y({T * N, 2});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < 2; ++d) y(t * N + n, d) = ep.y_at(n, t, d);
  return y;
}

namespace {

// Deterministic edges: self loops type 1, other pairs type 0 unless listed.
Tensor constant_edges(std::size_t T, std::size_t N, std::size_t E, const std::vector<sim::Event>* events,
                      std::size_t lag) {
  const std::size_t P = N * N;
  Tensor e({T * P, E}, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = 0; m < N; ++m)
      for (std::size_t n = 0; n < N; ++n) e((t * P) + m * N + n, m == n ? 1 : 0) = 1.0;
  if (events == nullptr) return e;
  for (const sim::Event& ev : *events) {
    // An event at t changes z_{t+1}; the transition into t+1 reads edges at t+1-lag.
    const std::size_t s = static_cast<std::size_t>(ev.t) + 1 - lag;
    if (s >= T) continue;
    for (auto [a, b] : {std::pair<int, int>{ev.m, ev.n}, std::pair<int, int>{ev.n, ev.m}}) {
      const std::size_t r = s * P + static_cast<std::size_t>(a) * N + static_cast<std::size_t>(b);
      e(r, 0) = 0.0;
      e(r, 1) = 1.0;
    }
  }
  return e;
}

}  // namespace

EpisodeGraph build_episode_graph(const BoundParams& p, const ModelConfig& cfg, const sim::Episode& ep,
                                 const Noise& noise, const GraphOptions& opt) {
  cfg.validate();
  const std::size_t T = ep.n_steps, N = ep.n_objects, K = cfg.K, M = cfg.M, D = cfg.x_dim, L = cfg.L, E = L + 1;
  const std::size_t P = N * N;
  if (N != cfg.N) throw std::invalid_argument("episode has " + std::to_string(N) + " objects, model expects " +
                                              std::to_string(cfg.N));
  if (T < 2) throw std::invalid_argument("episode needs at least 2 steps");
  if (noise.eps.size() != T || noise.gumbel.rows() != T * P || noise.gumbel.cols() != E)
    throw ShapeError("noise does not match the episode");
  ad::Tape& tape = p.tape();

  EpisodeGraph g;
  g.T = T;
  g.N = N;
  Tensor y = episode_observations(ep);
  for (double& v : y.storage()) v = (v - cfg.y_center) / cfg.y_scale;
  g.y_norm = tape.constant(std::move(y));

  // q(x | y): bidirectional summary then a causal chain over time.
  std::vector<Var> ys;
  for (std::size_t t = 0; t < T; ++t) ys.push_back(ad::slice_rows(g.y_norm, t * N, N));
  const std::vector<Var> h = nn::bidirectional_encode(p, "post.bigru", ys);
  nn::CausalPosterior post(p, "post.causal", N, D);
  std::vector<Var> xs, means, logvars;
  for (std::size_t t = 0; t < T; ++t) {
    nn::Gaussian q = post.step(t, h[t], t == 0 ? Var{} : xs.back());
    xs.push_back(nn::reparameterize(q, noise.eps[t]));
    means.push_back(q.mean);
    logvars.push_back(q.logvar);
  }
  g.x = ad::concat_rows(xs);
  g.x_mean = ad::concat_rows(means);
  g.x_logvar = ad::concat_rows(logvars);
  g.entropy = nn::gaussian_entropy(g.x_logvar);

  const nn::Mlp emit = nn::Mlp::bind(p, "emit");
  g.emission = nn::gaussian_log_density(g.y_norm, emit(g.x), clamp_logvar(p["emit.logvar"]));

  // Initial and mode-conditioned continuous transitions.
  const Var x0 = ad::slice_rows(g.x, 0, N);
  const Var xprev = ad::slice_rows(g.x, 0, (T - 1) * N);
  const Var xnext = ad::slice_rows(g.x, N, (T - 1) * N);
  const Var init_mean = p["init.mean"];
  const Var init_lv = clamp_logvar(p["init.logvar"]);
  const Var dyn_lv = clamp_logvar(p["dyn.logvar"]);
  std::vector<Var> init_cols, dyn_cols;
  for (std::size_t k = 0; k < K; ++k) {
    init_cols.push_back(nn::gaussian_log_density_rows(x0, ad::gather_rows(init_mean, std::vector<std::size_t>(N, k)),
                                                      ad::slice_rows(init_lv, k, 1)));
    Var mean_k = ad::add(xprev, nn::Mlp::bind(p, dyn_name(k))(xprev));
    g.dyn_means.push_back(mean_k);
    dyn_cols.push_back(nn::gaussian_log_density_rows(xnext, mean_k, ad::slice_rows(dyn_lv, k, 1)));
  }
  const Var obs_parts[] = {ad::concat_cols(init_cols), ad::concat_cols(dyn_cols)};
  g.obs = ad::reshape(ad::concat_rows(obs_parts), T * N * K, 1);
  g.log_init = ad::log_softmax_rows(p["init.logits"]);

  // Duration model -> hazards. logS[k][c] = log P(d >= c+1).
  const Var logp = ad::log_softmax_rows(p["dur.logits"]);
  if (M == 1) {
    g.log_hazard = tape.constant(Tensor({K, 1}, 0.0));
  } else {
    Tensor U({M, M});
    for (std::size_t d = 0; d < M; ++d)
      for (std::size_t c = 0; c < M; ++c) U(d, c) = d >= c ? 0.0 : kLogZero;
    const Var logS = ad::log_matmul(logp, tape.constant(std::move(U)));
    g.log_hazard = ad::sub(logp, logS);
    g.log_survive = ad::sub(ad::slice_cols(logS, 1, M - 1), ad::slice_cols(logS, 0, M - 1));
  }

  // Edges, layout t*P + m*N + n.
  const bool forced = opt.force_no_interaction;
  if (cfg.variant == Variant::Grass) {
    g.edge_logits = nn::edge_encoder(p, "enc", g.x, N);
    if (forced) {
      g.edges = tape.constant(constant_edges(T, N, E, nullptr, cfg.edge_lag));
    } else {
      const Var s = nn::gumbel_softmax(g.edge_logits, noise.gumbel, opt.gumbel_tau, opt.hard_edges);
      Tensor mask({T * P, 1}, 1.0), fixed({T * P, E}, 0.0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n) {
          mask(t * P + n * N + n, 0) = 0.0;
          fixed(t * P + n * N + n, 1) = 1.0;
        }
      g.edges = ad::add(ad::mul_col(s, tape.constant(std::move(mask))), tape.constant(std::move(fixed)));
    }
  } else if (cfg.variant == Variant::GrassGt) {
    if (!forced && opt.events == nullptr) throw std::invalid_argument("GRASS-GT needs the episode's events");
    g.edges = tape.constant(constant_edges(T, N, E, forced ? nullptr : opt.events, cfg.edge_lag));
  } else if (cfg.variant == Variant::Indep) {
    g.edges = tape.constant(constant_edges(T, N, E, nullptr, cfg.edge_lag));
  }

  // Pair transition matrices for t = 1..T-1, target-major rows.
  const std::size_t R = (T - 1) * P;
  if (cfg.variant == Variant::Mosds) {
    const std::size_t NK = N * K;
    const Var flat = ad::reshape(xprev, T - 1, N * D);
    const Var logits = ad::reshape(nn::Mlp::bind(p, "mosds")(flat), (T - 1) * NK * N, K);
    std::vector<std::size_t> idx(R * K);
    for (std::size_t t = 0; t + 1 < T; ++t)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t m = 0; m < N; ++m)
          for (std::size_t i = 0; i < K; ++i) idx[((t * N + n) * N + m) * K + i] = t * NK * N + (m * K + i) * N + n;
    g.pair_T = ad::softmax_rows(ad::gather_rows(logits, std::move(idx)), opt.tau);
    g.w = tape.constant(Tensor({(T - 1) * N, N}, 1.0 / static_cast<double>(N)));
    return g;
  }
  std::vector<std::size_t> src(R), dst(R), eidx(R);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < N; ++m) {
        const std::size_t r = ((t - 1) * N + n) * N + m;
        src[r] = (t - 1) * N + m;
        dst[r] = (t - 1) * N + n;
        eidx[r] = (t - cfg.edge_lag) * P + m * N + n;
      }
  const Var Et = ad::gather_rows(g.edges, std::move(eidx));
  const Var wt = ad::reshape(ad::sum_rows(ad::slice_cols(Et, 1, L)), (T - 1) * N, N);
  g.w = ad::div_col(wt, ad::sum_rows(wt));
  const Var pin_parts[] = {ad::gather_rows(g.x, std::move(src)), ad::gather_rows(g.x, std::move(dst))};
  const Var pin = ad::concat_cols(pin_parts);
  Var agg;
  for (std::size_t l = 1; l <= L; ++l) {
    const Var term = ad::mul_col(nn::Mlp::bind(p, fe_name(l))(pin), ad::slice_cols(Et, l, 1));
    agg = l == 1 ? term : ad::add(agg, term);
  }
  const Var logits = nn::Mlp::bind(p, "fz")(agg);
  g.pair_T = ad::softmax_rows(ad::reshape(logits, R * K, K), opt.tau);
  return g;
}

MeanFieldResult mean_field_forward(const EpisodeGraph& g, const ModelConfig& cfg) {
  const std::size_t T = g.T, N = g.N, K = cfg.K, M = cfg.M, P = N * N, NK = N * K;
  ad::Tape& tape = *g.obs.tape;
  const bool indep = cfg.variant == Variant::Indep;

  std::vector<std::size_t> tile_k(NK), tile_n(NK), self_idx(NK), wself_idx(NK), bidx(P * K), seg_pair(P * K),
      seg_target(P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      tile_k[n * K + k] = k;
      tile_n[n * K + k] = n;
      self_idx[n * K + k] = (n * N + n) * K + k;
      wself_idx[n * K + k] = n * N + n;
    }
  Tensor nonself({P, 1}, 1.0);
  for (std::size_t n = 0; n < N; ++n) {
    nonself(n * N + n, 0) = 0.0;
    for (std::size_t m = 0; m < N; ++m) {
      seg_target[n * N + m] = n;
      for (std::size_t i = 0; i < K; ++i) {
        bidx[(n * N + m) * K + i] = m * K + i;
        seg_pair[(n * N + m) * K + i] = n * N + m;
      }
    }
  }
  const Var nonself_mask = tape.constant(std::move(nonself));

  const Var lh = ad::gather_rows(g.log_hazard, tile_k);
  const Var ls = M > 1 ? ad::gather_rows(g.log_survive, tile_k) : Var{};
  MeanFieldResult out;
  auto push_belief = [&](Var alpha) {
    const Var lb = ad::log_softmax_rows(ad::reshape(ad::logsumexp_rows(alpha), N, K));
    out.log_beliefs.push_back(lb);
    out.beliefs.push_back(ad::exp(lb));
  };

  // alpha rows (n, k), columns c.
  Var alpha = ad::add(ad::gather_rows(ad::transpose(g.log_init), tile_k), ad::slice_rows(g.obs, 0, NK));
  if (M > 1) {
    const Var parts[] = {alpha, tape.constant(Tensor({NK, M - 1}, kLogZero))};
    alpha = ad::concat_cols(parts);
  }
  push_belief(alpha);

  for (std::size_t t = 1; t < T; ++t) {
    const Var Bt = ad::slice_rows(g.obs, t * NK, NK);
    const Var reset = ad::logsumexp_rows(ad::add(alpha, lh));
    const Var Tt = ad::slice_rows(g.pair_T, (t - 1) * P * K, P * K);
    const Var Tself = ad::gather_rows(Tt, self_idx);
    Var logA;
    if (indep) {
      logA = ad::log(Tself);
    } else {
      const Var bflat = ad::gather_rows(ad::reshape(out.beliefs.back(), NK, 1), bidx);
      const Var U = ad::segment_sum_rows(ad::mul_col(Tt, bflat), seg_pair, P);
      const Var w = ad::reshape(ad::slice_rows(g.w, (t - 1) * N, N), P, 1);
      const Var shared = ad::segment_sum_rows(ad::mul_col(U, ad::mul(w, nonself_mask)), seg_target, N);
      const Var A = ad::add(ad::mul_col(Tself, ad::gather_rows(w, wself_idx)), ad::gather_rows(shared, tile_n));
      logA = ad::log(A);
    }
    // newcol[n][k] = logsumexp_j reset[n][j] + logA[(n, j)][k]
    const Var scores = ad::transpose(ad::add_col(logA, reset));
    const Var lse = ad::logsumexp_rows(ad::reshape(scores, K * N, K));
    const Var newcol = ad::reshape(ad::transpose(ad::reshape(lse, K, N)), NK, 1);
    if (M > 1) {
      const Var parts[] = {newcol, ad::add(ad::slice_cols(alpha, 0, M - 1), ls)};
      alpha = ad::add_col(ad::concat_cols(parts), Bt);
    } else {
      alpha = ad::add_col(newcol, Bt);
    }
    push_belief(alpha);
  }
  out.loglik = ad::sum_all(ad::logsumexp_rows(ad::reshape(alpha, N, K * M)));
  return out;
}

ElboTerms elbo(const BoundParams& p, const ModelConfig& cfg, const sim::Episode& ep, const Noise& noise,
               const ElboOptions& opt) {
  ad::Tape& tape = p.tape();
  const EpisodeGraph g = build_episode_graph(p, cfg, ep, noise, opt.graph);
  const MeanFieldResult mf = mean_field_forward(g, cfg);
  const std::size_t T = g.T, N = g.N, K = cfg.K, P = N * N;

  ElboTerms out;
  out.loglik = mf.loglik;
  out.emission = g.emission;
  out.entropy = g.entropy;
  if (cfg.variant == Variant::Grass && !opt.graph.force_no_interaction && N > 1) {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t m = 0; m < N; ++m)
        for (std::size_t n = 0; n < N; ++n)
          if (m != n) rows.push_back(t * P + m * N + n);
    const Var lq = ad::log_softmax_rows(ad::gather_rows(g.edge_logits, std::move(rows)));
    std::vector<double> neg_lp = edge_prior(cfg.L, cfg.edge_prior);
    for (double& v : neg_lp) v = -std::log(v);
    out.edge_kl = ad::sum_all(ad::mul(ad::exp(lq), ad::add_row(lq, tape.constant(Tensor::row(neg_lp)))));
  } else {
    // Forced or absent edges carry no posterior of their own.
    out.edge_kl = tape.constant(Tensor::scalar(0.0));
  }
  out.elbo = ad::sub(ad::add(ad::add(out.loglik, out.emission), out.entropy), out.edge_kl);

  // Belief-weighted one-step predictions x_hat_t, t >= 1.
  const std::vector<Var> later(mf.beliefs.begin() + 1, mf.beliefs.end());
  const Var bel = ad::concat_rows(later);
  Var xhat;
  for (std::size_t k = 0; k < K; ++k) {
    const Var term = ad::mul_col(g.dyn_means[k], ad::slice_cols(bel, k, 1));
    xhat = k == 0 ? term : ad::add(xhat, term);
  }
  const Var lvhat = ad::matmul(bel, clamp_logvar(p["dyn.logvar"]));
  const Var xnext = ad::slice_rows(g.x, N, (T - 1) * N);
  out.cons_x = nn::gaussian_log_density(xnext, xhat, lvhat);
  const Var yhat = nn::Mlp::bind(p, "emit")(xhat);
  out.cons_y = nn::gaussian_log_density(ad::slice_rows(g.y_norm, N, (T - 1) * N), yhat,
                                        clamp_logvar(p["emit.logvar"]));
  out.usage = ad::scale(ad::sum_all(ad::concat_rows(mf.log_beliefs)), 1.0 / static_cast<double>(K));
  out.objective = ad::add(out.elbo, ad::add(ad::scale(out.cons_y, opt.weight_y), ad::scale(out.cons_x, opt.weight_x)));
  if (opt.usage_weight != 0.0) out.objective = ad::add(out.objective, ad::scale(out.usage, opt.usage_weight));
  return out;
}

inference::TransitionBundle make_bundle(const EpisodeGraph& g, const ModelConfig& cfg) {
  const std::size_t T = g.T, N = g.N, K = cfg.K, M = cfg.M, P = N * N;
  inference::TransitionBundle b;
  b.resize(T, N, K, M);
  b.log_obs = g.obs.value().storage();
  const Tensor& li = g.log_init.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) b.log_init[n * K + k] = li(0, k);
  const Tensor& lh = g.log_hazard.value();
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < M; ++c) b.hazard[k * M + c] = c + 1 == M ? 1.0 : std::exp(lh(k, c));
  const auto& pt = g.pair_T.value().storage();
  std::copy(pt.begin(), pt.end(), b.pair_trans.begin() + static_cast<std::ptrdiff_t>(P * K * K));
  const Tensor& w = g.w.value();
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < N; ++m) {
        double v = w((t - 1) * N + n, m);
        if (cfg.variant == Variant::Indep) v = m == n ? 1.0 : 0.0;
        b.weight(t, n, m) = v;
      }
  return b;
}

double mean_interaction_mass(const EpisodeGraph& g) {
  const std::size_t N = g.N, P = N * N;
  if (N < 2) return 0.0;
  const bool from_logits = g.edge_logits.valid();
  if (!from_logits && !g.edges.valid()) return 0.0;
  const Tensor& v = from_logits ? g.edge_logits.value() : g.edges.value();
  const std::size_t E = v.cols();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < g.T; ++t)
    for (std::size_t m = 0; m < N; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        if (m == n) continue;
        const std::size_t r = t * P + m * N + n;
        double p0 = v(r, 0);
        if (from_logits) {
          double mx = -INFINITY, z = 0;
          for (std::size_t e = 0; e < E; ++e) mx = std::max(mx, v(r, e));
          for (std::size_t e = 0; e < E; ++e) z += std::exp(v(r, e) - mx);
          p0 = std::exp(v(r, 0) - mx) / z;
        }
        total += 1.0 - p0;
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace grass::model

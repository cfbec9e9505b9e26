#include "grass/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace grass::train {

namespace {

constexpr char kCkptMagic[8] = {'G', 'R', 'S', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint64_t kValStep = std::numeric_limits<std::uint64_t>::max();
constexpr std::uint64_t kInitTag = kValStep - 1;
constexpr std::uint64_t kShuffleTag = kValStep - 2;

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

model::ElboOptions elbo_options(const TrainConfig& cfg, Temperatures tau, double usage = 0.0) {
  model::ElboOptions opt;
  opt.graph.tau = tau.softmax;
  opt.graph.gumbel_tau = tau.gumbel;
  opt.graph.hard_edges = cfg.hard_edges;
  opt.weight_y = cfg.weight_y;
  opt.weight_x = cfg.weight_x;
  opt.usage_weight = usage;
  return opt;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (total_steps > 0 && warmup_steps >= total_steps)
    throw std::invalid_argument("train: warmup_steps must be below total_steps");
  if (!(lr_min >= 0) || lr_min > lr_peak) throw std::invalid_argument("train: need 0 <= lr_min <= lr_peak");
  if (weight_decay < 0 || !(clip_norm > 0)) throw std::invalid_argument("train: bad weight_decay or clip_norm");
  if (!(decay_rate > 0) || decay_rate > 1) throw std::invalid_argument("train: decay_rate must be in (0, 1]");
  if (!(tau_end > 0) || !(gumbel_tau_end > 0) || tau_start < tau_end || gumbel_tau_start < gumbel_tau_end)
    throw std::invalid_argument("train: temperatures must satisfy start >= end > 0");
  if (!(usage_weight >= 0)) throw std::invalid_argument("train: usage_weight must be non-negative");
  if (samples == 0) throw std::invalid_argument("train: samples must be positive");
  if (max_bad_steps == 0) throw std::invalid_argument("train: max_bad_steps must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"total_steps", total_steps},
          {"warmup_steps", warmup_steps},
          {"lr_min", lr_min},
          {"lr_peak", lr_peak},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"decay_rate", decay_rate},
          {"steps_per_epoch", steps_per_epoch},
          {"tau_start", tau_start},
          {"tau_end", tau_end},
          {"gumbel_tau_start", gumbel_tau_start},
          {"gumbel_tau_end", gumbel_tau_end},
          {"hard_edges", hard_edges},
          {"weight_y", weight_y},
          {"weight_x", weight_x},
          {"usage_weight", usage_weight},
          {"usage_steps", usage_steps},
          {"samples", samples},
          {"seed", seed},
          {"max_bad_steps", max_bad_steps},
          {"eval_every", eval_every},
          {"val_limit", val_limit},
          {"log_every", log_every},
          {"engine", inference::engine_name(engine)},
          {"lr_rule", "warmup linear, then lr_min + (lr_peak - lr_min) * 0.5 * (1 + cos(pi * progress)) * decay_rate^epoch"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("batch_size", c.batch_size);
  take("total_steps", c.total_steps);
  take("warmup_steps", c.warmup_steps);
  take("lr_min", c.lr_min);
  take("lr_peak", c.lr_peak);
  take("weight_decay", c.weight_decay);
  take("clip_norm", c.clip_norm);
  take("decay_rate", c.decay_rate);
  take("steps_per_epoch", c.steps_per_epoch);
  take("tau_start", c.tau_start);
  take("tau_end", c.tau_end);
  take("gumbel_tau_start", c.gumbel_tau_start);
  take("gumbel_tau_end", c.gumbel_tau_end);
  take("hard_edges", c.hard_edges);
  take("weight_y", c.weight_y);
  take("weight_x", c.weight_x);
  take("usage_weight", c.usage_weight);
  take("usage_steps", c.usage_steps);
  take("samples", c.samples);
  take("seed", c.seed);
  take("max_bad_steps", c.max_bad_steps);
  take("eval_every", c.eval_every);
  take("val_limit", c.val_limit);
  take("log_every", c.log_every);
  if (j.contains("engine")) c.engine = inference::parse_engine(j.at("engine").get<std::string>().c_str());
  for (const auto& [key, _] : j.items())
    if (!c.to_json().contains(key)) throw std::invalid_argument("train: unknown config key '" + key + "'");
  c.validate();
  return c;
}

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  if (step < cfg.warmup_steps)
    return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.total_steps - cfg.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double epoch = cfg.steps_per_epoch ? std::floor(static_cast<double>(step) / static_cast<double>(cfg.steps_per_epoch)) : 0.0;
  return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * 0.5 * (1 + std::cos(std::numbers::pi * progress)) *
                          std::pow(cfg.decay_rate, epoch);
}

Temperatures temperature_schedule(std::size_t step, const TrainConfig& cfg) {
  const double progress =
      cfg.total_steps > 1 ? std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.total_steps - 1)) : 1.0;
  auto anneal = [&](double a, double b) { return std::max(b, a * std::pow(b / a, progress)); };
  return {anneal(cfg.tau_start, cfg.tau_end), anneal(cfg.gumbel_tau_start, cfg.gumbel_tau_end)};
}

double usage_schedule(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.usage_steps) return 0.0;
  return cfg.usage_weight * (1.0 - static_cast<double>(step) / static_cast<double>(cfg.usage_steps));
}

OptimizerState OptimizerState::for_params(const ParameterStore& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adamw_update(ParameterStore& params, const ParameterStore& grads, OptimizerState& opt, double lr,
                  double weight_decay, double beta1, double beta2, double eps) {
  if (!params.same_layout(grads) || !params.same_layout(opt.m) || !params.same_layout(opt.v))
    throw ShapeError("adamw: parameter, gradient and moment layouts differ");
  ++opt.step;
  const double c1 = 1 - std::pow(beta1, static_cast<double>(opt.step));
  const double c2 = 1 - std::pow(beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params.at(i);
    const Tensor& g = grads.at(i);
    Tensor& m = opt.m.at(i);
    Tensor& v = opt.v.at(i);
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = beta1 * m[e] + (1 - beta1) * g[e];
      v[e] = beta2 * v[e] + (1 - beta2) * g[e] * g[e];
      p[e] -= lr * ((m[e] / c1) / (std::sqrt(v[e] / c2) + eps) + weight_decay * p[e]);
    }
  }
}

double global_norm(const ParameterStore& grads) {
  double s = 0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (double g : grads.at(i).data()) s += g * g;
  return std::sqrt(s);
}

double clip_global_norm(ParameterStore& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (double& g : grads.at(i).data()) g *= f;
  }
  return norm;
}

model::Noise episode_noise(const model::ModelConfig& mcfg, std::size_t T, std::uint64_t seed, std::uint64_t step,
                           std::uint64_t idx, std::size_t sample) {
  Rng rng(derive_seed(derive_seed(seed, step, idx), sample));
  return model::sample_noise(mcfg, T, rng);
}

BatchGradient batch_gradient(const ParameterStore& params, const model::ModelConfig& mcfg,
                             const std::vector<const sim::Episode*>& batch, const std::vector<model::Noise>& noises,
                             const model::ElboOptions& opt) {
  if (batch.empty() || noises.size() % batch.size() != 0)
    throw std::invalid_argument("batch_gradient: need a whole number of noise draws per episode");
  const std::size_t S = noises.size() / batch.size();
  const double scale = -1.0 / static_cast<double>(noises.size());
  BatchGradient out;
  out.grads = params.zeros_like();
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t s = 0; s < S; ++s) {
      ad::Tape tape;
      BoundParams bound(tape, params);
      model::ElboOptions o = opt;
      o.graph.events = &batch[i]->events;
      try {
        const model::ElboTerms terms = model::elbo(bound, mcfg, *batch[i], noises[i * S + s], o);
        tape.backward(terms.objective);
        const ParameterStore g = bound.grads();
        for (std::size_t p = 0; p < g.size(); ++p) {
          Tensor& acc = out.grads.at(p);
          const Tensor& gp = g.at(p);
          for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += scale * gp[e];
        }
        out.objective += terms.objective.item();
        out.elbo += terms.elbo.item();
        out.loglik += terms.loglik.item();
        out.edge_kl += terms.edge_kl.item();
      } catch (const NumericError& e) {
        out.finite = false;
        out.error = e.what();
        return out;
      }
    }
  const double inv = 1.0 / static_cast<double>(noises.size());
  out.objective *= inv;
  out.elbo *= inv;
  out.loglik *= inv;
  out.edge_kl *= inv;
  for (std::size_t p = 0; p < out.grads.size(); ++p)
    if (!out.grads.at(p).all_finite()) {
      out.finite = false;
      out.error = "non-finite gradient in " + out.grads.names()[p];
    }
  if (!std::isfinite(out.objective)) {
    out.finite = false;
    out.error = "non-finite objective";
  }
  return out;
}

StepResult train_step(ParameterStore& params, OptimizerState& opt, const model::ModelConfig& mcfg,
                      const TrainConfig& cfg, const std::vector<const sim::Episode*>& batch,
                      const std::vector<std::size_t>& indices, std::size_t step) {
  if (indices.size() != batch.size()) throw std::invalid_argument("train_step: indices and batch differ in size");
  StepResult r;
  r.lr = lr_schedule(step, cfg);
  r.tau = temperature_schedule(step, cfg);
  std::vector<model::Noise> noises;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t s = 0; s < cfg.samples; ++s)
      noises.push_back(episode_noise(mcfg, batch[i]->n_steps, cfg.seed, step, indices[i], s));
  BatchGradient bg = batch_gradient(params, mcfg, batch, noises, elbo_options(cfg, r.tau, usage_schedule(step, cfg)));
  if (!bg.finite) {
    r.skipped = true;
    r.error = bg.error;
    r.objective = r.elbo = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  r.objective = bg.objective;
  r.elbo = bg.elbo;
  r.grad_norm = clip_global_norm(bg.grads, cfg.clip_norm);
  adamw_update(params, bg.grads, opt, r.lr, cfg.weight_decay);
  return r;
}

// --- segmentation ---------------------------------------------------------------

Segmentation segment_episode(const ParameterStore& params, const model::ModelConfig& mcfg, const sim::Episode& ep,
                             const SegmentOptions& opt) {
  ad::Tape tape(false);
  BoundParams bound(tape, params);
  model::GraphOptions go;
  go.tau = opt.tau;
  go.gumbel_tau = opt.gumbel_tau;
  go.hard_edges = true;
  go.events = &ep.events;
  const model::EpisodeGraph g = model::build_episode_graph(bound, mcfg, ep, model::zero_noise(mcfg, ep.n_steps), go);
  const inference::TransitionBundle bundle = model::make_bundle(g, mcfg);

  Segmentation s;
  s.T = g.T;
  s.N = g.N;
  s.marginals = inference::infer(bundle, opt.engine);
  const std::size_t T = g.T, N = g.N, K = mcfg.K;
  const std::vector<int> flat = inference::decode_modes(s.marginals);
  s.modes.assign(N, std::vector<int>(T));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t) s.modes[n][t] = flat[n * T + t];
  s.confidence.assign(T * N, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) s.confidence[t * N + n] = std::max(s.confidence[t * N + n], s.marginals.mode_prob(t, n, k));
  s.w.assign(T * N * N, 0.0);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < N; ++m) s.w[(t * N + n) * N + m] = bundle.weight(t, n, m);
  s.edges.assign(T * N * N, 0.0);
  if (g.edges.valid()) {
    const Tensor& e = g.edges.value();
    for (std::size_t r = 0; r < T * N * N; ++r) s.edges[r] = 1.0 - e(r, 0);
  }
  s.interaction_mass = model::mean_interaction_mass(g);
  return s;
}

EvalReport evaluate_segmentation(const ParameterStore& params, const model::ModelConfig& mcfg,
                                 const std::vector<sim::Episode>& episodes, const SegmentOptions& opt,
                                 std::size_t limit) {
  const std::size_t count = limit ? std::min(limit, episodes.size()) : episodes.size();
  if (count == 0) throw std::invalid_argument("evaluate: no episodes");
  EvalReport rep;
  rep.episodes = count;
  std::vector<int> all_pred, all_truth;
  std::vector<double> nmi, ari, acc, f1, mass;
  for (std::size_t i = 0; i < count; ++i) {
    const sim::Episode& ep = episodes[i];
    const Segmentation s = segment_episode(params, mcfg, ep, opt);
    std::vector<int> pred, truth;
    for (std::size_t n = 0; n < ep.n_objects; ++n)
      for (std::size_t t = 0; t < ep.n_steps; ++t) {
        pred.push_back(s.modes[n][t]);
        truth.push_back(ep.z_at(n, t));
      }
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
    all_truth.insert(all_truth.end(), truth.begin(), truth.end());
    const metrics::Scores sc = metrics::score(pred, truth);
    rep.per_episode.push_back(sc);
    nmi.push_back(sc.nmi);
    ari.push_back(sc.ari);
    acc.push_back(sc.accuracy);
    f1.push_back(sc.f1);
    mass.push_back(s.interaction_mass);
  }
  rep.pooled = metrics::score(all_pred, all_truth);
  rep.episode_mean = {mean_of(nmi), mean_of(ari), mean_of(acc), mean_of(f1)};
  rep.episode_std = {std_of(nmi), std_of(ari), std_of(acc), std_of(f1)};
  rep.interaction_mass = mean_of(mass);
  return rep;
}

double validation_elbo(const ParameterStore& params, const model::ModelConfig& mcfg, const TrainConfig& cfg,
                       const std::vector<sim::Episode>& episodes) {
  const std::size_t count = cfg.val_limit ? std::min(cfg.val_limit, episodes.size()) : episodes.size();
  if (count == 0) throw std::invalid_argument("validation: no episodes");
  const model::ElboOptions opt = elbo_options(cfg, {cfg.tau_end, cfg.gumbel_tau_end});
  double total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    ad::Tape tape(false);
    BoundParams bound(tape, params);
    model::ElboOptions o = opt;
    o.graph.events = &episodes[i].events;
    const model::Noise noise = episode_noise(mcfg, episodes[i].n_steps, cfg.seed, kValStep, i);
    total += model::elbo(bound, mcfg, episodes[i], noise, o).elbo.item();
  }
  return total / static_cast<double>(count);
}

// --- checkpoints ----------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const model::ModelConfig& mcfg, const nlohmann::json& extra) {
  nlohmann::json manifest = extra;
  manifest["model"] = mcfg.to_json();
  nlohmann::json shapes = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.at(i);
    shapes.push_back({{"name", params.names()[i]}, {"rows", t.rows()}, {"cols", t.cols()}});
  }
  manifest["params"] = shapes;
  const std::string text = manifest.dump(1);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kCkptMagic, sizeof(kCkptMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::vector<double> flat = params.flatten();
  out.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 30)) throw std::runtime_error("checkpoint header corrupt");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint truncated");
  Checkpoint ck;
  ck.manifest = nlohmann::json::parse(text);
  ck.model = model::ModelConfig::from_json(ck.manifest.at("model"));
  std::size_t total = 0;
  for (const auto& p : ck.manifest.at("params")) {
    const std::size_t r = p.at("rows").get<std::size_t>(), c = p.at("cols").get<std::size_t>();
    ck.params.add(p.at("name").get<std::string>(), Tensor({r, c}));
    total += r * c;
  }
  std::vector<double> flat(total);
  in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(total * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint parameter blob truncated");
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint has trailing bytes");
  ck.params.unflatten(flat);
  ParameterStore expected;
  Rng rng(0);
  model::init_params(expected, ck.model, rng);
  if (!expected.same_layout(ck.params)) throw std::runtime_error("checkpoint parameters do not match its model config");
  return ck;
}

// --- loop -----------------------------------------------------------------------

TrainResult train_loop(const TrainConfig& cfg_in, const model::ModelConfig& mcfg, const std::vector<sim::Episode>& train,
                       const std::vector<sim::Episode>& val, const std::filesystem::path& out_dir) {
  cfg_in.validate();
  mcfg.validate();
  if (train.empty()) throw std::invalid_argument("train_loop: empty training set");
  if (val.empty()) throw std::invalid_argument("train_loop: empty validation set");
  for (const auto* set : {&train, &val})
    for (const sim::Episode& ep : *set)
      if (ep.n_objects != mcfg.N) throw std::invalid_argument("train_loop: episode object count differs from model N");
  TrainConfig cfg = cfg_in;
  if (cfg.steps_per_epoch == 0) cfg.steps_per_epoch = std::max<std::size_t>(1, train.size() / cfg.batch_size);

  std::filesystem::create_directories(out_dir);
  TrainResult res;
  Rng init_rng(derive_seed(cfg.seed, kInitTag));
  model::init_params(res.final_params, mcfg, init_rng);
  OptimizerState opt = OptimizerState::for_params(res.final_params);

  std::ofstream log(out_dir / "train_log.csv", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write training log in " + out_dir.string());
  log << "step,lr,tau,gumbel_tau,objective,elbo,grad_norm,skipped,val_elbo,val_accuracy,val_nmi\n";

  SegmentOptions seg;
  seg.engine = cfg.engine;
  seg.tau = cfg.tau_end;
  seg.gumbel_tau = cfg.gumbel_tau_end;
  const nlohmann::json extra = {{"train", cfg.to_json()}};

  auto evaluate = [&](std::size_t step) {
    const double v = validation_elbo(res.final_params, mcfg, cfg, val);
    const EvalReport rep = evaluate_segmentation(res.final_params, mcfg, val, seg, cfg.val_limit);
    if (step == 0 || v > res.best_val_elbo) {
      res.best_val_elbo = v;
      res.best_step = step;
      res.best = res.final_params;
      nlohmann::json e = extra;
      e["step"] = step;
      e["val_elbo"] = v;
      save_checkpoint(out_dir / "checkpoint.bin", res.best, mcfg, e);
    }
    return std::pair{v, rep.pooled};
  };

  {
    const auto [v, sc] = evaluate(0);
    log << "0,,,,,,,0," << fmt(v) << ',' << fmt(sc.accuracy) << ',' << fmt(sc.nmi) << '\n';
  }

  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size(), epoch = 0, bad_run = 0;
  auto reshuffle = [&] {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, kShuffleTag, epoch++));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    cursor = 0;
  };

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<const sim::Episode*> batch;
    std::vector<std::size_t> idx;
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) reshuffle();
      idx.push_back(order[cursor]);
      batch.push_back(&train[order[cursor++]]);
    }
    const StepResult r = train_step(res.final_params, opt, mcfg, cfg, batch, idx, step);
    res.steps = step + 1;
    if (r.skipped) {
      ++res.skipped_steps;
      if (++bad_run > cfg.max_bad_steps)
        throw NumericError("training aborted after " + std::to_string(bad_run) + " consecutive non-finite steps at step " +
                           std::to_string(step) + ": " + r.error);
    } else {
      bad_run = 0;
    }
    const std::size_t done = step + 1;
    const bool last = done == cfg.total_steps;
    const bool do_eval = last || (cfg.eval_every && done % cfg.eval_every == 0);
    const bool do_log = do_eval || r.skipped || (cfg.log_every && done % cfg.log_every == 0);
    if (!do_log) continue;
    log << done << ',' << fmt(r.lr) << ',' << fmt(r.tau.softmax) << ',' << fmt(r.tau.gumbel) << ',' << fmt(r.objective)
        << ',' << fmt(r.elbo) << ',' << fmt(r.grad_norm) << ',' << (r.skipped ? 1 : 0) << ',';
    if (do_eval) {
      const auto [v, sc] = evaluate(done);
      log << fmt(v) << ',' << fmt(sc.accuracy) << ',' << fmt(sc.nmi);
    } else {
      log << ",,";
    }
    log << '\n';
    if (do_eval) log.flush();
  }
  nlohmann::json e = extra;
  e["step"] = res.steps;
  e["skipped_steps"] = res.skipped_steps;
  save_checkpoint(out_dir / "checkpoint_final.bin", res.final_params, mcfg, e);
  if (!log) throw std::runtime_error("write failed for training log");
  return res;
}

}  // namespace grass::train

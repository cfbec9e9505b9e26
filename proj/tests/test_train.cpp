#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "grass/train.hpp"
#include "test_support.hpp"

using namespace grass;
using namespace grass::train;

namespace {

model::ModelConfig toy_model() {
  model::ModelConfig c;
  c.K = 2;
  c.M = 4;
  c.N = 2;
  c.x_dim = 2;
  c.bigru_hidden = 2;
  c.rnn_hidden = 4;
  c.post_hidden = 4;
  c.edge_hidden = 4;
  c.emission_hidden = 4;
  c.dyn_hidden = 4;
  c.pair_hidden = 4;
  c.pair_out = 4;
  c.z_hidden = 2;
  return c;
}

std::vector<sim::Episode> toy_episodes(std::size_t count, std::size_t T, std::uint64_t seed) {
  sim::SimConfig sc;
  sc.n_objects = 2;
  sc.n_steps = T;
  sc.radius = 6.0;
  std::vector<sim::Episode> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(sim::generate_episode(sc, derive_seed(seed, i)));
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("grass_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_schedule(0, c) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_schedule(1000, c) == doctest::Approx(1.25e-4).epsilon(1e-12));
  CHECK(lr_schedule(2000, c) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lr_schedule(c.total_steps, c) == doctest::Approx(5e-5).epsilon(1e-12));
  c.steps_per_epoch = 100;
  // Cosine midpoint after warmup, scaled by the per-epoch decay.
  const std::size_t mid = (c.warmup_steps + c.total_steps) / 2;
  CHECK(lr_schedule(mid, c) ==
        doctest::Approx(5e-5 + 1.5e-4 * 0.5 * std::pow(0.99, static_cast<double>(mid / 100))).epsilon(1e-12));
  for (std::size_t s = 0; s <= c.total_steps; s += 97) {
    CHECK(lr_schedule(s, c) >= c.lr_min - 1e-18);
    CHECK(lr_schedule(s, c) <= c.lr_peak + 1e-18);
  }
}

TEST_CASE("temperature schedule endpoints and monotonicity") {
  TrainConfig c;
  c.total_steps = 500;
  c.warmup_steps = 10;
  CHECK(temperature_schedule(0, c).softmax == 1.0);
  CHECK(temperature_schedule(0, c).gumbel == 1.0);
  CHECK(temperature_schedule(499, c).softmax == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(temperature_schedule(499, c).gumbel == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(temperature_schedule(10000, c).softmax == 0.5);
  double prev = 2;
  for (std::size_t s = 0; s < 600; ++s) {
    const double t = temperature_schedule(s, c).softmax;
    CHECK(t <= prev);
    CHECK(t >= 0.5);
    prev = t;
  }
}

TEST_CASE("usage weight decays linearly to zero") {
  TrainConfig c;
  CHECK(usage_schedule(0, c) == 0.0);
  c.usage_weight = 2.0;
  c.usage_steps = 100;
  CHECK(usage_schedule(0, c) == 2.0);
  CHECK(usage_schedule(50, c) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(usage_schedule(100, c) == 0.0);
  CHECK(usage_schedule(5000, c) == 0.0);
  c.usage_weight = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("usage term: mean log belief, added with its weight") {
  const model::ModelConfig cfg = toy_model();
  ParameterStore store;
  Rng rng(3);
  model::init_params(store, cfg, rng);
  const auto eps = toy_episodes(1, 6, 8);
  const model::Noise nz = model::sample_noise(cfg, 6, rng);
  ad::Tape t1(false), t2(false);
  model::ElboOptions opt;
  const auto plain = model::elbo(BoundParams(t1, store), cfg, eps[0], nz, opt);
  opt.usage_weight = 0.25;
  const auto with = model::elbo(BoundParams(t2, store), cfg, eps[0], nz, opt);
  // Uniform beliefs would give -N T log K; anything else is lower.
  CHECK(plain.usage.item() <= -2.0 * 6 * std::log(2.0) + 1e-12);
  CHECK(with.objective.item() == doctest::Approx(plain.objective.item() + 0.25 * plain.usage.item()).epsilon(1e-13));
}

TEST_CASE("config validation and JSON round trip") {
  TrainConfig c;
  c.total_steps = 10;
  c.warmup_steps = 10;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.total_steps = 0;
  CHECK_NOTHROW(c.validate());
  c = TrainConfig{};
  c.lr_min = 1e-3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.seed = 42;
  c.batch_size = 7;
  c.engine = inference::Engine::ExactJoint;
  const TrainConfig d = TrainConfig::from_json(c.to_json());
  CHECK(d.to_json() == c.to_json());
  CHECK_THROWS(TrainConfig::from_json({{"batchsize", 3}}));
}

TEST_CASE("clipping bounds the global norm") {
  Rng rng(5);
  for (int inst = 0; inst < 20; ++inst) {
    ParameterStore g;
    g.add("a", uniform_init({3, 4}, 1, rng));
    g.add("b", uniform_init({1, 5}, 1, rng));
    const double scale = std::pow(10.0, -2 + 0.25 * inst);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (double& v : g.at(i).data()) v *= scale;
    const ParameterStore before = g;
    const double pre = clip_global_norm(g, 10.0);
    CHECK(pre == doctest::Approx(global_norm(before)));
    CHECK(global_norm(g) <= 10.0 + 1e-9);
    if (pre <= 10.0) CHECK(g.flatten() == before.flatten());
  }
}

TEST_CASE("AdamW: first step moves by lr in the sign direction, zero lr is a no-op") {
  ParameterStore p;
  p.add("a", Tensor({1, 3}, {1.0, -2.0, 0.5}));
  ParameterStore g = p.zeros_like();
  g.at(0) = Tensor({1, 3}, {0.3, -4.0, 0.0});
  OptimizerState opt = OptimizerState::for_params(p);
  ParameterStore q = p;
  adamw_update(q, g, opt, 0.0, 1e-5);
  CHECK(q.flatten() == p.flatten());

  opt = OptimizerState::for_params(p);
  q = p;
  adamw_update(q, g, opt, 0.1, 0.0);
  CHECK(q.at(0)[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(q.at(0)[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
  CHECK(q.at(0)[2] == 0.5);
  // Decoupled decay acts even with zero gradient.
  opt = OptimizerState::for_params(p);
  q = p;
  adamw_update(q, p.zeros_like(), opt, 0.1, 0.5);
  CHECK(q.at(0)[2] == doctest::Approx(0.5 * (1 - 0.05)).epsilon(1e-12));
}

TEST_CASE("batch gradient is the mean of per-episode gradients") {
  const auto cfg = toy_model();
  const auto eps = toy_episodes(3, 6, 11);
  ParameterStore params;
  Rng rng(3);
  model::init_params(params, cfg, rng);
  std::vector<model::Noise> noises;
  std::vector<const sim::Episode*> batch;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    batch.push_back(&eps[i]);
    noises.push_back(episode_noise(cfg, 6, 9, 0, i));
  }
  model::ElboOptions opt;
  opt.graph.hard_edges = false;
  const BatchGradient all = batch_gradient(params, cfg, batch, noises, opt);
  REQUIRE(all.finite);
  std::vector<double> mean(params.total_elements(), 0.0);
  double obj = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const BatchGradient one = batch_gradient(params, cfg, {batch[i]}, {noises[i]}, opt);
    const auto f = one.grads.flatten();
    for (std::size_t e = 0; e < f.size(); ++e) mean[e] += f[e] / 3.0;
    obj += one.objective / 3.0;
  }
  CHECK(all.objective == doctest::Approx(obj).epsilon(1e-12));
  CHECK(testing::max_abs_diff(all.grads.flatten(), mean) < 1e-10);
}

TEST_CASE("batch gradient matches finite differences on a two-episode toy") {
  auto cfg = toy_model();
  const auto eps = toy_episodes(2, 5, 21);
  ParameterStore params;
  Rng rng(4);
  model::init_params(params, cfg, rng);
  std::vector<const sim::Episode*> batch{&eps[0], &eps[1]};
  std::vector<model::Noise> noises{episode_noise(cfg, 5, 1, 0, 0), episode_noise(cfg, 5, 1, 0, 1)};
  model::ElboOptions opt;
  opt.graph.hard_edges = false;
  const BatchGradient bg = batch_gradient(params, cfg, batch, noises, opt);
  REQUIRE(bg.finite);
  auto loss = [&](const ParameterStore& p) { return -batch_gradient(p, cfg, batch, noises, opt).objective; };
  const auto g = bg.grads.flatten();
  auto flat = params.flatten();
  const double h = 1e-5;
  double worst = 0;
  // Every 7th coordinate keeps the runtime small while touching all blocks.
  for (std::size_t i = 0; i < flat.size(); i += 7) {
    ParameterStore p = params;
    auto f = flat;
    f[i] += h;
    p.unflatten(f);
    const double up = loss(p);
    f[i] -= 2 * h;
    p.unflatten(f);
    const double down = loss(p);
    const double num = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(num - g[i]) / std::max(1.0, std::abs(num) + std::abs(g[i])));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("train_step with zero learning rate leaves parameters unchanged") {
  const auto cfg = toy_model();
  const auto eps = toy_episodes(2, 6, 31);
  ParameterStore params;
  Rng rng(1);
  model::init_params(params, cfg, rng);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.total_steps = 10;
  tc.warmup_steps = 2;
  tc.lr_min = tc.lr_peak = 0.0;
  tc.weight_decay = 0;
  const ParameterStore before = params;
  OptimizerState opt = OptimizerState::for_params(params);
  const StepResult r = train_step(params, opt, cfg, tc, {&eps[0], &eps[1]}, {0, 1}, 0);
  CHECK_FALSE(r.skipped);
  CHECK(std::isfinite(r.objective));
  CHECK(params.flatten() == before.flatten());
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto cfg = toy_model();
  ParameterStore params;
  Rng rng(8);
  model::init_params(params, cfg, rng);
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir / "c.bin", params, cfg, {{"step", 3}});
  const Checkpoint ck = load_checkpoint(dir / "c.bin");
  CHECK(ck.params.flatten() == params.flatten());
  CHECK(ck.params.names() == params.names());
  CHECK(ck.model.to_json() == cfg.to_json());
  CHECK(ck.manifest.at("step") == 3);
  const std::string bytes = slurp(dir / "c.bin");
  {
    std::ofstream out(dir / "short.bin", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
  }
  CHECK_THROWS(load_checkpoint(dir / "short.bin"));
  CHECK_THROWS(load_checkpoint(dir / "missing.bin"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_loop: zero steps saves the initialization, runs are reproducible") {
  const auto cfg = toy_model();
  const auto train_set = toy_episodes(6, 8, 41);
  const auto val_set = toy_episodes(2, 8, 42);
  TrainConfig tc;
  tc.batch_size = 3;
  tc.total_steps = 0;
  tc.warmup_steps = 0;
  tc.seed = 17;
  const auto dir = scratch_dir("loop");
  const TrainResult r0 = train_loop(tc, cfg, train_set, val_set, dir / "zero");
  ParameterStore init;
  Rng init_rng(derive_seed(17, std::numeric_limits<std::uint64_t>::max() - 1));
  model::init_params(init, cfg, init_rng);
  CHECK(load_checkpoint(dir / "zero" / "checkpoint.bin").params.flatten() == init.flatten());
  CHECK(load_checkpoint(dir / "zero" / "checkpoint_final.bin").params.flatten() == init.flatten());
  CHECK(r0.steps == 0);

  tc.total_steps = 6;
  tc.warmup_steps = 2;
  tc.eval_every = 3;
  tc.log_every = 1;
  tc.lr_min = 1e-3;
  tc.lr_peak = 1e-2;
  const TrainResult a = train_loop(tc, cfg, train_set, val_set, dir / "a");
  const TrainResult b = train_loop(tc, cfg, train_set, val_set, dir / "b");
  CHECK(a.steps == 6);
  CHECK(a.final_params.flatten() != init.flatten());
  CHECK(slurp(dir / "a" / "train_log.csv") == slurp(dir / "b" / "train_log.csv"));
  CHECK(slurp(dir / "a" / "checkpoint.bin") == slurp(dir / "b" / "checkpoint.bin"));
  CHECK(slurp(dir / "a" / "checkpoint_final.bin") == slurp(dir / "b" / "checkpoint_final.bin"));
  // Header, the step-0 evaluation, then one row per step.
  const std::string log = slurp(dir / "a" / "train_log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 8);
  std::filesystem::remove_all(dir);
}

TEST_CASE("segment_episode shapes and edge/w agreement") {
  auto cfg = toy_model();
  cfg.N = 3;
  sim::SimConfig sc;
  sc.n_objects = 3;
  sc.n_steps = 10;
  sc.radius = 8.0;
  const sim::Episode ep = sim::generate_episode(sc, 77);
  ParameterStore params;
  Rng rng(2);
  model::init_params(params, cfg, rng);
  const Segmentation s = segment_episode(params, cfg, ep);
  REQUIRE(s.modes.size() == 3);
  CHECK(s.modes[0].size() == 10);
  for (std::size_t t = 1; t < 10; ++t)
    for (std::size_t n = 0; n < 3; ++n) {
      double sum = 0;
      for (std::size_t m = 0; m < 3; ++m) sum += s.w[(t * 3 + n) * 3 + m];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      // Hard edges: an incoming interaction gives the source a positive weight.
      for (std::size_t m = 0; m < 3; ++m)
        if (m != n) CHECK((s.w[(t * 3 + n) * 3 + m] > 0) == (s.edges[(t * 3 + m) * 3 + n] > 0.5));
    }
  for (double c : s.confidence) CHECK((c > 0 && c <= 1 + 1e-12));
  CHECK(s.interaction_mass >= 0);
  CHECK(s.interaction_mass <= 1);

  const EvalReport rep = evaluate_segmentation(params, cfg, {ep, ep});
  CHECK(rep.episodes == 2);
  CHECK(rep.episode_std.accuracy == 0.0);
  CHECK(rep.pooled.accuracy == doctest::Approx(rep.episode_mean.accuracy));
}

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "grass/experiment.hpp"
#include "grass/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace grass;

namespace {

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return "numeric_error";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape_error";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const std::out_of_range*>(&e)) return "out_of_range";
  if (dynamic_cast<const json::exception*>(&e)) return "config_error";
  return "runtime_error";
}

int fail(const std::string& command, const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", {{"command", command}, {"type", type}, {"message", message}}}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph switching dynamical systems: simulate, train, evaluate and segment"};
  app.require_subcommand(1);

  std::string config_path, profile = "paper", out;
  app.add_option("-c,--config", config_path, "JSON experiment config, layered over the profile");
  app.add_option("-p,--profile", profile, "base profile: paper or desk")->capture_default_str();
  app.add_option("-o,--out", out, "experiment directory (relative paths go under $GRASS_OUTPUT_ROOT)");

  auto* gen = app.add_subcommand("generate", "simulate the train/val/test splits");
  bool no_interaction = false;
  std::uint64_t data_seed = 0;
  double radius = -1;
  gen->add_flag("--no-interaction", no_interaction, "collision radius 0, so modes never switch");
  auto* data_seed_opt = gen->add_option("--data-seed", data_seed, "simulation seed");
  gen->add_option("--radius", radius, "collision radius override");

  std::string data_dir;
  auto* tr = app.add_subcommand("train", "train one model per seed");
  std::string variant;
  long long steps = -1;
  std::vector<std::uint64_t> seeds;
  tr->add_option("--data", data_dir, "dataset directory (default <out>/data)");
  tr->add_option("--variant", variant, "GRASS, MOSDS, GRASS-GT or INDEP");
  tr->add_option("--steps", steps, "total training steps");
  tr->add_option("--seed", seeds, "training seed(s), replaces the config list");

  auto* ev = app.add_subcommand("eval", "segmentation metrics of checkpoints on a split");
  std::vector<std::string> checkpoints;
  std::string split, engine, name = "eval";
  ev->add_option("--checkpoint", checkpoints, "checkpoint file(s); several are summarized as mean and std")->required();
  ev->add_option("--data", data_dir, "dataset directory (default <out>/data)");
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("--engine", engine, "inference engine for decoding");
  ev->add_option("--name", name, "report subdirectory under <out>")->capture_default_str();

  auto* seg = app.add_subcommand("segment", "per-timestep modes and edges of one episode");
  std::string checkpoint;
  std::size_t episode = 0;
  bool svg = false;
  seg->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  seg->add_option("--data", data_dir, "dataset directory (default <out>/data)");
  seg->add_option("--split", split, "train, val or test");
  seg->add_option("--episode", episode, "episode index within the split")->required();
  seg->add_option("--engine", engine, "inference engine for decoding");
  seg->add_flag("--svg", svg, "also render mode bands as SVG");

  auto* abl = app.add_subcommand("ablate", "object-count, mode-count and interaction sweeps");

  std::string command = argc > 1 ? argv[1] : "";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(command, "usage_error", e.what(), 2);
  }
  for (auto* sub : app.get_subcommands()) command = sub->get_name();

  try {
    experiment::ExperimentConfig cfg = experiment::ExperimentConfig::profile(profile);
    std::string config_text;
    if (!config_path.empty()) {
      std::ifstream in(config_path, std::ios::binary);
      if (!in) throw std::runtime_error("cannot read config " + config_path);
      config_text.assign(std::istreambuf_iterator<char>(in), {});
      cfg = experiment::ExperimentConfig::from_json(json::parse(config_text), cfg);
    }
    if (!out.empty()) cfg.output = out;
    if (!split.empty()) cfg.eval.split = split;
    if (!engine.empty()) cfg.eval.engine = inference::parse_engine(engine.c_str());
    const fs::path root = experiment::resolve_output(cfg.output);
    const fs::path data = data_dir.empty() ? root / "data" : fs::path(data_dir);
    fs::create_directories(root);
    if (!config_text.empty()) {
      std::ofstream echo(root / "config.input.json", std::ios::binary | std::ios::trunc);
      echo << config_text;
    }

    json result = {{"command", command}};
    if (command == "generate") {
      if (no_interaction) cfg.sim.radius = 0;
      if (radius >= 0) cfg.sim.radius = radius;
      if (*data_seed_opt) cfg.data_seed = data_seed;
      const auto g = experiment::cmd_generate(cfg, data);
      result["data"] = g.dir.string();
      result["events_per_object"] = g.events_per_object;
    } else if (command == "train") {
      if (!variant.empty()) cfg.model.variant = model::parse_variant(variant);
      if (steps >= 0) {
        cfg.train.total_steps = static_cast<std::size_t>(steps);
        cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, cfg.train.total_steps ? cfg.train.total_steps - 1 : 0);
      }
      if (!seeds.empty()) cfg.seeds = seeds;
      cfg.validate();
      json runs = json::array();
      for (const auto& r : experiment::cmd_train(cfg, data, root / "train"))
        runs.push_back({{"seed", r.seed},
                        {"checkpoint", r.best.string()},
                        {"final_checkpoint", r.final_checkpoint.string()},
                        {"best_step", r.result.best_step},
                        {"best_val_elbo", r.result.best_val_elbo},
                        {"skipped_steps", r.result.skipped_steps}});
      result["variant"] = model::variant_name(cfg.model.variant);
      result["runs"] = runs;
    } else if (command == "eval") {
      std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
      const auto s = experiment::cmd_eval(cfg, paths, data, root / name);
      result["report"] = s.json;
    } else if (command == "segment") {
      const auto s = experiment::cmd_segment(cfg, checkpoint, data, episode, root / "segment", svg);
      result["rows"] = s.N * s.T;
      result["interaction_mass"] = s.interaction_mass;
    } else if (command == "ablate") {
      result["report"] = experiment::cmd_ablate(cfg, root / "ablate");
    }
    std::cout << result.dump(2) << std::endl;
    return 0;
  } catch (const std::exception& e) {
    return fail(command, error_type(e), e.what(), 1);
  }
}

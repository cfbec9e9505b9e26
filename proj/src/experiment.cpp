#include "grass/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace grass::experiment {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const char* const kMetricNames[] = {"NMI", "ARI", "Accuracy", "F1"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

json scores_json(const metrics::Scores& s) {
  return {{"NMI", s.nmi}, {"ARI", s.ari}, {"Accuracy", s.accuracy}, {"F1", s.f1}};
}

void check_keys(const json& j, const json& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.contains(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
}

json patched(json base, const json& j, const std::string& where) {
  check_keys(j, base, where);
  base.merge_patch(j);
  return base;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

/// Last two path components, so reports do not depend on where a run lives.
std::string short_name(const fs::path& p) {
  const fs::path parent = p.parent_path().filename();
  return parent.empty() ? p.filename().string() : (parent / p.filename()).string();
}

std::pair<metrics::Scores, metrics::Scores> mean_std(const std::vector<metrics::Scores>& v) {
  metrics::Scores mean, sd;
  const double n = static_cast<double>(v.size());
  for (const auto& s : v) {
    mean.nmi += s.nmi / n;
    mean.ari += s.ari / n;
    mean.accuracy += s.accuracy / n;
    mean.f1 += s.f1 / n;
  }
  if (v.size() > 1) {
    for (const auto& s : v) {
      sd.nmi += (s.nmi - mean.nmi) * (s.nmi - mean.nmi);
      sd.ari += (s.ari - mean.ari) * (s.ari - mean.ari);
      sd.accuracy += (s.accuracy - mean.accuracy) * (s.accuracy - mean.accuracy);
      sd.f1 += (s.f1 - mean.f1) * (s.f1 - mean.f1);
    }
    for (double* x : {&sd.nmi, &sd.ari, &sd.accuracy, &sd.f1}) *x = std::sqrt(*x / (n - 1));
  }
  return {mean, sd};
}

}  // namespace

// --- configuration ----------------------------------------------------------------

nlohmann::json sim_to_json(const sim::SimConfig& c) {
  std::vector<std::string> modes;
  for (sim::Mode m : c.modes) modes.push_back(sim::mode_name(m));
  return {{"n_objects", c.n_objects}, {"radius", c.radius},   {"dt", c.dt},   {"substeps", c.substeps},
          {"n_steps", c.n_steps},     {"fps", c.fps},         {"modes", modes}, {"refractory", c.refractory}};
}

sim::SimConfig sim_from_json(const nlohmann::json& j, const sim::SimConfig& base) {
  const json m = patched(sim_to_json(base), j, "sim");
  sim::SimConfig c;
  c.n_objects = m.at("n_objects").get<std::size_t>();
  c.radius = m.at("radius").get<double>();
  c.dt = m.at("dt").get<double>();
  c.substeps = m.at("substeps").get<std::size_t>();
  c.n_steps = m.at("n_steps").get<std::size_t>();
  c.fps = m.at("fps").get<double>();
  c.refractory = m.at("refractory").get<std::size_t>();
  c.modes.clear();
  for (const auto& name : m.at("modes")) c.modes.push_back(sim::parse_mode(name.get<std::string>()));
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  sim.validate();
  model.validate();
  train.validate();
  if (model.N != sim.n_objects) throw std::invalid_argument("config: model N differs from the simulated object count");
  if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
  if (splits.train == 0 || splits.val == 0 || splits.test == 0)
    throw std::invalid_argument("config: every split needs at least one episode");
  if (eval.split != "train" && eval.split != "val" && eval.split != "test")
    throw std::invalid_argument("config: eval split must be train, val or test");
  if (!(ablate.target_events_per_object > 0)) throw std::invalid_argument("config: ablation event target must be positive");
  for (const auto& v : ablate.variants) model::parse_variant(v);
}

nlohmann::json ExperimentConfig::to_json() const {
  json model_j = model.to_json();
  model_j.erase("N");
  return {{"sim", sim_to_json(sim)},
          {"splits", {{"train", splits.train}, {"val", splits.val}, {"test", splits.test}}},
          {"data_seed", data_seed},
          {"model", model_j},
          {"train", train.to_json()},
          {"eval",
           {{"engine", inference::engine_name(eval.engine)},
            {"split", eval.split},
            {"limit", eval.limit},
            {"use_final", eval.use_final}}},
          {"ablate",
           {{"objects", ablate.objects},
            {"modes", ablate.modes},
            {"interaction", ablate.interaction},
            {"variants", ablate.variants},
            {"fix_interactions", ablate.fix_interactions},
            {"target_events_per_object", ablate.target_events_per_object},
            {"calibration_episodes", ablate.calibration_episodes}}},
          {"seeds", seeds},
          {"output", output}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const ExperimentConfig& base) {
  const json b = base.to_json();
  check_keys(j, b, "config");
  ExperimentConfig c = base;
  if (j.contains("sim")) c.sim = sim_from_json(j.at("sim"), base.sim);
  if (j.contains("splits")) {
    const json s = patched(b.at("splits"), j.at("splits"), "splits");
    c.splits = {s.at("train").get<std::size_t>(), s.at("val").get<std::size_t>(), s.at("test").get<std::size_t>()};
  }
  if (j.contains("data_seed")) c.data_seed = j.at("data_seed").get<std::uint64_t>();
  if (j.contains("model")) c.model = model::ModelConfig::from_json(patched(b.at("model"), j.at("model"), "model"));
  c.model.N = c.sim.n_objects;
  if (j.contains("train")) c.train = train::TrainConfig::from_json(patched(b.at("train"), j.at("train"), "train"));
  if (j.contains("eval")) {
    const json e = patched(b.at("eval"), j.at("eval"), "eval");
    c.eval.engine = inference::parse_engine(e.at("engine").get<std::string>().c_str());
    c.eval.split = e.at("split").get<std::string>();
    c.eval.limit = e.at("limit").get<std::size_t>();
    c.eval.use_final = e.at("use_final").get<bool>();
  }
  if (j.contains("ablate")) {
    const json a = patched(b.at("ablate"), j.at("ablate"), "ablate");
    c.ablate.objects = a.at("objects").get<std::vector<std::size_t>>();
    c.ablate.modes = a.at("modes").get<std::vector<std::size_t>>();
    c.ablate.interaction = a.at("interaction").get<std::vector<bool>>();
    c.ablate.variants = a.at("variants").get<std::vector<std::string>>();
    c.ablate.fix_interactions = a.at("fix_interactions").get<bool>();
    c.ablate.target_events_per_object = a.at("target_events_per_object").get<double>();
    c.ablate.calibration_episodes = a.at("calibration_episodes").get<std::size_t>();
  }
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("output")) c.output = j.at("output").get<std::string>();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::profile(const std::string& name) {
  ExperimentConfig c;
  c.train.usage_weight = 1.0;
  if (name == "paper") {
    c.train.usage_steps = 30000;
    return c;
  }
  if (name != "desk") throw std::invalid_argument("unknown profile '" + name + "' (expected paper or desk)");
  c.sim.n_objects = 2;
  c.sim.n_steps = 50;
  c.sim.radius = 5.0;
  c.splits = {500, 50, 100};
  c.model.N = 2;
  c.model.edge_hidden = 32;
  c.train.total_steps = 5000;
  c.train.warmup_steps = 500;
  c.train.lr_peak = 1e-3;
  c.train.lr_min = 1e-4;
  c.train.usage_steps = 2500;
  c.train.eval_every = 500;
  c.seeds = {0, 1, 2};
  c.output = "grass_desk";
  return c;
}

fs::path resolve_output(const fs::path& p) {
  if (p.is_absolute()) return p;
  const char* root = std::getenv("GRASS_OUTPUT_ROOT");
  return root && *root ? fs::path(root) / p : p;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// --- data -------------------------------------------------------------------------

double mean_events_per_object(const std::vector<sim::Episode>& episodes) {
  if (episodes.empty()) return 0.0;
  double total = 0;
  for (const auto& ep : episodes) total += 2.0 * static_cast<double>(ep.events.size()) / static_cast<double>(ep.n_objects);
  return total / static_cast<double>(episodes.size());
}

double calibrate_radius(const sim::SimConfig& base, double target, std::size_t episodes, std::uint64_t seed) {
  if (base.n_objects < 2) throw std::invalid_argument("calibrate_radius: needs at least two objects");
  auto rate = [&](double r) {
    sim::SimConfig c = base;
    c.radius = r;
    std::vector<sim::Episode> eps;
    for (std::size_t i = 0; i < episodes; ++i) eps.push_back(sim::generate_episode(c, derive_seed(seed, 7, i)));
    return mean_events_per_object(eps);
  };
  double lo = 0, hi = sim::kCanvas / 4;
  if (rate(hi) < target) return hi;
  for (int it = 0; it < 30; ++it) {
    const double mid = 0.5 * (lo + hi);
    (rate(mid) < target ? lo : hi) = mid;
  }
  return hi;
}

GenerateResult cmd_generate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  sim::generate_dataset(cfg.sim, cfg.splits, cfg.data_seed, out_dir);
  write_json(out_dir / "config.json", cfg.to_json());
  return {out_dir, mean_events_per_object(sim::read_episodes(out_dir / "train.grss"))};
}

std::vector<sim::Episode> load_split(const fs::path& data_dir, const std::string& split) {
  return sim::read_episodes(data_dir / (split + ".grss"));
}

// --- train / eval -----------------------------------------------------------------

std::vector<TrainRun> cmd_train(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
  cfg.validate();
  const auto train_set = load_split(data_dir, "train");
  const auto val_set = load_split(data_dir, "val");
  std::vector<TrainRun> runs;
  for (std::uint64_t seed : cfg.seeds) {
    ExperimentConfig run_cfg = cfg;
    run_cfg.train.seed = seed;
    run_cfg.seeds = {seed};
    TrainRun run;
    run.seed = seed;
    run.dir = out_dir / (model::variant_name(cfg.model.variant) + "_seed" + std::to_string(seed));
    fs::create_directories(run.dir);
    write_json(run.dir / "config.json", run_cfg.to_json());
    run.result = train::train_loop(run_cfg.train, run_cfg.model, train_set, val_set, run.dir);
    run.best = run.dir / "checkpoint.bin";
    run.final_checkpoint = run.dir / "checkpoint_final.bin";
    runs.push_back(std::move(run));
  }
  return runs;
}

EvalSummary cmd_eval(const ExperimentConfig& cfg, const std::vector<fs::path>& checkpoints, const fs::path& data_dir,
                     const fs::path& out_dir) {
  if (checkpoints.empty()) throw std::invalid_argument("eval: no checkpoints given");
  const auto episodes = load_split(data_dir, cfg.eval.split);
  train::SegmentOptions seg;
  seg.engine = cfg.eval.engine;
  EvalSummary out;
  json per = json::array();
  std::vector<metrics::Scores> pooled;
  double mass = 0;
  for (const fs::path& path : checkpoints) {
    const train::Checkpoint ck = train::load_checkpoint(path);
    if (ck.model.N != episodes.front().n_objects)
      throw std::invalid_argument("eval: checkpoint " + path.string() + " expects a different object count");
    if (ck.manifest.contains("train")) {
      seg.tau = ck.manifest.at("train").at("tau_end").get<double>();
      seg.gumbel_tau = ck.manifest.at("train").at("gumbel_tau_end").get<double>();
    }
    train::EvalReport rep = train::evaluate_segmentation(ck.params, ck.model, episodes, seg, cfg.eval.limit);
    out.checkpoints.push_back(short_name(path));
    per.push_back({{"checkpoint", short_name(path)},
                   {"variant", model::variant_name(ck.model.variant)},
                   {"K", ck.model.K},
                   {"pooled", scores_json(rep.pooled)},
                   {"episode_mean", scores_json(rep.episode_mean)},
                   {"episode_std", scores_json(rep.episode_std)},
                   {"interaction_mass", rep.interaction_mass}});
    pooled.push_back(rep.pooled);
    mass += rep.interaction_mass / static_cast<double>(checkpoints.size());
    out.reports.push_back(std::move(rep));
  }
  std::tie(out.mean, out.std) = mean_std(pooled);
  out.interaction_mass = mass;
  out.json = {{"metrics", {"NMI", "ARI", "Accuracy", "F1"}},
              {"split", cfg.eval.split},
              {"episodes", out.reports.front().episodes},
              {"pooling", "all objects and timesteps of the split form one labeling"},
              {"checkpoints", per},
              {"mean", scores_json(out.mean)},
              {"std", scores_json(out.std)},
              {"interaction_mass", out.interaction_mass}};
  fs::create_directories(out_dir);
  write_json(out_dir / "report.json", out.json);
  std::ostringstream csv;
  csv << "checkpoint";
  for (const char* m : kMetricNames) csv << ',' << m;
  csv << ",interaction_mass\n";
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    const auto& s = pooled[i];
    csv << out.checkpoints[i] << ',' << fmt(s.nmi) << ',' << fmt(s.ari) << ',' << fmt(s.accuracy) << ',' << fmt(s.f1)
        << ',' << fmt(out.reports[i].interaction_mass) << '\n';
  }
  csv << "mean," << fmt(out.mean.nmi) << ',' << fmt(out.mean.ari) << ',' << fmt(out.mean.accuracy) << ','
      << fmt(out.mean.f1) << ',' << fmt(out.interaction_mass) << '\n';
  csv << "std," << fmt(out.std.nmi) << ',' << fmt(out.std.ari) << ',' << fmt(out.std.accuracy) << ',' << fmt(out.std.f1)
      << ",\n";
  write_text(out_dir / "report.csv", csv.str());
  write_json(out_dir / "config.json", cfg.to_json());
  return out;
}

// --- segment ----------------------------------------------------------------------

std::string segmentation_csv(const train::Segmentation& s, const sim::Episode& ep) {
  const std::size_t N = s.N, T = s.T;
  std::ostringstream csv;
  csv << "t,object,mode,confidence,true_mode";
  for (std::size_t m = 0; m < N; ++m) csv << ",edge_from_" << m;
  for (std::size_t m = 0; m < N; ++m) csv << ",w_from_" << m;
  csv << '\n';
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n) {
      csv << t << ',' << n << ',' << s.modes[n][t] << ',' << fmt(s.confidence[t * N + n]) << ',' << ep.z_at(n, t);
      for (std::size_t m = 0; m < N; ++m) csv << ',' << fmt(m == n ? 0.0 : s.edges[(t * N + m) * N + n]);
      for (std::size_t m = 0; m < N; ++m) csv << ',' << fmt(s.w[(t * N + n) * N + m]);
      csv << '\n';
    }
  return csv.str();
}

std::string segmentation_svg(const train::Segmentation& s, const sim::Episode& ep) {
  static const char* palette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                  "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  const std::size_t N = s.N, T = s.T, cell = 8, band = 18, gap = 10, left = 90;
  const std::size_t width = left + T * cell + 10, height = N * (2 * band + gap) + 10;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<style>text{font:11px sans-serif}</style>\n";
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t y0 = 5 + n * (2 * band + gap);
    svg << "<text x=\"4\" y=\"" << y0 + 13 << "\">obj " << n << " pred</text>\n";
    svg << "<text x=\"4\" y=\"" << y0 + band + 13 << "\">obj " << n << " true</text>\n";
    // Consecutive equal labels merge into one rectangle per segment.
    for (int row = 0; row < 2; ++row) {
      std::size_t start = 0;
      for (std::size_t t = 1; t <= T; ++t) {
        auto label = [&](std::size_t u) { return row == 0 ? s.modes[n][u] : ep.z_at(n, u); };
        if (t < T && label(t) == label(start)) continue;
        svg << "<rect x=\"" << left + start * cell << "\" y=\"" << y0 + static_cast<std::size_t>(row) * band
            << "\" width=\"" << (t - start) * cell << "\" height=\"" << band - 2 << "\" fill=\""
            << palette[static_cast<std::size_t>(label(start)) % 10] << "\"/>\n";
        start = t;
      }
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

train::Segmentation cmd_segment(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                                std::size_t episode, const fs::path& out_dir, bool svg) {
  const auto episodes = load_split(data_dir, cfg.eval.split);
  if (episode >= episodes.size())
    throw std::out_of_range("segment: episode " + std::to_string(episode) + " out of range for split of size " +
                            std::to_string(episodes.size()));
  const train::Checkpoint ck = train::load_checkpoint(checkpoint);
  train::SegmentOptions seg;
  seg.engine = cfg.eval.engine;
  if (ck.manifest.contains("train")) {
    seg.tau = ck.manifest.at("train").at("tau_end").get<double>();
    seg.gumbel_tau = ck.manifest.at("train").at("gumbel_tau_end").get<double>();
  }
  const sim::Episode& ep = episodes[episode];
  train::Segmentation s = train::segment_episode(ck.params, ck.model, ep, seg);
  const std::string stem = "segment_" + cfg.eval.split + "_" + std::to_string(episode);
  write_text(out_dir / (stem + ".csv"), segmentation_csv(s, ep));
  if (svg) write_text(out_dir / (stem + ".svg"), segmentation_svg(s, ep));
  return s;
}

// --- ablate -----------------------------------------------------------------------

nlohmann::json cmd_ablate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_json(out_dir / "config.json", cfg.to_json());
  json report = json::object();

  struct Point {
    std::string label;
    ExperimentConfig cfg;
    bool calibrate = false;
  };
  auto run_sweep = [&](const std::string& sweep, const std::vector<Point>& points) {
    json rows = json::array();
    std::ostringstream csv;
    csv << "sweep,value,variant,radius,events_per_object,status";
    for (const char* m : kMetricNames) csv << ',' << m << "_mean," << m << "_std";
    csv << ",interaction_mass,error\n";
    for (const Point& p : points) {
      const fs::path dir = out_dir / sweep / p.label;
      ExperimentConfig pc = p.cfg;
      double events = 0;
      std::string data_error;
      try {
        if (p.calibrate)
          pc.sim.radius = calibrate_radius(pc.sim, cfg.ablate.target_events_per_object, cfg.ablate.calibration_episodes,
                                           cfg.data_seed);
        events = cmd_generate(pc, dir / "data").events_per_object;
      } catch (const std::exception& e) {
        data_error = e.what();
      }
      for (const std::string& variant : cfg.ablate.variants) {
        json row = {{"sweep", sweep}, {"value", p.label}, {"variant", variant}, {"radius", pc.sim.radius},
                    {"events_per_object", events}};
        try {
          if (!data_error.empty()) throw std::runtime_error(data_error);
          ExperimentConfig vc = pc;
          vc.model.variant = model::parse_variant(variant);
          vc.validate();
          const auto runs = cmd_train(vc, dir / "data", dir / "train");
          std::vector<fs::path> cks;
          for (const auto& r : runs) cks.push_back(vc.eval.use_final ? r.final_checkpoint : r.best);
          const EvalSummary ev = cmd_eval(vc, cks, dir / "data", dir / ("eval_" + variant));
          row["status"] = "ok";
          row["mean"] = scores_json(ev.mean);
          row["std"] = scores_json(ev.std);
          row["interaction_mass"] = ev.interaction_mass;
        } catch (const std::exception& e) {
          row["status"] = "failed";
          row["error"] = e.what();
        }
        csv << sweep << ',' << p.label << ',' << variant << ',' << fmt(pc.sim.radius) << ',' << fmt(events) << ','
            << row["status"].get<std::string>();
        if (row["status"] == "ok") {
          for (const char* m : kMetricNames)
            csv << ',' << fmt(row["mean"][m].get<double>()) << ',' << fmt(row["std"][m].get<double>());
          csv << ',' << fmt(row["interaction_mass"].get<double>()) << ",\n";
        } else {
          std::string err = row["error"].get<std::string>();
          std::replace(err.begin(), err.end(), ',', ';');
          std::replace(err.begin(), err.end(), '\n', ' ');
          csv << ",,,,,,,,," << err << '\n';
        }
        rows.push_back(row);
      }
    }
    write_text(out_dir / ("ablate_" + sweep + ".csv"), csv.str());
    report[sweep] = rows;
  };

  std::vector<Point> points;
  for (std::size_t n : cfg.ablate.objects) {
    ExperimentConfig c = cfg;
    c.sim.n_objects = c.model.N = n;
    points.push_back({"N" + std::to_string(n), c, cfg.ablate.fix_interactions && n > 1});
  }
  if (!points.empty()) run_sweep("objects", points);

  points.clear();
  for (std::size_t k : cfg.ablate.modes) {
    ExperimentConfig c = cfg;
    c.model.K = k;
    points.push_back({"K" + std::to_string(k), c, false});
  }
  if (!points.empty()) run_sweep("modes", points);

  points.clear();
  for (bool on : cfg.ablate.interaction) {
    ExperimentConfig c = cfg;
    if (!on) c.sim.radius = 0;
    points.push_back({on ? "on" : "off", c, false});
  }
  if (!points.empty()) run_sweep("interaction", points);

  write_json(out_dir / "ablate.json", report);
  return report;
}

}  // namespace grass::experiment

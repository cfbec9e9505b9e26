#include "grass/sim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace grass::sim {

static_assert(std::endian::native == std::endian::little, "dataset files assume a little-endian host");

namespace {

constexpr double kLvMin = 0.05;
constexpr double kLvMax = 4.4;
constexpr double kLvLevelMax = 3.918;  // level set that stays inside [kLvMin, kLvMax]^2
constexpr double kSpiralRadius = 1.2;  // L4 ball, invariant under the spiral field
constexpr double kSpiralScale = 23.0;
constexpr double kBounceScale = 16.0;
constexpr double kMargin = 4.0;

double l4_norm(Vec2 s) { return std::pow(std::pow(s.x, 4) + std::pow(s.y, 4), 0.25); }

bool finite(Vec2 s) { return std::isfinite(s.x) && std::isfinite(s.y); }

Vec2 rk4(Mode mode, Vec2 s, int aux, double h) {
  auto f = [&](Vec2 p) { return ode_derivative(mode, p, aux); };
  Vec2 k1 = f(s);
  Vec2 k2 = f({s.x + 0.5 * h * k1.x, s.y + 0.5 * h * k1.y});
  Vec2 k3 = f({s.x + 0.5 * h * k2.x, s.y + 0.5 * h * k2.y});
  Vec2 k4 = f({s.x + h * k3.x, s.y + h * k3.y});
  return {s.x + h / 6.0 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x), s.y + h / 6.0 * (k1.y + 2 * k2.y + 2 * k3.y + k4.y)};
}

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::LotkaVolterra: return "lv";
    case Mode::Spiral: return "spiral";
    case Mode::Bounce: return "bounce";
  }
  throw std::invalid_argument("unknown mode");
}

Mode parse_mode(const std::string& name) {
  if (name == "lv" || name == "lotka-volterra") return Mode::LotkaVolterra;
  if (name == "spiral") return Mode::Spiral;
  if (name == "bounce") return Mode::Bounce;
  throw std::invalid_argument("unknown mode '" + name + "'");
}

Vec2 ode_derivative(Mode mode, Vec2 s, int aux) {
  switch (mode) {
    case Mode::LotkaVolterra:
      if (!(s.x > 0 && s.y > 0)) throw std::domain_error("Lotka-Volterra state outside the positive quadrant");
      return {s.x - s.x * s.y, -s.y + s.x * s.y};
    case Mode::Spiral:
      return {-0.1 * s.x * s.x * s.x + 2 * s.y * s.y * s.y, -2 * s.x * s.x * s.x - 0.1 * s.y * s.y * s.y};
    case Mode::Bounce:
      return {0.0, aux >= 0 ? 2.0 : -2.0};
  }
  throw std::invalid_argument("unknown mode");
}

AffineMap default_map(Mode mode) {
  switch (mode) {
    case Mode::LotkaVolterra: {
      const double scale = (kCanvas - 2 * kMargin) / (kLvMax - kLvMin);
      return {{scale, scale}, {kMargin - kLvMin * scale, kMargin - kLvMin * scale}};
    }
    case Mode::Spiral: return {{kSpiralScale, kSpiralScale}, {kCanvas / 2, kCanvas / 2}};
    case Mode::Bounce: return {{kBounceScale, kBounceScale}, {kCanvas / 2, kCanvas / 2}};
  }
  throw std::invalid_argument("unknown mode");
}

void SimConfig::validate() const {
  if (n_objects < 1) throw std::invalid_argument("n_objects must be >= 1");
  if (!(dt > 0)) throw std::invalid_argument("dt must be > 0");
  if (!(radius >= 0)) throw std::invalid_argument("radius must be >= 0");
  if (substeps < 1) throw std::invalid_argument("substeps must be >= 1");
  if (n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
  if (modes.empty()) throw std::invalid_argument("mode set is empty");
}

double lv_invariant(Vec2 s) { return s.x - std::log(s.x) + s.y - std::log(s.y); }

Vec2 canvas_position(const ObjectState& state, const SimConfig& config) {
  return config.map(config.modes.at(state.mode)).to_canvas(state.s);
}

ObjectState integrate_step(const ObjectState& state, double dt, const SimConfig& config) {
  if (!(dt > 0)) throw std::invalid_argument("integrate_step: dt must be > 0");
  const Mode mode = config.modes.at(state.mode);
  ObjectState next = state;
  next.s = rk4(mode, state.s, state.aux, dt);
  if (mode == Mode::Bounce) {
    const double y = config.map(mode).to_canvas(next.s).y;
    const bool through_top = state.aux > 0 && y + config.radius > kCanvas;
    const bool through_bottom = state.aux < 0 && y - config.radius < 0;
    if (through_top || through_bottom) {
      next.aux = -state.aux;
      next.s = rk4(mode, state.s, next.aux, dt);
    }
  }
  if (!finite(next.s)) throw NumericError("simulation blow-up in mode " + mode_name(mode));
  return next;
}

std::vector<std::pair<std::size_t, std::size_t>> detect_collisions(const std::vector<Vec2>& positions,
                                                                   double radius) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const double limit = 2 * radius;
  for (std::size_t m = 0; m < positions.size(); ++m)
    for (std::size_t n = m + 1; n < positions.size(); ++n) {
      const double d = std::hypot(positions[m].x - positions[n].x, positions[m].y - positions[n].y);
      if (d < limit) out.emplace_back(m, n);
    }
  return out;
}

ObjectState hand_off(Vec2 canvas, std::size_t new_mode, double prev_vy, const SimConfig& config) {
  const Mode mode = config.modes.at(new_mode);
  ObjectState st;
  st.mode = new_mode;
  st.s = config.map(mode).to_ode(canvas);
  switch (mode) {
    case Mode::LotkaVolterra:
      st.s.x = std::clamp(st.s.x, kLvMin, kLvMax);
      st.s.y = std::clamp(st.s.y, kLvMin, kLvMax);
      // Pull toward the fixed point until the orbit fits on the canvas.
      while (lv_invariant(st.s) > kLvLevelMax) {
        st.s.x = 1.0 + 0.9 * (st.s.x - 1.0);
        st.s.y = 1.0 + 0.9 * (st.s.y - 1.0);
      }
      break;
    case Mode::Spiral: {
      const double r = l4_norm(st.s);
      if (r > kSpiralRadius) {
        st.s.x *= kSpiralRadius / r;
        st.s.y *= kSpiralRadius / r;
      }
      break;
    }
    case Mode::Bounce:
      st.aux = prev_vy < 0 ? -1 : 1;
      break;
  }
  return st;
}

void Episode::validate() const {
  if (y.size() != n_objects * n_steps * 2) throw std::invalid_argument("episode: y has wrong length");
  if (z.size() != n_objects * n_steps) throw std::invalid_argument("episode: z has wrong length");
  for (int v : z)
    if (v < 0 || static_cast<std::size_t>(v) >= n_modes) throw std::invalid_argument("episode: mode out of range");
  for (const Event& e : events) {
    if (e.t < 0 || static_cast<std::size_t>(e.t) >= n_steps || e.m < 0 || e.n < 0 ||
        static_cast<std::size_t>(e.m) >= n_objects || static_cast<std::size_t>(e.n) >= n_objects || e.m == e.n) {
      throw std::invalid_argument("episode: malformed event");
    }
  }
}

Episode simulate(const SimConfig& config, std::vector<ObjectState> states, std::uint64_t seed) {
  config.validate();
  if (states.size() != config.n_objects) throw std::invalid_argument("simulate: one initial state per object required");
  const std::size_t N = config.n_objects, T = config.n_steps;
  Episode ep;
  ep.n_objects = N;
  ep.n_steps = T;
  ep.n_modes = config.modes.size();
  for (Mode m : config.modes) ep.mode_names.push_back(mode_name(m));
  ep.dt = config.dt;
  ep.fps = config.fps;
  ep.radius = config.radius;
  ep.seed = seed;
  ep.y.assign(N * T * 2, 0.0);
  ep.z.assign(N * T, 0);

  std::map<std::pair<std::size_t, std::size_t>, long> last_event;
  const double h = config.dt / static_cast<double>(config.substeps);
  std::vector<Vec2> pos(N);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      pos[n] = canvas_position(states[n], config);
      ep.y[(n * T + t) * 2] = pos[n].x;
      ep.y[(n * T + t) * 2 + 1] = pos[n].y;
      ep.z[n * T + t] = static_cast<int>(states[n].mode);
    }
    if (t + 1 == T) break;

    std::vector<bool> swapped(N, false);
    for (auto [m, n] : detect_collisions(pos, config.radius)) {
      auto it = last_event.find({m, n});
      if (it != last_event.end() && static_cast<long>(t) - it->second < static_cast<long>(config.refractory)) continue;
      if (swapped[m] || swapped[n]) continue;
      auto vy = [&](const ObjectState& s) {
        const Mode mode = config.modes[s.mode];
        return config.map(mode).scale.y * ode_derivative(mode, s.s, s.aux).y;
      };
      const double vy_m = vy(states[m]), vy_n = vy(states[n]);
      const std::size_t mode_m = states[m].mode, mode_n = states[n].mode;
      states[m] = hand_off(pos[m], mode_n, vy_m, config);
      states[n] = hand_off(pos[n], mode_m, vy_n, config);
      swapped[m] = swapped[n] = true;
      last_event[{m, n}] = static_cast<long>(t);
      ep.events.push_back({static_cast<int>(t), static_cast<int>(m), static_cast<int>(n)});
    }

    for (std::size_t n = 0; n < N; ++n) {
      try {
        for (std::size_t k = 0; k < config.substeps; ++k) states[n] = integrate_step(states[n], h, config);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (object " + std::to_string(n) + ", frame " +
                           std::to_string(t) + ", seed " + std::to_string(seed) + ")");
      }
    }
  }
  return ep;
}

std::vector<ObjectState> random_initial_states(const SimConfig& config, Rng& rng) {
  config.validate();
  const std::size_t N = config.n_objects, K = config.modes.size();
  std::vector<std::size_t> modes(N);
  if (N <= K) {
    std::vector<std::size_t> perm(K);
    for (std::size_t k = 0; k < K; ++k) perm[k] = k;
    for (std::size_t i = K; i-- > 1;) std::swap(perm[i], perm[rng() % (i + 1)]);
    for (std::size_t n = 0; n < N; ++n) modes[n] = perm[n];
  } else {
    for (std::size_t n = 0; n < N; ++n) modes[n] = rng() % K;
  }

  auto draw = [&](std::size_t mode_index) {
    ObjectState st;
    st.mode = mode_index;
    switch (config.modes[mode_index]) {
      case Mode::LotkaVolterra:
        do {
          st.s = {0.3 + 2.7 * uniform01(rng), 0.3 + 2.7 * uniform01(rng)};
        } while (lv_invariant(st.s) > 3.5);
        break;
      case Mode::Spiral: {
        const double a = 2 * M_PI * uniform01(rng);
        const double r = 0.5 + 0.65 * uniform01(rng);
        st.s = {r * std::cos(a), r * std::sin(a)};
        break;
      }
      case Mode::Bounce: {
        const AffineMap map = config.map(Mode::Bounce);
        const double lo = config.radius + 1, hi = kCanvas - config.radius - 1;
        st.s = map.to_ode({kMargin + (kCanvas - 2 * kMargin) * uniform01(rng), lo + (hi - lo) * uniform01(rng)});
        st.aux = uniform01(rng) < 0.5 ? -1 : 1;
        break;
      }
    }
    return st;
  };

  std::vector<ObjectState> states(N);
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<Vec2> pos(N);
    for (std::size_t n = 0; n < N; ++n) {
      states[n] = draw(modes[n]);
      pos[n] = canvas_position(states[n], config);
    }
    if (detect_collisions(pos, config.radius).empty()) break;
  }
  return states;
}

Episode generate_episode(const SimConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  return simulate(config, random_initial_states(config, rng), seed);
}

// --- dataset files -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'R', 'S', 'S', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("dataset file truncated");
  return v;
}

}  // namespace

void write_episodes(const std::filesystem::path& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(episodes.size()));
  for (const Episode& ep : episodes) {
    ep.validate();
    nlohmann::json manifest = {
        {"meta", {{"dt", ep.dt}, {"fps", ep.fps}, {"radius", ep.radius}, {"seed", ep.seed}}},
        {"K", ep.n_modes},
        {"N", ep.n_objects},
        {"T", ep.n_steps},
        {"modes", ep.mode_names},
    };
    const std::string text = manifest.dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (double v : ep.y) put<double>(out, v);
    for (int v : ep.z) put<std::int16_t>(out, static_cast<std::int16_t>(v));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ep.events.size()));
    for (const Event& e : ep.events) {
      put<std::int32_t>(out, e.t);
      put<std::int32_t>(out, e.m);
      put<std::int32_t>(out, e.n);
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<Episode> read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error(path.string() + " is not a dataset file");
  if (get<std::uint32_t>(in) != kVersion) throw std::runtime_error("unsupported dataset version in " + path.string());
  const std::uint32_t count = get<std::uint32_t>(in);
  std::vector<Episode> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string text(get<std::uint32_t>(in), '\0');
    in.read(text.data(), static_cast<std::streamsize>(text.size()));
    if (!in) throw std::runtime_error("dataset file truncated");
    const nlohmann::json manifest = nlohmann::json::parse(text);
    Episode ep;
    ep.n_modes = manifest.at("K").get<std::size_t>();
    ep.n_objects = manifest.at("N").get<std::size_t>();
    ep.n_steps = manifest.at("T").get<std::size_t>();
    ep.mode_names = manifest.at("modes").get<std::vector<std::string>>();
    const auto& meta = manifest.at("meta");
    ep.dt = meta.at("dt").get<double>();
    ep.fps = meta.at("fps").get<double>();
    ep.radius = meta.at("radius").get<double>();
    ep.seed = meta.at("seed").get<std::uint64_t>();
    ep.y.resize(ep.n_objects * ep.n_steps * 2);
    for (double& v : ep.y) v = get<double>(in);
    ep.z.resize(ep.n_objects * ep.n_steps);
    for (int& v : ep.z) v = get<std::int16_t>(in);
    ep.events.resize(get<std::uint32_t>(in));
    for (Event& e : ep.events) {
      e.t = get<std::int32_t>(in);
      e.m = get<std::int32_t>(in);
      e.n = get<std::int32_t>(in);
    }
    ep.validate();
    out.push_back(std::move(ep));
  }
  return out;
}

void generate_dataset(const SimConfig& config, const SplitCounts& counts, std::uint64_t seed,
                      const std::filesystem::path& out_dir) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  const std::pair<const char*, std::size_t> splits[] = {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}};
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<Episode> episodes;
    episodes.reserve(splits[s].second);
    for (std::size_t i = 0; i < splits[s].second; ++i) episodes.push_back(generate_episode(config, derive_seed(seed, s, i)));
    write_episodes(out_dir / (std::string(splits[s].first) + ".grss"), episodes);
  }
}

}  // namespace grass::sim

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "grass/params.hpp"

// ODE-driven particle dataset: balls on a 64x64 canvas, each following one of
// the Lotka-Volterra / Spiral / Bounce fields, swapping fields on collision.

namespace grass::sim {

inline constexpr double kCanvas = 64.0;

enum class Mode { LotkaVolterra, Spiral, Bounce };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& name);

struct Vec2 {
  double x = 0;
  double y = 0;
};

/// aux is the bounce direction: +1 moves up (increasing canvas y), -1 down.
Vec2 ode_derivative(Mode mode, Vec2 s, int aux = 1);

/// canvas = offset + scale * ode, per axis.
struct AffineMap {
  Vec2 scale;
  Vec2 offset;
  Vec2 to_canvas(Vec2 s) const { return {offset.x + scale.x * s.x, offset.y + scale.y * s.y}; }
  Vec2 to_ode(Vec2 c) const { return {(c.x - offset.x) / scale.x, (c.y - offset.y) / scale.y}; }
};

AffineMap default_map(Mode mode);

struct SimConfig {
  std::size_t n_objects = 2;
  double radius = 2.0;
  double dt = 0.1;           ///< ODE time per recorded frame
  std::size_t substeps = 4;  ///< RK4 steps per frame
  std::size_t n_steps = 100;
  double fps = 10.0;
  std::vector<Mode> modes{Mode::LotkaVolterra, Mode::Spiral, Mode::Bounce};
  std::size_t refractory = 5;  ///< frames before the same pair may collide again

  void validate() const;
  AffineMap map(Mode m) const { return default_map(m); }
};

struct ObjectState {
  std::size_t mode = 0;  ///< index into SimConfig::modes
  Vec2 s;                ///< ODE coordinates
  int aux = 1;
};

/// One classical RK4 step. Bounce objects flip direction (and redo the step)
/// when the ball would leave the canvas through the top or bottom wall.
ObjectState integrate_step(const ObjectState& state, double dt, const SimConfig& config);

Vec2 canvas_position(const ObjectState& state, const SimConfig& config);

/// Unordered pairs (m < n) with distance < 2 * radius, in lexicographic order.
std::vector<std::pair<std::size_t, std::size_t>> detect_collisions(const std::vector<Vec2>& positions,
                                                                   double radius);

/// Re-expresses an object at its current canvas position in the coordinates of
/// a new mode. prev_vy is the canvas vertical velocity before the switch.
ObjectState hand_off(Vec2 canvas, std::size_t new_mode, double prev_vy, const SimConfig& config);

struct Event {
  int t = 0;  ///< the swap takes effect from frame t + 1
  int m = 0;
  int n = 0;
};

struct Episode {
  std::size_t n_objects = 0;
  std::size_t n_steps = 0;
  std::size_t n_modes = 0;
  std::vector<std::string> mode_names;
  double dt = 0.1;
  double fps = 10.0;
  double radius = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> y;  ///< [n][t][2]
  std::vector<int> z;     ///< [n][t]
  std::vector<Event> events;

  double y_at(std::size_t n, std::size_t t, std::size_t d) const { return y[(n * n_steps + t) * 2 + d]; }
  int z_at(std::size_t n, std::size_t t) const { return z[n * n_steps + t]; }
  void validate() const;
};

/// Deterministic simulation from given initial states.
Episode simulate(const SimConfig& config, std::vector<ObjectState> init, std::uint64_t seed = 0);

/// Random initial states (distinct modes when N <= K) followed by simulate().
std::vector<ObjectState> random_initial_states(const SimConfig& config, Rng& rng);
Episode generate_episode(const SimConfig& config, std::uint64_t seed);

/// Lotka-Volterra first integral x - ln x + y - ln y.
double lv_invariant(Vec2 s);

// --- dataset files -----------------------------------------------------------------

struct SplitCounts {
  std::size_t train = 4928;
  std::size_t val = 191;
  std::size_t test = 204;
};

void write_episodes(const std::filesystem::path& path, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes(const std::filesystem::path& path);

/// Writes train.grss, val.grss, test.grss under out_dir. Episode i of split s
/// uses seed derive_seed(seed, s, i).
void generate_dataset(const SimConfig& config, const SplitCounts& counts, std::uint64_t seed,
                      const std::filesystem::path& out_dir);

}  // namespace grass::sim

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "grass/autodiff.hpp"
#include "grass/tensor.hpp"

namespace grass {

/// Flat named collection of learnable arrays, kept in insertion order so that
/// serialization and optimizer state line up across runs.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t total_elements() const;

  Tensor& at(std::size_t i) { return values_[i]; }
  const Tensor& at(std::size_t i) const { return values_[i]; }

  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  /// Same names and shapes, all zeros.
  ParameterStore zeros_like() const;
  bool same_layout(const ParameterStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Leaves for every parameter of a store on one tape.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParameterStore& store);
  ad::Var operator[](const std::string& name) const;
  ad::Tape& tape() const { return *tape_; }
  /// Gradients after tape.backward(), in the store's layout.
  ParameterStore grads() const;

 private:
  ad::Tape* tape_;
  const ParameterStore* store_;
  std::vector<ad::Var> vars_;
};

using Rng = std::mt19937_64;

/// Independent stream for (seed, a, b) via splitmix64 mixing.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) fill.
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng);

double standard_normal(Rng& rng);
double uniform01(Rng& rng);  ///< in (0, 1), never exactly 0 or 1

/// Central-difference check of every entry of every parameter. Errors are
/// relative, with denominators floored at 1e-6 * max(1, |f|).
struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
};

using ScalarFn = std::function<ad::Var(const BoundParams&)>;

/// Throws std::runtime_error when fn is not deterministic at the base point.
GradCheckReport grad_check(const ScalarFn& fn, ParameterStore& params, double eps = 1e-5);

}  // namespace grass

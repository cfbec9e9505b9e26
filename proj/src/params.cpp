#include "grass/params.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace grass {

void ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return values_[it->second];
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return values_[it->second];
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

std::vector<double> ParameterStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_elements());
  for (const Tensor& t : values_) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

void ParameterStore::unflatten(std::span<const double> flat) {
  if (flat.size() != total_elements()) {
    throw ShapeError("unflatten: expected " + std::to_string(total_elements()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (Tensor& t : values_) {
    std::copy_n(flat.begin() + off, t.size(), t.data().begin());
    off += t.size();
  }
}

ParameterStore ParameterStore::zeros_like() const {
  ParameterStore out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], Tensor(values_[i].shape(), 0.0));
  return out;
}

bool ParameterStore::same_layout(const ParameterStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i].shape() != other.values_[i].shape()) return false;
  return true;
}

BoundParams::BoundParams(ad::Tape& tape, const ParameterStore& store) : tape_(&tape), store_(&store) {
  vars_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) vars_.push_back(tape.leaf(store.at(i)));
}

ad::Var BoundParams::operator[](const std::string& name) const {
  return vars_[store_->index_of(name)];
}

ParameterStore BoundParams::grads() const {
  ParameterStore out;
  for (std::size_t i = 0; i < vars_.size(); ++i) out.add(store_->names()[i], tape_->grad(vars_[i]));
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

double uniform01(Rng& rng) {
  // 53 random bits mapped to the open interval.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return u + 0x1.0p-54;
}

double standard_normal(Rng& rng) {
  // Box-Muller; spelled out so streams are identical across standard libraries.
  const double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (double& v : t.data()) v = (2.0 * uniform01(rng) - 1.0) * bound;
  return t;
}

GradCheckReport grad_check(const ScalarFn& fn, ParameterStore& params, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  auto evaluate = [&]() {
    ad::Tape tape(false);
    BoundParams bound(tape, params);
    return fn(bound).item();
  };

  ParameterStore analytic;
  double base = 0;
  {
    ad::Tape tape;
    BoundParams bound(tape, params);
    ad::Var loss = fn(bound);
    base = loss.item();
    tape.backward(loss);
    analytic = bound.grads();
  }
  if (evaluate() != base || evaluate() != base) {
    throw std::runtime_error("grad_check: function is not deterministic at the base point");
  }

  // Round-off in the difference quotient scales with |f|, so tiny gradients are
  // compared against an absolute floor instead.
  const double floor = 1e-6 * std::max(1.0, std::abs(base));
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& value = params.at(p);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + eps;
      const double fp = evaluate();
      value[i] = orig - eps;
      const double fm = evaluate();
      value[i] = orig;
      const double cd = (fp - fm) / (2.0 * eps);
      const double a = analytic.at(p)[i];
      const double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), floor});
      if (report.worst_param.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params.names()[p];
        report.worst_index = i;
        report.analytic = a;
        report.numeric = cd;
      }
    }
  }
  return report;
}

}  // namespace grass

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "grass/inference.hpp"
#include "test_support.hpp"

using namespace grass;
using namespace grass::inference;
using grass::testing::max_abs_diff;
using grass::testing::random_bundle;

namespace {

double lse(const std::vector<double>& v) {
  double mx = -INFINITY;
  for (double x : v) mx = std::max(mx, x);
  double s = 0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

void check_consistency(const PosteriorMarginals& pm, double tol) {
  for (std::size_t t = 0; t < pm.T; ++t)
    for (std::size_t n = 0; n < pm.N; ++n) {
      double s = 0;
      for (std::size_t k = 0; k < pm.K; ++k) s += pm.mode_prob(t, n, k);
      CHECK(std::abs(s - 1.0) < tol);
      if (t == 0) continue;
      for (std::size_t j = 0; j < pm.K; ++j) {
        double out = 0;
        for (std::size_t k = 0; k < pm.K; ++k) out += pm.x(t, n, j, k);
        CHECK(std::abs(out - pm.mode_prob(t - 1, n, j)) < tol);
      }
      for (std::size_t k = 0; k < pm.K; ++k) {
        double in = 0;
        for (std::size_t j = 0; j < pm.K; ++j) in += pm.x(t, n, j, k);
        CHECK(std::abs(in - pm.mode_prob(t, n, k)) < tol);
      }
    }
}

}  // namespace

TEST_CASE("joint engines match brute-force enumeration") {
  Rng rng(11);
  InferOptions opt;
  opt.full_xi = true;
  double worst = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t K = 1 + rng() % 3, M = 1 + rng() % 3, T = 1 + rng() % 5;
    TransitionBundle b = random_bundle(rng, T, 2, K, M);
    const PosteriorMarginals ref = brute_force_oracle(b, opt);
    for (Engine e : {Engine::ExactJoint, Engine::ExactNeighbors}) {
      const PosteriorMarginals pm = infer(b, e, opt);
      worst = std::max({worst, max_abs_diff(pm.gamma, ref.gamma), max_abs_diff(pm.xi, ref.xi),
                        max_abs_diff(pm.xi_full, ref.xi_full), std::abs(pm.loglik - ref.loglik)});
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("three objects: joint engines agree with enumeration") {
  Rng rng(5);
  for (int inst = 0; inst < 5; ++inst) {
    TransitionBundle b = random_bundle(rng, 3, 3, 2, 2);
    const PosteriorMarginals ref = brute_force_oracle(b);
    const PosteriorMarginals pm = infer(b, Engine::ExactNeighbors);
    CHECK(max_abs_diff(pm.gamma, ref.gamma) < 1e-9);
    CHECK(std::abs(pm.loglik - ref.loglik) < 1e-9);
  }
}

TEST_CASE("mean-field is exact for a single object") {
  Rng rng(3);
  for (int inst = 0; inst < 20; ++inst) {
    TransitionBundle b = random_bundle(rng, 2 + rng() % 6, 1, 1 + rng() % 3, 1 + rng() % 4);
    InferOptions opt;
    opt.full_xi = true;
    const PosteriorMarginals ref = brute_force_oracle(b, opt);
    const PosteriorMarginals pm = infer(b, Engine::MeanField, opt);
    CHECK(max_abs_diff(pm.gamma, ref.gamma) < 1e-9);
    CHECK(max_abs_diff(pm.xi_full, ref.xi_full) < 1e-9);
    CHECK(std::abs(pm.loglik - ref.loglik) < 1e-9);
  }
}

TEST_CASE("marginal consistency for every engine") {
  Rng rng(21);
  TransitionBundle b = random_bundle(rng, 6, 2, 3, 3);
  for (Engine e : {Engine::BruteForce, Engine::ExactJoint, Engine::ExactNeighbors, Engine::MeanField})
    check_consistency(infer(b, e), 1e-9);
}

TEST_CASE("single step reduces to prior times emission") {
  Rng rng(8);
  TransitionBundle b = random_bundle(rng, 1, 1, 3, 4);
  const PosteriorMarginals pm = infer(b, Engine::MeanField);
  std::vector<double> lp(3);
  for (std::size_t k = 0; k < 3; ++k) lp[k] = b.log_init[k] + b.obs(0, 0, k);
  const double z = lse(lp);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(pm.g(0, 0, k, 0) == doctest::Approx(std::exp(lp[k] - z)).epsilon(1e-12));
    for (std::size_t c = 1; c < 4; ++c) CHECK(pm.g(0, 0, k, c) == 0.0);
  }
  CHECK(pm.loglik == doctest::Approx(z).epsilon(1e-12));
}

TEST_CASE("uniform two-mode chain gives uniform posteriors") {
  TransitionBundle b;
  b.resize(2, 1, 2, 1);
  const PosteriorMarginals pm = infer(b, Engine::ExactJoint);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t k = 0; k < 2; ++k) CHECK(pm.g(t, 0, k, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("beta tables: terminal ones and the one-step reduction") {
  Rng rng(4);
  TransitionBundle b = random_bundle(rng, 2, 1, 2, 2);
  for (Engine e : {Engine::ExactJoint, Engine::MeanField}) {
    AlphaBeta ab = forward_pass(b, e);
    backward_pass(b, ab);
    const std::size_t S = b.K * b.M;
    for (std::size_t s = 0; s < S; ++s) CHECK(ab.log_beta[S + s] == 0.0);
    // beta_1(j, c) = sum over successors of C * A * B at t = 2.
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        const double h = b.hazard[j * 2 + c];
        double v = 0;
        for (std::size_t k = 0; k < 2; ++k) v += h * b.trans(1, 0, 0, j, k) * std::exp(b.obs(1, 0, k));
        if (c == 0) v += (1 - h) * std::exp(b.obs(1, 0, j));
        CHECK(std::exp(ab.log_beta[j * 2 + c]) == doctest::Approx(v).epsilon(1e-12));
      }
    // Both contractions give the same likelihood.
    std::vector<double> first(S), last(S);
    for (std::size_t s = 0; s < S; ++s) {
      first[s] = ab.log_alpha[s] + ab.log_beta[s];
      last[s] = ab.log_alpha[S + s];
    }
    CHECK(lse(first) == doctest::Approx(lse(last)).epsilon(1e-12));
  }
}

TEST_CASE("single mode: likelihood is the summed emissions") {
  Rng rng(9);
  TransitionBundle b = random_bundle(rng, 4, 2, 1, 3);
  const PosteriorMarginals pm = brute_force_oracle(b);
  const double direct = std::accumulate(b.log_obs.begin(), b.log_obs.end(), 0.0);
  CHECK(pm.loglik == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("count gating: no reset before the cap") {
  Rng rng(12);
  for (Engine e : {Engine::ExactJoint, Engine::ExactNeighbors, Engine::MeanField}) {
    for (int inst = 0; inst < 10; ++inst) {
      const std::size_t M = 2 + rng() % 3, T = 9;
      TransitionBundle b = random_bundle(rng, T, 2, 3, M);
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t c = 0; c + 1 < M; ++c) b.hazard[k * M + c] = 0.0;
      const auto z = decode_modes(infer(b, e));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t t = 1; t < T; ++t)
          if (t % M != 0) CHECK(z[n * T + t] == z[n * T + t - 1]);
    }
  }
}

TEST_CASE("shifting emissions shifts the likelihood only") {
  Rng rng(13);
  TransitionBundle b = random_bundle(rng, 5, 2, 2, 3);
  TransitionBundle s = b;
  const double shift = 7.25;
  for (double& v : s.log_obs) v += shift;
  for (Engine e : {Engine::ExactJoint, Engine::MeanField}) {
    const PosteriorMarginals p0 = infer(b, e), p1 = infer(s, e);
    // One constant per object and step.
    CHECK(p1.loglik - p0.loglik == doctest::Approx(shift * 5 * 2).epsilon(1e-12));
    CHECK(max_abs_diff(p0.gamma, p1.gamma) < 1e-10);
    CHECK(max_abs_diff(p0.xi, p1.xi) < 1e-10);
  }
}

TEST_CASE("mean-field approaches exact inference as interactions vanish") {
  Rng rng(14);
  TransitionBundle base = random_bundle(rng, 6, 2, 3, 3);
  double prev = INFINITY;
  for (double eps : {0.5, 0.1, 0.01, 0.0}) {
    TransitionBundle b = base;
    for (std::size_t t = 1; t < b.T; ++t)
      for (std::size_t n = 0; n < 2; ++n) {
        b.weight(t, n, n) = 1 - eps;
        b.weight(t, n, 1 - n) = eps;
      }
    const double d = max_abs_diff(infer(b, Engine::MeanField).gamma, infer(b, Engine::ExactJoint).gamma);
    CHECK(d <= prev + 1e-12);
    prev = d;
    if (eps == 0.0) CHECK(d < 1e-12);
  }
}

TEST_CASE("joint gamma is a distribution") {
  Rng rng(15);
  TransitionBundle b = random_bundle(rng, 4, 2, 2, 2);
  InferOptions opt;
  opt.joint_gamma = true;
  const PosteriorMarginals pm = infer(b, Engine::ExactJoint, opt);
  const PosteriorMarginals ref = brute_force_oracle(b, opt);
  const std::size_t S = 16;
  for (std::size_t t = 0; t < 4; ++t) {
    double s = 0;
    for (std::size_t i = 0; i < S; ++i) s += pm.joint_gamma[t * S + i];
    CHECK(std::abs(s - 1) < 1e-12);
  }
  CHECK(max_abs_diff(pm.joint_gamma, ref.joint_gamma) < 1e-9);
}

TEST_CASE("bundle validation") {
  Rng rng(16);
  TransitionBundle good = random_bundle(rng, 3, 2, 2, 2);
  CHECK_NOTHROW(good.validate());
  TransitionBundle b = good;
  b.trans(1, 0, 0, 0, 0) += 1e-6;
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);
  b = good;
  b.weight(2, 1, 0) += 0.1;
  CHECK_THROWS_AS(infer(b, Engine::MeanField), std::invalid_argument);
  b = good;
  b.hazard[1] = 0.5;  // count cap must end the segment
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);
  b = good;
  b.log_init[0] = 0.0;
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);
  b = good;
  b.log_obs[3] = INFINITY;
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);
  TransitionBundle empty;
  empty.resize(0, 1, 2, 2);
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
  CHECK_THROWS(parse_engine("gibbs"));
  CHECK(parse_engine("exact-joint") == Engine::ExactJoint);
}

TEST_CASE("brute force refuses oversized instances") {
  Rng rng(17);
  TransitionBundle b = random_bundle(rng, 12, 2, 3, 3);
  InferOptions opt;
  opt.max_sequences = 1e4;
  CHECK_THROWS_AS(brute_force_oracle(b, opt), std::invalid_argument);
}

TEST_CASE("collapsed forward pass is reported") {
  TransitionBundle b;
  b.resize(2, 1, 1, 1);
  // Finite per-step terms whose sum overflows to -inf.
  b.log_obs = {-1e308, -1e308};
  for (Engine e : {Engine::ExactJoint, Engine::MeanField}) CHECK_THROWS_AS(infer(b, e), NumericError);
}

TEST_CASE("decode: argmax over summed counts, ties to the lower mode") {
  PosteriorMarginals pm;
  pm.T = 2;
  pm.N = 1;
  pm.K = 3;
  pm.M = 2;
  pm.gamma = {0.3, 0.1, 0.0, 0.2, 0.4, 0.0,   // t=0: mode 0 totals 0.4, mode 1 0.2, mode 2 0.4
              0.0, 0.05, 0.9, 0.0, 0.05, 0.0};
  const auto z = decode_modes(pm);
  CHECK(z[0] == 0);
  CHECK(z[1] == 1);

  Rng rng(18);
  TransitionBundle b = random_bundle(rng, 6, 2, 3, 2);
  const PosteriorMarginals post = infer(b, Engine::ExactJoint);
  const auto dec = decode_modes(post);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 6; ++t) {
      std::vector<double> tot(3, 0.0);
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t c = 0; c < 2; ++c) tot[k] += post.gamma[((t * 2 + n) * 3 + k) * 2 + c];
      CHECK(dec[n * 6 + t] == static_cast<int>(std::max_element(tot.begin(), tot.end()) - tot.begin()));
    }
}

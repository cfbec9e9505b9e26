#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "grass/nn.hpp"

using namespace grass;
using namespace grass::ad;

namespace {

Tensor rnd(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
  Tensor t({r, c});
  for (double& v : t.data()) v = s * (2 * uniform01(rng) - 1);
  return t;
}

// Plain-loop reference arithmetic, independent of the tape.
Tensor ref_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

Tensor ref_affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out = ref_matmul(x, w);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b[j];
  return out;
}

Tensor ref_mlp(const ParameterStore& ps, const std::string& pre, const Tensor& x) {
  Tensor h = ref_affine(x, ps.get(pre + ".w1"), ps.get(pre + ".b1"));
  for (double& v : h.data()) v = std::max(v, 0.0);
  return ref_affine(h, ps.get(pre + ".w2"), ps.get(pre + ".b2"));
}

Tensor ref_gru(const ParameterStore& ps, const std::string& pre, const Tensor& x, const Tensor& h) {
  const std::size_t H = h.cols();
  Tensor xi = ref_affine(x, ps.get(pre + ".wi"), ps.get(pre + ".bi"));
  Tensor hh = ref_affine(h, ps.get(pre + ".wh"), ps.get(pre + ".bh"));
  Tensor out(h.shape());
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < H; ++j) {
      double r = sig(xi(i, j) + hh(i, j));
      double z = sig(xi(i, H + j) + hh(i, H + j));
      double n = std::tanh(xi(i, 2 * H + j) + r * hh(i, 2 * H + j));
      out(i, j) = (1 - z) * n + z * h(i, j);
    }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), a.cols() + b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
  }
  return out;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

// Random nonzero biases so checks exercise every parameter.
void jitter(ParameterStore& ps, Rng& rng) {
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (double& v : ps.at(i).data()) v += 0.1 * (2 * uniform01(rng) - 1);
}

}  // namespace

TEST_CASE("mlp: zero weights give zero output") {
  Rng rng(1);
  ParameterStore ps;
  nn::add_mlp(ps, "f", {3, 8, 2}, rng);
  for (std::size_t i = 0; i < ps.size(); ++i) ps.at(i).fill(0.0);
  Tape tape;
  BoundParams p(tape, ps);
  Var y = nn::Mlp::bind(p, "f")(tape.constant(rnd(4, 3, rng)));
  for (double v : y.value().data()) CHECK(v == 0.0);
}

TEST_CASE("mlp: identity construction passes input through") {
  Rng rng(2);
  ParameterStore ps;
  nn::add_mlp(ps, "f", {2, 4, 2}, rng);
  ps.get("f.w1") = Tensor::matrix(2, 4, {1, 0, -1, 0, 0, 1, 0, -1});
  ps.get("f.w2") = Tensor::matrix(4, 2, {1, 0, 0, 1, -1, 0, 0, -1});
  ps.get("f.b1").fill(0);
  ps.get("f.b2").fill(0);
  Tape tape;
  BoundParams p(tape, ps);
  Tensor x = rnd(5, 2, rng);
  check_close(nn::Mlp::bind(p, "f")(tape.constant(x)).value(), x, 0.0);
}

TEST_CASE("mlp: matches hand-rolled arithmetic") {
  Rng rng(3);
  ParameterStore ps;
  nn::add_mlp(ps, "f", {3, 8, 5}, rng);
  jitter(ps, rng);
  Tensor x = rnd(6, 3, rng, 2.0);
  Tape tape;
  BoundParams p(tape, ps);
  check_close(nn::Mlp::bind(p, "f")(tape.constant(x)).value(), ref_mlp(ps, "f", x), 1e-12);
  CHECK_THROWS_AS(nn::Mlp::bind(p, "f")(tape.constant(rnd(2, 4, rng))), ShapeError);
}

TEST_CASE("bigru: single step reduction") {
  Rng rng(4);
  ParameterStore ps;
  nn::add_bigru(ps, "enc", 2, 4, rng);
  jitter(ps, rng);
  Tensor y = rnd(1, 2, rng);
  Tape tape;
  BoundParams p(tape, ps);
  auto h = nn::bidirectional_encode(p, "enc", {tape.constant(y)});
  Tensor h0({1, 4}, 0.0);
  check_close(h[0].value(), concat(ref_gru(ps, "enc.fwd", y, h0), ref_gru(ps, "enc.bwd", y, h0)), 1e-12);
}

TEST_CASE("bigru: manual unroll over three steps") {
  Rng rng(5);
  ParameterStore ps;
  nn::add_bigru(ps, "enc", 2, 4, rng);
  jitter(ps, rng);
  std::vector<Tensor> ys{rnd(2, 2, rng), rnd(2, 2, rng), rnd(2, 2, rng)};
  Tape tape;
  BoundParams p(tape, ps);
  std::vector<Var> in;
  for (auto& y : ys) in.push_back(tape.constant(y));
  auto h = nn::bidirectional_encode(p, "enc", in);
  Tensor z({2, 4}, 0.0);
  Tensor f1 = ref_gru(ps, "enc.fwd", ys[0], z), f2 = ref_gru(ps, "enc.fwd", ys[1], f1),
         f3 = ref_gru(ps, "enc.fwd", ys[2], f2);
  Tensor b3 = ref_gru(ps, "enc.bwd", ys[2], z), b2 = ref_gru(ps, "enc.bwd", ys[1], b3),
         b1 = ref_gru(ps, "enc.bwd", ys[0], b2);
  check_close(h[0].value(), concat(f1, b1), 1e-12);
  check_close(h[1].value(), concat(f2, b2), 1e-12);
  check_close(h[2].value(), concat(f3, b3), 1e-12);
}

TEST_CASE("bigru: reversing the input swaps directions") {
  Rng rng(6);
  ParameterStore ps;
  nn::add_bigru(ps, "enc", 2, 3, rng);
  // Tie both directions to the same weights.
  for (const char* s : {".wi", ".wh", ".bi", ".bh"}) ps.get(std::string("enc.bwd") + s) = ps.get(std::string("enc.fwd") + s);
  std::vector<Tensor> ys;
  for (int t = 0; t < 5; ++t) ys.push_back(rnd(1, 2, rng));
  Tape tape;
  BoundParams p(tape, ps);
  std::vector<Var> fwd, rev;
  for (auto& y : ys) fwd.push_back(tape.constant(y));
  rev.assign(fwd.rbegin(), fwd.rend());
  auto a = nn::bidirectional_encode(p, "enc", fwd);
  auto b = nn::bidirectional_encode(p, "enc", rev);
  for (std::size_t t = 0; t < 5; ++t) {
    const Tensor& ha = a[t].value();
    const Tensor& hb = b[4 - t].value();
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(ha(0, j) == hb(0, 3 + j));
      CHECK(ha(0, 3 + j) == hb(0, j));
    }
  }
}

namespace {

struct PosteriorRun {
  std::vector<Tensor> mean, logvar, x;
};

PosteriorRun run_posterior(const ParameterStore& ps, const std::vector<Tensor>& hs, const std::vector<Tensor>& eps) {
  Tape tape;
  BoundParams p(tape, ps);
  nn::CausalPosterior post(p, "q", hs[0].rows(), 4);
  PosteriorRun out;
  Var x;
  for (std::size_t t = 0; t < hs.size(); ++t) {
    nn::Gaussian g = post.step(t, tape.constant(hs[t]), x);
    x = nn::reparameterize(g, eps[t]);
    out.mean.push_back(g.mean.value());
    out.logvar.push_back(g.logvar.value());
    out.x.push_back(x.value());
  }
  return out;
}

}  // namespace

TEST_CASE("causal posterior: manual unroll and causality") {
  Rng rng(7);
  ParameterStore ps;
  nn::add_causal_posterior(ps, "q", 8, 16, 8, 4, rng);
  jitter(ps, rng);
  std::vector<Tensor> hs, eps;
  for (int t = 0; t < 4; ++t) {
    hs.push_back(rnd(2, 8, rng));
    eps.push_back(rnd(2, 4, rng));
  }
  PosteriorRun run = run_posterior(ps, hs, eps);

  Tensor state({2, 16}, 0.0), xprev({2, 4}, 0.0);
  for (std::size_t t = 0; t < 4; ++t) {
    state = ref_gru(ps, "q.rnn", concat(hs[t], xprev), state);
    Tensor out = ref_mlp(ps, "q.head", state);
    Tensor mean({2, 4}), lv({2, 4}), x({2, 4});
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        mean(i, j) = out(i, j);
        lv(i, j) = std::clamp(out(i, 4 + j), -10.0, 10.0);
        x(i, j) = mean(i, j) + std::exp(lv(i, j) / 2) * eps[t](i, j);
      }
    check_close(run.mean[t], mean, 1e-12);
    check_close(run.logvar[t], lv, 1e-12);
    check_close(run.x[t], x, 1e-12);
    xprev = x;
  }

  // Changing h_{t+1} and later leaves the posterior at t untouched.
  auto hs2 = hs;
  hs2[2] = rnd(2, 8, rng);
  hs2[3] = rnd(2, 8, rng);
  PosteriorRun run2 = run_posterior(ps, hs2, eps);
  for (std::size_t t = 0; t < 2; ++t) {
    check_close(run2.mean[t], run.mean[t], 0.0);
    check_close(run2.logvar[t], run.logvar[t], 0.0);
  }
  bool changed = false;
  for (std::size_t i = 0; i < run.mean[2].size(); ++i) changed |= run2.mean[2][i] != run.mean[2][i];
  CHECK(changed);
}

TEST_CASE("causal posterior: first step sees only h_1") {
  Rng rng(8);
  ParameterStore ps;
  nn::add_causal_posterior(ps, "q", 8, 16, 8, 4, rng);
  Tape tape;
  BoundParams p(tape, ps);
  Tensor h = rnd(1, 8, rng);
  nn::CausalPosterior a(p, "q", 1, 4), b(p, "q", 1, 4);
  nn::Gaussian ga = a.step(0, tape.constant(h), Var{});
  nn::Gaussian gb = b.step(0, tape.constant(h), tape.constant(rnd(1, 4, rng)));
  check_close(ga.mean.value(), gb.mean.value(), 0.0);
}

TEST_CASE("causal posterior: out-of-order steps are rejected") {
  Rng rng(9);
  ParameterStore ps;
  nn::add_causal_posterior(ps, "q", 8, 16, 8, 4, rng);
  Tape tape;
  BoundParams p(tape, ps);
  nn::CausalPosterior post(p, "q", 1, 4);
  CHECK_THROWS_AS(post.step(1, tape.constant(rnd(1, 8, rng)), Var{}), std::logic_error);
}

TEST_CASE("causal posterior: logvar clamped") {
  Rng rng(10);
  ParameterStore ps;
  nn::add_causal_posterior(ps, "q", 2, 4, 4, 1, rng);
  ps.get("q.head.b2") = Tensor::row({0.0, 50.0});
  Tape tape;
  BoundParams p(tape, ps);
  nn::CausalPosterior post(p, "q", 1, 1);
  CHECK(post.step(0, tape.constant(rnd(1, 2, rng)), Var{}).logvar.item() == 10.0);
}

namespace {

// Direct per-pair recomputation of the message-passing equations.
Tensor ref_edges(const ParameterStore& ps, const Tensor& x) {
  const std::size_t N = x.rows();
  Tensor h1 = ref_mlp(ps, "e.emb", x);
  const std::size_t H = h1.cols();
  auto row = [](const Tensor& t, std::size_t i) {
    Tensor r({1, t.cols()});
    for (std::size_t j = 0; j < t.cols(); ++j) r[j] = t(i, j);
    return r;
  };
  std::vector<std::vector<Tensor>> e1(N, std::vector<Tensor>(N));
  for (std::size_t m = 0; m < N; ++m)
    for (std::size_t n = 0; n < N; ++n) e1[m][n] = ref_mlp(ps, "e.e1", concat(row(h1, m), row(h1, n)));
  std::vector<Tensor> h2(N);
  for (std::size_t m = 0; m < N; ++m) {
    Tensor agg({1, H}, 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < H; ++j) agg[j] += e1[n][m][j];
    h2[m] = ref_mlp(ps, "e.v1", agg);
  }
  Tensor out({N * N, 2});
  for (std::size_t m = 0; m < N; ++m)
    for (std::size_t n = 0; n < N; ++n) {
      Tensor l = ref_mlp(ps, "e.e2", concat(h2[m], h2[n]));
      for (std::size_t j = 0; j < 2; ++j) out(m * N + n, j) = l[j];
    }
  return out;
}

}  // namespace

TEST_CASE("edge encoder: N=3 matches direct recomputation, batched over time") {
  Rng rng(11);
  ParameterStore ps;
  nn::add_edge_encoder(ps, "e", {4, 16, 2}, rng);
  jitter(ps, rng);
  Tensor x0 = rnd(3, 4, rng, 2.0), x1 = rnd(3, 4, rng, 2.0);
  Tensor both({6, 4});
  std::copy(x0.data().begin(), x0.data().end(), both.data().begin());
  std::copy(x1.data().begin(), x1.data().end(), both.data().begin() + 12);
  Tape tape;
  BoundParams p(tape, ps);
  Tensor out = nn::edge_encoder(p, "e", tape.constant(both), 3).value();
  REQUIRE(out.rows() == 18);
  Tensor r0 = ref_edges(ps, x0), r1 = ref_edges(ps, x1);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(std::abs(out(i, j) - r0(i, j)) <= 1e-12);
      CHECK(std::abs(out(9 + i, j) - r1(i, j)) <= 1e-12);
    }
}

TEST_CASE("edge encoder: single object gives one self-pair") {
  Rng rng(12);
  ParameterStore ps;
  nn::add_edge_encoder(ps, "e", {4, 8, 2}, rng);
  Tape tape;
  BoundParams p(tape, ps);
  Var out = nn::edge_encoder(p, "e", tape.constant(rnd(1, 4, rng)), 1);
  CHECK(out.rows() == 1);
  CHECK(out.cols() == 2);
}

TEST_CASE("edge encoder: permutation equivariance") {
  Rng rng(13);
  ParameterStore ps;
  nn::add_edge_encoder(ps, "e", {4, 16, 3}, rng);
  jitter(ps, rng);
  const std::size_t N = 4;
  Tensor x = rnd(N, 4, rng, 2.0);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor xp({N, 4});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < 4; ++j) xp(i, j) = x(perm[i], j);
  Tape tape;
  BoundParams p(tape, ps);
  Tensor a = nn::edge_encoder(p, "e", tape.constant(x), N).value();
  Tensor b = nn::edge_encoder(p, "e", tape.constant(xp), N).value();
  for (std::size_t m = 0; m < N; ++m)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(std::abs(b(m * N + n, j) - a(perm[m] * N + perm[n], j)) <= 1e-12);
}

TEST_CASE("gumbel softmax: normalization, low-temperature limit, errors") {
  Rng rng(14);
  Tape tape;
  Tensor logits = rnd(50, 3, rng, 2.0);
  Tensor g = nn::sample_gumbel(50, 3, rng);
  Tensor soft = nn::gumbel_softmax(tape.constant(logits), g, 0.7, false).value();
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(soft(i, j) > 0);
      s += soft(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor cold = nn::gumbel_softmax(tape.constant(logits), g, 1e-4, false).value();
  for (std::size_t i = 0; i < 50; ++i) {
    std::size_t am = 0;
    for (std::size_t j = 1; j < 3; ++j)
      if (logits(i, j) + g(i, j) > logits(i, am) + g(i, am)) am = j;
    CHECK(cold(i, am) == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK_THROWS(nn::gumbel_softmax(tape.constant(logits), g, 0.0, false));
}

TEST_CASE("gumbel softmax: hard samples follow softmax(logits)") {
  Rng rng(15);
  const std::size_t S = 100000;
  Tensor row = Tensor::row({0.3, -0.5, 1.1});
  Tensor logits({S, 3});
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < 3; ++j) logits(i, j) = row[j];
  Tape tape(false);
  Tensor hard = nn::gumbel_softmax(tape.constant(logits), nn::sample_gumbel(S, 3, rng), 0.1, true).value();
  double z = std::exp(0.3) + std::exp(-0.5) + std::exp(1.1);
  for (std::size_t j = 0; j < 3; ++j) {
    double freq = 0;
    for (std::size_t i = 0; i < S; ++i) freq += hard(i, j);
    CHECK(std::abs(freq / S - std::exp(row[j]) / z) < 0.02);
  }
}

TEST_CASE("gaussian helpers") {
  Tape tape;
  Tensor lv = Tensor::row({0.3, -1.2});
  Var mean = tape.constant(Tensor::row({1.0, 2.0}));
  double at_mean = nn::gaussian_log_density(mean, mean, tape.constant(lv)).item();
  CHECK(at_mean == doctest::Approx(-0.5 * (0.3 - 1.2 + 2 * std::log(2 * M_PI))).epsilon(1e-14));
  CHECK(nn::gaussian_entropy(tape.constant(lv)).item() ==
        doctest::Approx(0.5 * (2 + 2 * std::log(2 * M_PI) - 0.9)).epsilon(1e-14));

  // Quadrature over a fine 1-D grid.
  const double mu = 0.4, v = 0.7;
  const std::size_t G = 20001;
  const double lo = mu - 12, hi = mu + 12, h = (hi - lo) / (G - 1);
  Tensor grid({G, 1});
  for (std::size_t i = 0; i < G; ++i) grid[i] = lo + h * i;
  Var d = nn::gaussian_log_density_rows(tape.constant(grid), tape.constant(Tensor({G, 1}, mu)),
                                        tape.constant(Tensor::scalar(v)));
  double integral = 0;
  for (std::size_t i = 0; i < G; ++i) integral += std::exp(d.value()[i]) * h * ((i == 0 || i == G - 1) ? 0.5 : 1.0);
  CHECK(std::abs(integral - 1.0) < 1e-3);
}

TEST_CASE("every block passes a gradient check") {
  Rng rng(16);
  ParameterStore ps;
  nn::add_mlp(ps, "mlp", {3, 8, 2}, rng);
  nn::add_gru(ps, "gru", 3, 4, rng);
  nn::add_bigru(ps, "enc", 2, 4, rng);
  nn::add_causal_posterior(ps, "q", 8, 16, 8, 4, rng);
  nn::add_edge_encoder(ps, "e", {4, 8, 2}, rng);
  jitter(ps, rng);
  Tensor x = rnd(2, 3, rng), h = rnd(2, 4, rng);
  std::vector<Tensor> ys{rnd(2, 2, rng), rnd(2, 2, rng), rnd(2, 2, rng)};
  std::vector<Tensor> eps{rnd(2, 4, rng), rnd(2, 4, rng), rnd(2, 4, rng)};
  std::vector<Tensor> hs{rnd(2, 8, rng), rnd(2, 8, rng), rnd(2, 8, rng)};
  Tensor xs = rnd(6, 4, rng), gum = nn::sample_gumbel(18, 2, rng), w = rnd(18, 2, rng);

  auto only = [&](const std::string& prefix) {
    ParameterStore sub;
    for (const auto& name : ps.names())
      if (name.rfind(prefix, 0) == 0) sub.add(name, ps.get(name));
    return sub;
  };

  SUBCASE("mlp") {
    ParameterStore sub = only("mlp");
    auto f = [&](const BoundParams& p) {
      return sum_all(square(nn::Mlp::bind(p, "mlp")(p.tape().constant(x))));
    };
    CHECK(grad_check(f, sub).max_rel_error < 1e-4);
  }
  SUBCASE("gru step") {
    ParameterStore sub = only("gru");
    auto f = [&](const BoundParams& p) {
      nn::Gru g = nn::Gru::bind(p, "gru");
      Var h1 = g.step(p.tape().constant(x), p.tape().constant(h));
      return sum_all(square(g.step(p.tape().constant(x), h1)));
    };
    CHECK(grad_check(f, sub).max_rel_error < 1e-4);
  }
  SUBCASE("bigru") {
    ParameterStore sub = only("enc");
    auto f = [&](const BoundParams& p) {
      std::vector<Var> in;
      for (auto& y : ys) in.push_back(p.tape().constant(y));
      auto out = nn::bidirectional_encode(p, "enc", in);
      std::vector<Var> all(out.begin(), out.end());
      return sum_all(square(concat_rows(all)));
    };
    CHECK(grad_check(f, sub).max_rel_error < 1e-4);
  }
  SUBCASE("causal posterior with reparameterization") {
    ParameterStore sub = only("q");
    auto f = [&](const BoundParams& p) {
      nn::CausalPosterior post(p, "q", 2, 4);
      Var xprev, total = p.tape().constant(Tensor::scalar(0.0));
      for (std::size_t t = 0; t < 3; ++t) {
        nn::Gaussian g = post.step(t, p.tape().constant(hs[t]), xprev);
        xprev = nn::reparameterize(g, eps[t]);
        total = add(total, add(sum_all(square(xprev)), nn::gaussian_entropy(g.logvar)));
      }
      return total;
    };
    CHECK(grad_check(f, sub).max_rel_error < 1e-4);
  }
  SUBCASE("edge encoder with soft gumbel sample") {
    ParameterStore sub = only("e.");
    auto f = [&](const BoundParams& p) {
      Var logits = nn::edge_encoder(p, "e", p.tape().constant(xs), 3);
      Var s = nn::gumbel_softmax(logits, gum, 0.5, false);
      return sum_all(mul(s, p.tape().constant(w)));
    };
    CHECK(grad_check(f, sub).max_rel_error < 1e-4);
  }
}

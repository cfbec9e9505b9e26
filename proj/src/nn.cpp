#include "grass/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace grass::nn {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Var expand_rows(Var row, std::size_t rows) {
  if (row.rows() == rows) return row;
  if (row.rows() != 1) throw ShapeError("expected a single broadcast row");
  return ad::gather_rows(row, std::vector<std::size_t>(rows, 0));
}

}  // namespace

void add_mlp(ParameterStore& store, const std::string& prefix, MlpSpec spec, Rng& rng) {
  if (spec.in == 0 || spec.hidden == 0 || spec.out == 0) throw std::invalid_argument("mlp sizes must be positive");
  store.add(prefix + ".w1", uniform_init({spec.in, spec.hidden}, spec.in, rng));
  store.add(prefix + ".b1", uniform_init({1, spec.hidden}, spec.in, rng));
  store.add(prefix + ".w2", uniform_init({spec.hidden, spec.out}, spec.hidden, rng));
  store.add(prefix + ".b2", uniform_init({1, spec.out}, spec.hidden, rng));
}

Mlp Mlp::bind(const BoundParams& p, const std::string& prefix) {
  return Mlp{p[prefix + ".w1"], p[prefix + ".b1"], p[prefix + ".w2"], p[prefix + ".b2"]};
}

Var Mlp::operator()(Var x) const {
  Var h = ad::relu(ad::add_row(ad::matmul(x, w1), b1));
  return ad::add_row(ad::matmul(h, w2), b2);
}

void add_gru(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
  if (in == 0 || hidden == 0) throw std::invalid_argument("gru sizes must be positive");
  store.add(prefix + ".wi", uniform_init({in, 3 * hidden}, hidden, rng));
  store.add(prefix + ".wh", uniform_init({hidden, 3 * hidden}, hidden, rng));
  store.add(prefix + ".bi", Tensor({1, 3 * hidden}, 0.0));
  store.add(prefix + ".bh", Tensor({1, 3 * hidden}, 0.0));
}

Gru Gru::bind(const BoundParams& p, const std::string& prefix) {
  Gru g{p[prefix + ".wi"], p[prefix + ".wh"], p[prefix + ".bi"], p[prefix + ".bh"], 0};
  g.hidden = g.wh.rows();
  return g;
}

Var Gru::step(Var x, Var h) const {
  const std::size_t H = hidden;
  Var xi = ad::add_row(ad::matmul(x, wi), bi);
  Var hh = ad::add_row(ad::matmul(h, wh), bh);
  Var r = ad::sigmoid(ad::add(ad::slice_cols(xi, 0, H), ad::slice_cols(hh, 0, H)));
  Var z = ad::sigmoid(ad::add(ad::slice_cols(xi, H, H), ad::slice_cols(hh, H, H)));
  Var n = ad::tanh(ad::add(ad::slice_cols(xi, 2 * H, H), ad::mul(r, ad::slice_cols(hh, 2 * H, H))));
  // (1 - z) * n + z * h
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

Var Gru::zero_state(std::size_t rows) const { return wh.tape->constant(Tensor({rows, hidden}, 0.0)); }

void add_bigru(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
  add_gru(store, prefix + ".fwd", in, hidden, rng);
  add_gru(store, prefix + ".bwd", in, hidden, rng);
}

std::vector<Var> bidirectional_encode(const BoundParams& p, const std::string& prefix,
                                      const std::vector<Var>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("bidirectional_encode: empty sequence");
  const std::size_t T = inputs.size();
  const std::size_t rows = inputs[0].rows();
  Gru fwd = Gru::bind(p, prefix + ".fwd");
  Gru bwd = Gru::bind(p, prefix + ".bwd");
  std::vector<Var> hf(T), hb(T);
  Var h = fwd.zero_state(rows);
  for (std::size_t t = 0; t < T; ++t) hf[t] = h = fwd.step(inputs[t], h);
  h = bwd.zero_state(rows);
  for (std::size_t t = T; t-- > 0;) hb[t] = h = bwd.step(inputs[t], h);
  std::vector<Var> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Var> parts{hf[t], hb[t]};
    out[t] = ad::concat_cols(parts);
  }
  return out;
}

void add_causal_posterior(ParameterStore& store, const std::string& prefix, std::size_t h_dim,
                          std::size_t rnn_hidden, std::size_t mlp_hidden, std::size_t x_dim, Rng& rng) {
  add_gru(store, prefix + ".rnn", h_dim + x_dim, rnn_hidden, rng);
  add_mlp(store, prefix + ".head", {rnn_hidden, mlp_hidden, 2 * x_dim}, rng);
}

CausalPosterior::CausalPosterior(const BoundParams& p, const std::string& prefix, std::size_t rows,
                                 std::size_t x_dim)
    : gru_(Gru::bind(p, prefix + ".rnn")), head_(Mlp::bind(p, prefix + ".head")), x_dim_(x_dim) {
  state_ = gru_.zero_state(rows);
  zero_x_ = p.tape().constant(Tensor({rows, x_dim}, 0.0));
}

Gaussian CausalPosterior::step(std::size_t t, Var h_t, Var x_prev) {
  if (t != t_) {
    throw std::logic_error("causal posterior: expected step " + std::to_string(t_) + ", got " + std::to_string(t));
  }
  std::vector<Var> parts{h_t, t == 0 ? zero_x_ : x_prev};
  state_ = gru_.step(ad::concat_cols(parts), state_);
  Var out = head_(state_);
  ++t_;
  return Gaussian{ad::slice_cols(out, 0, x_dim_),
                  ad::clamp(ad::slice_cols(out, x_dim_, x_dim_), kLogvarMin, kLogvarMax)};
}

Var reparameterize(const Gaussian& g, const Tensor& eps) {
  Var noise = g.mean.tape->constant(eps);
  return ad::add(g.mean, ad::mul(ad::exp(ad::scale(g.logvar, 0.5)), noise));
}

void add_edge_encoder(ParameterStore& store, const std::string& prefix, EdgeEncoderSpec spec, Rng& rng) {
  const std::size_t H = spec.hidden;
  add_mlp(store, prefix + ".emb", {spec.x_dim, H, H}, rng);
  add_mlp(store, prefix + ".e1", {2 * H, H, H}, rng);
  add_mlp(store, prefix + ".v1", {H, H, H}, rng);
  add_mlp(store, prefix + ".e2", {2 * H, spec.edge_types, spec.edge_types}, rng);
}

Var edge_encoder(const BoundParams& p, const std::string& prefix, Var x, std::size_t n_objects) {
  const std::size_t N = n_objects;
  if (N == 0 || x.rows() % N != 0) throw ShapeError("edge_encoder: rows must be a multiple of the object count");
  const std::size_t groups = x.rows() / N;
  std::vector<std::size_t> src, dst;
  src.reserve(groups * N * N);
  dst.reserve(groups * N * N);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t m = 0; m < N; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        src.push_back(g * N + m);
        dst.push_back(g * N + n);
      }
  auto pairwise = [&](Var nodes) {
    std::vector<Var> parts{ad::gather_rows(nodes, src), ad::gather_rows(nodes, dst)};
    return ad::concat_cols(parts);
  };
  Var h1 = Mlp::bind(p, prefix + ".emb")(x);
  Var e1 = Mlp::bind(p, prefix + ".e1")(pairwise(h1));
  // Node m aggregates every edge pointing into it.
  Var h2 = Mlp::bind(p, prefix + ".v1")(ad::segment_sum_rows(e1, dst, groups * N));
  return Mlp::bind(p, prefix + ".e2")(pairwise(h2));
}

Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor g({rows, cols});
  for (double& v : g.data()) v = -std::log(-std::log(uniform01(rng)));
  return g;
}

Var gumbel_softmax(Var logits, const Tensor& gumbel, double tau, bool hard) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_softmax: tau must be positive");
  Var soft = ad::softmax_rows(ad::add(logits, logits.tape->constant(gumbel)), tau);
  return hard ? ad::straight_through_onehot(soft) : soft;
}

Var tempered_softmax(Var logits, double tau) { return ad::softmax_rows(logits, tau); }

Var gaussian_log_density_rows(Var x, Var mean, Var logvar) {
  Var lv = expand_rows(logvar, x.rows());
  Var diff = ad::sub(x, mean);
  Var quad = ad::mul(ad::square(diff), ad::exp(ad::neg(lv)));
  Var terms = ad::add_scalar(ad::add(quad, lv), kLog2Pi);
  return ad::scale(ad::sum_rows(terms), -0.5);
}

Var gaussian_log_density(Var x, Var mean, Var logvar) {
  return ad::sum_all(gaussian_log_density_rows(x, mean, logvar));
}

Var gaussian_entropy(Var logvar) {
  return ad::scale(ad::sum_all(ad::add_scalar(logvar, 1.0 + kLog2Pi)), 0.5);
}

}  // namespace grass::nn

#include "grass/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace grass::ad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const MatR>;
using MapM = Eigen::Map<MatR>;

MapC view(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
MapM view(Tensor& t) { return MapM(t.data().data(), t.rows(), t.cols()); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an invalid Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != a.tape) throw std::invalid_argument("operands live on different tapes");
  return t;
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(Var a, const char* op, F f, D dfdx) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const bool rg = tape.any_requires_grad({a});
  return tape.push(std::move(y), rg, [ia = a.id, dfdx](Tape& t, int self) {
    Tensor* ga = t.accum(ia);
    if (!ga) return;
    const Tensor& x = t.value_ref(ia);
    const Tensor& y = t.value_ref(self);
    const Tensor& g = t.grad_ref(self);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * dfdx(x[i], y[i]);
  }, op);
}

}  // namespace

const Tensor& Var::value() const {
  if (!valid()) throw std::invalid_argument("value() of an invalid Var");
  return tape->value(*this);
}

// --- Tape -------------------------------------------------------------------

Var Tape::leaf(Tensor value) { return push(std::move(value), record_, nullptr, "leaf"); }

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr, "constant"); }

void Tape::check(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::invalid_argument("Var is not a node on this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

Tensor Tape::grad(Var v) const {
  check(v);
  const Node& n = nodes_[v.id];
  if (n.grad.size() == n.value.size() && n.grad.size() > 0) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

bool Tape::any_requires_grad(std::initializer_list<Var> inputs) const {
  if (!record_) return false;
  for (Var v : inputs) {
    check(v);
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

bool Tape::any_requires_grad(std::span<const Var> inputs) const {
  if (!record_) return false;
  for (Var v : inputs) {
    check(v);
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Var Tape::push(Tensor value, bool requires_grad, BackwardFn fn, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
  Node node;
  node.value = std::move(value);
  node.requires_grad = record_ && requires_grad;
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor* Tape::accum(int id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor(n.value.shape(), 0.0);
  }
  return &n.grad;
}

void Tape::backward(Var loss) {
  check(loss);
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(nodes_[loss.id].value.shape()));
  }
  if (backward_done_) throw std::logic_error("backward: tape already differentiated");
  backward_done_ = true;
  Tensor* seed = accum(loss.id);
  if (!seed) return;
  (*seed)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

// --- arithmetic ---------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, b}), [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    for (int id : {ia, ib}) {
      if (Tensor* gx = t.accum(id)) for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  }, "add");
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, b}), [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gb = t.accum(ib)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  }, "sub");
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, b}), [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& av = t.value_ref(ia);
    const Tensor& bv = t.value_ref(ib);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (Tensor* gb = t.accum(ib)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  }, "mul");
}

Var div(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same(a.value(), b.value(), "div");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= b.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, b}), [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& bv = t.value_ref(ib);
    const Tensor& yv = t.value_ref(self);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    if (Tensor* gb = t.accum(ib)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * yv[i] / bv[i];
  }, "div");
}

Var add_row(Var a, Var row) {
  Tape& tape = tape_of(a, row);
  const Tensor& av = a.value();
  require_rank2(av, "add_row");
  if (row.value().rows() != 1 || row.value().cols() != av.cols()) {
    throw ShapeError("add_row: row " + shape_string(row.value().shape()) + " vs " + shape_string(av.shape()));
  }
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) += row.value()[j];
  return tape.push(std::move(y), tape.any_requires_grad({a, row}), [ia = a.id, ib = row.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gb = t.accum(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g(i, j);
  }, "add_row");
}

Var add_col(Var a, Var col) {
  Tape& tape = tape_of(a, col);
  const Tensor& av = a.value();
  require_rank2(av, "add_col");
  if (col.value().cols() != 1 || col.value().rows() != av.rows()) {
    throw ShapeError("add_col: col " + shape_string(col.value().shape()) + " vs " + shape_string(av.shape()));
  }
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) += col.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, col}), [ia = a.id, ib = col.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gb = t.accum(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[i] += g(i, j);
  }, "add_col");
}

Var mul_row(Var a, Var row) {
  Tape& tape = tape_of(a, row);
  const Tensor& av = a.value();
  require_rank2(av, "mul_row");
  if (row.value().rows() != 1 || row.value().cols() != av.cols()) {
    throw ShapeError("mul_row: row " + shape_string(row.value().shape()) + " vs " + shape_string(av.shape()));
  }
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) *= row.value()[j];
  return tape.push(std::move(y), tape.any_requires_grad({a, row}), [ia = a.id, ib = row.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& av = t.value_ref(ia);
    const Tensor& bv = t.value_ref(ib);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(i, j) * bv[j];
    if (Tensor* gb = t.accum(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g(i, j) * av(i, j);
  }, "mul_row");
}

Var mul_col(Var a, Var col) {
  Tape& tape = tape_of(a, col);
  const Tensor& av = a.value();
  require_rank2(av, "mul_col");
  if (col.value().cols() != 1 || col.value().rows() != av.rows()) {
    throw ShapeError("mul_col: col " + shape_string(col.value().shape()) + " vs " + shape_string(av.shape()));
  }
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) *= col.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, col}), [ia = a.id, ib = col.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& av = t.value_ref(ia);
    const Tensor& bv = t.value_ref(ib);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(i, j) * bv[i];
    if (Tensor* gb = t.accum(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[i] += g(i, j) * av(i, j);
  }, "mul_col");
}

Var div_col(Var a, Var col) {
  Tape& tape = tape_of(a, col);
  const Tensor& av = a.value();
  require_rank2(av, "div_col");
  if (col.value().cols() != 1 || col.value().rows() != av.rows()) {
    throw ShapeError("div_col: col " + shape_string(col.value().shape()) + " vs " + shape_string(av.shape()));
  }
  Tensor y = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) /= col.value()[i];
  return tape.push(std::move(y), tape.any_requires_grad({a, col}), [ia = a.id, ib = col.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    const Tensor& yv = t.value_ref(self);
    const Tensor& bv = t.value_ref(ib);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(i, j) / bv[i];
    if (Tensor* gb = t.accum(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[i] -= g(i, j) * yv(i, j) / bv[i];
  }, "div_col");
}

Var scale(Var a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

// --- linear algebra -----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor y({av.rows(), bv.cols()});
  view(y).noalias() = view(av) * view(bv);
  return tape.push(std::move(y), tape.any_requires_grad({a, b}), [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia)) view(*ga).noalias() += view(g) * view(t.value_ref(ib)).transpose();
    if (Tensor* gb = t.accum(ib)) view(*gb).noalias() += view(t.value_ref(ia)).transpose() * view(g);
  }, "matmul");
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "transpose");
  Tensor y({av.cols(), av.rows()});
  view(y) = view(av).transpose();
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id](Tape& t, int self) {
    if (Tensor* ga = t.accum(ia)) view(*ga) += view(t.grad_ref(self)).transpose();
  }, "transpose");
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& tape = tape_of(a);
  Tensor y = a.value().reshaped({rows, cols});
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  }, "reshape");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& tape = tape_of(parts[0]);
  const std::size_t r = parts[0].value().rows();
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    tape.check(p);
    if (p.value().rows() != r) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor y({r, total});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(&pv.data()[i * pv.cols()], pv.cols(), &y.data()[i * total + off]);
    off += pv.cols();
  }
  return tape.push(std::move(y), tape.any_requires_grad(parts), [ids, widths, r, total](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = t.accum(ids[k]))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*gp)(i, j) += g[i * total + off + j];
      off += widths[k];
    }
  }, "concat_cols");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& tape = tape_of(parts[0]);
  const std::size_t c = parts[0].value().cols();
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (Var p : parts) {
    tape.check(p);
    if (p.value().cols() != c) throw ShapeError("concat_rows: column count mismatch");
    ids.push_back(p.id);
    sizes.push_back(p.value().size());
    total += p.value().rows();
  }
  Tensor y({total, c});
  std::size_t off = 0;
  for (Var p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + off);
    off += p.value().size();
  }
  return tape.push(std::move(y), tape.any_requires_grad(parts), [ids, sizes](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = t.accum(ids[k]))
        for (std::size_t i = 0; i < sizes[k]; ++i) (*gp)[i] += g[off + i];
      off += sizes[k];
    }
  }, "concat_rows");
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "slice_rows");
  if (begin + count > av.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t c = av.cols();
  Tensor y({count, c});
  std::copy_n(av.data().begin() + begin * c, count * c, y.data().begin());
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, begin, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * c + i] += g[i];
  }, "slice_rows");
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "slice_cols");
  if (begin + count > av.cols()) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t r = av.rows();
  Tensor y({r, count});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) y(i, j) = av(i, begin + j);
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, begin, count, r](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) (*ga)(i, begin + j) += g(i, j);
  }, "slice_cols");
}

Var gather_rows(Var a, std::vector<std::size_t> index) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "gather_rows");
  const std::size_t c = av.cols();
  Tensor y({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.rows()) throw ShapeError("gather_rows: index out of bounds");
    std::copy_n(av.data().begin() + index[i] * c, c, y.data().begin() + i * c);
  }
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, index = std::move(index), c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[index[i] * c + j] += g[i * c + j];
  }, "gather_rows");
}

Var segment_sum_rows(Var a, std::vector<std::size_t> segment, std::size_t segments) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "segment_sum_rows");
  if (segment.size() != av.rows()) throw ShapeError("segment_sum_rows: one segment id per row required");
  const std::size_t c = av.cols();
  Tensor y({segments, c});
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] >= segments) throw ShapeError("segment_sum_rows: segment id out of range");
    for (std::size_t j = 0; j < c; ++j) y(segment[i], j) += av(i, j);
  }
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, segment = std::move(segment), c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < segment.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(segment[i], j);
  }, "segment_sum_rows");
}

// --- nonlinearities -------------------------------------------------------------

Var sigmoid(Var a) {
  return unary(a, "sigmoid",
               [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// --- normalizers ------------------------------------------------------------------

Var softmax_rows(Var a, double temperature) {
  Tape& tape = tape_of(a);
  if (!(temperature > 0)) throw std::invalid_argument("softmax_rows: temperature must be > 0");
  const Tensor& av = a.value();
  require_rank2(av, "softmax_rows");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, av(i, j) / temperature);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (y(i, j) = std::exp(av(i, j) / temperature - mx));
    for (std::size_t j = 0; j < c; ++j) y(i, j) /= s;
  }
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, r, c, temperature](Tape& t, int self) {
    Tensor* ga = t.accum(ia);
    if (!ga) return;
    const Tensor& g = t.grad_ref(self);
    const Tensor& y = t.value_ref(self);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot) / temperature;
    }
  }, "softmax_rows");
}

Var log_softmax_rows(Var a, double temperature) {
  Tape& tape = tape_of(a);
  if (!(temperature > 0)) throw std::invalid_argument("log_softmax_rows: temperature must be > 0");
  const Tensor& av = a.value();
  require_rank2(av, "log_softmax_rows");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, av(i, j) / temperature);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(av(i, j) / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y(i, j) = av(i, j) / temperature - lse;
  }
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, r, c, temperature](Tape& t, int self) {
    Tensor* ga = t.accum(ia);
    if (!ga) return;
    const Tensor& g = t.grad_ref(self);
    const Tensor& y = t.value_ref(self);
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0;
      for (std::size_t j = 0; j < c; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += (g(i, j) - std::exp(y(i, j)) * gs) / temperature;
    }
  }, "log_softmax_rows");
}

namespace {

// Reduces along rows (axis=1, per row) or columns (axis=0, per column).
Var logsumexp_axis(Var a, int axis, const char* op) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, op);
  const std::size_t r = av.rows(), c = av.cols();
  const std::size_t outer = axis == 1 ? r : c;
  const std::size_t inner = axis == 1 ? c : r;
  auto at = [&](std::size_t o, std::size_t k) { return axis == 1 ? av(o, k) : av(k, o); };
  Tensor y(axis == 1 ? Shape{r, 1} : Shape{1, c});
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < inner; ++k) mx = std::max(mx, at(o, k));
    double s = 0;
    for (std::size_t k = 0; k < inner; ++k) s += std::exp(at(o, k) - mx);
    y[o] = mx + std::log(s);
  }
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, axis, r, c](Tape& t, int self) {
    Tensor* ga = t.accum(ia);
    if (!ga) return;
    const Tensor& g = t.grad_ref(self);
    const Tensor& y = t.value_ref(self);
    const Tensor& x = t.value_ref(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t o = axis == 1 ? i : j;
        (*ga)(i, j) += g[o] * std::exp(x(i, j) - y[o]);
      }
  }, op);
}

}  // namespace

Var logsumexp_rows(Var a) { return logsumexp_axis(a, 1, "logsumexp_rows"); }
Var logsumexp_cols(Var a) { return logsumexp_axis(a, 0, "logsumexp_cols"); }

Var logsumexp_all(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : av.data()) mx = std::max(mx, v);
  double s = 0;
  for (double v : av.data()) s += std::exp(v - mx);
  return tape.push(Tensor::scalar(mx + std::log(s)), tape.any_requires_grad({a}), [ia = a.id](Tape& t, int self) {
    Tensor* ga = t.accum(ia);
    if (!ga) return;
    const double g = t.grad_ref(self)[0];
    const double y = t.value_ref(self)[0];
    const Tensor& x = t.value_ref(ia);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g * std::exp(x[i] - y);
  }, "logsumexp_all");
}

Var sum_all(Var a) {
  Tape& tape = tape_of(a);
  double s = 0;
  for (double v : a.value().data()) s += v;
  return tape.push(Tensor::scalar(s), tape.any_requires_grad({a}), [ia = a.id](Tape& t, int self) {
    const double g = t.grad_ref(self)[0];
    if (Tensor* ga = t.accum(ia)) for (double& v : ga->data()) v += g;
  }, "sum_all");
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / n);
}

Var sum_rows(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "sum_rows");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i] += av(i, j);
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g[i];
  }, "sum_rows");
}

Var sum_cols(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "sum_cols");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j] += av(i, j);
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g[j];
  }, "sum_cols");
}

Var log_matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "log_matmul");
  require_rank2(bv, "log_matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("log_matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  const std::size_t r = av.rows(), n = av.cols(), c = bv.cols();
  Tensor y({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, av(i, k) + bv(k, j));
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += std::exp(av(i, k) + bv(k, j) - mx);
      y(i, j) = mx + std::log(s);
    }
  return tape.push(std::move(y), tape.any_requires_grad({a, b}), [ia = a.id, ib = b.id, r, n, c](Tape& t, int self) {
    Tensor* ga = t.accum(ia);
    Tensor* gb = t.accum(ib);
    const Tensor& g = t.grad_ref(self);
    const Tensor& y = t.value_ref(self);
    const Tensor& av = t.value_ref(ia);
    const Tensor& bv = t.value_ref(ib);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double gij = g(i, j);
        if (gij == 0.0) continue;
        for (std::size_t k = 0; k < n; ++k) {
          const double p = gij * std::exp(av(i, k) + bv(k, j) - y(i, j));
          if (ga) (*ga)(i, k) += p;
          if (gb) (*gb)(k, j) += p;
        }
      }
  }, "log_matmul");
}

// --- gradient routing -----------------------------------------------------------------

Var stop_gradient(Var a) {
  Tape& tape = tape_of(a);
  return tape.constant(a.value());
}

Var straight_through_onehot(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2(av, "straight_through_onehot");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (av(i, j) > av(i, best)) best = j;
    y(i, best) = 1.0;
  }
  return tape.push(std::move(y), tape.any_requires_grad({a}), [ia = a.id](Tape& t, int self) {
    const Tensor& g = t.grad_ref(self);
    if (Tensor* ga = t.accum(ia)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  }, "straight_through_onehot");
}

}  // namespace grass::ad

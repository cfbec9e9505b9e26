#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "grass/tensor.hpp"

// Tape-based reverse-mode differentiation over rank-2 tensors.
//
// A Tape owns every node created while it is alive. Nodes are appended in
// evaluation order, so the node vector is already a topological order and
// backward() is a single reverse sweep. A Tape is single-owner; distinct
// tapes on distinct threads share nothing.

namespace grass::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  /// With record=false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (a parameter).
  Var leaf(Tensor value);
  /// Non-differentiable input.
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  /// Accumulated adjoint; a zero tensor when nothing flowed into the node.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  bool records() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node.
  void backward(Var loss);

  // Op authoring interface.
  Var push(Tensor value, bool requires_grad, BackwardFn fn, const char* op);
  bool any_requires_grad(std::initializer_list<Var> inputs) const;
  bool any_requires_grad(std::span<const Var> inputs) const;
  const Tensor& grad_ref(int id) const { return nodes_[id].grad; }
  /// Gradient buffer of an input; nullptr when the input takes no gradient.
  Tensor* accum(int id);
  const Tensor& value_ref(int id) const { return nodes_[id].value; }
  void check(Var v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool record_;
  bool backward_done_ = false;
};

// --- elementwise and broadcasting arithmetic -------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_row(Var a, Var row);  ///< a[r×c] + row[1×c]
Var add_col(Var a, Var col);  ///< a[r×c] + col[r×1]
Var mul_row(Var a, Var row);
Var mul_col(Var a, Var col);
Var div_col(Var a, Var col);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return neg(a); }

// --- linear algebra and layout ---------------------------------------------
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var a, std::vector<std::size_t> index);
/// out[s] = sum of rows i with segment[i] == s.
Var segment_sum_rows(Var a, std::vector<std::size_t> segment, std::size_t segments);

// --- nonlinearities ---------------------------------------------------------
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// Values clipped to [lo, hi]; gradient zero where clipped.
Var clamp(Var a, double lo, double hi);

// --- normalizers and reductions --------------------------------------------
Var softmax_rows(Var a, double temperature = 1.0);
Var log_softmax_rows(Var a, double temperature = 1.0);
Var logsumexp_rows(Var a);  ///< r×1
Var logsumexp_cols(Var a);  ///< 1×c
Var logsumexp_all(Var a);   ///< 1×1
Var sum_all(Var a);
Var mean_all(Var a);
Var sum_rows(Var a);  ///< r×1, sums across each row
Var sum_cols(Var a);  ///< 1×c, sums down each column
/// out[i][j] = log sum_k exp(a[i][k] + b[k][j]), max-shift stabilized.
Var log_matmul(Var a, Var b);

// --- gradient routing -------------------------------------------------------
Var stop_gradient(Var a);
/// Forward: one-hot of the row argmax. Backward: identity.
Var straight_through_onehot(Var a);

}  // namespace grass::ad

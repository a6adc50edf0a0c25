#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape is an append-only list of nodes. Every op appends one node holding
// its forward value and a closure that pushes the node's gradient to its
// inputs. Inputs always precede outputs, so backward() is a single reverse
// scan. Nodes built only from constants carry no gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "devi/diffkit/tensor.hpp"

namespace devi::diff {

/// Named, ordered list of parameter tensors.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value) {
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  Tensor& operator[](std::size_t i) { return tensors_.at(i); }
  const Tensor& operator[](std::size_t i) const { return tensors_.at(i); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

using Gradients = std::vector<Tensor>;

/// Deliberate backward-rule corruption, used as a negative control for the
/// gradient checker.
enum class Fault { None, ReluBackwardHalved };

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, "constant"); }

  /// Leaf node for parameter `index`. A tape binds to a single parameter set;
  /// repeated requests return the same node.
  Var parameter(const ParameterSet& params, std::size_t index) {
    if (params_ && params_ != &params) throw std::logic_error("Tape: parameters from a second ParameterSet");
    if (!params_) {
      params_ = &params;
      param_nodes_.assign(params.size(), npos);
    }
    if (index >= params.size()) throw std::out_of_range("Tape::parameter: index out of range");
    if (param_nodes_[index] != npos) return {this, param_nodes_[index]};
    Var v = push(params[index], {}, nullptr, true, "parameter");
    param_nodes_[index] = v.id;
    return v;
  }

  /// Appends an op node. It requires a gradient when any input does.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward, const char* op) {
    bool needs = false;
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw std::logic_error("Tape: input refers to a future node");
      needs = needs || nodes_[in].requires_grad;
    }
    if (!value.all_finite()) throw std::runtime_error(std::string("Tape: non-finite value produced by ") + op);
    return push(std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr, needs, op);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node `id`, zero-initialised on first access.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  void inject_fault(Fault f) { fault_ = f; }
  Fault fault() const { return fault_; }

  /// d(loss)/d(parameter) for every parameter of the bound set (zeros for
  /// parameters the loss does not touch).
  Gradients backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("backward: loss lives on another tape");
    if (value(loss.id).size() != 1) throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                                                shape_string(value(loss.id).shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      for (std::size_t in : n.inputs) {
        assert(in < i);
        if (in >= i) throw std::logic_error("backward: cycle in tape");
      }
      n.backward(*this, i);
    }
    Gradients out;
    if (!params_) return out;
    out.reserve(params_->size());
    for (std::size_t p = 0; p < params_->size(); ++p) {
      const std::size_t id = param_nodes_[p];
      if (id == npos || nodes_[id].grad.empty())
        out.emplace_back((*params_)[p].shape(), 0.0);
      else
        out.push_back(nodes_[id].grad);
    }
    return out;
  }

 private:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad, const char* op) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(inputs), std::move(fn), requires_grad, op});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  const ParameterSet* params_ = nullptr;
  std::vector<std::size_t> param_nodes_;
  Fault fault_ = Fault::None;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline MatrixMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatrixMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_string(v.shape()));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::logic_error("ops on Vars from different tapes");
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out(Shape{m, n});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(a.value(), m, k) * detail::as_matrix(b.value(), k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const auto dC = detail::as_matrix(static_cast<const Tensor&>(t.grad(self)), m, n);
    if (t.requires_grad(ia))
      detail::as_matrix(t.grad(ia), m, k).noalias() += dC * detail::as_matrix(t.value(ib), k, n).transpose();
    if (t.requires_grad(ib))
      detail::as_matrix(t.grad(ib), k, n).noalias() += detail::as_matrix(t.value(ia), m, k).transpose() * dC;
  }, "matmul");
}

/// Matrix-vector product: a [m, n] times x [n] -> [m].
inline Var matvec(Var a, Var x) {
  detail::require_same_tape(a, x);
  detail::require_rank(a, 2, "matvec");
  detail::require_rank(x, 1, "matvec");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (x.shape()[0] != n)
    throw std::invalid_argument("matvec: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(x.shape()));
  Tensor out(Shape{m});
  detail::as_matrix(out, m, 1).noalias() = detail::as_matrix(a.value(), m, n) * detail::as_matrix(x.value(), n, 1);
  const std::size_t ia = a.id, ix = x.id;
  return a.tape->record(std::move(out), {ia, ix}, [ia, ix, m, n](Tape& t, std::size_t self) {
    const auto dy = detail::as_matrix(static_cast<const Tensor&>(t.grad(self)), m, 1);
    if (t.requires_grad(ia))
      detail::as_matrix(t.grad(ia), m, n).noalias() += dy * detail::as_matrix(t.value(ix), n, 1).transpose();
    if (t.requires_grad(ix))
      detail::as_matrix(t.grad(ix), n, 1).noalias() += detail::as_matrix(t.value(ia), m, n).transpose() * dy;
  }, "matvec");
}

/// x [m, k] W [k, n] + b [n].
inline Var dense(Var x, Var w, Var b) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  detail::require_rank(x, 2, "dense");
  detail::require_rank(w, 2, "dense");
  detail::require_rank(b, 1, "dense");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k || b.shape()[0] != n)
    throw std::invalid_argument("dense: shape mismatch " + shape_string(x.shape()) + " x " + shape_string(w.shape()) +
                                " + " + shape_string(b.shape()));
  Tensor out(Shape{m, n});
  auto o = detail::as_matrix(out, m, n);
  o.noalias() = detail::as_matrix(x.value(), m, k) * detail::as_matrix(w.value(), k, n);
  o.rowwise() += detail::as_matrix(b.value(), 1, n).row(0);
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(std::move(out), {ix, iw, ib}, [ix, iw, ib, m, k, n](Tape& t, std::size_t self) {
    const auto dY = detail::as_matrix(static_cast<const Tensor&>(t.grad(self)), m, n);
    if (t.requires_grad(ix))
      detail::as_matrix(t.grad(ix), m, k).noalias() += dY * detail::as_matrix(t.value(iw), k, n).transpose();
    if (t.requires_grad(iw))
      detail::as_matrix(t.grad(iw), k, n).noalias() += detail::as_matrix(t.value(ix), m, k).transpose() * dY;
    if (t.requires_grad(ib)) detail::as_matrix(t.grad(ib), 1, n) += dY.colwise().sum();
  }, "dense");
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  }, "add");
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const Tensor& vb = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& va = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  }, "mul");
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  }, "scale");
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const double slope = t.fault() == Fault::ReluBackwardHalved ? 0.5 : 1.0;
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += slope * g[i];
  }, "relu");
}

inline Var square(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= v;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
  }, "square");
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(ia).values()) v += g;
  }, "sum");
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(s / static_cast<double>(n)), {ia}, [ia, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(n);
    for (auto& v : t.grad(ia).values()) v += g;
  }, "mean");
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  }, "reshape");
}

/// Rows [begin, begin + count) along the leading dimension.
inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Shape& s = a.shape();
  if (s.empty()) throw std::invalid_argument("slice_rows: scalar input");
  if (begin + count > s[0]) throw std::invalid_argument("slice_rows: range exceeds " + shape_string(s));
  const std::size_t row = a.value().size() / std::max<std::size_t>(s[0], 1);
  Shape os = s;
  os[0] = count;
  std::vector<double> data(a.value().data() + begin * row, a.value().data() + (begin + count) * row);
  const std::size_t ia = a.id;
  return a.tape->record(Tensor(os, std::move(data)), {ia}, [ia, begin, row](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * row + i] += g[i];
  }, "slice_rows");
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Shape s = parts[0].shape();
  if (s.empty()) throw std::invalid_argument("concat_rows: scalar input");
  std::size_t rows = 0;
  std::vector<std::size_t> ids, offsets;
  std::vector<double> data;
  for (const Var& p : parts) {
    detail::require_same_tape(parts[0], p);
    Shape ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1))
      throw std::invalid_argument("concat_rows: trailing shape mismatch " + shape_string(ps) + " vs " +
                                  shape_string(s));
    offsets.push_back(data.size());
    data.insert(data.end(), p.value().data(), p.value().data() + p.value().size());
    rows += ps[0];
    ids.push_back(p.id);
  }
  s[0] = rows;
  return parts[0].tape->record(Tensor(s, std::move(data)), ids, [ids, offsets](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gk = t.grad(ids[k]);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[offsets[k] + i];
    }
  }, "concat_rows");
}

/// k vectors of length m -> [m, k].
inline Var stack_columns(const std::vector<Var>& cols) {
  if (cols.empty()) throw std::invalid_argument("stack_columns: no inputs");
  const std::size_t m = cols[0].shape().at(0), k = cols.size();
  Tensor out(Shape{m, k});
  std::vector<std::size_t> ids;
  for (std::size_t c = 0; c < k; ++c) {
    detail::require_same_tape(cols[0], cols[c]);
    if (cols[c].shape() != Shape{m}) throw std::invalid_argument("stack_columns: every input must have shape [m]");
    for (std::size_t r = 0; r < m; ++r) out.at(r, c) = cols[c].value()[r];
    ids.push_back(cols[c].id);
  }
  return cols[0].tape->record(std::move(out), ids, [ids, m, k](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t c = 0; c < k; ++c) {
      if (!t.requires_grad(ids[c])) continue;
      Tensor& gc = t.grad(ids[c]);
      for (std::size_t r = 0; r < m; ++r) gc[r] += g.at(r, c);
    }
  }, "stack_columns");
}

/// out[i] = a[i, index[i]].
inline Var gather_columns(Var a, const std::vector<std::size_t>& index) {
  detail::require_rank(a, 2, "gather_columns");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (index.size() != m) throw std::invalid_argument("gather_columns: one index per row required");
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw std::out_of_range("gather_columns: column index out of range");
    out[i] = a.value().at(i, index[i]);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, index](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga.at(i, index[i]) += g[i];
  }, "gather_columns");
}

struct MaxResult {
  Var values;
  std::vector<std::size_t> argmax;
};

/// Row-wise maximum of a [m, n] matrix. Ties go to the lowest column, and the
/// gradient flows to that column only.
inline MaxResult reduce_max_with_argmax(Var a) {
  detail::require_rank(a, 2, "reduce_max_with_argmax");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (n == 0) throw std::invalid_argument("reduce_max_with_argmax: empty rows");
  Tensor out(Shape{m});
  std::vector<std::size_t> arg(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    double best = a.value().at(i, 0);
    for (std::size_t j = 1; j < n; ++j) {
      const double v = a.value().at(i, j);
      if (v > best) {
        best = v;
        arg[i] = j;
      }
    }
    out[i] = best;
  }
  const std::size_t ia = a.id;
  Var v = a.tape->record(std::move(out), {ia}, [ia, arg](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < arg.size(); ++i) ga.at(i, arg[i]) += g[i];
  }, "reduce_max");
  return {v, std::move(arg)};
}

inline Var softmax_rows(Var a) {
  detail::require_rank(a, 2, "softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (n == 0) throw std::invalid_argument("softmax_rows: empty rows");
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double hi = a.value().at(i, 0);
    for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, a.value().at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out.at(i, j) = std::exp(a.value().at(i, j) - hi));
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  }, "softmax_rows");
}

/// cos(a_i, b_j) for a [m, d], b [n, d]. A zero row has cosine 0 with
/// everything and receives no gradient.
inline Var cosine_similarity_matrix(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_rank(a, 2, "cosine_similarity_matrix");
  detail::require_rank(b, 2, "cosine_similarity_matrix");
  const std::size_t m = a.shape()[0], n = b.shape()[0], d = a.shape()[1];
  if (b.shape()[1] != d)
    throw std::invalid_argument("cosine_similarity_matrix: dimension mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  auto normalize = [d](const Tensor& x, std::size_t rows, std::vector<double>& norms) {
    Tensor unit(Shape{rows, d});
    norms.assign(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += x.at(i, k) * x.at(i, k);
      norms[i] = std::sqrt(s);
      if (norms[i] > 0.0)
        for (std::size_t k = 0; k < d; ++k) unit.at(i, k) = x.at(i, k) / norms[i];
    }
    return unit;
  };
  std::vector<double> na, nb;
  Tensor ua = normalize(a.value(), m, na);
  Tensor ub = normalize(b.value(), n, nb);
  Tensor out(Shape{m, n});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(ua, m, d) * detail::as_matrix(ub, n, d).transpose();
  for (auto& v : out.values()) v = std::clamp(v, -1.0, 1.0);

  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib},
                        [ia, ib, m, n, d, ua = std::move(ua), ub = std::move(ub), na = std::move(na),
                         nb = std::move(nb)](Tape& t, std::size_t self) {
    const auto dC = detail::as_matrix(static_cast<const Tensor&>(t.grad(self)), m, n);
    // d(unit row)/d(row) = (I - u u^T) / |row|
    auto push = [d](Tensor& grad, const Tensor& unit, const std::vector<double>& norms, const detail::RowMatrix& du) {
      for (std::size_t i = 0; i < norms.size(); ++i) {
        if (norms[i] <= 0.0) continue;
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += unit.at(i, k) * du(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        for (std::size_t k = 0; k < d; ++k)
          grad.at(i, k) += (du(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) - unit.at(i, k) * dot) / norms[i];
      }
    };
    if (t.requires_grad(ia)) {
      const detail::RowMatrix du = dC * detail::as_matrix(ub, n, d);
      push(t.grad(ia), ua, na, du);
    }
    if (t.requires_grad(ib)) {
      const detail::RowMatrix du = dC.transpose() * detail::as_matrix(ua, m, d);
      push(t.grad(ib), ub, nb, du);
    }
  }, "cosine_similarity_matrix");
}

/// 3x3 convolution with zero padding (output keeps the spatial size).
/// x [N, C, H, W], w [F, C, 3, 3], b [F] -> [N, F, H, W].
inline Var conv2d_3x3(Var x, Var w, Var b) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  detail::require_rank(x, 4, "conv2d_3x3");
  detail::require_rank(w, 4, "conv2d_3x3");
  detail::require_rank(b, 1, "conv2d_3x3");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t F = w.shape()[0];
  if (w.shape() != Shape{F, C, 3, 3} || b.shape() != Shape{F})
    throw std::invalid_argument("conv2d_3x3: shape mismatch " + shape_string(x.shape()) + " * " +
                                shape_string(w.shape()) + " + " + shape_string(b.shape()));
  const std::size_t HW = H * W, K = C * 9;

  // im2col for one image: cols [C*9, H*W]
  auto im2col = [C, H, W, HW](const double* img, Tensor& cols) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          double* row = cols.data() + ((c * 3 + ky) * 3 + kx) * HW;
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y + ky) - 1;
            for (std::size_t xx = 0; xx < W; ++xx) {
              const long sx = static_cast<long>(xx + kx) - 1;
              row[y * W + xx] = (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W))
                                    ? 0.0
                                    : img[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
            }
          }
        }
  };

  Tensor out(Shape{N, F, H, W});
  Tensor cols(Shape{K, HW});
  const auto wm = detail::as_matrix(w.value(), F, K);
  for (std::size_t i = 0; i < N; ++i) {
    im2col(x.value().data() + i * C * HW, cols);
    detail::MatrixMap o(out.data() + i * F * HW, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(HW));
    o.noalias() = wm * detail::as_matrix(cols, K, HW);
    o.colwise() += detail::as_matrix(b.value(), F, 1).col(0);
  }

  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(std::move(out), {ix, iw, ib},
                        [ix, iw, ib, N, C, H, W, F, HW, K, im2col](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const bool gx = t.requires_grad(ix), gw = t.requires_grad(iw), gb = t.requires_grad(ib);
    Tensor cols(Shape{K, HW});
    Tensor dcols(Shape{K, HW});
    const auto wm = detail::as_matrix(t.value(iw), F, K);
    for (std::size_t i = 0; i < N; ++i) {
      detail::ConstMatrixMap dO(g.data() + i * F * HW, static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(HW));
      if (gb) detail::as_matrix(t.grad(ib), F, 1).col(0) += dO.rowwise().sum();
      if (gw) {
        im2col(t.value(ix).data() + i * C * HW, cols);
        detail::as_matrix(t.grad(iw), F, K).noalias() += dO * detail::as_matrix(cols, K, HW).transpose();
      }
      if (gx) {
        detail::as_matrix(dcols, K, HW).noalias() = wm.transpose() * dO;
        double* dimg = t.grad(ix).data() + i * C * HW;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const double* row = dcols.data() + ((c * 3 + ky) * 3 + kx) * HW;
              for (std::size_t y = 0; y < H; ++y) {
                const long sy = static_cast<long>(y + ky) - 1;
                if (sy < 0 || sy >= static_cast<long>(H)) continue;
                for (std::size_t xx = 0; xx < W; ++xx) {
                  const long sx = static_cast<long>(xx + kx) - 1;
                  if (sx < 0 || sx >= static_cast<long>(W)) continue;
                  dimg[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] += row[y * W + xx];
                }
              }
            }
      }
    }
  }, "conv2d_3x3");
}

/// 2x2 max pooling with stride 2 and floor division of odd sizes.
/// Ties go to the first element in row-major window order.
inline Var maxpool_2x2(Var x) {
  detail::require_rank(x, 4, "maxpool_2x2");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) throw std::invalid_argument("maxpool_2x2: input smaller than 2x2");
  Tensor out(Shape{N, C, OH, OW});
  std::vector<std::size_t> arg(out.size());
  const Tensor& in = x.value();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx, ++o) {
        std::size_t best = base + (2 * y) * W + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * W + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        arg[o] = best;
        out[o] = in[best];
      }
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, arg = std::move(arg)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
  }, "maxpool_2x2");
}

}  // namespace devi::diff

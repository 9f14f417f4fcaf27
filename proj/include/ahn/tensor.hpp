#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "ahn/common.hpp"

namespace ahn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tape;

// Handle into a Tape. Cheap to copy; does not own anything.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::int32_t idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const Mat<Scalar>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename M>
std::string shape_str(const M& m) {
  return shape_str(m.rows(), m.cols());
}

}  // namespace detail

// Softmax over one row restricted to allowed entries; disallowed outputs are 0.
// Scalar accumulation in ascending index order so that every caller (batched
// masked rows, streaming cache rows) produces bit-identical sums for the same
// allowed values. Returns false when no entry is allowed.
template <typename Scalar>
bool softmax_masked_row(const Scalar* x, const std::uint8_t* allow, Eigen::Index n,
                        Scalar* out) {
  bool any = false;
  Scalar mx = Scalar(0);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (allow != nullptr && allow[j] == 0) continue;
    if (!any || x[j] > mx) mx = x[j];
    any = true;
  }
  if (!any) return false;
  Scalar sum = Scalar(0);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (allow != nullptr && allow[j] == 0) {
      out[j] = Scalar(0);
      continue;
    }
    Scalar e = std::exp(x[j] - mx);
    out[j] = e;
    sum += e;
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    if (allow == nullptr || allow[j] != 0) out[j] /= sum;
  }
  return true;
}

// In-place rotary rotation of per-head (first half, second half) pairs.
// Angles are computed in double regardless of Scalar so both precisions see
// the same rotation up to the final cast.
template <typename Scalar>
void rope_rotate(Mat<Scalar>& x, const std::vector<long>& positions, int head_dim,
                 double theta_base, bool inverse) {
  if (head_dim <= 0 || head_dim % 2 != 0)
    throw ShapeError("rope_rotate: head_dim must be positive and even, got " +
                     std::to_string(head_dim));
  if (x.cols() % head_dim != 0)
    throw ShapeError("rope_rotate: cols " + std::to_string(x.cols()) +
                     " not a multiple of head_dim " + std::to_string(head_dim));
  if (static_cast<Eigen::Index>(positions.size()) != x.rows())
    throw ShapeError("rope_rotate: " + std::to_string(positions.size()) +
                     " positions for " + std::to_string(x.rows()) + " rows");
  const int half = head_dim / 2;
  const int n_heads = static_cast<int>(x.cols()) / head_dim;
  std::vector<double> freq(static_cast<std::size_t>(half));
  for (int j = 0; j < half; ++j)
    freq[static_cast<std::size_t>(j)] =
        std::pow(theta_base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double p = static_cast<double>(positions[static_cast<std::size_t>(i)]);
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * head_dim;
      for (int j = 0; j < half; ++j) {
        const double a = p * freq[static_cast<std::size_t>(j)];
        const Scalar c = static_cast<Scalar>(std::cos(a));
        const Scalar s = static_cast<Scalar>(inverse ? -std::sin(a) : std::sin(a));
        const Scalar u = x(i, off + j);
        const Scalar w = x(i, off + half + j);
        x(i, off + j) = u * c - w * s;
        x(i, off + half + j) = u * s + w * c;
      }
    }
  }
}

// c = a * b with a fixed i -> k -> j loop order, so each output entry
// accumulates its k terms in strictly ascending order no matter how many rows
// the call carries. Keeps one-row (streaming) and many-row (batched) calls
// bit-identical per row. Backward passes have no such requirement and use
// Eigen's kernels instead.
template <typename S>
void det_gemm(const Mat<S>& a, const Mat<S>& b, Mat<S>& c) {
  if (a.cols() != b.rows())
    throw ShapeError("det_gemm: inner dims " + detail::shape_str(a) + " * " +
                     detail::shape_str(b));
  c.setZero(a.rows(), b.cols());
  const Eigen::Index n = b.cols();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    S* crow = c.row(i).data();
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      const S aik = a(i, k);
      const S* brow = b.row(k).data();
      for (Eigen::Index j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

template <typename S>
Mat<S> det_gemm(const Mat<S>& a, const Mat<S>& b) {
  Mat<S> c;
  det_gemm(a, b, c);
  return c;
}

// per-row sums via a strictly sequential scalar accumulator (no fast-math, so
// the compiler cannot reassociate); shared by both forward routes
template <typename S>
void row_sums(const Mat<S>& x, Mat<S>& out) {
  out.resize(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    S acc = S(0);
    const S* r = x.row(i).data();
    for (Eigen::Index j = 0; j < x.cols(); ++j) acc += r[j];
    out(i, 0) = acc;
  }
}

// Reverse-mode tape. Nodes are appended in forward order; backward replays
// each recorded pull exactly once in reverse order, accumulating into parent
// gradients. Gradients live on the tape, keyed by node index.
template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;
  using Pull = std::function<void(Tape&, std::int32_t)>;

  Var<Scalar> input(M value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var<Scalar> constant(M value) { return input(std::move(value), false); }

  Var<Scalar> scalar(Scalar v, bool requires_grad = false) {
    M m(1, 1);
    m(0, 0) = v;
    return input(std::move(m), requires_grad);
  }

  Var<Scalar> make(M value, std::initializer_list<Var<Scalar>> parents, Pull pull) {
    bool rg = false;
    for (const Var<Scalar>& p : parents) {
      if (p.tape != this)
        throw ShapeError("tape op: operand belongs to a different tape");
      rg = rg || nodes_[static_cast<std::size_t>(p.idx)].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(pull) : nullptr);
  }

  Var<Scalar> make_with(M value, bool requires_grad, Pull pull) {
    return push(std::move(value), requires_grad,
                requires_grad ? std::move(pull) : nullptr);
  }

  const M& value(Var<Scalar> v) const { return at(v).value; }

  bool requires_grad(Var<Scalar> v) const { return at(v).requires_grad; }

  const M& grad(Var<Scalar> v) const {
    if (!ran_backward_) throw std::logic_error("grad: backward has not run");
    const Node& n = at(v);
    if (!n.requires_grad)
      throw std::logic_error("grad: node does not track gradients");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var<Scalar> loss) {
    const Node& ln = at(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw ShapeError("backward: loss must be 1x1, got " + detail::shape_str(ln.value));
    if (ran_backward_) throw std::logic_error("backward: already run on this tape");
    if (!ln.requires_grad)
      throw std::logic_error("backward: loss does not depend on any tracked input");
    for (std::int32_t i = 0; i <= loss.idx; ++i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad) n.grad = M::Zero(n.value.rows(), n.value.cols());
    }
    ran_backward_ = true;
    nodes_[static_cast<std::size_t>(loss.idx)].grad(0, 0) = Scalar(1);
    for (std::int32_t i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.pull) n.pull(*this, i);
    }
  }

  // node plumbing for the op free functions
  const M& val_at(std::int32_t i) const { return nodes_[static_cast<std::size_t>(i)].value; }
  M& grad_at(std::int32_t i) { return nodes_[static_cast<std::size_t>(i)].grad; }
  bool rg_at(std::int32_t i) const { return nodes_[static_cast<std::size_t>(i)].requires_grad; }

 private:
  struct Node {
    M value;
    M grad;
    Pull pull;
    bool requires_grad = false;
  };

  Var<Scalar> push(M value, bool rg, Pull pull) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Node& at(Var<Scalar> v) const {
    if (v.tape != this || v.idx < 0 || v.idx >= static_cast<std::int32_t>(nodes_.size()))
      throw std::logic_error("tape: var does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

template <typename Scalar>
const Mat<Scalar>& Var<Scalar>::value() const {
  return tape->value(*this);
}

namespace detail {

template <typename S>
Tape<S>& same_tape(Var<S> a, Var<S> b, const char* op) {
  if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape)
    throw ShapeError(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

template <typename S>
void require_same_shape(Var<S> a, Var<S> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) +
                     " vs " + shape_str(b.value()));
}

}  // namespace detail

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "matmul");
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows())
    throw ShapeError("matmul: inner dims " + detail::shape_str(A) + " * " +
                     detail::shape_str(B));
  Mat<S> c = det_gemm(A, B);
  const std::int32_t ai = a.idx, bi = b.idx;
  return t.make(std::move(c), {a, b}, [ai, bi](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(ai)) t.grad_at(ai).noalias() += g * t.val_at(bi).transpose();
    if (t.rg_at(bi)) t.grad_at(bi).noalias() += t.val_at(ai).transpose() * g;
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Mat<S> c = t.value(a) + t.value(b);
  const std::int32_t ai = a.idx, bi = b.idx;
  return t.make(std::move(c), {a, b}, [ai, bi](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(ai)) t.grad_at(ai) += g;
    if (t.rg_at(bi)) t.grad_at(bi) += g;
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  Mat<S> c = t.value(a) - t.value(b);
  const std::int32_t ai = a.idx, bi = b.idx;
  return t.make(std::move(c), {a, b}, [ai, bi](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(ai)) t.grad_at(ai) += g;
    if (t.rg_at(bi)) t.grad_at(bi) -= g;
  });
}

// elementwise product
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Mat<S> c = t.value(a).cwiseProduct(t.value(b));
  const std::int32_t ai = a.idx, bi = b.idx;
  return t.make(std::move(c), {a, b}, [ai, bi](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(ai)) t.grad_at(ai) += g.cwiseProduct(t.val_at(bi));
    if (t.rg_at(bi)) t.grad_at(bi) += g.cwiseProduct(t.val_at(ai));
  });
}

// multiply by a compile-time-known constant
template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Mat<S> y = t.value(a) * c;
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai, c](Tape<S>& t, std::int32_t self) {
    if (t.rg_at(ai)) t.grad_at(ai) += t.grad_at(self) * c;
  });
}

// multiply a matrix by a 1x1 tape value
template <typename S>
Var<S> scalar_mul(Var<S> s, Var<S> a) {
  Tape<S>& t = detail::same_tape(s, a, "scalar_mul");
  if (s.rows() != 1 || s.cols() != 1)
    throw ShapeError("scalar_mul: scalar operand is " + detail::shape_str(s.value()));
  Mat<S> y = t.value(a) * t.value(s)(0, 0);
  const std::int32_t si = s.idx, ai = a.idx;
  return t.make(std::move(y), {s, a}, [si, ai](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(ai)) t.grad_at(ai) += g * t.val_at(si)(0, 0);
    if (t.rg_at(si)) t.grad_at(si)(0, 0) += g.cwiseProduct(t.val_at(ai)).sum();
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = t.value(a).unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(ai)) return;
    const auto& y = t.val_at(self);
    t.grad_at(ai) +=
        t.grad_at(self).cwiseProduct(y.cwiseProduct((S(1) - y.array()).matrix()));
  });
}

template <typename S>
Var<S> vexp(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = t.value(a).array().exp().matrix();
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (t.rg_at(ai)) t.grad_at(ai) += t.grad_at(self).cwiseProduct(t.val_at(self));
  });
}

template <typename S>
inline S stable_softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename S>
Var<S> softplus(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = t.value(a).unaryExpr([](S x) { return stable_softplus(x); });
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(ai)) return;
    const auto& x = t.val_at(ai);
    t.grad_at(ai) += t.grad_at(self).cwiseProduct(
        x.unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); }));
  });
}

// y = (x + eps)^(-1/2), elementwise; eps keeps the derivative finite at 0
template <typename S>
Var<S> rsqrt_eps(Var<S> a, S eps) {
  Tape<S>& t = *a.tape;
  Mat<S> y = t.value(a).unaryExpr([eps](S x) { return S(1) / std::sqrt(x + eps); });
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(ai)) return;
    const auto& y = t.val_at(self);
    t.grad_at(ai) += t.grad_at(self).cwiseProduct(
        (S(-0.5) * y.array().cube()).matrix());
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = t.value(a).transpose();
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (t.rg_at(ai)) t.grad_at(ai) += t.grad_at(self).transpose();
  });
}

template <typename S>
Var<S> slice(Var<S> a, Eigen::Index r0, Eigen::Index c0, Eigen::Index nr,
             Eigen::Index nc) {
  Tape<S>& t = *a.tape;
  const auto& A = t.value(a);
  if (r0 < 0 || c0 < 0 || nr < 0 || nc < 0 || r0 + nr > A.rows() || c0 + nc > A.cols())
    throw ShapeError("slice: block (" + std::to_string(r0) + "," + std::to_string(c0) +
                     "," + std::to_string(nr) + "," + std::to_string(nc) +
                     ") out of " + detail::shape_str(A));
  Mat<S> y = A.block(r0, c0, nr, nc);
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai, r0, c0, nr, nc](Tape<S>& t, std::int32_t self) {
    if (t.rg_at(ai)) t.grad_at(ai).block(r0, c0, nr, nc) += t.grad_at(self);
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ShapeError("concat_rows: operands on different tapes");
    if (p.cols() != cols)
      throw ShapeError("concat_rows: col mismatch " + std::to_string(p.cols()) +
                       " vs " + std::to_string(cols));
    rows += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Mat<S> y(rows, cols);
  std::vector<std::int32_t> idx;
  std::vector<Eigen::Index> offs;
  idx.reserve(parts.size());
  offs.reserve(parts.size());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p.rows()) = t.value(p);
    idx.push_back(p.idx);
    offs.push_back(r);
    r += p.rows();
  }
  return t.make_with(std::move(y), rg,
                     [idx, offs](Tape<S>& t, std::int32_t self) {
                       const auto& g = t.grad_at(self);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         if (!t.rg_at(idx[i])) continue;
                         auto& pg = t.grad_at(idx[i]);
                         pg += g.middleRows(offs[i], pg.rows());
                       }
                     });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ShapeError("concat_cols: operands on different tapes");
    if (p.rows() != rows)
      throw ShapeError("concat_cols: row mismatch " + std::to_string(p.rows()) +
                       " vs " + std::to_string(rows));
    cols += p.cols();
    rg = rg || t.requires_grad(p);
  }
  Mat<S> y(rows, cols);
  std::vector<std::int32_t> idx;
  std::vector<Eigen::Index> offs;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    y.middleCols(c, p.cols()) = t.value(p);
    idx.push_back(p.idx);
    offs.push_back(c);
    c += p.cols();
  }
  return t.make_with(std::move(y), rg,
                     [idx, offs](Tape<S>& t, std::int32_t self) {
                       const auto& g = t.grad_at(self);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         if (!t.rg_at(idx[i])) continue;
                         auto& pg = t.grad_at(idx[i]);
                         pg += g.middleCols(offs[i], pg.cols());
                       }
                     });
}

// sum of all entries, as a 1x1 node
template <typename S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y(1, 1);
  y(0, 0) = t.value(a).sum();
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (t.rg_at(ai)) t.grad_at(ai).array() += t.grad_at(self)(0, 0);
  });
}

// column of per-row sums
template <typename S>
Var<S> row_sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y;
  row_sums(t.value(a), y);
  const std::int32_t ai = a.idx;
  return t.make(std::move(y), {a}, [ai](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(ai)) return;
    const auto& g = t.grad_at(self);
    t.grad_at(ai) += g.col(0).replicate(1, t.val_at(ai).cols());
  });
}

// y(i,j) = x(i,j) * s(i,0)
template <typename S>
Var<S> row_scale(Var<S> x, Var<S> s) {
  Tape<S>& t = detail::same_tape(x, s, "row_scale");
  if (s.cols() != 1 || s.rows() != x.rows())
    throw ShapeError("row_scale: scale is " + detail::shape_str(s.value()) +
                     " for x " + detail::shape_str(x.value()));
  Mat<S> y = t.value(x).array().colwise() * t.value(s).col(0).array();
  const std::int32_t xi = x.idx, si = s.idx;
  return t.make(std::move(y), {x, s}, [xi, si](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(xi))
      t.grad_at(xi) += (g.array().colwise() * t.val_at(si).col(0).array()).matrix();
    if (t.rg_at(si))
      t.grad_at(si).col(0) += g.cwiseProduct(t.val_at(xi)).rowwise().sum();
  });
}

// y(i,j) = x(i,j) * s(0,j)
template <typename S>
Var<S> col_scale(Var<S> x, Var<S> s) {
  Tape<S>& t = detail::same_tape(x, s, "col_scale");
  if (s.rows() != 1 || s.cols() != x.cols())
    throw ShapeError("col_scale: scale is " + detail::shape_str(s.value()) +
                     " for x " + detail::shape_str(x.value()));
  Mat<S> y = t.value(x).array().rowwise() * t.value(s).row(0).array();
  const std::int32_t xi = x.idx, si = s.idx;
  return t.make(std::move(y), {x, s}, [xi, si](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    if (t.rg_at(xi))
      t.grad_at(xi) += (g.array().rowwise() * t.val_at(si).row(0).array()).matrix();
    if (t.rg_at(si))
      t.grad_at(si).row(0) += g.cwiseProduct(t.val_at(xi)).colwise().sum();
  });
}

template <typename S>
Var<S> gather_rows(Var<S> table, const std::vector<int>& ids) {
  Tape<S>& t = *table.tape;
  const auto& T = t.value(table);
  Mat<S> y(static_cast<Eigen::Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows())
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of " +
                       std::to_string(T.rows()) + " rows");
    y.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
  }
  const std::int32_t ti = table.idx;
  return t.make(std::move(y), {table}, [ti, ids](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(ti)) return;
    const auto& g = t.grad_at(self);
    auto& tg = t.grad_at(ti);
    for (std::size_t i = 0; i < ids.size(); ++i)
      tg.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

// y(i,0) = x(i, ids[i])
template <typename S>
Var<S> pick_per_row(Var<S> x, const std::vector<int>& ids) {
  Tape<S>& t = *x.tape;
  const auto& X = t.value(x);
  if (static_cast<Eigen::Index>(ids.size()) != X.rows())
    throw ShapeError("pick_per_row: " + std::to_string(ids.size()) + " ids for " +
                     std::to_string(X.rows()) + " rows");
  Mat<S> y(X.rows(), 1);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= X.cols())
      throw ShapeError("pick_per_row: id " + std::to_string(id) + " out of " +
                       std::to_string(X.cols()) + " cols");
    y(i, 0) = X(i, id);
  }
  const std::int32_t xi = x.idx;
  return t.make(std::move(y), {x}, [xi, ids](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(xi)) return;
    const auto& g = t.grad_at(self);
    auto& xg = t.grad_at(xi);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      xg(i, ids[static_cast<std::size_t>(i)]) += g(i, 0);
  });
}

// elementwise max; on ties the gradient goes to a
template <typename S>
Var<S> cmax(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b, "cmax");
  detail::require_same_shape(a, b, "cmax");
  Mat<S> y = t.value(a).cwiseMax(t.value(b));
  const std::int32_t ai = a.idx, bi = b.idx;
  return t.make(std::move(y), {a, b}, [ai, bi](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_at(self);
    const auto& A = t.val_at(ai);
    const auto& B = t.val_at(bi);
    if (t.rg_at(ai))
      t.grad_at(ai) += (A.array() >= B.array()).template cast<S>().matrix().cwiseProduct(g);
    if (t.rg_at(bi))
      t.grad_at(bi) += (A.array() < B.array()).template cast<S>().matrix().cwiseProduct(g);
  });
}

// Row softmax restricted by an allow mask (1 = attend). Fully masked rows are
// an error; disallowed entries come out exactly 0 and pass no gradient.
template <typename S>
Var<S> softmax_rows(Var<S> x, const Mask& mask) {
  Tape<S>& t = *x.tape;
  const auto& X = t.value(x);
  if (mask.rows() != X.rows() || mask.cols() != X.cols())
    throw ShapeError("softmax_rows: mask " + detail::shape_str(mask) + " vs x " +
                     detail::shape_str(X));
  Mat<S> y(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    if (!softmax_masked_row(X.row(i).data(), mask.row(i).data(), X.cols(),
                            y.row(i).data()))
      throw DegenerateRowError("softmax_rows: row " + std::to_string(i) +
                               " has no allowed entries");
  }
  const std::int32_t xi = x.idx;
  Mask m = mask;
  return t.make(std::move(y), {x}, [xi, m](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(xi)) return;
    const auto& y = t.val_at(self);
    const auto& g = t.grad_at(self);
    auto& xg = t.grad_at(xi);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const S dot = g.row(i).cwiseProduct(y.row(i)).sum();
      for (Eigen::Index j = 0; j < y.cols(); ++j) {
        if (m(i, j) == 0) continue;
        xg(i, j) += y(i, j) * (g(i, j) - dot);
      }
    }
  });
}

// log softmax over full rows (no mask); used by the losses
template <typename S>
Var<S> log_softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& X = t.value(x);
  if (X.cols() < 1) throw ShapeError("log_softmax_rows: empty rows");
  Mat<S> y(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const S mx = X.row(i).maxCoeff();
    S s = S(0);
    for (Eigen::Index j = 0; j < X.cols(); ++j) s += std::exp(X(i, j) - mx);
    const S lse = mx + std::log(s);
    y.row(i) = X.row(i).array() - lse;
  }
  const std::int32_t xi = x.idx;
  return t.make(std::move(y), {x}, [xi](Tape<S>& t, std::int32_t self) {
    if (!t.rg_at(xi)) return;
    const auto& y = t.val_at(self);
    const auto& g = t.grad_at(self);
    auto& xg = t.grad_at(xi);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const S gs = g.row(i).sum();
      xg.row(i) += g.row(i) - gs * y.row(i).array().exp().matrix();
    }
  });
}

// rotary rotation of per-head pairs by position-dependent angles; the inverse
// rotation is the exact backward
template <typename S>
Var<S> rope_rows(Var<S> x, const std::vector<long>& positions, int head_dim,
                 double theta_base) {
  Tape<S>& t = *x.tape;
  Mat<S> y = t.value(x);
  rope_rotate(y, positions, head_dim, theta_base, false);
  const std::int32_t xi = x.idx;
  return t.make(std::move(y), {x},
                [xi, positions, head_dim, theta_base](Tape<S>& t, std::int32_t self) {
                  if (!t.rg_at(xi)) return;
                  Mat<S> g = t.grad_at(self);
                  rope_rotate(g, positions, head_dim, theta_base, true);
                  t.grad_at(xi) += g;
                });
}

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

}  // namespace ahn

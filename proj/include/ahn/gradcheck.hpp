#pragma once

#include <cmath>
#include <utility>

#include "ahn/tensor.hpp"

namespace ahn {

// Compares tape gradients of a scalar-valued function against central finite
// differences. f is called as f(tape, x_var) and must return a 1x1 Var built
// on that tape. Returns the worst relative error over all coordinates.
template <typename Scalar, typename Fn>
Scalar grad_check(Fn&& f, const Mat<Scalar>& x0, Scalar eps) {
  if (x0.size() == 0) throw ShapeError("grad_check: empty input");
  if (!(eps > Scalar(0))) throw NumericError("grad_check: eps must be positive");

  Mat<Scalar> analytic;
  {
    Tape<Scalar> tape;
    Var<Scalar> x = tape.input(x0, true);
    Var<Scalar> loss = f(tape, x);
    if (loss.rows() != 1 || loss.cols() != 1)
      throw ShapeError("grad_check: f must return a 1x1 value");
    if (!std::isfinite(static_cast<double>(tape.value(loss)(0, 0))))
      throw NumericError("grad_check: non-finite loss at base point");
    tape.backward(loss);
    analytic = tape.grad(x);
  }

  auto eval = [&f](const Mat<Scalar>& x) {
    Tape<Scalar> tape;
    Var<Scalar> xv = tape.input(x, false);
    Var<Scalar> loss = f(tape, xv);
    Scalar v = tape.value(loss)(0, 0);
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("grad_check: non-finite loss during finite differencing");
    return v;
  };

  Scalar worst = Scalar(0);
  Mat<Scalar> x = x0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Scalar keep = x(i, j);
      x(i, j) = keep + eps;
      const Scalar fp = eval(x);
      x(i, j) = keep - eps;
      const Scalar fm = eval(x);
      x(i, j) = keep;
      const Scalar central = (fp - fm) / (Scalar(2) * eps);
      const Scalar rel = std::abs(analytic(i, j) - central) /
                         (std::abs(central) + Scalar(1e-12));
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace ahn

#pragma once

// Spectral-norm estimation and the contraction-enforcing rescale.

#include "iresnet/common.hpp"

#include <cmath>

namespace iresnet {

template <typename Scalar>
struct PowerIterationResult {
  Scalar sigma = 0;
  bool degenerate = false;
};

/// Power iteration with W and W^T, warm-started from (u, v) and updated in
/// place. The returned sigma = u^T W v <= ||W||_2.
template <typename Derived, typename VecU, typename VecV>
PowerIterationResult<typename Derived::Scalar> power_iteration(const Eigen::MatrixBase<Derived>& w,
                                                               int iters,
                                                               Eigen::MatrixBase<VecU>& u,
                                                               Eigen::MatrixBase<VecV>& v) {
  using Scalar = typename Derived::Scalar;
  PowerIterationResult<Scalar> result;
  for (int i = 0; i < iters; ++i) {
    const auto wt_u = (w.transpose() * u).eval();
    const Scalar nv = wt_u.norm();
    if (nv == Scalar(0)) {
      result.degenerate = true;
      return result;
    }
    v = wt_u / nv;
    const auto w_v = (w * v).eval();
    const Scalar nu = w_v.norm();
    if (nu == Scalar(0)) {
      result.degenerate = true;
      return result;
    }
    u = w_v / nu;
  }
  result.sigma = u.dot(w * v);
  return result;
}

/// Largest singular value by full SVD.
template <typename Derived>
typename Derived::Scalar exact_spectral_norm(const Eigen::MatrixBase<Derived>& w) {
  using Scalar = typename Derived::Scalar;
  if (w.size() == 0) return Scalar(0);
  Eigen::JacobiSVD<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> svd(w.eval());
  return svd.singularValues()(0);
}

/// W <- c W / sigma when c / sigma < 1, otherwise W is left untouched.
/// Returns true when W was rescaled.
template <typename Derived>
bool spectral_rescale(Eigen::MatrixBase<Derived>& w, typename Derived::Scalar sigma,
                      typename Derived::Scalar coeff) {
  if (!(sigma > 0) || !(coeff / sigma < 1)) return false;
  w *= coeff / sigma;
  return true;
}

}  // namespace iresnet

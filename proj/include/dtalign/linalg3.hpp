#pragma once

// Small dense 3x3 kernels: singular value decomposition, nearest proper
// rotation (polar factor) and its reverse-mode derivative.

#include "dtalign/volgrid.hpp"

namespace dtalign {

struct Svd3 {
    Mat3 w;        // left singular vectors
    Vec3 sigma;    // descending, non-negative
    Mat3 v;        // right singular vectors; A = W diag(sigma) V^T
};

/// One-sided Jacobi SVD; accurate to working precision in every singular value.
Svd3 svd3(const Mat3& a);

struct PolarFactors {
    Mat3 rotation;  // R = W V^T with det(R) = +1
    Mat3 v;         // stretch P = V diag(sigma) V^T
    Vec3 sigma;
    bool reflected = false;  // det(A) < 0 required the sign fix
};

/// Polar factors from the SVD. When det(W V^T) < 0 the column of W paired with
/// the smallest singular value is negated. Throws Numerical on singular input.
PolarFactors polar_factors(const Mat3& a);
Mat3 polar_rotation(const Mat3& a);

/// Reverse-mode derivative of R = A (A^T A)^{-1/2}: maps dL/dR to dL/dA using
/// the Sylvester identity R^T dA - dA^T R = Omega P + P Omega, which stays
/// finite at repeated singular values.
Mat3 polar_rotation_backward(const PolarFactors& f, const Mat3& grad_rotation);

}  // namespace dtalign

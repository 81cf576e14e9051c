#include "dtalign/linalg3.hpp"

#include <algorithm>
#include <cmath>

namespace dtalign {

Svd3 svd3(const Mat3& a) {
    Mat3 u = a;
    Mat3 v = Mat3::Identity();
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                const double alpha = u.col(p).squaredNorm();
                const double beta = u.col(q).squaredNorm();
                const double gamma = u.col(p).dot(u.col(q));
                if (gamma == 0.0 || std::abs(gamma) <= 1e-16 * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
                const Vec3 up = u.col(p), uq = u.col(q);
                u.col(p) = c * up - s * uq;
                u.col(q) = s * up + c * uq;
                const Vec3 vp = v.col(p), vq = v.col(q);
                v.col(p) = c * vp - s * vq;
                v.col(q) = s * vp + c * vq;
            }
        if (!rotated) break;
    }

    std::array<int, 3> idx{0, 1, 2};
    Vec3 norms(u.col(0).norm(), u.col(1).norm(), u.col(2).norm());
    std::sort(idx.begin(), idx.end(), [&](int x, int y) { return norms[x] > norms[y]; });
    Svd3 r;
    for (int c = 0; c < 3; ++c) {
        r.sigma[c] = norms[idx[c]];
        r.v.col(c) = v.col(idx[c]);
        r.w.col(c) = u.col(idx[c]);
    }
    // normalize left vectors; complete the basis where sigma vanishes
    const double tiny = 1e-300;
    if (r.sigma[0] > tiny) r.w.col(0) /= r.sigma[0];
    else r.w.col(0) = Vec3::UnitX();
    if (r.sigma[1] > tiny * 1e10 && r.sigma[1] > 1e-15 * r.sigma[0]) {
        r.w.col(1) /= r.sigma[1];
    } else {
        Vec3 any = std::abs(r.w(0, 0)) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
        r.w.col(1) = (any - any.dot(r.w.col(0)) * r.w.col(0)).normalized();
    }
    if (r.sigma[2] > tiny * 1e10 && r.sigma[2] > 1e-15 * r.sigma[0]) {
        r.w.col(2) /= r.sigma[2];
    } else {
        r.w.col(2) = r.w.col(0).cross(r.w.col(1));
    }
    return r;
}

PolarFactors polar_factors(const Mat3& a) {
    const Svd3 s = svd3(a);
    if (!(s.sigma[0] > 0.0) || !std::isfinite(s.sigma[0]) || s.sigma[2] <= 1e-14 * s.sigma[0])
        fail(ErrorKind::Numerical, "degenerate matrix: polar decomposition of a singular matrix");
    PolarFactors f;
    Mat3 w = s.w;
    f.rotation = w * s.v.transpose();
    if (f.rotation.determinant() < 0.0) {
        w.col(2) = -w.col(2);
        f.rotation = w * s.v.transpose();
        f.reflected = true;
    }
    f.v = s.v;
    f.sigma = s.sigma;
    return f;
}

Mat3 polar_rotation(const Mat3& a) { return polar_factors(a).rotation; }

Mat3 polar_rotation_backward(const PolarFactors& f, const Mat3& grad_rotation) {
    const Mat3 x = f.v.transpose() * (f.rotation.transpose() * grad_rotation) * f.v;
    Vec3 sig = f.sigma;
    if (f.reflected) sig[2] = -sig[2];
    Mat3 k;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double denom = sig[i] + sig[j];
            k(i, j) = std::abs(denom) > 1e-300 ? x(i, j) / denom : 0.0;
        }
    const Mat3 y = f.v * k * f.v.transpose();
    return f.rotation * (y - y.transpose());
}

}  // namespace dtalign

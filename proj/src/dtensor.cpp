#include "dtalign/dtensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

namespace dtalign {

void DiffusionGradientScheme::validate() const {
    require(bvals.size() == bvecs.size(), "b-values and b-vectors differ in count");
    bool has_b0 = false;
    std::vector<Vec3> dirs;
    for (std::size_t n = 0; n < bvals.size(); ++n) {
        require(std::isfinite(bvals[n]) && bvals[n] >= 0.0, "b-values must be >= 0");
        if (bvals[n] == 0.0) {
            has_b0 = true;
            continue;
        }
        require(std::abs(bvecs[n].norm() - 1.0) <= 1e-6, "b-vector " + std::to_string(n) + " is not unit length");
        const bool seen = std::any_of(dirs.begin(), dirs.end(), [&](const Vec3& d) {
            return std::abs(std::abs(d.dot(bvecs[n])) - 1.0) < 1e-9;
        });
        if (!seen) dirs.push_back(bvecs[n]);
    }
    require(has_b0, "scheme needs at least one b=0 entry");
    require(dirs.size() >= 6, "degenerate scheme: " + std::to_string(dirs.size()) +
                                  " distinct diffusion directions, need at least 6");
}

DiffusionGradientScheme DiffusionGradientScheme::from_text(const std::string& text) {
    DiffusionGradientScheme s;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        std::istringstream ls(line);
        double b, x, y, z;
        if (!(ls >> b)) continue;
        if (!(ls >> x >> y >> z)) fail(ErrorKind::Format, "b-table line " + std::to_string(lineno) + ": expected `bval gx gy gz`");
        s.bvals.push_back(b);
        s.bvecs.emplace_back(x, y, z);
    }
    return s;
}

DiffusionGradientScheme DiffusionGradientScheme::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IO, "cannot open b-table " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

double predict_signal(const Mat3& d, double s0, double b, const Vec3& g) {
    return s0 * std::exp(-b * g.dot(d * g));
}

TensorFit fit_tensor(const std::vector<double>& signals, const DiffusionGradientScheme& scheme) {
    scheme.validate();
    require(signals.size() == scheme.bvals.size(), "signal count does not match the gradient scheme");
    const auto n = static_cast<Eigen::Index>(signals.size());
    Eigen::MatrixXd X(n, 7);
    Eigen::VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double s = signals[r];
        require(std::isfinite(s) && s > 0.0, "signals must be positive for the log-linear fit");
        const double b = scheme.bvals[r];
        const Vec3 g = b > 0.0 ? scheme.bvecs[r] : Vec3::Zero();
        // weights S^2 on squared residuals -> scale rows by S
        X.row(r) << 1.0, -b * g.x() * g.x(), -2.0 * b * g.x() * g.y(), -b * g.y() * g.y(),
            -2.0 * b * g.x() * g.z(), -2.0 * b * g.y() * g.z(), -b * g.z() * g.z();
        X.row(r) *= s;
        y[r] = s * std::log(s);
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < 7) fail(ErrorKind::Numerical, "degenerate scheme: design matrix rank " + std::to_string(qr.rank()) + " < 7");
    const Eigen::VectorXd beta = qr.solve(y);
    TensorFit fit;
    fit.s0 = std::exp(beta[0]);
    fit.d = sym::to_matrix({beta[1], beta[2], beta[3], beta[4], beta[5], beta[6]});
    return fit;
}

namespace {

void sort_descending(TensorEigen& e) {
    std::array<int, 3> idx{0, 1, 2};
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return e.values[a] > e.values[b]; });
    TensorEigen s;
    for (int c = 0; c < 3; ++c) {
        s.values[c] = e.values[idx[c]];
        s.vectors.col(c) = e.vectors.col(idx[c]);
    }
    if (s.vectors.determinant() < 0.0) s.vectors.col(2) = -s.vectors.col(2);
    e = s;
}

TensorEigen jacobi_eigen(const Mat3& d) {
    Mat3 a = d;
    Mat3 v = Mat3::Identity();
    for (int sweep = 0; sweep < 64; ++sweep) {
        const double off = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
        if (off == 0.0) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                Mat3 rot = Mat3::Identity();
                rot(p, p) = c;
                rot(q, q) = c;
                rot(p, q) = s;
                rot(q, p) = -s;
                a = rot.transpose() * a * rot;
                a(p, q) = a(q, p) = 0.0;
                v = v * rot;
            }
    }
    TensorEigen e{a.diagonal(), v};
    sort_descending(e);
    return e;
}

// Eigenvector for an isolated eigenvalue: cross product of the best-conditioned
// pair of rows of (D - lambda I).
Vec3 null_vector(const Mat3& d, double lambda) {
    const Mat3 m = d - lambda * Mat3::Identity();
    const Vec3 c01 = m.row(0).transpose().cross(m.row(1).transpose());
    const Vec3 c02 = m.row(0).transpose().cross(m.row(2).transpose());
    const Vec3 c12 = m.row(1).transpose().cross(m.row(2).transpose());
    const double n01 = c01.squaredNorm(), n02 = c02.squaredNorm(), n12 = c12.squaredNorm();
    if (n01 >= n02 && n01 >= n12) return c01 / std::sqrt(n01);
    if (n02 >= n12) return c02 / std::sqrt(n02);
    return c12 / std::sqrt(n12);
}

}  // namespace

TensorEigen eigen_decompose(const Mat3& d) {
    const double scale = d.cwiseAbs().maxCoeff();
    if (scale == 0.0) return {Vec3::Zero(), Mat3::Identity()};
    const Mat3 a = d / scale;

    const double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
    const double q = a.trace() / 3.0;
    const double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) + (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
    const double p = std::sqrt(p2 / 6.0);
    if (p < 1e-14) return {Vec3::Constant(q * scale), Mat3::Identity()};

    const Mat3 bm = (a - q * Mat3::Identity()) / p;
    const double r = std::clamp(bm.determinant() / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    const double l1 = q + 2.0 * p * std::cos(phi);
    const double l3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    const double l2 = 3.0 * q - l1 - l3;

    // near-repeated roots: the cross-product eigenvectors lose accuracy
    const double gap = std::min(l1 - l2, l2 - l3);
    if (gap < 1e-5 * p) return [&] {
        TensorEigen e = jacobi_eigen(a);
        e.values *= scale;
        return e;
    }();

    TensorEigen e;
    const Vec3 v1 = null_vector(a, l1);
    Vec3 v3 = null_vector(a, l3);
    v3 = (v3 - v3.dot(v1) * v1).normalized();
    e.vectors.col(0) = v1;
    e.vectors.col(1) = v3.cross(v1);
    e.vectors.col(2) = v3;
    e.values = Vec3(l1, l2, l3);

    const Mat3 recon = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    if ((recon - a).norm() > 1e-12 * std::max(1.0, a.norm())) {
        e = jacobi_eigen(a);
    } else {
        // Rayleigh quotients are more accurate than the trigonometric roots
        for (int c = 0; c < 3; ++c) e.values[c] = e.vectors.col(c).dot(a * e.vectors.col(c));
        sort_descending(e);
    }
    e.values *= scale;
    return e;
}

TensorEigen eigen_decompose(const Sym6& d) { return eigen_decompose(sym::to_matrix(d)); }

double fractional_anisotropy(const TensorEigen& e) {
    const Vec3 l = e.values.cwiseMax(0.0);
    const double denom = l.squaredNorm();
    if (denom == 0.0) return 0.0;
    const double mean = l.sum() / 3.0;
    const double num = (l.array() - mean).square().sum();
    return std::clamp(std::sqrt(1.5 * num / denom), 0.0, 1.0);
}

double fractional_anisotropy(const Sym6& d) { return fractional_anisotropy(eigen_decompose(d)); }

double mean_diffusivity(const TensorEigen& e) { return e.values.cwiseMax(0.0).sum() / 3.0; }

namespace {

template <class Fn>
ScalarVolume scalar_map(const TensorVolume& vol, const LabelVolume* mask, Fn fn) {
    if (mask) require(mask->meta == vol.meta, "mask grid does not match tensor grid");
    ScalarVolume out(vol.meta);
    const auto n = static_cast<std::ptrdiff_t>(vol.data.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        if (mask && mask->data[i] == 0) continue;
        out.data[i] = fn(eigen_decompose(vol.data[i]));
    }
    return out;
}

}  // namespace

ScalarVolume fa_map(const TensorVolume& vol, const LabelVolume* mask) {
    return scalar_map(vol, mask, [](const TensorEigen& e) { return fractional_anisotropy(e); });
}

ScalarVolume md_map(const TensorVolume& vol, const LabelVolume* mask) {
    return scalar_map(vol, mask, [](const TensorEigen& e) { return mean_diffusivity(e); });
}

TensorVolume fit_tensor_volume(const std::vector<ScalarVolume>& dwi, const DiffusionGradientScheme& scheme,
                               ScalarVolume* s0_out) {
    scheme.validate();
    require(dwi.size() == scheme.bvals.size(), "number of DWI frames does not match the b-table");
    const GridMeta& meta = dwi.front().meta;
    for (const auto& f : dwi) require(f.meta == meta, "DWI frames must share one grid");
    TensorVolume out(meta);
    if (s0_out) *s0_out = ScalarVolume(meta);
    std::vector<double> sig(dwi.size());
    for (std::size_t n = 0; n < meta.voxel_count(); ++n) {
        bool ok = true;
        for (std::size_t c = 0; c < dwi.size(); ++c) {
            sig[c] = dwi[c].data[n];
            ok = ok && sig[c] > 0.0 && std::isfinite(sig[c]);
        }
        if (!ok) continue;
        const TensorFit fit = fit_tensor(sig, scheme);
        out.data[n] = sym::from_matrix(fit.d);
        if (s0_out) s0_out->data[n] = fit.s0;
    }
    return out;
}

Sym6 project_psd(const Sym6& d) {
    using namespace sym;
    const double m01 = d[XX] * d[YY] - d[XY] * d[XY];
    const double m02 = d[XX] * d[ZZ] - d[XZ] * d[XZ];
    const double m12 = d[YY] * d[ZZ] - d[YZ] * d[YZ];
    const double det = d[XX] * m12 - d[XY] * (d[XY] * d[ZZ] - d[YZ] * d[XZ]) + d[XZ] * (d[XY] * d[YZ] - d[YY] * d[XZ]);
    if (d[XX] >= 0 && d[YY] >= 0 && d[ZZ] >= 0 && m01 >= 0 && m02 >= 0 && m12 >= 0 && det >= 0) return d;
    const TensorEigen e = eigen_decompose(d);
    return from_matrix(e.vectors * e.values.cwiseMax(0.0).asDiagonal() * e.vectors.transpose());
}

}  // namespace dtalign

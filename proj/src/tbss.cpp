#include "dtalign/tbss.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "dtalign/error.hpp"

namespace dtalign {

std::size_t Skeleton::size() const {
    std::size_t n = 0;
    for (auto v : mask.data) n += v != 0;
    return n;
}

ScalarVolume mean_fa(const std::vector<ScalarVolume>& group) {
    require(group.size() >= 2, "mean_fa: needs at least two volumes");
    ScalarVolume out(group[0].meta);
    for (const auto& v : group) {
        require(v.meta == out.meta, "mean_fa: grid mismatch");
        for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] += v.data[i];
    }
    for (auto& x : out.data) x /= static_cast<double>(group.size());
    return out;
}

ScalarVolume gaussian_smooth(const ScalarVolume& v, double sigma) {
    require(sigma >= 0.0, "gaussian_smooth: sigma must be >= 0");
    if (sigma == 0.0) return v;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) sum += w[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : w) x /= sum;
    ScalarVolume cur = v;
    const auto& d = v.meta.dims;
    for (int axis = 0; axis < 3; ++axis) {
        ScalarVolume next(v.meta);
        for (int k = 0; k < d[2]; ++k)
            for (int j = 0; j < d[1]; ++j)
                for (int i = 0; i < d[0]; ++i) {
                    double acc = 0.0;
                    for (int o = -r; o <= r; ++o) {
                        std::array<int, 3> q{i, j, k};
                        q[axis] = std::clamp(q[axis] + o, 0, d[axis] - 1);
                        acc += w[o + r] * cur(q[0], q[1], q[2]);
                    }
                    next(i, j, k) = acc;
                }
        cur = std::move(next);
    }
    return cur;
}

namespace {

constexpr double kCogOffset = 0.05;  // voxels

double at_clamped(const ScalarVolume& v, int i, int j, int k) {
    const auto& d = v.meta.dims;
    return v(std::clamp(i, 0, d[0] - 1), std::clamp(j, 0, d[1] - 1), std::clamp(k, 0, d[2] - 1));
}

}  // namespace

Skeleton skeletonize(const ScalarVolume& mean, double threshold, double sigma) {
    require(threshold > 0.0 && threshold < 1.0, "skeletonize: threshold must be in (0, 1)");
    mean.validate();
    const ScalarVolume s = gaussian_smooth(mean, sigma);
    const auto& d = mean.meta.dims;
    Skeleton sk;
    sk.fa_threshold = threshold;
    sk.mask = LabelVolume(mean.meta);
    sk.mask.label_names[1] = "skeleton";
    sk.perpendicular.assign(mean.meta.voxel_count(), Vec3::Zero());

    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                if (!(mean(i, j, k) > threshold)) continue;
                const int p[3] = {i, j, k};
                auto f = [&](int a, int b, int c) { return at_clamped(s, a, b, c); };
                Mat3 h;
                for (int a = 0; a < 3; ++a)
                    for (int b = a; b < 3; ++b) {
                        int e1[3] = {0, 0, 0}, e2[3] = {0, 0, 0};
                        e1[a] = 1;
                        e2[b] = 1;
                        double v;
                        if (a == b) {
                            v = f(p[0] + e1[0], p[1] + e1[1], p[2] + e1[2]) - 2.0 * f(i, j, k) +
                                f(p[0] - e1[0], p[1] - e1[1], p[2] - e1[2]);
                        } else {
                            v = 0.25 * (f(p[0] + e1[0] + e2[0], p[1] + e1[1] + e2[1], p[2] + e1[2] + e2[2]) -
                                        f(p[0] + e1[0] - e2[0], p[1] + e1[1] - e2[1], p[2] + e1[2] - e2[2]) -
                                        f(p[0] - e1[0] + e2[0], p[1] - e1[1] + e2[1], p[2] - e1[2] + e2[2]) +
                                        f(p[0] - e1[0] - e2[0], p[1] - e1[1] - e2[1], p[2] - e1[2] - e2[2]));
                        }
                        h(a, b) = h(b, a) = v;
                    }
                Eigen::SelfAdjointEigenSolver<Mat3> es(h);
                Vec3 n = es.eigenvectors().col(0);  // ascending: most negative first
                const Vec3 ev = es.eigenvalues();
                if (ev[0] < 0.0 && ev[1] - ev[0] <= 1e-3 * std::abs(ev[0])) {
                    // tube-like ridge: the two leading eigenvectors are arbitrary within their
                    // plane, take the voxel axis that lies most in it (lowest axis on ties)
                    const Eigen::Matrix<double, 3, 2> b = es.eigenvectors().leftCols<2>();
                    int axis = 0;
                    double best = -1.0;
                    for (int a = 0; a < 3; ++a) {
                        const double w = b.row(a).norm();
                        if (w > best + 1e-9) best = w, axis = a;
                    }
                    n = b * b.row(axis).transpose();
                }
                // off the ridge the local centre of gravity points across it
                Vec3 cog = Vec3::Zero();
                double mass = 0.0;
                for (int c = -1; c <= 1; ++c)
                    for (int b = -1; b <= 1; ++b)
                        for (int a = -1; a <= 1; ++a) {
                            const double w = std::max(0.0, f(i + a, j + b, k + c));
                            cog += w * Vec3(a, b, c);
                            mass += w;
                        }
                if (mass > 0.0 && (cog / mass).norm() > kCogOffset) {
                    n = cog.normalized();
                    // drop drift along a flat ridge axis unless that is where the pull is
                    const Vec3 flat = es.eigenvectors().col(2);
                    const Vec3 across = n - n.dot(flat) * flat;
                    if (ev[2] >= 0.1 * ev[0] && across.norm() >= 0.5) n = across;
                }
                n.normalize();
                const Vec3 x(i, j, k);
                const double f0 = sample_trilinear(s, x);
                const double fp = sample_trilinear(s, x + n);
                const double fm = sample_trilinear(s, x - n);
                if (f0 >= fp && f0 >= fm && (f0 > fp || f0 > fm)) {
                    const std::size_t q = mean.meta.index(i, j, k);
                    sk.mask.data[q] = 1;
                    sk.perpendicular[q] = n;
                }
            }
    return sk;
}

ScalarVolume project(const ScalarVolume& subject, const Skeleton& skeleton, int radius) {
    require(radius >= 0, "project: radius must be >= 0");
    require(subject.meta == skeleton.mask.meta, "project: subject must be in skeleton space");
    ScalarVolume out(subject.meta);
    const auto& d = subject.meta.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const std::size_t q = subject.meta.index(i, j, k);
                if (!skeleton.mask.data[q]) continue;
                const Vec3 x(i, j, k);
                const Vec3& n = skeleton.perpendicular[q];
                double best = subject.data[q];
                for (int s = 1; s <= radius; ++s)
                    for (int sign : {1, -1}) best = std::max(best, sample_trilinear(subject, x + sign * s * n));
                out.data[q] = best;
            }
    return out;
}

GroupSkeleton skeletonize_group(const std::vector<ScalarVolume>& group, double threshold, int radius) {
    GroupSkeleton g;
    g.mean = mean_fa(group);
    g.skeleton = skeletonize(g.mean, threshold);
    for (const auto& v : group) g.stack.push_back(project(v, g.skeleton, radius));
    return g;
}

}  // namespace dtalign

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dtalign/dtensor.hpp"
#include "dtalign/linalg3.hpp"
#include "dtalign/objectives.hpp"
#include "dtalign/xform.hpp"
#include "support.hpp"

using namespace dtalign;

namespace {

Mat3 euler(double a, double b, double c) {
    return (Eigen::AngleAxisd(a, Vec3::UnitZ()) * Eigen::AngleAxisd(b, Vec3::UnitY()) *
            Eigen::AngleAxisd(c, Vec3::UnitX()))
        .toRotationMatrix();
}

// Brute-force nearest rotation: coarse Euler grid, then shrinking local grids.
Mat3 grid_search_rotation(const Mat3& a) {
    const double pi = std::numbers::pi;
    double best = 1e300;
    Vec3 bp;
    const double step0 = pi / 18;
    for (double x = -pi; x < pi; x += step0)
        for (double y = -pi / 2; y <= pi / 2; y += step0)
            for (double z = -pi; z < pi; z += step0) {
                const double d = (a - euler(x, y, z)).norm();
                if (d < best) best = d, bp = Vec3(x, y, z);
            }
    for (double step = step0; step > 1e-9; step *= 0.5) {
        const Vec3 c = bp;
        for (int i = -2; i <= 2; ++i)
            for (int j = -2; j <= 2; ++j)
                for (int k = -2; k <= 2; ++k) {
                    const Vec3 p = c + step * Vec3(i, j, k);
                    const double d = (a - euler(p[0], p[1], p[2])).norm();
                    if (d < best) best = d, bp = p;
                }
    }
    return euler(bp[0], bp[1], bp[2]);
}

DeformationField rotation_about_center(const GridMeta& m, const Mat3& q, const Vec3& t = Vec3::Zero()) {
    return affine_to_field(AffineTransform::about_center(q, m.center(), t), m);
}

}  // namespace

TEST_CASE("polar rotation of rotations and scalings") {
    std::mt19937_64 rng(4);
    const Mat3 q = testsupport::random_rotation(rng);
    CHECK((polar_rotation(q) - q).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((polar_rotation(Mat3(Vec3(2, 3, 4).asDiagonal())) - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(polar_rotation(Mat3::Zero()), Error);
    Mat3 sing = testsupport::random_matrix(rng);
    sing.col(2) = sing.col(0) + sing.col(1);
    CHECK_THROWS_AS(polar_rotation(sing), Error);
}

TEST_CASE("polar rotation matches a brute-force nearest-rotation search") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        std::mt19937_64 rng(seed);
        Mat3 a = testsupport::random_matrix(rng);
        if (a.determinant() < 0) a.col(0) *= -1.0;
        const Mat3 r = polar_rotation(a);
        const Mat3 g = grid_search_rotation(a);
        CHECK((a - r).norm() <= (a - g).norm() + 1e-9);
        CHECK((r - g).cwiseAbs().maxCoeff() < 1e-6);
        const PolarFactors f = polar_factors(a);
        const Mat3 p = f.v * f.sigma.asDiagonal() * f.v.transpose();
        CHECK((f.rotation * p - a).norm() / a.norm() < 1e-9);
    }
}

TEST_CASE("svd reconstructs and orders singular values") {
    std::mt19937_64 rng(9);
    for (int s = 0; s < 100; ++s) {
        const Mat3 a = testsupport::random_matrix(rng);
        const Svd3 d = svd3(a);
        CHECK((d.w * d.sigma.asDiagonal() * d.v.transpose() - a).norm() / a.norm() < 1e-12);
        CHECK(d.sigma[0] >= d.sigma[1]);
        CHECK(d.sigma[1] >= d.sigma[2]);
        CHECK(d.sigma[2] >= 0.0);
    }
}

TEST_CASE("affine transform contract") {
    CHECK_THROWS_AS(AffineTransform(Mat3(Vec3(1, 1, -1).asDiagonal()), Vec3::Zero()), Error);
    std::mt19937_64 rng(1);
    const AffineTransform a(1.1 * testsupport::random_rotation(rng), Vec3(1, 2, 3));
    const AffineTransform b = AffineTransform::from_text(a.to_text());
    CHECK(b.matrix() == a.matrix());
    CHECK(b.translation() == a.translation());
    const Vec3 p(0.3, -2.0, 5.0);
    CHECK((a.then_after(a.inverse()).apply(p) - p).norm() < 1e-12);
    const AffineTransform c = AffineTransform::about_center(2.0 * Mat3::Identity(), Vec3(1, 1, 1), Vec3(0.5, 0, 0));
    CHECK((c.apply(Vec3(1, 1, 1)) - Vec3(1.5, 1, 1)).norm() < 1e-15);
    CHECK_THROWS_AS(AffineTransform::from_text("1 0 0 0 1 0 0 0 1 0 0"), Error);

    const auto dir = testsupport::temp_dir("affine");
    a.save(dir / "a.txt");
    CHECK(AffineTransform::load(dir / "a.txt").matrix() == a.matrix());
}

TEST_CASE("jacobian of zero, affine and quadratic fields") {
    const GridMeta m{{6, 5, 7}, Vec3(1.0, 0.8, 1.3), Vec3(2, -1, 0)};
    for (const Mat3& j : jacobian_field(DeformationField(m))) CHECK((j - Mat3::Identity()).norm() < 1e-15);

    std::mt19937_64 rng(3);
    const Mat3 a = Mat3::Identity() + 0.2 * testsupport::random_matrix(rng);
    const auto jf = jacobian_field(affine_to_field(AffineTransform(a, Vec3(1, 2, 3)), m));
    for (int k = 1; k < 6; ++k)
        for (int j = 1; j < 4; ++j)
            for (int i = 1; i < 5; ++i) CHECK((jf[m.index(i, j, k)] - a).cwiseAbs().maxCoeff() < 1e-9);

    // dx = alpha x^2, x physical: d/dx = 1 + 2 alpha x
    const double alpha = 0.05;
    DeformationField q(m);
    for (int k = 0; k < 7; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 6; ++i) {
                const double x = m.to_physical(i, j, k).x();
                q.disp[m.index(i, j, k)] = Vec3(alpha * x * x, 0, 0);
            }
    const auto jq = jacobian_field(q);
    const double x1 = m.to_physical(1, 1, 1).x();
    CHECK(jq[m.index(1, 1, 1)](0, 0) == doctest::Approx(1.0 + 2.0 * alpha * x1).epsilon(1e-12));
    // one-sided at the face: error O(spacing)
    const double x0 = m.to_physical(0, 1, 1).x();
    CHECK(std::abs(jq[m.index(0, 1, 1)](0, 0) - (1.0 + 2.0 * alpha * x0)) <= alpha * m.spacing.x() + 1e-12);
}

TEST_CASE("rotation fields") {
    const GridMeta m = GridMeta::cube(6);
    std::mt19937_64 rng(12);
    const Mat3 q = testsupport::random_rotation(rng);
    const RotationField rf = rotation_field(rotation_about_center(m, q));
    for (const Mat3& r : rf.rotation) CHECK((r - q).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(rf.degenerate == 0);
    for (const Mat3& r : rotation_field(DeformationField(m)).rotation) CHECK((r - Mat3::Identity()).norm() < 1e-15);

    // swirl: rotation about z by an angle growing with radius
    const GridMeta g = GridMeta::cube(12);
    DeformationField swirl(g);
    for (int k = 0; k < 12; ++k)
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i) {
                const Vec3 p = g.to_physical(i, j, k) - g.center();
                const double th = 0.4 * std::exp(-p.squaredNorm() / 30.0);
                swirl.disp[g.index(i, j, k)] = Eigen::AngleAxisd(th, Vec3::UnitZ()) * p - p;
            }
    const RotationField sr = rotation_field(swirl);
    for (const Mat3& r : sr.rotation) {
        CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
        CHECK(std::abs(r.determinant() - 1.0) < 1e-6);
    }

    // folded voxels fall back to the identity and are counted
    DeformationField fold(g);
    for (int k = 0; k < 12; ++k)
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i) fold.disp[g.index(i, j, k)] = Vec3(-2.0 * i, 0, 0);
    const RotationField fr = rotation_field(fold);
    CHECK(fr.degenerate == g.voxel_count());
    CHECK((fr.rotation[0] - Mat3::Identity()).norm() == 0.0);
}

TEST_CASE("reorient_tensors") {
    const GridMeta m = GridMeta::cube(3);
    TensorVolume t(m);
    for (auto& d : t.data) d = sym::from_matrix(Mat3(Vec3(1e-3, 0.2e-3, 0.2e-3).asDiagonal()));
    RotationField id;
    id.meta = m;
    id.rotation.assign(m.voxel_count(), Mat3::Identity());
    CHECK(reorient_tensors(t, id).data == t.data);

    RotationField rz = id;
    rz.rotation.assign(m.voxel_count(), Mat3(Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitZ())));
    const TensorVolume r = reorient_tensors(t, rz);
    const TensorEigen e = eigen_decompose(r.data[4]);
    CHECK(std::abs(std::abs(e.vectors.col(0).y()) - 1.0) < 1e-9);
    CHECK((e.values - Vec3(1e-3, 0.2e-3, 0.2e-3)).cwiseAbs().maxCoeff() < 1e-15);

    RotationField wrong = id;
    wrong.meta = GridMeta::cube(4);
    CHECK_THROWS_AS(reorient_tensors(t, wrong), Error);
}

TEST_CASE("warp_scalar") {
    const GridMeta m = GridMeta::cube(6);
    const ScalarVolume v = testsupport::texture(m);
    CHECK(warp_scalar(v, DeformationField(m)).data == v.data);

    const ScalarVolume s = warp_scalar(v, affine_to_field(AffineTransform(Mat3::Identity(), Vec3(1, 0, 0)), m));
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 6; ++i) CHECK(s(i, j, k) == (i < 5 ? v(i + 1, j, k) : 0.0));

    ScalarVolume ramp(m);
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 6; ++i) ramp(i, j, k) = 2.0 * i - j + 0.5 * k;
    const ScalarVolume h = warp_scalar(ramp, affine_to_field(AffineTransform(Mat3::Identity(), Vec3(0.5, 0, 0)), m));
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 5; ++i) CHECK(std::abs(h(i, j, k) - (2.0 * (i + 0.5) - j + 0.5 * k)) < 1e-12);
}

TEST_CASE("warp_tensor under a global rotation") {
    const GridMeta m = GridMeta::cube(9);
    std::mt19937_64 rng(21);
    const Mat3 q = testsupport::random_rotation(rng);
    // tensor field affine in space, so trilinear interpolation is exact
    const Mat3 d0 = testsupport::random_spd(rng, 0.5e-3, 1.5e-3);
    const Mat3 dx = 0.02e-3 * Mat3::Identity() + 0.01e-3 * Mat3::Ones();
    TensorVolume t(m);
    auto field_at = [&](const Vec3& p) { return Mat3(d0 + (p - m.center()).x() * dx); };
    for (int k = 0; k < 9; ++k)
        for (int j = 0; j < 9; ++j)
            for (int i = 0; i < 9; ++i) t(i, j, k) = sym::from_matrix(field_at(m.to_physical(i, j, k)));
    const DeformationField f = rotation_about_center(m, q);
    const TensorVolume w = warp_tensor(t, f);
    int checked = 0;
    for (int k = 0; k < 9; ++k)
        for (int j = 0; j < 9; ++j)
            for (int i = 0; i < 9; ++i) {
                const Vec3 y = f.map(i, j, k);
                const Vec3 vy = m.to_voxel(y);
                if ((vy.array() < 0).any() || (vy.array() > 8).any()) continue;
                const Mat3 expect = q.transpose() * field_at(y) * q;
                CHECK((sym::to_matrix(w(i, j, k)) - expect).cwiseAbs().maxCoeff() < 1e-6 * 1e-3);
                ++checked;
            }
    CHECK(checked > 100);
    CHECK(warp_tensor(t, DeformationField(m)).data == t.data);
}

TEST_CASE("warp_tensor preserves eigenvalues at lattice-exact points") {
    const GridMeta m = GridMeta::cube(7);
    std::mt19937_64 rng(6);
    TensorVolume t(m);
    for (auto& d : t.data) d = sym::from_matrix(testsupport::random_spd(rng));
    const Mat3 q = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitX()).toRotationMatrix();
    const DeformationField f = rotation_about_center(m, q, Vec3(1, 0, 0));
    const TensorVolume w = warp_tensor(t, f);
    for (int k = 0; k < 7; ++k)
        for (int j = 0; j < 7; ++j)
            for (int i = 0; i < 7; ++i) {
                const Vec3 v = m.to_voxel(f.map(i, j, k));
                const Eigen::Vector3i n = v.array().round().cast<int>();
                if (!m.contains(n[0], n[1], n[2])) continue;
                const Vec3 a = eigen_decompose(w(i, j, k)).values;
                const Vec3 b = eigen_decompose(t(n[0], n[1], n[2])).values;
                CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9 * 1e-3);
            }
}

TEST_CASE("constant isotropic tensors are unchanged by a smooth field") {
    const GridMeta m = GridMeta::cube(8);
    TensorVolume t(m);
    for (auto& d : t.data) d = sym::from_matrix(Mat3(1e-3 * Mat3::Identity()));
    DeformationField f(m);
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 8; ++j)
            for (int i = 0; i < 8; ++i) f.disp[m.index(i, j, k)] = 0.3 * Vec3(std::sin(0.5 * j), std::cos(0.4 * k), 0.2 * std::sin(0.3 * i));
    const TensorVolume w = warp_tensor(t, f);
    for (int k = 1; k < 7; ++k)
        for (int j = 1; j < 7; ++j)
            for (int i = 1; i < 7; ++i)
                for (int c = 0; c < 6; ++c) CHECK(std::abs(w(i, j, k)[c] - t(i, j, k)[c]) < 1e-15);
}

TEST_CASE("warp_labels") {
    const GridMeta m = GridMeta::cube(5);
    LabelVolume l(m);
    for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = static_cast<int>(i % 3);
    l.name_missing_labels();
    CHECK(warp_labels(l, DeformationField(m)).data == l.data);
    const LabelVolume s = warp_labels(l, affine_to_field(AffineTransform(Mat3::Identity(), Vec3(0, 1, 0)), m));
    for (int k = 0; k < 5; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 5; ++i) CHECK(s(i, j, k) == (j < 4 ? l(i, j + 1, k) : 0));
    DeformationField f(m);
    for (auto& d : f.disp) d = Vec3(0.37, -0.2, 0.61);
    for (auto x : warp_labels(l, f).data) CHECK((x >= 0 && x <= 2));
}

TEST_CASE("composition") {
    const GridMeta m = GridMeta::cube(6, 1.5);
    const DeformationField z = compose(AffineTransform::identity(), DeformationField(m));
    for (const auto& d : z.disp) CHECK(d.norm() == 0.0);

    std::mt19937_64 rng(13);
    const AffineTransform a1(Mat3::Identity() + 0.1 * testsupport::random_matrix(rng), Vec3(1, -2, 0.5));
    const AffineTransform a2(Mat3::Identity() + 0.1 * testsupport::random_matrix(rng), Vec3(0.3, 0.2, -0.4));
    const DeformationField c = compose(a1, affine_to_field(a2, m));
    const AffineTransform both = a1.then_after(a2);
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 6; ++i) {
                CHECK((c.map(i, j, k) - both.apply(m.to_physical(i, j, k))).norm() < 1e-9);
                CHECK((affine_to_field(a1, m).map(i, j, k) - a1.apply(m.to_physical(i, j, k))).norm() < 1e-12);
            }

    // field o field on affine fields is exact where the inner map stays inside
    const AffineTransform s1(Mat3(Eigen::AngleAxisd(0.1, Vec3::UnitZ())), Vec3(0.2, 0, 0));
    const AffineTransform s2(1.02 * Mat3::Identity(), Vec3(-0.1, 0.1, 0));
    const DeformationField ff = compose(affine_to_field(s1, m), affine_to_field(s2, m));
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 6; ++i) {
                const Vec3 in = s2.apply(m.to_physical(i, j, k));
                const Vec3 v = m.to_voxel(in);
                if ((v.array() < 0).any() || (v.array() > 5).any()) continue;
                CHECK((ff.map(i, j, k) - s1.apply(in)).norm() < 1e-9);
            }

    CHECK(njd_percent(affine_to_field(AffineTransform(1.05 * Mat3::Identity(), Vec3::Zero()), m)) == 0.0);
    for (double d : jacobian_determinants(affine_to_field(AffineTransform(1.05 * Mat3::Identity(), Vec3::Zero()), m)))
        CHECK(d == doctest::Approx(std::pow(1.05, 3)).epsilon(1e-12));
    const DeformationField tr = affine_to_field(AffineTransform(Mat3::Identity(), Vec3(3, 0, 0)), m);
    for (const auto& d : tr.disp) CHECK((d - Vec3(3, 0, 0)).norm() < 1e-12);
}

TEST_CASE("one-pass warp is at least as sharp as two passes on a checkerboard") {
    const GridMeta m = GridMeta::cube(16);
    ScalarVolume board(m);
    for (int k = 0; k < 16; ++k)
        for (int j = 0; j < 16; ++j)
            for (int i = 0; i < 16; ++i) board(i, j, k) = ((i / 2 + j / 2 + k / 2) % 2) ? 1.0 : 0.0;
    const AffineTransform rot = AffineTransform::about_center(Mat3(Eigen::AngleAxisd(0.2, Vec3::UnitZ())), m.center(), Vec3::Zero());
    const AffineTransform tr(Mat3::Identity(), Vec3(0.4, 0.3, 0.0));
    const ScalarVolume two = warp_scalar(warp_scalar(board, affine_to_field(tr, m)), affine_to_field(rot, m));
    const ScalarVolume one = warp_scalar(board, compose(tr, affine_to_field(rot, m)));
    CHECK(tenengrad(one) >= tenengrad(two));
}

TEST_CASE("deformation field files round trip") {
    const GridMeta m{{4, 5, 3}, Vec3(1.2, 1.2, 1.2), Vec3(0, 0, 0)};
    DeformationField f(m);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    for (auto& d : f.disp) d = Vec3(nd(rng), nd(rng), nd(rng));
    const auto dir = testsupport::temp_dir("field");
    f.save(dir / "f.nii");
    const DeformationField g = DeformationField::load(dir / "f.nii");
    CHECK(g.meta == m);
    for (std::size_t i = 0; i < f.disp.size(); ++i) CHECK(g.disp[i] == f.disp[i]);
    DeformationField bad = f;
    bad.disp[3][1] = std::nan("");
    CHECK_THROWS_AS(bad.validate(), Error);
}

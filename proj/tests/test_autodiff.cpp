#include <doctest.h>

#include <cmath>

#include "dtalign/autodiff.hpp"
#include "support.hpp"

using namespace dtalign;
using ad::Var;

namespace {

using Builder = std::function<Var(const Var&)>;

std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0, double offset = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v) x = offset + scale * nd(rng);
    return v;
}

/// Scalar reduction with fixed random weights, so every output entry matters.
Var reduce(const Var& y) {
    return ad::mse_loss(y, ad::constant(randn(y->value.size(), 99, 0.5), y->channels, y->meta));
}

/// Analytic gradient of build(x) against central differences at `samples` entries.
double audit(const Builder& build, const std::vector<double>& x0, int channels, const GridMeta& meta, double h = 1e-6,
             int samples = 30) {
    const Var p = ad::parameter(x0, channels, meta);
    const Var l = build(p);
    ad::backward(l);
    const std::vector<double> g = p->grad;
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    auto f = [&](const std::vector<double>& x) { return build(ad::constant(x, channels, meta))->scalar(); };
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> pick(0, x0.size() - 1);
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
        const std::size_t i = samples >= static_cast<int>(x0.size()) ? static_cast<std::size_t>(s) % x0.size() : pick(rng);
        const double fd = testsupport::central_diff(f, x0, i, h);
        worst = std::max(worst, testsupport::rel_err(g[i], fd, 1e-4 * gmax + 1e-12));
    }
    return worst;
}

const GridMeta g4 = GridMeta::cube(4);

Var field_on(const GridMeta& m, std::uint64_t seed, double scale) {
    return ad::constant(randn(3 * m.voxel_count(), seed, scale), 3, m);
}

}  // namespace

TEST_CASE("elementwise and structural ops") {
    const auto x = randn(2 * 64, 1);
    CHECK(audit([](const Var& p) { return reduce(ad::add(p, ad::scale(p, 0.3))); }, x, 2, g4) < 1e-5);
    CHECK(audit([](const Var& p) { return reduce(ad::scale_channels(p, {2.0, -0.5})); }, x, 2, g4) < 1e-5);
    CHECK(audit([](const Var& p) { return reduce(ad::leaky_relu(p, 0.2)); }, x, 2, g4) < 1e-5);
    CHECK(audit([](const Var& p) { return reduce(ad::slice_channels(ad::concat({p, ad::scale(p, 2.0)}), 1, 2)); }, x, 2,
                g4) < 1e-5);
    CHECK(audit(
              [](const Var& p) {
                  return ad::weighted_sum({reduce(p), ad::mse_loss(p, ad::scale(p, 0.0))}, {0.7, -1.3});
              },
              x, 2, g4) < 1e-5);
}

TEST_CASE("convolution and pooling") {
    const GridMeta m{{5, 4, 6}, Vec3::Ones(), Vec3::Zero()};
    const auto x = randn(3 * m.voxel_count(), 2);
    const Var w = ad::constant(randn(2 * 3 * 27, 3, 0.3), 1, ad::flat_meta(2 * 3 * 27));
    const Var b = ad::constant({0.1, -0.2}, 1, ad::flat_meta(2));
    CHECK(audit([&](const Var& p) { return reduce(ad::conv3d(p, w, b, 3)); }, x, 3, m) < 1e-5);
    const Var xin = ad::constant(x, 3, m);
    CHECK(audit([&](const Var& p) { return reduce(ad::conv3d(xin, p, b, 3)); }, w->value, 1, w->meta) < 1e-5);
    CHECK(audit([&](const Var& p) { return reduce(ad::conv3d(xin, w, p, 3)); }, b->value, 1, b->meta) < 1e-5);
    const Var w1 = ad::constant(randn(4 * 3, 4), 1, ad::flat_meta(12));
    const Var b1 = ad::constant(randn(4, 5), 1, ad::flat_meta(4));
    CHECK(audit([&](const Var& p) { return reduce(ad::conv3d(p, w1, b1, 1)); }, x, 3, m) < 1e-5);

    CHECK(audit([](const Var& p) { return reduce(ad::max_pool2(p)); }, x, 3, m) < 1e-5);
    CHECK(audit([](const Var& p) { return reduce(ad::avg_pool2(p)); }, x, 3, m) < 1e-5);
    const Var pooled = ad::avg_pool2(xin);
    CHECK(pooled->meta == downsampled(m));
    CHECK(pooled->value[0] == doctest::Approx((x[0] + x[1] + x[5] + x[6] + x[20] + x[21] + x[25] + x[26]) / 8.0));
}

TEST_CASE("zero input and zero bias give zero features") {
    const GridMeta m = GridMeta::cube(4);
    const Var x = ad::constant(std::vector<double>(2 * 64, 0.0), 2, m);
    const Var w = ad::constant(randn(3 * 2 * 27, 1), 1, ad::flat_meta(3 * 2 * 27));
    const Var b = ad::constant(std::vector<double>(3, 0.0), 1, ad::flat_meta(3));
    const Var f = ad::max_pool2(ad::leaky_relu(ad::conv3d(x, w, b, 3), 0.2));
    for (double v : f->value) CHECK(v == 0.0);
}

TEST_CASE("geometry ops") {
    const GridMeta m{{5, 4, 4}, Vec3(1.0, 1.2, 0.9), Vec3(0.5, -1.0, 0.0)};
    std::vector<double> params{1.05, 0.02, -0.03, -0.01, 0.97, 0.04, 0.03, 0.01, 1.02, 0.3, -0.2, 0.1};
    const Var img = ad::constant(randn(2 * m.voxel_count(), 11, 1.0, 2.0), 2, m);
    CHECK(audit([&](const Var& p) { return reduce(ad::sample(img, ad::affine_field(p, m))); }, params, 1,
                ad::flat_meta(12)) < 1e-5);

    const auto u = randn(3 * m.voxel_count(), 12, 0.3);
    CHECK(audit([&](const Var& p) { return reduce(ad::sample(img, p)); }, u, 3, m) < 1e-5);
    const Var uf = ad::constant(u, 3, m);
    CHECK(audit([&](const Var& p) { return reduce(ad::sample(p, uf)); }, img->value, 2, m) < 1e-5);

    Mat3 a;
    a << 1.1, 0.1, 0.0, -0.05, 0.95, 0.02, 0.0, 0.03, 1.0;
    CHECK(audit([&](const Var& p) { return reduce(ad::sample(img, ad::compose_affine(p, a, Vec3(0.2, 0.1, -0.3)))); }, u,
                3, m) < 1e-5);

    const GridMeta coarse = downsampled(m);
    const auto uc = randn(3 * coarse.voxel_count(), 13);
    CHECK(audit([&](const Var& p) { return reduce(ad::upsample_field(p, m)); }, uc, 3, coarse) < 1e-5);
}

TEST_CASE("upsampling keeps millimetre displacements") {
    const GridMeta fine = GridMeta::cube(8);
    const GridMeta coarse = downsampled(fine);
    std::vector<double> c(3 * coarse.voxel_count(), 0.0);
    for (std::size_t i = 0; i < coarse.voxel_count(); ++i) c[i] = 2.0;  // 1 coarse voxel = 2 mm
    const Var up = ad::upsample_field(ad::constant(c, 3, coarse), fine);
    for (std::size_t i = 0; i < fine.voxel_count(); ++i) {
        CHECK(up->value[i] == doctest::Approx(2.0));  // now 2 fine voxels
        CHECK(up->value[fine.voxel_count() + i] == 0.0);
    }
}

TEST_CASE("reorientation ops") {
    const GridMeta m = GridMeta::cube(4);
    std::mt19937_64 rng(14);
    std::vector<double> t(6 * m.voxel_count());
    for (std::size_t v = 0; v < m.voxel_count(); ++v) {
        const Sym6 s = sym::from_matrix(testsupport::random_spd(rng, 0.2, 1.5));
        for (int c = 0; c < 6; ++c) t[c * m.voxel_count() + v] = s[c];
    }
    const auto u = randn(3 * m.voxel_count(), 15, 0.15);
    const Var tv = ad::constant(t, 6, m);
    const Var uv = ad::constant(u, 3, m);
    CHECK(audit([&](const Var& p) { return reduce(ad::reorient_field(tv, p)); }, u, 3, m, 1e-6, 60) < 1e-5);
    CHECK(audit([&](const Var& p) { return reduce(ad::reorient_field(p, uv)); }, t, 6, m) < 1e-5);

    std::vector<double> params{1.05, 0.2, -0.03, -0.1, 0.97, 0.04, 0.03, 0.01, 1.02, 0.3, -0.2, 0.1};
    CHECK(audit([&](const Var& p) { return reduce(ad::reorient_affine(tv, p)); }, params, 1, ad::flat_meta(12)) < 1e-5);
    const Var pv = ad::constant(params, 1, ad::flat_meta(12));
    CHECK(audit([&](const Var& p) { return reduce(ad::reorient_affine(p, pv)); }, t, 6, m) < 1e-5);

    // rotation-only affine: tensors conjugated by R^T . R
    const Mat3 q = testsupport::random_rotation(rng);
    std::vector<double> rp(12, 0.0);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rp[3 * r + c] = q(r, c);
    const Var out = ad::reorient_affine(tv, ad::constant(rp, 1, ad::flat_meta(12)));
    Sym6 s0;
    for (int c = 0; c < 6; ++c) s0[c] = t[c * m.voxel_count()];
    const Mat3 expect = q.transpose() * sym::to_matrix(s0) * q;
    Sym6 got;
    for (int c = 0; c < 6; ++c) got[c] = out->value[c * m.voxel_count()];
    CHECK((sym::to_matrix(got) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mass centres and the least-squares affine head") {
    const GridMeta m{{5, 5, 4}, Vec3(1.0, 1.1, 0.9), Vec3::Zero()};
    const auto f = randn(6 * m.voxel_count(), 16, 1.0, 0.3);
    CHECK(audit([&](const Var& p) { return reduce(ad::mass_centers(p)); }, f, 6, m) < 1e-5);

    // exact point correspondences under a known affine
    Mat3 a;
    a << 1.1, 0.1, -0.05, 0.02, 0.9, 0.1, -0.1, 0.05, 1.05;
    const Vec3 t(1.0, -2.0, 0.5);
    std::vector<Vec3> pts{{0, 0, 0}, {3, 0, 0}, {0, 4, 0}, {0, 0, 2}, {2, 3, 1}, {1, 1, 3}};
    std::vector<double> tc(pts.size() * 4), mc(pts.size() * 4);
    for (std::size_t c = 0; c < pts.size(); ++c) {
        const Vec3 q = a * pts[c] + t;
        for (int d = 0; d < 3; ++d) tc[4 * c + d] = pts[c][d], mc[4 * c + d] = q[d];
        tc[4 * c + 3] = mc[4 * c + 3] = 1.0;
    }
    const Var mcv = ad::constant(mc, 1, ad::flat_meta(mc.size()));
    const Var tcv = ad::constant(tc, 1, ad::flat_meta(tc.size()));
    const Var fit = ad::lstsq_affine(mcv, tcv);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) CHECK(std::abs(fit->value[3 * r + c] - a(r, c)) < 1e-9);
        CHECK(std::abs(fit->value[9 + r] - t[r]) < 1e-9);
    }
    const Var same = ad::lstsq_affine(tcv, tcv);
    for (int i = 0; i < 12; ++i) CHECK(std::abs(same->value[i] - (i < 9 && i % 4 == 0 ? 1.0 : 0.0)) < 1e-9);

    auto jitter = randn(mc.size(), 17, 0.2);
    for (std::size_t i = 0; i < mc.size(); ++i)
        if (i % 4 != 3) jitter[i] += mc[i];
        else jitter[i] = 1.0;
    CHECK(audit([&](const Var& p) { return reduce(ad::lstsq_affine(p, tcv)); }, jitter, 1, ad::flat_meta(mc.size())) < 1e-5);
    CHECK(audit([&](const Var& p) { return reduce(ad::lstsq_affine(mcv, p)); }, jitter, 1, ad::flat_meta(mc.size())) < 1e-5);

    // coplanar centres are rejected
    std::vector<double> flat = tc;
    for (std::size_t c = 0; c < pts.size(); ++c) flat[4 * c + 2] = 0.0;
    const Var fv = ad::constant(flat, 1, ad::flat_meta(flat.size()));
    try {
        ad::lstsq_affine(fv, fv);
        FAIL("expected rank deficiency");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Numerical);
    }
}

TEST_CASE("translated features move the centres by the translation") {
    const GridMeta m = GridMeta::cube(8);
    std::vector<double> a(4 * 512, 0.0), b(4 * 512, 0.0);
    std::vector<std::array<int, 3>> peaks{{{1, 1, 1}}, {{5, 1, 2}}, {{2, 5, 1}}, {{1, 2, 4}}};
    for (int c = 0; c < 4; ++c) {
        const auto& p = peaks[c];
        a[c * 512 + m.index(p[0], p[1], p[2])] = 1.0;
        b[c * 512 + m.index(p[0] + 2, p[1] + 1, p[2] + 3)] = 1.0;
    }
    const Var fit = ad::lstsq_affine(ad::mass_centers(ad::constant(b, 4, m)), ad::mass_centers(ad::constant(a, 4, m)));
    CHECK(std::abs(fit->value[9] - 2.0) < 1e-9);
    CHECK(std::abs(fit->value[10] - 1.0) < 1e-9);
    CHECK(std::abs(fit->value[11] - 3.0) < 1e-9);
}

TEST_CASE("correlation op") {
    const GridMeta m = GridMeta::cube(5);
    const auto a = randn(2 * 125, 18), b = randn(2 * 125, 19);
    const std::vector<std::array<int, 3>> off{{{0, 0, 0}}, {{1, 0, -1}}, {{-2, 2, 0}}};
    const Var av = ad::constant(a, 2, m), bv = ad::constant(b, 2, m);
    CHECK(audit([&](const Var& p) { return reduce(ad::correlation(p, bv, off)); }, a, 2, m) < 1e-5);
    CHECK(audit([&](const Var& p) { return reduce(ad::correlation(av, p, off)); }, b, 2, m) < 1e-5);
    const Var c = ad::correlation(av, bv, off);
    // channel 1 at voxel (1,1,1): mean over feature channels of a(x) b(x + (1,0,-1))
    const std::size_t x = m.index(1, 1, 1), y = m.index(2, 1, 0);
    CHECK(c->value[125 + x] == doctest::Approx(0.5 * (a[x] * b[y] + a[125 + x] * b[125 + y])));
}

TEST_CASE("loss ops wrap the objectives with exact gradients") {
    const GridMeta m = GridMeta::cube(6);
    const Var tgt = ad::constant(testsupport::texture(m).data, 1, m);
    const auto mv = randn(216, 20, 0.2, 0.5);
    CHECK(audit([&](const Var& p) { return ad::ncc_loss(tgt, p, 5); }, mv, 1, m) < 1e-4);

    const auto t6 = randn(6 * 216, 21), m6 = randn(6 * 216, 22);
    std::vector<std::uint8_t> region(216, 1);
    const Var tv = ad::constant(t6, 6, m);
    CHECK(audit([&](const Var& p) { return ad::tensor_loss(tv, p, region); }, m6, 6, m) < 1e-5);

    std::vector<double> oh(2 * 216, 0.0);
    for (int v = 0; v < 216; ++v) oh[(v % 2) * 216 + v] = v % 3 ? 1.0 : 0.0;
    const auto soft = randn(2 * 216, 23, 0.2, 0.5);
    const Var ohv = ad::constant(oh, 2, m);
    CHECK(audit([&](const Var& p) { return ad::soft_dice_loss(ohv, p); }, soft, 2, m) < 1e-5);
    CHECK(audit([&](const Var& p) { return ad::smoothness_loss(p); }, randn(3 * 216, 24), 3, m) < 1e-5);
}

TEST_CASE("backward through a shared subgraph accumulates") {
    const Var p = ad::parameter_vector({1.0, 2.0});
    const Var q = ad::scale(p, 3.0);
    const Var l = ad::weighted_sum({ad::mse_loss(q, ad::constant_vector({0.0, 0.0})), ad::mse_loss(q, ad::constant_vector({0.0, 0.0}))},
                                   {1.0, 1.0});
    ad::backward(l);
    // d/dp of 2 * mean((3p)^2) = 2 * 9 p
    CHECK(p->grad[0] == doctest::Approx(18.0));
    CHECK(p->grad[1] == doctest::Approx(36.0));
}

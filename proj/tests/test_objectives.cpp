#include <doctest.h>

#include <cmath>

#include "dtalign/objectives.hpp"
#include "support.hpp"

using namespace dtalign;

namespace {

// Direct per-window summation, no prefix sums.
double naive_ncc(const ScalarVolume& a, const ScalarVolume& b, int kernel) {
    const auto& d = a.meta.dims;
    const int r = kernel / 2;
    double total = 0.0;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                double n = 0, sa = 0, sb = 0;
                for (int z = k - r; z <= k + r; ++z)
                    for (int y = j - r; y <= j + r; ++y)
                        for (int x = i - r; x <= i + r; ++x)
                            if (a.meta.contains(x, y, z)) n += 1, sa += a(x, y, z), sb += b(x, y, z);
                const double ma = sa / n, mb = sb / n;
                double c = 0, va = 0, vb = 0;
                for (int z = k - r; z <= k + r; ++z)
                    for (int y = j - r; y <= j + r; ++y)
                        for (int x = i - r; x <= i + r; ++x)
                            if (a.meta.contains(x, y, z)) {
                                c += (a(x, y, z) - ma) * (b(x, y, z) - mb);
                                va += (a(x, y, z) - ma) * (a(x, y, z) - ma);
                                vb += (b(x, y, z) - mb) * (b(x, y, z) - mb);
                            }
                if (va / n < 1e-10 || vb / n < 1e-10) continue;
                total += c * c / (va * vb);
            }
    return 1.0 - total / static_cast<double>(a.meta.voxel_count());
}

ScalarVolume noise(const GridMeta& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ScalarVolume v(m);
    for (auto& x : v.data) x = u(rng);
    return v;
}

template <class F>
void check_gradient(F loss, std::vector<double> x, const std::vector<double>& grad, double tol, double h = 1e-6) {
    REQUIRE(grad.size() == x.size());
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    double gmax = 0.0;
    for (double g : grad) gmax = std::max(gmax, std::abs(g));
    for (int s = 0; s < 40; ++s) {
        const std::size_t i = pick(rng);
        const double fd = testsupport::central_diff(loss, x, i, h);
        CHECK(testsupport::rel_err(grad[i], fd, 1e-3 * gmax) < tol);
    }
}

}  // namespace

TEST_CASE("box_sum against direct summation") {
    const GridMeta m{{5, 4, 6}, Vec3::Ones(), Vec3::Zero()};
    const ScalarVolume v = noise(m, 2);
    const auto s = box_sum(v.data, m.dims, 1);
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 5; ++i) {
                double acc = 0.0;
                for (int z = k - 1; z <= k + 1; ++z)
                    for (int y = j - 1; y <= j + 1; ++y)
                        for (int x = i - 1; x <= i + 1; ++x)
                            if (m.contains(x, y, z)) acc += v(x, y, z);
                CHECK(s[m.index(i, j, k)] == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("local NCC") {
    const GridMeta m = GridMeta::cube(8);
    const ScalarVolume a = testsupport::texture(m);
    CHECK(local_ncc(a, a, 3) == doctest::Approx(0.0).epsilon(1e-9));
    ScalarVolume b = a;
    for (auto& x : b.data) x = 2.0 * x + 5.0;
    CHECK(local_ncc(a, b, 5) == doctest::Approx(0.0).epsilon(1e-9));
    const ScalarVolume n = noise(m, 7);
    const double l = local_ncc(a, n, 3);
    CHECK(l == doctest::Approx(naive_ncc(a, n, 3)).epsilon(1e-10));
    CHECK(l > 0.5);
    CHECK(local_ncc(a, n, 9) == doctest::Approx(naive_ncc(a, n, 9)).epsilon(1e-10));
    // flat windows contribute correlation 0
    const ScalarVolume flat(m, 1.0);
    CHECK(local_ncc(a, flat, 3) == doctest::Approx(1.0));
    CHECK_THROWS_AS(local_ncc(a, ScalarVolume(GridMeta::cube(7)), 3), Error);
    CHECK_THROWS_AS(local_ncc(a, a, 4), Error);
}

TEST_CASE("local NCC gradient matches finite differences") {
    const GridMeta m = GridMeta::cube(6);
    const ScalarVolume a = testsupport::texture(m);
    const ScalarVolume b = noise(m, 3);
    for (int kernel : {3, 5, 9}) {
        std::vector<double> g;
        local_ncc(a.data, b.data, m.dims, kernel, &g);
        check_gradient([&](const std::vector<double>& x) { return local_ncc(a.data, x, m.dims, kernel); }, b.data, g,
                       1e-4);
    }
}

TEST_CASE("tensor loss") {
    const GridMeta m = GridMeta::cube(2);
    TensorVolume atlas(m), moved(m);
    LabelVolume region(m);
    region.data[0] = 1;
    region.name_missing_labels();
    CHECK(tensor_loss(atlas, atlas, region) == 0.0);
    atlas.data[0] = sym::from_matrix(Mat3::Identity());
    // ED = 3, DD = 3
    CHECK(tensor_loss(atlas, moved, region) == doctest::Approx(6.0));
    atlas.data[0] = Sym6{};
    atlas.data[0][sym::XY] = 0.5;
    // off-diagonal delta counts twice in ED, never in DD
    CHECK(tensor_loss(atlas, moved, region) == doctest::Approx(2.0 * 0.25));
    CHECK_THROWS_AS(tensor_loss(atlas, moved, LabelVolume(m)), Error);

    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    const std::size_t n = 27;
    std::vector<double> a(6 * n), b(6 * n), g;
    for (auto& x : a) x = nd(rng);
    for (auto& x : b) x = nd(rng);
    std::vector<std::uint8_t> reg(n, 1);
    reg[3] = reg[10] = 0;
    tensor_loss(a, b, reg, &g);
    check_gradient([&](const std::vector<double>& x) { return tensor_loss(a, x, reg); }, b, g, 1e-6);
}

TEST_CASE("Dice") {
    const GridMeta m = GridMeta::cube(6);
    LabelVolume a(m), b(m);
    for (int k = 0; k < 2; ++k)
        for (int j = 0; j < 2; ++j)
            for (int i = 0; i < 2; ++i) {
                a(i, j, k) = 1;
                b(i + 1, j, k) = 1;
            }
    a.name_missing_labels();
    b.name_missing_labels();
    CHECK(dice_multiclass(a, a) == 1.0);
    CHECK(dice_multiclass(a, b) == doctest::Approx(0.5));
    CHECK(dice_multiclass(b, a) == dice_multiclass(a, b));
    LabelVolume c(m);
    for (int k = 3; k < 5; ++k)
        for (int j = 3; j < 5; ++j)
            for (int i = 3; i < 5; ++i) c(i, j, k) = 1;
    c.name_missing_labels();
    CHECK(dice_multiclass(a, c) == 0.0);
    try {
        dice_multiclass(LabelVolume(m), LabelVolume(m));
        FAIL("expected undefined metric");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Numerical);
    }
}

TEST_CASE("soft Dice equals hard Dice on one-hot inputs and has exact gradients") {
    const GridMeta m = GridMeta::cube(6);
    LabelVolume a(m), b(m);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] = static_cast<int>(i % 3);
        b.data[i] = static_cast<int>((i / 2) % 3);
    }
    a.name_missing_labels();
    b.name_missing_labels();
    const auto ta = one_hot(a, {1, 2}), tb = one_hot(b, {1, 2});
    CHECK(soft_dice_loss(ta, tb, 2) == doctest::Approx(1.0 - dice_multiclass(a, b)).epsilon(1e-12));

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(2 * m.voxel_count()), g;
    for (auto& x : p) x = u(rng);
    soft_dice_loss(ta, p, 2, &g);
    check_gradient([&](const std::vector<double>& x) { return soft_dice_loss(ta, x, 2); }, p, g, 1e-4);
}

TEST_CASE("smoothness loss") {
    const GridMeta m = GridMeta::cube(4);
    CHECK(smoothness_loss(DeformationField(m)) == 0.0);
    DeformationField t(m);
    for (auto& d : t.disp) d = Vec3(1.5, -2, 0.3);
    CHECK(smoothness_loss(t) == 0.0);

    // direct summation: forward differences of disp_x = x along x, averaged per axis
    DeformationField r(m);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i) r.disp[m.index(i, j, k)] = Vec3(i, 0, 0);
    double sum = 0.0;
    int pairs = 0;
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i + 1 < 4; ++i) {
                const double dx = r.disp[m.index(i + 1, j, k)].x() - r.disp[m.index(i, j, k)].x();
                sum += dx * dx;
                ++pairs;
            }
    CHECK(smoothness_loss(r) == doctest::Approx(sum / pairs));
    CHECK(smoothness_loss(r) == doctest::Approx(1.0));

    const GridMeta g6{{6, 5, 4}, Vec3(1.0, 1.2, 0.9), Vec3::Zero()};
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    std::vector<double> u(3 * g6.voxel_count()), grad;
    for (auto& x : u) x = nd(rng);
    smoothness_loss(u, g6, &grad);
    check_gradient([&](const std::vector<double>& x) { return smoothness_loss(x, g6); }, u, grad, 1e-6);
}

TEST_CASE("image correlation") {
    const GridMeta m = GridMeta::cube(8);
    const ScalarVolume a = testsupport::texture(m);
    CHECK(image_cc(a, a) == doctest::Approx(1.0).epsilon(1e-14));
    ScalarVolume neg = a;
    for (auto& x : neg.data) x = -x;
    CHECK(image_cc(a, neg) == doctest::Approx(-1.0).epsilon(1e-14));
    ScalarVolume scaled = a;
    for (auto& x : scaled.data) x = 3.0 * x + 1.0;
    CHECK(image_cc(a, scaled) == doctest::Approx(1.0).epsilon(1e-12));

    // translated by one voxel, compared with a two-pass direct sum
    ScalarVolume sh(m);
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 8; ++j)
            for (int i = 0; i < 8; ++i) sh(i, j, k) = a((i + 1) % 8, j, k);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) ma += a.data[i], mb += sh.data[i];
    ma /= a.data.size();
    mb /= a.data.size();
    double c = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        c += (a.data[i] - ma) * (sh.data[i] - mb);
        va += (a.data[i] - ma) * (a.data[i] - ma);
        vb += (sh.data[i] - mb) * (sh.data[i] - mb);
    }
    const double cc = image_cc(a, sh);
    CHECK(std::abs(cc - c / std::sqrt(va * vb)) < 1e-12);
    CHECK(cc > 0.0);
    CHECK(cc < 1.0);

    CHECK_THROWS_AS(image_cc(ScalarVolume(m, 1.0), ScalarVolume(m, 2.0)), Error);
    CHECK(image_cc(a, ScalarVolume(m, 2.0)) == 0.0);
}

TEST_CASE("NJD percent") {
    const GridMeta m = GridMeta::cube(6);
    CHECK(njd_percent(DeformationField(m)) == 0.0);
    CHECK(njd_percent(affine_to_field(AffineTransform(Mat3(Vec3(1.1, 0.9, 1.0).asDiagonal()), Vec3(1, 0, 0)), m)) == 0.0);

    // fold over three x-columns embedded in a larger field
    DeformationField f(m);
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 1; i <= 3; ++i) f.disp[m.index(i, j, k)] = Vec3(-2.0 * i, 0, 0);
    const auto det = jacobian_determinants(f);
    int active = 0, neg = 0;
    for (std::size_t v = 0; v < det.size(); ++v) {
        if (f.disp[v].cwiseAbs().maxCoeff() <= 1e-9) continue;
        ++active;
        neg += det[v] < 0.0;
    }
    REQUIRE(active > 0);
    CHECK(neg > 0);
    CHECK(njd_percent(f) == doctest::Approx(100.0 * neg / active));
}

TEST_CASE("Tenengrad") {
    const GridMeta m = GridMeta::cube(10);
    CHECK(tenengrad(ScalarVolume(m, 4.0)) == 0.0);
    ScalarVolume edge(m);
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 5; i < 10; ++i) edge(i, j, k) = 1.0;
    ScalarVolume smooth(m);
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 0; i < 10; ++i) {
                double s = 0;
                for (int o = -1; o <= 1; ++o) s += edge(std::clamp(i + o, 0, 9), j, k);
                smooth(i, j, k) = s / 3.0;
            }
    CHECK(tenengrad(edge) > tenengrad(smooth));
}

TEST_CASE("composite losses and report") {
    const GridMeta m = GridMeta::cube(10);
    const ScalarVolume fa = testsupport::texture(m);
    ScalarVolume other = testsupport::texture(m, 1.0);
    TensorVolume t(m), t2(m);
    std::mt19937_64 rng(3);
    for (auto& d : t.data) d = sym::from_matrix(testsupport::random_spd(rng, 0.5, 1.5));
    for (auto& d : t2.data) d = sym::from_matrix(testsupport::random_spd(rng, 0.5, 1.5));
    LabelVolume region(m);
    std::fill(region.data.begin(), region.data.end(), 1);
    region.name_missing_labels();

    CHECK(composite_affine_loss(fa, t, region, fa, t, LossWeights::affine_defaults()) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(LossWeights::affine_defaults().lambda_fa == 10.0);
    CHECK(LossWeights::deform_defaults().lambda_fa == 100.0);
    CHECK(LossWeights::deform_defaults().gamma_def == 100.0);

    const double l10 = composite_affine_loss(fa, t, region, other, t2, {10.0, 0.0});
    const double l20 = composite_affine_loss(fa, t, region, other, t2, {20.0, 0.0});
    const double lfa = local_ncc(fa, other, 9);
    CHECK(l20 - l10 == doctest::Approx(10.0 * lfa).epsilon(1e-12));

    const DeformationField zero(m);
    CHECK(composite_deform_loss(fa, t, region, fa, t, zero, LossWeights::deform_defaults()).total ==
          doctest::Approx(0.0).epsilon(1e-9));
    LabelVolume masks(m), masks2(m);
    for (std::size_t i = 0; i < masks.data.size(); ++i) masks.data[i] = (i % 4 == 0), masks2.data[i] = (i % 3 == 0);
    masks.name_missing_labels();
    masks2.name_missing_labels();
    const auto with = composite_deform_loss(fa, t, region, other, t2, zero, {100, 100}, &masks, &masks2);
    const auto without = composite_deform_loss(fa, t, region, other, t2, zero, {100, 100});
    CHECK(with.total - without.total == doctest::Approx(with.l_tract));
    CHECK(with.l_fa == without.l_fa);
    CHECK(with.l_tract == doctest::Approx(1.0 - dice_multiclass(masks, masks2)));
    CHECK_THROWS_AS(LossWeights({-1.0, 0.0}).validate(), Error);

    ObjectiveReport r;
    r.dice = 0.5;
    r.cc = 0.9;
    r.njd_pct = 0.0;
    r.tenengrad = 12.5;
    CHECK(ObjectiveReport::csv_header() == "dice,cc,njd_pct,tenengrad");
    CHECK(r.csv_row().rfind("0.5,0.9,0,12.5", 0) == 0);
    CHECK(r.to_json().find("\"njd_pct\"") != std::string::npos);
    r.cc = 1.5;
    CHECK_THROWS_AS(r.validate(), Error);
}

#include <doctest.h>

#include <cmath>

#include "dtalign/tbss.hpp"

using namespace dtalign;

namespace {

// FA tube along x: Gaussian cross-section peaking at `peak` on (y0, z0).
ScalarVolume tube(int n, double y0, double z0, double peak = 0.8, double width = 2.0) {
    ScalarVolume v(GridMeta::cube(n));
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const double r2 = (j - y0) * (j - y0) + (k - z0) * (k - z0);
                v(i, j, k) = 0.05 + (peak - 0.05) * std::exp(-0.5 * r2 / (width * width));
            }
    return v;
}

}  // namespace

TEST_CASE("mean FA") {
    const ScalarVolume a = tube(12, 6, 6);
    ScalarVolume a2 = a;
    for (auto& x : a2.data) x *= 2.0;
    const ScalarVolume same = mean_fa({a, a, a});
    for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(same.data[i] == doctest::Approx(a.data[i]).epsilon(1e-15));
    const ScalarVolume m1 = mean_fa({a, a2});
    const ScalarVolume m2 = mean_fa({a2, a});
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        CHECK(m1.data[i] == doctest::Approx(1.5 * a.data[i]).epsilon(1e-15));
        CHECK(m1.data[i] == m2.data[i]);
    }
    CHECK_THROWS_AS(mean_fa({a}), Error);
    CHECK_THROWS_AS(mean_fa({a, tube(10, 5, 5)}), Error);
}

TEST_CASE("gaussian smoothing keeps constants and mass centre") {
    ScalarVolume c(GridMeta::cube(9), 0.4);
    for (double x : gaussian_smooth(c, 1.5).data) CHECK(x == doctest::Approx(0.4).epsilon(1e-12));
    ScalarVolume d(GridMeta::cube(15));
    d(7, 7, 7) = 1.0;
    const ScalarVolume s = gaussian_smooth(d, 1.0);
    double total = 0.0;
    Vec3 m = Vec3::Zero();
    for (int k = 0; k < 15; ++k)
        for (int j = 0; j < 15; ++j)
            for (int i = 0; i < 15; ++i) total += s(i, j, k), m += s(i, j, k) * Vec3(i, j, k);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((m / total - Vec3(7, 7, 7)).norm() < 1e-12);
    CHECK(s(7, 7, 7) > s(8, 7, 7));
    CHECK(s(8, 7, 7) == doctest::Approx(s(7, 6, 7)).epsilon(1e-15));
    CHECK_THROWS_AS(gaussian_smooth(d, -1.0), Error);
}

TEST_CASE("skeleton of a straight tube follows the centreline") {
    const int n = 32;
    const ScalarVolume fa = tube(n, 15.0, 16.0);
    const Skeleton sk = skeletonize(fa, 0.2);
    REQUIRE(sk.size() > 0);
    int covered = 0;
    for (int i = 0; i < n; ++i) {
        bool hit = false;
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j) {
                if (!sk.mask(i, j, k)) continue;
                const double dist = std::hypot(j - 15.0, k - 16.0);
                CHECK(dist <= 1.0);
                hit = hit || dist <= 1.0;
                const Vec3& p = sk.perpendicular[fa.meta.index(i, j, k)];
                CHECK(p.norm() == doctest::Approx(1.0));
                CHECK(std::abs(p.x()) < 1e-6);  // perpendicular to the tube
            }
        covered += hit;
    }
    CHECK(covered >= 0.9 * n);

    // nothing above threshold
    ScalarVolume low(GridMeta::cube(12), 0.1);
    CHECK(skeletonize(low, 0.2).size() == 0);
    CHECK_THROWS_AS(skeletonize(fa, 1.5), Error);
}

TEST_CASE("projection") {
    const int n = 28;
    const ScalarVolume mean = tube(n, 14.0, 14.0);
    const Skeleton sk = skeletonize(mean, 0.2);
    REQUIRE(sk.size() > 0);

    SUBCASE("never below the value on the skeleton") {
        const ScalarVolume proj = project(mean, sk, 4);
        for (std::size_t q = 0; q < proj.data.size(); ++q) {
            if (sk.mask.data[q]) CHECK(proj.data[q] >= mean.data[q]);
            else CHECK(proj.data[q] == 0.0);
        }
        ScalarVolume zero(mean.meta);
        for (double x : project(zero, sk, 4).data) CHECK(x == 0.0);
        CHECK_THROWS_AS(project(mean, sk, -1), Error);
        CHECK_THROWS_AS(project(tube(10, 5, 5), sk, 2), Error);
    }

    SUBCASE("perpendicular shift within the radius is recovered") {
        const ScalarVolume subject = tube(n, 15.0, 14.0, 0.7);
        const ScalarVolume proj = project(subject, sk, 4);
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j)
                for (int i = 2; i < n - 2; ++i)
                    if (sk.mask(i, j, k)) CHECK(proj(i, j, k) == doctest::Approx(0.7).epsilon(0.02));
    }

    SUBCASE("parallel shift changes nothing") {
        ScalarVolume subject(mean.meta);
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < n; ++i) subject(i, j, k) = mean(std::max(i - 1, 0), j, k);
        const ScalarVolume a = project(mean, sk, 4);
        const ScalarVolume b = project(subject, sk, 4);
        for (std::size_t q = 0; q < a.data.size(); ++q) CHECK(b.data[q] == doctest::Approx(a.data[q]).epsilon(1e-12));
    }
}

TEST_CASE("group skeleton keeps input order") {
    const int n = 24;
    const std::vector<ScalarVolume> group{tube(n, 12, 12, 0.8), tube(n, 12, 12, 0.6), tube(n, 12, 12, 0.7)};
    const GroupSkeleton g = skeletonize_group(group, 0.2, 3);
    REQUIRE(g.stack.size() == 3);
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const std::size_t q = g.mean.meta.index(i, j, k);
                if (!g.skeleton.mask.data[q]) {
                    for (const auto& s : g.stack) CHECK(s.data[q] == 0.0);
                    continue;
                }
                CHECK(g.stack[0].data[q] > g.stack[2].data[q]);
                CHECK(g.stack[2].data[q] > g.stack[1].data[q]);
            }
    CHECK(g.skeleton.size() > 0);
}

TEST_CASE("mild intensity variation along the tube keeps the skeleton") {
    const int n = 32;
    ScalarVolume fa(GridMeta::cube(n));
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i)
                fa(i, j, k) = (0.6 + 0.05 * std::sin(0.4 * i)) * std::exp(-0.5 * ((j - 15.5) * (j - 15.5) + (k - 16) * (k - 16)) / 4.0);
    const Skeleton sk = skeletonize(fa, 0.2);
    int covered = 0;
    for (int i = 0; i < n; ++i) {
        bool hit = false;
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j)
                if (sk.mask(i, j, k)) {
                    CHECK(std::hypot(j - 15.5, k - 16.0) <= 1.0);
                    hit = true;
                }
        covered += hit;
    }
    CHECK(covered >= 0.9 * n);
}

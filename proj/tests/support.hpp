#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <Eigen/Geometry>

#include "dtalign/volgrid.hpp"

namespace testsupport {

using dtalign::Mat3;
using dtalign::Vec3;

inline Mat3 random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Eigen::Quaterniond q(nd(rng), nd(rng), nd(rng), nd(rng));
    q.normalize();
    return q.toRotationMatrix();
}

inline Mat3 random_spd(std::mt19937_64& rng, double lo = 0.1e-3, double hi = 2e-3) {
    std::uniform_real_distribution<double> u(lo, hi);
    const Mat3 r = random_rotation(rng);
    return r * Vec3(u(rng), u(rng), u(rng)).asDiagonal() * r.transpose();
}

inline Mat3 random_matrix(std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Mat3 a;
    for (int i = 0; i < 9; ++i) a(i / 3, i % 3) = nd(rng);
    return a;
}

/// Relative difference with an absolute floor for gradients near zero.
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f around x[i].
inline double central_diff(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                           std::size_t i, double h) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dtalign_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/// Smooth nonconstant texture on a grid.
inline dtalign::ScalarVolume texture(const dtalign::GridMeta& m, double phase = 0.0) {
    dtalign::ScalarVolume v(m);
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i)
                v(i, j, k) = 0.5 + 0.2 * std::sin(0.9 * i + phase) * std::cos(0.7 * j - 0.3 * k) + 0.1 * std::sin(1.3 * k + 0.5 * i);
    return v;
}

}  // namespace testsupport

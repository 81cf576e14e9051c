#pragma once

// Volumetric data model shared by all modules: grid geometry plus scalar,
// label and symmetric-tensor volumes. Voxel storage is x-fastest.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dtalign/error.hpp"

namespace dtalign {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct GridMeta {
    std::array<int, 3> dims{2, 2, 2};
    Vec3 spacing = Vec3::Ones();
    Vec3 origin = Vec3::Zero();

    static GridMeta cube(int n, double spacing = 1.0);

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
    }
    bool contains(int i, int j, int k) const {
        return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
    }
    Vec3 to_physical(double i, double j, double k) const {
        return origin + spacing.cwiseProduct(Vec3(i, j, k));
    }
    Vec3 to_voxel(const Vec3& p) const { return (p - origin).cwiseQuotient(spacing); }
    /// Physical coordinate of the geometric grid center.
    Vec3 center() const {
        return to_physical(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1));
    }

    /// Throws Validation when dims < 2 or spacing <= 0 on any axis.
    void validate() const;

    bool operator==(const GridMeta& o) const {
        return dims == o.dims && spacing == o.spacing && origin == o.origin;
    }
    bool operator!=(const GridMeta& o) const { return !(*this == o); }
};

/// Grid of the next coarser level: floor-halved dims, doubled spacing, origin at
/// the centre of the first 2x2x2 block.
GridMeta downsampled(const GridMeta& m);

/// Symmetric tensor components in canonical order (Dxx, Dxy, Dyy, Dxz, Dyz, Dzz).
using Sym6 = std::array<double, 6>;

namespace sym {
enum : int { XX = 0, XY = 1, YY = 2, XZ = 3, YZ = 4, ZZ = 5 };
Mat3 to_matrix(const Sym6& d);
Sym6 from_matrix(const Mat3& m);
}  // namespace sym

struct ScalarVolume {
    GridMeta meta;
    std::vector<double> data;

    ScalarVolume() = default;
    explicit ScalarVolume(const GridMeta& m, double fill = 0.0) : meta(m), data(m.voxel_count(), fill) {}

    double& operator()(int i, int j, int k) { return data[meta.index(i, j, k)]; }
    double operator()(int i, int j, int k) const { return data[meta.index(i, j, k)]; }
    void validate() const;
};

struct LabelVolume {
    GridMeta meta;
    std::vector<std::int32_t> data;
    std::map<std::int32_t, std::string> label_names;

    LabelVolume() = default;
    explicit LabelVolume(const GridMeta& m) : meta(m), data(m.voxel_count(), 0) {}

    std::int32_t& operator()(int i, int j, int k) { return data[meta.index(i, j, k)]; }
    std::int32_t operator()(int i, int j, int k) const { return data[meta.index(i, j, k)]; }
    /// Sorted nonzero labels present in the data.
    std::vector<std::int32_t> labels_present() const;
    /// Adds generic names for any nonzero label lacking one.
    void name_missing_labels();
    void validate() const;
};

struct TensorVolume {
    GridMeta meta;
    std::vector<Sym6> data;

    TensorVolume() = default;
    explicit TensorVolume(const GridMeta& m) : meta(m), data(m.voxel_count(), Sym6{}) {}

    Sym6& operator()(int i, int j, int k) { return data[meta.index(i, j, k)]; }
    const Sym6& operator()(int i, int j, int k) const { return data[meta.index(i, j, k)]; }
    void validate() const;
};

/// Trilinear sample at continuous voxel coordinates; neighbours outside the grid read as zero.
double sample_trilinear(const ScalarVolume& v, const Vec3& voxel);
Sym6 sample_trilinear(const TensorVolume& v, const Vec3& voxel);
/// Nearest-neighbour label lookup; outside the grid gives label 0.
std::int32_t sample_nearest(const LabelVolume& v, const Vec3& voxel);

/// Resamples onto target_meta by physical position (trilinear for scalars and
/// tensors, nearest for labels). Identical meta returns an exact copy.
ScalarVolume resample_to(const ScalarVolume& v, const GridMeta& target);
TensorVolume resample_to(const TensorVolume& v, const GridMeta& target);
LabelVolume resample_to(const LabelVolume& v, const GridMeta& target);

/// Center-aligned pad/crop to new dims with zero fill; spacing unchanged and the
/// physical center preserved.
ScalarVolume pad_or_crop(const ScalarVolume& v, const std::array<int, 3>& dims);
TensorVolume pad_or_crop(const TensorVolume& v, const std::array<int, 3>& dims);
LabelVolume pad_or_crop(const LabelVolume& v, const std::array<int, 3>& dims);

}  // namespace dtalign

#pragma once

// Spatial transforms and warping. A DeformationField stores the pull-back map
// phi(x) = x + disp(x) from the output (template) grid into the space of the
// image being warped, so warp(I, phi)(x) = I(phi(x)).

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "dtalign/linalg3.hpp"
#include "dtalign/volgrid.hpp"

namespace dtalign {

class AffineTransform {
  public:
    AffineTransform() = default;
    /// Throws Validation unless det(A) > 0.
    AffineTransform(const Mat3& a, const Vec3& t);

    static AffineTransform identity() { return {}; }
    /// x -> A (x - center) + center + t
    static AffineTransform about_center(const Mat3& a, const Vec3& center, const Vec3& t);

    const Mat3& matrix() const { return a_; }
    const Vec3& translation() const { return t_; }

    Vec3 apply(const Vec3& p) const { return a_ * p + t_; }
    /// (this o other)(x) = this(other(x))
    AffineTransform then_after(const AffineTransform& other) const;
    AffineTransform inverse() const;

    /// 12 whitespace-separated reals: A row-major, then t.
    std::string to_text() const;
    static AffineTransform from_text(const std::string& text);
    static AffineTransform load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

  private:
    Mat3 a_ = Mat3::Identity();
    Vec3 t_ = Vec3::Zero();
};

struct DeformationField {
    GridMeta meta;
    std::vector<Vec3> disp;  // mm

    DeformationField() = default;
    explicit DeformationField(const GridMeta& m) : meta(m), disp(m.voxel_count(), Vec3::Zero()) {}

    Vec3 map(int i, int j, int k) const { return meta.to_physical(i, j, k) + disp[meta.index(i, j, k)]; }
    void validate() const;

    static DeformationField load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

using JacobianField = std::vector<Mat3>;

struct RotationField {
    GridMeta meta;
    std::vector<Mat3> rotation;
    std::size_t degenerate = 0;  // voxels with det(J) <= 1e-8, assigned the identity

    RotationField transposed() const;
};

/// J = d phi / dx with central differences inside and one-sided at faces,
/// spacing-corrected.
JacobianField jacobian_field(const DeformationField& field);
std::vector<double> jacobian_determinants(const DeformationField& field);

RotationField rotation_field(const DeformationField& field);

/// D' = R D R^T per voxel.
TensorVolume reorient_tensors(const TensorVolume& vol, const RotationField& rots);

ScalarVolume warp_scalar(const ScalarVolume& vol, const DeformationField& field);
/// Componentwise trilinear interpolation at phi(x), finite-strain reorientation
/// D' = R^T D R with R = polar(J phi(x)), then projection onto PSD.
TensorVolume warp_tensor(const TensorVolume& vol, const DeformationField& field);
LabelVolume warp_labels(const LabelVolume& vol, const DeformationField& field);

/// phi(x) = affine(deform(x)), one field on the deform grid.
DeformationField compose(const AffineTransform& affine, const DeformationField& deform);
/// phi(x) = outer(inner(x)); outer is sampled trilinearly (clamped at the border).
DeformationField compose(const DeformationField& outer, const DeformationField& inner);
DeformationField affine_to_field(const AffineTransform& affine, const GridMeta& meta);

/// Number of interpolation passes performed by the warp_* functions since start.
std::atomic<long>& interpolation_counter();

}  // namespace dtalign

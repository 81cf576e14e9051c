#pragma once

// Skeleton-based group analysis of aligned FA maps: mean FA, ridge skeleton
// with per-voxel perpendiculars, and max-along-perpendicular projection.

#include <vector>

#include "dtalign/volgrid.hpp"

namespace dtalign {

struct Skeleton {
    LabelVolume mask;                // 1 on the skeleton
    std::vector<Vec3> perpendicular;  // unit (voxel axes) on the skeleton, zero elsewhere
    double fa_threshold = 0.2;

    std::size_t size() const;
};

ScalarVolume mean_fa(const std::vector<ScalarVolume>& group);

ScalarVolume gaussian_smooth(const ScalarVolume& v, double sigma_vox);

/// Ridge voxels of the smoothed mean FA. Where the 3x3x3 centre of gravity
/// of the smoothed FA lies more than 0.05 voxel away, the perpendicular points
/// to it; otherwise it is the Hessian eigenvector with the most negative
/// eigenvalue, and when the two most negative eigenvalues coincide (round
/// tube) the voxel axis closest to their plane, lowest axis first. A voxel is
/// kept when it is a local maximum along the perpendicular and its mean FA
/// exceeds the threshold.
Skeleton skeletonize(const ScalarVolume& mean, double threshold = 0.2, double sigma_vox = 1.0);

/// Max of the subject along +-perpendicular in one-voxel steps up to `radius`;
/// ties go to the position nearest the skeleton.
ScalarVolume project(const ScalarVolume& subject, const Skeleton& skeleton, int radius = 4);

struct GroupSkeleton {
    ScalarVolume mean;
    Skeleton skeleton;
    std::vector<ScalarVolume> stack;  // input order
};

GroupSkeleton skeletonize_group(const std::vector<ScalarVolume>& group, double threshold = 0.2, int radius = 4);

}  // namespace dtalign

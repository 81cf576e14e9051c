#pragma once

// Single-tensor diffusion model: signal prediction, weighted log-linear
// fitting, eigen-decomposition and scalar maps (FA, MD).

#include <optional>
#include <vector>

#include "dtalign/volgrid.hpp"

namespace dtalign {

struct DiffusionGradientScheme {
    std::vector<double> bvals;  // s/mm^2
    std::vector<Vec3> bvecs;    // unit vectors; ignored where b == 0

    /// Unit-norm directions for b > 0, at least one b = 0 entry, and at least
    /// six distinct diffusion-weighted directions.
    void validate() const;
    /// Parses `bval gx gy gz` lines; blank lines and '#' comments are skipped.
    static DiffusionGradientScheme from_text(const std::string& text);
    static DiffusionGradientScheme load(const std::string& path);
};

struct TensorEigen {
    Vec3 values;   // descending
    Mat3 vectors;  // column i pairs with values[i]
};

double predict_signal(const Mat3& d, double s0, double b, const Vec3& g);

struct TensorFit {
    Mat3 d;
    double s0 = 0.0;
};

/// Weighted least squares on ln S = ln S0 - b g^T D g with weights S^2.
TensorFit fit_tensor(const std::vector<double>& signals, const DiffusionGradientScheme& scheme);

TensorEigen eigen_decompose(const Mat3& d);
TensorEigen eigen_decompose(const Sym6& d);

/// Negative eigenvalues are clamped to zero first; the zero tensor has FA 0.
double fractional_anisotropy(const TensorEigen& e);
double fractional_anisotropy(const Sym6& d);
double mean_diffusivity(const TensorEigen& e);

ScalarVolume fa_map(const TensorVolume& vol, const LabelVolume* mask = nullptr);
ScalarVolume md_map(const TensorVolume& vol, const LabelVolume* mask = nullptr);

/// Fits every voxel of a diffusion-weighted series; voxels whose signals are
/// not all positive get the zero tensor.
TensorVolume fit_tensor_volume(const std::vector<ScalarVolume>& dwi, const DiffusionGradientScheme& scheme,
                               ScalarVolume* s0_out = nullptr);

/// Clamps negative eigenvalues to zero (no-op, without decomposition, when all
/// principal minors are already non-negative).
Sym6 project_psd(const Sym6& d);

}  // namespace dtalign

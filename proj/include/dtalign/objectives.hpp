#pragma once

// Similarity losses, regularizers and evaluation metrics.
//
// The low-level overloads take flat channel-major arrays (channel c of voxel n
// at c * N + n) and optionally return gradients with respect to their second
// (moving) argument; the registration engines build on those.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtalign/volgrid.hpp"
#include "dtalign/xform.hpp"

namespace dtalign {

struct LossWeights {
    double lambda_fa = 10.0;
    double gamma_def = 100.0;

    static LossWeights affine_defaults() { return {10.0, 0.0}; }
    static LossWeights deform_defaults() { return {100.0, 100.0}; }
    void validate() const;
};

struct ObjectiveReport {
    double l_fa = 0.0;
    double l_dti = 0.0;
    double l_tract = 0.0;
    double l_def = 0.0;
    double dice = 0.0;
    double cc = 0.0;
    double njd_pct = 0.0;
    double tenengrad = 0.0;

    void validate() const;
    std::string to_json() const;
    /// dice,cc,njd_pct,tenengrad
    std::string csv_row() const;
    static std::string csv_header() { return "dice,cc,njd_pct,tenengrad"; }
};

/// Sum over the cube of half-width r around every voxel, truncated at the grid.
std::vector<double> box_sum(std::span<const double> in, const std::array<int, 3>& dims, int radius);

/// 1 - mean over voxels of the squared windowed correlation; windows whose
/// variance is below 1e-10 in either image count as correlation 0.
double local_ncc(std::span<const double> a, std::span<const double> b, const std::array<int, 3>& dims, int kernel,
                 std::vector<double>* grad_b = nullptr);
double local_ncc(const ScalarVolume& a, const ScalarVolume& b, int kernel);

/// Mean over region voxels of ED + DD, where ED sums squared differences of all
/// nine matrix entries and DD those of the diagonal. Tensors are 6 x N.
double tensor_loss(std::span<const double> atlas, std::span<const double> moved, std::span<const std::uint8_t> region,
                   std::vector<double>* grad_moved = nullptr);
double tensor_loss(const TensorVolume& atlas, const TensorVolume& moved, const LabelVolume& region);

/// Soft multi-class Dice loss 1 - mean_l 2<p,q>/(|p|^2 + |q|^2) over channels
/// nonempty in either input; both are L x N.
double soft_dice_loss(std::span<const double> target, std::span<const double> moved, int channels,
                      std::vector<double>* grad_moved = nullptr);
/// Mean hard Dice over labels nonempty in at least one volume.
double dice_multiclass(const LabelVolume& a, const LabelVolume& b);

/// Average squared forward-difference gradient of the displacement (3 x N, mm),
/// each axis normalised by its number of difference pairs.
double smoothness_loss(std::span<const double> disp, const GridMeta& meta, std::vector<double>* grad = nullptr);
double smoothness_loss(const DeformationField& field);

/// Pearson correlation over region voxels (all voxels when region is null).
double image_cc(const ScalarVolume& a, const ScalarVolume& b, const LabelVolume* region = nullptr);

/// Percentage of active voxels (max |disp_i| > 1e-9) with det(J) < 0.
double njd_percent(const DeformationField& field);

/// Sum of squared 3-D Sobel gradient magnitudes over interior voxels.
double tenengrad(const ScalarVolume& a);

/// Mean squared difference.
double mse(std::span<const double> a, std::span<const double> b);

/// Channel-major 6 x N copy of a tensor volume, optionally rescaled.
std::vector<double> tensor_channels(const TensorVolume& v, double scale = 1.0);
/// One-hot L x N channels for the given labels.
std::vector<double> one_hot(const LabelVolume& v, const std::vector<std::int32_t>& labels);
std::vector<std::uint8_t> region_mask(const LabelVolume& v);

double composite_affine_loss(const ScalarVolume& target_fa, const TensorVolume& target_tensors,
                             const LabelVolume& region, const ScalarVolume& moved_fa,
                             const TensorVolume& moved_tensors, const LossWeights& w);

struct DeformLossTerms {
    double l_fa = 0.0, l_dti = 0.0, l_tract = 0.0, l_def = 0.0, total = 0.0;
};

/// lambda L_FA(5^3) + L_DTI + L_tract + gamma L_def; L_tract is omitted when
/// either mask volume is absent.
DeformLossTerms composite_deform_loss(const ScalarVolume& target_fa, const TensorVolume& target_tensors,
                                      const LabelVolume& region, const ScalarVolume& moved_fa,
                                      const TensorVolume& moved_tensors, const DeformationField& deform,
                                      const LossWeights& w, const LabelVolume* target_masks = nullptr,
                                      const LabelVolume* moved_masks = nullptr);

}  // namespace dtalign

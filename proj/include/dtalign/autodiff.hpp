#pragma once

// Minimal reverse-mode differentiation over channel-major volumes.
//
// A Var holds `channels` planes on a GridMeta (flat vectors use dims {n,1,1}).
// Each op records a closure that scatters the output gradient into its
// inputs; backward() runs them in reverse topological order. Everything is
// double precision so gradients can be audited against finite differences.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dtalign/linalg3.hpp"
#include "dtalign/volgrid.hpp"

namespace dtalign::ad {

struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    int channels = 1;
    GridMeta meta;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::size_t voxels() const { return meta.voxel_count(); }
    double scalar() const { return value.at(0); }
    std::span<double> plane(int c) { return {value.data() + c * voxels(), voxels()}; }
    std::span<const double> plane(int c) const { return {value.data() + c * voxels(), voxels()}; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

using Var = std::shared_ptr<Node>;

GridMeta flat_meta(std::size_t n);

Var constant(std::vector<double> value, int channels, const GridMeta& meta);
Var parameter(std::vector<double> value, int channels, const GridMeta& meta);
Var constant_vector(std::vector<double> value);
Var parameter_vector(std::vector<double> value);

/// Runs reverse accumulation from a scalar root (seed 1).
void backward(const Var& root);
/// Clears gradients of every node reachable from root.
void zero_grad(const Var& root);

// elementwise / structural
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// sum_i w_i * x_i over scalar nodes
Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws);
Var scale_channels(const Var& a, const std::vector<double>& factors);
Var concat(const std::vector<Var>& xs);
Var slice_channels(const Var& a, int first, int count);
Var leaky_relu(const Var& x, double slope);

// convolutional blocks
/// 'same' zero-padded convolution with an odd cubic kernel; w is
/// [cout][cin][k][k][k], b is [cout].
Var conv3d(const Var& x, const Var& w, const Var& b, int kernel);
Var max_pool2(const Var& x);
Var avg_pool2(const Var& x);

// geometry
/// disp = A p + t - p on the grid, params = (A row-major, t).
Var affine_field(const Var& params, const GridMeta& meta);
/// disp = A (p + u(p)) + t - p for a fixed affine.
Var compose_affine(const Var& field, const Mat3& a, const Vec3& t);
/// Samples img (own grid) at phys(x) + disp(x) of field's grid; zero outside.
Var sample(const Var& img, const Var& field);
/// Trilinear upsampling of a displacement onto a finer grid, clamped at the border.
Var upsample_field(const Var& coarse, const GridMeta& fine);
/// Finite-strain reorientation D' = R^T D R with R = polar(J) of the field;
/// voxels with det(J) <= 1e-8 keep R = I.
Var reorient_field(const Var& tensors, const Var& field);
/// Same with the rotation of a global affine (params as in affine_field).
Var reorient_affine(const Var& tensors, const Var& params);

// registration heads
/// Per-channel mass centres (physical mm) weighted by max(f, 0); output is
/// [C][4] flat: centre x, y, z and the total mass (no gradient flows into
/// the mass entry).
Var mass_centers(const Var& feat);
/// Least-squares affine (A, t) with moving ~ A target + t over channels valid
/// in both; det(A) <= 0 is repaired by the polar sign fix. Throws Numerical
/// when fewer than 4 non-coplanar centres remain.
Var lstsq_affine(const Var& moving_centers, const Var& target_centers);
/// c_k(x) = (1/C) sum_c t_c(x) m_c(x + offset_k), zero outside.
Var correlation(const Var& target, const Var& moving, const std::vector<std::array<int, 3>>& offsets);

// losses (scalar outputs)
Var ncc_loss(const Var& target, const Var& moved, int kernel);
Var tensor_loss(const Var& target, const Var& moved, std::span<const std::uint8_t> region);
Var soft_dice_loss(const Var& target, const Var& moved);
Var smoothness_loss(const Var& field);
Var mse_loss(const Var& a, const Var& b);

}  // namespace dtalign::ad

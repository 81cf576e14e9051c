#pragma once

// Shared plumbing of the learned and instance backends.

#include <string>
#include <vector>

#include "dtalign/regnet.hpp"

namespace dtalign::detail {

/// Differentiable views of one registration pair; tensors in 1e-3 mm^2/s.
struct PreparedPair {
    ad::Var moving_fa, moving_t, target_fa, target_t;
    ad::Var moving_masks, target_masks;  // one-hot over `labels`, null without masks
    std::vector<std::uint8_t> region;     // target brain
    std::vector<std::int32_t> labels;
};

ad::Var scalar_var(const ScalarVolume& v);
ad::Var tensor_var(const TensorVolume& v);
PreparedPair prepare(const DtiImage& moving, const DtiImage& target);

ad::Var affine_loss(const ad::Var& params, const PreparedPair& p, double lambda);
/// `composed` maps the target grid into moving space; `residual` carries the
/// smoothness penalty.
ad::Var deform_loss(const ad::Var& residual, const ad::Var& composed, const PreparedPair& p, double lambda,
                    double gamma);

DeformationField to_field(const ad::Var& disp);
ad::Var field_var(const DeformationField& f, bool trainable);
std::vector<double> affine_params(const AffineTransform& a);
void check_finite(double loss, const std::string& stage, int step);

class Adam {
public:
    Adam(std::vector<ad::Var> params, double lr);
    void zero_grad();
    void step();

    static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

private:
    std::vector<ad::Var> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_;
    int t_ = 0;
};

}  // namespace dtalign::detail

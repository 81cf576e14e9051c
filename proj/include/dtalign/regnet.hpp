#pragma once

// Registration engines. Two backends minimise the same composite objectives:
//
//  * learned: separately weighted affine encoders feeding a mass-centre
//    least-squares head (applied recurrently), then Siamese FA/tensor encoders
//    and a coarse-to-fine correlation decoder for the residual deformation;
//  * instance: direct multi-resolution gradient descent on 12 affine
//    parameters and then on a displacement field.
//
// Tensors enter every loss in units of 1e-3 mm^2/s.

#include <array>
#include <cstdint>
#include <functional>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dtalign/autodiff.hpp"
#include "dtalign/objectives.hpp"
#include "dtalign/volgrid.hpp"
#include "dtalign/xform.hpp"

namespace dtalign {

inline constexpr double kTensorLossScale = 1e3;

/// One side of a registration: FA, tensors and optional tract masks.
struct DtiImage {
    ScalarVolume fa;
    TensorVolume tensors;
    std::optional<LabelVolume> masks;

    const GridMeta& meta() const { return fa.meta; }
    void validate() const;
};

/// Voxels with a non-zero tensor trace.
LabelVolume brain_region(const TensorVolume& t);

enum class Provenance { Moving, Target };

struct FeaturePyramid {
    std::vector<ad::Var> levels;  // level j is downsampled by 2^j
    Provenance provenance = Provenance::Moving;

    const ad::Var& deepest() const { return levels.back(); }
};

struct ConvLayer {
    ad::Var weight;  // [cout][cin][k][k][k]
    ad::Var bias;    // [cout]
    int cin = 0, cout = 0, kernel = 3;
};

struct EncoderParams {
    std::vector<ConvLayer> layers;
    double slope = 0.2;     // leaky rectifier
    int pooled_layers = 0;  // affine encoders: leading layers followed by max-pooling

    std::vector<ad::Var> parameters() const;
    std::size_t parameter_count() const;
};

ConvLayer make_conv(int cin, int cout, int kernel, std::mt19937_64& rng, bool zero_init = false);

struct AffineNetConfig {
    int in_channels = 7;                        // FA + 6 tensor channels
    std::vector<int> stage_channels{8, 16, 16, 32};  // one conv each
    int pools = 3;                              // max-pool after the first `pools` stage convs
    int extra_convs = 4;                        // at the deepest level, no pooling
    int extra_kernel = 1;                       // pointwise, so deepest features stay local
    double slope = 0.2;
};

struct DeformNetConfig {
    std::vector<int> fa_channels{4, 8, 8, 8};      // per scale, k = size()
    std::vector<int> tensor_channels{8, 8, 8, 8};
    int mlp_hidden = 16;
    std::vector<int> windows{3, 5, 7};
    double slope = 0.2;

    int scales() const { return static_cast<int>(fa_channels.size()); }
};

/// Correlation offsets for one window size: the 27 taps {-h, 0, h}^3 with
/// h = window / 2, so every window spans its full extent.
std::vector<std::array<int, 3>> window_offsets(int window);

struct AffineNet {
    AffineNetConfig config;
    EncoderParams moving_encoder;
    EncoderParams target_encoder;

    static AffineNet create(const AffineNetConfig& cfg, std::uint64_t seed);
    std::vector<ad::Var> parameters() const;
};

struct DeformNet {
    DeformNetConfig config;
    EncoderParams fa_encoder;
    EncoderParams tensor_encoder;
    std::vector<EncoderParams> decoder;  // per scale: hidden layer + zero-initialised output layer

    static DeformNet create(const DeformNetConfig& cfg, std::uint64_t seed);
    std::vector<ad::Var> parameters() const;
};

struct LearnedModel {
    AffineNet affine;
    DeformNet deform;

    void save(const std::filesystem::path& path) const;
    static LearnedModel load(const std::filesystem::path& path);
};

/// 7-channel network input (FA, tensors x 1e3) on the image grid.
ad::Var network_input(const ScalarVolume& fa, const TensorVolume& tensors);

FeaturePyramid run_affine_encoder(const EncoderParams& enc, const ad::Var& input, Provenance tag);
std::pair<FeaturePyramid, FeaturePyramid> encode_affine(const AffineNet& net, const DtiImage& moving,
                                                        const DtiImage& target);
/// Mass centres of both deepest levels fitted by least squares; returns the
/// pull-back affine (target space -> moving space) as 12 parameters.
ad::Var affine_head(const FeaturePyramid& moving, const FeaturePyramid& target);
AffineTransform to_affine(const ad::Var& params);

struct RecurrentAffineResult {
    AffineTransform affine;
    std::vector<double> trace;  // FA MSE + tensor MSE after each step
    int selected_step = 0;      // 1-based
};

struct RecurrentOptions {
    int max_iters = 5;
    int patience = 2;  // stop after this many consecutive MSE increases
};

RecurrentAffineResult recurrent_affine(const AffineNet& net, const DtiImage& moving, const DtiImage& target,
                                       const RecurrentOptions& opt = {});

struct DeformPyramids {
    FeaturePyramid fa_moving, fa_target, tensor_moving, tensor_target;

    /// Per-scale concatenation of FA and tensor features.
    FeaturePyramid moving() const;
    FeaturePyramid target() const;
};

/// Shared-weight FA and tensor encoders applied to both images.
DeformPyramids encode_deform(const DeformNet& net, const ad::Var& moving_fa, const ad::Var& moving_tensor,
                             const ad::Var& target_fa, const ad::Var& target_tensor);
FeaturePyramid run_deform_encoder(const EncoderParams& enc, const ad::Var& input, int scales, Provenance tag);
/// Coarse-to-fine decoder; returns the finest-scale displacement (3 channels, mm).
ad::Var deform_decoder(const DeformNet& net, const FeaturePyramid& moving, const FeaturePyramid& target);

/// Composite affine objective for a pull-back parameter vector.
ad::Var affine_objective(const ad::Var& params, const DtiImage& moving, const DtiImage& target, double lambda);

struct TrainingPair {
    DtiImage moving;
    DtiImage target;
};

struct TrainConfig {
    int affine_steps = 200;
    int deform_steps = 100;
    double learning_rate = 1e-4;
    double lambda_affine = 10.0;
    double lambda_deform = 100.0;
    double gamma = 100.0;
    std::uint64_t seed = 0;
    AffineNetConfig affine_net;
    DeformNetConfig deform_net;
    /// Called after every step with (stage, step, loss).
    std::function<void(const std::string&, int, double)> on_step;
};

struct TrainResult {
    LearnedModel model;
    std::vector<double> affine_losses;
    std::vector<double> deform_losses;
};

/// Adam with batch size 1 over the pairs in order; throws Numerical with the
/// step index on a non-finite loss.
TrainResult train(const std::vector<TrainingPair>& pairs, const TrainConfig& cfg);
/// Continues training an existing model.
TrainResult train(LearnedModel model, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg);

struct RegistrationResult {
    AffineTransform affine;
    DeformationField deform;
    DeformationField composed;
    ObjectiveReport report;
    std::vector<double> inference_trace;
    // composite deformable objective (hard Dice) of three states
    double identity_loss = 0.0;  // unregistered
    double affine_loss = 0.0;    // affine alone
    double deform_loss = 0.0;    // returned composition
};

struct InstanceConfig {
    int levels = 3;
    std::vector<int> affine_iters{200, 100, 50};  // coarsest first
    std::vector<int> deform_iters{200, 100, 50};
    double lambda_affine = 10.0;
    double lambda_deform = 100.0;
    double gamma = 100.0;
    bool deformable = true;
    double initial_step = 0.5;  // affine: mm of landmark motion per trial step, x spacing
    double deform_lr = 0.05;    // displacement: Adam step, x spacing
};

/// Pull-back affine minimising the composite affine objective.
AffineTransform optimize_affine(const DtiImage& moving, const DtiImage& target, const InstanceConfig& cfg,
                                double* final_loss = nullptr);
/// Residual displacement (on the target grid) after a fixed affine.
DeformationField optimize_deformable(const DtiImage& moving, const DtiImage& target, const AffineTransform& affine,
                                     const InstanceConfig& cfg, double* final_loss = nullptr);

RegistrationResult register_instance(const DtiImage& moving, const DtiImage& target, const InstanceConfig& cfg);

struct LearnedConfig {
    RecurrentOptions recurrent;
    double lambda_deform = 100.0;
    double gamma = 100.0;
    bool deformable = true;
};

RegistrationResult register_learned(const LearnedModel& model, const DtiImage& moving, const DtiImage& target,
                                    const LearnedConfig& cfg = {});

/// Warps the original moving image once through a composed field and fills
/// the evaluation metrics.
struct WarpedImage {
    ScalarVolume fa;
    TensorVolume tensors;
    std::optional<LabelVolume> masks;
};
WarpedImage apply_field(const DtiImage& moving, const DeformationField& composed);
ObjectiveReport evaluate(const DtiImage& target, const WarpedImage& warped, const DeformationField& deform,
                         double lambda, double gamma);

/// Composite deformable objective of a (composed) field on the target grid.
double deform_objective_value(const DtiImage& moving, const DtiImage& target, const DeformationField& composed,
                              const DeformationField& residual, double lambda, double gamma);

}  // namespace dtalign

#pragma once

// Synthetic DTI phantoms, random affine sampling in the training ranges,
// smooth random deformations, and moving/template pairs with exact ground
// truth.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dtalign/regnet.hpp"
#include "dtalign/volgrid.hpp"
#include "dtalign/xform.hpp"

namespace dtalign {

struct AffineSampleSpec {
    double scale_min = 0.9, scale_max = 1.1;
    double rotation_deg = 20.0;     // |theta| bound about a single random axis
    double translation_vox = 4.0;   // per-axis bound, voxels
    std::uint64_t seed = 0;

    /// All ranges collapsed to the identity.
    static AffineSampleSpec degenerate();
    void validate() const;
};

struct AffineSample {
    double scale = 1.0;
    int axis = 2;
    double angle_deg = 0.0;
    Vec3 translation_vox = Vec3::Zero();
    AffineTransform transform;  // x -> s R (x - c) + c + t, c = grid centre
};

Mat3 axis_rotation(int axis, double radians);
AffineSample sample_affine_params(const AffineSampleSpec& spec, const GridMeta& grid, std::mt19937_64& rng);
AffineTransform sample_affine(const AffineSampleSpec& spec, const GridMeta& grid, std::mt19937_64& rng);

enum class PhantomKind { Blob, CrossingTubes, Layered };

struct PhantomModel;
PhantomKind parse_phantom_kind(const std::string& s);
std::string to_string(PhantomKind k);

struct Phantom {
    PhantomKind kind = PhantomKind::Blob;
    ScalarVolume fa;
    TensorVolume tensors;
    LabelVolume masks;
    std::vector<Vec3> landmarks;  // physical mm
    std::shared_ptr<const PhantomModel> model;  // continuous definition the volumes sample

    DtiImage image() const { return {fa, tensors, masks}; }
    /// Tensor and label at any physical point.
    void sample(const Vec3& p, Mat3& tensor, int& label) const;
};

/// Ellipsoidal brain (isotropic interior with mildly varying MD) around
/// anisotropic structures with eigenvalues (0.9, 0.2, 0.2) 1e-3 mm^2/s along
/// their tangent. Landmarks are the corners of a box inside the brain.
Phantom make_phantom(PhantomKind kind, const std::array<int, 3>& dims, std::uint64_t seed, double spacing = 1.0);

/// Band-limited sum of three sinusoids, |grad u| <= amplitude * 2 pi / wavelength.
DeformationField smooth_random_field(const GridMeta& meta, double amplitude, double wavelength, std::uint64_t seed);

struct SyntheticPair {
    DtiImage moving;
    DtiImage target;
    AffineTransform affine;      // ground-truth pull-back S: moving(y) = template(S(y + u(y)))
    DeformationField field;      // ground-truth u (zero when absent)
    DeformationField composed;   // y -> S(y + u(y))
    std::vector<Vec3> landmarks;  // template space
};

/// Moving image sampled from the phantom model at the composed map (when the
/// phantom has one), tensors reoriented by R^T D R with R from the map's
/// Jacobian.
SyntheticPair make_pair(const Phantom& phantom, const AffineTransform& affine, const DeformationField* field = nullptr);

/// Mean over template landmarks p of |truth(est(p)) - p| in voxels, where
/// truth is the ground-truth pull-back and est the recovered pull-back.
double landmark_error_vox(const SyntheticPair& pair, const AffineTransform& estimate);
double landmark_error_vox(const SyntheticPair& pair, const DeformationField& estimate);

void write_sidecar(const std::filesystem::path& path, const SyntheticPair& pair, PhantomKind kind, std::uint64_t seed,
                   const AffineSample* sample = nullptr);

}  // namespace dtalign

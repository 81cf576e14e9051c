#pragma once

// Single-file NIfTI-1 reader/writer restricted to what this toolkit needs:
// scalar, label, symmetric-tensor and vector volumes plus 4-D series.
//
// Multi-channel volumes written here store channels fastest (all components of
// a voxel are contiguous). A JSON comment extension carries the exact double
// spacing/origin, the tensor component order, the channel layout and label
// names; files without it are read from the plain header fields.

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "dtalign/volgrid.hpp"

namespace dtalign {

enum class VolumeKind { Scalar, Label, Tensor, Vector, Series };

/// Decoded file contents before interpretation as a typed volume.
struct RawVolume {
    GridMeta meta;
    VolumeKind kind = VolumeKind::Scalar;
    int channels = 1;  // components per voxel (tensors: 6, vectors: 3, series: frames)
    /// Voxel-major, channel-fastest after normalization.
    std::vector<double> data;
    std::map<std::int32_t, std::string> label_names;
};

RawVolume read_raw(const std::filesystem::path& path);
void write_raw(const RawVolume& raw, const std::filesystem::path& path);

using AnyVolume = std::variant<ScalarVolume, TensorVolume, LabelVolume>;

/// Reads a scalar, tensor or label file. Tensor components come back in the
/// canonical (Dxx, Dxy, Dyy, Dxz, Dyz, Dzz) order whatever the file declares.
AnyVolume read_volume(const std::filesystem::path& path);
ScalarVolume read_scalar(const std::filesystem::path& path);
TensorVolume read_tensor(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);
/// 4-D series (e.g. diffusion-weighted acquisitions), one volume per frame.
std::vector<ScalarVolume> read_series(const std::filesystem::path& path);

void write_volume(const ScalarVolume& v, const std::filesystem::path& path);
void write_volume(const TensorVolume& v, const std::filesystem::path& path);
void write_volume(const LabelVolume& v, const std::filesystem::path& path);
void write_series(const std::vector<ScalarVolume>& frames, const std::filesystem::path& path);

/// Permutation from a declared component order such as "xx,xy,xz,yy,yz,zz"
/// to canonical indices: canonical[q] = file[perm[q]].
std::array<int, 6> tensor_order_permutation(const std::string& order);

}  // namespace dtalign

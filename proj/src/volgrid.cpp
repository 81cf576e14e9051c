#include "dtalign/volgrid.hpp"

#include <cmath>
#include <set>

namespace dtalign {

GridMeta GridMeta::cube(int n, double spacing) {
    GridMeta m;
    m.dims = {n, n, n};
    m.spacing = Vec3::Constant(spacing);
    m.origin = Vec3::Zero();
    return m;
}

void GridMeta::validate() const {
    for (int a = 0; a < 3; ++a) {
        require(dims[a] >= 2, "grid dimension " + std::to_string(a) + " must be >= 2, got " + std::to_string(dims[a]));
        require(spacing[a] > 0.0 && std::isfinite(spacing[a]), "grid spacing must be positive and finite");
        require(std::isfinite(origin[a]), "grid origin must be finite");
    }
}

GridMeta downsampled(const GridMeta& m) {
    GridMeta c;
    for (int a = 0; a < 3; ++a) c.dims[a] = m.dims[a] / 2;
    c.spacing = 2.0 * m.spacing;
    c.origin = m.origin + 0.5 * m.spacing;
    return c;
}

namespace sym {

Mat3 to_matrix(const Sym6& d) {
    Mat3 m;
    m << d[XX], d[XY], d[XZ],
         d[XY], d[YY], d[YZ],
         d[XZ], d[YZ], d[ZZ];
    return m;
}

Sym6 from_matrix(const Mat3& m) {
    return {m(0, 0), 0.5 * (m(0, 1) + m(1, 0)), m(1, 1),
            0.5 * (m(0, 2) + m(2, 0)), 0.5 * (m(1, 2) + m(2, 1)), m(2, 2)};
}

}  // namespace sym

void ScalarVolume::validate() const {
    meta.validate();
    require(data.size() == meta.voxel_count(), "scalar volume data length does not match dims");
}

void TensorVolume::validate() const {
    meta.validate();
    require(data.size() == meta.voxel_count(), "tensor volume data length does not match dims");
}

std::vector<std::int32_t> LabelVolume::labels_present() const {
    std::set<std::int32_t> s;
    for (auto l : data)
        if (l != 0) s.insert(l);
    return {s.begin(), s.end()};
}

void LabelVolume::name_missing_labels() {
    for (auto l : labels_present())
        if (!label_names.count(l)) label_names[l] = "label_" + std::to_string(l);
}

void LabelVolume::validate() const {
    meta.validate();
    require(data.size() == meta.voxel_count(), "label volume data length does not match dims");
    for (auto l : data) {
        require(l >= 0, "labels must be non-negative");
        if (l != 0) require(label_names.count(l) > 0, "label " + std::to_string(l) + " has no name");
    }
}

namespace {

struct Corner {
    std::size_t idx[8];
    double w[8];
    int n = 0;
};

// Collects the in-grid corners of the trilinear stencil at a voxel coordinate.
inline Corner stencil(const GridMeta& m, const Vec3& p) {
    Corner c;
    const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
    const double tx = p.x() - fx, ty = p.y() - fy, tz = p.z() - fz;
    for (int dz = 0; dz < 2; ++dz) {
        const int z = z0 + dz;
        if (z < 0 || z >= m.dims[2]) continue;
        const double wz = dz ? tz : 1.0 - tz;
        for (int dy = 0; dy < 2; ++dy) {
            const int y = y0 + dy;
            if (y < 0 || y >= m.dims[1]) continue;
            const double wy = dy ? ty : 1.0 - ty;
            for (int dx = 0; dx < 2; ++dx) {
                const int x = x0 + dx;
                if (x < 0 || x >= m.dims[0]) continue;
                const double w = (dx ? tx : 1.0 - tx) * wy * wz;
                if (w == 0.0) continue;
                c.idx[c.n] = m.index(x, y, z);
                c.w[c.n] = w;
                ++c.n;
            }
        }
    }
    return c;
}

}  // namespace

double sample_trilinear(const ScalarVolume& v, const Vec3& voxel) {
    const Corner c = stencil(v.meta, voxel);
    double s = 0.0;
    for (int n = 0; n < c.n; ++n) s += c.w[n] * v.data[c.idx[n]];
    return s;
}

Sym6 sample_trilinear(const TensorVolume& v, const Vec3& voxel) {
    const Corner c = stencil(v.meta, voxel);
    Sym6 s{};
    for (int n = 0; n < c.n; ++n)
        for (int q = 0; q < 6; ++q) s[q] += c.w[n] * v.data[c.idx[n]][q];
    return s;
}

std::int32_t sample_nearest(const LabelVolume& v, const Vec3& voxel) {
    const int i = static_cast<int>(std::lround(voxel.x()));
    const int j = static_cast<int>(std::lround(voxel.y()));
    const int k = static_cast<int>(std::lround(voxel.z()));
    return v.meta.contains(i, j, k) ? v(i, j, k) : 0;
}

namespace {

template <class Vol, class Sampler>
Vol resample_impl(const Vol& v, const GridMeta& target, Sampler sampler) {
    target.validate();
    if (v.meta == target) return v;
    Vol out(target);
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j)
            for (int i = 0; i < target.dims[0]; ++i)
                out(i, j, k) = sampler(v, v.meta.to_voxel(target.to_physical(i, j, k)));
    return out;
}

template <class Vol>
Vol pad_crop_impl(const Vol& v, const std::array<int, 3>& dims) {
    GridMeta m = v.meta;
    std::array<int, 3> off{};
    for (int a = 0; a < 3; ++a) {
        off[a] = (dims[a] - v.meta.dims[a]) / 2;
        m.dims[a] = dims[a];
        m.origin[a] = v.meta.origin[a] - off[a] * v.meta.spacing[a];
    }
    m.validate();
    Vol out(m);
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
                const int si = i - off[0], sj = j - off[1], sk = k - off[2];
                if (v.meta.contains(si, sj, sk)) out(i, j, k) = v(si, sj, sk);
            }
    return out;
}

}  // namespace

ScalarVolume resample_to(const ScalarVolume& v, const GridMeta& target) {
    return resample_impl(v, target, [](const ScalarVolume& s, const Vec3& p) { return sample_trilinear(s, p); });
}

TensorVolume resample_to(const TensorVolume& v, const GridMeta& target) {
    return resample_impl(v, target, [](const TensorVolume& s, const Vec3& p) { return sample_trilinear(s, p); });
}

LabelVolume resample_to(const LabelVolume& v, const GridMeta& target) {
    LabelVolume out = resample_impl(v, target, [](const LabelVolume& s, const Vec3& p) { return sample_nearest(s, p); });
    out.label_names = v.label_names;
    return out;
}

ScalarVolume pad_or_crop(const ScalarVolume& v, const std::array<int, 3>& dims) { return pad_crop_impl(v, dims); }
TensorVolume pad_or_crop(const TensorVolume& v, const std::array<int, 3>& dims) { return pad_crop_impl(v, dims); }
LabelVolume pad_or_crop(const LabelVolume& v, const std::array<int, 3>& dims) {
    LabelVolume out = pad_crop_impl(v, dims);
    out.label_names = v.label_names;
    return out;
}

}  // namespace dtalign

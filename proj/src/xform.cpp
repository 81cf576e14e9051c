#include "dtalign/xform.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dtalign/dtensor.hpp"
#include "dtalign/nifti_io.hpp"

namespace dtalign {

std::atomic<long>& interpolation_counter() {
    static std::atomic<long> counter{0};
    return counter;
}

AffineTransform::AffineTransform(const Mat3& a, const Vec3& t) : a_(a), t_(t) {
    require(a.allFinite() && t.allFinite(), "affine transform must be finite");
    require(a.determinant() > 0.0, "affine transform must preserve orientation (det(A) > 0)");
}

AffineTransform AffineTransform::about_center(const Mat3& a, const Vec3& center, const Vec3& t) {
    return {a, center - a * center + t};
}

AffineTransform AffineTransform::then_after(const AffineTransform& other) const {
    return {a_ * other.a_, a_ * other.t_ + t_};
}

AffineTransform AffineTransform::inverse() const {
    const Mat3 inv = a_.inverse();
    return {inv, -inv * t_};
}

std::string AffineTransform::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    for (int r = 0; r < 3; ++r) os << a_(r, 0) << ' ' << a_(r, 1) << ' ' << a_(r, 2) << '\n';
    os << t_[0] << ' ' << t_[1] << ' ' << t_[2] << '\n';
    return os.str();
}

AffineTransform AffineTransform::from_text(const std::string& text) {
    std::istringstream in(text);
    double v[12];
    for (double& x : v)
        if (!(in >> x)) fail(ErrorKind::Format, "affine text must contain 12 reals");
    std::string extra;
    if (in >> extra) fail(ErrorKind::Format, "affine text has trailing content");
    Mat3 a;
    a << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
    return {a, Vec3(v[9], v[10], v[11])};
}

AffineTransform AffineTransform::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IO, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

void AffineTransform::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::IO, "cannot write " + path.string());
    out << to_text();
}

void DeformationField::validate() const {
    meta.validate();
    require(disp.size() == meta.voxel_count(), "field length does not match dims");
    for (const auto& d : disp) require(d.allFinite(), "displacement field must be finite");
}

DeformationField DeformationField::load(const std::filesystem::path& path) {
    RawVolume raw = read_raw(path);
    if (raw.channels != 3) fail(ErrorKind::Format, path.string() + ": deformation field must have 3 components");
    DeformationField f(raw.meta);
    for (std::size_t n = 0; n < f.disp.size(); ++n) f.disp[n] = Vec3(raw.data[3 * n], raw.data[3 * n + 1], raw.data[3 * n + 2]);
    f.validate();
    return f;
}

void DeformationField::save(const std::filesystem::path& path) const {
    validate();
    RawVolume raw{meta, VolumeKind::Vector, 3, {}, {}};
    raw.data.reserve(3 * disp.size());
    for (const auto& d : disp) raw.data.insert(raw.data.end(), {d[0], d[1], d[2]});
    write_raw(raw, path);
}

RotationField RotationField::transposed() const {
    RotationField t = *this;
    for (auto& r : t.rotation) r.transposeInPlace();
    return t;
}

JacobianField jacobian_field(const DeformationField& field) {
    const GridMeta& m = field.meta;
    m.validate();
    JacobianField jac(m.voxel_count());
    const auto nz = static_cast<std::ptrdiff_t>(m.dims[2]);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t k = 0; k < nz; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i) {
                const int c[3] = {i, j, static_cast<int>(k)};
                Mat3 jm = Mat3::Identity();
                for (int a = 0; a < 3; ++a) {
                    int lo[3] = {c[0], c[1], c[2]}, hi[3] = {c[0], c[1], c[2]};
                    if (c[a] > 0) --lo[a];
                    if (c[a] < m.dims[a] - 1) ++hi[a];
                    const double h = (hi[a] - lo[a]) * m.spacing[a];
                    const Vec3 d = (field.disp[m.index(hi[0], hi[1], hi[2])] - field.disp[m.index(lo[0], lo[1], lo[2])]) / h;
                    jm.col(a) += d;
                }
                jac[m.index(i, j, static_cast<int>(k))] = jm;
            }
    return jac;
}

std::vector<double> jacobian_determinants(const DeformationField& field) {
    const JacobianField jac = jacobian_field(field);
    std::vector<double> det(jac.size());
    for (std::size_t n = 0; n < jac.size(); ++n) det[n] = jac[n].determinant();
    return det;
}

RotationField rotation_field(const DeformationField& field) {
    const JacobianField jac = jacobian_field(field);
    RotationField rf{field.meta, std::vector<Mat3>(jac.size(), Mat3::Identity()), 0};
    std::size_t degenerate = 0;
    const auto n = static_cast<std::ptrdiff_t>(jac.size());
#pragma omp parallel for schedule(static) reduction(+ : degenerate)
    for (std::ptrdiff_t v = 0; v < n; ++v) {
        if (jac[v].determinant() <= 1e-8) {
            ++degenerate;
            continue;
        }
        rf.rotation[v] = polar_rotation(jac[v]);
    }
    rf.degenerate = degenerate;
    return rf;
}

TensorVolume reorient_tensors(const TensorVolume& vol, const RotationField& rots) {
    require(vol.meta == rots.meta, "rotation field grid does not match tensor grid");
    TensorVolume out(vol.meta);
    for (std::size_t n = 0; n < vol.data.size(); ++n) {
        const Mat3& r = rots.rotation[n];
        out.data[n] = sym::from_matrix(r * sym::to_matrix(vol.data[n]) * r.transpose());
    }
    return out;
}

ScalarVolume warp_scalar(const ScalarVolume& vol, const DeformationField& field) {
    ++interpolation_counter();
    const GridMeta& m = field.meta;
    ScalarVolume out(m);
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i)
                out(i, j, k) = sample_trilinear(vol, vol.meta.to_voxel(field.map(i, j, k)));
    return out;
}

TensorVolume warp_tensor(const TensorVolume& vol, const DeformationField& field) {
    ++interpolation_counter();
    const GridMeta& m = field.meta;
    TensorVolume interp(m);
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i)
                interp(i, j, k) = sample_trilinear(vol, vol.meta.to_voxel(field.map(i, j, k)));
    TensorVolume out = reorient_tensors(interp, rotation_field(field).transposed());
    for (auto& d : out.data) d = project_psd(d);
    return out;
}

LabelVolume warp_labels(const LabelVolume& vol, const DeformationField& field) {
    ++interpolation_counter();
    const GridMeta& m = field.meta;
    LabelVolume out(m);
    out.label_names = vol.label_names;
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i)
                out(i, j, k) = sample_nearest(vol, vol.meta.to_voxel(field.map(i, j, k)));
    return out;
}

DeformationField compose(const AffineTransform& affine, const DeformationField& deform) {
    DeformationField out(deform.meta);
    const GridMeta& m = deform.meta;
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i) {
                const std::size_t n = m.index(i, j, k);
                out.disp[n] = affine.apply(deform.map(i, j, k)) - m.to_physical(i, j, k);
            }
    return out;
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
    DeformationField out(inner.meta);
    const GridMeta& m = inner.meta;
    const GridMeta& om = outer.meta;
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i) {
                const Vec3 p = inner.map(i, j, k);
                Vec3 v = om.to_voxel(p);
                for (int a = 0; a < 3; ++a) v[a] = std::clamp(v[a], 0.0, om.dims[a] - 1.0);
                const int x0 = std::min(static_cast<int>(v[0]), om.dims[0] - 2);
                const int y0 = std::min(static_cast<int>(v[1]), om.dims[1] - 2);
                const int z0 = std::min(static_cast<int>(v[2]), om.dims[2] - 2);
                const double tx = v[0] - x0, ty = v[1] - y0, tz = v[2] - z0;
                Vec3 d = Vec3::Zero();
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
                            d += w * outer.disp[om.index(x0 + dx, y0 + dy, z0 + dz)];
                        }
                out.disp[m.index(i, j, k)] = p + d - m.to_physical(i, j, k);
            }
    return out;
}

DeformationField affine_to_field(const AffineTransform& affine, const GridMeta& meta) {
    return compose(affine, DeformationField(meta));
}

}  // namespace dtalign

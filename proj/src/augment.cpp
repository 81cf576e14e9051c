#include "dtalign/augment.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Geometry>

#include <json.hpp>

#include "dtalign/dtensor.hpp"
#include "dtalign/error.hpp"

namespace dtalign {

AffineSampleSpec AffineSampleSpec::degenerate() {
    AffineSampleSpec s;
    s.scale_min = s.scale_max = 1.0;
    s.rotation_deg = 0.0;
    s.translation_vox = 0.0;
    return s;
}

void AffineSampleSpec::validate() const {
    require(scale_min > 0.0 && scale_min <= scale_max, "AffineSampleSpec: need 0 < scale_min <= scale_max");
    require(rotation_deg >= 0.0 && rotation_deg < 180.0, "AffineSampleSpec: rotation bound must be in [0, 180)");
    require(translation_vox >= 0.0, "AffineSampleSpec: translation bound must be >= 0");
}

Mat3 axis_rotation(int axis, double radians) {
    require(axis >= 0 && axis < 3, "axis_rotation: axis must be 0, 1 or 2");
    return Eigen::AngleAxisd(radians, Vec3::Unit(axis)).toRotationMatrix();
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

AffineSample sample_affine_params(const AffineSampleSpec& spec, const GridMeta& grid, std::mt19937_64& rng) {
    spec.validate();
    AffineSample s;
    s.scale = uniform(rng, spec.scale_min, spec.scale_max);
    s.axis = static_cast<int>(std::uniform_int_distribution<int>(0, 2)(rng));
    s.angle_deg = uniform(rng, -spec.rotation_deg, spec.rotation_deg);
    for (int a = 0; a < 3; ++a) s.translation_vox[a] = uniform(rng, -spec.translation_vox, spec.translation_vox);
    const Mat3 a = s.scale * axis_rotation(s.axis, s.angle_deg * std::numbers::pi / 180.0);
    s.transform = AffineTransform::about_center(a, grid.center(), s.translation_vox.cwiseProduct(grid.spacing));
    return s;
}

AffineTransform sample_affine(const AffineSampleSpec& spec, const GridMeta& grid, std::mt19937_64& rng) {
    return sample_affine_params(spec, grid, rng).transform;
}

PhantomKind parse_phantom_kind(const std::string& s) {
    if (s == "blob") return PhantomKind::Blob;
    if (s == "crossing-tubes") return PhantomKind::CrossingTubes;
    if (s == "layered") return PhantomKind::Layered;
    fail(ErrorKind::Validation, "unknown phantom kind '" + s + "' (blob | crossing-tubes | layered)");
}

std::string to_string(PhantomKind k) {
    switch (k) {
        case PhantomKind::Blob: return "blob";
        case PhantomKind::CrossingTubes: return "crossing-tubes";
        case PhantomKind::Layered: return "layered";
    }
    return "blob";
}

namespace {

constexpr double kTubeMajor = 0.9e-3, kTubeMinor = 0.2e-3, kMd = 1e-3;

Mat3 stick_along(const Vec3& dir, double major, double minor) {
    const Vec3 e = dir.normalized();
    return minor * Mat3::Identity() + (major - minor) * e * e.transpose();
}

// 0 inside, 1 outside, linear ramp one voxel wide around level 1 of r.
double soft_outside(double r, double width) { return std::clamp(0.5 + (r - 1.0) / width, 0.0, 1.0); }

struct Structure {
    double weight = 0.0;  // membership in [0, 1]
    Vec3 tangent = Vec3::UnitX();
};

}  // namespace

struct PhantomModel {
    PhantomKind kind = PhantomKind::Blob;
    Vec3 c, ext, semi;
    double h = 1.0;  // boundary ramp width in mm
    double tube_r = 1.0;
    std::size_t structures = 1;
    std::array<Vec3, 3> kvec;
    std::array<double, 3> phase{};

    void eval(const Vec3& p, Mat3& tensor, int& label) const {
        tensor = Mat3::Zero();
        label = 0;
        const Vec3 d = p - c;
        const double rb = d.cwiseQuotient(semi).norm();
        const double brain = 1.0 - soft_outside(rb, h / semi.minCoeff());
        if (brain <= 0.0) return;

        double tex = 0.0;
        for (int q = 0; q < 3; ++q) tex += std::sin(kvec[q].dot(d) + phase[q]) / 3.0;
        Mat3 t = kMd * (1.0 + 0.2 * tex) * Mat3::Identity();

        // radially anisotropic rim just inside the brain boundary
        const double rim = std::clamp(1.0 - std::abs(rb - 0.88) / 0.12, 0.0, 1.0);
        if (rim > 0.0) {
            const Vec3 radial = d.cwiseQuotient(semi.cwiseProduct(semi));
            if (radial.norm() > 0.0) t = (1.0 - rim) * t + rim * stick_along(radial, 1.4e-3, 0.8e-3);
        }

        std::array<Structure, 3> s;
        switch (kind) {
            case PhantomKind::Blob: {
                const Vec3 core_semi = 0.45 * semi;
                const double r = d.cwiseQuotient(core_semi).norm();
                s[0].weight = 1.0 - soft_outside(r, h / core_semi.minCoeff());
                // circumferential about z
                const Vec3 tan(-d.y(), d.x(), 0.0);
                s[0].tangent = tan.norm() > 1e-9 ? tan : Vec3::UnitX();
                break;
            }
            case PhantomKind::CrossingTubes: {
                // tube 1 along x, slightly below centre; tube 2 along (0,1,1)/sqrt2 through centre
                const Vec3 o1 = Vec3(0.0, -0.08 * ext.y(), 0.0);
                const Vec3 q1 = d - o1;
                const double r1 = std::hypot(q1.y(), q1.z()) / tube_r;
                s[0].weight = 1.0 - soft_outside(r1, h / tube_r);
                s[0].tangent = Vec3::UnitX();
                const Vec3 a2 = Vec3(0.0, 1.0, 1.0).normalized();
                const Vec3 q2 = d - a2 * a2.dot(d);
                const double r2 = q2.norm() / tube_r;
                s[1].weight = 1.0 - soft_outside(r2, h / tube_r);
                s[1].tangent = a2;
                break;
            }
            case PhantomKind::Layered: {
                // three slabs stacked along z with orientations x, y, (1,1,0)
                const std::array<Vec3, 3> dirs{Vec3::UnitX(), Vec3::UnitY(), Vec3(1.0, 1.0, 0.0)};
                const double thick = 0.16 * ext.z();
                for (int l = 0; l < 3; ++l) {
                    const double zc = (l - 1) * 1.4 * thick;
                    const double r = std::abs(d.z() - zc) / (0.5 * thick);
                    s[l].weight = 1.0 - soft_outside(r, h / (0.5 * thick));
                    s[l].tangent = dirs[l];
                }
                break;
            }
        }
        // blended highest label first so the lowest wins overlaps
        for (std::size_t l = structures; l-- > 0;)
            if (s[l].weight > 0.0)
                t = (1.0 - s[l].weight) * t + s[l].weight * stick_along(s[l].tangent, kTubeMajor, kTubeMinor);
        for (std::size_t l = 0; l < structures; ++l)
            if (s[l].weight * brain >= 0.5) {
                label = static_cast<int>(l) + 1;
                break;
            }
        // fade to isotropic across the boundary ramp so FA is continuous there too
        tensor = brain * (brain * t + (1.0 - brain) * kMd * Mat3::Identity());
    }
};

Phantom make_phantom(PhantomKind kind, const std::array<int, 3>& dims, std::uint64_t seed, double spacing) {
    for (int d : dims) require(d >= 16, "make_phantom: dims must be >= 16 per axis");
    require(spacing > 0.0, "make_phantom: spacing must be > 0");
    const GridMeta m{dims, Vec3::Constant(spacing), Vec3::Zero()};
    auto model = std::make_shared<PhantomModel>();
    PhantomModel& pm = *model;
    pm.kind = kind;
    pm.c = m.center();
    pm.ext = Vec3(dims[0] * spacing, dims[1] * spacing, dims[2] * spacing);
    pm.semi = Vec3(0.38, 0.32, 0.28).cwiseProduct(pm.ext);
    pm.h = spacing;
    pm.tube_r = 0.09 * pm.ext.minCoeff();

    std::mt19937_64 rng(seed);
    // MD texture: three low-frequency modes with seeded phases
    for (int q = 0; q < 3; ++q) {
        Vec3 dir(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
        if (dir.norm() < 1e-3) dir = Vec3::UnitX();
        pm.kvec[q] = dir.normalized() * (2.0 * std::numbers::pi / (0.5 * pm.ext.minCoeff()));
        pm.phase[q] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }

    Phantom ph;
    ph.kind = kind;
    ph.model = model;
    ph.tensors = TensorVolume(m);
    ph.masks = LabelVolume(m);
    std::vector<std::string> names;
    switch (kind) {
        case PhantomKind::Blob: names = {"core"}; break;
        case PhantomKind::CrossingTubes: names = {"tube_x", "tube_diag"}; break;
        case PhantomKind::Layered: names = {"layer_1", "layer_2", "layer_3"}; break;
    }
    pm.structures = names.size();
    for (std::size_t i = 0; i < names.size(); ++i) ph.masks.label_names[static_cast<int>(i) + 1] = names[i];

    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
                Mat3 t;
                int label;
                pm.eval(m.to_physical(i, j, k), t, label);
                ph.tensors(i, j, k) = sym::from_matrix(t);
                ph.masks(i, j, k) = label;
            }
    ph.fa = fa_map(ph.tensors);

    const Vec3 half = pm.semi * (0.8 / std::sqrt(3.0));
    for (int s = 0; s < 8; ++s)
        ph.landmarks.push_back(pm.c + Vec3((s & 1) ? half.x() : -half.x(), (s & 2) ? half.y() : -half.y(),
                                           (s & 4) ? half.z() : -half.z()));
    return ph;
}

void Phantom::sample(const Vec3& p, Mat3& tensor, int& label) const {
    require(model != nullptr, "phantom has no analytic model");
    model->eval(p, tensor, label);
}

DeformationField smooth_random_field(const GridMeta& meta, double amplitude, double wavelength, std::uint64_t seed) {
    meta.validate();
    require(amplitude >= 0.0 && wavelength > 0.0, "smooth_random_field: need amplitude >= 0, wavelength > 0");
    require(amplitude < wavelength / (2.0 * std::numbers::pi),
            "smooth_random_field: amplitude must be below wavelength / (2 pi)");
    DeformationField f(meta);
    if (amplitude == 0.0) return f;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    struct Mode {
        Vec3 e, k;
        double phase;
    };
    std::array<Mode, 3> modes;
    for (auto& md : modes) {
        Vec3 e(nd(rng), nd(rng), nd(rng)), k(nd(rng), nd(rng), nd(rng));
        md.e = e.normalized();
        md.k = k.normalized() * (2.0 * std::numbers::pi / wavelength);
        md.phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
    }
    for (int k = 0; k < meta.dims[2]; ++k)
        for (int j = 0; j < meta.dims[1]; ++j)
            for (int i = 0; i < meta.dims[0]; ++i) {
                const Vec3 p = meta.to_physical(i, j, k) - meta.center();
                Vec3 u = Vec3::Zero();
                for (const auto& md : modes) u += md.e * (amplitude / 3.0) * std::sin(md.k.dot(p) + md.phase);
                f.disp[meta.index(i, j, k)] = u;
            }
    return f;
}

SyntheticPair make_pair(const Phantom& phantom, const AffineTransform& affine, const DeformationField* field) {
    const GridMeta& m = phantom.fa.meta;
    SyntheticPair p;
    p.target = phantom.image();
    p.affine = affine;
    p.field = field ? *field : DeformationField(m);
    require(p.field.meta == m, "make_pair: field grid must match the phantom");
    p.composed = compose(affine, p.field);
    if (phantom.model) {
        // evaluated at the mapped points, so the pair carries no resampling blur
        const RotationField rots = rotation_field(p.composed);
        TensorVolume t(m);
        LabelVolume lab(m);
        for (int k = 0; k < m.dims[2]; ++k)
            for (int j = 0; j < m.dims[1]; ++j)
                for (int i = 0; i < m.dims[0]; ++i) {
                    Mat3 d;
                    int l;
                    phantom.sample(p.composed.map(i, j, k), d, l);
                    const Mat3& r = rots.rotation[m.index(i, j, k)];
                    t(i, j, k) = sym::from_matrix(r.transpose() * d * r);
                    lab(i, j, k) = l;
                }
        p.moving.tensors = std::move(t);
        p.moving.fa = fa_map(p.moving.tensors);
        p.moving.masks = std::move(lab);
    } else {
        p.moving.fa = warp_scalar(phantom.fa, p.composed);
        p.moving.tensors = warp_tensor(phantom.tensors, p.composed);
        p.moving.masks = warp_labels(phantom.masks, p.composed);
    }
    p.moving.masks->label_names = phantom.masks.label_names;
    p.landmarks = phantom.landmarks;
    return p;
}

namespace {

Vec3 sample_map(const DeformationField& f, const Vec3& x) {
    // clamped trilinear displacement at a physical point
    const Vec3 v = f.meta.to_voxel(x);
    int i0[3];
    double w[3];
    for (int a = 0; a < 3; ++a) {
        const double c = std::clamp(v[a], 0.0, static_cast<double>(f.meta.dims[a] - 1));
        i0[a] = std::min(static_cast<int>(std::floor(c)), f.meta.dims[a] - 2);
        w[a] = c - i0[a];
    }
    Vec3 d = Vec3::Zero();
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double ww = (dx ? w[0] : 1 - w[0]) * (dy ? w[1] : 1 - w[1]) * (dz ? w[2] : 1 - w[2]);
                d += ww * f.disp[f.meta.index(i0[0] + dx, i0[1] + dy, i0[2] + dz)];
            }
    return x + d;
}

template <class Est>
double landmark_error(const SyntheticPair& pair, Est est) {
    require(!pair.landmarks.empty(), "landmark_error: pair has no landmarks");
    const double sp = pair.target.meta().spacing.mean();
    double s = 0.0;
    for (const Vec3& p : pair.landmarks) s += (sample_map(pair.composed, est(p)) - p).norm() / sp;
    return s / static_cast<double>(pair.landmarks.size());
}

}  // namespace

double landmark_error_vox(const SyntheticPair& pair, const AffineTransform& estimate) {
    return landmark_error(pair, [&](const Vec3& p) { return estimate.apply(p); });
}

double landmark_error_vox(const SyntheticPair& pair, const DeformationField& estimate) {
    return landmark_error(pair, [&](const Vec3& p) { return sample_map(estimate, p); });
}

void write_sidecar(const std::filesystem::path& path, const SyntheticPair& pair, PhantomKind kind, std::uint64_t seed,
                   const AffineSample* sample) {
    nlohmann::ordered_json j;
    j["phantom"] = to_string(kind);
    j["seed"] = seed;
    std::vector<double> a;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) a.push_back(pair.affine.matrix()(r, c));
    j["ground_truth"] = {{"convention", "moving(y) = template(A (y + u(y)) + t)"},
                         {"A", a},
                         {"t", {pair.affine.translation()[0], pair.affine.translation()[1], pair.affine.translation()[2]}}};
    if (sample)
        j["sample"] = {{"scale", sample->scale},
                       {"axis", sample->axis},
                       {"angle_deg", sample->angle_deg},
                       {"translation_vox",
                        {sample->translation_vox[0], sample->translation_vox[1], sample->translation_vox[2]}}};
    nlohmann::json lm = nlohmann::json::array();
    for (const auto& p : pair.landmarks) lm.push_back({p[0], p[1], p[2]});
    j["landmarks_mm"] = lm;
    std::ofstream out(path);
    if (!out) fail(ErrorKind::IO, "cannot write sidecar " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace dtalign

#include <algorithm>
#include <cmath>
#include <limits>

#include "dtalign/error.hpp"
#include "dtalign/regnet.hpp"
#include "regnet_internal.hpp"

namespace dtalign {

using ad::Var;
using namespace detail;

namespace {

PreparedPair pooled(const PreparedPair& p) {
    PreparedPair q;
    q.moving_fa = ad::avg_pool2(p.moving_fa);
    q.moving_t = ad::avg_pool2(p.moving_t);
    q.target_fa = ad::avg_pool2(p.target_fa);
    q.target_t = ad::avg_pool2(p.target_t);
    if (p.moving_masks) {
        q.moving_masks = ad::avg_pool2(p.moving_masks);
        q.target_masks = ad::avg_pool2(p.target_masks);
    }
    q.labels = p.labels;
    // a coarse voxel is brain when any of its children is
    const GridMeta& m = q.target_fa->meta;
    const GridMeta& f = p.target_fa->meta;
    q.region.assign(m.voxel_count(), 0);
    for (int k = 0; k < 2 * m.dims[2]; ++k)
        for (int j = 0; j < 2 * m.dims[1]; ++j)
            for (int i = 0; i < 2 * m.dims[0]; ++i)
                if (p.region[f.index(i, j, k)]) q.region[m.index(i / 2, j / 2, k / 2)] = 1;
    // keep the graph of pooled constants from pinning the fine level
    for (Var* v : {&q.moving_fa, &q.moving_t, &q.target_fa, &q.target_t, &q.moving_masks, &q.target_masks})
        if (*v) *v = ad::constant((*v)->value, (*v)->channels, (*v)->meta);
    return q;
}

/// Finest level first.
std::vector<PreparedPair> pyramid(const DtiImage& moving, const DtiImage& target, int levels) {
    require(levels >= 1, "instance backend: levels must be >= 1");
    std::vector<PreparedPair> out{prepare(moving, target)};
    for (int l = 1; l < levels; ++l) {
        const GridMeta& m = out.back().target_fa->meta;
        const GridMeta& mm = out.back().moving_fa->meta;
        for (int a = 0; a < 3; ++a)
            require(m.dims[a] >= 4 && mm.dims[a] >= 4, "instance backend: grid too small for the level count");
        out.push_back(pooled(out.back()));
    }
    return out;
}

int iters_at(const std::vector<int>& iters, int level, int levels) {
    // iters is coarsest first
    const int idx = levels - 1 - level;
    require(idx >= 0 && idx < static_cast<int>(iters.size()), "instance backend: iteration list shorter than levels");
    return iters[idx];
}

double region_extent(const GridMeta& m) {
    return 0.25 * (m.dims[0] * m.spacing[0] + m.dims[1] * m.spacing[1] + m.dims[2] * m.spacing[2]) / 3.0;
}

/// Affine variables q = ((A - I) L, t') with phi(x) = A (x - c) + c + t'.
struct AffineParam {
    Vec3 c;
    double len;

    std::vector<double> params(const std::vector<double>& q) const {
        Mat3 a;
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) a(r, k) = (r == k ? 1.0 : 0.0) + q[3 * r + k] / len;
        const Vec3 t = c + Vec3(q[9], q[10], q[11]) - a * c;
        std::vector<double> p(12);
        for (int r = 0; r < 3; ++r) {
            for (int k = 0; k < 3; ++k) p[3 * r + k] = a(r, k);
            p[9 + r] = t[r];
        }
        return p;
    }

    std::vector<double> grad(const std::vector<double>& gp) const {
        std::vector<double> g(12);
        for (int r = 0; r < 3; ++r) {
            for (int k = 0; k < 3; ++k) g[3 * r + k] = (gp[3 * r + k] - gp[9 + r] * c[k]) / len;
            g[9 + r] = gp[9 + r];
        }
        return g;
    }
};

double norm2(const std::vector<double>& g) {
    double s = 0.0;
    for (double x : g) s += x * x;
    return std::sqrt(s);
}

/// Normalised descent: each trial moves by `step` along -g/|g|; a rise reverts
/// and halves the step, a success grows it by 1.2.
template <class Eval>
std::vector<double> descend(std::vector<double> x, double step, int iters, Eval eval, double* loss) {
    std::vector<double> g;
    double l = eval(x, g);
    const double min_step = step * 1e-4;
    for (int it = 0; it < iters && step > min_step; ++it) {
        const double gn = norm2(g);
        if (!(gn > 0.0)) break;
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - step * g[i] / gn;
        std::vector<double> gy;
        const double ly = eval(y, gy);
        if (ly < l) {
            x = std::move(y);
            g = std::move(gy);
            l = ly;
            step *= 1.2;
        } else {
            step *= 0.5;
        }
    }
    if (loss) *loss = l;
    return x;
}

/// Per-coordinate Adam on a dense vector; returns the best iterate seen.
template <class Eval>
std::vector<double> adam_descend(std::vector<double> x, double lr, int iters, Eval eval, double* loss) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-12;
    std::vector<double> m(x.size(), 0.0), v(x.size(), 0.0), g;
    std::vector<double> best = x;
    double best_l = std::numeric_limits<double>::infinity();
    for (int it = 1; it <= iters + 1; ++it) {
        const double l = eval(x, g);
        if (!std::isfinite(l)) break;
        if (l < best_l) {
            best_l = l;
            best = x;
        }
        if (it > iters) break;
        const double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
    if (loss) *loss = best_l;
    return best;
}

}  // namespace

AffineTransform optimize_affine(const DtiImage& moving, const DtiImage& target, const InstanceConfig& cfg,
                                double* final_loss) {
    require(cfg.lambda_affine >= 0.0, "instance backend: lambda must be >= 0");
    const auto levels = pyramid(moving, target, cfg.levels);
    const GridMeta& fine = target.meta();
    const AffineParam ap{fine.center(), region_extent(fine)};
    std::vector<double> q(12, 0.0);
    double loss = 0.0;
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const PreparedPair& pp = levels[l];
        auto eval = [&](const std::vector<double>& x, std::vector<double>& g) {
            const Var p = ad::parameter_vector(ap.params(x));
            const Var lv = affine_loss(p, pp, cfg.lambda_affine);
            ad::backward(lv);
            g = ap.grad(p->grad);
            return lv->scalar();
        };
        const double step = cfg.initial_step * pp.target_fa->meta.spacing.maxCoeff();
        q = descend(q, step, iters_at(cfg.affine_iters, l, cfg.levels), eval, &loss);
        check_finite(loss, "affine", l);
    }
    if (final_loss) *final_loss = loss;
    const auto p = ap.params(q);
    Mat3 a;
    for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) a(r, k) = p[3 * r + k];
    if (!(a.determinant() > 0.0)) fail(ErrorKind::Numerical, "instance affine stage reached an orientation flip");
    return AffineTransform(a, Vec3(p[9], p[10], p[11]));
}

DeformationField optimize_deformable(const DtiImage& moving, const DtiImage& target, const AffineTransform& affine,
                                     const InstanceConfig& cfg, double* final_loss) {
    require(cfg.lambda_deform >= 0.0 && cfg.gamma >= 0.0, "instance backend: weights must be >= 0");
    const auto levels = pyramid(moving, target, cfg.levels);
    std::vector<double> u;
    double loss = 0.0;
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const PreparedPair& pp = levels[l];
        const GridMeta& m = pp.target_fa->meta;
        if (u.empty()) {
            u.assign(3 * m.voxel_count(), 0.0);
        } else {
            const Var coarse = ad::constant(u, 3, levels[l + 1].target_fa->meta);
            u = ad::upsample_field(coarse, m)->value;
        }
        auto eval = [&](const std::vector<double>& x, std::vector<double>& g) {
            const Var uv = ad::parameter(x, 3, m);
            const Var composed = ad::compose_affine(uv, affine.matrix(), affine.translation());
            const Var lv = deform_loss(uv, composed, pp, cfg.lambda_deform, cfg.gamma);
            ad::backward(lv);
            g = uv->grad;
            return lv->scalar();
        };
        const double lr = cfg.deform_lr * m.spacing.maxCoeff();
        u = adam_descend(u, lr, iters_at(cfg.deform_iters, l, cfg.levels), eval, &loss);
        check_finite(loss, "deformable", l);
    }
    if (final_loss) *final_loss = loss;
    return to_field(ad::constant(u, 3, target.meta()));
}

RegistrationResult register_instance(const DtiImage& moving, const DtiImage& target, const InstanceConfig& cfg) {
    moving.validate();
    target.validate();
    RegistrationResult res;
    res.affine = optimize_affine(moving, target, cfg);
    const GridMeta& g = target.meta();
    const DeformationField zero(g);
    const DeformationField affine_only = affine_to_field(res.affine, g);
    res.identity_loss = deform_objective_value(moving, target, affine_to_field(AffineTransform::identity(), g), zero,
                                               cfg.lambda_deform, cfg.gamma);
    res.affine_loss = deform_objective_value(moving, target, affine_only, zero, cfg.lambda_deform, cfg.gamma);
    res.deform = zero;
    res.composed = affine_only;
    res.deform_loss = res.affine_loss;
    if (cfg.deformable) {
        const DeformationField u = optimize_deformable(moving, target, res.affine, cfg);
        const DeformationField composed = compose(res.affine, u);
        const double l = deform_objective_value(moving, target, composed, u, cfg.lambda_deform, cfg.gamma);
        // the zero residual is always available
        if (l <= res.affine_loss) {
            res.deform = u;
            res.composed = composed;
            res.deform_loss = l;
        }
    }
    res.report = evaluate(target, apply_field(moving, res.composed), res.deform, cfg.lambda_deform, cfg.gamma);
    return res;
}

}  // namespace dtalign

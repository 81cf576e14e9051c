#include "dtalign/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <Eigen/Dense>

#include "dtalign/objectives.hpp"

namespace dtalign::ad {

GridMeta flat_meta(std::size_t n) {
    GridMeta m;
    m.dims = {static_cast<int>(n), 1, 1};
    return m;
}

namespace {

Var make_node(std::vector<double> value, int channels, const GridMeta& meta, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->channels = channels;
    n->meta = meta;
    n->requires_grad = requires_grad;
    require(n->value.size() == static_cast<std::size_t>(channels) * meta.voxel_count(), "node value size mismatch");
    return n;
}

// Output node wired to its inputs; the backward closure is attached only when
// some input needs a gradient.
Var make_op(std::vector<double> value, int channels, const GridMeta& meta, std::vector<Var> inputs,
            std::function<void(Node&)> back) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in->requires_grad;
    Var out = make_node(std::move(value), channels, meta, rg);
    if (rg) {
        out->inputs = std::move(inputs);
        out->backward = std::move(back);
    }
    return out;
}

bool same_grid(const GridMeta& a, const GridMeta& b) { return a == b; }

void topo(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
    if (!n->requires_grad || !seen.insert(n).second) return;
    for (auto& in : n->inputs) topo(in.get(), seen, order);
    order.push_back(n);
}

}  // namespace

Var constant(std::vector<double> value, int channels, const GridMeta& meta) {
    return make_node(std::move(value), channels, meta, false);
}
Var parameter(std::vector<double> value, int channels, const GridMeta& meta) {
    return make_node(std::move(value), channels, meta, true);
}
Var constant_vector(std::vector<double> value) {
    const auto n = value.size();
    return make_node(std::move(value), 1, flat_meta(n), false);
}
Var parameter_vector(std::vector<double> value) {
    const auto n = value.size();
    return make_node(std::move(value), 1, flat_meta(n), true);
}

void backward(const Var& root) {
    require(root->value.size() == 1, "backward needs a scalar root");
    std::unordered_set<Node*> seen;
    std::vector<Node*> order;
    topo(root.get(), seen, order);
    for (Node* n : order) n->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

void zero_grad(const Var& root) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> order;
    topo(root.get(), seen, order);
    for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
}

Var add(const Var& a, const Var& b) {
    require(a->value.size() == b->value.size(), "add: size mismatch");
    std::vector<double> v(a->value.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
    return make_op(std::move(v), a->channels, a->meta, {a, b}, [](Node& o) {
        for (auto& in : o.inputs)
            if (in->requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) in->grad[i] += o.grad[i];
    });
}

Var scale(const Var& a, double s) {
    std::vector<double> v(a->value);
    for (auto& x : v) x *= s;
    return make_op(std::move(v), a->channels, a->meta, {a}, [s](Node& o) {
        auto& in = o.inputs[0];
        for (std::size_t i = 0; i < o.grad.size(); ++i) in->grad[i] += s * o.grad[i];
    });
}

Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws) {
    require(xs.size() == ws.size(), "weighted_sum: count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += ws[i] * xs[i]->scalar();
    return make_op({s}, 1, flat_meta(1), xs, [ws](Node& o) {
        for (std::size_t i = 0; i < o.inputs.size(); ++i)
            if (o.inputs[i]->requires_grad) o.inputs[i]->grad[0] += ws[i] * o.grad[0];
    });
}

Var scale_channels(const Var& a, const std::vector<double>& f) {
    require(static_cast<int>(f.size()) == a->channels, "scale_channels: factor count mismatch");
    const std::size_t n = a->voxels();
    std::vector<double> v(a->value);
    for (int c = 0; c < a->channels; ++c)
        for (std::size_t i = 0; i < n; ++i) v[c * n + i] *= f[c];
    return make_op(std::move(v), a->channels, a->meta, {a}, [f, n](Node& o) {
        auto& in = o.inputs[0];
        for (int c = 0; c < o.channels; ++c)
            for (std::size_t i = 0; i < n; ++i) in->grad[c * n + i] += f[c] * o.grad[c * n + i];
    });
}

Var concat(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat: no inputs");
    int ch = 0;
    for (const auto& x : xs) {
        require(same_grid(x->meta, xs[0]->meta), "concat: grid mismatch");
        ch += x->channels;
    }
    std::vector<double> v;
    v.reserve(ch * xs[0]->voxels());
    for (const auto& x : xs) v.insert(v.end(), x->value.begin(), x->value.end());
    return make_op(std::move(v), ch, xs[0]->meta, xs, [](Node& o) {
        std::size_t off = 0;
        for (auto& in : o.inputs) {
            if (in->requires_grad)
                for (std::size_t i = 0; i < in->value.size(); ++i) in->grad[i] += o.grad[off + i];
            off += in->value.size();
        }
    });
}

Var slice_channels(const Var& a, int first, int count) {
    require(first >= 0 && count > 0 && first + count <= a->channels, "slice_channels: range out of bounds");
    const std::size_t n = a->voxels();
    std::vector<double> v(a->value.begin() + first * n, a->value.begin() + (first + count) * n);
    return make_op(std::move(v), count, a->meta, {a}, [first, n](Node& o) {
        auto& in = o.inputs[0];
        for (std::size_t i = 0; i < o.grad.size(); ++i) in->grad[first * n + i] += o.grad[i];
    });
}

Var leaky_relu(const Var& x, double slope) {
    std::vector<double> v(x->value);
    for (auto& e : v)
        if (e < 0.0) e *= slope;
    return make_op(std::move(v), x->channels, x->meta, {x}, [slope](Node& o) {
        auto& in = o.inputs[0];
        for (std::size_t i = 0; i < o.grad.size(); ++i) in->grad[i] += (in->value[i] < 0.0 ? slope : 1.0) * o.grad[i];
    });
}

Var conv3d(const Var& x, const Var& w, const Var& b, int k) {
    require(k >= 1 && k % 2 == 1, "conv3d: kernel must be odd");
    const int cin = x->channels;
    const int k3 = k * k * k;
    require(w->value.size() % (static_cast<std::size_t>(cin) * k3) == 0, "conv3d: weight shape mismatch");
    const int cout = static_cast<int>(w->value.size() / (static_cast<std::size_t>(cin) * k3));
    require(b->value.size() == static_cast<std::size_t>(cout), "conv3d: bias shape mismatch");
    const auto& d = x->meta.dims;
    const std::size_t n = x->voxels();
    const int r = k / 2;
    const int nx = d[0], ny = d[1], nz = d[2];

    // Visits every (output row, input row, x-range) pair for one kernel tap.
    auto for_tap = [=](int dz, int dy, int dx, auto&& fn) {
        const int x0 = std::max(0, -dx), x1 = std::min(nx, nx - dx);
        if (x0 >= x1) return;
        for (int z = std::max(0, -dz); z < std::min(nz, nz - dz); ++z)
            for (int y = std::max(0, -dy); y < std::min(ny, ny - dy); ++y) {
                const std::size_t orow = (static_cast<std::size_t>(z) * ny + y) * nx;
                const std::size_t irow = (static_cast<std::size_t>(z + dz) * ny + (y + dy)) * nx + dx;
                fn(orow, irow, x0, x1);
            }
    };

    std::vector<double> out(static_cast<std::size_t>(cout) * n);
    const double* in = x->value.data();
    const double* wv = w->value.data();
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        double* o = out.data() + co * n;
        std::fill(o, o + n, b->value[co]);
        for (int ci = 0; ci < cin; ++ci) {
            const double* ip = in + ci * n;
            for (int t = 0; t < k3; ++t) {
                const double wt = wv[(static_cast<std::size_t>(co) * cin + ci) * k3 + t];
                if (wt == 0.0) continue;
                const int dz = t / (k * k) - r, dy = (t / k) % k - r, dx = t % k - r;
                for_tap(dz, dy, dx, [&](std::size_t orow, std::size_t irow, int a, int e) {
                    for (int xx = a; xx < e; ++xx) o[orow + xx] += wt * ip[irow + xx];
                });
            }
        }
    }

    return make_op(std::move(out), cout, x->meta, {x, w, b}, [=](Node& o) {
        auto& X = o.inputs[0];
        auto& W = o.inputs[1];
        auto& B = o.inputs[2];
        const double* g = o.grad.data();
        if (B->requires_grad)
            for (int co = 0; co < cout; ++co) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += g[co * n + i];
                B->grad[co] += s;
            }
        if (W->requires_grad) {
#pragma omp parallel for schedule(static)
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci) {
                    const double* ip = X->value.data() + ci * n;
                    const double* gp = g + co * n;
                    for (int t = 0; t < k3; ++t) {
                        const int dz = t / (k * k) - r, dy = (t / k) % k - r, dx = t % k - r;
                        double s = 0.0;
                        for_tap(dz, dy, dx, [&](std::size_t orow, std::size_t irow, int a, int e) {
                            for (int xx = a; xx < e; ++xx) s += gp[orow + xx] * ip[irow + xx];
                        });
                        W->grad[(static_cast<std::size_t>(co) * cin + ci) * k3 + t] += s;
                    }
                }
        }
        if (X->requires_grad) {
#pragma omp parallel for schedule(static)
            for (int ci = 0; ci < cin; ++ci) {
                double* gi = X->grad.data() + ci * n;
                for (int co = 0; co < cout; ++co) {
                    const double* gp = g + co * n;
                    for (int t = 0; t < k3; ++t) {
                        const double wt = W->value[(static_cast<std::size_t>(co) * cin + ci) * k3 + t];
                        if (wt == 0.0) continue;
                        const int dz = t / (k * k) - r, dy = (t / k) % k - r, dx = t % k - r;
                        for_tap(dz, dy, dx, [&](std::size_t orow, std::size_t irow, int a, int e) {
                            for (int xx = a; xx < e; ++xx) gi[irow + xx] += wt * gp[orow + xx];
                        });
                    }
                }
            }
        }
    });
}

namespace {

template <bool Max>
Var pool2(const Var& x) {
    const GridMeta cm = downsampled(x->meta);
    for (int a = 0; a < 3; ++a) require(cm.dims[a] >= 1, "pool: grid too small");
    const std::size_t nf = x->voxels(), nc = cm.voxel_count();
    const int C = x->channels;
    std::vector<double> out(C * nc);
    std::vector<std::size_t> arg(Max ? C * nc : 0);
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < cm.dims[2]; ++k)
            for (int j = 0; j < cm.dims[1]; ++j)
                for (int i = 0; i < cm.dims[0]; ++i) {
                    const std::size_t o = c * nc + cm.index(i, j, k);
                    double acc = Max ? -std::numeric_limits<double>::infinity() : 0.0;
                    std::size_t best = 0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::size_t s = c * nf + x->meta.index(2 * i + dx, 2 * j + dy, 2 * k + dz);
                                if constexpr (Max) {
                                    if (x->value[s] > acc) {
                                        acc = x->value[s];
                                        best = s;
                                    }
                                } else {
                                    acc += 0.125 * x->value[s];
                                }
                            }
                    out[o] = acc;
                    if constexpr (Max) arg[o] = best;
                }
    const GridMeta fm = x->meta;
    return make_op(std::move(out), C, cm, {x}, [arg = std::move(arg), cm, fm, nf, nc](Node& o) {
        auto& in = o.inputs[0];
        if constexpr (Max) {
            for (std::size_t q = 0; q < o.grad.size(); ++q) in->grad[arg[q]] += o.grad[q];
        } else {
            for (int c = 0; c < o.channels; ++c)
                for (int k = 0; k < cm.dims[2]; ++k)
                    for (int j = 0; j < cm.dims[1]; ++j)
                        for (int i = 0; i < cm.dims[0]; ++i) {
                            const double g = 0.125 * o.grad[c * nc + cm.index(i, j, k)];
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        in->grad[c * nf + fm.index(2 * i + dx, 2 * j + dy, 2 * k + dz)] += g;
                        }
        }
    });
}

struct Stencil {
    std::size_t idx[8];
    double w[8];
    double dw[8][3];  // d w / d (voxel coordinate)
    int n = 0;
};

inline Stencil zero_pad_stencil(const GridMeta& m, const Vec3& p) {
    Stencil s;
    const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
    const double t[3] = {p.x() - fx, p.y() - fy, p.z() - fz};
    for (int dz = 0; dz < 2; ++dz) {
        const int z = z0 + dz;
        if (z < 0 || z >= m.dims[2]) continue;
        for (int dy = 0; dy < 2; ++dy) {
            const int y = y0 + dy;
            if (y < 0 || y >= m.dims[1]) continue;
            for (int dx = 0; dx < 2; ++dx) {
                const int x = x0 + dx;
                if (x < 0 || x >= m.dims[0]) continue;
                const double wx = dx ? t[0] : 1 - t[0], wy = dy ? t[1] : 1 - t[1], wz = dz ? t[2] : 1 - t[2];
                const double sx = dx ? 1 : -1, sy = dy ? 1 : -1, sz = dz ? 1 : -1;
                s.idx[s.n] = m.index(x, y, z);
                s.w[s.n] = wx * wy * wz;
                s.dw[s.n][0] = sx * wy * wz;
                s.dw[s.n][1] = wx * sy * wz;
                s.dw[s.n][2] = wx * wy * sz;
                ++s.n;
            }
        }
    }
    return s;
}

inline Stencil clamped_stencil(const GridMeta& m, Vec3 p) {
    Stencil s;
    int base[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        if (m.dims[a] == 1) {
            base[a] = 0;
            t[a] = 0.0;
            continue;
        }
        p[a] = std::clamp(p[a], 0.0, m.dims[a] - 1.0);
        base[a] = std::min(static_cast<int>(p[a]), m.dims[a] - 2);
        t[a] = p[a] - base[a];
    }
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dz ? t[2] : 1 - t[2]);
                if (w == 0.0) continue;
                s.idx[s.n] = m.index(base[0] + dx, base[1] + dy, base[2] + dz);
                s.w[s.n] = w;
                ++s.n;
            }
    return s;
}

Mat3 params_matrix(const std::vector<double>& p) {
    Mat3 a;
    a << p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8];
    return a;
}

// Jacobian of phi = x + u at voxel (i,j,k) from a 3 x N displacement.
struct FdTap {
    std::size_t lo[3], hi[3];
    double inv_h[3];
};

inline FdTap fd_tap(const GridMeta& m, int i, int j, int k) {
    FdTap t;
    const int c[3] = {i, j, k};
    for (int a = 0; a < 3; ++a) {
        int lo[3] = {i, j, k}, hi[3] = {i, j, k};
        if (c[a] > 0) --lo[a];
        if (c[a] < m.dims[a] - 1) ++hi[a];
        t.lo[a] = m.index(lo[0], lo[1], lo[2]);
        t.hi[a] = m.index(hi[0], hi[1], hi[2]);
        t.inv_h[a] = 1.0 / ((hi[a] - lo[a]) * m.spacing[a]);
    }
    return t;
}

inline Mat3 sym_grad(const double* g, std::size_t n, std::size_t v) {
    Mat3 m;
    m(0, 0) = g[0 * n + v];
    m(1, 1) = g[2 * n + v];
    m(2, 2) = g[5 * n + v];
    m(0, 1) = m(1, 0) = 0.5 * g[1 * n + v];
    m(0, 2) = m(2, 0) = 0.5 * g[3 * n + v];
    m(1, 2) = m(2, 1) = 0.5 * g[4 * n + v];
    return m;
}

inline Mat3 sym_at(const std::vector<double>& d, std::size_t n, std::size_t v) {
    return sym::to_matrix({d[v], d[n + v], d[2 * n + v], d[3 * n + v], d[4 * n + v], d[5 * n + v]});
}

inline void scatter_sym(double* g, std::size_t n, std::size_t v, const Mat3& m) {
    g[0 * n + v] += m(0, 0);
    g[2 * n + v] += m(1, 1);
    g[5 * n + v] += m(2, 2);
    g[1 * n + v] += m(0, 1) + m(1, 0);
    g[3 * n + v] += m(0, 2) + m(2, 0);
    g[4 * n + v] += m(1, 2) + m(2, 1);
}

inline void store_sym(std::vector<double>& d, std::size_t n, std::size_t v, const Mat3& m) {
    d[v] = m(0, 0);
    d[n + v] = 0.5 * (m(0, 1) + m(1, 0));
    d[2 * n + v] = m(1, 1);
    d[3 * n + v] = 0.5 * (m(0, 2) + m(2, 0));
    d[4 * n + v] = 0.5 * (m(1, 2) + m(2, 1));
    d[5 * n + v] = m(2, 2);
}

}  // namespace

Var max_pool2(const Var& x) { return pool2<true>(x); }
Var avg_pool2(const Var& x) { return pool2<false>(x); }

Var affine_field(const Var& params, const GridMeta& meta) {
    require(params->value.size() == 12, "affine_field: expects 12 parameters");
    const Mat3 a = params_matrix(params->value);
    const Vec3 t(params->value[9], params->value[10], params->value[11]);
    const std::size_t n = meta.voxel_count();
    std::vector<double> v(3 * n);
    for (int k = 0; k < meta.dims[2]; ++k)
        for (int j = 0; j < meta.dims[1]; ++j)
            for (int i = 0; i < meta.dims[0]; ++i) {
                const Vec3 p = meta.to_physical(i, j, k);
                const Vec3 d = a * p + t - p;
                const std::size_t q = meta.index(i, j, k);
                for (int c = 0; c < 3; ++c) v[c * n + q] = d[c];
            }
    return make_op(std::move(v), 3, meta, {params}, [meta, n](Node& o) {
        auto& P = o.inputs[0];
        for (int k = 0; k < meta.dims[2]; ++k)
            for (int j = 0; j < meta.dims[1]; ++j)
                for (int i = 0; i < meta.dims[0]; ++i) {
                    const Vec3 p = meta.to_physical(i, j, k);
                    const std::size_t q = meta.index(i, j, k);
                    for (int r = 0; r < 3; ++r) {
                        const double g = o.grad[r * n + q];
                        for (int c = 0; c < 3; ++c) P->grad[3 * r + c] += g * p[c];
                        P->grad[9 + r] += g;
                    }
                }
    });
}

Var compose_affine(const Var& field, const Mat3& a, const Vec3& t) {
    require(field->channels == 3, "compose_affine: field must have 3 channels");
    const GridMeta& m = field->meta;
    const std::size_t n = m.voxel_count();
    std::vector<double> v(3 * n);
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i) {
                const std::size_t q = m.index(i, j, k);
                const Vec3 p = m.to_physical(i, j, k);
                const Vec3 u(field->value[q], field->value[n + q], field->value[2 * n + q]);
                const Vec3 d = a * (p + u) + t - p;
                for (int c = 0; c < 3; ++c) v[c * n + q] = d[c];
            }
    const Mat3 at = a.transpose();
    return make_op(std::move(v), 3, m, {field}, [at, n](Node& o) {
        auto& F = o.inputs[0];
        for (std::size_t q = 0; q < n; ++q) {
            const Vec3 g(o.grad[q], o.grad[n + q], o.grad[2 * n + q]);
            const Vec3 r = at * g;
            for (int c = 0; c < 3; ++c) F->grad[c * n + q] += r[c];
        }
    });
}

Var sample(const Var& img, const Var& field) {
    require(field->channels == 3, "sample: field must have 3 channels");
    const GridMeta im = img->meta, fm = field->meta;
    const std::size_t ni = im.voxel_count(), nf = fm.voxel_count();
    const int C = img->channels;
    std::vector<double> out(C * nf, 0.0);
    const Vec3 inv_sp = im.spacing.cwiseInverse();
    auto position = [im, fm, nf](const std::vector<double>& u, int i, int j, int k) {
        const std::size_t q = fm.index(i, j, k);
        const Vec3 p = fm.to_physical(i, j, k) + Vec3(u[q], u[nf + q], u[2 * nf + q]);
        return im.to_voxel(p);
    };
    const auto nz = static_cast<std::ptrdiff_t>(fm.dims[2]);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t kk = 0; kk < nz; ++kk) {
        const int k = static_cast<int>(kk);
        for (int j = 0; j < fm.dims[1]; ++j)
            for (int i = 0; i < fm.dims[0]; ++i) {
                const Stencil s = zero_pad_stencil(im, position(field->value, i, j, k));
                const std::size_t q = fm.index(i, j, k);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int e = 0; e < s.n; ++e) acc += s.w[e] * img->value[c * ni + s.idx[e]];
                    out[c * nf + q] = acc;
                }
            }
    }
    return make_op(std::move(out), C, fm, {img, field}, [=](Node& o) {
        auto& I = o.inputs[0];
        auto& F = o.inputs[1];
        for (int k = 0; k < fm.dims[2]; ++k)
            for (int j = 0; j < fm.dims[1]; ++j)
                for (int i = 0; i < fm.dims[0]; ++i) {
                    const Stencil s = zero_pad_stencil(im, position(F->value, i, j, k));
                    const std::size_t q = fm.index(i, j, k);
                    Vec3 gp = Vec3::Zero();
                    for (int c = 0; c < C; ++c) {
                        const double g = o.grad[c * nf + q];
                        if (g == 0.0) continue;
                        for (int e = 0; e < s.n; ++e) {
                            if (I->requires_grad) I->grad[c * ni + s.idx[e]] += g * s.w[e];
                            const double v = I->value[c * ni + s.idx[e]];
                            gp += g * v * Vec3(s.dw[e][0], s.dw[e][1], s.dw[e][2]);
                        }
                    }
                    if (F->requires_grad)
                        for (int a = 0; a < 3; ++a) F->grad[a * nf + q] += gp[a] * inv_sp[a];
                }
    });
}

Var upsample_field(const Var& coarse, const GridMeta& fine) {
    const GridMeta cm = coarse->meta;
    const std::size_t nc = cm.voxel_count(), nf = fine.voxel_count();
    const int C = coarse->channels;
    std::vector<double> out(C * nf, 0.0);
    for (int k = 0; k < fine.dims[2]; ++k)
        for (int j = 0; j < fine.dims[1]; ++j)
            for (int i = 0; i < fine.dims[0]; ++i) {
                const Stencil s = clamped_stencil(cm, cm.to_voxel(fine.to_physical(i, j, k)));
                const std::size_t q = fine.index(i, j, k);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int e = 0; e < s.n; ++e) acc += s.w[e] * coarse->value[c * nc + s.idx[e]];
                    out[c * nf + q] = acc;
                }
            }
    return make_op(std::move(out), C, fine, {coarse}, [cm, fine, nc, nf, C](Node& o) {
        auto& X = o.inputs[0];
        for (int k = 0; k < fine.dims[2]; ++k)
            for (int j = 0; j < fine.dims[1]; ++j)
                for (int i = 0; i < fine.dims[0]; ++i) {
                    const Stencil s = clamped_stencil(cm, cm.to_voxel(fine.to_physical(i, j, k)));
                    const std::size_t q = fine.index(i, j, k);
                    for (int c = 0; c < C; ++c)
                        for (int e = 0; e < s.n; ++e) X->grad[c * nc + s.idx[e]] += s.w[e] * o.grad[c * nf + q];
                }
    });
}

Var reorient_field(const Var& tensors, const Var& field) {
    require(tensors->channels == 6 && field->channels == 3, "reorient_field: expects 6-channel tensors and 3-channel field");
    require(tensors->meta == field->meta, "reorient_field: grid mismatch");
    const GridMeta m = field->meta;
    const std::size_t n = m.voxel_count();
    auto factors = std::make_shared<std::vector<PolarFactors>>(n);
    auto valid = std::make_shared<std::vector<std::uint8_t>>(n, 0);
    std::vector<double> out(6 * n);
    const auto& u = field->value;
    const auto nz = static_cast<std::ptrdiff_t>(m.dims[2]);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t kk = 0; kk < nz; ++kk) {
        const int k = static_cast<int>(kk);
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i) {
                const std::size_t v = m.index(i, j, k);
                const FdTap t = fd_tap(m, i, j, k);
                Mat3 jac = Mat3::Identity();
                for (int a = 0; a < 3; ++a)
                    for (int c = 0; c < 3; ++c) jac(c, a) += (u[c * n + t.hi[a]] - u[c * n + t.lo[a]]) * t.inv_h[a];
                Mat3 r = Mat3::Identity();
                if (jac.determinant() > 1e-8) {
                    (*factors)[v] = polar_factors(jac);
                    (*valid)[v] = 1;
                    r = (*factors)[v].rotation;
                }
                store_sym(out, n, v, r.transpose() * sym_at(tensors->value, n, v) * r);
            }
    }
    return make_op(std::move(out), 6, m, {tensors, field}, [m, n, factors, valid](Node& o) {
        auto& T = o.inputs[0];
        auto& F = o.inputs[1];
        for (int k = 0; k < m.dims[2]; ++k)
            for (int j = 0; j < m.dims[1]; ++j)
                for (int i = 0; i < m.dims[0]; ++i) {
                    const std::size_t v = m.index(i, j, k);
                    const Mat3 gbar = sym_grad(o.grad.data(), n, v);
                    const bool ok = (*valid)[v];
                    const Mat3 r = ok ? (*factors)[v].rotation : Mat3::Identity();
                    if (T->requires_grad) scatter_sym(T->grad.data(), n, v, 0.5 * (r * gbar * r.transpose() + (r * gbar * r.transpose()).transpose()));
                    if (!F->requires_grad || !ok) continue;
                    const Mat3 d = sym_at(T->value, n, v);
                    const Mat3 grad_r = 2.0 * d * r * gbar;
                    const Mat3 grad_j = polar_rotation_backward((*factors)[v], grad_r);
                    const FdTap t = fd_tap(m, i, j, k);
                    for (int a = 0; a < 3; ++a)
                        for (int c = 0; c < 3; ++c) {
                            const double g = grad_j(c, a) * t.inv_h[a];
                            F->grad[c * n + t.hi[a]] += g;
                            F->grad[c * n + t.lo[a]] -= g;
                        }
                }
    });
}

Var reorient_affine(const Var& tensors, const Var& params) {
    require(tensors->channels == 6 && params->value.size() == 12, "reorient_affine: bad shapes");
    const std::size_t n = tensors->voxels();
    const PolarFactors f = polar_factors(params_matrix(params->value));
    const Mat3 r = f.rotation;
    std::vector<double> out(6 * n);
    for (std::size_t v = 0; v < n; ++v) store_sym(out, n, v, r.transpose() * sym_at(tensors->value, n, v) * r);
    return make_op(std::move(out), 6, tensors->meta, {tensors, params}, [f, n](Node& o) {
        auto& T = o.inputs[0];
        auto& P = o.inputs[1];
        const Mat3& r = f.rotation;
        Mat3 grad_r = Mat3::Zero();
        for (std::size_t v = 0; v < n; ++v) {
            const Mat3 gbar = sym_grad(o.grad.data(), n, v);
            if (T->requires_grad) {
                const Mat3 g = r * gbar * r.transpose();
                scatter_sym(T->grad.data(), n, v, 0.5 * (g + g.transpose()));
            }
            if (P->requires_grad) grad_r += 2.0 * sym_at(T->value, n, v) * r * gbar;
        }
        if (P->requires_grad) {
            const Mat3 ga = polar_rotation_backward(f, grad_r);
            for (int a = 0; a < 3; ++a)
                for (int c = 0; c < 3; ++c) P->grad[3 * a + c] += ga(a, c);
        }
    });
}

Var mass_centers(const Var& feat) {
    const GridMeta m = feat->meta;
    const std::size_t n = m.voxel_count();
    const int C = feat->channels;
    std::vector<double> out(4 * C, 0.0);
    for (int c = 0; c < C; ++c) {
        double mass = 0.0;
        Vec3 acc = Vec3::Zero();
        for (int k = 0; k < m.dims[2]; ++k)
            for (int j = 0; j < m.dims[1]; ++j)
                for (int i = 0; i < m.dims[0]; ++i) {
                    const double w = std::max(0.0, feat->value[c * n + m.index(i, j, k)]);
                    mass += w;
                    acc += w * m.to_physical(i, j, k);
                }
        const Vec3 ctr = mass > 0.0 ? Vec3(acc / mass) : m.center();
        out[4 * c] = ctr[0];
        out[4 * c + 1] = ctr[1];
        out[4 * c + 2] = ctr[2];
        out[4 * c + 3] = mass;
    }
    return make_op(std::move(out), 1, flat_meta(4 * C), {feat}, [m, n, C](Node& o) {
        auto& F = o.inputs[0];
        for (int c = 0; c < C; ++c) {
            const double mass = o.value[4 * c + 3];
            if (mass <= 0.0) continue;
            const Vec3 ctr(o.value[4 * c], o.value[4 * c + 1], o.value[4 * c + 2]);
            const Vec3 g(o.grad[4 * c], o.grad[4 * c + 1], o.grad[4 * c + 2]);
            const double gm = o.grad[4 * c + 3];
            for (int k = 0; k < m.dims[2]; ++k)
                for (int j = 0; j < m.dims[1]; ++j)
                    for (int i = 0; i < m.dims[0]; ++i) {
                        const std::size_t q = c * n + m.index(i, j, k);
                        if (F->value[q] <= 0.0) continue;
                        F->grad[q] += g.dot(m.to_physical(i, j, k) - ctr) / mass + gm;
                    }
        }
    });
}

Var lstsq_affine(const Var& moving_centers, const Var& target_centers) {
    require(moving_centers->value.size() == target_centers->value.size() && moving_centers->value.size() % 4 == 0,
            "lstsq_affine: centre sets differ in size");
    const int C = static_cast<int>(moving_centers->value.size() / 4);
    std::vector<int> used;
    double max_mass_m = 0.0, max_mass_t = 0.0;
    for (int c = 0; c < C; ++c) {
        max_mass_m = std::max(max_mass_m, moving_centers->value[4 * c + 3]);
        max_mass_t = std::max(max_mass_t, target_centers->value[4 * c + 3]);
    }
    for (int c = 0; c < C; ++c)
        if (moving_centers->value[4 * c + 3] > 1e-9 * max_mass_m && target_centers->value[4 * c + 3] > 1e-9 * max_mass_t)
            used.push_back(c);
    const auto np = static_cast<Eigen::Index>(used.size());
    if (np < 4) fail(ErrorKind::Numerical, "rank deficiency: fewer than 4 feature channels with mass on both inputs");
    Eigen::MatrixXd X(np, 4), Y(np, 3);
    for (Eigen::Index r = 0; r < np; ++r) {
        const int c = used[r];
        X.row(r) << target_centers->value[4 * c], target_centers->value[4 * c + 1], target_centers->value[4 * c + 2], 1.0;
        Y.row(r) << moving_centers->value[4 * c], moving_centers->value[4 * c + 1], moving_centers->value[4 * c + 2];
    }
    // non-coplanarity of the target centres
    const Eigen::RowVector3d mean = X.leftCols(3).colwise().mean();
    const Eigen::MatrixXd centred = X.leftCols(3).rowwise() - mean;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(centred.transpose() * centred);
    const Eigen::Vector3d ev = es.eigenvalues();
    if (!(ev[0] > 1e-12 * std::max(ev[2], 1e-300)) || ev[2] <= 0.0)
        fail(ErrorKind::Numerical, "rank deficiency: feature mass centres are coplanar");
    const Eigen::Matrix4d S = (X.transpose() * X).inverse();
    const Eigen::MatrixXd M = S * X.transpose() * Y;  // 4 x 3
    Mat3 a = M.topRows(3).transpose();
    if (a.determinant() <= 0.0) {
        const Svd3 s = svd3(a);
        Mat3 w = s.w;
        if ((w * s.v.transpose()).determinant() < 0.0) w.col(2) = -w.col(2);
        a = w * s.sigma.asDiagonal() * s.v.transpose();
        if (a.determinant() <= 0.0) fail(ErrorKind::Numerical, "rank deficiency: singular affine fit");
    }
    std::vector<double> p(12);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p[3 * r + c] = a(r, c);
    for (int r = 0; r < 3; ++r) p[9 + r] = M(3, r);
    return make_op(std::move(p), 1, flat_meta(12), {moving_centers, target_centers},
                   [used, X, Y, S, M](Node& o) {
                       Eigen::MatrixXd gm(4, 3);
                       for (int r = 0; r < 3; ++r)
                           for (int c = 0; c < 3; ++c) gm(c, r) = o.grad[3 * r + c];
                       for (int r = 0; r < 3; ++r) gm(3, r) = o.grad[9 + r];
                       auto& Mv = o.inputs[0];
                       auto& Tv = o.inputs[1];
                       const Eigen::MatrixXd xs = X * S;
                       if (Mv->requires_grad) {
                           const Eigen::MatrixXd gy = xs * gm;
                           for (std::size_t r = 0; r < used.size(); ++r)
                               for (int c = 0; c < 3; ++c) Mv->grad[4 * used[r] + c] += gy(r, c);
                       }
                       if (Tv->requires_grad) {
                           const Eigen::MatrixXd e = Y - X * M;
                           const Eigen::MatrixXd gx = e * gm.transpose() * S - xs * gm * M.transpose();
                           for (std::size_t r = 0; r < used.size(); ++r)
                               for (int c = 0; c < 3; ++c) Tv->grad[4 * used[r] + c] += gx(r, c);
                       }
                   });
}

Var correlation(const Var& target, const Var& moving, const std::vector<std::array<int, 3>>& offsets) {
    require(target->meta == moving->meta && target->channels == moving->channels, "correlation: shape mismatch");
    const GridMeta m = target->meta;
    const std::size_t n = m.voxel_count();
    const int C = target->channels;
    const int K = static_cast<int>(offsets.size());
    const double inv_c = 1.0 / C;
    const int nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
    auto for_offset = [=](const std::array<int, 3>& d, auto&& fn) {
        const int x0 = std::max(0, -d[0]), x1 = std::min(nx, nx - d[0]);
        for (int z = std::max(0, -d[2]); z < std::min(nz, nz - d[2]); ++z)
            for (int y = std::max(0, -d[1]); y < std::min(ny, ny - d[1]); ++y) {
                const std::size_t row = (static_cast<std::size_t>(z) * ny + y) * nx;
                const std::size_t srow = (static_cast<std::size_t>(z + d[2]) * ny + (y + d[1])) * nx + d[0];
                fn(row, srow, x0, x1);
            }
    };
    std::vector<double> out(static_cast<std::size_t>(K) * n, 0.0);
#pragma omp parallel for schedule(static)
    for (int kq = 0; kq < K; ++kq) {
        double* o = out.data() + kq * n;
        for (int c = 0; c < C; ++c) {
            const double* t = target->value.data() + c * n;
            const double* mv = moving->value.data() + c * n;
            for_offset(offsets[kq], [&](std::size_t row, std::size_t srow, int a, int e) {
                for (int x = a; x < e; ++x) o[row + x] += inv_c * t[row + x] * mv[srow + x];
            });
        }
    }
    return make_op(std::move(out), K, m, {target, moving}, [=](Node& o) {
        auto& T = o.inputs[0];
        auto& Mv = o.inputs[1];
        for (int kq = 0; kq < K; ++kq) {
            const double* g = o.grad.data() + kq * n;
            for (int c = 0; c < C; ++c) {
                const double* t = T->value.data() + c * n;
                const double* mv = Mv->value.data() + c * n;
                for_offset(offsets[kq], [&](std::size_t row, std::size_t srow, int a, int e) {
                    if (T->requires_grad)
                        for (int x = a; x < e; ++x) T->grad[c * n + row + x] += inv_c * g[row + x] * mv[srow + x];
                    if (Mv->requires_grad)
                        for (int x = a; x < e; ++x) Mv->grad[c * n + srow + x] += inv_c * g[row + x] * t[row + x];
                });
            }
        }
    });
}

Var ncc_loss(const Var& target, const Var& moved, int kernel) {
    require(target->meta == moved->meta && target->channels == 1 && moved->channels == 1, "ncc_loss: shape mismatch");
    auto grad = std::make_shared<std::vector<double>>();
    const double loss = local_ncc(target->value, moved->value, moved->meta.dims, kernel,
                                  moved->requires_grad ? grad.get() : nullptr);
    return make_op({loss}, 1, flat_meta(1), {moved}, [grad](Node& o) {
        auto& M = o.inputs[0];
        for (std::size_t i = 0; i < grad->size(); ++i) M->grad[i] += o.grad[0] * (*grad)[i];
    });
}

Var tensor_loss(const Var& target, const Var& moved, std::span<const std::uint8_t> region) {
    require(target->meta == moved->meta && target->channels == 6 && moved->channels == 6, "tensor_loss: shape mismatch");
    auto grad = std::make_shared<std::vector<double>>();
    const double loss = dtalign::tensor_loss(target->value, moved->value, region, moved->requires_grad ? grad.get() : nullptr);
    return make_op({loss}, 1, flat_meta(1), {moved}, [grad](Node& o) {
        auto& M = o.inputs[0];
        for (std::size_t i = 0; i < grad->size(); ++i) M->grad[i] += o.grad[0] * (*grad)[i];
    });
}

Var soft_dice_loss(const Var& target, const Var& moved) {
    require(target->meta == moved->meta && target->channels == moved->channels, "soft_dice_loss: shape mismatch");
    auto grad = std::make_shared<std::vector<double>>();
    const double loss = dtalign::soft_dice_loss(target->value, moved->value, moved->channels,
                                                moved->requires_grad ? grad.get() : nullptr);
    return make_op({loss}, 1, flat_meta(1), {moved}, [grad](Node& o) {
        auto& M = o.inputs[0];
        for (std::size_t i = 0; i < grad->size(); ++i) M->grad[i] += o.grad[0] * (*grad)[i];
    });
}

Var smoothness_loss(const Var& field) {
    require(field->channels == 3, "smoothness_loss: field must have 3 channels");
    auto grad = std::make_shared<std::vector<double>>();
    const double loss = dtalign::smoothness_loss(field->value, field->meta, field->requires_grad ? grad.get() : nullptr);
    return make_op({loss}, 1, flat_meta(1), {field}, [grad](Node& o) {
        auto& F = o.inputs[0];
        for (std::size_t i = 0; i < grad->size(); ++i) F->grad[i] += o.grad[0] * (*grad)[i];
    });
}

Var mse_loss(const Var& a, const Var& b) {
    require(a->value.size() == b->value.size(), "mse_loss: size mismatch");
    const double loss = dtalign::mse(a->value, b->value);
    const double inv = 2.0 / static_cast<double>(a->value.size());
    return make_op({loss}, 1, flat_meta(1), {a, b}, [inv](Node& o) {
        auto& A = o.inputs[0];
        auto& B = o.inputs[1];
        for (std::size_t i = 0; i < A->value.size(); ++i) {
            const double g = o.grad[0] * inv * (A->value[i] - B->value[i]);
            if (A->requires_grad) A->grad[i] += g;
            if (B->requires_grad) B->grad[i] -= g;
        }
    });
}

}  // namespace dtalign::ad

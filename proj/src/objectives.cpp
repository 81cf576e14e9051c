#include "dtalign/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dtalign {

void LossWeights::validate() const {
    require(std::isfinite(lambda_fa) && lambda_fa >= 0.0, "lambda must be finite and >= 0");
    require(std::isfinite(gamma_def) && gamma_def >= 0.0, "gamma must be finite and >= 0");
}

void ObjectiveReport::validate() const {
    require(dice >= 0.0 && dice <= 1.0, "dice out of [0,1]");
    require(cc >= -1.0 && cc <= 1.0, "cc out of [-1,1]");
    require(njd_pct >= 0.0 && njd_pct <= 100.0, "njd_pct out of [0,100]");
    require(tenengrad >= 0.0, "tenengrad must be >= 0");
}

std::string ObjectiveReport::to_json() const {
    nlohmann::ordered_json j;
    j["l_fa"] = l_fa;
    j["l_dti"] = l_dti;
    j["l_tract"] = l_tract;
    j["l_def"] = l_def;
    j["dice"] = dice;
    j["cc"] = cc;
    j["njd_pct"] = njd_pct;
    j["tenengrad"] = tenengrad;
    return j.dump(2);
}

std::string ObjectiveReport::csv_row() const {
    std::ostringstream os;
    os << std::setprecision(10) << dice << ',' << cc << ',' << njd_pct << ',' << tenengrad;
    return os.str();
}

namespace {

// In-place running-window sum along one axis with truncation at the borders.
void box_axis(std::vector<double>& v, const std::array<int, 3>& d, int axis, int r) {
    const int n = d[axis];
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(d[0]) : static_cast<std::size_t>(d[0]) * d[1];
    const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
    const int n1 = d[o1], n2 = d[o2];
    const std::size_t s1 = o1 == 0 ? 1 : static_cast<std::size_t>(d[0]);
    const std::size_t s2 = o2 == 1 ? static_cast<std::size_t>(d[0]) : static_cast<std::size_t>(d[0]) * d[1];
    std::vector<double> prefix(n + 1);
    for (int b = 0; b < n2; ++b)
        for (int a = 0; a < n1; ++a) {
            const std::size_t base = a * s1 + b * s2;
            prefix[0] = 0.0;
            for (int x = 0; x < n; ++x) prefix[x + 1] = prefix[x] + v[base + x * stride];
            for (int x = 0; x < n; ++x) {
                const int lo = std::max(0, x - r), hi = std::min(n - 1, x + r);
                v[base + x * stride] = prefix[hi + 1] - prefix[lo];
            }
        }
}

}  // namespace

std::vector<double> box_sum(std::span<const double> in, const std::array<int, 3>& dims, int radius) {
    std::vector<double> v(in.begin(), in.end());
    for (int a = 0; a < 3; ++a) box_axis(v, dims, a, radius);
    return v;
}

double local_ncc(std::span<const double> a, std::span<const double> b, const std::array<int, 3>& dims, int kernel,
                 std::vector<double>* grad_b) {
    require(kernel >= 3 && kernel % 2 == 1, "NCC kernel must be odd and >= 3");
    const std::size_t n = a.size();
    require(b.size() == n && n == static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], "NCC inputs differ in size");
    const int r = kernel / 2;
    std::vector<double> ab(n), aa(n), bb(n), ones(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        ab[i] = a[i] * b[i];
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
    }
    const auto sa = box_sum(a, dims, r), sb = box_sum(b, dims, r);
    const auto sab = box_sum(ab, dims, r), saa = box_sum(aa, dims, r), sbb = box_sum(bb, dims, r);
    const auto cnt = box_sum(ones, dims, r);

    double total = 0.0;
    std::vector<double> alpha, alpha_mean, beta, beta_mean;
    if (grad_b) {
        alpha.assign(n, 0.0);
        alpha_mean.assign(n, 0.0);
        beta.assign(n, 0.0);
        beta_mean.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double c = cnt[i];
        const double ma = sa[i] / c, mb = sb[i] / c;
        const double cross = sab[i] - sa[i] * mb;
        const double va = std::max(0.0, saa[i] - sa[i] * ma);
        const double vb = std::max(0.0, sbb[i] - sb[i] * mb);
        if (va / c < 1e-10 || vb / c < 1e-10) continue;
        const double cc2 = cross * cross / (va * vb);
        total += cc2;
        if (grad_b) {
            // d cc^2 / d b_j = alpha (a_j - mean_a) - beta (b_j - mean_b)
            const double al = 2.0 * cross / (va * vb);
            const double be = 2.0 * cc2 / vb;
            alpha[i] = al;
            alpha_mean[i] = al * ma;
            beta[i] = be;
            beta_mean[i] = be * mb;
        }
    }
    const double loss = 1.0 - total / static_cast<double>(n);
    if (grad_b) {
        const auto s_al = box_sum(alpha, dims, r), s_alm = box_sum(alpha_mean, dims, r);
        const auto s_be = box_sum(beta, dims, r), s_bem = box_sum(beta_mean, dims, r);
        grad_b->assign(n, 0.0);
        const double scale = -1.0 / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
            (*grad_b)[j] = scale * (a[j] * s_al[j] - s_alm[j] - b[j] * s_be[j] + s_bem[j]);
    }
    return loss;
}

double local_ncc(const ScalarVolume& a, const ScalarVolume& b, int kernel) {
    require(a.meta == b.meta, "NCC inputs must share one grid");
    return local_ncc(a.data, b.data, a.meta.dims, kernel);
}

double tensor_loss(std::span<const double> atlas, std::span<const double> moved, std::span<const std::uint8_t> region,
                   std::vector<double>* grad_moved) {
    const std::size_t n = region.size();
    require(atlas.size() == 6 * n && moved.size() == 6 * n, "tensor loss inputs differ in size");
    std::size_t count = 0;
    for (auto r : region) count += r ? 1 : 0;
    require(count > 0, "tensor loss region is empty");
    // ED counts each off-diagonal twice, DD each diagonal once more: 2 * sum of
    // squared differences over the six unique components.
    double sum = 0.0;
    if (grad_moved) grad_moved->assign(6 * n, 0.0);
    const double inv = 1.0 / static_cast<double>(count);
    for (int q = 0; q < 6; ++q)
        for (std::size_t i = 0; i < n; ++i) {
            if (!region[i]) continue;
            const double d = atlas[q * n + i] - moved[q * n + i];
            sum += 2.0 * d * d;
            if (grad_moved) (*grad_moved)[q * n + i] = -4.0 * d * inv;
        }
    return sum * inv;
}

double tensor_loss(const TensorVolume& atlas, const TensorVolume& moved, const LabelVolume& region) {
    require(atlas.meta == moved.meta && atlas.meta == region.meta, "tensor loss inputs must share one grid");
    const auto a = tensor_channels(atlas), m = tensor_channels(moved);
    const auto r = region_mask(region);
    return tensor_loss(a, m, r);
}

double soft_dice_loss(std::span<const double> target, std::span<const double> moved, int channels,
                      std::vector<double>* grad_moved) {
    require(channels > 0 && target.size() == moved.size() && target.size() % channels == 0, "soft dice shape mismatch");
    const std::size_t n = target.size() / channels;
    if (grad_moved) grad_moved->assign(moved.size(), 0.0);
    double acc = 0.0;
    int used = 0;
    std::vector<std::array<double, 3>> sums(channels);
    for (int l = 0; l < channels; ++l) {
        double pq = 0.0, pp = 0.0, qq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double p = target[l * n + i], q = moved[l * n + i];
            pq += p * q;
            pp += p * p;
            qq += q * q;
        }
        sums[l] = {pq, pp, qq};
        if (pp + qq > 0.0) {
            acc += 2.0 * pq / (pp + qq);
            ++used;
        }
    }
    if (used == 0) fail(ErrorKind::Numerical, "undefined metric: all label channels are empty");
    if (grad_moved) {
        for (int l = 0; l < channels; ++l) {
            const auto [pq, pp, qq] = sums[l];
            const double s = pp + qq;
            if (s <= 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) {
                const double g = 2.0 * target[l * n + i] / s - 4.0 * pq * moved[l * n + i] / (s * s);
                (*grad_moved)[l * n + i] = -g / used;
            }
        }
    }
    return 1.0 - acc / used;
}

double dice_multiclass(const LabelVolume& a, const LabelVolume& b) {
    require(a.meta == b.meta, "dice inputs must share one grid");
    std::set<std::int32_t> labels;
    for (auto l : a.labels_present()) labels.insert(l);
    for (auto l : b.labels_present()) labels.insert(l);
    if (labels.empty()) fail(ErrorKind::Numerical, "undefined metric: both label volumes are empty");
    double acc = 0.0;
    for (auto l : labels) {
        std::size_t na = 0, nb = 0, both = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            const bool x = a.data[i] == l, y = b.data[i] == l;
            na += x;
            nb += y;
            both += x && y;
        }
        acc += 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
    }
    return acc / static_cast<double>(labels.size());
}

double smoothness_loss(std::span<const double> disp, const GridMeta& meta, std::vector<double>* grad) {
    const std::size_t n = meta.voxel_count();
    require(disp.size() == 3 * n, "smoothness input must be 3 x N");
    if (grad) grad->assign(3 * n, 0.0);
    double total = 0.0;
    const std::size_t stride[3] = {1, static_cast<std::size_t>(meta.dims[0]),
                                   static_cast<std::size_t>(meta.dims[0]) * meta.dims[1]};
    for (int a = 0; a < 3; ++a) {
        const double pairs = static_cast<double>(meta.dims[a] - 1) * (n / meta.dims[a]);
        const double h2 = meta.spacing[a] * meta.spacing[a];
        const double w = 1.0 / (pairs * h2);
        double axis_sum = 0.0;
        for (int k = 0; k < meta.dims[2]; ++k)
            for (int j = 0; j < meta.dims[1]; ++j)
                for (int i = 0; i < meta.dims[0]; ++i) {
                    const int c[3] = {i, j, k};
                    if (c[a] + 1 >= meta.dims[a]) continue;
                    const std::size_t p = meta.index(i, j, k), q = p + stride[a];
                    for (int ch = 0; ch < 3; ++ch) {
                        const double d = disp[ch * n + q] - disp[ch * n + p];
                        axis_sum += d * d;
                        if (grad) {
                            (*grad)[ch * n + q] += 2.0 * d * w;
                            (*grad)[ch * n + p] -= 2.0 * d * w;
                        }
                    }
                }
        total += axis_sum * w;
    }
    return total;
}

double smoothness_loss(const DeformationField& field) {
    const std::size_t n = field.disp.size();
    std::vector<double> d(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) d[c * n + i] = field.disp[i][c];
    return smoothness_loss(d, field.meta);
}

double image_cc(const ScalarVolume& a, const ScalarVolume& b, const LabelVolume* region) {
    require(a.meta == b.meta, "CC inputs must share one grid");
    if (region) require(region->meta == a.meta, "CC region grid mismatch");
    double sa = 0.0, sb = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (region && region->data[i] == 0) continue;
        sa += a.data[i];
        sb += b.data[i];
        ++count;
    }
    require(count > 0, "CC region is empty");
    const double ma = sa / count, mb = sb / count;
    double cab = 0.0, caa = 0.0, cbb = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (region && region->data[i] == 0) continue;
        const double x = a.data[i] - ma, y = b.data[i] - mb;
        cab += x * y;
        caa += x * x;
        cbb += y * y;
    }
    if (caa == 0.0 && cbb == 0.0) fail(ErrorKind::Numerical, "undefined metric: both images constant on the region");
    if (caa == 0.0 || cbb == 0.0) return 0.0;
    return std::clamp(cab / std::sqrt(caa * cbb), -1.0, 1.0);
}

double njd_percent(const DeformationField& field) {
    const auto det = jacobian_determinants(field);
    std::size_t active = 0, negative = 0;
    for (std::size_t i = 0; i < det.size(); ++i) {
        if (field.disp[i].cwiseAbs().maxCoeff() <= 1e-9) continue;
        ++active;
        if (det[i] < 0.0) ++negative;
    }
    return active == 0 ? 0.0 : 100.0 * static_cast<double>(negative) / static_cast<double>(active);
}

double tenengrad(const ScalarVolume& a) {
    const GridMeta& m = a.meta;
    const int w[3] = {1, 2, 1};
    double total = 0.0;
    for (int k = 1; k + 1 < m.dims[2]; ++k)
        for (int j = 1; j + 1 < m.dims[1]; ++j)
            for (int i = 1; i + 1 < m.dims[0]; ++i) {
                // sums of antisymmetric pair differences, so a constant gives exactly 0
                double g[3] = {0.0, 0.0, 0.0};
                for (int p = -1; p <= 1; ++p)
                    for (int q = -1; q <= 1; ++q) {
                        const double wpq = w[p + 1] * w[q + 1];
                        g[0] += wpq * (a(i + 1, j + p, k + q) - a(i - 1, j + p, k + q));
                        g[1] += wpq * (a(i + p, j + 1, k + q) - a(i + p, j - 1, k + q));
                        g[2] += wpq * (a(i + p, j + q, k + 1) - a(i + p, j + q, k - 1));
                    }
                total += g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            }
    return total;
}

double mse(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size() && !a.empty(), "MSE inputs differ in size");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

std::vector<double> tensor_channels(const TensorVolume& v, double scale) {
    const std::size_t n = v.data.size();
    std::vector<double> out(6 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (int q = 0; q < 6; ++q) out[q * n + i] = scale * v.data[i][q];
    return out;
}

std::vector<double> one_hot(const LabelVolume& v, const std::vector<std::int32_t>& labels) {
    const std::size_t n = v.data.size();
    std::vector<double> out(labels.size() * n, 0.0);
    for (std::size_t l = 0; l < labels.size(); ++l)
        for (std::size_t i = 0; i < n; ++i)
            if (v.data[i] == labels[l]) out[l * n + i] = 1.0;
    return out;
}

std::vector<std::uint8_t> region_mask(const LabelVolume& v) {
    std::vector<std::uint8_t> r(v.data.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = v.data[i] != 0;
    return r;
}

double composite_affine_loss(const ScalarVolume& target_fa, const TensorVolume& target_tensors,
                             const LabelVolume& region, const ScalarVolume& moved_fa,
                             const TensorVolume& moved_tensors, const LossWeights& w) {
    w.validate();
    return w.lambda_fa * local_ncc(target_fa, moved_fa, 9) + tensor_loss(target_tensors, moved_tensors, region);
}

DeformLossTerms composite_deform_loss(const ScalarVolume& target_fa, const TensorVolume& target_tensors,
                                      const LabelVolume& region, const ScalarVolume& moved_fa,
                                      const TensorVolume& moved_tensors, const DeformationField& deform,
                                      const LossWeights& w, const LabelVolume* target_masks,
                                      const LabelVolume* moved_masks) {
    w.validate();
    DeformLossTerms t;
    t.l_fa = local_ncc(target_fa, moved_fa, 5);
    t.l_dti = tensor_loss(target_tensors, moved_tensors, region);
    t.l_def = smoothness_loss(deform);
    if (target_masks && moved_masks) t.l_tract = 1.0 - dice_multiclass(*target_masks, *moved_masks);
    t.total = w.lambda_fa * t.l_fa + t.l_dti + t.l_tract + w.gamma_def * t.l_def;
    return t;
}

}  // namespace dtalign

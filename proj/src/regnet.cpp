#include "dtalign/regnet.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "dtalign/dtensor.hpp"
#include "dtalign/error.hpp"
#include "regnet_internal.hpp"

namespace dtalign {

using ad::Var;

void DtiImage::validate() const {
    fa.validate();
    tensors.validate();
    require(fa.meta == tensors.meta, "DtiImage: FA and tensor grids differ");
    if (masks) {
        masks->validate();
        require(masks->meta == fa.meta, "DtiImage: mask grid differs");
    }
}

LabelVolume brain_region(const TensorVolume& t) {
    LabelVolume r(t.meta);
    r.label_names[1] = "brain";
    for (std::size_t v = 0; v < t.data.size(); ++v) {
        const Sym6& d = t.data[v];
        if (d[sym::XX] + d[sym::YY] + d[sym::ZZ] > 0.0) r.data[v] = 1;
    }
    return r;
}

namespace detail {

Var scalar_var(const ScalarVolume& v) { return ad::constant(v.data, 1, v.meta); }

Var tensor_var(const TensorVolume& v) { return ad::constant(tensor_channels(v, kTensorLossScale), 6, v.meta); }

std::vector<std::int32_t> shared_labels(const DtiImage& moving, const DtiImage& target) {
    std::set<std::int32_t> s;
    if (!moving.masks || !target.masks) return {};
    for (auto l : moving.masks->labels_present()) s.insert(l);
    for (auto l : target.masks->labels_present()) s.insert(l);
    return {s.begin(), s.end()};
}

PreparedPair prepare(const DtiImage& moving, const DtiImage& target) {
    moving.validate();
    target.validate();
    PreparedPair p;
    p.moving_fa = scalar_var(moving.fa);
    p.moving_t = tensor_var(moving.tensors);
    p.target_fa = scalar_var(target.fa);
    p.target_t = tensor_var(target.tensors);
    p.region = region_mask(brain_region(target.tensors));
    p.labels = shared_labels(moving, target);
    if (!p.labels.empty()) {
        p.moving_masks = ad::constant(one_hot(*moving.masks, p.labels), static_cast<int>(p.labels.size()),
                                      moving.masks->meta);
        p.target_masks = ad::constant(one_hot(*target.masks, p.labels), static_cast<int>(p.labels.size()),
                                      target.masks->meta);
    }
    return p;
}

Var affine_loss(const Var& params, const PreparedPair& p, double lambda) {
    const Var field = ad::affine_field(params, p.target_fa->meta);
    const Var mfa = ad::sample(p.moving_fa, field);
    const Var mt = ad::reorient_affine(ad::sample(p.moving_t, field), params);
    return ad::weighted_sum({ad::ncc_loss(p.target_fa, mfa, 9), ad::tensor_loss(p.target_t, mt, p.region)},
                            {lambda, 1.0});
}

Var deform_loss(const Var& residual, const Var& composed, const PreparedPair& p, double lambda, double gamma) {
    const Var mfa = ad::sample(p.moving_fa, composed);
    const Var mt = ad::reorient_field(ad::sample(p.moving_t, composed), composed);
    std::vector<Var> terms{ad::ncc_loss(p.target_fa, mfa, 5), ad::tensor_loss(p.target_t, mt, p.region),
                           ad::smoothness_loss(residual)};
    std::vector<double> w{lambda, 1.0, gamma};
    if (p.moving_masks) {
        terms.push_back(ad::soft_dice_loss(p.target_masks, ad::sample(p.moving_masks, composed)));
        w.push_back(1.0);
    }
    return ad::weighted_sum(terms, w);
}

DeformationField to_field(const Var& disp) {
    require(disp->channels == 3, "to_field: expects 3 channels");
    DeformationField f(disp->meta);
    const std::size_t n = f.disp.size();
    for (std::size_t v = 0; v < n; ++v) f.disp[v] = Vec3(disp->value[v], disp->value[n + v], disp->value[2 * n + v]);
    return f;
}

Var field_var(const DeformationField& f, bool trainable) {
    const std::size_t n = f.disp.size();
    std::vector<double> v(3 * n);
    for (std::size_t q = 0; q < n; ++q)
        for (int c = 0; c < 3; ++c) v[c * n + q] = f.disp[q][c];
    return trainable ? ad::parameter(std::move(v), 3, f.meta) : ad::constant(std::move(v), 3, f.meta);
}

std::vector<double> affine_params(const AffineTransform& a) {
    std::vector<double> p(12);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) p[3 * r + c] = a.matrix()(r, c);
        p[9 + r] = a.translation()[r];
    }
    return p;
}

void check_finite(double loss, const std::string& stage, int step) {
    if (!std::isfinite(loss))
        fail(ErrorKind::Numerical, "training diverged: non-finite " + stage + " loss at step " + std::to_string(step));
}

Adam::Adam(std::vector<Var> params, double lr) : params_(std::move(params)), lr_(lr) {
    for (const auto& p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p->grad.assign(p->value.size(), 0.0);
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, t_);
    const double c2 = 1.0 - std::pow(beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        if (p.grad.size() != p.value.size()) continue;
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g;
            v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g * g;
            p.value[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps);
        }
    }
}

}  // namespace detail

using namespace detail;

// ---------------------------------------------------------------- parameters

std::vector<Var> EncoderParams::parameters() const {
    std::vector<Var> out;
    for (const auto& l : layers) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

std::size_t EncoderParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p->value.size();
    return n;
}

ConvLayer make_conv(int cin, int cout, int kernel, std::mt19937_64& rng, bool zero_init) {
    require(cin > 0 && cout > 0 && kernel % 2 == 1, "make_conv: bad shape");
    const std::size_t taps = static_cast<std::size_t>(kernel) * kernel * kernel;
    std::vector<double> w(static_cast<std::size_t>(cout) * cin * taps, 0.0);
    if (!zero_init) {
        std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (cin * static_cast<double>(taps))));
        for (auto& x : w) x = nd(rng);
    }
    ConvLayer l;
    l.weight = ad::parameter_vector(std::move(w));
    l.bias = ad::parameter_vector(std::vector<double>(cout, 0.0));
    l.cin = cin;
    l.cout = cout;
    l.kernel = kernel;
    return l;
}

namespace {

Var apply_conv(const ConvLayer& l, const Var& x) {
    require(x->channels == l.cin, "encoder: channel count mismatch");
    return ad::conv3d(x, l.weight, l.bias, l.kernel);
}

EncoderParams affine_encoder(const AffineNetConfig& cfg, std::mt19937_64& rng) {
    EncoderParams e;
    e.slope = cfg.slope;
    int c = cfg.in_channels;
    for (int s : cfg.stage_channels) {
        e.layers.push_back(make_conv(c, s, 3, rng));
        c = s;
    }
    e.pooled_layers = std::min(cfg.pools, static_cast<int>(cfg.stage_channels.size()));
    for (int i = 0; i < cfg.extra_convs; ++i) e.layers.push_back(make_conv(c, c, cfg.extra_kernel, rng));
    return e;
}

EncoderParams deform_encoder(int in_channels, const std::vector<int>& widths, double slope, std::mt19937_64& rng) {
    EncoderParams e;
    e.slope = slope;
    int c = in_channels;
    for (int w : widths) {
        e.layers.push_back(make_conv(c, w, 3, rng));
        e.layers.push_back(make_conv(w, w, 3, rng));
        c = w;
    }
    return e;
}

}  // namespace

std::vector<std::array<int, 3>> window_offsets(int window) {
    require(window >= 3 && window % 2 == 1, "window_offsets: window must be odd and >= 3");
    const int h = window / 2;
    std::vector<std::array<int, 3>> out;
    for (int z : {-h, 0, h})
        for (int y : {-h, 0, h})
            for (int x : {-h, 0, h}) out.push_back({x, y, z});
    return out;
}

AffineNet AffineNet::create(const AffineNetConfig& cfg, std::uint64_t seed) {
    require(!cfg.stage_channels.empty() && cfg.in_channels > 0, "AffineNet: empty architecture");
    require(cfg.pools >= 0, "AffineNet: pools must be >= 0");
    AffineNet n;
    n.config = cfg;
    // Separate parameters with a common starting point.
    std::mt19937_64 rm(seed), rt(seed);
    n.moving_encoder = affine_encoder(cfg, rm);
    n.target_encoder = affine_encoder(cfg, rt);
    return n;
}

std::vector<Var> AffineNet::parameters() const {
    auto a = moving_encoder.parameters();
    auto b = target_encoder.parameters();
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

DeformNet DeformNet::create(const DeformNetConfig& cfg, std::uint64_t seed) {
    require(cfg.scales() >= 1 && cfg.fa_channels.size() == cfg.tensor_channels.size(),
            "DeformNet: FA and tensor encoders need the same number of scales");
    DeformNet n;
    n.config = cfg;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    n.fa_encoder = deform_encoder(1, cfg.fa_channels, cfg.slope, rng);
    n.tensor_encoder = deform_encoder(6, cfg.tensor_channels, cfg.slope, rng);
    const int corr = 27 * static_cast<int>(cfg.windows.size());
    for (int j = 0; j < cfg.scales(); ++j) {
        EncoderParams mlp;
        mlp.slope = cfg.slope;
        mlp.layers.push_back(make_conv(corr, cfg.mlp_hidden, 1, rng));
        mlp.layers.push_back(make_conv(cfg.mlp_hidden, 3, 1, rng, true));
        n.decoder.push_back(std::move(mlp));
    }
    return n;
}

std::vector<Var> DeformNet::parameters() const {
    auto a = fa_encoder.parameters();
    for (const auto* e : {&tensor_encoder}) {
        auto b = e->parameters();
        a.insert(a.end(), b.begin(), b.end());
    }
    for (const auto& d : decoder) {
        auto b = d.parameters();
        a.insert(a.end(), b.begin(), b.end());
    }
    return a;
}

// ---------------------------------------------------------------- persistence

namespace {

nlohmann::json encoder_json(const EncoderParams& e) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : e.layers)
        layers.push_back({{"cin", l.cin}, {"cout", l.cout}, {"kernel", l.kernel}, {"weight", l.weight->value},
                          {"bias", l.bias->value}});
    return {{"slope", e.slope}, {"layers", layers}};
}

void load_encoder(EncoderParams& e, const nlohmann::json& j) {
    const auto& layers = j.at("layers");
    if (layers.size() != e.layers.size()) fail(ErrorKind::Format, "model file: layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto w = layers[i].at("weight").get<std::vector<double>>();
        auto b = layers[i].at("bias").get<std::vector<double>>();
        if (w.size() != e.layers[i].weight->value.size() || b.size() != e.layers[i].bias->value.size())
            fail(ErrorKind::Format, "model file: layer shape mismatch");
        e.layers[i].weight->value = std::move(w);
        e.layers[i].bias->value = std::move(b);
    }
}

}  // namespace

void LearnedModel::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    const auto& ac = affine.config;
    j["affine"] = {{"in_channels", ac.in_channels},
                   {"stage_channels", ac.stage_channels},
                   {"extra_convs", ac.extra_convs},
                   {"pools", ac.pools},
                   {"extra_kernel", ac.extra_kernel},
                   {"slope", ac.slope},
                   {"moving_encoder", encoder_json(affine.moving_encoder)},
                   {"target_encoder", encoder_json(affine.target_encoder)}};
    const auto& dc = deform.config;
    nlohmann::json dec = nlohmann::json::array();
    for (const auto& d : deform.decoder) dec.push_back(encoder_json(d));
    j["deform"] = {{"fa_channels", dc.fa_channels},
                   {"tensor_channels", dc.tensor_channels},
                   {"mlp_hidden", dc.mlp_hidden},
                   {"windows", dc.windows},
                   {"slope", dc.slope},
                   {"fa_encoder", encoder_json(deform.fa_encoder)},
                   {"tensor_encoder", encoder_json(deform.tensor_encoder)},
                   {"decoder", dec}};
    std::ofstream out(path);
    if (!out) fail(ErrorKind::IO, "cannot write model file " + path.string());
    out << j.dump();
    if (!out) fail(ErrorKind::IO, "error writing model file " + path.string());
}

LearnedModel LearnedModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IO, "cannot open model file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        AffineNetConfig ac;
        const auto& a = j.at("affine");
        ac.in_channels = a.at("in_channels").get<int>();
        ac.stage_channels = a.at("stage_channels").get<std::vector<int>>();
        ac.extra_convs = a.at("extra_convs").get<int>();
        ac.pools = a.at("pools").get<int>();
        ac.extra_kernel = a.at("extra_kernel").get<int>();
        ac.slope = a.at("slope").get<double>();
        DeformNetConfig dc;
        const auto& d = j.at("deform");
        dc.fa_channels = d.at("fa_channels").get<std::vector<int>>();
        dc.tensor_channels = d.at("tensor_channels").get<std::vector<int>>();
        dc.mlp_hidden = d.at("mlp_hidden").get<int>();
        dc.windows = d.at("windows").get<std::vector<int>>();
        dc.slope = d.at("slope").get<double>();
        LearnedModel m{AffineNet::create(ac, 0), DeformNet::create(dc, 0)};
        load_encoder(m.affine.moving_encoder, a.at("moving_encoder"));
        load_encoder(m.affine.target_encoder, a.at("target_encoder"));
        load_encoder(m.deform.fa_encoder, d.at("fa_encoder"));
        load_encoder(m.deform.tensor_encoder, d.at("tensor_encoder"));
        const auto& dec = d.at("decoder");
        if (dec.size() != m.deform.decoder.size()) fail(ErrorKind::Format, "model file: decoder scale mismatch");
        for (std::size_t i = 0; i < dec.size(); ++i) load_encoder(m.deform.decoder[i], dec[i]);
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("malformed model file: ") + e.what());
    }
}

// ---------------------------------------------------------------- affine stage

Var network_input(const ScalarVolume& fa, const TensorVolume& tensors) {
    require(fa.meta == tensors.meta, "network_input: grid mismatch");
    return ad::concat({scalar_var(fa), tensor_var(tensors)});
}

FeaturePyramid run_affine_encoder(const EncoderParams& enc, const Var& input, Provenance tag) {
    require(!enc.layers.empty(), "affine encoder: no layers");
    FeaturePyramid p;
    p.provenance = tag;
    Var x = input;
    const int n = static_cast<int>(enc.layers.size());
    for (int l = 0; l < enc.pooled_layers; ++l) {
        x = ad::leaky_relu(apply_conv(enc.layers[l], x), enc.slope);
        p.levels.push_back(x);
        x = ad::max_pool2(x);
    }
    for (int l = enc.pooled_layers; l < n; ++l) {
        x = apply_conv(enc.layers[l], x);
        if (l + 1 < n) x = ad::leaky_relu(x, enc.slope);
    }
    p.levels.push_back(x);
    return p;
}

std::pair<FeaturePyramid, FeaturePyramid> encode_affine(const AffineNet& net, const DtiImage& moving,
                                                        const DtiImage& target) {
    moving.validate();
    target.validate();
    require(moving.meta() == target.meta(), "encode_affine: inputs must share the working grid");
    return {run_affine_encoder(net.moving_encoder, network_input(moving.fa, moving.tensors), Provenance::Moving),
            run_affine_encoder(net.target_encoder, network_input(target.fa, target.tensors), Provenance::Target)};
}

Var affine_head(const FeaturePyramid& moving, const FeaturePyramid& target) {
    require(moving.deepest()->channels == target.deepest()->channels, "affine_head: channel counts differ");
    return ad::lstsq_affine(ad::mass_centers(moving.deepest()), ad::mass_centers(target.deepest()));
}

AffineTransform to_affine(const Var& params) {
    const auto& p = params->value;
    require(p.size() == 12, "to_affine: expects 12 parameters");
    Mat3 a;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) a(r, c) = p[3 * r + c];
    return AffineTransform(a, Vec3(p[9], p[10], p[11]));
}

namespace {

DtiImage warp_image(const DtiImage& moving, const AffineTransform& a, const GridMeta& grid) {
    const DeformationField f = affine_to_field(a, grid);
    DtiImage out;
    out.fa = warp_scalar(moving.fa, f);
    out.tensors = warp_tensor(moving.tensors, f);
    if (moving.masks) out.masks = warp_labels(*moving.masks, f);
    return out;
}

double alignment_mse(const DtiImage& warped, const DtiImage& target) {
    return mse(warped.fa.data, target.fa.data) +
           mse(tensor_channels(warped.tensors, kTensorLossScale), tensor_channels(target.tensors, kTensorLossScale));
}

}  // namespace

RecurrentAffineResult recurrent_affine(const AffineNet& net, const DtiImage& moving, const DtiImage& target,
                                       const RecurrentOptions& opt) {
    require(opt.max_iters >= 1, "recurrent_affine: max_iters must be >= 1");
    target.validate();
    RecurrentAffineResult res;
    AffineTransform acc = AffineTransform::identity();
    DtiImage current = warp_image(moving, acc, target.meta());
    double best = std::numeric_limits<double>::infinity();
    int rises = 0;
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 1; step <= opt.max_iters; ++step) {
        auto [fm, ft] = encode_affine(net, current, target);
        acc = acc.then_after(to_affine(affine_head(fm, ft)));
        // always from the original image
        current = warp_image(moving, acc, target.meta());
        const double e = alignment_mse(current, target);
        res.trace.push_back(e);
        if (e < best) {
            best = e;
            res.affine = acc;
            res.selected_step = step;
        }
        rises = e > prev ? rises + 1 : 0;
        prev = e;
        if (rises >= opt.patience) break;
    }
    return res;
}

// ---------------------------------------------------------------- deformable stage

FeaturePyramid run_deform_encoder(const EncoderParams& enc, const Var& input, int scales, Provenance tag) {
    require(static_cast<int>(enc.layers.size()) == 2 * scales, "deform encoder: expects two convs per scale");
    FeaturePyramid p;
    p.provenance = tag;
    Var x = input;
    for (int j = 0; j < scales; ++j) {
        if (j > 0) x = ad::avg_pool2(x);
        x = ad::leaky_relu(apply_conv(enc.layers[2 * j], x), enc.slope);
        x = ad::leaky_relu(apply_conv(enc.layers[2 * j + 1], x), enc.slope);
        p.levels.push_back(x);
    }
    return p;
}

namespace {

FeaturePyramid concat_pyramids(const FeaturePyramid& a, const FeaturePyramid& b) {
    FeaturePyramid p;
    p.provenance = a.provenance;
    for (std::size_t j = 0; j < a.levels.size(); ++j) p.levels.push_back(ad::concat({a.levels[j], b.levels[j]}));
    return p;
}

}  // namespace

FeaturePyramid DeformPyramids::moving() const { return concat_pyramids(fa_moving, tensor_moving); }
FeaturePyramid DeformPyramids::target() const { return concat_pyramids(fa_target, tensor_target); }

DeformPyramids encode_deform(const DeformNet& net, const Var& moving_fa, const Var& moving_tensor,
                             const Var& target_fa, const Var& target_tensor) {
    require(moving_fa->meta == target_fa->meta && moving_tensor->meta == target_tensor->meta &&
                moving_fa->meta == moving_tensor->meta,
            "encode_deform: inputs must share one grid");
    require(moving_fa->channels == 1 && target_fa->channels == 1 && moving_tensor->channels == 6 &&
                target_tensor->channels == 6,
            "encode_deform: expects 1 FA and 6 tensor channels");
    const int k = net.config.scales();
    return {run_deform_encoder(net.fa_encoder, moving_fa, k, Provenance::Moving),
            run_deform_encoder(net.fa_encoder, target_fa, k, Provenance::Target),
            run_deform_encoder(net.tensor_encoder, moving_tensor, k, Provenance::Moving),
            run_deform_encoder(net.tensor_encoder, target_tensor, k, Provenance::Target)};
}

Var deform_decoder(const DeformNet& net, const FeaturePyramid& moving, const FeaturePyramid& target) {
    const int k = static_cast<int>(moving.levels.size());
    require(k == static_cast<int>(target.levels.size()) && k == static_cast<int>(net.decoder.size()),
            "deform_decoder: pyramid depth mismatch");
    std::vector<std::vector<std::array<int, 3>>> offsets;
    for (int w : net.config.windows) offsets.push_back(window_offsets(w));
    Var field;
    for (int j = k - 1; j >= 0; --j) {
        const Var& fm = moving.levels[j];
        const Var& ft = target.levels[j];
        require(fm->meta == ft->meta && fm->channels == ft->channels, "deform_decoder: level mismatch");
        if (!field)
            field = ad::constant(std::vector<double>(3 * ft->voxels(), 0.0), 3, ft->meta);
        else
            field = ad::upsample_field(field, ft->meta);
        // the original level-j features, warped by the running field
        const Var warped = ad::sample(fm, field);
        std::vector<Var> corr;
        for (const auto& o : offsets) corr.push_back(ad::correlation(ft, warped, o));
        const EncoderParams& mlp = net.decoder[j];
        Var h = ad::concat(corr);
        for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
            h = apply_conv(mlp.layers[l], h);
            if (l + 1 < mlp.layers.size()) h = ad::leaky_relu(h, mlp.slope);
        }
        const Vec3& sp = ft->meta.spacing;
        field = ad::add(field, ad::scale_channels(h, {sp[0], sp[1], sp[2]}));
    }
    return field;
}

Var affine_objective(const Var& params, const DtiImage& moving, const DtiImage& target, double lambda) {
    return affine_loss(params, prepare(moving, target), lambda);
}

// ---------------------------------------------------------------- training

namespace {

/// Forward + backward of one step; numerical failures become divergence at `step`.
template <class Forward>
double guarded(int step, const char* stage, Forward forward) {
    Var loss;
    try {
        loss = forward();
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::Numerical) throw;
        fail(ErrorKind::Numerical, std::string("training diverged at ") + stage + " step " + std::to_string(step) +
                                       ": " + e.what());
    }
    check_finite(loss->scalar(), stage, step);
    ad::backward(loss);
    return loss->scalar();
}

}  // namespace

TrainResult train(const std::vector<TrainingPair>& pairs, const TrainConfig& cfg) {
    return train(LearnedModel{AffineNet::create(cfg.affine_net, cfg.seed), DeformNet::create(cfg.deform_net, cfg.seed)},
                 pairs, cfg);
}

TrainResult train(LearnedModel model, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg) {
    require(!pairs.empty(), "train: needs at least one training pair");
    require(cfg.learning_rate >= 0.0 && std::isfinite(cfg.learning_rate), "train: learning rate must be >= 0");
    require(cfg.affine_steps >= 0 && cfg.deform_steps >= 0, "train: step counts must be >= 0");
    TrainResult res;
    std::vector<PreparedPair> prepared;
    for (const auto& p : pairs) {
        require(p.moving.meta() == p.target.meta(), "train: pairs must be on the working grid");
        prepared.push_back(prepare(p.moving, p.target));
    }

    if (cfg.affine_steps > 0) {
        Adam opt(model.affine.parameters(), cfg.learning_rate);
        for (int step = 0; step < cfg.affine_steps; ++step) {
            const std::size_t i = static_cast<std::size_t>(step) % pairs.size();
            const PreparedPair& pp = prepared[i];
            opt.zero_grad();
            const double l = guarded(step, "affine", [&] {
                const FeaturePyramid fm = run_affine_encoder(
                    model.affine.moving_encoder, ad::concat({pp.moving_fa, pp.moving_t}), Provenance::Moving);
                const FeaturePyramid ft = run_affine_encoder(
                    model.affine.target_encoder, ad::concat({pp.target_fa, pp.target_t}), Provenance::Target);
                return affine_loss(affine_head(fm, ft), pp, cfg.lambda_affine);
            });
            opt.step();
            res.affine_losses.push_back(l);
            if (cfg.on_step) cfg.on_step("affine", step, l);
        }
    }

    if (cfg.deform_steps > 0) {
        // deformable training sees affine-aligned moving images
        std::vector<PreparedPair> aligned;
        for (const auto& p : pairs) {
            const auto rec = recurrent_affine(model.affine, p.moving, p.target);
            aligned.push_back(prepare(warp_image(p.moving, rec.affine, p.target.meta()), p.target));
        }
        Adam opt(model.deform.parameters(), cfg.learning_rate);
        for (int step = 0; step < cfg.deform_steps; ++step) {
            const PreparedPair& pp = aligned[static_cast<std::size_t>(step) % aligned.size()];
            opt.zero_grad();
            const double l = guarded(step, "deformable", [&] {
                const auto pyr = encode_deform(model.deform, pp.moving_fa, pp.moving_t, pp.target_fa, pp.target_t);
                const Var u = deform_decoder(model.deform, pyr.moving(), pyr.target());
                return deform_loss(u, u, pp, cfg.lambda_deform, cfg.gamma);
            });
            opt.step();
            res.deform_losses.push_back(l);
            if (cfg.on_step) cfg.on_step("deformable", step, l);
        }
    }
    res.model = std::move(model);
    return res;
}

// ---------------------------------------------------------------- inference and evaluation

WarpedImage apply_field(const DtiImage& moving, const DeformationField& composed) {
    WarpedImage w;
    w.fa = warp_scalar(moving.fa, composed);
    w.tensors = warp_tensor(moving.tensors, composed);
    if (moving.masks) w.masks = warp_labels(*moving.masks, composed);
    return w;
}

namespace {

TensorVolume rescaled(const TensorVolume& t) {
    TensorVolume out = t;
    for (auto& d : out.data)
        for (auto& x : d) x *= kTensorLossScale;
    return out;
}

}  // namespace

ObjectiveReport evaluate(const DtiImage& target, const WarpedImage& warped, const DeformationField& deform,
                         double lambda, double gamma) {
    const LabelVolume region = brain_region(target.tensors);
    const LabelVolume* tm = target.masks ? &*target.masks : nullptr;
    const LabelVolume* wm = warped.masks ? &*warped.masks : nullptr;
    const DeformLossTerms t = composite_deform_loss(target.fa, rescaled(target.tensors), region, warped.fa,
                                                    rescaled(warped.tensors), deform, {lambda, gamma}, tm, wm);
    ObjectiveReport r;
    r.l_fa = t.l_fa;
    r.l_dti = t.l_dti;
    r.l_tract = t.l_tract;
    r.l_def = t.l_def;
    r.dice = (tm && wm) ? 1.0 - t.l_tract : 0.0;
    r.cc = image_cc(target.fa, warped.fa);
    r.njd_pct = njd_percent(deform);
    r.tenengrad = tenengrad(warped.fa);
    return r;
}

double deform_objective_value(const DtiImage& moving, const DtiImage& target, const DeformationField& composed,
                              const DeformationField& residual, double lambda, double gamma) {
    const WarpedImage w = apply_field(moving, composed);
    const LabelVolume region = brain_region(target.tensors);
    const LabelVolume* tm = target.masks ? &*target.masks : nullptr;
    const LabelVolume* wm = w.masks ? &*w.masks : nullptr;
    return composite_deform_loss(target.fa, rescaled(target.tensors), region, w.fa, rescaled(w.tensors), residual,
                                 {lambda, gamma}, tm, wm)
        .total;
}

RegistrationResult register_learned(const LearnedModel& model, const DtiImage& moving, const DtiImage& target,
                                    const LearnedConfig& cfg) {
    moving.validate();
    target.validate();
    RegistrationResult res;
    const auto rec = recurrent_affine(model.affine, moving, target, cfg.recurrent);
    res.affine = rec.affine;
    res.inference_trace = rec.trace;
    res.deform = DeformationField(target.meta());
    if (cfg.deformable) {
        const DtiImage aligned = warp_image(moving, rec.affine, target.meta());
        const PreparedPair pp = prepare(aligned, target);
        const auto pyr = encode_deform(model.deform, pp.moving_fa, pp.moving_t, pp.target_fa, pp.target_t);
        res.deform = to_field(deform_decoder(model.deform, pyr.moving(), pyr.target()));
    }
    res.composed = compose(res.affine, res.deform);
    const DeformationField zero(target.meta());
    res.identity_loss = deform_objective_value(moving, target, affine_to_field(AffineTransform::identity(), target.meta()),
                                               zero, cfg.lambda_deform, cfg.gamma);
    res.affine_loss = deform_objective_value(moving, target, affine_to_field(res.affine, target.meta()), zero,
                                             cfg.lambda_deform, cfg.gamma);
    res.deform_loss = deform_objective_value(moving, target, res.composed, res.deform, cfg.lambda_deform, cfg.gamma);
    res.report = evaluate(target, apply_field(moving, res.composed), res.deform, cfg.lambda_deform, cfg.gamma);
    return res;
}

}  // namespace dtalign

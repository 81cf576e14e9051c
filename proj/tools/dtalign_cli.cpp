#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

#include <CLI11.hpp>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dtalign/augment.hpp"
#include "dtalign/dtensor.hpp"
#include "dtalign/nifti_io.hpp"
#include "dtalign/pipeline.hpp"
#include "dtalign/tbss.hpp"

namespace fs = std::filesystem;
using namespace dtalign;

namespace {

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

PipelineConfig load_config(const fs::path& path) {
    ConfigResult r = validate_config(path);
    if (!r.ok()) {
        std::string msg = "invalid config " + path.string();
        for (const auto& e : r.errors) msg += "\n  " + e;
        fail(ErrorKind::Validation, msg);
    }
    return r.config;
}

void write_json(const nlohmann::ordered_json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::IO, "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void make_dir(const fs::path& d) {
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) fail(ErrorKind::IO, "cannot create directory " + d.string());
}

// principal direction error in degrees, sign-insensitive
double angle_deg(const Vec3& a, const Vec3& b) {
    const double c = std::min(1.0, std::abs(a.normalized().dot(b.normalized())));
    return std::acos(c) * 180.0 / std::numbers::pi;
}

struct Options {
    // shared
    std::string backend;
    std::int64_t seed = -1;
    int threads = 0;
    fs::path config;
    // fit-tensor / fa
    fs::path dwi, btable, tensor, out, s0_out, md_out;
    // warp
    fs::path input, affine, field;
    // reorient-check
    int axis = 2;
    double angle = 30.0, fa_min = 0.3;
    fs::path report;
    // metrics
    fs::path target_tensor, target_fa, target_masks, warped_tensor, warped_fa, warped_masks;
    double lambda = 100.0, gamma = 100.0;
    // skeleton
    std::vector<fs::path> inputs;
    fs::path mean, out_dir;
    double threshold = 0.2;
    int radius = 4;
    // augment
    std::string phantom = "crossing-tubes";
    int dims = 48;
    double amplitude = 0.0, wavelength = 16.0;
    bool identity = false;
};

int cmd_fit_tensor(const Options& o) {
    const auto series = read_series(o.dwi);
    const auto scheme = DiffusionGradientScheme::load(o.btable.string());
    require(series.size() == scheme.bvals.size(), "b-table has " + std::to_string(scheme.bvals.size()) +
                                                      " entries but the series has " + std::to_string(series.size()) +
                                                      " volumes");
    ScalarVolume s0;
    const TensorVolume t = fit_tensor_volume(series, scheme, &s0);
    write_volume(t, o.out);
    if (!o.s0_out.empty()) write_volume(s0, o.s0_out);
    return 0;
}

int cmd_fa(const Options& o) {
    const TensorVolume t = read_tensor(o.tensor);
    write_volume(fa_map(t), o.out);
    if (!o.md_out.empty()) write_volume(md_map(t), o.md_out);
    return 0;
}

int cmd_register(const Options& o) {
    PipelineConfig cfg = load_config(o.config);
    if (!o.backend.empty()) cfg.backend = parse_backend(o.backend);
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (o.threads > 0) cfg.threads = o.threads;
    if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
    set_threads(cfg.threads);
    const PipelineResult r = run_pipeline(cfg);
    if (r.exit_code != 0) {
        std::cerr << "dtalign register: " << r.error << "\n";
        return r.exit_code;
    }
    std::cout << (cfg.output_dir / "manifest.json").string() << "\n";
    if (r.report) std::cout << ObjectiveReport::csv_header() << "\n" << r.report->csv_row() << "\n";
    return 0;
}

int cmd_warp(const Options& o) {
    require(!o.affine.empty() || !o.field.empty(), "warp needs --affine and/or --field");
    const AnyVolume vol = read_volume(o.input);
    const GridMeta in_meta = std::visit([](const auto& v) { return v.meta; }, vol);
    const AffineTransform a = o.affine.empty() ? AffineTransform::identity() : AffineTransform::load(o.affine);
    // one composed map, one interpolation
    const DeformationField phi =
        o.field.empty() ? affine_to_field(a, in_meta) : compose(a, DeformationField::load(o.field));
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, ScalarVolume>) write_volume(warp_scalar(v, phi), o.out);
            else if constexpr (std::is_same_v<T, TensorVolume>) write_volume(warp_tensor(v, phi), o.out);
            else write_volume(warp_labels(v, phi), o.out);
        },
        vol);
    return 0;
}

int cmd_reorient_check(const Options& o) {
    require(o.axis >= 0 && o.axis <= 2, "--axis must be 0, 1 or 2");
    const TensorVolume t = read_tensor(o.tensor);
    const GridMeta& m = t.meta;
    const Mat3 r = axis_rotation(o.axis, o.angle * std::numbers::pi / 180.0);
    const AffineTransform rot = AffineTransform::about_center(r, m.center(), Vec3::Zero());
    const DeformationField phi = affine_to_field(rot, m);
    const TensorVolume warped = warp_tensor(t, phi);
    const TensorVolume plain = [&] {
        // interpolation without reorientation, for the before/after contrast
        TensorVolume p(m);
        for (int k = 0; k < m.dims[2]; ++k)
            for (int j = 0; j < m.dims[1]; ++j)
                for (int i = 0; i < m.dims[0]; ++i)
                    p(i, j, k) = sample_trilinear(t, m.to_voxel(phi.map(i, j, k)));
        return p;
    }();

    double err_sum = 0.0, err_max = 0.0, naive_sum = 0.0, fa_diff = 0.0;
    long n = 0;
    for (int k = 0; k < m.dims[2]; ++k)
        for (int j = 0; j < m.dims[1]; ++j)
            for (int i = 0; i < m.dims[0]; ++i) {
                const Vec3 src = m.to_voxel(phi.map(i, j, k));
                if ((src.array() < 1.0).any() || (src.array() > (Vec3(m.dims[0], m.dims[1], m.dims[2]).array() - 2.0)).any())
                    continue;
                const Sym6 d = plain(i, j, k);
                if (fractional_anisotropy(d) < o.fa_min) continue;
                // pull-back: the template direction e maps to R^T e in the moving frame
                const Vec3 want = r.transpose() * eigen_decompose(d).vectors.col(0);
                const double e = angle_deg(want, eigen_decompose(warped(i, j, k)).vectors.col(0));
                const double naive = angle_deg(want, eigen_decompose(d).vectors.col(0));
                err_sum += e, naive_sum += naive, err_max = std::max(err_max, e);
                fa_diff = std::max(fa_diff, std::abs(fractional_anisotropy(warped(i, j, k)) - fractional_anisotropy(d)));
                ++n;
            }
    require(n > 0, "no interior voxel has FA >= " + std::to_string(o.fa_min));
    nlohmann::ordered_json j;
    j["axis"] = o.axis;
    j["angle_deg"] = o.angle;
    j["voxels"] = n;
    j["angular_error_deg"] = {{"reoriented_mean", err_sum / n}, {"reoriented_max", err_max},
                              {"not_reoriented_mean", naive_sum / n}};
    j["fa_max_abs_diff_reorientation"] = fa_diff;
    if (!o.report.empty()) write_json(j, o.report);
    std::cout << j.dump(2) << "\n";
    if (!o.out.empty()) write_volume(warped, o.out);
    return 0;
}

int cmd_metrics(const Options& o) {
    const DtiImage target = load_image(o.target_tensor, o.target_fa, o.target_masks);
    WarpedImage w;
    w.tensors = read_tensor(o.warped_tensor);
    w.fa = o.warped_fa.empty() ? fa_map(w.tensors) : read_scalar(o.warped_fa);
    if (!o.warped_masks.empty()) w.masks = read_labels(o.warped_masks);
    const DeformationField u = o.field.empty() ? DeformationField(target.meta()) : DeformationField::load(o.field);
    const ObjectiveReport rep = evaluate(target, w, u, o.lambda, o.gamma);
    std::cout << rep.to_json() << "\n" << ObjectiveReport::csv_header() << "\n" << rep.csv_row() << "\n";
    if (!o.report.empty()) {
        std::ofstream out(o.report);
        if (!out) fail(ErrorKind::IO, "cannot write " + o.report.string());
        out << rep.to_json() << "\n";
    }
    return 0;
}

int cmd_skeleton(const Options& o) {
    require(!o.mean.empty() || o.inputs.size() >= 2, "skeleton needs --mean or at least two --input files");
    make_dir(o.out_dir);
    Skeleton sk;
    if (!o.inputs.empty()) {
        std::vector<ScalarVolume> group;
        for (const auto& p : o.inputs) group.push_back(read_scalar(p));
        GroupSkeleton g = skeletonize_group(group, o.threshold, o.radius);
        write_volume(g.mean, o.out_dir / "mean_fa.nii");
        write_series(g.stack, o.out_dir / "skeletonised_stack.nii");
        sk = std::move(g.skeleton);
    } else {
        sk = skeletonize(read_scalar(o.mean), o.threshold);
    }
    write_volume(sk.mask, o.out_dir / "skeleton.nii");
    RawVolume perp{sk.mask.meta, VolumeKind::Vector, 3, {}, {}};
    for (const auto& n : sk.perpendicular) perp.data.insert(perp.data.end(), {n[0], n[1], n[2]});
    write_raw(perp, o.out_dir / "perpendicular.nii");
    std::cout << "skeleton voxels: " << sk.size() << "\n";
    return 0;
}

int cmd_augment(const Options& o) {
    require(o.seed >= 0, "augment needs --seed");
    make_dir(o.out_dir);
    const auto seed = static_cast<std::uint64_t>(o.seed);
    const PhantomKind kind = parse_phantom_kind(o.phantom);
    const Phantom ph = make_phantom(kind, {o.dims, o.dims, o.dims}, seed);
    // single generator for the affine draw and the field seed
    std::mt19937_64 rng(seed);
    AffineSampleSpec spec = o.identity ? AffineSampleSpec::degenerate() : AffineSampleSpec{};
    const AffineSample s = sample_affine_params(spec, ph.fa.meta, rng);
    DeformationField u;
    const bool deform = o.amplitude > 0.0;
    if (deform) u = smooth_random_field(ph.fa.meta, o.amplitude, o.wavelength, rng());
    const SyntheticPair p = make_pair(ph, s.transform, deform ? &u : nullptr);
    write_volume(p.target.fa, o.out_dir / "template_fa.nii");
    write_volume(p.target.tensors, o.out_dir / "template_tensor.nii");
    write_volume(*p.target.masks, o.out_dir / "template_masks.nii");
    write_volume(p.moving.fa, o.out_dir / "moving_fa.nii");
    write_volume(p.moving.tensors, o.out_dir / "moving_tensor.nii");
    write_volume(*p.moving.masks, o.out_dir / "moving_masks.nii");
    if (deform) p.field.save(o.out_dir / "truth_field.nii");
    write_sidecar(o.out_dir / "pair.json", p, kind, seed, &s);
    return 0;
}

int cmd_train(const Options& o) {
    PipelineConfig cfg = load_config(o.config);
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (o.threads > 0) cfg.threads = o.threads;
    if (!o.out.empty()) cfg.model_out = o.out;
    set_threads(cfg.threads);
    const auto pairs = synthetic_training_set(cfg);
    TrainConfig tc = cfg.train_config();
    tc.on_step = [](const std::string& stage, int step, double loss) {
        if (step % 10 == 0) std::cout << stage << " step " << step << " loss " << loss << "\n";
    };
    const TrainResult r = cfg.model.empty() ? train(pairs, tc) : train(LearnedModel::load(cfg.model), pairs, tc);
    r.model.save(cfg.model_out);
    std::cout << "model written to " << cfg.model_out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dtalign: diffusion tensor registration toolkit"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--threads", o.threads, "worker threads (0 = runtime default)")->check(CLI::NonNegativeNumber);

    auto* fit = app.add_subcommand("fit-tensor", "fit tensors to a diffusion-weighted series");
    fit->add_option("--dwi", o.dwi, "4-D series")->required();
    fit->add_option("--btable", o.btable, "text file, one 'bval gx gy gz' line per volume")->required();
    fit->add_option("--out", o.out, "tensor volume")->required();
    fit->add_option("--s0", o.s0_out, "optional S0 volume");

    auto* fa = app.add_subcommand("fa", "FA (and optionally MD) from a tensor volume");
    fa->add_option("--tensor", o.tensor)->required();
    fa->add_option("--out", o.out)->required();
    fa->add_option("--md", o.md_out);

    auto* reg = app.add_subcommand("register", "affine + deformable registration from a config file");
    reg->add_option("--config", o.config, "key=value file")->required();
    reg->add_option("--backend", o.backend)->check(CLI::IsMember({"learned", "instance"}));
    reg->add_option("--seed", o.seed)->check(CLI::NonNegativeNumber);
    reg->add_option("--output-dir", o.out_dir);

    auto* warp = app.add_subcommand("warp", "warp a volume through an affine and/or deformation field");
    warp->add_option("--input", o.input)->required();
    warp->add_option("--affine", o.affine, "12-real affine file");
    warp->add_option("--field", o.field, "displacement volume; the affine is applied after it");
    warp->add_option("--out", o.out)->required();

    auto* ro = app.add_subcommand("reorient-check", "rotate a tensor volume and report reorientation accuracy");
    ro->add_option("--tensor", o.tensor)->required();
    ro->add_option("--axis", o.axis)->check(CLI::Range(0, 2));
    ro->add_option("--angle-deg", o.angle);
    ro->add_option("--fa-min", o.fa_min, "voxels below this FA are ignored");
    ro->add_option("--report", o.report, "JSON report file");
    ro->add_option("--out", o.out, "rotated tensor volume");

    auto* met = app.add_subcommand("metrics", "evaluation metrics of a warped image against a target");
    met->add_option("--target-tensor", o.target_tensor)->required();
    met->add_option("--target-fa", o.target_fa);
    met->add_option("--target-masks", o.target_masks);
    met->add_option("--warped-tensor", o.warped_tensor)->required();
    met->add_option("--warped-fa", o.warped_fa);
    met->add_option("--warped-masks", o.warped_masks);
    met->add_option("--field", o.field, "residual displacement for the smoothness term");
    met->add_option("--lambda", o.lambda);
    met->add_option("--gamma", o.gamma);
    met->add_option("--report", o.report, "JSON report file");

    auto* sk = app.add_subcommand("skeleton", "FA skeleton, perpendiculars and projected stack");
    sk->add_option("--input", o.inputs, "aligned subject FA volumes (repeatable)");
    sk->add_option("--mean", o.mean, "precomputed mean FA");
    sk->add_option("--threshold", o.threshold)->check(CLI::Range(0.0, 1.0));
    sk->add_option("--radius", o.radius)->check(CLI::NonNegativeNumber);
    sk->add_option("--output-dir", o.out_dir)->required();

    auto* aug = app.add_subcommand("augment", "synthetic phantom pair with ground truth");
    aug->add_option("--phantom", o.phantom)->check(CLI::IsMember({"blob", "crossing-tubes", "layered"}));
    aug->add_option("--dims", o.dims)->check(CLI::Range(16, 512));
    aug->add_option("--seed", o.seed)->required()->check(CLI::NonNegativeNumber);
    aug->add_option("--deform-amplitude", o.amplitude, "mm; 0 disables the deformable component");
    aug->add_option("--wavelength", o.wavelength, "mm");
    aug->add_flag("--identity", o.identity, "no affine component");
    aug->add_option("--output-dir", o.out_dir)->required();

    auto* tr = app.add_subcommand("train", "train the learned backend on seeded synthetic pairs");
    tr->add_option("--config", o.config)->required();
    tr->add_option("--seed", o.seed)->check(CLI::NonNegativeNumber);
    tr->add_option("--out", o.out, "model file (overrides model_out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    set_threads(o.threads);

    try {
        if (*fit) return cmd_fit_tensor(o);
        if (*fa) return cmd_fa(o);
        if (*reg) return cmd_register(o);
        if (*warp) return cmd_warp(o);
        if (*ro) return cmd_reorient_check(o);
        if (*met) return cmd_metrics(o);
        if (*sk) return cmd_skeleton(o);
        if (*aug) return cmd_augment(o);
        if (*tr) return cmd_train(o);
    } catch (const Error& e) {
        std::cerr << "dtalign: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "dtalign: " << e.what() << "\n";
        return 3;
    }
    return 2;
}

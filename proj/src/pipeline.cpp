#include "dtalign/pipeline.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dtalign/augment.hpp"
#include "dtalign/dtensor.hpp"
#include "dtalign/nifti_io.hpp"

namespace dtalign {

Backend parse_backend(const std::string& s) {
    if (s == "instance") return Backend::Instance;
    if (s == "learned") return Backend::Learned;
    fail(ErrorKind::Validation, "unknown backend '" + s + "' (learned | instance)");
}

std::string to_string(Backend b) { return b == Backend::Learned ? "learned" : "instance"; }

InstanceConfig PipelineConfig::instance_config() const {
    InstanceConfig c;
    c.levels = levels;
    c.affine_iters = affine_iters;
    c.deform_iters = deform_iters;
    c.lambda_affine = lambda_affine;
    c.lambda_deform = lambda_deform;
    c.gamma = gamma;
    c.deformable = deformable;
    return c;
}

LearnedConfig PipelineConfig::learned_config() const {
    LearnedConfig c;
    c.recurrent.max_iters = recurrent_iters;
    c.lambda_deform = lambda_deform;
    c.gamma = gamma;
    c.deformable = deformable;
    return c;
}

TrainConfig PipelineConfig::train_config() const {
    TrainConfig c;
    c.affine_steps = train_affine_steps;
    c.deform_steps = train_deform_steps;
    c.learning_rate = learning_rate;
    c.lambda_affine = lambda_affine;
    c.lambda_deform = lambda_deform;
    c.gamma = gamma;
    c.seed = seed;
    return c;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
bool parse_number(const std::string& s, T& out) {
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end;
}

bool parse_bool(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "yes") return out = true, true;
    if (s == "false" || s == "0" || s == "no") return out = false, true;
    return false;
}

bool parse_int_list(const std::string& s, std::vector<int>& out) {
    std::vector<int> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        int x;
        if (!parse_number(trim(item), x)) return false;
        v.push_back(x);
    }
    if (v.empty()) return false;
    out = std::move(v);
    return true;
}

}  // namespace

ConfigResult parse_config(const std::string& text, const std::filesystem::path& base_dir) {
    ConfigResult r;
    PipelineConfig& c = r.config;
    auto path_of = [&](const std::string& v) {
        std::filesystem::path p(v);
        return (p.is_relative() && !base_dir.empty()) ? base_dir / p : p;
    };

    using Setter = std::function<std::string(const std::string&)>;  // returns an error or ""
    auto real = [](double& dst, bool nonneg) -> Setter {
        return [&dst, nonneg](const std::string& v) -> std::string {
            double x;
            if (!parse_number(v, x) || !std::isfinite(x)) return "not a real number";
            if (nonneg && x < 0.0) return "must be >= 0";
            dst = x;
            return "";
        };
    };
    auto integer = [](int& dst, int lo) -> Setter {
        return [&dst, lo](const std::string& v) -> std::string {
            int x;
            if (!parse_number(v, x)) return "not an integer";
            if (x < lo) return "must be >= " + std::to_string(lo);
            dst = x;
            return "";
        };
    };
    auto list = [](std::vector<int>& dst) -> Setter {
        return [&dst](const std::string& v) -> std::string {
            std::vector<int> x;
            if (!parse_int_list(v, x)) return "not a comma-separated integer list";
            for (int i : x)
                if (i < 0) return "entries must be >= 0";
            dst = x;
            return "";
        };
    };
    auto path = [&](std::filesystem::path& dst) -> Setter {
        return [&dst, path_of](const std::string& v) -> std::string {
            if (v.empty()) return "empty path";
            dst = path_of(v);
            return "";
        };
    };

    const std::map<std::string, Setter> keys{
        {"moving_tensor", path(c.moving_tensor)},
        {"moving_fa", path(c.moving_fa)},
        {"moving_masks", path(c.moving_masks)},
        {"target_tensor", path(c.target_tensor)},
        {"target_fa", path(c.target_fa)},
        {"target_masks", path(c.target_masks)},
        {"output_dir", path(c.output_dir)},
        {"model", path(c.model)},
        {"model_out", path(c.model_out)},
        {"backend",
         [&](const std::string& v) -> std::string {
             if (v != "learned" && v != "instance") return "must be learned or instance";
             c.backend = parse_backend(v);
             return "";
         }},
        {"lambda_affine", real(c.lambda_affine, true)},
        {"lambda_deform", real(c.lambda_deform, true)},
        {"gamma", real(c.gamma, true)},
        {"learning_rate", real(c.learning_rate, true)},
        {"levels", integer(c.levels, 1)},
        {"affine_iters", list(c.affine_iters)},
        {"deform_iters", list(c.deform_iters)},
        {"recurrent_iters", integer(c.recurrent_iters, 1)},
        {"deformable",
         [&](const std::string& v) -> std::string { return parse_bool(v, c.deformable) ? "" : "not a boolean"; }},
        {"seed",
         [&](const std::string& v) -> std::string {
             std::uint64_t x;
             if (!parse_number(v, x)) return "not a non-negative integer";
             c.seed = x;
             return "";
         }},
        {"threads", integer(c.threads, 0)},
        {"train_pairs", integer(c.train_pairs, 1)},
        {"train_affine_steps", integer(c.train_affine_steps, 0)},
        {"train_deform_steps", integer(c.train_deform_steps, 0)},
        {"train_grid", integer(c.train_grid, 16)},
        {"train_phantom",
         [&](const std::string& v) -> std::string {
             if (v != "blob" && v != "crossing-tubes" && v != "layered") return "unknown phantom kind";
             c.train_phantom = v;
             return "";
         }},
    };

    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = "line " + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) {
            r.errors.push_back(where + "expected key=value");
            continue;
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = keys.find(key);
        if (it == keys.end()) {
            r.errors.push_back(where + "unknown key '" + key + "'");
            continue;
        }
        if (const std::string err = it->second(value); !err.empty())
            r.errors.push_back(where + key + "=" + value + ": " + err);
    }
    if (static_cast<int>(c.affine_iters.size()) < c.levels)
        r.errors.push_back("affine_iters needs one entry per level");
    if (static_cast<int>(c.deform_iters.size()) < c.levels)
        r.errors.push_back("deform_iters needs one entry per level");
    return r;
}

void check_inputs(const PipelineConfig& c, std::vector<std::string>& errors) {
    for (const auto* p : {&c.moving_tensor, &c.moving_fa, &c.moving_masks, &c.target_tensor, &c.target_fa,
                          &c.target_masks})
        if (!p->empty() && !std::filesystem::exists(*p)) errors.push_back("missing file: " + p->string());
    if (c.backend == Backend::Learned && !c.model.empty() && !std::filesystem::exists(c.model))
        errors.push_back("missing file: " + c.model.string());
}

ConfigResult validate_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        ConfigResult r;
        r.errors.push_back("missing file: " + path.string());
        return r;
    }
    std::stringstream ss;
    ss << in.rdbuf();
    ConfigResult r = parse_config(ss.str(), path.parent_path());
    check_inputs(r.config, r.errors);
    return r;
}

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::Validation: return 2;
        case ErrorKind::IO:
        case ErrorKind::Format: return 3;
        case ErrorKind::Numerical: return 4;
    }
    return 4;
}

std::string fnv1a64_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorKind::IO, "cannot read " + p.string());
    std::uint64_t h = 14695981039346656037ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

nlohmann::ordered_json PipelineResult::manifest() const {
    nlohmann::ordered_json j;
    j["status"] = exit_code == 0 ? "ok" : "failed";
    j["exit_code"] = exit_code;
    if (!error.empty()) j["error"] = error;
    nlohmann::ordered_json arts = nlohmann::ordered_json::array();
    for (const auto& a : artifacts) arts.push_back({{"path", a.path}, {"kind", a.kind}, {"hash", a.hash}});
    j["artifacts"] = arts;
    if (report) j["metrics"] = nlohmann::ordered_json::parse(report->to_json());
    j["warp_interpolations"] = warp_interpolations;
    return j;
}

DtiImage load_image(const std::filesystem::path& tensor, const std::filesystem::path& fa,
                    const std::filesystem::path& masks) {
    require(!tensor.empty(), "a tensor volume path is required");
    DtiImage img;
    img.tensors = read_tensor(tensor);
    if (!fa.empty()) {
        img.fa = read_scalar(fa);
        require(img.fa.meta == img.tensors.meta, "FA and tensor grids differ: " + fa.string());
    } else {
        img.fa = fa_map(img.tensors);
    }
    if (!masks.empty()) img.masks = read_labels(masks);
    img.validate();
    return img;
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    PipelineResult res;
    std::string stage = "config";
    const auto& out = cfg.output_dir;
    auto record = [&](const std::string& name, const std::string& kind) {
        res.artifacts.push_back({name, kind, fnv1a64_file(out / name)});
    };
    try {
        std::vector<std::string> errors;
        check_inputs(cfg, errors);
        if (cfg.backend == Backend::Learned && cfg.model.empty()) errors.push_back("learned backend needs model=");
        if (!errors.empty()) {
            std::string msg;
            for (const auto& e : errors) msg += (msg.empty() ? "" : "; ") + e;
            fail(ErrorKind::Validation, msg);
        }
        stage = "io";
        std::error_code ec;
        std::filesystem::create_directories(out, ec);
        if (ec) fail(ErrorKind::IO, "cannot create output directory " + out.string());
        const DtiImage moving = load_image(cfg.moving_tensor, cfg.moving_fa, cfg.moving_masks);
        const DtiImage target = load_image(cfg.target_tensor, cfg.target_fa, cfg.target_masks);

        stage = "register";
        RegistrationResult reg;
        if (cfg.backend == Backend::Learned)
            reg = register_learned(LearnedModel::load(cfg.model), moving, target, cfg.learned_config());
        else
            reg = register_instance(moving, target, cfg.instance_config());

        stage = "warp";
        const long before = interpolation_counter().load();
        const WarpedImage warped = apply_field(moving, reg.composed);
        res.warp_interpolations = interpolation_counter().load() - before;

        stage = "metrics";
        res.report = evaluate(target, warped, reg.deform, cfg.lambda_deform, cfg.gamma);

        stage = "write";
        reg.affine.save(out / "affine.txt");
        record("affine.txt", "affine");
        reg.deform.save(out / "deform_field.nii");
        record("deform_field.nii", "field");
        reg.composed.save(out / "composed_field.nii");
        record("composed_field.nii", "field");
        write_volume(warped.fa, out / "warped_fa.nii");
        record("warped_fa.nii", "scalar");
        write_volume(warped.tensors, out / "warped_tensor.nii");
        record("warped_tensor.nii", "tensor");
        if (warped.masks) {
            write_volume(*warped.masks, out / "warped_masks.nii");
            record("warped_masks.nii", "labels");
        }
        {
            std::ofstream m(out / "metrics.json");
            if (!m) fail(ErrorKind::IO, "cannot write metrics.json");
            nlohmann::ordered_json j = nlohmann::ordered_json::parse(res.report->to_json());
            nlohmann::ordered_json trace = reg.inference_trace;
            j["inference_trace"] = trace;
            j["loss_identity"] = reg.identity_loss;
            j["loss_affine"] = reg.affine_loss;
            j["loss_final"] = reg.deform_loss;
            m << j.dump(2) << "\n";
        }
        record("metrics.json", "metrics");
    } catch (const Error& e) {
        res.exit_code = exit_code_for(e);
        res.error = "[" + stage + "] " + e.what();
    } catch (const std::exception& e) {
        res.exit_code = 3;
        res.error = "[" + stage + "] " + e.what();
    }
    try {
        std::filesystem::create_directories(out);
        std::ofstream m(out / "manifest.json");
        m << res.manifest().dump(2) << "\n";
    } catch (const std::exception&) {
        // manifest is best effort when the output directory itself failed
    }
    return res;
}

std::vector<TrainingPair> synthetic_training_set(const PipelineConfig& cfg) {
    const int n = cfg.train_grid;
    const Phantom ph = make_phantom(parse_phantom_kind(cfg.train_phantom), {n, n, n}, cfg.seed);
    std::mt19937_64 rng(cfg.seed);
    AffineSampleSpec spec;
    std::vector<TrainingPair> pairs;
    for (int i = 0; i < cfg.train_pairs; ++i) {
        const SyntheticPair p = make_pair(ph, sample_affine(spec, ph.fa.meta, rng));
        pairs.push_back({p.moving, p.target});
    }
    return pairs;
}

}  // namespace dtalign

#pragma once

// Flat key=value configuration and the end-to-end registration driver.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtalign/error.hpp"
#include "dtalign/regnet.hpp"

namespace dtalign {

enum class Backend { Instance, Learned };
Backend parse_backend(const std::string& s);
std::string to_string(Backend b);

struct PipelineConfig {
    // inputs; FA is derived from the tensors when no FA path is given
    std::filesystem::path moving_tensor, moving_fa, moving_masks;
    std::filesystem::path target_tensor, target_fa, target_masks;
    std::filesystem::path output_dir = "dtalign_out";
    std::filesystem::path model;  // learned backend weights

    Backend backend = Backend::Instance;
    double lambda_affine = 10.0;
    double lambda_deform = 100.0;
    double gamma = 100.0;
    double learning_rate = 1e-4;
    int levels = 3;
    std::vector<int> affine_iters{200, 100, 50};
    std::vector<int> deform_iters{200, 100, 50};
    int recurrent_iters = 5;
    bool deformable = true;
    std::uint64_t seed = 0;
    int threads = 0;  // 0 keeps the runtime default

    // synthetic training run
    int train_pairs = 8;
    int train_affine_steps = 200;
    int train_deform_steps = 50;
    int train_grid = 32;
    std::string train_phantom = "blob";
    std::filesystem::path model_out = "model.json";

    InstanceConfig instance_config() const;
    LearnedConfig learned_config() const;
    TrainConfig train_config() const;
};

struct ConfigResult {
    PipelineConfig config;
    std::vector<std::string> errors;

    bool ok() const { return errors.empty(); }
};

/// Parses key=value lines (# comments, blank lines allowed); relative paths
/// resolve against base_dir. Errors accumulate instead of throwing.
ConfigResult parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
/// parse_config on a file, plus existence checks of referenced inputs.
ConfigResult validate_config(const std::filesystem::path& path);
/// Existence checks alone, appended to `errors`.
void check_inputs(const PipelineConfig& cfg, std::vector<std::string>& errors);

struct Artifact {
    std::string path;  // relative to the output directory
    std::string kind;
    std::string hash;  // fnv1a64 of the file bytes
};

struct PipelineResult {
    int exit_code = 0;
    std::string error;  // "[stage] message" on failure
    std::vector<Artifact> artifacts;
    std::optional<ObjectiveReport> report;
    long warp_interpolations = 0;  // interpolations performed by the final warp stage

    nlohmann::ordered_json manifest() const;
};

/// Exit codes: 0 ok, 2 configuration, 3 IO / format, 4 numerical.
int exit_code_for(const Error& e);

std::string fnv1a64_file(const std::filesystem::path& p);

DtiImage load_image(const std::filesystem::path& tensor, const std::filesystem::path& fa,
                    const std::filesystem::path& masks);

/// fit is external; register -> warp once -> metrics; writes manifest.json.
PipelineResult run_pipeline(const PipelineConfig& cfg);

/// Seeded synthetic training pairs: a phantom template and affinely
/// augmented copies within the training ranges.
std::vector<TrainingPair> synthetic_training_set(const PipelineConfig& cfg);

}  // namespace dtalign

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoverse/baselines.hpp"
#include "protoverse/datagen.hpp"
#include "protoverse/training.hpp"

namespace protoverse {

struct DataConfig {
    SyntheticConfig synthetic;
    std::string dir;  // existing dataset directory with manifest.json; empty means generate
    std::array<double, 3> split{0.8, 0.1, 0.1};
};

struct ExplainConfig {
    int k = 3;
    double mass_fraction = 0.98;
};

struct CamConfig {
    std::vector<CamVariant> methods{CamVariant::gradcam, CamVariant::gradcam_pp, CamVariant::xgradcam};
    std::optional<int> target_layer;
};

struct AblationGrid {
    std::vector<int> num_prototypes{2, 3, 4, 5};
    std::vector<double> lambda_div{0.1, 0.3, 0.5};
    std::vector<WeightingStrategy> weighting{WeightingStrategy::uniform, WeightingStrategy::ins,
                                             WeightingStrategy::isns, WeightingStrategy::median_frequency,
                                             WeightingStrategy::literal_eq3};
};

struct EvalConfig {
    int folds = 5;
    std::vector<std::string> variants{"protoverse", "baseline"};
    double val_fraction = 0.1;  // carved from each training fold for checkpoint selection
    AblationGrid ablation;
};

/// Everything one CLI invocation needs. All randomness derives from `seed`.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs";
    DataConfig data;
    TrainConfig train;
    ExplainConfig explain;
    CamConfig cam;
    EvalConfig eval;
};

/// The fully defaulted configuration document.
nlohmann::json default_config_json();

/// Checks keys and types against the schema, fills defaults and applies semantic checks.
/// Throws ConfigError whose path names the offending key.
nlohmann::json normalize_config(const nlohmann::json& user);

ExperimentConfig config_from_json(const nlohmann::json& user);
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Reads, normalises and converts a config file. A missing file is a ConfigError at "".
ExperimentConfig load_config(const std::filesystem::path& path);

/// Derived seeds for the independent random streams of an experiment.
std::uint64_t data_seed(const ExperimentConfig& c);
std::uint64_t split_seed(const ExperimentConfig& c);

}  // namespace protoverse

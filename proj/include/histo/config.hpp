#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "histo/training.hpp"

namespace histo::config {

using json = nlohmann::json;

struct DatasetSection {
    /// BreaKHis root; empty selects the synthetic fixture.
    std::string root;
    int synthetic_n_per_class = 10;
    std::vector<int> synthetic_magnifications{40, 100, 200, 400};
    std::uint64_t synthetic_seed = 7;
    double test_fraction = 0.2;
    std::uint64_t seed = 42;
    bool patient_disjoint = false;
};

struct EvalSection {
    std::string protocol = "type3";
    int mc_passes = 20;
    double triage_threshold = 0.8;
    int type2_train_magnification = 100;
    std::vector<int> type2_test_magnifications{40, 200, 400};
    std::uint64_t seed = 0;
};

struct ExplainSection {
    int n_per_cell = 10;
    double confidence_threshold = 0.7;
    int patch_size = 32;
    int stride = 16;
    double baseline = 0.0;
    /// Coverage threshold as a fraction of each map's peak.
    double coverage_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct OutputSection {
    std::string run_dir = "runs/desk";
};

struct ExperimentConfig {
    DatasetSection dataset;
    training::TrainConfig train;  // carries the model and loss sections
    EvalSection eval;
    ExplainSection explain;
    OutputSection output;

    void validate() const;
};

json to_json(const ModelConfig& m);
json to_json(const losses::LossWeights& l);
/// Train section only (model and loss are separate sections).
json train_section_to_json(const training::TrainConfig& t);
json to_json(const ExperimentConfig& c);

/// Full TrainConfig snapshot, as stored in checkpoints.
json train_config_snapshot(const training::TrainConfig& t);
training::TrainConfig train_config_from_snapshot(const json& j);

/// Strict parse: missing keys take defaults, unknown keys throw UserError.
ExperimentConfig parse_experiment(const json& j);
ExperimentConfig load_experiment(const fs::path& path);
std::string serialize(const ExperimentConfig& c);

/// Applies "section.key=value" overrides; values are parsed as JSON when
/// possible and taken as strings otherwise.
json apply_overrides(json j, const std::vector<std::string>& overrides);

}  // namespace histo::config

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "histo/config.hpp"
#include "histo/evaluation.hpp"

namespace histo::cli {

/// Relative run directories are placed under this variable when it is set.
inline constexpr const char* kRunRootEnv = "HISTO_RUN_ROOT";

struct RunPaths {
    fs::path root;

    fs::path manifests() const { return root / "manifests"; }
    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path reports() const { return root / "reports"; }
    fs::path figures() const { return root / "figures"; }
    fs::path logs() const { return root / "logs"; }

    fs::path plan() const { return manifests() / "plan.json"; }
    fs::path stage_manifest(const std::string& stage) const { return manifests() / (stage + ".tsv"); }
    fs::path folds_manifest(const std::string& key) const { return manifests() / (key + "_folds.tsv"); }
    fs::path stats(const std::string& key) const { return manifests() / (key + "_stats.json"); }
    fs::path checkpoint(const std::string& key) const { return checkpoints() / (key + ".ckpt"); }
    fs::path train_state(const std::string& key) const { return checkpoints() / (key + "_state"); }
    fs::path train_log(const std::string& key) const { return logs() / (key + "_train.jsonl"); }
    fs::path report(const std::string& stage) const { return reports() / (stage + ".json"); }
    fs::path samples(const std::string& stage) const { return reports() / (stage + "_samples.tsv"); }
    fs::path embeddings(const std::string& stage) const { return reports() / (stage + "_embeddings.tsv"); }
    fs::path xai_records(const std::string& stage) const { return reports() / (stage + "_xai_records.tsv"); }
    fs::path xai_summary(const std::string& stage) const { return reports() / (stage + "_xai_summary.tsv"); }
};

RunPaths resolve_run_paths(const config::ExperimentConfig& config);

/// Single-writer guard: creates <dir>/.lock exclusively and removes it on
/// destruction. Throws UserError when the directory is already locked.
class RunLock {
  public:
    explicit RunLock(const fs::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    fs::path path_;
};

/// Reads the config file (defaults when absent) and applies overrides.
config::ExperimentConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides);

/// A stage as recorded in manifests/plan.json.
struct PlannedStage {
    std::string name;
    std::string train_key;
    std::vector<int> train_magnifications;
    std::vector<int> test_magnifications;
};

std::vector<PlannedStage> read_plan(const RunPaths& paths);

/// Train and test indices of a stage, read back from its manifest.
evaluation::ProtocolStage read_stage(const RunPaths& paths, const PlannedStage& stage);

/// Per-superclass × magnification image counts.
std::string count_summary(const dataset::DatasetIndex& index);

void cmd_prepare(const config::ExperimentConfig& config, std::ostream& out);
void cmd_train(const config::ExperimentConfig& config, bool resume, std::ostream& out);
void cmd_eval(const config::ExperimentConfig& config, const std::optional<fs::path>& checkpoint, std::ostream& out);
void cmd_explain(const config::ExperimentConfig& config, const std::optional<fs::path>& checkpoint, std::ostream& out);
void cmd_plot(const config::ExperimentConfig& config, std::ostream& out);

/// Figure files written by cmd_plot for one stage.
std::vector<fs::path> figure_paths(const RunPaths& paths, const std::string& stage);

/// Full command-line entry point; returns the process exit code
/// (0 success, 1 user error, 2 internal error or divergence).
int run(int argc, char** argv);

}  // namespace histo::cli

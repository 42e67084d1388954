#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "histo/metrics.hpp"
#include "histo/training.hpp"

namespace histo::evaluation {

enum class Protocol { type1, type2, type3 };
Protocol parse_protocol(const std::string& name);
std::string to_string(Protocol p);

struct ProtocolOptions {
    double test_fraction = 0.2;
    std::uint64_t seed = 42;
    bool patient_disjoint = false;
    int type2_train_magnification = 100;
    std::vector<int> type2_test_magnifications{40, 200, 400};
};

/// One train/test pairing of a protocol. Stages sharing a `train_key` share
/// one trained model (Type 2 trains once and tests at several magnifications).
struct ProtocolStage {
    std::string name;
    std::string train_key;
    std::vector<int> train_magnifications;
    std::vector<int> test_magnifications;
    dataset::DatasetIndex train;
    dataset::DatasetIndex test;
};

/// type1: one stage per magnification present, each split on its own;
/// type2: train on the train-split samples at the training magnification and
/// test on every sample of each other requested magnification;
/// type3: a single mixed-magnification stratified split.
/// Throws UserError when a requested magnification is absent, or when Type 2
/// is asked to test on its training magnification.
std::vector<ProtocolStage> plan_protocol(Protocol protocol, const dataset::DatasetIndex& index,
                                         const ProtocolOptions& options);

struct SampleRecord {
    std::string id;
    int label = 0;
    int prediction = 0;
    int magnification = 0;
    double confidence = 0.0;
    double uncertainty = 0.0;
    bool flagged = false;
};

struct EvalReport {
    std::string protocol;
    std::string stage;
    std::vector<int> train_magnifications;
    std::vector<int> test_magnifications;
    ClassificationMetrics metrics;
    double avg_uncertainty = 0.0;
    double avg_confidence = 0.0;
    std::optional<double> correct_confidence;
    std::optional<double> wrong_confidence;
    std::size_t n_flagged = 0;
    int mc_passes = 0;
    double triage_threshold = 0.0;
    std::uint64_t seed = 0;
    std::string config_digest;
    std::string checkpoint_digest;
    std::string per_sample_table;
};

struct EvalResult {
    EvalReport report;
    std::vector<SampleRecord> samples;
    torch::Tensor mean_probs;
};

struct EvalOptions {
    int mc_passes = 20;
    double triage_threshold = 0.8;
    std::uint64_t seed = 0;
    int64_t chunk = 64;
};

/// MC-dropout ensemble inference over `rows` of `data`, then metrics,
/// calibration and triage flags.
EvalResult evaluate(training::Ensemble& ensemble, const training::LoadedDataset& data, const torch::Tensor& rows,
                    const EvalOptions& options);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Tab-separated: id, label, prediction, magnification, confidence,
/// uncertainty, flag.
std::string format_sample_table(const std::vector<SampleRecord>& records);
std::vector<SampleRecord> parse_sample_table(std::string_view text);

struct EmbeddingRow {
    std::string id;
    int label = 0;
    int magnification = 0;
    std::vector<float> vector;
};

/// f_global of every row, dropout off.
std::vector<EmbeddingRow> export_embeddings(HistoNet& model, const training::LoadedDataset& data,
                                            const torch::Tensor& rows, int64_t chunk = 64);
std::string format_embeddings(const std::vector<EmbeddingRow>& rows);
std::vector<EmbeddingRow> parse_embeddings(std::string_view text);

}  // namespace histo::evaluation

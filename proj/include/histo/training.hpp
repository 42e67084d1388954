#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "histo/dataset.hpp"
#include "histo/losses.hpp"
#include "histo/metrics.hpp"
#include "histo/model.hpp"
#include "histo/uncertainty.hpp"

namespace histo::training {

/// Ablation variants: A1 single best fold, A2 plain cross-entropy,
/// A3 no attention, A4 no prototypes.
enum class Ablation { full, A1, A2, A3, A4 };
Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);

struct TrainConfig {
    ModelConfig model;
    losses::LossWeights loss;
    int epochs = 15;
    int batch_size = 32;
    double learning_rate = 1e-4;
    double backbone_learning_rate = 1e-5;
    double weight_decay = 1e-4;
    int patience = 10;
    int folds = 5;
    std::uint64_t seed = 42;
    Ablation ablation = Ablation::full;
    /// Within-superclass mass of the relation matrix (1 = plain block averaging).
    double relation_w_same = 1.0;

    void validate() const;
};

/// Returns the config with the ablation preset's overrides applied.
TrainConfig apply_ablation(TrainConfig config);

/// A dataset with its images and labels resident in memory, rows aligned
/// with `index.samples`.
struct LoadedDataset {
    dataset::DatasetIndex index;
    dataset::NormalizationStats stats;
    torch::Tensor images;             // N×3×224×224, normalized
    torch::Tensor labels;             // N, int64
    torch::Tensor magnification_rank; // N, int64
    std::unordered_map<std::string, int64_t> row_of;

    int64_t size() const { return static_cast<int64_t>(index.size()); }
    /// Row indices of the given samples (by id).
    torch::Tensor rows(const dataset::DatasetIndex& subset) const;
};

LoadedDataset load_dataset(const dataset::DatasetIndex& index, const dataset::NormalizationStats& stats,
                           const dataset::ImageLoader& loader = dataset::load_raw);

/// Raw backbone maps of every row of a LoadedDataset under each
/// morphology transform, computed once per transform on first use. Valid
/// for any model whose frozen extractors carry the same weights and
/// normalization statistics (checked through a fingerprint).
class FeatureCache {
  public:
    FeatureCache(HistoNet model, const LoadedDataset& data, int64_t chunk = 32);

    const std::vector<torch::Tensor>& maps(losses::Transform t);
    std::vector<torch::Tensor> maps(losses::Transform t, const torch::Tensor& rows);
    bool compatible_with(HistoNet& model) const;
    HistoNet model() const { return model_; }

  private:
    HistoNet model_;
    const LoadedDataset* data_;
    int64_t chunk_;
    double fingerprint_;
    std::map<int, std::vector<torch::Tensor>> maps_;
};

double backbone_fingerprint(HistoNet& model);

struct EpochRecord {
    int fold = 0;
    int epoch = 0;
    std::array<double, losses::kNumComponents> components{};
    double total = 0.0;
    double val_accuracy = 0.0;
    double val_f1 = 0.0;
    double val_loss = 0.0;
};

/// Appends one JSON record per line.
class MetricsLog {
  public:
    explicit MetricsLog(fs::path path) : path_(std::move(path)) {}
    void append(const EpochRecord& record, const std::string& stage = "") const;
    const fs::path& path() const { return path_; }

  private:
    fs::path path_;
};

struct FoldOptions {
    int fold = 0;
    FeatureCache* cache = nullptr;
    const MetricsLog* log = nullptr;
    std::string stage;
    /// When set, per-epoch resumable state is written here and, if the
    /// file already exists, training continues from its recorded epoch.
    std::optional<fs::path> state_path;
};

struct FoldResult {
    HistoNet model{nullptr};
    evaluation::ClassificationMetrics val_metrics;
    int best_epoch = -1;
    int epochs_run = 0;
    std::vector<EpochRecord> history;
};

/// Seeds: backbone weights come from `backbone_seed` so that every fold of a
/// run shares one frozen extractor; the trainable parts use `seed`.
HistoNet build_fold_model(const ModelConfig& config, std::uint64_t backbone_seed, std::uint64_t seed);
/// Same, copying the extractors (weights and normalization statistics) of `reference`.
HistoNet build_fold_model(const ModelConfig& config, HistoNet& reference, std::uint64_t seed);

/// The shared extractor for a run. Random frozen extractors get their
/// BatchNorm statistics re-estimated on `data`; pretrained or trainable
/// ones are left as built.
HistoNet build_reference_model(const ModelConfig& config, std::uint64_t backbone_seed, const LoadedDataset& data);

/// Trains one model on `train_rows` of `data`, selecting the epoch with the
/// best validation weighted-F1 (lower validation cross-entropy breaks ties). Throws DivergenceError naming the first
/// non-finite loss component.
FoldResult train_fold(HistoNet model, const LoadedDataset& data, const torch::Tensor& train_rows,
                      const torch::Tensor& val_rows, const TrainConfig& config, const FoldOptions& options = {});

/// Loss components of one batch (exposed for gradient checks and logging).
losses::LossComponents compute_components(HistoNet& model, const std::vector<torch::Tensor>& raw_maps,
                                          const std::vector<torch::Tensor>& transformed_maps,
                                          const torch::Tensor& labels, const torch::Tensor& relation,
                                          const TrainConfig& config, const experts::DropoutContext& ctx,
                                          const std::optional<torch::Tensor>& magnification_rank = {});

struct Member {
    HistoNet model{nullptr};
    int fold = 0;
    double val_f1 = 0.0;
    int best_epoch = -1;
};

struct Ensemble {
    std::vector<Member> members;
    std::vector<double> weights;  // on the simplex
    /// Members share one frozen extractor, so raw maps can be computed once.
    bool shared_backbone = false;
};

/// Normalizes validation F1 scores to the simplex; all-zero scores give
/// uniform weights.
std::vector<double> member_weights_from_f1(const std::vector<double>& f1);

/// Keeps only the member with the highest validation F1 (first on ties).
Ensemble select_best_fold(const Ensemble& ensemble);

struct EnsembleOptions {
    FeatureCache* cache = nullptr;
    const MetricsLog* log = nullptr;
    std::string stage;
    std::optional<fs::path> state_dir;
    std::uint64_t backbone_seed = 42;
};

/// Stratified k-fold training; with the A1 preset the result is reduced to
/// the best fold.
Ensemble train_ensemble(const LoadedDataset& data, const dataset::DatasetIndex& train_index,
                        const TrainConfig& config, const EnsembleOptions& options = {});

/// Probability-level aggregation: member MC means combined by the member
/// weights; uncertainty is the weighted mean member uncertainty plus the
/// weighted inter-member variance of the mean probabilities (averaged over
/// classes).
uncertainty::Summary ensemble_predict_maps(Ensemble& ensemble, const std::vector<torch::Tensor>& raw_maps,
                                           int passes, std::uint64_t seed,
                                           const std::optional<torch::Tensor>& magnification_rank = {});
uncertainty::Summary ensemble_predict(Ensemble& ensemble, const torch::Tensor& images, int passes,
                                      std::uint64_t seed);
/// Combines per-member summaries (exposed for tests).
uncertainty::Summary combine_member_summaries(const std::vector<uncertainty::Summary>& members,
                                              const std::vector<double>& weights);

/// Deterministic (dropout off) weighted probabilities; extracts once when the
/// backbone is shared.
torch::Tensor ensemble_proba(Ensemble& ensemble, const torch::Tensor& images);

/// Single-file checkpoint: every member's weights (extractors, attention,
/// heads, gate, prototypes), the config snapshot, backbone registry order
/// and fold metadata.
void save_ensemble(Ensemble& ensemble, const TrainConfig& config, const fs::path& path,
                   const std::string& extra_metadata_json = "{}");
Ensemble load_ensemble(const fs::path& path, TrainConfig* config_out = nullptr,
                       std::string* metadata_out = nullptr);

}  // namespace histo::training

#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "histo/common.hpp"

namespace histo::dataset {

inline constexpr int kNumSubtypes = 8;
inline constexpr int64_t kImageSize = 224;
inline constexpr std::array<int, 4> kMagnifications{40, 100, 200, 400};

enum class Superclass { benign, malignant };

/// BreaKHis folder names, benign subtypes first (indices 0-3), then malignant (4-7).
const std::array<std::string, kNumSubtypes>& subtype_names();
Superclass superclass_of(int subtype);
std::string_view to_string(Superclass s);
/// Subtype index → superclass index (0 benign, 1 malignant); the taxonomy
/// consumed by the relation matrix.
std::vector<int> subtype_taxonomy();

/// "<subtype_index>_<magnification>"
std::string stratum_key(int subtype, int magnification);

struct SampleDescriptor {
    std::string id;
    /// File path for real images, "synthetic://..." for generated ones.
    std::string path;
    /// Present for generated samples; drives the texture renderer.
    std::optional<std::uint64_t> synthetic_seed;
    int subtype = 0;
    int magnification = 0;
    std::string patient_id;

    Superclass superclass() const { return superclass_of(subtype); }
    std::string stratum() const { return stratum_key(subtype, magnification); }
    bool operator==(const SampleDescriptor&) const = default;
};

struct NormalizationStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};

    /// Throws UserError if any σ is not strictly positive.
    void validate() const;
};

struct DatasetIndex {
    std::vector<SampleDescriptor> samples;
    std::optional<NormalizationStats> stats;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    /// Sample count per stratum key.
    std::map<std::string, int> stratum_counts() const;
    /// Keeps samples for which the predicate holds; stats are carried over.
    DatasetIndex filter(const std::function<bool(const SampleDescriptor&)>& keep) const;
};

/// A preprocessed sample: pixels are 3×224×224, z-scored.
struct ImageSample {
    torch::Tensor pixels;
    int subtype = 0;
    Superclass superclass = Superclass::benign;
    int magnification = 0;
    std::string patient_id;
    std::string stratum_key;
};

struct ScanStats {
    int skipped_folders = 0;
    int images = 0;
};

/// Walks a BreaKHis tree: <root>/{benign,malignant}/<method>/<subtype>/<patient>/<mag>X/*.png.
/// `root` may also be a parent containing a "breast" directory.
DatasetIndex scan_breakhis(const fs::path& root, ScanStats* stats = nullptr);

using ImageLoader = std::function<torch::Tensor(const SampleDescriptor&)>;

/// Loads the raw RGB image (3×H×W, values in [0,1]) for a descriptor,
/// rendering synthetic samples on the fly.
torch::Tensor load_raw(const SampleDescriptor& sample);

/// Bilinear, antialiased resize of a 3×H×W image to 3×224×224.
torch::Tensor resize_to_model(const torch::Tensor& raw);

/// Per-channel population mean/std over the resized training images.
NormalizationStats compute_normalization_stats(const DatasetIndex& train,
                                               const ImageLoader& loader = load_raw);

/// Resize then z-score: (resized − μ) / σ per channel.
torch::Tensor normalize(const torch::Tensor& raw, const NormalizationStats& stats);
/// Inverse of normalize on an already-resized tensor.
torch::Tensor denormalize(const torch::Tensor& normalized, const NormalizationStats& stats);

ImageSample preprocess(const SampleDescriptor& sample, const torch::Tensor& raw,
                       const NormalizationStats& stats);

/// Loads and preprocesses every sample into an N×3×224×224 tensor.
torch::Tensor load_batch(const DatasetIndex& index, const NormalizationStats& stats,
                         const ImageLoader& loader = load_raw);

struct Split {
    DatasetIndex train;
    DatasetIndex test;
};

struct SplitOptions {
    double test_fraction = 0.2;
    std::uint64_t seed = 0;
    /// Keeps every patient on one side of the split. Stricter than the
    /// image-level default.
    bool patient_disjoint = false;
};

/// Stratified on stratum key. The global test count is round(f·N); each
/// stratum gets floor(f·n_s) plus one of the leftover slots by largest
/// remainder, so every stratum is within one sample of f·n_s.
Split stratified_split(const DatasetIndex& index, const SplitOptions& options);

struct Fold {
    DatasetIndex train;
    DatasetIndex val;
};

std::vector<Fold> kfold_split(const DatasetIndex& train, int k, std::uint64_t seed);

/// Texture parameters of a synthetic class at a magnification. Exposed so
/// tests can read back what the generator used.
struct TextureParams {
    double orientation_deg = 0.0;
    double period_px = 10.0;
    int blob_count = 0;
    double blob_radius_px = 3.0;
    double scale = 1.0;
};
TextureParams synthetic_texture_params(int subtype, int magnification);

DatasetIndex generate_synthetic_dataset(int n_per_class, const std::vector<int>& magnifications,
                                        std::uint64_t seed);
torch::Tensor render_synthetic(const SampleDescriptor& sample);

/// Line-oriented manifest: one tab-separated record per sample
/// (id, path, subtype, magnification, stratum, role, patient, seed).
struct ManifestRecord {
    SampleDescriptor sample;
    std::string role;
};
std::string format_manifest(const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> parse_manifest(std::string_view text);

}  // namespace histo::dataset

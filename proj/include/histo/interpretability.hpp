#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "histo/common.hpp"

namespace histo::interpretability {

/// N×3×H×W images → N×C probabilities, deterministic.
using ProbabilityFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct OcclusionOptions {
    int64_t patch_size = 32;
    int64_t stride = 16;
    /// Fill value of the occluded window (0 is the training mean after z-scoring).
    double baseline = 0.0;
    /// Occluded copies evaluated per call of the probability function.
    int64_t batch = 32;
};

/// Coverage threshold: `relative` multiplies the map's peak, `absolute`
/// is used as is. Cells at or above the threshold count as covered; a
/// relative threshold on an all-zero map covers nothing.
struct CoverageThreshold {
    enum class Mode { relative, absolute };
    Mode mode = Mode::relative;
    double value = 0.2;

    static CoverageThreshold relative(double fraction) { return {Mode::relative, fraction}; }
    static CoverageThreshold absolute(double theta) { return {Mode::absolute, theta}; }
};

struct OcclusionMetrics {
    double s_max = 0.0;
    double mean_sensitivity = 0.0;
    double coverage_pct = 0.0;
};

OcclusionMetrics occlusion_metrics(const torch::Tensor& map, const CoverageThreshold& threshold);

struct OcclusionResult {
    torch::Tensor map;  // rows×cols, float64, one cell per window position
    int64_t predicted = 0;
    double base_confidence = 0.0;
    OcclusionMetrics metrics;
};

/// Slides a patch over the image (3×H×W); each cell holds
/// max(0, p_base(ŷ) − p_occluded(ŷ)) for the unoccluded prediction ŷ.
/// Window origins are 0, stride, 2·stride, ... while the patch fits.
OcclusionResult occlusion_map(const ProbabilityFn& model, const torch::Tensor& image, const OcclusionOptions& options,
                              const CoverageThreshold& threshold = {});

/// Eligible sample for cohort selection.
struct CohortCandidate {
    std::string id;
    int label = 0;
    int magnification = 0;
    double confidence = 0.0;
};

/// Picks up to n_per_cell samples with confidence > threshold from each
/// (class, magnification) cell of `classes` × `magnifications`, by seeded
/// shuffle. Short cells contribute what they have and raise a warning.
std::vector<CohortCandidate> select_xai_cohort(const std::vector<CohortCandidate>& candidates, int n_per_cell,
                                               double confidence_threshold, std::uint64_t seed,
                                               const std::vector<int>& classes,
                                               const std::vector<int>& magnifications);

struct XaiRecord {
    std::string id;
    int label = 0;
    int magnification = 0;
    double confidence = 0.0;
    OcclusionMetrics metrics;
};

struct XaiCell {
    int count = 0;
    /// Mean of per-sample mean sensitivities and max of per-sample peaks;
    /// absent when the cell has no samples.
    std::optional<double> mean;
    std::optional<double> max;
};

/// Key: (class, magnification).
using XaiSummary = std::map<std::pair<int, int>, XaiCell>;

XaiSummary summarize_xai(const std::vector<XaiRecord>& records, const std::vector<int>& classes,
                         const std::vector<int>& magnifications);

std::string format_xai_records(const std::vector<XaiRecord>& records);
std::vector<XaiRecord> parse_xai_records(std::string_view text);
/// Tab-separated class × magnification table; absent cells print as "-".
std::string format_xai_summary(const XaiSummary& summary, const std::vector<std::string>& class_names);

/// Blends a jet-coloured, bilinearly upsampled map over an RGB image in [0,1]
/// (3×H×W) and returns H×W×3 uint8.
torch::Tensor heatmap_overlay(const torch::Tensor& rgb, const torch::Tensor& map, double alpha = 0.45);

}  // namespace histo::interpretability

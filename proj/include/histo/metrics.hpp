#pragma once

#include <cstdint>
#include <vector>

namespace histo::evaluation {

struct ClassificationMetrics {
    std::int64_t n = 0;
    double accuracy = 0.0;
    double weighted_precision = 0.0;
    double weighted_recall = 0.0;
    double weighted_f1 = 0.0;
    /// confusion[true][predicted]
    std::vector<std::vector<std::int64_t>> confusion;
    std::vector<double> precision, recall, f1;
    std::vector<std::int64_t> support;
    /// Classes present in the labels that were never predicted; their
    /// precision is reported as 0.
    std::vector<bool> zero_predicted;
    bool any_zero_predicted = false;
};

/// Accuracy, support-weighted precision/recall/F1 and the confusion matrix.
/// Throws UserError on empty input or labels/predictions out of range.
ClassificationMetrics compute_metrics(const std::vector<std::int64_t>& predictions,
                                      const std::vector<std::int64_t>& labels, int num_classes);

}  // namespace histo::evaluation

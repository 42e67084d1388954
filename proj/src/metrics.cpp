#include "histo/metrics.hpp"

#include "histo/common.hpp"

namespace histo::evaluation {

ClassificationMetrics compute_metrics(const std::vector<std::int64_t>& predictions,
                                      const std::vector<std::int64_t>& labels, int num_classes) {
    if (predictions.empty()) throw UserError("metrics on an empty prediction set");
    if (predictions.size() != labels.size()) throw UserError("predictions and labels differ in length");
    if (num_classes < 1) throw UserError("num_classes must be positive");

    const auto c = static_cast<std::size_t>(num_classes);
    ClassificationMetrics m;
    m.n = static_cast<std::int64_t>(labels.size());
    m.confusion.assign(c, std::vector<std::int64_t>(c, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes) {
            throw UserError("label or prediction out of range");
        }
        ++m.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
    }

    std::int64_t trace = 0;
    m.precision.assign(c, 0.0);
    m.recall.assign(c, 0.0);
    m.f1.assign(c, 0.0);
    m.support.assign(c, 0);
    m.zero_predicted.assign(c, false);
    for (std::size_t k = 0; k < c; ++k) {
        const std::int64_t tp = m.confusion[k][k];
        std::int64_t predicted = 0;
        for (std::size_t t = 0; t < c; ++t) {
            predicted += m.confusion[t][k];
            m.support[k] += m.confusion[k][t];
        }
        trace += tp;
        if (predicted > 0) {
            m.precision[k] = static_cast<double>(tp) / static_cast<double>(predicted);
        } else if (m.support[k] > 0) {
            m.zero_predicted[k] = true;
            m.any_zero_predicted = true;
        }
        if (m.support[k] > 0) m.recall[k] = static_cast<double>(tp) / static_cast<double>(m.support[k]);
        const double denom = m.precision[k] + m.recall[k];
        m.f1[k] = denom > 0.0 ? 2.0 * m.precision[k] * m.recall[k] / denom : 0.0;

        // support-weighted sums, divided by N once at the end
        const auto support = static_cast<double>(m.support[k]);
        m.weighted_precision += support * m.precision[k];
        m.weighted_recall += support * m.recall[k];
        m.weighted_f1 += support * m.f1[k];
    }
    m.weighted_precision /= static_cast<double>(m.n);
    m.weighted_recall /= static_cast<double>(m.n);
    m.weighted_f1 /= static_cast<double>(m.n);
    m.accuracy = static_cast<double>(trace) / static_cast<double>(m.n);
    return m;
}

}  // namespace histo::evaluation

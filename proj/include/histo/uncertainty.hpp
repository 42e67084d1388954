#pragma once

#include <optional>
#include <vector>

#include "histo/model.hpp"

namespace histo::uncertainty {

/// T×N×C softmax(L_final) samples from T stochastic passes with dropout
/// active in the classifier heads. Backbone features are computed once;
/// the passes draw masks from `generator` in order, so a fixed seed gives
/// a fixed sample matrix.
torch::Tensor mc_forward(HistoNet& model, const torch::Tensor& images, int passes, at::Generator& generator);

/// Same as mc_forward, starting from precomputed f_global (N×D).
torch::Tensor mc_forward_features(HistoNet& model, const torch::Tensor& f_global, int passes,
                                  at::Generator& generator,
                                  const std::optional<torch::Tensor>& magnification_rank = {});

struct Summary {
    torch::Tensor mean_probs;   // N×C
    torch::Tensor uncertainty;  // N, mean over classes of the per-class variance across passes
    torch::Tensor confidence;   // N, max of mean_probs
    torch::Tensor entropy;      // N, predictive entropy of mean_probs (auxiliary)
};

/// Accepts T×C (single sample) or T×N×C. Variance is the population
/// variance over the T passes.
Summary summarize(const torch::Tensor& samples);

struct Calibration {
    double avg_confidence = 0.0;
    std::optional<double> correct_confidence;  // absent when no sample is correct
    std::optional<double> wrong_confidence;    // absent when no sample is wrong
    std::size_t n_correct = 0;
    std::size_t n_wrong = 0;
};

Calibration calibration(const torch::Tensor& mean_probs, const torch::Tensor& labels);

/// needs_review = confidence < threshold; threshold in (0,1].
std::vector<bool> triage(const torch::Tensor& confidence, double threshold);

}  // namespace histo::uncertainty

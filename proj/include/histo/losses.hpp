#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "histo/common.hpp"

namespace histo::losses {

/// Component order of the composite objective.
enum class Component { focal = 0, supcon, proto, morph, spatial, bio };
inline constexpr std::size_t kNumComponents = 6;
const std::array<std::string, kNumComponents>& component_names();

struct LossWeights {
    std::array<double, kNumComponents> alpha{1.0, 0.5, 0.5, 0.1, 0.05, 0.1};
    double gamma = 2.0;  // focal exponent
    double tau = 0.07;   // contrastive temperature

    double weight(Component c) const { return alpha[static_cast<std::size_t>(c)]; }
    bool active(Component c) const { return weight(c) > 0.0; }
    void validate() const;
};

/// −(1−p_t)^γ log p_t, averaged over the batch (weighted mean when class
/// weights are given, matching weighted cross-entropy at γ = 0).
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& labels, double gamma,
                         const std::optional<torch::Tensor>& class_weights = std::nullopt);

/// Supervised contrastive loss over unit embeddings. Anchors with no positive
/// are skipped; throws UserError if no anchor has a positive.
torch::Tensor supcon_loss(const torch::Tensor& z, const torch::Tensor& labels, double tau);

/// Mean squared feature discrepancy ‖f_x − f_Tx‖² / D, averaged over the batch.
torch::Tensor morph_loss(const torch::Tensor& f_x, const torch::Tensor& f_tx);

/// Anisotropic total variation: mean absolute difference over all vertical
/// and horizontal neighbour pairs, averaged over masks (each N×1×h×w).
torch::Tensor spatial_loss(const std::vector<torch::Tensor>& masks);

/// Morphology-preserving image transforms; identity is index 0.
enum class Transform { identity = 0, hflip, rot90, rot180, rot270 };
inline constexpr int kNumTransforms = 5;
torch::Tensor apply_transform(const torch::Tensor& images, Transform t);

/// R[c,c′] = 1/|S(c)| when c and c′ share a superclass, else 0.
/// taxonomy[c] is the superclass id of class c. w_same scales the
/// within-block mass; the remainder stays on the diagonal (w_same = 1 gives
/// plain block averaging).
torch::Tensor build_relation_matrix(const std::vector<int>& taxonomy, double w_same = 1.0);

/// ‖(I − R) p‖² per row, averaged over rows. Throws UserError if p is off the simplex.
torch::Tensor bio_loss(const torch::Tensor& probs, const torch::Tensor& relation);

struct LossComponents {
    std::array<torch::Tensor, kNumComponents> values;

    torch::Tensor& operator[](Component c) { return values[static_cast<std::size_t>(c)]; }
    const torch::Tensor& operator[](Component c) const { return values[static_cast<std::size_t>(c)]; }
    /// Scalar values; undefined components report 0.
    std::array<double, kNumComponents> to_doubles() const;
};

/// Σ α_i L_i over the defined components with nonzero weight. Throws
/// DivergenceError naming the first non-finite component.
torch::Tensor total_loss(const LossComponents& components, const LossWeights& weights);

}  // namespace histo::losses

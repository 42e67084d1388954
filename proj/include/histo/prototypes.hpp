#pragma once

#include <string>

#include "histo/common.hpp"

namespace histo::prototypes {

inline constexpr double kNormEpsilon = 1e-12;

struct PrototypeOptions {
    int64_t num_classes = 8;
    int64_t per_class = 3;
    int64_t dim = 32;
    double margin = 0.5;  // α
    double push = 1.0;    // β
};

/// C×J×D learnable prototypes in f_global space.
class PrototypeBankImpl : public torch::nn::Module {
  public:
    explicit PrototypeBankImpl(const PrototypeOptions& options);

    torch::Tensor& prototypes() { return prototypes_; }
    const PrototypeOptions& options() const { return options_; }
    /// Replaces the prototype values (shape must be C×J×D).
    void assign(const torch::Tensor& values);
    /// Throws UserError on non-finite entries or invalid α/β.
    void validate() const;

  private:
    PrototypeOptions options_;
    torch::Tensor prototypes_;
};
TORCH_MODULE(PrototypeBank);

/// ‖f/‖f‖ − p/‖p‖‖₂ broadcast over leading dimensions; lies in [0,2].
/// The gradient at zero distance is taken as zero.
torch::Tensor proto_distance(const torch::Tensor& f, const torch::Tensor& p);

/// N×C matrix of D_c = min_j d(f, p_{c,j}).
torch::Tensor class_distances(const torch::Tensor& f_global, const torch::Tensor& prototypes);

/// −min_j d(f, p_{c,j}) per class; values in [−2, 0].
torch::Tensor proto_logits(const torch::Tensor& f_global, PrototypeBank& bank);
torch::Tensor proto_logits(const torch::Tensor& f_global, const torch::Tensor& prototypes);

/// Batch mean of D_y + β·max(0, α + D_y − min_{c≠y} D_c).
torch::Tensor proto_loss(const torch::Tensor& f_global, const torch::Tensor& labels,
                         const torch::Tensor& prototypes, double margin, double push);
torch::Tensor proto_loss(const torch::Tensor& f_global, const torch::Tensor& labels, PrototypeBank& bank);

enum class InitStrategy { random_unit, kmeans_per_class };
InitStrategy parse_init_strategy(const std::string& name);
std::string to_string(InitStrategy s);

/// Lloyd's algorithm with k-means++ seeding; returns k×D centroids.
/// Requires at least k points.
torch::Tensor kmeans(const torch::Tensor& points, int64_t k, std::uint64_t seed, int max_iter = 100);

/// random_unit: i.i.d. Gaussian rows scaled to unit norm.
/// kmeans_per_class: per-class centroids of the given features, unit-normalized;
/// classes with fewer than J samples fall back to random_unit with a warning.
void init_prototypes(PrototypeBank& bank, InitStrategy strategy, std::uint64_t seed,
                     const torch::Tensor& features = {}, const torch::Tensor& labels = {});

}  // namespace histo::prototypes

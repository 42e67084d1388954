#pragma once

#include <optional>
#include <vector>

#include "histo/common.hpp"

namespace histo::experts {

/// Controls Monte Carlo dropout in the classifier heads. Stochastic passes
/// draw masks from the caller's generator; there is no hidden global RNG.
struct DropoutContext {
    bool active = false;
    at::Generator* generator = nullptr;

    static DropoutContext off() { return {}; }
    static DropoutContext on(at::Generator& gen) { return {true, &gen}; }
};

/// Inverted dropout: kept units are scaled by 1/(1−rate).
torch::Tensor dropout(const torch::Tensor& x, double rate, const DropoutContext& ctx);

/// in_dim → hidden (ReLU) → dropout → num_classes.
class ClassifierHeadImpl : public torch::nn::Module {
  public:
    ClassifierHeadImpl(int64_t in_dim, int64_t num_classes, int64_t hidden, double dropout_rate);

    torch::Tensor forward(const torch::Tensor& f_global, const DropoutContext& ctx);
    /// Hidden activations after dropout (the input to the output layer).
    torch::Tensor hidden(const torch::Tensor& f_global, const DropoutContext& ctx);

    double dropout_rate() const { return rate_; }
    void set_dropout_rate(double rate);

  private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
    double rate_;
};
TORCH_MODULE(ClassifierHead);

struct ExpertBankOptions {
    int64_t in_dim = 32;
    int64_t num_classes = 8;
    int64_t num_experts = 3;
    int64_t hidden = 256;
    double dropout_rate = 0.3;
    /// Restricts the gate to {expert for the sample's magnification, general}.
    bool route_by_magnification = false;
};

struct GatedOutput {
    torch::Tensor head_logits;   // N×(K+1)×C, experts first, general last
    torch::Tensor gate_weights;  // N×(K+1), rows on the simplex
    torch::Tensor expert_logits; // N×C
    torch::Tensor proto_logits;  // N×C (zeros when prototypes are disabled)
    torch::Tensor final_logits;  // N×C
};

/// K specialized experts plus one general classifier, and a softmax gate
/// over all K+1 heads. Parameters are named expert_0..K-1, general, gate.
class ExpertBankImpl : public torch::nn::Module {
  public:
    explicit ExpertBankImpl(const ExpertBankOptions& options);

    torch::Tensor gate_logits(const torch::Tensor& f_global);
    /// magnification_rank: per-sample index into the magnification list,
    /// only consulted when routing is enabled.
    torch::Tensor gate(const torch::Tensor& f_global, const std::optional<torch::Tensor>& magnification_rank = {});
    /// Returns N×(K+1)×C logits.
    torch::Tensor heads(const torch::Tensor& f_global, const DropoutContext& ctx);

    const ExpertBankOptions& options() const { return options_; }
    ClassifierHead head(int64_t k) { return heads_[static_cast<std::size_t>(k)]; }
    torch::nn::Linear gate_layer() { return gate_; }
    void set_dropout_rate(double rate);

  private:
    ExpertBankOptions options_;
    std::vector<ClassifierHead> heads_;
    torch::nn::Linear gate_{nullptr};
};
TORCH_MODULE(ExpertBank);

/// Softmax over the last dimension.
torch::Tensor gate_weights(const torch::Tensor& gate_logits);

/// Σ_k g_k · H_k per class. head_logits: [N×](K+1)×C; weights: [N×](K+1).
/// Throws UserError if any weight row is off the simplex by more than 1e-6.
torch::Tensor fuse_experts(const torch::Tensor& head_logits, const torch::Tensor& weights);

/// λ1·L_expert + λ2·L_proto; λ's must be nonnegative.
torch::Tensor fuse_final(const torch::Tensor& expert_logits, const torch::Tensor& proto_logits,
                         double lambda_expert, double lambda_proto);

}  // namespace histo::experts

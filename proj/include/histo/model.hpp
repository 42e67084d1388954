#pragma once

#include <optional>
#include <string>
#include <vector>

#include "histo/backbone.hpp"
#include "histo/experts.hpp"
#include "histo/prototypes.hpp"

namespace histo {

struct ModelConfig {
    std::vector<std::string> backbones{"tiny_test"};
    int64_t tiny_dim = 32;
    /// When false the extractors are frozen (eval mode, no gradients) and
    /// training works on cached feature maps.
    bool train_backbone = false;
    bool pretrained = false;
    /// Directory holding <backbone>.pt archives when pretrained is set.
    std::string weights_dir;

    int64_t num_classes = 8;
    int64_t num_experts = 3;
    int64_t head_hidden = 256;
    double dropout_rate = 0.3;
    bool route_by_magnification = false;

    int64_t projection_hidden = 512;
    int64_t embedding_dim = 128;

    bool use_attention = true;
    bool use_prototypes = true;
    int64_t prototypes_per_class = 3;
    double proto_margin = 0.5;
    double proto_push = 1.0;
    std::string prototype_init = "kmeans_per_class";

    double lambda_expert = 0.5;
    double lambda_proto = 0.5;

    void validate() const;
};

/// Attention-refined features of a batch.
struct Encoded {
    std::vector<torch::Tensor> refined;          // per backbone, N×C_k×h×w
    std::vector<torch::Tensor> attention_masks;  // per backbone, N×1×h×w (empty without attention)
    torch::Tensor f_global;                      // N×D
    torch::Tensor z;                             // N×embedding_dim, unit rows
};

struct ModelOutput {
    Encoded encoded;
    experts::GatedOutput gated;
};

/// Backbones → attention → GAP/concat → {projection head, expert bank,
/// prototype bank} → hybrid logit fusion.
class HistoNetImpl : public torch::nn::Module {
  public:
    explicit HistoNetImpl(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const std::vector<backbone::BackboneSpec>& specs() const { return specs_; }
    int64_t feature_dim() const { return feature_dim_; }

    /// Raw backbone maps, one per active backbone in registry order.
    std::vector<torch::Tensor> extract(const torch::Tensor& images);
    Encoded encode(const std::vector<torch::Tensor>& raw_maps);
    experts::GatedOutput classify(const torch::Tensor& f_global, const experts::DropoutContext& ctx,
                                  const std::optional<torch::Tensor>& magnification_rank = {});
    ModelOutput forward(const torch::Tensor& images, const experts::DropoutContext& ctx = {},
                        const std::optional<torch::Tensor>& magnification_rank = {});

    /// Softmax of the final logits with dropout off.
    torch::Tensor predict_proba(const torch::Tensor& images);

    backbone::FeatureExtractor& extractor(std::size_t k) { return *extractors_.at(k); }
    backbone::ChannelSpatialAttention attention(std::size_t k) { return attention_.at(k); }
    experts::ExpertBank expert_bank() { return experts_; }
    prototypes::PrototypeBank prototype_bank() { return prototypes_; }
    backbone::ProjectionHead projection() { return projection_; }

    /// Parameters trained by the optimizer (excludes frozen extractors).
    std::vector<torch::Tensor> trainable_parameters();
    std::vector<torch::Tensor> backbone_parameters();
    /// Puts the module in train mode while keeping frozen extractors in eval mode.
    void set_training(bool training);

  private:
    ModelConfig config_;
    std::vector<backbone::BackboneSpec> specs_;
    int64_t feature_dim_ = 0;
    std::vector<std::shared_ptr<backbone::FeatureExtractor>> extractors_;
    std::vector<backbone::ChannelSpatialAttention> attention_;
    backbone::ProjectionHead projection_{nullptr};
    experts::ExpertBank experts_{nullptr};
    prototypes::PrototypeBank prototypes_{nullptr};
};
TORCH_MODULE(HistoNet);

/// Seeds parameter initialization and builds the model.
HistoNet build_model(const ModelConfig& config, std::uint64_t seed);

/// Index of a magnification in {40,100,200,400}; used for optional routing.
int magnification_rank(int magnification);

}  // namespace histo

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "histo/common.hpp"

namespace histo::backbone {

struct BackboneSpec {
    std::string name;
    int64_t feature_dim = 0;
    bool pretrained = false;
};

/// Registry in its fixed order; f_global is concatenated in this order.
/// tiny_test's dim is the default (32); see resolve().
const std::vector<BackboneSpec>& registry();
int registry_position(const std::string& name);

/// Looks a name up in the registry; throws UserError listing the registry for
/// unknown names. tiny_dim overrides the tiny_test feature width.
BackboneSpec resolve(const std::string& name, int64_t tiny_dim = 32);

/// Resolves and sorts names into registry order, rejecting duplicates.
std::vector<BackboneSpec> resolve_all(const std::vector<std::string>& names, int64_t tiny_dim = 32);

int64_t total_feature_dim(const std::vector<BackboneSpec>& specs);

/// Convolutional trunk producing a N×C×h×w map.
class FeatureExtractor : public torch::nn::Module {
  public:
    virtual torch::Tensor forward(const torch::Tensor& images) = 0;
    virtual int64_t feature_dim() const = 0;
};

std::shared_ptr<FeatureExtractor> make_extractor(const BackboneSpec& spec);

/// Runs an extractor; an empty batch yields an empty map of the right
/// channel and spatial shape.
torch::Tensor extract_features(FeatureExtractor& extractor, const torch::Tensor& images);

/// Re-estimates BatchNorm running statistics from `images` (cumulative
/// average over chunks), leaving every weight untouched. Random extractors
/// otherwise normalize with mean 0 / variance 1 and emit very small maps.
/// Returns the number of normalization layers updated.
int recalibrate_batch_norm(FeatureExtractor& extractor, const torch::Tensor& images, int64_t chunk = 64);

struct AttentionOutput {
    torch::Tensor refined;       // same shape as the input map
    torch::Tensor spatial_mask;  // N×1×h×w, values in [0,1]
    torch::Tensor channel_gate;  // N×C×1×1, values in [0,1]
};

/// Channel-then-spatial attention: a shared two-layer MLP over average- and
/// max-pooled channel descriptors gives the channel gate, and a 7×7
/// convolution over the channel-wise mean/max gives the spatial gate.
class ChannelSpatialAttentionImpl : public torch::nn::Module {
  public:
    explicit ChannelSpatialAttentionImpl(int64_t channels, int64_t reduction = 16, int64_t kernel = 7);

    AttentionOutput forward(const torch::Tensor& map);

    /// Test hook: both gates become exactly one and the map passes through.
    void pin_gates_to_one(bool pinned) { pinned_ = pinned; }

  private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
    torch::nn::Conv2d spatial_{nullptr};
    bool pinned_ = false;
};
TORCH_MODULE(ChannelSpatialAttention);

/// Global-average-pools each map and concatenates along channels.
torch::Tensor fuse_global(const std::vector<torch::Tensor>& refined_maps);

/// D → hidden → ReLU → embedding_dim, then L2-normalized (ε = 1e-12 added to the norm).
class ProjectionHeadImpl : public torch::nn::Module {
  public:
    ProjectionHeadImpl(int64_t in_dim, int64_t hidden = 512, int64_t out_dim = 128);
    torch::Tensor forward(const torch::Tensor& f_global);

  private:
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ProjectionHead);

}  // namespace histo::backbone

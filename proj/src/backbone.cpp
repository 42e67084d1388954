#include "histo/backbone.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace histo::backbone {

namespace nn = torch::nn;

const std::vector<BackboneSpec>& registry() {
    static const std::vector<BackboneSpec> specs{
        {"densenet201", 1920, false},
        {"convnext_tiny", 768, false},
        {"efficientnetv2_s", 1280, false},
        {"tiny_test", 32, false},
    };
    return specs;
}

int registry_position(const std::string& name) {
    const auto& specs = registry();
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

BackboneSpec resolve(const std::string& name, int64_t tiny_dim) {
    const int pos = registry_position(name);
    if (pos < 0) {
        std::ostringstream msg;
        msg << "unknown backbone '" << name << "'; registry:";
        for (const auto& s : registry()) msg << ' ' << s.name;
        throw UserError(msg.str());
    }
    BackboneSpec spec = registry()[static_cast<std::size_t>(pos)];
    if (spec.name == "tiny_test") {
        if (tiny_dim < 1) throw UserError("tiny_test feature dim must be positive");
        spec.feature_dim = tiny_dim;
    }
    return spec;
}

std::vector<BackboneSpec> resolve_all(const std::vector<std::string>& names, int64_t tiny_dim) {
    if (names.empty()) throw UserError("at least one backbone is required");
    std::set<std::string> seen;
    std::vector<BackboneSpec> specs;
    for (const auto& n : names) {
        if (!seen.insert(n).second) throw UserError("backbone listed twice: " + n);
        specs.push_back(resolve(n, tiny_dim));
    }
    std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) {
        return registry_position(a.name) < registry_position(b.name);
    });
    return specs;
}

int64_t total_feature_dim(const std::vector<BackboneSpec>& specs) {
    int64_t d = 0;
    for (const auto& s : specs) d += s.feature_dim;
    return d;
}

namespace {

nn::Conv2dOptions conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1, int64_t groups = 1,
                       bool bias = false) {
    return nn::Conv2dOptions(in, out, k).stride(stride).padding((k - 1) / 2).groups(groups).bias(bias);
}

// ---------------------------------------------------------------------------
// tiny_test: three stride-2 conv blocks

class TinyTest final : public FeatureExtractor {
  public:
    explicit TinyTest(int64_t dim) : dim_(dim) {
        body_ = register_module("body", nn::Sequential(
            nn::Conv2d(conv(3, 16, 3, 2)), nn::BatchNorm2d(16), nn::ReLU(),
            nn::Conv2d(conv(16, 32, 3, 2)), nn::BatchNorm2d(32), nn::ReLU(),
            nn::Conv2d(conv(32, dim, 3, 2)), nn::BatchNorm2d(dim), nn::ReLU()));
    }
    torch::Tensor forward(const torch::Tensor& x) override { return body_->forward(x); }
    int64_t feature_dim() const override { return dim_; }

  private:
    int64_t dim_;
    nn::Sequential body_{nullptr};
};

// ---------------------------------------------------------------------------
// DenseNet-201: growth 32, blocks (6, 12, 48, 32), bottleneck width 4·growth

class DenseLayer final : public nn::Module {
  public:
    DenseLayer(int64_t in, int64_t growth, int64_t bn_size) {
        norm1_ = register_module("norm1", nn::BatchNorm2d(in));
        conv1_ = register_module("conv1", nn::Conv2d(conv(in, bn_size * growth, 1)));
        norm2_ = register_module("norm2", nn::BatchNorm2d(bn_size * growth));
        conv2_ = register_module("conv2", nn::Conv2d(conv(bn_size * growth, growth, 3)));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto h = conv1_->forward(torch::relu(norm1_->forward(x)));
        return conv2_->forward(torch::relu(norm2_->forward(h)));
    }

  private:
    nn::BatchNorm2d norm1_{nullptr}, norm2_{nullptr};
    nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};

class DenseNet201 final : public FeatureExtractor {
  public:
    DenseNet201() {
        constexpr int64_t growth = 32, bn_size = 4, init_features = 64;
        const std::array<int64_t, 4> blocks{6, 12, 48, 32};
        stem_ = register_module("stem", nn::Sequential(
            nn::Conv2d(conv(3, init_features, 7, 2)), nn::BatchNorm2d(init_features), nn::ReLU(),
            nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
        int64_t channels = init_features;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            std::vector<std::shared_ptr<DenseLayer>> block;
            for (int64_t l = 0; l < blocks[b]; ++l) {
                block.push_back(register_module(
                    "denseblock" + std::to_string(b + 1) + "_layer" + std::to_string(l + 1),
                    std::make_shared<DenseLayer>(channels, growth, bn_size)));
                channels += growth;
            }
            blocks_.push_back(std::move(block));
            if (b + 1 < blocks.size()) {
                transitions_.push_back(register_module("transition" + std::to_string(b + 1), nn::Sequential(
                    nn::BatchNorm2d(channels), nn::ReLU(), nn::Conv2d(conv(channels, channels / 2, 1)),
                    nn::AvgPool2d(nn::AvgPool2dOptions(2).stride(2)))));
                channels /= 2;
            }
        }
        final_norm_ = register_module("norm5", nn::BatchNorm2d(channels));
        dim_ = channels;
    }

    torch::Tensor forward(const torch::Tensor& images) override {
        auto x = stem_->forward(images);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            std::vector<torch::Tensor> features{x};
            for (auto& layer : blocks_[b]) {
                features.push_back(layer->forward(torch::cat(features, 1)));
            }
            x = torch::cat(features, 1);
            if (b < transitions_.size()) x = transitions_[b]->forward(x);
        }
        return torch::relu(final_norm_->forward(x));
    }
    int64_t feature_dim() const override { return dim_; }

  private:
    nn::Sequential stem_{nullptr};
    std::vector<std::vector<std::shared_ptr<DenseLayer>>> blocks_;
    std::vector<nn::Sequential> transitions_;
    nn::BatchNorm2d final_norm_{nullptr};
    int64_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// ConvNeXt-Tiny: depths (3, 3, 9, 3), widths (96, 192, 384, 768)

torch::Tensor channels_last_norm(nn::LayerNorm& norm, const torch::Tensor& x) {
    return norm->forward(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

class ConvNeXtBlock final : public nn::Module {
  public:
    explicit ConvNeXtBlock(int64_t dim) {
        dwconv_ = register_module("dwconv", nn::Conv2d(conv(dim, dim, 7, 1, dim, true)));
        norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({dim}).eps(1e-6)));
        pw1_ = register_module("pwconv1", nn::Linear(dim, 4 * dim));
        pw2_ = register_module("pwconv2", nn::Linear(4 * dim, dim));
        layer_scale_ = register_parameter("layer_scale", torch::full({dim}, 1e-6));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto h = dwconv_->forward(x).permute({0, 2, 3, 1});
        h = pw2_->forward(torch::gelu(pw1_->forward(norm_->forward(h))));
        return x + (h * layer_scale_).permute({0, 3, 1, 2});
    }

  private:
    nn::Conv2d dwconv_{nullptr};
    nn::LayerNorm norm_{nullptr};
    nn::Linear pw1_{nullptr}, pw2_{nullptr};
    torch::Tensor layer_scale_;
};

class ConvNeXtTiny final : public FeatureExtractor {
  public:
    ConvNeXtTiny() {
        const std::array<int64_t, 4> depths{3, 3, 9, 3};
        const std::array<int64_t, 4> dims{96, 192, 384, 768};
        stem_conv_ = register_module("stem_conv", nn::Conv2d(nn::Conv2dOptions(3, dims[0], 4).stride(4)));
        stem_norm_ = register_module("stem_norm", nn::LayerNorm(nn::LayerNormOptions({dims[0]}).eps(1e-6)));
        for (std::size_t s = 0; s < depths.size(); ++s) {
            if (s > 0) {
                down_norms_.push_back(register_module("down" + std::to_string(s) + "_norm",
                    nn::LayerNorm(nn::LayerNormOptions({dims[s - 1]}).eps(1e-6))));
                down_convs_.push_back(register_module("down" + std::to_string(s) + "_conv",
                    nn::Conv2d(nn::Conv2dOptions(dims[s - 1], dims[s], 2).stride(2))));
            }
            std::vector<std::shared_ptr<ConvNeXtBlock>> stage;
            for (int64_t b = 0; b < depths[s]; ++b) {
                stage.push_back(register_module("stage" + std::to_string(s) + "_block" + std::to_string(b),
                                                std::make_shared<ConvNeXtBlock>(dims[s])));
            }
            stages_.push_back(std::move(stage));
        }
        dim_ = dims.back();
    }

    torch::Tensor forward(const torch::Tensor& images) override {
        auto x = channels_last_norm(stem_norm_, stem_conv_->forward(images));
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            if (s > 0) x = down_convs_[s - 1]->forward(channels_last_norm(down_norms_[s - 1], x));
            for (auto& block : stages_[s]) x = block->forward(x);
        }
        return x;
    }
    int64_t feature_dim() const override { return dim_; }

  private:
    nn::Conv2d stem_conv_{nullptr};
    nn::LayerNorm stem_norm_{nullptr};
    std::vector<nn::LayerNorm> down_norms_;
    std::vector<nn::Conv2d> down_convs_;
    std::vector<std::vector<std::shared_ptr<ConvNeXtBlock>>> stages_;
    int64_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// EfficientNetV2-S

nn::BatchNorm2d bn(int64_t c) { return nn::BatchNorm2d(nn::BatchNorm2dOptions(c).eps(1e-3)); }

class MBConvBlock final : public nn::Module {
  public:
    // fused: k×k expansion conv replaces the 1×1 expansion + depthwise pair
    MBConvBlock(bool fused, int64_t expand, int64_t kernel, int64_t stride, int64_t in, int64_t out)
        : residual_(stride == 1 && in == out) {
        const int64_t hidden = in * expand;
        layers_ = register_module("layers", nn::Sequential());
        if (fused) {
            if (expand == 1) {
                layers_->push_back(nn::Conv2d(conv(in, out, kernel, stride)));
                layers_->push_back(bn(out));
                layers_->push_back(nn::SiLU());
            } else {
                layers_->push_back(nn::Conv2d(conv(in, hidden, kernel, stride)));
                layers_->push_back(bn(hidden));
                layers_->push_back(nn::SiLU());
                layers_->push_back(nn::Conv2d(conv(hidden, out, 1)));
                layers_->push_back(bn(out));
            }
        } else {
            layers_->push_back(nn::Conv2d(conv(in, hidden, 1)));
            layers_->push_back(bn(hidden));
            layers_->push_back(nn::SiLU());
            layers_->push_back(nn::Conv2d(conv(hidden, hidden, kernel, stride, hidden)));
            layers_->push_back(bn(hidden));
            layers_->push_back(nn::SiLU());
            const int64_t squeeze = std::max<int64_t>(1, in / 4);
            se_reduce_ = register_module("se_reduce", nn::Conv2d(nn::Conv2dOptions(hidden, squeeze, 1)));
            se_expand_ = register_module("se_expand", nn::Conv2d(nn::Conv2dOptions(squeeze, hidden, 1)));
            project_ = register_module("project", nn::Sequential(nn::Conv2d(conv(hidden, out, 1)), bn(out)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = layers_->forward(x);
        if (se_reduce_) {
            auto s = h.mean({2, 3}, true);
            s = torch::sigmoid(se_expand_->forward(torch::silu(se_reduce_->forward(s))));
            h = project_->forward(h * s);
        }
        return residual_ ? h + x : h;
    }

  private:
    bool residual_;
    nn::Sequential layers_{nullptr};
    nn::Conv2d se_reduce_{nullptr}, se_expand_{nullptr};
    nn::Sequential project_{nullptr};
};

class EfficientNetV2S final : public FeatureExtractor {
  public:
    EfficientNetV2S() {
        struct Stage {
            bool fused;
            int64_t expand, kernel, stride, in, out, layers;
        };
        const std::array<Stage, 6> stages{{
            {true, 1, 3, 1, 24, 24, 2},
            {true, 4, 3, 2, 24, 48, 4},
            {true, 4, 3, 2, 48, 64, 4},
            {false, 4, 3, 2, 64, 128, 6},
            {false, 6, 3, 1, 128, 160, 9},
            {false, 6, 3, 2, 160, 256, 15},
        }};
        stem_ = register_module("stem", nn::Sequential(nn::Conv2d(conv(3, 24, 3, 2)), bn(24), nn::SiLU()));
        int index = 0;
        for (const auto& st : stages) {
            for (int64_t l = 0; l < st.layers; ++l) {
                blocks_.push_back(register_module("block" + std::to_string(index++),
                    std::make_shared<MBConvBlock>(st.fused, st.expand, st.kernel, l == 0 ? st.stride : 1,
                                                  l == 0 ? st.in : st.out, st.out)));
            }
        }
        head_ = register_module("head", nn::Sequential(nn::Conv2d(conv(256, 1280, 1)), bn(1280), nn::SiLU()));
    }

    torch::Tensor forward(const torch::Tensor& images) override {
        auto x = stem_->forward(images);
        for (auto& b : blocks_) x = b->forward(x);
        return head_->forward(x);
    }
    int64_t feature_dim() const override { return 1280; }

  private:
    nn::Sequential stem_{nullptr};
    std::vector<std::shared_ptr<MBConvBlock>> blocks_;
    nn::Sequential head_{nullptr};
};

// He-normal (fan-out) convolution weights, as torchvision initializes CNN trunks.
template <class Net>
std::shared_ptr<Net> he_initialized(std::shared_ptr<Net> net) {
    torch::NoGradGuard no_grad;
    for (auto& m : net->modules(false)) {
        if (auto* c = m->template as<nn::Conv2d>()) {
            nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanOut, torch::kReLU);
            if (c->bias.defined()) c->bias.zero_();
        }
    }
    return net;
}

}  // namespace

std::shared_ptr<FeatureExtractor> make_extractor(const BackboneSpec& spec) {
    if (spec.name == "tiny_test") return he_initialized(std::make_shared<TinyTest>(spec.feature_dim));
    if (spec.name == "densenet201") return he_initialized(std::make_shared<DenseNet201>());
    if (spec.name == "convnext_tiny") return std::make_shared<ConvNeXtTiny>();
    if (spec.name == "efficientnetv2_s") return he_initialized(std::make_shared<EfficientNetV2S>());
    resolve(spec.name);  // throws with the registry listing
    throw UserError("no extractor for " + spec.name);
}

torch::Tensor extract_features(FeatureExtractor& extractor, const torch::Tensor& images) {
    TORCH_CHECK(images.dim() == 4 && images.size(1) == 3, "expected N×3×H×W images");
    if (images.size(0) == 0) {
        torch::NoGradGuard no_grad;
        const bool was_training = extractor.is_training();
        extractor.eval();
        auto probe = extractor.forward(torch::zeros({1, 3, images.size(2), images.size(3)}, images.options()));
        extractor.train(was_training);
        return probe.narrow(0, 0, 0);
    }
    return extractor.forward(images);
}

int recalibrate_batch_norm(FeatureExtractor& extractor, const torch::Tensor& images, int64_t chunk) {
    if (chunk < 1) throw UserError("recalibration chunk must be positive");
    std::vector<torch::nn::BatchNorm2dImpl*> norms;
    for (auto& m : extractor.modules(false)) {
        if (auto* bn = m->as<torch::nn::BatchNorm2d>()) norms.push_back(bn);
    }
    if (norms.empty() || images.size(0) == 0) return static_cast<int>(norms.size());

    torch::NoGradGuard no_grad;
    const bool was_training = extractor.is_training();
    std::vector<std::optional<double>> momenta;
    for (auto* bn : norms) {
        momenta.push_back(bn->options.momentum());
        bn->reset_running_stats();
        bn->options.momentum(std::nullopt);  // cumulative average across chunks
    }
    extractor.train();
    for (int64_t start = 0; start < images.size(0); start += chunk) {
        extractor.forward(images.slice(0, start, std::min(images.size(0), start + chunk)));
    }
    extractor.train(was_training);
    for (std::size_t i = 0; i < norms.size(); ++i) norms[i]->options.momentum(momenta[i]);
    return static_cast<int>(norms.size());
}

// ---------------------------------------------------------------------------

ChannelSpatialAttentionImpl::ChannelSpatialAttentionImpl(int64_t channels, int64_t reduction, int64_t kernel) {
    const int64_t hidden = std::max<int64_t>(1, channels / reduction);
    fc1_ = register_module("fc1", nn::Linear(channels, hidden));
    fc2_ = register_module("fc2", nn::Linear(hidden, channels));
    // replicate padding keeps the gate uniform on uniform inputs; zero padding would darken the border
    spatial_ = register_module(
        "spatial", nn::Conv2d(nn::Conv2dOptions(2, 1, kernel).padding(kernel / 2).padding_mode(torch::kReplicate)));
}

AttentionOutput ChannelSpatialAttentionImpl::forward(const torch::Tensor& map) {
    TORCH_CHECK(map.dim() == 4, "attention expects N×C×h×w");
    const auto n = map.size(0), c = map.size(1);
    if (pinned_) {
        return {map, torch::ones({n, 1, map.size(2), map.size(3)}, map.options()),
                torch::ones({n, c, 1, 1}, map.options())};
    }
    auto mlp = [&](const torch::Tensor& v) { return fc2_->forward(torch::relu(fc1_->forward(v))); };
    auto avg = map.mean({2, 3});
    auto mx = map.amax({2, 3});
    auto channel_gate = torch::sigmoid(mlp(avg) + mlp(mx)).view({n, c, 1, 1});
    auto gated = map * channel_gate;
    auto pooled = torch::cat({gated.mean(1, true), gated.amax(1, true)}, 1);
    auto spatial_mask = torch::sigmoid(spatial_->forward(pooled));
    return {gated * spatial_mask, spatial_mask, channel_gate};
}

torch::Tensor fuse_global(const std::vector<torch::Tensor>& refined_maps) {
    if (refined_maps.empty()) throw UserError("fuse_global needs at least one map");
    std::vector<torch::Tensor> pooled;
    pooled.reserve(refined_maps.size());
    for (const auto& m : refined_maps) pooled.push_back(m.mean({2, 3}));
    return torch::cat(pooled, 1);
}

ProjectionHeadImpl::ProjectionHeadImpl(int64_t in_dim, int64_t hidden, int64_t out_dim) {
    fc1_ = register_module("fc1", nn::Linear(in_dim, hidden));
    fc2_ = register_module("fc2", nn::Linear(hidden, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& f_global) {
    auto v = fc2_->forward(torch::relu(fc1_->forward(f_global)));
    return v / (v.norm(2, {1}, true) + 1e-12);
}

}  // namespace histo::backbone

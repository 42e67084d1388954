#include "histo/model.hpp"

#include "histo/dataset.hpp"

namespace histo {

void ModelConfig::validate() const {
    backbone::resolve_all(backbones, tiny_dim);
    if (num_classes < 2) throw UserError("model needs at least two classes");
    if (num_experts < 1) throw UserError("model needs at least one expert");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw UserError("dropout_rate must lie in [0,1)");
    if (prototypes_per_class < 1) throw UserError("prototypes_per_class must be >= 1");
    if (!(proto_margin > 0.0)) throw UserError("proto_margin must be > 0");
    if (!(proto_push >= 0.0)) throw UserError("proto_push must be >= 0");
    if (lambda_expert < 0.0 || lambda_proto < 0.0) throw UserError("fusion weights must be nonnegative");
    if (head_hidden < 1 || projection_hidden < 1 || embedding_dim < 1) throw UserError("layer widths must be positive");
    prototypes::parse_init_strategy(prototype_init);
}

HistoNetImpl::HistoNetImpl(const ModelConfig& config) : config_(config) {
    config_.validate();
    specs_ = backbone::resolve_all(config_.backbones, config_.tiny_dim);
    feature_dim_ = backbone::total_feature_dim(specs_);

    for (const auto& spec : specs_) {
        auto extractor = register_module("backbone_" + spec.name, backbone::make_extractor(spec));
        if (extractor->feature_dim() != spec.feature_dim) {
            throw std::logic_error("extractor width disagrees with registry for " + spec.name);
        }
        if (config_.pretrained) {
            const fs::path weights = fs::path(config_.weights_dir) / (spec.name + ".pt");
            if (!fs::exists(weights)) throw UserError("pretrained weights not found: " + weights.string());
            torch::serialize::InputArchive archive;
            archive.load_from(weights.string());
            extractor->load(archive);
        }
        extractors_.push_back(extractor);
        attention_.push_back(register_module("attention_" + spec.name,
                                             backbone::ChannelSpatialAttention(spec.feature_dim)));
    }
    projection_ = register_module("projection", backbone::ProjectionHead(feature_dim_, config_.projection_hidden,
                                                                          config_.embedding_dim));
    experts::ExpertBankOptions eo;
    eo.in_dim = feature_dim_;
    eo.num_classes = config_.num_classes;
    eo.num_experts = config_.num_experts;
    eo.hidden = config_.head_hidden;
    eo.dropout_rate = config_.dropout_rate;
    eo.route_by_magnification = config_.route_by_magnification;
    experts_ = register_module("experts", experts::ExpertBank(eo));

    prototypes::PrototypeOptions po;
    po.num_classes = config_.num_classes;
    po.per_class = config_.prototypes_per_class;
    po.dim = feature_dim_;
    po.margin = config_.proto_margin;
    po.push = config_.proto_push;
    prototypes_ = register_module("prototypes", prototypes::PrototypeBank(po));

    if (!config_.train_backbone) {
        for (auto& e : extractors_) {
            for (auto& p : e->parameters()) p.set_requires_grad(false);
        }
    }
    set_training(false);
}

std::vector<torch::Tensor> HistoNetImpl::extract(const torch::Tensor& images) {
    std::vector<torch::Tensor> maps;
    maps.reserve(extractors_.size());
    if (config_.train_backbone) {
        for (auto& e : extractors_) maps.push_back(backbone::extract_features(*e, images));
    } else {
        torch::NoGradGuard no_grad;
        for (auto& e : extractors_) maps.push_back(backbone::extract_features(*e, images));
    }
    return maps;
}

Encoded HistoNetImpl::encode(const std::vector<torch::Tensor>& raw_maps) {
    if (raw_maps.size() != extractors_.size()) throw UserError("expected one feature map per backbone");
    Encoded out;
    for (std::size_t k = 0; k < raw_maps.size(); ++k) {
        if (config_.use_attention) {
            auto att = attention_[k]->forward(raw_maps[k]);
            out.refined.push_back(att.refined);
            out.attention_masks.push_back(att.spatial_mask);
        } else {
            out.refined.push_back(raw_maps[k]);
        }
    }
    out.f_global = backbone::fuse_global(out.refined);
    out.z = projection_->forward(out.f_global);
    return out;
}

experts::GatedOutput HistoNetImpl::classify(const torch::Tensor& f_global, const experts::DropoutContext& ctx,
                                            const std::optional<torch::Tensor>& magnification_rank) {
    experts::GatedOutput g;
    g.head_logits = experts_->heads(f_global, ctx);
    g.gate_weights = experts_->gate(f_global, magnification_rank);
    g.expert_logits = experts::fuse_experts(g.head_logits, g.gate_weights);
    if (config_.use_prototypes) {
        g.proto_logits = prototypes::proto_logits(f_global, prototypes_);
        g.final_logits = experts::fuse_final(g.expert_logits, g.proto_logits, config_.lambda_expert,
                                             config_.lambda_proto);
    } else {
        // conventional head: expert logits only
        g.proto_logits = torch::zeros_like(g.expert_logits);
        g.final_logits = g.expert_logits;
    }
    return g;
}

ModelOutput HistoNetImpl::forward(const torch::Tensor& images, const experts::DropoutContext& ctx,
                                  const std::optional<torch::Tensor>& magnification_rank) {
    ModelOutput out;
    out.encoded = encode(extract(images));
    out.gated = classify(out.encoded.f_global, ctx, magnification_rank);
    return out;
}

torch::Tensor HistoNetImpl::predict_proba(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    return torch::softmax(forward(images).gated.final_logits, 1);
}

std::vector<torch::Tensor> HistoNetImpl::trainable_parameters() {
    std::vector<torch::Tensor> params;
    for (auto& p : parameters()) {
        if (p.requires_grad()) params.push_back(p);
    }
    return params;
}

std::vector<torch::Tensor> HistoNetImpl::backbone_parameters() {
    std::vector<torch::Tensor> params;
    for (auto& e : extractors_) {
        for (auto& p : e->parameters()) params.push_back(p);
    }
    return params;
}

void HistoNetImpl::set_training(bool training) {
    train(training);
    if (!config_.train_backbone) {
        for (auto& e : extractors_) e->eval();
    }
}

HistoNet build_model(const ModelConfig& config, std::uint64_t seed) {
    torch::manual_seed(seed);
    return HistoNet(config);
}

int magnification_rank(int magnification) {
    const auto& mags = dataset::kMagnifications;
    for (std::size_t i = 0; i < mags.size(); ++i) {
        if (mags[i] == magnification) return static_cast<int>(i);
    }
    return 0;
}

}  // namespace histo

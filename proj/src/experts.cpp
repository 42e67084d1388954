#include "histo/experts.hpp"

namespace histo::experts {

torch::Tensor dropout(const torch::Tensor& x, double rate, const DropoutContext& ctx) {
    if (!ctx.active || rate <= 0.0) return x;
    if (ctx.generator == nullptr) throw std::invalid_argument("active dropout needs a generator");
    auto keep = torch::empty_like(x).bernoulli_(1.0 - rate, *ctx.generator);
    return x * keep / (1.0 - rate);
}

ClassifierHeadImpl::ClassifierHeadImpl(int64_t in_dim, int64_t num_classes, int64_t hidden, double dropout_rate)
    : rate_(dropout_rate) {
    set_dropout_rate(dropout_rate);
    fc1_ = register_module("fc1", torch::nn::Linear(in_dim, hidden));
    fc2_ = register_module("fc2", torch::nn::Linear(hidden, num_classes));
}

void ClassifierHeadImpl::set_dropout_rate(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw UserError("dropout rate must lie in [0,1)");
    rate_ = rate;
}

torch::Tensor ClassifierHeadImpl::hidden(const torch::Tensor& f_global, const DropoutContext& ctx) {
    return dropout(torch::relu(fc1_->forward(f_global)), rate_, ctx);
}

torch::Tensor ClassifierHeadImpl::forward(const torch::Tensor& f_global, const DropoutContext& ctx) {
    return fc2_->forward(hidden(f_global, ctx));
}

ExpertBankImpl::ExpertBankImpl(const ExpertBankOptions& options) : options_(options) {
    if (options.num_experts < 1) throw UserError("need at least one expert");
    if (options.num_classes < 1) throw UserError("need at least one class");
    for (int64_t k = 0; k <= options.num_experts; ++k) {
        const std::string name = k < options.num_experts ? "expert_" + std::to_string(k) : "general";
        heads_.push_back(register_module(
            name, ClassifierHead(options.in_dim, options.num_classes, options.hidden, options.dropout_rate)));
    }
    gate_ = register_module("gate", torch::nn::Linear(options.in_dim, options.num_experts + 1));
}

void ExpertBankImpl::set_dropout_rate(double rate) {
    for (auto& h : heads_) h->set_dropout_rate(rate);
    options_.dropout_rate = rate;
}

torch::Tensor ExpertBankImpl::gate_logits(const torch::Tensor& f_global) { return gate_->forward(f_global); }

torch::Tensor ExpertBankImpl::gate(const torch::Tensor& f_global, const std::optional<torch::Tensor>& magnification_rank) {
    auto logits = gate_logits(f_global);
    if (options_.route_by_magnification && magnification_rank && magnification_rank->defined()) {
        // allowed: the expert assigned to the magnification, and the general head
        const int64_t k = options_.num_experts;
        auto expert = magnification_rank->to(torch::kLong).remainder(k);
        auto allowed = torch::zeros_like(logits, torch::kBool);
        allowed.scatter_(1, expert.view({-1, 1}), true);
        allowed.select(1, k).fill_(true);
        logits = logits.masked_fill(allowed.logical_not(), -std::numeric_limits<double>::infinity());
    }
    return gate_weights(logits);
}

torch::Tensor ExpertBankImpl::heads(const torch::Tensor& f_global, const DropoutContext& ctx) {
    std::vector<torch::Tensor> outs;
    outs.reserve(heads_.size());
    for (auto& h : heads_) outs.push_back(h->forward(f_global, ctx));
    return torch::stack(outs, 1);
}

torch::Tensor gate_weights(const torch::Tensor& gate_logits) { return torch::softmax(gate_logits, -1); }

torch::Tensor fuse_experts(const torch::Tensor& head_logits, const torch::Tensor& weights) {
    if (head_logits.dim() != weights.dim() + 1 || head_logits.size(-2) != weights.size(-1)) {
        throw UserError("fuse_experts: head/weight lengths do not match");
    }
    {
        torch::NoGradGuard no_grad;
        const double off_sum = (weights.sum(-1) - 1.0).abs().max().item<double>();
        const double negative = weights.numel() ? (-weights).max().item<double>() : 0.0;
        if (off_sum > 1e-6 || negative > 1e-6) throw UserError("fuse_experts: weights are off the simplex");
    }
    return (weights.unsqueeze(-1) * head_logits).sum(-2);
}

torch::Tensor fuse_final(const torch::Tensor& expert_logits, const torch::Tensor& proto_logits,
                         double lambda_expert, double lambda_proto) {
    if (lambda_expert < 0.0 || lambda_proto < 0.0) throw UserError("fusion weights must be nonnegative");
    if (!expert_logits.sizes().equals(proto_logits.sizes())) {
        throw UserError("fuse_final: logit shapes differ");
    }
    return lambda_expert * expert_logits + lambda_proto * proto_logits;
}

}  // namespace histo::experts

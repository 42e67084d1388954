#include "histo/losses.hpp"

#include <cmath>

namespace histo::losses {

const std::array<std::string, kNumComponents>& component_names() {
    static const std::array<std::string, kNumComponents> names{"focal", "supcon", "proto",
                                                               "morph", "spatial", "bio"};
    return names;
}

void LossWeights::validate() const {
    bool any = false;
    for (double a : alpha) {
        if (!(a >= 0.0) || !std::isfinite(a)) throw UserError("loss weights must be finite and nonnegative");
        any = any || a > 0.0;
    }
    if (!any) throw UserError("at least one loss weight must be positive");
    if (!(gamma >= 0.0)) throw UserError("focal gamma must be >= 0");
    if (!(tau > 0.0)) throw UserError("contrastive temperature must be > 0");
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& labels, double gamma,
                         const std::optional<torch::Tensor>& class_weights) {
    if (logits.size(0) == 0) throw UserError("focal loss on an empty batch");
    if (gamma < 0.0) throw UserError("focal gamma must be >= 0");
    auto y = labels.to(torch::kLong).view({-1, 1});
    auto log_pt = torch::log_softmax(logits, 1).gather(1, y).squeeze(1);
    auto pt = log_pt.exp();
    auto per_sample = -torch::pow(1.0 - pt, gamma) * log_pt;
    if (class_weights) {
        auto w = class_weights->to(logits.options()).index_select(0, y.squeeze(1));
        return (w * per_sample).sum() / w.sum();
    }
    return per_sample.mean();
}

torch::Tensor supcon_loss(const torch::Tensor& z, const torch::Tensor& labels, double tau) {
    const int64_t n = z.size(0);
    if (n < 2) throw UserError("supervised contrastive loss needs at least two samples");
    if (!(tau > 0.0)) throw UserError("contrastive temperature must be > 0");
    auto y = labels.to(torch::kLong).view({-1});
    auto self = torch::eye(n, torch::TensorOptions().dtype(torch::kBool));
    auto positives = (y.view({-1, 1}) == y.view({1, -1})).logical_and(self.logical_not());
    auto pos_count = positives.sum(1);
    auto valid = pos_count > 0;
    if (!valid.any().item<bool>()) throw UserError("batch has no positive pairs");

    auto sim = z.matmul(z.t()) / tau;
    auto log_denominator = torch::logsumexp(sim.masked_fill(self, -std::numeric_limits<double>::infinity()), 1, true);
    auto log_prob = sim - log_denominator;
    auto pos_mask = positives.to(z.scalar_type());
    auto mean_log_prob = (log_prob.masked_fill(positives.logical_not(), 0.0) * pos_mask).sum(1) /
                         pos_count.clamp_min(1).to(z.scalar_type());
    return -mean_log_prob.masked_select(valid).mean();
}

torch::Tensor morph_loss(const torch::Tensor& f_x, const torch::Tensor& f_tx) {
    if (!f_x.sizes().equals(f_tx.sizes())) throw UserError("morphology loss: feature dims differ");
    return (f_x - f_tx).square().mean();
}

torch::Tensor spatial_loss(const std::vector<torch::Tensor>& masks) {
    if (masks.empty()) throw UserError("spatial loss needs at least one mask");
    torch::Tensor total;
    for (const auto& m : masks) {
        TORCH_CHECK(m.dim() == 4, "masks must be N×1×h×w");
        auto dv = (m.narrow(2, 1, m.size(2) - 1) - m.narrow(2, 0, m.size(2) - 1)).abs();
        auto dh = (m.narrow(3, 1, m.size(3) - 1) - m.narrow(3, 0, m.size(3) - 1)).abs();
        const double pairs = static_cast<double>(dv.numel() + dh.numel());
        if (pairs == 0.0) throw UserError("spatial loss needs masks with at least two cells");
        auto tv = (dv.sum() + dh.sum()) / pairs;
        total = total.defined() ? total + tv : tv;
    }
    return total / static_cast<double>(masks.size());
}

torch::Tensor apply_transform(const torch::Tensor& images, Transform t) {
    switch (t) {
        case Transform::identity: return images;
        case Transform::hflip: return images.flip({-1});
        case Transform::rot90: return images.rot90(1, {-2, -1});
        case Transform::rot180: return images.rot90(2, {-2, -1});
        case Transform::rot270: return images.rot90(3, {-2, -1});
    }
    throw std::invalid_argument("unknown transform");
}

torch::Tensor build_relation_matrix(const std::vector<int>& taxonomy, double w_same) {
    if (taxonomy.empty()) throw UserError("taxonomy is empty");
    if (!(w_same > 0.0 && w_same <= 1.0)) throw UserError("w_same must lie in (0,1]");
    const auto c = static_cast<int64_t>(taxonomy.size());
    auto r = torch::zeros({c, c}, torch::kFloat64);
    auto acc = r.accessor<double, 2>();
    for (int64_t i = 0; i < c; ++i) {
        int64_t block = 0;
        for (int64_t j = 0; j < c; ++j) block += taxonomy[i] == taxonomy[j];
        for (int64_t j = 0; j < c; ++j) {
            if (taxonomy[i] == taxonomy[j]) acc[i][j] = w_same / static_cast<double>(block);
        }
        acc[i][i] += 1.0 - w_same;
    }
    return r;
}

torch::Tensor bio_loss(const torch::Tensor& probs, const torch::Tensor& relation) {
    auto p = probs.dim() == 1 ? probs.unsqueeze(0) : probs;
    {
        torch::NoGradGuard no_grad;
        const double eps = p.scalar_type() == torch::kFloat64 ? 1e-6 : 1e-5;
        const double off = (p.sum(1) - 1.0).abs().max().item<double>();
        const double neg = (-p).max().item<double>();
        if (off > eps || neg > eps) throw UserError("bio loss: probability vector is off the simplex");
    }
    auto r = relation.to(p.options());
    auto residual = p - p.matmul(r.t());
    return residual.square().sum(1).mean();
}

std::array<double, kNumComponents> LossComponents::to_doubles() const {
    std::array<double, kNumComponents> out{};
    for (std::size_t i = 0; i < kNumComponents; ++i) {
        out[i] = values[i].defined() ? values[i].item<double>() : 0.0;
    }
    return out;
}

torch::Tensor total_loss(const LossComponents& components, const LossWeights& weights) {
    torch::Tensor total;
    for (std::size_t i = 0; i < kNumComponents; ++i) {
        const auto& v = components.values[i];
        if (!v.defined()) continue;
        if (!std::isfinite(v.item<double>())) {
            throw DivergenceError("non-finite loss component: " + component_names()[i]);
        }
        if (weights.alpha[i] == 0.0) continue;
        auto term = weights.alpha[i] * v;
        total = total.defined() ? total + term : term;
    }
    if (!total.defined()) throw UserError("total loss has no active components");
    return total;
}

}  // namespace histo::losses

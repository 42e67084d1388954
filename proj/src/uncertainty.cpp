#include "histo/uncertainty.hpp"

namespace histo::uncertainty {

torch::Tensor mc_forward_features(HistoNet& model, const torch::Tensor& f_global, int passes,
                                  at::Generator& generator,
                                  const std::optional<torch::Tensor>& magnification_rank) {
    if (passes < 1) throw UserError("Monte Carlo passes must be >= 1");
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> samples;
    samples.reserve(static_cast<std::size_t>(passes));
    const auto ctx = experts::DropoutContext::on(generator);
    for (int t = 0; t < passes; ++t) {
        auto g = model->classify(f_global, ctx, magnification_rank);
        samples.push_back(torch::softmax(g.final_logits, 1));
    }
    return torch::stack(samples, 0);
}

torch::Tensor mc_forward(HistoNet& model, const torch::Tensor& images, int passes, at::Generator& generator) {
    if (passes < 1) throw UserError("Monte Carlo passes must be >= 1");
    torch::NoGradGuard no_grad;
    auto encoded = model->encode(model->extract(images));
    return mc_forward_features(model, encoded.f_global, passes, generator);
}

Summary summarize(const torch::Tensor& samples) {
    auto s = samples.dim() == 2 ? samples.unsqueeze(1) : samples;
    TORCH_CHECK(s.dim() == 3 && s.size(0) >= 1, "expected T×N×C samples");
    Summary out;
    // shifted by the first pass so identical passes give exactly zero variance
    auto dev = s - s[0].unsqueeze(0);
    auto mean_dev = dev.mean(0);
    out.mean_probs = s[0] + mean_dev;
    out.uncertainty = (dev - mean_dev.unsqueeze(0)).square().mean(0).mean(1);
    out.confidence = std::get<0>(out.mean_probs.max(1));
    out.entropy = -(out.mean_probs * out.mean_probs.clamp_min(1e-12).log()).sum(1);
    if (samples.dim() == 2) {
        out.mean_probs = out.mean_probs.squeeze(0);
    }
    return out;
}

Calibration calibration(const torch::Tensor& mean_probs, const torch::Tensor& labels) {
    TORCH_CHECK(mean_probs.dim() == 2 && mean_probs.size(0) == labels.size(0), "probs/labels mismatch");
    if (mean_probs.size(0) == 0) throw UserError("calibration on an empty set");
    auto [conf, pred] = mean_probs.to(torch::kFloat64).max(1);
    auto correct = pred == labels.to(torch::kLong);
    Calibration c;
    c.avg_confidence = conf.mean().item<double>();
    c.n_correct = static_cast<std::size_t>(correct.sum().item<int64_t>());
    c.n_wrong = static_cast<std::size_t>(mean_probs.size(0)) - c.n_correct;
    if (c.n_correct > 0) c.correct_confidence = conf.masked_select(correct).mean().item<double>();
    if (c.n_wrong > 0) c.wrong_confidence = conf.masked_select(correct.logical_not()).mean().item<double>();
    return c;
}

std::vector<bool> triage(const torch::Tensor& confidence, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw UserError("triage threshold must lie in (0,1]");
    auto c = confidence.to(torch::kFloat64).contiguous();
    std::vector<bool> flags(static_cast<std::size_t>(c.numel()));
    auto acc = c.accessor<double, 1>();
    for (int64_t i = 0; i < c.numel(); ++i) flags[static_cast<std::size_t>(i)] = acc[i] < threshold;
    return flags;
}

}  // namespace histo::uncertainty

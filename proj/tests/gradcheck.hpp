#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "histo/training.hpp"

namespace histo::test {

struct GradCheckResult {
    int coordinates = 0;
    double max_relative_error = 0.0;
    std::string worst;
    bool all_components_active = false;
};

/// Central finite differences of the total loss against autograd, on a
/// float64 four-class model fed random backbone maps (the frozen extractor
/// plays no part in the gradient). Coordinates are drawn from every head's
/// weights, the gate and the prototype bank.
inline GradCheckResult gradient_check(int coordinates, std::uint64_t seed, double step = 1e-5) {
    training::TrainConfig config;
    config.model.num_classes = 4;
    config.model.tiny_dim = 12;
    config.model.head_hidden = 16;
    config.model.projection_hidden = 16;
    config.model.embedding_dim = 8;
    config.model.prototypes_per_class = 2;
    config.loss.alpha = {1.0, 0.5, 0.5, 0.1, 0.05, 0.1};

    torch::manual_seed(seed);
    auto model = build_model(config.model, seed);
    model->to(torch::kFloat64);
    model->set_training(true);

    auto gen = make_generator(derive_seed(seed, 1));
    const int64_t n = 8;
    std::vector<torch::Tensor> raw{torch::randn({n, 12, 5, 5}, gen, torch::kFloat64).abs()};
    std::vector<torch::Tensor> transformed{raw[0].flip({3}) + 0.05 * torch::randn({n, 12, 5, 5}, gen, torch::kFloat64)};
    auto labels = torch::tensor({0, 0, 1, 1, 2, 2, 3, 3}, torch::kLong);
    auto relation = losses::build_relation_matrix({0, 0, 1, 1}).to(torch::kFloat64);

    auto total = [&]() {
        auto c = training::compute_components(model, raw, transformed, labels, relation, config,
                                              experts::DropoutContext::off());
        return losses::total_loss(c, config.loss);
    };

    GradCheckResult result;
    {
        auto c = training::compute_components(model, raw, transformed, labels, relation, config,
                                              experts::DropoutContext::off());
        result.all_components_active = std::all_of(c.values.begin(), c.values.end(), [](const torch::Tensor& t) {
            return t.defined() && t.item<double>() != 0.0;
        });
    }

    std::vector<std::pair<std::string, torch::Tensor>> params;
    auto bank = model->expert_bank();
    for (auto& item : bank->named_parameters(true)) {
        if (item.key().find("weight") != std::string::npos) params.emplace_back(item.key(), item.value());
    }
    params.emplace_back("prototypes", model->prototype_bank()->prototypes());

    model->zero_grad();
    total().backward();

    Rng rng(seed);
    for (int i = 0; i < coordinates; ++i) {
        auto& [name, p] = params[static_cast<std::size_t>(i) % params.size()];
        const auto flat_index = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(p.numel())));
        auto flat = p.detach().view({-1});
        const double analytic = p.grad().view({-1})[flat_index].item<double>();

        double plus = 0.0, minus = 0.0;
        {
            torch::NoGradGuard no_grad;
            const double original = flat[flat_index].item<double>();
            flat[flat_index] = original + step;
            plus = total().item<double>();
            flat[flat_index] = original - step;
            minus = total().item<double>();
            flat[flat_index] = original;
        }
        const double numeric = (plus - minus) / (2.0 * step);
        const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        const double rel = std::abs(analytic - numeric) / scale;
        ++result.coordinates;
        if (rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst = name + "[" + std::to_string(flat_index) + "] analytic " + std::to_string(analytic) +
                           " numeric " + std::to_string(numeric);
        }
    }
    return result;
}

}  // namespace histo::test

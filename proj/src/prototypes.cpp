#include "histo/prototypes.hpp"

namespace histo::prototypes {

PrototypeBankImpl::PrototypeBankImpl(const PrototypeOptions& options) : options_(options) {
    if (options.num_classes < 1 || options.per_class < 1 || options.dim < 1) {
        throw UserError("prototype bank dimensions must be positive");
    }
    prototypes_ = register_parameter(
        "prototypes", torch::randn({options.num_classes, options.per_class, options.dim}));
    validate();
}

void PrototypeBankImpl::assign(const torch::Tensor& values) {
    if (!values.sizes().equals(prototypes_.sizes())) throw UserError("prototype shape mismatch");
    torch::NoGradGuard no_grad;
    prototypes_.copy_(values);
}

void PrototypeBankImpl::validate() const {
    if (!(options_.margin > 0.0)) throw UserError("prototype margin must be positive");
    if (!(options_.push >= 0.0)) throw UserError("prototype push weight must be nonnegative");
    torch::NoGradGuard no_grad;
    if (!torch::isfinite(prototypes_).all().item<bool>()) throw UserError("prototype bank has non-finite entries");
}

namespace {

torch::Tensor unit(const torch::Tensor& x) { return x / (x.norm(2, {-1}, true) + kNormEpsilon); }

// sqrt with exact zero at the origin and a zero (rather than infinite)
// gradient there
torch::Tensor safe_sqrt(const torch::Tensor& sq) {
    auto positive = sq > 0;
    auto safe = torch::where(positive, sq, torch::ones_like(sq));
    return torch::where(positive, torch::sqrt(safe), torch::zeros_like(sq));
}

// min along the last dim, gradient routed to the first minimizing index
torch::Tensor first_min(const torch::Tensor& x) {
    auto idx = x.argmin(-1, true);
    return x.gather(-1, idx).squeeze(-1);
}

}  // namespace

torch::Tensor proto_distance(const torch::Tensor& f, const torch::Tensor& p) {
    return safe_sqrt((unit(f) - unit(p)).square().sum(-1));
}

torch::Tensor class_distances(const torch::Tensor& f_global, const torch::Tensor& prototypes) {
    TORCH_CHECK(f_global.dim() == 2 && prototypes.dim() == 3, "expected N×D features and C×J×D prototypes");
    TORCH_CHECK(f_global.size(1) == prototypes.size(2), "feature/prototype dim mismatch");
    auto d = proto_distance(f_global.unsqueeze(1).unsqueeze(1), prototypes.unsqueeze(0));  // N×C×J
    return first_min(d);
}

torch::Tensor proto_logits(const torch::Tensor& f_global, const torch::Tensor& prototypes) {
    return -class_distances(f_global, prototypes);
}

torch::Tensor proto_logits(const torch::Tensor& f_global, PrototypeBank& bank) {
    return proto_logits(f_global, bank->prototypes());
}

torch::Tensor proto_loss(const torch::Tensor& f_global, const torch::Tensor& labels,
                         const torch::Tensor& prototypes, double margin, double push) {
    const int64_t num_classes = prototypes.size(0);
    if (num_classes < 2) throw UserError("prototype loss needs at least two classes");
    auto dist = class_distances(f_global, prototypes);  // N×C
    auto y = labels.to(torch::kLong).view({-1, 1});
    auto own = dist.gather(1, y).squeeze(1);
    auto own_mask = torch::zeros_like(dist, torch::kBool).scatter_(1, y, true);
    auto nearest_other = first_min(dist.masked_fill(own_mask, std::numeric_limits<double>::infinity()));
    auto hinge = torch::relu(margin + own - nearest_other);
    return (own + push * hinge).mean();
}

torch::Tensor proto_loss(const torch::Tensor& f_global, const torch::Tensor& labels, PrototypeBank& bank) {
    return proto_loss(f_global, labels, bank->prototypes(), bank->options().margin, bank->options().push);
}

InitStrategy parse_init_strategy(const std::string& name) {
    if (name == "random_unit") return InitStrategy::random_unit;
    if (name == "kmeans_per_class") return InitStrategy::kmeans_per_class;
    throw UserError("unknown prototype init strategy: " + name);
}

std::string to_string(InitStrategy s) {
    return s == InitStrategy::random_unit ? "random_unit" : "kmeans_per_class";
}

torch::Tensor kmeans(const torch::Tensor& points, int64_t k, std::uint64_t seed, int max_iter) {
    TORCH_CHECK(points.dim() == 2, "kmeans expects n×D points");
    const int64_t n = points.size(0);
    if (n < k || k < 1) throw UserError("kmeans needs at least k points");
    auto x = points.to(torch::kFloat64);
    Rng rng(seed);

    // k-means++ seeding
    std::vector<int64_t> chosen{static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(n)))};
    auto nearest_sq = (x - x[chosen[0]]).square().sum(1);
    while (static_cast<int64_t>(chosen.size()) < k) {
        const double total = nearest_sq.sum().item<double>();
        int64_t pick = 0;
        if (total <= 0.0) {
            pick = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        } else {
            double r = rng.uniform() * total;
            auto acc = nearest_sq.accessor<double, 1>();
            for (pick = 0; pick < n - 1; ++pick) {
                r -= acc[pick];
                if (r < 0.0) break;
            }
        }
        chosen.push_back(pick);
        nearest_sq = torch::minimum(nearest_sq, (x - x[pick]).square().sum(1));
    }
    auto centroids = x.index_select(0, torch::tensor(chosen, torch::kLong)).clone();

    torch::Tensor assignment;
    for (int it = 0; it < max_iter; ++it) {
        auto d = torch::cdist(x, centroids);
        auto next = d.argmin(1);
        if (assignment.defined() && next.equal(assignment)) break;
        assignment = next;
        for (int64_t c = 0; c < k; ++c) {
            auto members = (assignment == c).nonzero().squeeze(1);
            if (members.numel() > 0) centroids[c] = x.index_select(0, members).mean(0);
        }
    }
    return centroids.to(points.scalar_type());
}

void init_prototypes(PrototypeBank& bank, InitStrategy strategy, std::uint64_t seed,
                     const torch::Tensor& features, const torch::Tensor& labels) {
    const auto& o = bank->options();
    auto gen = make_generator(seed);
    auto opts = bank->prototypes().options();
    auto values = unit(torch::randn({o.num_classes, o.per_class, o.dim}, gen, opts.dtype(torch::kFloat64))).to(opts.dtype());

    if (strategy == InitStrategy::kmeans_per_class) {
        if (!features.defined() || !labels.defined()) throw UserError("kmeans_per_class needs features and labels");
        torch::NoGradGuard no_grad;
        auto y = labels.to(torch::kLong);
        for (int64_t c = 0; c < o.num_classes; ++c) {
            auto members = (y == c).nonzero().squeeze(1);
            if (members.numel() < o.per_class) {
                log::warn("class " + std::to_string(c) + " has fewer than " + std::to_string(o.per_class) +
                          " samples; random prototypes used");
                continue;
            }
            auto centroids = kmeans(features.index_select(0, members).detach(), o.per_class, derive_seed(seed, c));
            values[c] = unit(centroids.to(torch::kFloat64)).to(opts.dtype());
        }
    }
    bank->assign(values);
}

}  // namespace histo::prototypes

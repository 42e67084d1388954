#include "histo/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "histo/config.hpp"

namespace histo::training {

using json = nlohmann::json;

Ablation parse_ablation(const std::string& name) {
    if (name == "full" || name.empty()) return Ablation::full;
    if (name == "A1") return Ablation::A1;
    if (name == "A2") return Ablation::A2;
    if (name == "A3") return Ablation::A3;
    if (name == "A4") return Ablation::A4;
    throw UserError("unknown ablation '" + name + "' (expected full, A1, A2, A3 or A4)");
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::A1: return "A1";
        case Ablation::A2: return "A2";
        case Ablation::A3: return "A3";
        case Ablation::A4: return "A4";
    }
    return "full";
}

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    if (epochs < 0) throw UserError("train.epochs must be >= 0");
    if (batch_size < 1) throw UserError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !(backbone_learning_rate >= 0.0)) throw UserError("learning rates must be positive");
    if (!(weight_decay >= 0.0)) throw UserError("train.weight_decay must be >= 0");
    if (patience < 1) throw UserError("train.patience must be >= 1");
    if (folds < 2) throw UserError("train.folds must be >= 2");
    if (!(relation_w_same >= 0.0 && relation_w_same <= 1.0)) throw UserError("train.relation_w_same must lie in [0,1]");
}

TrainConfig apply_ablation(TrainConfig config) {
    using losses::Component;
    auto& alpha = config.loss.alpha;
    switch (config.ablation) {
        case Ablation::full:
        case Ablation::A1:
            break;
        case Ablation::A2:
            alpha = {1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
            config.loss.gamma = 0.0;
            break;
        case Ablation::A3:
            config.model.use_attention = false;
            alpha[static_cast<std::size_t>(Component::spatial)] = 0.0;
            break;
        case Ablation::A4:
            config.model.use_prototypes = false;
            alpha[static_cast<std::size_t>(Component::proto)] = 0.0;
            break;
    }
    return config;
}

torch::Tensor LoadedDataset::rows(const dataset::DatasetIndex& subset) const {
    std::vector<int64_t> r;
    r.reserve(subset.size());
    for (const auto& s : subset.samples) {
        auto it = row_of.find(s.id);
        if (it == row_of.end()) throw UserError("sample " + s.id + " is not part of the loaded dataset");
        r.push_back(it->second);
    }
    return torch::tensor(r, torch::kLong);
}

LoadedDataset load_dataset(const dataset::DatasetIndex& index, const dataset::NormalizationStats& stats,
                           const dataset::ImageLoader& loader) {
    LoadedDataset d;
    d.index = index;
    d.index.stats = stats;
    d.stats = stats;
    d.images = dataset::load_batch(index, stats, loader);
    std::vector<int64_t> labels, mags;
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto& s = index.samples[i];
        labels.push_back(s.subtype);
        mags.push_back(magnification_rank(s.magnification));
        if (!d.row_of.emplace(s.id, static_cast<int64_t>(i)).second) throw UserError("duplicate sample id " + s.id);
    }
    d.labels = torch::tensor(labels, torch::kLong);
    d.magnification_rank = torch::tensor(mags, torch::kLong);
    return d;
}

double backbone_fingerprint(HistoNet& model) {
    torch::NoGradGuard no_grad;
    double acc = 0.0;
    double k = 1.0;
    for (auto& p : model->backbone_parameters()) {
        acc += k * p.to(torch::kFloat64).sum().item<double>();
        k += 1.0;
    }
    for (std::size_t e = 0; e < model->specs().size(); ++e) {
        for (auto& b : model->extractor(e).buffers()) {
            if (!b.is_floating_point()) continue;
            acc += k * b.to(torch::kFloat64).sum().item<double>();
            k += 1.0;
        }
    }
    return acc;
}

FeatureCache::FeatureCache(HistoNet model, const LoadedDataset& data, int64_t chunk)
    : model_(std::move(model)), data_(&data), chunk_(chunk), fingerprint_(backbone_fingerprint(model_)) {
    if (model_->config().train_backbone) throw UserError("feature caching needs a frozen backbone");
    if (chunk_ < 1) throw UserError("cache chunk must be positive");
}

const std::vector<torch::Tensor>& FeatureCache::maps(losses::Transform t) {
    const int key = static_cast<int>(t);
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;

    torch::NoGradGuard no_grad;
    const int64_t n = data_->size();
    std::vector<std::vector<torch::Tensor>> parts(model_->specs().size());
    for (int64_t start = 0; start < n; start += chunk_) {
        auto batch = data_->images.slice(0, start, std::min(n, start + chunk_));
        auto out = model_->extract(losses::apply_transform(batch, t));
        for (std::size_t k = 0; k < out.size(); ++k) parts[k].push_back(out[k]);
    }
    std::vector<torch::Tensor> full;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        if (parts[k].empty()) {
            full.push_back(model_->extract(data_->images.slice(0, 0, 0))[k]);
        } else {
            full.push_back(torch::cat(parts[k], 0));
        }
    }
    return maps_.emplace(key, std::move(full)).first->second;
}

std::vector<torch::Tensor> FeatureCache::maps(losses::Transform t, const torch::Tensor& rows) {
    std::vector<torch::Tensor> out;
    for (const auto& m : maps(t)) out.push_back(m.index_select(0, rows));
    return out;
}

bool FeatureCache::compatible_with(HistoNet& model) const {
    return !model->config().train_backbone && model->specs().size() == model_->specs().size() &&
           backbone_fingerprint(model) == fingerprint_;
}

void MetricsLog::append(const EpochRecord& record, const std::string& stage) const {
    json j;
    if (!stage.empty()) j["stage"] = stage;
    j["fold"] = record.fold;
    j["epoch"] = record.epoch;
    for (std::size_t i = 0; i < losses::kNumComponents; ++i) {
        j["loss_" + losses::component_names()[i]] = record.components[i];
    }
    j["loss_total"] = record.total;
    j["val_accuracy"] = record.val_accuracy;
    j["val_f1"] = record.val_f1;
    j["val_loss"] = record.val_loss;
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    if (!out) throw UserError("cannot write metrics log " + path_.string());
    out << j.dump() << "\n";
}

namespace {

void copy_module_state(torch::nn::Module& from, torch::nn::Module& to) {
    torch::NoGradGuard no_grad;
    auto src_p = from.named_parameters(true);
    for (auto& item : to.named_parameters(true)) item.value().copy_(src_p[item.key()]);
    auto src_b = from.named_buffers(true);
    for (auto& item : to.named_buffers(true)) item.value().copy_(src_b[item.key()]);
}

std::vector<torch::Tensor> snapshot_state(HistoNet& model) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> state;
    for (auto& p : model->parameters()) state.push_back(p.detach().clone());
    for (auto& b : model->buffers()) state.push_back(b.detach().clone());
    return state;
}

void restore_state(HistoNet& model, const std::vector<torch::Tensor>& state) {
    torch::NoGradGuard no_grad;
    std::size_t i = 0;
    for (auto& p : model->parameters()) p.copy_(state.at(i++));
    for (auto& b : model->buffers()) b.copy_(state.at(i++));
}

bool has_positive_pair(const torch::Tensor& labels) {
    auto counts = torch::bincount(labels.to(torch::kLong));
    return counts.numel() > 0 && counts.max().item<int64_t>() >= 2;
}

std::vector<torch::Tensor> gather_maps(HistoNet& model, const LoadedDataset& data, FeatureCache* cache,
                                       losses::Transform t, const torch::Tensor& rows) {
    if (cache) return cache->maps(t, rows);
    return model->extract(losses::apply_transform(data.images.index_select(0, rows), t));
}

torch::Tensor predict_rows(HistoNet& model, const LoadedDataset& data, FeatureCache* cache, const torch::Tensor& rows,
                           int64_t chunk = 64) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    for (int64_t start = 0; start < rows.numel(); start += chunk) {
        auto r = rows.slice(0, start, std::min(rows.numel(), start + chunk));
        auto maps = gather_maps(model, data, cache, losses::Transform::identity, r);
        auto enc = model->encode(maps);
        std::optional<torch::Tensor> mag;
        if (model->config().route_by_magnification) mag = data.magnification_rank.index_select(0, r);
        parts.push_back(torch::softmax(model->classify(enc.f_global, experts::DropoutContext::off(), mag).final_logits, 1));
    }
    if (parts.empty()) return torch::zeros({0, model->config().num_classes});
    return torch::cat(parts, 0);
}

struct Validation {
    evaluation::ClassificationMetrics metrics;
    double loss = 0.0;  // mean cross-entropy of the final probabilities
};

Validation validate_rows(HistoNet& model, const LoadedDataset& data, FeatureCache* cache, const torch::Tensor& rows) {
    auto probs = predict_rows(model, data, cache, rows);
    auto pred = probs.argmax(1).contiguous();
    auto labels = data.labels.index_select(0, rows).contiguous();
    std::vector<std::int64_t> p(pred.data_ptr<int64_t>(), pred.data_ptr<int64_t>() + pred.numel());
    std::vector<std::int64_t> y(labels.data_ptr<int64_t>(), labels.data_ptr<int64_t>() + labels.numel());
    Validation v;
    v.metrics = evaluation::compute_metrics(p, y, static_cast<int>(model->config().num_classes));
    v.loss = -probs.to(torch::kFloat64).gather(1, labels.view({-1, 1})).clamp_min(1e-12).log().mean().item<double>();
    return v;
}

void init_fold_prototypes(HistoNet& model, const LoadedDataset& data, FeatureCache* cache,
                          const torch::Tensor& train_rows, std::uint64_t seed) {
    if (!model->config().use_prototypes) return;
    const auto strategy = prototypes::parse_init_strategy(model->config().prototype_init);
    auto bank = model->prototype_bank();
    if (strategy == prototypes::InitStrategy::random_unit) {
        prototypes::init_prototypes(bank, strategy, seed);
        return;
    }
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> feats;
    for (int64_t start = 0; start < train_rows.numel(); start += 64) {
        auto r = train_rows.slice(0, start, std::min(train_rows.numel(), start + 64));
        feats.push_back(model->encode(gather_maps(model, data, cache, losses::Transform::identity, r)).f_global);
    }
    prototypes::init_prototypes(bank, strategy, seed, torch::cat(feats, 0), data.labels.index_select(0, train_rows));
}

constexpr std::array<losses::Transform, 4> kAugmentations{losses::Transform::hflip, losses::Transform::rot90,
                                                         losses::Transform::rot180, losses::Transform::rot270};

json history_to_json(const std::vector<EpochRecord>& history) {
    json arr = json::array();
    for (const auto& r : history) {
        arr.push_back({{"fold", r.fold},
                       {"epoch", r.epoch},
                       {"components", r.components},
                       {"total", r.total},
                       {"val_accuracy", r.val_accuracy},
                       {"val_f1", r.val_f1},
                       {"val_loss", r.val_loss}});
    }
    return arr;
}

std::vector<EpochRecord> history_from_json(const json& arr) {
    std::vector<EpochRecord> out;
    for (const auto& j : arr) {
        EpochRecord r;
        r.fold = j.at("fold");
        r.epoch = j.at("epoch");
        r.components = j.at("components").get<std::array<double, losses::kNumComponents>>();
        r.total = j.at("total");
        r.val_accuracy = j.at("val_accuracy");
        r.val_f1 = j.at("val_f1");
        r.val_loss = j.at("val_loss");
        out.push_back(r);
    }
    return out;
}

struct ResumeState {
    int next_epoch = 0;
    double best_f1 = -1.0;
    double best_tie_break = 0.0;
    int best_epoch = -1;
    int since_best = 0;
    std::vector<EpochRecord> history;
    std::vector<torch::Tensor> best_state;
};

void save_resume(const fs::path& path, HistoNet& model, torch::optim::AdamW& optim, const ResumeState& s) {
    torch::serialize::OutputArchive archive;
    json meta{{"next_epoch", s.next_epoch},
              {"best_f1", s.best_f1},
              {"best_tie_break", s.best_tie_break},
              {"best_epoch", s.best_epoch},
              {"since_best", s.since_best},
              {"history", history_to_json(s.history)},
              {"best_state_size", s.best_state.size()}};
    archive.write("meta", c10::IValue(meta.dump()));
    torch::serialize::OutputArchive model_archive, optim_archive, best_archive;
    model->save(model_archive);
    optim.save(optim_archive);
    for (std::size_t i = 0; i < s.best_state.size(); ++i) best_archive.write(std::to_string(i), s.best_state[i]);
    archive.write("model", model_archive);
    archive.write("optim", optim_archive);
    archive.write("best", best_archive);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    archive.save_to(tmp.string());
    fs::rename(tmp, path);
}

ResumeState load_resume(const fs::path& path, HistoNet& model, torch::optim::AdamW& optim) {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    c10::IValue meta_value;
    archive.read("meta", meta_value);
    const auto meta = json::parse(meta_value.toStringRef());
    ResumeState s;
    s.next_epoch = meta.at("next_epoch");
    s.best_f1 = meta.at("best_f1");
    s.best_tie_break = meta.at("best_tie_break");
    s.best_epoch = meta.at("best_epoch");
    s.since_best = meta.at("since_best");
    s.history = history_from_json(meta.at("history"));
    torch::serialize::InputArchive model_archive, optim_archive, best_archive;
    archive.read("model", model_archive);
    archive.read("optim", optim_archive);
    archive.read("best", best_archive);
    model->load(model_archive);
    optim.load(optim_archive);
    const std::size_t n = meta.at("best_state_size");
    for (std::size_t i = 0; i < n; ++i) {
        torch::Tensor t;
        best_archive.read(std::to_string(i), t);
        s.best_state.push_back(t);
    }
    return s;
}

}  // namespace

HistoNet build_fold_model(const ModelConfig& config, std::uint64_t backbone_seed, std::uint64_t seed) {
    auto model = build_model(config, seed);
    for (std::size_t k = 0; k < model->specs().size(); ++k) {
        torch::manual_seed(derive_seed(backbone_seed, k));
        auto reference = backbone::make_extractor(model->specs()[k]);
        copy_module_state(*reference, model->extractor(k));
    }
    return model;
}

HistoNet build_fold_model(const ModelConfig& config, HistoNet& reference, std::uint64_t seed) {
    auto model = build_model(config, seed);
    if (reference->specs().size() != model->specs().size()) throw UserError("reference model has other backbones");
    for (std::size_t k = 0; k < model->specs().size(); ++k) copy_module_state(reference->extractor(k), model->extractor(k));
    return model;
}

HistoNet build_reference_model(const ModelConfig& config, std::uint64_t backbone_seed, const LoadedDataset& data) {
    auto model = build_fold_model(config, backbone_seed, 0);
    if (config.pretrained || config.train_backbone) return model;
    for (std::size_t k = 0; k < model->specs().size(); ++k) {
        backbone::recalibrate_batch_norm(model->extractor(k), data.images);
    }
    return model;
}

losses::LossComponents compute_components(HistoNet& model, const std::vector<torch::Tensor>& raw_maps,
                                          const std::vector<torch::Tensor>& transformed_maps,
                                          const torch::Tensor& labels, const torch::Tensor& relation,
                                          const TrainConfig& config, const experts::DropoutContext& ctx,
                                          const std::optional<torch::Tensor>& magnification_rank) {
    using losses::Component;
    const auto& w = config.loss;
    losses::LossComponents c;
    auto enc = model->encode(raw_maps);
    auto gated = model->classify(enc.f_global, ctx, magnification_rank);

    if (w.active(Component::focal)) c[Component::focal] = losses::focal_loss(gated.final_logits, labels, w.gamma);
    if (w.active(Component::supcon) && has_positive_pair(labels)) {
        c[Component::supcon] = losses::supcon_loss(enc.z, labels, w.tau);
    }
    if (w.active(Component::proto) && model->config().use_prototypes) {
        auto bank = model->prototype_bank();
        c[Component::proto] = prototypes::proto_loss(enc.f_global, labels, bank);
    }
    if (w.active(Component::morph) && !transformed_maps.empty()) {
        auto enc_t = model->encode(transformed_maps);
        c[Component::morph] = losses::morph_loss(enc.f_global, enc_t.f_global);
    }
    if (w.active(Component::spatial) && !enc.attention_masks.empty()) {
        c[Component::spatial] = losses::spatial_loss(enc.attention_masks);
    }
    if (w.active(Component::bio)) {
        c[Component::bio] = losses::bio_loss(torch::softmax(gated.final_logits, 1), relation);
    }
    return c;
}

FoldResult train_fold(HistoNet model, const LoadedDataset& data, const torch::Tensor& train_rows,
                      const torch::Tensor& val_rows, const TrainConfig& config, const FoldOptions& options) {
    config.validate();
    if (train_rows.numel() == 0) throw UserError("training split is empty");
    FeatureCache* cache = options.cache;
    if (cache && !cache->compatible_with(model)) throw UserError("feature cache does not match the model backbone");

    const std::uint64_t fold_seed = derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(options.fold));
    const auto relation = losses::build_relation_matrix(dataset::subtype_taxonomy(), config.relation_w_same);

    // zero epochs means the training data is never looked at, prototypes included
    if (config.epochs > 0) init_fold_prototypes(model, data, cache, train_rows, derive_seed(fold_seed, 1));

    std::vector<torch::Tensor> head_params;
    std::vector<torch::Tensor> backbone_params;
    {
        auto bb = model->backbone_parameters();
        for (auto& p : model->trainable_parameters()) {
            const bool in_backbone = std::any_of(bb.begin(), bb.end(), [&](const torch::Tensor& b) { return b.is_same(p); });
            (in_backbone ? backbone_params : head_params).push_back(p);
        }
    }
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(head_params, std::make_unique<torch::optim::AdamWOptions>(
                                         torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay)));
    if (!backbone_params.empty()) {
        groups.emplace_back(backbone_params,
                            std::make_unique<torch::optim::AdamWOptions>(
                                torch::optim::AdamWOptions(config.backbone_learning_rate).weight_decay(config.weight_decay)));
    }
    torch::optim::AdamW optim(groups, torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
    const std::array<double, 2> base_lr{config.learning_rate, config.backbone_learning_rate};

    ResumeState state;
    if (options.state_path && fs::exists(*options.state_path)) {
        state = load_resume(*options.state_path, model, optim);
        log::info("resuming fold " + std::to_string(options.fold) + " at epoch " + std::to_string(state.next_epoch));
    }

    std::vector<int64_t> order(static_cast<std::size_t>(train_rows.numel()));
    {
        auto tr = train_rows.contiguous();
        std::copy(tr.data_ptr<int64_t>(), tr.data_ptr<int64_t>() + tr.numel(), order.begin());
    }
    const bool route = config.model.route_by_magnification;
    const bool need_transform = config.loss.active(losses::Component::morph);

    int epoch = state.next_epoch;
    for (; epoch < config.epochs && state.since_best < config.patience; ++epoch) {
        const double factor = 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / config.epochs));
        for (std::size_t g = 0; g < optim.param_groups().size(); ++g) {
            optim.param_groups()[g].options().set_lr(base_lr[g] * factor);
        }

        model->set_training(true);
        Rng rng(derive_seed(fold_seed, 100 + static_cast<std::uint64_t>(epoch)));
        auto gen = make_generator(derive_seed(fold_seed, 10000 + static_cast<std::uint64_t>(epoch)));
        auto shuffled = order;
        rng.shuffle(shuffled);

        std::array<double, losses::kNumComponents> sums{};
        double total_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < shuffled.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const auto end = std::min(shuffled.size(), start + static_cast<std::size_t>(config.batch_size));
            auto rows = torch::tensor(std::vector<int64_t>(shuffled.begin() + static_cast<long>(start),
                                                           shuffled.begin() + static_cast<long>(end)),
                                      torch::kLong);
            const auto transform = kAugmentations[rng.below(kAugmentations.size())];
            auto raw = gather_maps(model, data, cache, losses::Transform::identity, rows);
            std::vector<torch::Tensor> transformed;
            if (need_transform) transformed = gather_maps(model, data, cache, transform, rows);
            std::optional<torch::Tensor> mag;
            if (route) mag = data.magnification_rank.index_select(0, rows);

            auto comps = compute_components(model, raw, transformed, data.labels.index_select(0, rows), relation,
                                            config, experts::DropoutContext::on(gen), mag);
            auto loss = losses::total_loss(comps, config.loss);
            optim.zero_grad();
            loss.backward();
            optim.step();

            const auto values = comps.to_doubles();
            for (std::size_t i = 0; i < values.size(); ++i) sums[i] += values[i];
            total_sum += loss.item<double>();
            ++batches;
        }

        model->set_training(false);
        EpochRecord record;
        record.fold = options.fold;
        record.epoch = epoch;
        for (std::size_t i = 0; i < sums.size(); ++i) record.components[i] = sums[i] / std::max(1, batches);
        record.total = total_sum / std::max(1, batches);
        // without validation rows the lowest training loss wins
        double score = 0.0;
        double tie_break = record.total;
        if (val_rows.numel() > 0) {
            auto v = validate_rows(model, data, cache, val_rows);
            record.val_accuracy = v.metrics.accuracy;
            record.val_f1 = v.metrics.weighted_f1;
            record.val_loss = v.loss;
            score = v.metrics.weighted_f1;
            tie_break = v.loss;
        }
        state.history.push_back(record);
        if (options.log) options.log->append(record, options.stage);

        // equal F1 falls back to the lower validation loss
        const bool better = state.best_epoch < 0 || score > state.best_f1 ||
                            (score == state.best_f1 && tie_break < state.best_tie_break);
        if (better) {
            state.best_f1 = score;
            state.best_tie_break = tie_break;
            state.best_epoch = epoch;
            state.best_state = snapshot_state(model);
            state.since_best = 0;
        } else {
            ++state.since_best;
        }
        state.next_epoch = epoch + 1;
        if (options.state_path) save_resume(*options.state_path, model, optim, state);
    }

    if (!state.best_state.empty()) restore_state(model, state.best_state);
    model->set_training(false);

    FoldResult result;
    result.model = model;
    result.best_epoch = state.best_epoch;
    result.epochs_run = state.next_epoch;
    result.history = state.history;
    if (val_rows.numel() > 0) result.val_metrics = validate_rows(model, data, cache, val_rows).metrics;
    return result;
}

std::vector<double> member_weights_from_f1(const std::vector<double>& f1) {
    if (f1.empty()) throw UserError("ensemble has no members");
    double total = 0.0;
    for (double v : f1) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw UserError("member F1 scores must be finite and nonnegative");
        total += v;
    }
    std::vector<double> w(f1.size(), 1.0 / static_cast<double>(f1.size()));
    if (total > 0.0) {
        for (std::size_t i = 0; i < f1.size(); ++i) w[i] = f1[i] / total;
    }
    return w;
}

Ensemble select_best_fold(const Ensemble& ensemble) {
    if (ensemble.members.empty()) throw UserError("ensemble has no members");
    std::size_t best = 0;
    for (std::size_t i = 1; i < ensemble.members.size(); ++i) {
        if (ensemble.members[i].val_f1 > ensemble.members[best].val_f1) best = i;
    }
    Ensemble out;
    out.members.push_back(ensemble.members[best]);
    out.weights = {1.0};
    out.shared_backbone = ensemble.shared_backbone;
    return out;
}

Ensemble train_ensemble(const LoadedDataset& data, const dataset::DatasetIndex& train_index, const TrainConfig& config,
                        const EnsembleOptions& options) {
    const auto cfg = apply_ablation(config);
    cfg.validate();
    const auto folds = dataset::kfold_split(train_index, cfg.folds, cfg.seed);

    std::unique_ptr<FeatureCache> own_cache;
    FeatureCache* cache = cfg.model.train_backbone ? nullptr : options.cache;
    HistoNet reference = cache ? cache->model() : build_reference_model(cfg.model, options.backbone_seed, data);
    if (!cfg.model.train_backbone && !cache) {
        own_cache = std::make_unique<FeatureCache>(reference, data);
        cache = own_cache.get();
    }

    Ensemble ensemble;
    std::vector<double> f1;
    for (std::size_t k = 0; k < folds.size(); ++k) {
        auto model = build_fold_model(cfg.model, reference, derive_seed(cfg.seed, 500 + k));
        FoldOptions fo;
        fo.fold = static_cast<int>(k);
        fo.cache = cache;
        fo.log = options.log;
        fo.stage = options.stage;
        if (options.state_dir) fo.state_path = *options.state_dir / ("fold_" + std::to_string(k) + ".state");
        auto result = train_fold(model, data, data.rows(folds[k].train), data.rows(folds[k].val), cfg, fo);
        log::info("fold " + std::to_string(k) + ": val accuracy " + std::to_string(result.val_metrics.accuracy) +
                  ", weighted F1 " + std::to_string(result.val_metrics.weighted_f1) + " (best epoch " +
                  std::to_string(result.best_epoch) + ")");
        ensemble.members.push_back({result.model, static_cast<int>(k), result.val_metrics.weighted_f1, result.best_epoch});
        f1.push_back(result.val_metrics.weighted_f1);
    }
    ensemble.weights = member_weights_from_f1(f1);
    ensemble.shared_backbone = !cfg.model.train_backbone;
    if (cfg.ablation == Ablation::A1) return select_best_fold(ensemble);
    return ensemble;
}

uncertainty::Summary combine_member_summaries(const std::vector<uncertainty::Summary>& members,
                                              const std::vector<double>& weights) {
    if (members.empty() || members.size() != weights.size()) throw UserError("member/weight count mismatch");
    auto mean = torch::zeros_like(members[0].mean_probs);
    auto within = torch::zeros_like(members[0].uncertainty);
    for (std::size_t i = 0; i < members.size(); ++i) {
        mean = mean + weights[i] * members[i].mean_probs;
        within = within + weights[i] * members[i].uncertainty;
    }
    auto between = torch::zeros_like(members[0].mean_probs);
    for (std::size_t i = 0; i < members.size(); ++i) {
        between = between + weights[i] * (members[i].mean_probs - mean).square();
    }
    uncertainty::Summary s;
    s.mean_probs = mean;
    s.uncertainty = within + between.mean(-1);
    s.confidence = std::get<0>(mean.max(-1));
    s.entropy = -(mean * mean.clamp_min(1e-12).log()).sum(-1);
    return s;
}

uncertainty::Summary ensemble_predict_maps(Ensemble& ensemble, const std::vector<torch::Tensor>& raw_maps, int passes,
                                           std::uint64_t seed, const std::optional<torch::Tensor>& magnification_rank) {
    torch::NoGradGuard no_grad;
    std::vector<uncertainty::Summary> summaries;
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        auto& model = ensemble.members[i].model;
        model->set_training(false);
        auto gen = make_generator(derive_seed(seed, i));
        auto f = model->encode(raw_maps).f_global;
        summaries.push_back(uncertainty::summarize(uncertainty::mc_forward_features(model, f, passes, gen, magnification_rank)));
    }
    return combine_member_summaries(summaries, ensemble.weights);
}

uncertainty::Summary ensemble_predict(Ensemble& ensemble, const torch::Tensor& images, int passes, std::uint64_t seed) {
    torch::NoGradGuard no_grad;
    std::vector<uncertainty::Summary> summaries;
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        auto& model = ensemble.members[i].model;
        model->set_training(false);
        auto gen = make_generator(derive_seed(seed, i));
        summaries.push_back(uncertainty::summarize(uncertainty::mc_forward(model, images, passes, gen)));
    }
    return combine_member_summaries(summaries, ensemble.weights);
}

torch::Tensor ensemble_proba(Ensemble& ensemble, const torch::Tensor& images) {
    if (ensemble.members.empty()) throw UserError("ensemble has no members");
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> shared;
    if (ensemble.shared_backbone) shared = ensemble.members[0].model->extract(images);
    torch::Tensor out;
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        auto& model = ensemble.members[i].model;
        model->set_training(false);
        auto maps = ensemble.shared_backbone ? shared : model->extract(images);
        auto logits = model->classify(model->encode(maps).f_global, experts::DropoutContext::off()).final_logits;
        auto p = ensemble.weights[i] * torch::softmax(logits, 1);
        out = out.defined() ? out + p : p;
    }
    return out;
}

void save_ensemble(Ensemble& ensemble, const TrainConfig& config, const fs::path& path,
                   const std::string& extra_metadata_json) {
    if (ensemble.members.empty()) throw UserError("cannot save an empty ensemble");
    json members = json::array();
    for (const auto& m : ensemble.members) {
        members.push_back({{"fold", m.fold}, {"val_f1", m.val_f1}, {"best_epoch", m.best_epoch}});
    }
    std::vector<std::string> order;
    for (const auto& s : ensemble.members[0].model->specs()) order.push_back(s.name);
    json meta{{"format", "histo-ensemble-1"},
              {"config", config::train_config_snapshot(config)},
              {"members", members},
              {"weights", ensemble.weights},
              {"backbone_order", order},
              {"extra", json::parse(extra_metadata_json)}};

    torch::serialize::OutputArchive archive;
    archive.write("meta", c10::IValue(meta.dump()));
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        torch::serialize::OutputArchive member;
        ensemble.members[i].model->save(member);
        archive.write("member_" + std::to_string(i), member);
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    archive.save_to(tmp.string());
    fs::rename(tmp, path);
}

Ensemble load_ensemble(const fs::path& path, TrainConfig* config_out, std::string* metadata_out) {
    if (!fs::exists(path)) throw UserError("checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error&) {
        throw UserError("cannot read checkpoint " + path.string());
    }
    c10::IValue meta_value;
    archive.read("meta", meta_value);
    const auto meta = json::parse(meta_value.toStringRef());
    if (meta.value("format", "") != "histo-ensemble-1") throw UserError("unsupported checkpoint format");
    auto config = config::train_config_from_snapshot(meta.at("config"));
    auto model_config = config.model;
    model_config.pretrained = false;  // weights come from the checkpoint

    Ensemble ensemble;
    const auto& members = meta.at("members");
    for (std::size_t i = 0; i < members.size(); ++i) {
        auto model = build_model(model_config, 0);
        torch::serialize::InputArchive member;
        archive.read("member_" + std::to_string(i), member);
        model->load(member);
        model->set_training(false);
        ensemble.members.push_back({model, members[i].at("fold"), members[i].at("val_f1"), members[i].at("best_epoch")});
    }
    ensemble.weights = meta.at("weights").get<std::vector<double>>();
    if (!model_config.train_backbone) {
        const double reference = backbone_fingerprint(ensemble.members[0].model);
        ensemble.shared_backbone = std::all_of(ensemble.members.begin(), ensemble.members.end(),
                                               [&](Member& m) { return backbone_fingerprint(m.model) == reference; });
    }
    if (config_out) *config_out = config;
    if (metadata_out) *metadata_out = meta.dump();
    return ensemble;
}

}  // namespace histo::training

#include "histo/config.hpp"

#include <set>

namespace histo::config {

namespace {

// Reads fields out of one JSON object and rejects keys nobody asked for.
class StrictReader {
  public:
    StrictReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw UserError("config section '" + section_ + "' must be an object");
    }

    template <class T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw UserError("config key '" + section_ + "." + key + "': " + e.what());
        }
    }

    const json* sub(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw UserError("unknown config key '" + (section_.empty() ? "" : section_ + ".") + it.key() + "'");
            }
        }
    }

  private:
    const json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

void read_model(const json& j, ModelConfig& m) {
    StrictReader r(j, "model");
    r.read("backbones", m.backbones);
    r.read("tiny_dim", m.tiny_dim);
    r.read("train_backbone", m.train_backbone);
    r.read("pretrained", m.pretrained);
    r.read("weights_dir", m.weights_dir);
    r.read("num_classes", m.num_classes);
    r.read("num_experts", m.num_experts);
    r.read("head_hidden", m.head_hidden);
    r.read("dropout_rate", m.dropout_rate);
    r.read("route_by_magnification", m.route_by_magnification);
    r.read("projection_hidden", m.projection_hidden);
    r.read("embedding_dim", m.embedding_dim);
    r.read("use_attention", m.use_attention);
    r.read("use_prototypes", m.use_prototypes);
    r.read("prototypes_per_class", m.prototypes_per_class);
    r.read("proto_margin", m.proto_margin);
    r.read("proto_push", m.proto_push);
    r.read("prototype_init", m.prototype_init);
    r.read("lambda_expert", m.lambda_expert);
    r.read("lambda_proto", m.lambda_proto);
    r.finish();
}

void read_loss(const json& j, losses::LossWeights& l) {
    StrictReader r(j, "loss");
    std::vector<double> weights(l.alpha.begin(), l.alpha.end());
    r.read("weights", weights);
    if (weights.size() != losses::kNumComponents) {
        throw UserError("loss.weights must have 6 entries (focal, supcon, proto, morph, spatial, bio)");
    }
    std::copy(weights.begin(), weights.end(), l.alpha.begin());
    r.read("gamma", l.gamma);
    r.read("tau", l.tau);
    r.finish();
}

void read_train(const json& j, training::TrainConfig& t) {
    StrictReader r(j, "train");
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("learning_rate", t.learning_rate);
    r.read("backbone_learning_rate", t.backbone_learning_rate);
    r.read("weight_decay", t.weight_decay);
    r.read("patience", t.patience);
    r.read("folds", t.folds);
    r.read("seed", t.seed);
    std::string ablation = training::to_string(t.ablation);
    r.read("ablation", ablation);
    t.ablation = training::parse_ablation(ablation);
    r.read("relation_w_same", t.relation_w_same);
    r.finish();
}

}  // namespace

void ExperimentConfig::validate() const {
    if (!(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0)) {
        throw UserError("dataset.test_fraction must lie in (0,1)");
    }
    if (dataset.root.empty() && dataset.synthetic_n_per_class < 1) {
        throw UserError("dataset.synthetic_n_per_class must be >= 1");
    }
    train.validate();
    if (eval.protocol != "type1" && eval.protocol != "type2" && eval.protocol != "type3") {
        throw UserError("eval.protocol must be type1, type2 or type3");
    }
    if (eval.mc_passes < 1) throw UserError("eval.mc_passes must be >= 1");
    if (!(eval.triage_threshold > 0.0 && eval.triage_threshold <= 1.0)) {
        throw UserError("eval.triage_threshold must lie in (0,1]");
    }
    if (explain.patch_size < 1 || explain.stride < 1) throw UserError("explain.patch_size/stride must be >= 1");
    if (explain.n_per_cell < 0) throw UserError("explain.n_per_cell must be >= 0");
    if (output.run_dir.empty()) throw UserError("output.run_dir must not be empty");
}

json to_json(const ModelConfig& m) {
    return json{{"backbones", m.backbones},
                {"tiny_dim", m.tiny_dim},
                {"train_backbone", m.train_backbone},
                {"pretrained", m.pretrained},
                {"weights_dir", m.weights_dir},
                {"num_classes", m.num_classes},
                {"num_experts", m.num_experts},
                {"head_hidden", m.head_hidden},
                {"dropout_rate", m.dropout_rate},
                {"route_by_magnification", m.route_by_magnification},
                {"projection_hidden", m.projection_hidden},
                {"embedding_dim", m.embedding_dim},
                {"use_attention", m.use_attention},
                {"use_prototypes", m.use_prototypes},
                {"prototypes_per_class", m.prototypes_per_class},
                {"proto_margin", m.proto_margin},
                {"proto_push", m.proto_push},
                {"prototype_init", m.prototype_init},
                {"lambda_expert", m.lambda_expert},
                {"lambda_proto", m.lambda_proto}};
}

json to_json(const losses::LossWeights& l) {
    return json{{"weights", std::vector<double>(l.alpha.begin(), l.alpha.end())}, {"gamma", l.gamma}, {"tau", l.tau}};
}

json train_section_to_json(const training::TrainConfig& t) {
    return json{{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"learning_rate", t.learning_rate},
                {"backbone_learning_rate", t.backbone_learning_rate},
                {"weight_decay", t.weight_decay},
                {"patience", t.patience},
                {"folds", t.folds},
                {"seed", t.seed},
                {"ablation", training::to_string(t.ablation)},
                {"relation_w_same", t.relation_w_same}};
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["dataset"] = json{{"root", c.dataset.root},
                        {"synthetic_n_per_class", c.dataset.synthetic_n_per_class},
                        {"synthetic_magnifications", c.dataset.synthetic_magnifications},
                        {"synthetic_seed", c.dataset.synthetic_seed},
                        {"test_fraction", c.dataset.test_fraction},
                        {"seed", c.dataset.seed},
                        {"patient_disjoint", c.dataset.patient_disjoint}};
    j["model"] = to_json(c.train.model);
    j["loss"] = to_json(c.train.loss);
    j["train"] = train_section_to_json(c.train);
    j["eval"] = json{{"protocol", c.eval.protocol},
                     {"mc_passes", c.eval.mc_passes},
                     {"triage_threshold", c.eval.triage_threshold},
                     {"type2_train_magnification", c.eval.type2_train_magnification},
                     {"type2_test_magnifications", c.eval.type2_test_magnifications},
                     {"seed", c.eval.seed}};
    j["explain"] = json{{"n_per_cell", c.explain.n_per_cell},
                        {"confidence_threshold", c.explain.confidence_threshold},
                        {"patch_size", c.explain.patch_size},
                        {"stride", c.explain.stride},
                        {"baseline", c.explain.baseline},
                        {"coverage_fraction", c.explain.coverage_fraction},
                        {"seed", c.explain.seed}};
    j["output"] = json{{"run_dir", c.output.run_dir}};
    return j;
}

json train_config_snapshot(const training::TrainConfig& t) {
    return json{{"model", to_json(t.model)}, {"loss", to_json(t.loss)}, {"train", train_section_to_json(t)}};
}

training::TrainConfig train_config_from_snapshot(const json& j) {
    training::TrainConfig t;
    StrictReader r(j, "");
    if (auto* m = r.sub("model")) read_model(*m, t.model);
    if (auto* l = r.sub("loss")) read_loss(*l, t.loss);
    if (auto* s = r.sub("train")) read_train(*s, t);
    r.finish();
    return t;
}

ExperimentConfig parse_experiment(const json& j) {
    ExperimentConfig c;
    StrictReader top(j, "");
    if (auto* d = top.sub("dataset")) {
        StrictReader r(*d, "dataset");
        r.read("root", c.dataset.root);
        r.read("synthetic_n_per_class", c.dataset.synthetic_n_per_class);
        r.read("synthetic_magnifications", c.dataset.synthetic_magnifications);
        r.read("synthetic_seed", c.dataset.synthetic_seed);
        r.read("test_fraction", c.dataset.test_fraction);
        r.read("seed", c.dataset.seed);
        r.read("patient_disjoint", c.dataset.patient_disjoint);
        r.finish();
    }
    if (auto* m = top.sub("model")) read_model(*m, c.train.model);
    if (auto* l = top.sub("loss")) read_loss(*l, c.train.loss);
    if (auto* t = top.sub("train")) read_train(*t, c.train);
    if (auto* e = top.sub("eval")) {
        StrictReader r(*e, "eval");
        r.read("protocol", c.eval.protocol);
        r.read("mc_passes", c.eval.mc_passes);
        r.read("triage_threshold", c.eval.triage_threshold);
        r.read("type2_train_magnification", c.eval.type2_train_magnification);
        r.read("type2_test_magnifications", c.eval.type2_test_magnifications);
        r.read("seed", c.eval.seed);
        r.finish();
    }
    if (auto* x = top.sub("explain")) {
        StrictReader r(*x, "explain");
        r.read("n_per_cell", c.explain.n_per_cell);
        r.read("confidence_threshold", c.explain.confidence_threshold);
        r.read("patch_size", c.explain.patch_size);
        r.read("stride", c.explain.stride);
        r.read("baseline", c.explain.baseline);
        r.read("coverage_fraction", c.explain.coverage_fraction);
        r.read("seed", c.explain.seed);
        r.finish();
    }
    if (auto* o = top.sub("output")) {
        StrictReader r(*o, "output");
        r.read("run_dir", c.output.run_dir);
        r.finish();
    }
    top.finish();
    c.validate();
    return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw UserError("cannot parse config " + path.string() + ": " + e.what());
    }
    return parse_experiment(j);
}

std::string serialize(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

json apply_overrides(json j, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw UserError("override must look like key.path=value: " + o);
        const std::string path = o.substr(0, eq);
        const std::string raw = o.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;
        }
        json* node = &j;
        std::size_t start = 0;
        while (true) {
            const auto dot = path.find('.', start);
            const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (key.empty()) throw UserError("bad override key: " + path);
            if (dot == std::string::npos) {
                (*node)[key] = value;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
    return j;
}

}  // namespace histo::config

#include "histo/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace histo::evaluation {

using json = nlohmann::json;

Protocol parse_protocol(const std::string& name) {
    if (name == "type1") return Protocol::type1;
    if (name == "type2") return Protocol::type2;
    if (name == "type3") return Protocol::type3;
    throw UserError("unknown protocol '" + name + "' (expected type1, type2 or type3)");
}

std::string to_string(Protocol p) {
    switch (p) {
        case Protocol::type1: return "type1";
        case Protocol::type2: return "type2";
        case Protocol::type3: return "type3";
    }
    return "type3";
}

namespace {

std::set<int> magnifications_of(const dataset::DatasetIndex& index) {
    std::set<int> mags;
    for (const auto& s : index.samples) mags.insert(s.magnification);
    return mags;
}

dataset::DatasetIndex at_magnification(const dataset::DatasetIndex& index, int mag) {
    return index.filter([mag](const dataset::SampleDescriptor& s) { return s.magnification == mag; });
}

std::string mag_tag(int mag) { return std::to_string(mag) + "x"; }

// Fixed-precision text keeps reports byte-stable and round-trippable.
std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::vector<ProtocolStage> plan_protocol(Protocol protocol, const dataset::DatasetIndex& index,
                                         const ProtocolOptions& options) {
    if (index.empty()) throw UserError("cannot plan a protocol on an empty dataset");
    const auto present = magnifications_of(index);
    const dataset::SplitOptions split_options{options.test_fraction, options.seed, options.patient_disjoint};
    std::vector<ProtocolStage> stages;

    switch (protocol) {
        case Protocol::type1: {
            for (int mag : present) {
                auto split = dataset::stratified_split(at_magnification(index, mag), split_options);
                ProtocolStage s;
                s.name = "type1_" + mag_tag(mag);
                s.train_key = s.name;
                s.train_magnifications = {mag};
                s.test_magnifications = {mag};
                s.train = std::move(split.train);
                s.test = std::move(split.test);
                stages.push_back(std::move(s));
            }
            break;
        }
        case Protocol::type2: {
            const int train_mag = options.type2_train_magnification;
            if (!present.count(train_mag)) {
                throw UserError("training magnification " + mag_tag(train_mag) + " is absent from the dataset");
            }
            if (options.type2_test_magnifications.empty()) throw UserError("type2 needs at least one test magnification");
            for (int mag : options.type2_test_magnifications) {
                if (mag == train_mag) {
                    throw UserError("type2 cannot test on its training magnification " + mag_tag(mag));
                }
                if (!present.count(mag)) throw UserError("test magnification " + mag_tag(mag) + " is absent from the dataset");
            }
            auto split = dataset::stratified_split(index, split_options);
            auto train = at_magnification(split.train, train_mag);
            for (int mag : options.type2_test_magnifications) {
                ProtocolStage s;
                s.name = "type2_" + mag_tag(train_mag) + "_to_" + mag_tag(mag);
                s.train_key = "type2_" + mag_tag(train_mag);
                s.train_magnifications = {train_mag};
                s.test_magnifications = {mag};
                s.train = train;
                s.test = at_magnification(index, mag);
                stages.push_back(std::move(s));
            }
            break;
        }
        case Protocol::type3: {
            auto split = dataset::stratified_split(index, split_options);
            ProtocolStage s;
            s.name = "type3";
            s.train_key = "type3";
            s.train_magnifications.assign(present.begin(), present.end());
            s.test_magnifications = s.train_magnifications;
            s.train = std::move(split.train);
            s.test = std::move(split.test);
            stages.push_back(std::move(s));
            break;
        }
    }
    return stages;
}

EvalResult evaluate(training::Ensemble& ensemble, const training::LoadedDataset& data, const torch::Tensor& rows,
                    const EvalOptions& options) {
    if (rows.numel() == 0) throw UserError("evaluation set is empty");
    if (ensemble.members.empty()) throw UserError("ensemble has no members");
    torch::NoGradGuard no_grad;

    std::vector<torch::Tensor> means, uncs;
    for (int64_t start = 0; start < rows.numel(); start += options.chunk) {
        auto r = rows.slice(0, start, std::min(rows.numel(), start + options.chunk));
        auto images = data.images.index_select(0, r);
        // one dropout stream per chunk
        const auto seed = derive_seed(options.seed, static_cast<std::uint64_t>(start));
        uncertainty::Summary s;
        if (ensemble.shared_backbone) {
            auto maps = ensemble.members[0].model->extract(images);
            std::optional<torch::Tensor> mag;
            if (ensemble.members[0].model->config().route_by_magnification) {
                mag = data.magnification_rank.index_select(0, r);
            }
            s = training::ensemble_predict_maps(ensemble, maps, options.mc_passes, seed, mag);
        } else {
            s = training::ensemble_predict(ensemble, images, options.mc_passes, seed);
        }
        means.push_back(s.mean_probs);
        uncs.push_back(s.uncertainty);
    }
    EvalResult result;
    result.mean_probs = torch::cat(means, 0).to(torch::kFloat64);
    auto uncertainty = torch::cat(uncs, 0).to(torch::kFloat64).contiguous();
    auto [conf_t, pred_t] = result.mean_probs.max(1);
    auto conf = conf_t.contiguous();
    auto pred = pred_t.contiguous();
    auto labels = data.labels.index_select(0, rows).contiguous();
    const auto flags = uncertainty::triage(conf, options.triage_threshold);

    std::vector<std::int64_t> p, y;
    auto rows_c = rows.contiguous();
    for (int64_t i = 0; i < rows.numel(); ++i) {
        const auto& desc = data.index.samples[static_cast<std::size_t>(rows_c.data_ptr<int64_t>()[i])];
        SampleRecord rec;
        rec.id = desc.id;
        rec.label = static_cast<int>(labels.data_ptr<int64_t>()[i]);
        rec.prediction = static_cast<int>(pred.data_ptr<int64_t>()[i]);
        rec.magnification = desc.magnification;
        rec.confidence = conf.data_ptr<double>()[i];
        rec.uncertainty = uncertainty.data_ptr<double>()[i];
        rec.flagged = flags[static_cast<std::size_t>(i)];
        p.push_back(rec.prediction);
        y.push_back(rec.label);
        result.samples.push_back(rec);
    }

    const auto num_classes = static_cast<int>(ensemble.members[0].model->config().num_classes);
    auto& rep = result.report;
    rep.metrics = compute_metrics(p, y, num_classes);
    if (rep.metrics.any_zero_predicted) log::warn("some classes were never predicted; their precision is reported as 0");
    const auto cal = uncertainty::calibration(result.mean_probs, labels);
    rep.avg_confidence = cal.avg_confidence;
    rep.correct_confidence = cal.correct_confidence;
    rep.wrong_confidence = cal.wrong_confidence;
    rep.avg_uncertainty = uncertainty.mean().item<double>();
    rep.n_flagged = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
    rep.mc_passes = options.mc_passes;
    rep.triage_threshold = options.triage_threshold;
    rep.seed = options.seed;
    std::set<int> mags;
    for (const auto& s : result.samples) mags.insert(s.magnification);
    rep.test_magnifications.assign(mags.begin(), mags.end());
    return result;
}

json report_to_json(const EvalReport& r) {
    json j;
    j["protocol"] = r.protocol;
    j["stage"] = r.stage;
    j["train_magnifications"] = r.train_magnifications;
    j["test_magnifications"] = r.test_magnifications;
    j["n"] = r.metrics.n;
    j["accuracy"] = r.metrics.accuracy;
    j["weighted_precision"] = r.metrics.weighted_precision;
    j["weighted_recall"] = r.metrics.weighted_recall;
    j["weighted_f1"] = r.metrics.weighted_f1;
    j["confusion"] = r.metrics.confusion;
    j["per_class"] = json{{"precision", r.metrics.precision},
                          {"recall", r.metrics.recall},
                          {"f1", r.metrics.f1},
                          {"support", r.metrics.support},
                          {"zero_predicted", r.metrics.zero_predicted}};
    j["avg_uncertainty"] = r.avg_uncertainty;
    j["avg_confidence"] = r.avg_confidence;
    j["correct_confidence"] = r.correct_confidence ? json(*r.correct_confidence) : json(nullptr);
    j["wrong_confidence"] = r.wrong_confidence ? json(*r.wrong_confidence) : json(nullptr);
    j["n_flagged"] = r.n_flagged;
    j["mc_passes"] = r.mc_passes;
    j["triage_threshold"] = r.triage_threshold;
    j["seed"] = r.seed;
    j["config_digest"] = r.config_digest;
    j["checkpoint_digest"] = r.checkpoint_digest;
    j["per_sample_table"] = r.per_sample_table;
    return j;
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    try {
        r.protocol = j.at("protocol");
        r.stage = j.at("stage");
        r.train_magnifications = j.at("train_magnifications").get<std::vector<int>>();
        r.test_magnifications = j.at("test_magnifications").get<std::vector<int>>();
        r.metrics.n = j.at("n");
        r.metrics.accuracy = j.at("accuracy");
        r.metrics.weighted_precision = j.at("weighted_precision");
        r.metrics.weighted_recall = j.at("weighted_recall");
        r.metrics.weighted_f1 = j.at("weighted_f1");
        r.metrics.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
        const auto& pc = j.at("per_class");
        r.metrics.precision = pc.at("precision").get<std::vector<double>>();
        r.metrics.recall = pc.at("recall").get<std::vector<double>>();
        r.metrics.f1 = pc.at("f1").get<std::vector<double>>();
        r.metrics.support = pc.at("support").get<std::vector<std::int64_t>>();
        r.metrics.zero_predicted = pc.at("zero_predicted").get<std::vector<bool>>();
        r.metrics.any_zero_predicted =
            std::find(r.metrics.zero_predicted.begin(), r.metrics.zero_predicted.end(), true) !=
            r.metrics.zero_predicted.end();
        r.avg_uncertainty = j.at("avg_uncertainty");
        r.avg_confidence = j.at("avg_confidence");
        if (!j.at("correct_confidence").is_null()) r.correct_confidence = j.at("correct_confidence").get<double>();
        if (!j.at("wrong_confidence").is_null()) r.wrong_confidence = j.at("wrong_confidence").get<double>();
        r.n_flagged = j.at("n_flagged");
        r.mc_passes = j.at("mc_passes");
        r.triage_threshold = j.at("triage_threshold");
        r.seed = j.at("seed");
        r.config_digest = j.at("config_digest");
        r.checkpoint_digest = j.at("checkpoint_digest");
        r.per_sample_table = j.at("per_sample_table");
    } catch (const json::exception& e) {
        throw UserError(std::string("malformed report: ") + e.what());
    }
    return r;
}

std::string format_sample_table(const std::vector<SampleRecord>& records) {
    std::string out = "# id\tlabel\tprediction\tmagnification\tconfidence\tuncertainty\tflag\n";
    for (const auto& r : records) {
        out += r.id + "\t" + std::to_string(r.label) + "\t" + std::to_string(r.prediction) + "\t" +
               std::to_string(r.magnification) + "\t" + fmt(r.confidence) + "\t" + fmt(r.uncertainty) + "\t" +
               (r.flagged ? "1" : "0") + "\n";
    }
    return out;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return fields;
}

template <class F>
void for_each_data_line(std::string_view text, F&& f) {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        try {
            f(split_tabs(line));
        } catch (const std::logic_error&) {
            throw UserError("malformed table line " + std::to_string(lineno));
        }
    }
}

}  // namespace

std::vector<SampleRecord> parse_sample_table(std::string_view text) {
    std::vector<SampleRecord> out;
    for_each_data_line(text, [&](const std::vector<std::string>& f) {
        if (f.size() != 7) throw std::invalid_argument("field count");
        SampleRecord r;
        r.id = f[0];
        r.label = std::stoi(f[1]);
        r.prediction = std::stoi(f[2]);
        r.magnification = std::stoi(f[3]);
        r.confidence = std::stod(f[4]);
        r.uncertainty = std::stod(f[5]);
        r.flagged = f[6] == "1";
        out.push_back(r);
    });
    return out;
}

std::vector<EmbeddingRow> export_embeddings(HistoNet& model, const training::LoadedDataset& data,
                                            const torch::Tensor& rows, int64_t chunk) {
    torch::NoGradGuard no_grad;
    model->set_training(false);
    std::vector<EmbeddingRow> out;
    auto rows_c = rows.contiguous();
    for (int64_t start = 0; start < rows.numel(); start += chunk) {
        auto r = rows_c.slice(0, start, std::min(rows.numel(), start + chunk));
        auto f = model->encode(model->extract(data.images.index_select(0, r))).f_global.to(torch::kFloat).contiguous();
        for (int64_t i = 0; i < r.numel(); ++i) {
            const auto& desc = data.index.samples[static_cast<std::size_t>(r.data_ptr<int64_t>()[i])];
            EmbeddingRow row;
            row.id = desc.id;
            row.label = desc.subtype;
            row.magnification = desc.magnification;
            const float* p = f[i].data_ptr<float>();
            row.vector.assign(p, p + f.size(1));
            out.push_back(std::move(row));
        }
    }
    return out;
}

std::string format_embeddings(const std::vector<EmbeddingRow>& rows) {
    std::string out = "# id\tlabel\tmagnification\tf_global...\n";
    char buf[32];
    for (const auto& r : rows) {
        out += r.id + "\t" + std::to_string(r.label) + "\t" + std::to_string(r.magnification);
        for (float v : r.vector) {
            std::snprintf(buf, sizeof buf, "\t%.9g", static_cast<double>(v));
            out += buf;
        }
        out += "\n";
    }
    return out;
}

std::vector<EmbeddingRow> parse_embeddings(std::string_view text) {
    std::vector<EmbeddingRow> out;
    for_each_data_line(text, [&](const std::vector<std::string>& f) {
        if (f.size() < 4) throw std::invalid_argument("field count");
        EmbeddingRow r;
        r.id = f[0];
        r.label = std::stoi(f[1]);
        r.magnification = std::stoi(f[2]);
        for (std::size_t i = 3; i < f.size(); ++i) r.vector.push_back(std::stof(f[i]));
        out.push_back(std::move(r));
    });
    return out;
}

}  // namespace histo::evaluation

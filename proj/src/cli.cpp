#include "histo/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "histo/image_io.hpp"
#include "histo/interpretability.hpp"
#include "histo/plotting.hpp"

namespace histo::cli {

using json = nlohmann::json;

RunPaths resolve_run_paths(const config::ExperimentConfig& config) {
    fs::path dir = config.output.run_dir;
    if (dir.is_relative()) {
        if (const char* root = std::getenv(kRunRootEnv); root && *root) dir = fs::path(root) / dir;
    }
    return RunPaths{dir};
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw UserError("run directory " + dir.string() + " is locked by another command (remove " + path_.string() +
                        " if no command is running)");
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

config::ExperimentConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
    json j;
    if (path) {
        try {
            j = json::parse(read_text_file(*path));
        } catch (const json::parse_error& e) {
            throw UserError("cannot parse config " + path->string() + ": " + e.what());
        }
    } else {
        j = config::to_json(config::ExperimentConfig{});
    }
    return config::parse_experiment(config::apply_overrides(std::move(j), overrides));
}

namespace {

void require_file(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw UserError("missing " + p.string() + " (" + hint + ")");
}

json stats_to_json(const dataset::NormalizationStats& s) { return json{{"mean", s.mean}, {"stddev", s.stddev}}; }

dataset::NormalizationStats stats_from_json(const json& j) {
    dataset::NormalizationStats s;
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.stddev = j.at("stddev").get<std::array<double, 3>>();
    s.validate();
    return s;
}

dataset::DatasetIndex load_index(const config::ExperimentConfig& config) {
    if (config.dataset.root.empty()) {
        return dataset::generate_synthetic_dataset(config.dataset.synthetic_n_per_class,
                                                   config.dataset.synthetic_magnifications,
                                                   config.dataset.synthetic_seed);
    }
    if (!fs::is_directory(config.dataset.root)) throw UserError("dataset root not found: " + config.dataset.root);
    return dataset::scan_breakhis(config.dataset.root);
}

evaluation::ProtocolOptions protocol_options(const config::ExperimentConfig& c) {
    evaluation::ProtocolOptions o;
    o.test_fraction = c.dataset.test_fraction;
    o.seed = c.dataset.seed;
    o.patient_disjoint = c.dataset.patient_disjoint;
    o.type2_train_magnification = c.eval.type2_train_magnification;
    o.type2_test_magnifications = c.eval.type2_test_magnifications;
    return o;
}

std::string config_digest(const config::ExperimentConfig& c) { return sha256_hex(config::serialize(c)); }

std::vector<std::string> unique_train_keys(const std::vector<PlannedStage>& plan) {
    std::vector<std::string> keys;
    for (const auto& s : plan) {
        if (std::find(keys.begin(), keys.end(), s.train_key) == keys.end()) keys.push_back(s.train_key);
    }
    return keys;
}

const PlannedStage& first_stage_for(const std::vector<PlannedStage>& plan, const std::string& key) {
    for (const auto& s : plan) {
        if (s.train_key == key) return s;
    }
    throw UserError("no stage trains " + key);
}

void check_backbones(const config::ExperimentConfig& config, training::Ensemble& ensemble) {
    const auto wanted = backbone::resolve_all(config.train.model.backbones, config.train.model.tiny_dim);
    const auto& have = ensemble.members.at(0).model->specs();
    bool same = wanted.size() == have.size();
    for (std::size_t i = 0; same && i < wanted.size(); ++i) {
        same = wanted[i].name == have[i].name && wanted[i].feature_dim == have[i].feature_dim;
    }
    if (!same) {
        std::string names;
        for (const auto& s : have) names += (names.empty() ? "" : ",") + s.name;
        throw UserError("checkpoint backbones (" + names + ") do not match the configured backbones");
    }
}

struct LoadedCheckpoint {
    training::Ensemble ensemble;
    training::TrainConfig train_config;
    dataset::NormalizationStats stats;
    std::string digest;
};

LoadedCheckpoint open_checkpoint(const config::ExperimentConfig& config, const fs::path& path) {
    LoadedCheckpoint c;
    std::string meta;
    c.ensemble = training::load_ensemble(path, &c.train_config, &meta);
    check_backbones(config, c.ensemble);
    const auto extra = json::parse(meta).at("extra");
    if (!extra.contains("stats")) throw UserError("checkpoint lacks normalization statistics");
    c.stats = stats_from_json(extra.at("stats"));
    c.digest = file_sha256(path);
    return c;
}

fs::path checkpoint_for(const RunPaths& paths, const std::string& key, const std::optional<fs::path>& override_path) {
    auto p = override_path ? *override_path : paths.checkpoint(key);
    require_file(p, "run the train command first");
    return p;
}

std::string percent(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v << "%";
    return s.str();
}

}  // namespace

std::vector<PlannedStage> read_plan(const RunPaths& paths) {
    require_file(paths.plan(), "run the prepare command first");
    std::vector<PlannedStage> plan;
    try {
        const auto doc = json::parse(read_text_file(paths.plan()));
        for (const auto& s : doc.at("stages")) {
            plan.push_back({s.at("name"), s.at("train_key"), s.at("train_magnifications").get<std::vector<int>>(),
                            s.at("test_magnifications").get<std::vector<int>>()});
        }
    } catch (const json::exception& e) {
        throw UserError("malformed plan " + paths.plan().string() + ": " + e.what());
    }
    return plan;
}

evaluation::ProtocolStage read_stage(const RunPaths& paths, const PlannedStage& stage) {
    const auto manifest = paths.stage_manifest(stage.name);
    require_file(manifest, "run the prepare command first");
    evaluation::ProtocolStage s;
    s.name = stage.name;
    s.train_key = stage.train_key;
    s.train_magnifications = stage.train_magnifications;
    s.test_magnifications = stage.test_magnifications;
    for (auto& r : dataset::parse_manifest(read_text_file(manifest))) {
        if (r.role == "train") {
            s.train.samples.push_back(std::move(r.sample));
        } else if (r.role == "test") {
            s.test.samples.push_back(std::move(r.sample));
        } else {
            throw UserError("unexpected role '" + r.role + "' in " + manifest.string());
        }
    }
    return s;
}

std::string count_summary(const dataset::DatasetIndex& index) {
    std::set<int> mags;
    std::map<std::pair<int, int>, int> counts;
    for (const auto& s : index.samples) {
        mags.insert(s.magnification);
        ++counts[{s.magnification, static_cast<int>(s.superclass())}];
    }
    std::ostringstream out;
    out << std::left << std::setw(14) << "Magnification" << std::right << std::setw(8) << "Benign" << std::setw(11)
        << "Malignant" << std::setw(8) << "Total" << "\n";
    int benign = 0, malignant = 0;
    for (int m : mags) {
        const int b = counts[{m, 0}], mal = counts[{m, 1}];
        benign += b;
        malignant += mal;
        out << std::left << std::setw(14) << (std::to_string(m) + "X") << std::right << std::setw(8) << b
            << std::setw(11) << mal << std::setw(8) << b + mal << "\n";
    }
    out << std::left << std::setw(14) << "Total" << std::right << std::setw(8) << benign << std::setw(11) << malignant
        << std::setw(8) << benign + malignant << "\n";
    return out.str();
}

void cmd_prepare(const config::ExperimentConfig& config, std::ostream& out) {
    const auto paths = resolve_run_paths(config);
    RunLock lock(paths.root);
    fs::create_directories(paths.manifests());

    const auto index = load_index(config);
    if (index.empty()) throw UserError("dataset is empty");
    {
        std::vector<dataset::ManifestRecord> records;
        for (const auto& s : index.samples) records.push_back({s, "all"});
        write_text_file(paths.manifests() / "dataset.tsv", dataset::format_manifest(records));
    }

    const auto protocol = evaluation::parse_protocol(config.eval.protocol);
    const auto stages = evaluation::plan_protocol(protocol, index, protocol_options(config));
    json plan{{"protocol", config.eval.protocol}, {"stages", json::array()}};
    std::set<std::string> prepared_keys;
    for (const auto& stage : stages) {
        plan["stages"].push_back({{"name", stage.name},
                                  {"train_key", stage.train_key},
                                  {"train_magnifications", stage.train_magnifications},
                                  {"test_magnifications", stage.test_magnifications}});
        std::vector<dataset::ManifestRecord> records;
        for (const auto& s : stage.train.samples) records.push_back({s, "train"});
        for (const auto& s : stage.test.samples) records.push_back({s, "test"});
        write_text_file(paths.stage_manifest(stage.name), dataset::format_manifest(records));

        if (!prepared_keys.insert(stage.train_key).second) continue;
        const auto folds = dataset::kfold_split(stage.train, config.train.folds, config.train.seed);
        std::vector<dataset::ManifestRecord> fold_records;
        for (std::size_t k = 0; k < folds.size(); ++k) {
            for (const auto& s : folds[k].val.samples) fold_records.push_back({s, "fold" + std::to_string(k)});
        }
        write_text_file(paths.folds_manifest(stage.train_key), dataset::format_manifest(fold_records));
        const auto stats = dataset::compute_normalization_stats(stage.train);
        write_text_file(paths.stats(stage.train_key), stats_to_json(stats).dump(2) + "\n");
    }
    write_text_file(paths.plan(), plan.dump(2) + "\n");
    write_text_file(paths.root / "config.json", config::serialize(config));

    out << count_summary(index);
    for (const auto& stage : stages) {
        out << stage.name << ": " << stage.train.size() << " train, " << stage.test.size() << " test\n";
    }
}

void cmd_train(const config::ExperimentConfig& config, bool resume, std::ostream& out) {
    const auto paths = resolve_run_paths(config);
    RunLock lock(paths.root);
    const auto plan = read_plan(paths);
    const auto train_config = training::apply_ablation(config.train);

    for (const auto& key : unique_train_keys(plan)) {
        const auto stage = read_stage(paths, first_stage_for(plan, key));
        require_file(paths.stats(key), "run the prepare command first");
        const auto stats = stats_from_json(json::parse(read_text_file(paths.stats(key))));

        const auto state_dir = paths.train_state(key);
        const auto log_path = paths.train_log(key);
        if (!resume) {
            fs::remove_all(state_dir);
            fs::remove(log_path);
        }
        fs::create_directories(state_dir);
        const training::MetricsLog log(log_path);

        const auto data = training::load_dataset(stage.train, stats);
        training::EnsembleOptions options;
        options.log = &log;
        options.stage = key;
        options.state_dir = state_dir;
        options.backbone_seed = train_config.seed;
        std::unique_ptr<training::FeatureCache> cache;
        if (!train_config.model.train_backbone) {
            cache = std::make_unique<training::FeatureCache>(
                training::build_reference_model(train_config.model, options.backbone_seed, data), data);
            options.cache = cache.get();
        }
        auto ensemble = training::train_ensemble(data, stage.train, train_config, options);

        json extra{{"train_key", key},
                   {"stats", stats_to_json(stats)},
                   {"train_manifest_digest", file_sha256(paths.stage_manifest(stage.name))},
                   {"use_attention", train_config.model.use_attention},
                   {"use_prototypes", train_config.model.use_prototypes},
                   {"ablation", training::to_string(train_config.ablation)}};
        training::save_ensemble(ensemble, train_config, paths.checkpoint(key), extra.dump());
        out << key << ": " << ensemble.members.size() << " member(s), weights";
        for (double w : ensemble.weights) out << " " << std::setprecision(4) << w;
        out << " -> " << paths.checkpoint(key).string() << "\n";
    }
}

void cmd_eval(const config::ExperimentConfig& config, const std::optional<fs::path>& checkpoint, std::ostream& out) {
    const auto paths = resolve_run_paths(config);
    RunLock lock(paths.root);
    const auto plan = read_plan(paths);
    fs::create_directories(paths.reports());

    for (const auto& planned : plan) {
        const auto stage = read_stage(paths, planned);
        auto ckpt = open_checkpoint(config, checkpoint_for(paths, planned.train_key, checkpoint));
        const auto data = training::load_dataset(stage.test, ckpt.stats);

        evaluation::EvalOptions options;
        options.mc_passes = config.eval.mc_passes;
        options.triage_threshold = config.eval.triage_threshold;
        options.seed = config.eval.seed;
        auto result = evaluation::evaluate(ckpt.ensemble, data, torch::arange(data.size()), options);
        auto& report = result.report;
        report.protocol = config.eval.protocol;
        report.stage = stage.name;
        report.train_magnifications = stage.train_magnifications;
        report.config_digest = config_digest(config);
        report.checkpoint_digest = ckpt.digest;
        report.per_sample_table = paths.samples(stage.name).filename().string();

        write_text_file(paths.samples(stage.name), evaluation::format_sample_table(result.samples));
        write_text_file(paths.report(stage.name), evaluation::report_to_json(report).dump(2) + "\n");

        // embeddings of the highest-weighted member
        const auto best = static_cast<std::size_t>(
            std::max_element(ckpt.ensemble.weights.begin(), ckpt.ensemble.weights.end()) - ckpt.ensemble.weights.begin());
        auto rows = evaluation::export_embeddings(ckpt.ensemble.members[best].model, data, torch::arange(data.size()));
        write_text_file(paths.embeddings(stage.name), evaluation::format_embeddings(rows));

        out << stage.name << ": accuracy " << percent(report.metrics.accuracy) << ", weighted F1 "
            << percent(report.metrics.weighted_f1) << ", avg confidence " << percent(report.avg_confidence)
            << ", flagged " << report.n_flagged << "/" << report.metrics.n << "\n";
    }
}

void cmd_explain(const config::ExperimentConfig& config, const std::optional<fs::path>& checkpoint,
                 std::ostream& out) {
    const auto paths = resolve_run_paths(config);
    RunLock lock(paths.root);
    const auto plan = read_plan(paths);
    const auto& ex = config.explain;

    for (const auto& planned : plan) {
        const auto stage = read_stage(paths, planned);
        require_file(paths.samples(stage.name), "run the eval command first");
        const auto table = evaluation::parse_sample_table(read_text_file(paths.samples(stage.name)));

        std::vector<interpretability::CohortCandidate> candidates;
        for (const auto& r : table) candidates.push_back({r.id, r.label, r.magnification, r.confidence});
        std::vector<int> classes(static_cast<std::size_t>(config.train.model.num_classes));
        std::iota(classes.begin(), classes.end(), 0);
        const auto cohort = interpretability::select_xai_cohort(candidates, ex.n_per_cell, ex.confidence_threshold,
                                                                ex.seed, classes, stage.test_magnifications);
        if (cohort.empty()) log::warn("XAI cohort for " + stage.name + " is empty");

        std::vector<interpretability::XaiRecord> records;
        const fs::path heatmap_dir = paths.figures() / "xai" / stage.name;
        fs::remove_all(heatmap_dir);
        if (!cohort.empty()) {
            auto ckpt = open_checkpoint(config, checkpoint_for(paths, planned.train_key, checkpoint));
            std::set<std::string> ids;
            for (const auto& c : cohort) ids.insert(c.id);
            auto subset = stage.test.filter([&](const dataset::SampleDescriptor& s) { return ids.count(s.id) > 0; });
            const auto data = training::load_dataset(subset, ckpt.stats);
            interpretability::ProbabilityFn fn = [&](const torch::Tensor& x) {
                return training::ensemble_proba(ckpt.ensemble, x);
            };
            interpretability::OcclusionOptions oo;
            oo.patch_size = ex.patch_size;
            oo.stride = ex.stride;
            oo.baseline = ex.baseline;
            const auto threshold = interpretability::CoverageThreshold::relative(ex.coverage_fraction);
            for (const auto& c : cohort) {
                const auto row = data.row_of.at(c.id);
                auto result = interpretability::occlusion_map(fn, data.images[row], oo, threshold);
                records.push_back({c.id, c.label, c.magnification, c.confidence, result.metrics});
                auto rgb = dataset::denormalize(data.images[row], ckpt.stats);
                image::write_png(heatmap_dir / (c.id + ".png"), interpretability::heatmap_overlay(rgb, result.map));
            }
        }
        write_text_file(paths.xai_records(stage.name), interpretability::format_xai_records(records));
        const auto summary = interpretability::summarize_xai(records, classes, stage.test_magnifications);
        std::vector<std::string> names(dataset::subtype_names().begin(), dataset::subtype_names().end());
        write_text_file(paths.xai_summary(stage.name), interpretability::format_xai_summary(summary, names));
        out << stage.name << ": " << records.size() << " heatmaps in " << heatmap_dir.string() << "\n";
    }
}

std::vector<fs::path> figure_paths(const RunPaths& paths, const std::string& stage) {
    return {paths.figures() / (stage + "_uncertainty_hist.png"),
            paths.figures() / (stage + "_confidence_correct_wrong.png"),
            paths.figures() / (stage + "_uncertainty_vs_confidence.png"),
            paths.figures() / (stage + "_confusion.png"),
            paths.figures() / (stage + "_embedding_tsne.png")};
}

void cmd_plot(const config::ExperimentConfig& config, std::ostream& out) {
    const auto paths = resolve_run_paths(config);
    RunLock lock(paths.root);
    const auto plan = read_plan(paths);

    std::vector<std::string> missing;
    for (const auto& s : plan) {
        for (const auto& p : {paths.report(s.name), paths.samples(s.name), paths.embeddings(s.name)}) {
            if (!fs::exists(p)) missing.push_back(p.string());
        }
    }
    if (!missing.empty()) {
        std::string msg = "missing artifacts (run eval first):";
        for (const auto& m : missing) msg += "\n  " + m;
        throw UserError(msg);
    }

    fs::create_directories(paths.figures());
    std::vector<std::string> names(dataset::subtype_names().begin(), dataset::subtype_names().end());
    for (const auto& s : plan) {
        const auto report = evaluation::report_from_json(json::parse(read_text_file(paths.report(s.name))));
        const auto samples = evaluation::parse_sample_table(read_text_file(paths.samples(s.name)));
        const auto embeddings = evaluation::parse_embeddings(read_text_file(paths.embeddings(s.name)));
        const auto files = figure_paths(paths, s.name);

        std::vector<double> unc, correct, wrong;
        std::vector<plotting::ScatterPoint> scatter;
        double unc_max = 0.0;
        for (const auto& r : samples) {
            unc.push_back(r.uncertainty);
            unc_max = std::max(unc_max, r.uncertainty);
            (r.label == r.prediction ? correct : wrong).push_back(r.confidence);
            scatter.push_back({r.confidence, r.uncertainty,
                               r.label == r.prediction ? plotting::Colour{44, 160, 44} : plotting::Colour{214, 39, 40}});
        }
        const double hi = unc_max > 0.0 ? unc_max : 1e-6;
        plotting::plot_histograms({{"ALL", plotting::histogram(unc, 30, 0.0, hi), {31, 119, 180}}},
                                  "PREDICTIVE UNCERTAINTY", "MC VARIANCE", files[0]);
        plotting::plot_histograms({{"CORRECT", plotting::histogram(correct, 20, 0.0, 1.0), {44, 160, 44}},
                                   {"WRONG", plotting::histogram(wrong, 20, 0.0, 1.0), {214, 39, 40}}},
                                  "CONFIDENCE: CORRECT VS WRONG", "CONFIDENCE", files[1]);
        plotting::plot_scatter(scatter, "UNCERTAINTY VS CONFIDENCE", "CONFIDENCE", "UNCERTAINTY", files[2],
                               {{"CORRECT", {44, 160, 44}}, {"WRONG", {214, 39, 40}}});
        plotting::plot_confusion(report.metrics.confusion, names, "CONFUSION " + s.name, files[3]);

        std::vector<plotting::ScatterPoint> embedded;
        if (!embeddings.empty()) {
            const auto d = static_cast<int64_t>(embeddings[0].vector.size());
            auto m = torch::empty({static_cast<int64_t>(embeddings.size()), d}, torch::kFloat64);
            for (std::size_t i = 0; i < embeddings.size(); ++i) {
                for (int64_t k = 0; k < d; ++k) m[static_cast<int64_t>(i)][k] = embeddings[i].vector[static_cast<std::size_t>(k)];
            }
            plotting::TsneOptions to;
            to.seed = config.eval.seed;
            auto y = plotting::tsne(m, to).contiguous();
            auto acc = y.accessor<double, 2>();
            for (std::size_t i = 0; i < embeddings.size(); ++i) {
                embedded.push_back({acc[static_cast<int64_t>(i)][0], acc[static_cast<int64_t>(i)][1],
                                    plotting::class_colour(embeddings[i].label)});
            }
        }
        std::vector<std::pair<std::string, plotting::Colour>> legend;
        for (std::size_t k = 0; k < names.size(); ++k) legend.push_back({names[k].substr(0, 14), plotting::class_colour(static_cast<int>(k))});
        plotting::plot_scatter(embedded, "T-SNE OF F_GLOBAL " + s.name, "DIM 1", "DIM 2", files[4], legend);
        out << s.name << ": " << files.size() << " figures in " << paths.figures().string() << "\n";
    }
}

int run(int argc, char** argv) {
    CLI::App app{"Gated multi-expert histopathology classifier"};
    app.require_subcommand(1);
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    bool quiet = false;
    app.add_option("-c,--config", config_path, "JSON experiment configuration");
    app.add_option("-s,--set", overrides, "Override a config value: section.key=value")->take_all();
    app.add_flag("-q,--quiet", quiet, "Only print warnings and results");
    app.fallthrough();

    bool resume = false;
    std::optional<std::string> checkpoint;
    auto* prepare = app.add_subcommand("prepare", "Scan or generate data and write split manifests");
    auto* train = app.add_subcommand("train", "Train the cross-validated ensemble");
    train->add_flag("--resume", resume, "Continue interrupted folds from their recorded epoch");
    auto* eval = app.add_subcommand("eval", "Evaluate checkpoints under the configured protocol");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate instead of the run's own");
    auto* explain = app.add_subcommand("explain", "Occlusion maps and XAI metrics for a confident cohort");
    explain->add_option("--checkpoint", checkpoint, "Checkpoint to explain instead of the run's own");
    auto* plot = app.add_subcommand("plot", "Regenerate figures from reports");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        log::set_quiet(quiet);
        const auto path = config_path ? std::optional<fs::path>(*config_path) : std::nullopt;
        const auto config = load_config(path, overrides);
        const auto ckpt = checkpoint ? std::optional<fs::path>(*checkpoint) : std::nullopt;
        if (prepare->parsed()) cmd_prepare(config, std::cout);
        if (train->parsed()) cmd_train(config, resume, std::cout);
        if (eval->parsed()) cmd_eval(config, ckpt, std::cout);
        if (explain->parsed()) cmd_explain(config, ckpt, std::cout);
        if (plot->parsed()) cmd_plot(config, std::cout);
        return 0;
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace histo::cli

#include "histo/interpretability.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace histo::interpretability {

OcclusionMetrics occlusion_metrics(const torch::Tensor& map, const CoverageThreshold& threshold) {
    if (!map.defined() || map.numel() == 0) throw UserError("occlusion map is empty");
    auto m = map.to(torch::kFloat64).contiguous().view({-1});
    const double* v = m.data_ptr<double>();
    const auto n = m.numel();

    OcclusionMetrics out;
    double sum = 0.0;
    out.s_max = v[0];
    for (int64_t i = 0; i < n; ++i) {
        out.s_max = std::max(out.s_max, v[i]);
        sum += v[i];
    }
    out.mean_sensitivity = sum / static_cast<double>(n);

    double theta = threshold.value;
    if (threshold.mode == CoverageThreshold::Mode::relative) {
        if (out.s_max <= 0.0) return out;  // nothing stands out on a flat zero map
        theta = threshold.value * out.s_max;
    }
    int64_t covered = 0;
    for (int64_t i = 0; i < n; ++i) covered += v[i] >= theta ? 1 : 0;
    out.coverage_pct = 100.0 * static_cast<double>(covered) / static_cast<double>(n);
    return out;
}

OcclusionResult occlusion_map(const ProbabilityFn& model, const torch::Tensor& image, const OcclusionOptions& options,
                              const CoverageThreshold& threshold) {
    if (image.dim() != 3) throw UserError("occlusion expects a 3×H×W image");
    const int64_t h = image.size(1), w = image.size(2);
    if (options.patch_size < 1 || options.patch_size > std::min(h, w)) throw UserError("patch size must fit the image");
    if (options.stride < 1) throw UserError("stride must be >= 1");
    if (options.batch < 1) throw UserError("occlusion batch must be >= 1");

    torch::NoGradGuard no_grad;
    const int64_t rows = (h - options.patch_size) / options.stride + 1;
    const int64_t cols = (w - options.patch_size) / options.stride + 1;

    auto base = model(image.unsqueeze(0)).to(torch::kFloat64);
    OcclusionResult out;
    out.predicted = base[0].argmax().item<int64_t>();
    out.base_confidence = base[0][out.predicted].item<double>();

    out.map = torch::zeros({rows, cols}, torch::kFloat64);
    auto acc = out.map.accessor<double, 2>();
    const int64_t cells = rows * cols;
    for (int64_t start = 0; start < cells; start += options.batch) {
        const int64_t count = std::min(options.batch, cells - start);
        auto batch = image.unsqueeze(0).repeat({count, 1, 1, 1});
        for (int64_t k = 0; k < count; ++k) {
            const int64_t r = (start + k) / cols, c = (start + k) % cols;
            batch[k]
                .slice(1, r * options.stride, r * options.stride + options.patch_size)
                .slice(2, c * options.stride, c * options.stride + options.patch_size)
                .fill_(options.baseline);
        }
        auto p = model(batch).to(torch::kFloat64).select(1, out.predicted).contiguous();
        for (int64_t k = 0; k < count; ++k) {
            const int64_t r = (start + k) / cols, c = (start + k) % cols;
            acc[r][c] = std::max(0.0, out.base_confidence - p.data_ptr<double>()[k]);
        }
    }
    out.metrics = occlusion_metrics(out.map, threshold);
    return out;
}

std::vector<CohortCandidate> select_xai_cohort(const std::vector<CohortCandidate>& candidates, int n_per_cell,
                                               double confidence_threshold, std::uint64_t seed,
                                               const std::vector<int>& classes,
                                               const std::vector<int>& magnifications) {
    if (n_per_cell < 0) throw UserError("n_per_cell must be >= 0");
    std::vector<CohortCandidate> cohort;
    for (int c : classes) {
        for (int mag : magnifications) {
            std::vector<CohortCandidate> eligible;
            for (const auto& x : candidates) {
                if (x.label == c && x.magnification == mag && x.confidence > confidence_threshold) eligible.push_back(x);
            }
            std::sort(eligible.begin(), eligible.end(),
                      [](const CohortCandidate& a, const CohortCandidate& b) { return a.id < b.id; });
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c) * 100003u + static_cast<std::uint64_t>(mag)));
            rng.shuffle(eligible);
            const auto want = static_cast<std::size_t>(n_per_cell);
            if (eligible.size() < want) {
                log::warn("XAI cell (class " + std::to_string(c) + ", " + std::to_string(mag) + "x) has " +
                          std::to_string(eligible.size()) + " eligible samples, wanted " + std::to_string(want));
            }
            eligible.resize(std::min(eligible.size(), want));
            cohort.insert(cohort.end(), eligible.begin(), eligible.end());
        }
    }
    return cohort;
}

XaiSummary summarize_xai(const std::vector<XaiRecord>& records, const std::vector<int>& classes,
                         const std::vector<int>& magnifications) {
    XaiSummary summary;
    for (int c : classes) {
        for (int m : magnifications) summary[{c, m}];
    }
    std::map<std::pair<int, int>, double> sums;
    for (const auto& r : records) {
        auto& cell = summary[{r.label, r.magnification}];
        ++cell.count;
        sums[{r.label, r.magnification}] += r.metrics.mean_sensitivity;
        cell.max = cell.max ? std::max(*cell.max, r.metrics.s_max) : r.metrics.s_max;
    }
    for (auto& [key, cell] : summary) {
        if (cell.count > 0) cell.mean = sums[key] / static_cast<double>(cell.count);
    }
    return summary;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string format_xai_records(const std::vector<XaiRecord>& records) {
    std::string out = "# id\tlabel\tmagnification\tconfidence\ts_max\tmean_sensitivity\tcoverage_pct\n";
    for (const auto& r : records) {
        out += r.id + "\t" + std::to_string(r.label) + "\t" + std::to_string(r.magnification) + "\t" +
               fmt(r.confidence) + "\t" + fmt(r.metrics.s_max) + "\t" + fmt(r.metrics.mean_sensitivity) + "\t" +
               fmt(r.metrics.coverage_pct) + "\n";
    }
    return out;
}

std::vector<XaiRecord> parse_xai_records(std::string_view text) {
    std::vector<XaiRecord> out;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        XaiRecord r;
        std::string label, mag, conf, smax, mean, cov;
        if (!(std::getline(fields, r.id, '\t') && std::getline(fields, label, '\t') && std::getline(fields, mag, '\t') &&
              std::getline(fields, conf, '\t') && std::getline(fields, smax, '\t') &&
              std::getline(fields, mean, '\t') && std::getline(fields, cov, '\t'))) {
            throw UserError("malformed XAI record: " + line);
        }
        r.label = std::stoi(label);
        r.magnification = std::stoi(mag);
        r.confidence = std::stod(conf);
        r.metrics.s_max = std::stod(smax);
        r.metrics.mean_sensitivity = std::stod(mean);
        r.metrics.coverage_pct = std::stod(cov);
        out.push_back(r);
    }
    return out;
}

std::string format_xai_summary(const XaiSummary& summary, const std::vector<std::string>& class_names) {
    std::vector<int> mags;
    for (const auto& [key, cell] : summary) {
        if (std::find(mags.begin(), mags.end(), key.second) == mags.end()) mags.push_back(key.second);
    }
    std::sort(mags.begin(), mags.end());
    std::string out = "# class";
    for (int m : mags) out += "\t" + std::to_string(m) + "x_n\t" + std::to_string(m) + "x_mean\t" + std::to_string(m) + "x_max";
    out += "\n";
    int last_class = -1;
    for (const auto& [key, cell] : summary) {
        if (key.first != last_class) {
            if (last_class >= 0) out += "\n";
            const auto idx = static_cast<std::size_t>(key.first);
            out += idx < class_names.size() ? class_names[idx] : std::to_string(key.first);
            last_class = key.first;
        }
        out += "\t" + std::to_string(cell.count) + "\t" + (cell.mean ? fmt(*cell.mean) : "-") + "\t" +
               (cell.max ? fmt(*cell.max) : "-");
    }
    if (last_class >= 0) out += "\n";
    return out;
}

namespace {

std::array<double, 3> jet(double t) {
    t = std::clamp(t, 0.0, 1.0);
    auto ramp = [](double x) { return std::clamp(1.5 - std::abs(4.0 * x), 0.0, 1.0); };
    return {ramp(t - 0.75), ramp(t - 0.5), ramp(t - 0.25)};
}

}  // namespace

torch::Tensor heatmap_overlay(const torch::Tensor& rgb, const torch::Tensor& map, double alpha) {
    if (rgb.dim() != 3 || rgb.size(0) != 3) throw UserError("overlay expects a 3×H×W image");
    const int64_t h = rgb.size(1), w = rgb.size(2);
    auto m = map.to(torch::kFloat64);
    const double peak = m.max().item<double>();
    if (peak > 0.0) m = m / peak;
    auto up = torch::nn::functional::interpolate(
                  m.view({1, 1, m.size(0), m.size(1)}),
                  torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kBilinear).align_corners(false))
                  .view({h, w})
                  .contiguous();
    auto img = rgb.to(torch::kFloat64).clamp(0.0, 1.0).contiguous();
    auto out = torch::empty({h, w, 3}, torch::kUInt8);
    auto o = out.accessor<uint8_t, 3>();
    auto u = up.accessor<double, 2>();
    auto im = img.accessor<double, 3>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const auto colour = jet(u[y][x]);
            for (int c = 0; c < 3; ++c) {
                const double v = (1.0 - alpha) * im[c][y][x] + alpha * colour[static_cast<std::size_t>(c)];
                o[y][x][c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    }
    return out;
}

}  // namespace histo::interpretability

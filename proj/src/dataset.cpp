#include "histo/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "histo/image_io.hpp"

namespace histo::dataset {

const std::array<std::string, kNumSubtypes>& subtype_names() {
    static const std::array<std::string, kNumSubtypes> names{
        "adenosis",         "fibroadenoma",      "phyllodes_tumor",    "tubular_adenoma",
        "ductal_carcinoma", "lobular_carcinoma", "mucinous_carcinoma", "papillary_carcinoma"};
    return names;
}

Superclass superclass_of(int subtype) {
    if (subtype < 0 || subtype >= kNumSubtypes) {
        throw UserError("subtype out of range: " + std::to_string(subtype));
    }
    return subtype < 4 ? Superclass::benign : Superclass::malignant;
}

std::string_view to_string(Superclass s) { return s == Superclass::benign ? "benign" : "malignant"; }

std::vector<int> subtype_taxonomy() {
    std::vector<int> taxonomy(kNumSubtypes);
    for (int c = 0; c < kNumSubtypes; ++c) taxonomy[c] = superclass_of(c) == Superclass::benign ? 0 : 1;
    return taxonomy;
}

std::string stratum_key(int subtype, int magnification) {
    return std::to_string(subtype) + "_" + std::to_string(magnification);
}

void NormalizationStats::validate() const {
    for (int c = 0; c < 3; ++c) {
        if (!(stddev[c] > 0.0) || !std::isfinite(stddev[c]) || !std::isfinite(mean[c])) {
            throw UserError("zero variance in channel " + std::to_string(c) +
                            " (degenerate constant channel)");
        }
    }
}

std::map<std::string, int> DatasetIndex::stratum_counts() const {
    std::map<std::string, int> counts;
    for (const auto& s : samples) ++counts[s.stratum()];
    return counts;
}

DatasetIndex DatasetIndex::filter(const std::function<bool(const SampleDescriptor&)>& keep) const {
    DatasetIndex out;
    out.stats = stats;
    std::copy_if(samples.begin(), samples.end(), std::back_inserter(out.samples), keep);
    return out;
}

// ---------------------------------------------------------------------------
// BreaKHis scanning

namespace {

std::optional<int> parse_magnification(const std::string& folder) {
    for (int m : kMagnifications) {
        if (folder == std::to_string(m) + "X" || folder == std::to_string(m) + "x") return m;
    }
    return std::nullopt;
}

std::optional<int> parse_subtype(const std::string& folder) {
    const auto& names = subtype_names();
    auto it = std::find(names.begin(), names.end(), folder);
    if (it == names.end()) return std::nullopt;
    return static_cast<int>(it - names.begin());
}

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return ext == ".png";
}

}  // namespace

DatasetIndex scan_breakhis(const fs::path& root, ScanStats* stats) {
    if (!fs::exists(root) || !fs::is_directory(root)) {
        throw UserError("dataset root does not exist: " + root.string());
    }
    fs::path base = root;
    if (fs::is_directory(root / "breast")) base = root / "breast";

    DatasetIndex index;
    ScanStats local;
    std::set<fs::path> skipped;

    for (const char* superclass : {"benign", "malignant"}) {
        const fs::path class_dir = base / superclass;
        if (!fs::is_directory(class_dir)) continue;
        for (const auto& entry : fs::recursive_directory_iterator(class_dir)) {
            if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
            // <superclass>/<method>/<subtype>/<patient>/<mag>/<file>
            const fs::path rel = fs::relative(entry.path(), class_dir);
            std::vector<std::string> parts;
            for (const auto& p : rel) parts.push_back(p.string());
            if (parts.size() != 5) continue;
            const auto subtype = parse_subtype(parts[1]);
            const auto magnification = parse_magnification(parts[3]);
            if (!subtype || !magnification) {
                skipped.insert(entry.path().parent_path());
                continue;
            }
            if (to_string(superclass_of(*subtype)) != superclass) {
                skipped.insert(entry.path().parent_path());
                continue;
            }
            SampleDescriptor s;
            s.path = entry.path().string();
            s.id = fs::relative(entry.path(), base).generic_string();
            s.subtype = *subtype;
            s.magnification = *magnification;
            s.patient_id = parts[2];
            index.samples.push_back(std::move(s));
        }
    }
    std::sort(index.samples.begin(), index.samples.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });

    local.skipped_folders = static_cast<int>(skipped.size());
    local.images = static_cast<int>(index.samples.size());
    for (const auto& folder : skipped) {
        log::warn("skipping unrecognized folder " + folder.string());
    }
    if (index.samples.empty()) log::warn("no images found under " + root.string());
    if (stats) *stats = local;
    return index;
}

// ---------------------------------------------------------------------------
// Loading and preprocessing

torch::Tensor load_raw(const SampleDescriptor& sample) {
    if (sample.synthetic_seed) return render_synthetic(sample);
    return image::read_png(sample.path);
}

torch::Tensor resize_to_model(const torch::Tensor& raw) {
    TORCH_CHECK(raw.dim() == 3 && raw.size(0) == 3, "expected a 3×H×W image");
    if (raw.size(1) == kImageSize && raw.size(2) == kImageSize) return raw.to(torch::kFloat32);
    namespace F = torch::nn::functional;
    auto resized = F::interpolate(raw.to(torch::kFloat32).unsqueeze(0),
                                  F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{kImageSize, kImageSize})
                                      .mode(torch::kBilinear)
                                      .align_corners(false)
                                      .antialias(true));
    return resized.squeeze(0);
}

NormalizationStats compute_normalization_stats(const DatasetIndex& train, const ImageLoader& loader) {
    if (train.empty()) throw UserError("cannot compute normalization stats on an empty split");
    auto sum = torch::zeros({3}, torch::kFloat64);
    auto sum_sq = torch::zeros({3}, torch::kFloat64);
    double count = 0.0;
    for (const auto& s : train.samples) {
        auto img = resize_to_model(loader(s)).to(torch::kFloat64).reshape({3, -1});
        sum += img.sum(1);
        sum_sq += img.square().sum(1);
        count += static_cast<double>(img.size(1));
    }
    NormalizationStats stats;
    for (int c = 0; c < 3; ++c) {
        const double mean = sum[c].item<double>() / count;
        const double var = std::max(0.0, sum_sq[c].item<double>() / count - mean * mean);
        stats.mean[c] = mean;
        stats.stddev[c] = std::sqrt(var);
    }
    stats.validate();
    return stats;
}

namespace {

torch::Tensor channel_tensor(const std::array<double, 3>& v, const torch::Tensor& like) {
    return torch::tensor({v[0], v[1], v[2]}, like.options()).view({3, 1, 1});
}

}  // namespace

torch::Tensor normalize(const torch::Tensor& raw, const NormalizationStats& stats) {
    stats.validate();
    auto resized = resize_to_model(raw);
    return (resized - channel_tensor(stats.mean, resized)) / channel_tensor(stats.stddev, resized);
}

torch::Tensor denormalize(const torch::Tensor& normalized, const NormalizationStats& stats) {
    return normalized * channel_tensor(stats.stddev, normalized) + channel_tensor(stats.mean, normalized);
}

ImageSample preprocess(const SampleDescriptor& sample, const torch::Tensor& raw,
                       const NormalizationStats& stats) {
    ImageSample out;
    out.pixels = normalize(raw, stats);
    out.subtype = sample.subtype;
    out.superclass = sample.superclass();
    out.magnification = sample.magnification;
    out.patient_id = sample.patient_id;
    out.stratum_key = sample.stratum();
    return out;
}

torch::Tensor load_batch(const DatasetIndex& index, const NormalizationStats& stats,
                         const ImageLoader& loader) {
    auto batch = torch::empty({static_cast<int64_t>(index.size()), 3, kImageSize, kImageSize});
    for (std::size_t i = 0; i < index.size(); ++i) {
        batch[static_cast<int64_t>(i)].copy_(normalize(loader(index.samples[i]), stats));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Splitting

namespace {

using Groups = std::map<std::string, std::vector<std::size_t>>;

Groups group_by(const DatasetIndex& index, const std::function<std::string(const SampleDescriptor&)>& key) {
    Groups groups;
    for (std::size_t i = 0; i < index.size(); ++i) groups[key(index.samples[i])].push_back(i);
    return groups;
}

Split materialize(const DatasetIndex& index, const std::vector<bool>& is_test) {
    Split split;
    split.train.stats = index.stats;
    split.test.stats = index.stats;
    for (std::size_t i = 0; i < index.size(); ++i) {
        (is_test[i] ? split.test : split.train).samples.push_back(index.samples[i]);
    }
    return split;
}

Split patient_disjoint_split(const DatasetIndex& index, const SplitOptions& options) {
    Rng rng(options.seed);
    // patients grouped by subtype; each patient goes wholly to one side
    std::map<int, std::map<std::string, std::vector<std::size_t>>> by_subtype;
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto& s = index.samples[i];
        by_subtype[s.subtype][s.patient_id].push_back(i);
    }
    std::vector<bool> is_test(index.size(), false);
    for (auto& [subtype, patients] : by_subtype) {
        std::vector<std::string> order;
        std::size_t total = 0;
        for (const auto& [pid, members] : patients) {
            order.push_back(pid);
            total += members.size();
        }
        rng.shuffle(order);
        const double target = options.test_fraction * static_cast<double>(total);
        double taken = 0.0;
        for (const auto& pid : order) {
            const double next = taken + static_cast<double>(patients[pid].size());
            if (std::abs(next - target) >= std::abs(taken - target)) continue;
            taken = next;
            for (auto i : patients[pid]) is_test[i] = true;
        }
    }
    return materialize(index, is_test);
}

}  // namespace

Split stratified_split(const DatasetIndex& index, const SplitOptions& options) {
    if (!(options.test_fraction > 0.0 && options.test_fraction < 1.0)) {
        throw UserError("test_fraction must lie in (0,1)");
    }
    if (options.patient_disjoint) return patient_disjoint_split(index, options);

    Rng rng(options.seed);
    Groups groups = group_by(index, [](const SampleDescriptor& s) { return s.stratum(); });

    struct Quota {
        std::string key;
        std::size_t size;
        std::size_t count;
        double remainder;
        std::size_t cap;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (auto& [key, members] : groups) {
        rng.shuffle(members);
        const double exact = options.test_fraction * static_cast<double>(members.size());
        const auto base = static_cast<std::size_t>(std::floor(exact));
        const std::size_t cap = members.size() >= 2 ? members.size() - 1 : 0;
        if (members.size() == 1) {
            log::warn("stratum " + key + " has a single sample; kept in train");
        }
        quotas.push_back({key, members.size(), std::min(base, cap), exact - static_cast<double>(base), cap});
        assigned += quotas.back().count;
    }

    const auto target = static_cast<std::size_t>(std::llround(options.test_fraction * static_cast<double>(index.size())));
    // leftover slots go to the largest remainders; ties are resolved by a seeded order
    std::vector<std::size_t> order(quotas.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
    for (auto q : order) {
        if (assigned >= target) break;
        if (quotas[q].count < quotas[q].cap) {
            ++quotas[q].count;
            ++assigned;
        }
    }

    std::vector<bool> is_test(index.size(), false);
    for (const auto& q : quotas) {
        const auto& members = groups.at(q.key);
        for (std::size_t i = 0; i < q.count; ++i) is_test[members[i]] = true;
    }
    return materialize(index, is_test);
}

std::vector<Fold> kfold_split(const DatasetIndex& train, int k, std::uint64_t seed) {
    if (k < 2) throw UserError("k-fold split needs k >= 2");
    if (train.size() < static_cast<std::size_t>(k)) {
        throw UserError("k-fold split needs at least k samples");
    }
    auto counts = train.stratum_counts();
    int smallest = std::numeric_limits<int>::max();
    for (const auto& [key, n] : counts) smallest = std::min(smallest, n);

    std::function<std::string(const SampleDescriptor&)> key = [](const SampleDescriptor& s) { return s.stratum(); };
    if (smallest < k) {
        log::warn("k=" + std::to_string(k) + " exceeds smallest stratum (" + std::to_string(smallest) +
                  "); stratifying folds on subtype only");
        key = [](const SampleDescriptor& s) { return std::to_string(s.subtype); };
    }

    Rng rng(seed);
    Groups groups = group_by(train, key);
    std::vector<int> fold_of(train.size(), 0);
    std::size_t position = 0;
    for (auto& [name, members] : groups) {
        rng.shuffle(members);
        for (auto i : members) fold_of[i] = static_cast<int>(position++ % static_cast<std::size_t>(k));
    }

    std::vector<Fold> folds(static_cast<std::size_t>(k));
    for (auto& f : folds) {
        f.train.stats = train.stats;
        f.val.stats = train.stats;
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
        for (int f = 0; f < k; ++f) {
            (fold_of[i] == f ? folds[f].val : folds[f].train).samples.push_back(train.samples[i]);
        }
    }
    return folds;
}

// ---------------------------------------------------------------------------
// Synthetic textures

namespace {

double magnification_scale(int magnification) {
    switch (magnification) {
        case 40: return 1.0;
        case 100: return 1.1;
        case 200: return 1.2;
        case 400: return 1.3;
        default: return 1.0 + 0.1 * std::log2(std::max(1, magnification) / 40.0);
    }
}

}  // namespace

TextureParams synthetic_texture_params(int subtype, int magnification) {
    superclass_of(subtype);  // range check
    TextureParams p;
    p.scale = magnification_scale(magnification);
    p.orientation_deg = 45.0 * (subtype % 4);
    p.period_px = (subtype < 4 ? 9.0 : 20.0) * p.scale;
    p.blob_count = 6 + 4 * subtype;
    p.blob_radius_px = 3.0 * p.scale;
    return p;
}

torch::Tensor render_synthetic(const SampleDescriptor& sample) {
    if (!sample.synthetic_seed) throw UserError("sample " + sample.id + " is not synthetic");
    const auto params = synthetic_texture_params(sample.subtype, sample.magnification);
    Rng rng(*sample.synthetic_seed);

    const double theta = (params.orientation_deg + rng.uniform(-6.0, 6.0)) * M_PI / 180.0;
    const double period = params.period_px * rng.uniform(0.92, 1.08);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);

    const auto opts = torch::TensorOptions().dtype(torch::kFloat32);
    auto coords = torch::arange(kImageSize, opts);
    auto yy = coords.view({kImageSize, 1}).expand({kImageSize, kImageSize});
    auto xx = coords.view({1, kImageSize}).expand({kImageSize, kImageSize});

    auto stripes = 0.5 + 0.35 * torch::sin((xx * std::cos(theta) + yy * std::sin(theta)) * (2.0 * M_PI / period) + phase);

    auto blobs = torch::zeros({kImageSize, kImageSize}, opts);
    const double inv_two_rho_sq = 1.0 / (2.0 * params.blob_radius_px * params.blob_radius_px);
    for (int b = 0; b < params.blob_count; ++b) {
        const double cy = rng.uniform(0.0, kImageSize);
        const double cx = rng.uniform(0.0, kImageSize);
        blobs += torch::exp(-((yy - cy).square() + (xx - cx).square()) * inv_two_rho_sq);
    }
    auto gray = stripes * (1.0 - 0.6 * blobs.clamp_max(1.0));

    // hematoxylin-like purple to eosin-like pink
    const std::array<double, 3> dark{0.42, 0.24, 0.58};
    const std::array<double, 3> light{0.94, 0.76, 0.86};
    auto gen = make_generator(derive_seed(*sample.synthetic_seed, 1));
    auto image = torch::empty({3, kImageSize, kImageSize}, opts);
    for (int c = 0; c < 3; ++c) {
        image[c] = dark[c] + (light[c] - dark[c]) * gray;
    }
    image += 0.03 * torch::randn({3, kImageSize, kImageSize}, gen, opts);
    return image.clamp_(0.0, 1.0);
}

DatasetIndex generate_synthetic_dataset(int n_per_class, const std::vector<int>& magnifications,
                                        std::uint64_t seed) {
    if (n_per_class < 1) throw UserError("n_per_class must be >= 1");
    if (magnifications.empty()) throw UserError("at least one magnification is required");
    DatasetIndex index;
    std::uint64_t stream = 0;
    for (int c = 0; c < kNumSubtypes; ++c) {
        for (int mag : magnifications) {
            for (int i = 0; i < n_per_class; ++i) {
                SampleDescriptor s;
                s.id = "syn_c" + std::to_string(c) + "_m" + std::to_string(mag) + "_" + std::to_string(i);
                s.path = "synthetic://" + std::to_string(seed) + "/" + s.id;
                s.synthetic_seed = derive_seed(seed, stream++);
                s.subtype = c;
                s.magnification = mag;
                s.patient_id = "synpat_" + std::to_string(c) + "_" + std::to_string(i % 4);
                index.samples.push_back(std::move(s));
            }
        }
    }
    return index;
}

// ---------------------------------------------------------------------------
// Manifests

std::string format_manifest(const std::vector<ManifestRecord>& records) {
    std::ostringstream out;
    out << "# id\tpath\tsubtype\tmagnification\tstratum\trole\tpatient\tseed\n";
    for (const auto& r : records) {
        const auto& s = r.sample;
        out << s.id << '\t' << s.path << '\t' << s.subtype << '\t' << s.magnification << '\t' << s.stratum()
            << '\t' << r.role << '\t' << s.patient_id << '\t'
            << (s.synthetic_seed ? std::to_string(*s.synthetic_seed) : std::string("-")) << '\n';
    }
    return out.str();
}

std::vector<ManifestRecord> parse_manifest(std::string_view text) {
    std::vector<ManifestRecord> records;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, '\t')) fields.push_back(field);
        if (fields.size() != 8) {
            throw UserError("malformed manifest line " + std::to_string(line_no));
        }
        ManifestRecord r;
        r.sample.id = fields[0];
        r.sample.path = fields[1];
        r.sample.subtype = std::stoi(fields[2]);
        r.sample.magnification = std::stoi(fields[3]);
        r.role = fields[5];
        r.sample.patient_id = fields[6];
        if (fields[7] != "-") r.sample.synthetic_seed = std::stoull(fields[7]);
        if (r.sample.stratum() != fields[4]) {
            throw UserError("manifest line " + std::to_string(line_no) + " has inconsistent stratum");
        }
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace histo::dataset

#include "support.hpp"

#include <set>

#include "histo/dataset.hpp"
#include "histo/image_io.hpp"

using namespace histo;
using namespace histo::dataset;

namespace {

DatasetIndex balanced_index(int per_cell, const std::vector<int>& mags) {
    DatasetIndex index;
    for (int c = 0; c < kNumSubtypes; ++c) {
        for (int m : mags) {
            for (int i = 0; i < per_cell; ++i) {
                SampleDescriptor s;
                s.id = "s" + std::to_string(c) + "_" + std::to_string(m) + "_" + std::to_string(i);
                s.path = s.id;
                s.subtype = c;
                s.magnification = m;
                s.patient_id = "p" + std::to_string(c) + "_" + std::to_string(i % 3);
                index.samples.push_back(s);
            }
        }
    }
    return index;
}

torch::Tensor constant_image(double v, int64_t size = kImageSize) { return torch::full({3, size, size}, v); }

void write_breakhis_tree(const fs::path& root, const std::vector<std::tuple<int, int, int>>& cells) {
    const auto image = torch::rand({12, 16, 3});
    for (auto [subtype, mag, count] : cells) {
        const auto super = std::string(to_string(superclass_of(subtype)));
        const auto dir = root / "breast" / super / "SOB" / subtype_names()[static_cast<std::size_t>(subtype)] /
                         ("SOB_P_" + std::to_string(subtype)) / (std::to_string(mag) + "X");
        fs::create_directories(dir);
        for (int i = 0; i < count; ++i) image::write_png(dir / ("img" + std::to_string(i) + ".png"), image);
    }
}

}  // namespace

TEST_CASE("taxonomy: four benign then four malignant subtypes") {
    for (int s = 0; s < 4; ++s) CHECK(superclass_of(s) == Superclass::benign);
    for (int s = 4; s < 8; ++s) CHECK(superclass_of(s) == Superclass::malignant);
    CHECK_THROWS_AS(superclass_of(8), UserError);
    CHECK((subtype_taxonomy() == std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
}

TEST_CASE("stratum key is injective over subtype and magnification") {
    std::set<std::string> keys;
    for (int s = 0; s < kNumSubtypes; ++s) {
        for (int m : kMagnifications) keys.insert(stratum_key(s, m));
    }
    CHECK(keys.size() == 32);
    CHECK(stratum_key(3, 200) == "3_200");
}

TEST_CASE("scan_breakhis counts one descriptor per image") {
    test::TempDir dir("scan");
    write_breakhis_tree(dir.path(), {{0, 40, 2}, {0, 100, 1}, {5, 400, 3}});
    // an unrecognized magnification folder is skipped with a warning
    fs::create_directories(dir / "breast/benign/SOB/adenosis/SOB_P_0/75X");
    image::write_png(dir / "breast/benign/SOB/adenosis/SOB_P_0/75X/x.png", torch::rand({4, 4, 3}));
    log::WarningCapture warnings;
    ScanStats stats;
    auto index = scan_breakhis(dir.path(), &stats);
    CHECK(index.size() == 6);
    CHECK(stats.skipped_folders == 1);
    CHECK(warnings.count() >= 1);
    auto counts = index.stratum_counts();
    CHECK(counts["0_40"] == 2);
    CHECK(counts["0_100"] == 1);
    CHECK(counts["5_400"] == 3);
    for (const auto& s : index.samples) CHECK(s.superclass() == superclass_of(s.subtype));
}

TEST_CASE("scan_breakhis: empty directory warns, missing root fails") {
    test::TempDir dir("empty");
    log::WarningCapture warnings;
    CHECK(scan_breakhis(dir.path()).empty());
    CHECK(warnings.count() == 1);
    CHECK_THROWS_AS(scan_breakhis(dir / "nope"), UserError);
}

TEST_CASE("normalization stats of an all-0 and an all-1 image") {
    DatasetIndex index = balanced_index(1, {40}).filter([](const SampleDescriptor& s) { return s.subtype < 2; });
    auto loader = [](const SampleDescriptor& s) { return constant_image(s.subtype == 0 ? 0.0 : 1.0); };
    auto stats = compute_normalization_stats(index, loader);
    for (int c = 0; c < 3; ++c) {
        CHECK(stats.mean[static_cast<std::size_t>(c)] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(stats.stddev[static_cast<std::size_t>(c)] == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("normalization stats reject a constant channel") {
    DatasetIndex index = balanced_index(1, {40}).filter([](const SampleDescriptor& s) { return s.subtype == 0; });
    auto loader = [](const SampleDescriptor&) { return constant_image(0.3); };
    CHECK_THROWS_WITH_AS(compute_normalization_stats(index, loader), doctest::Contains("zero variance"), UserError);
    NormalizationStats bad;
    bad.stddev[1] = 0.0;
    CHECK_THROWS_AS(bad.validate(), UserError);
}

TEST_CASE("stats are fitted on the train split only") {
    auto index = balanced_index(2, {40});
    auto split = stratified_split(index, {0.5, 3, false});
    std::set<std::string> test_ids;
    for (const auto& s : split.test.samples) test_ids.insert(s.id);
    std::set<std::string> touched;
    auto loader = [&](const SampleDescriptor& s) {
        touched.insert(s.id);
        return torch::full({3, 8, 8}, static_cast<double>(s.subtype) / 8.0);
    };
    compute_normalization_stats(split.train, loader);
    for (const auto& id : touched) CHECK(test_ids.count(id) == 0);
    CHECK(touched.size() == split.train.size());
}

TEST_CASE("preprocess: the mean maps to 0 and a half/half image to ±1") {
    NormalizationStats stats;
    stats.mean = {0.5, 0.5, 0.5};
    stats.stddev = {0.5, 0.5, 0.5};
    auto at_mean = normalize(constant_image(0.5), stats);
    CHECK(at_mean.abs().max().item<double>() == 0.0);

    auto half = torch::zeros({3, kImageSize, kImageSize});
    half.slice(2, kImageSize / 2).fill_(1.0);
    auto out = normalize(half, stats);
    CHECK(out.sizes() == torch::IntArrayRef{3, kImageSize, kImageSize});
    CHECK(out.slice(2, 0, kImageSize / 2).eq(-1.0).all().item<bool>());
    CHECK(out.slice(2, kImageSize / 2).eq(1.0).all().item<bool>());
}

TEST_CASE("preprocess resizes any input to 3x224x224 and round-trips") {
    NormalizationStats stats;
    stats.mean = {0.2, 0.4, 0.6};
    stats.stddev = {0.1, 0.3, 0.2};
    auto raw = torch::rand({3, 61, 97});
    SampleDescriptor d;
    d.subtype = 6;
    d.magnification = 200;
    d.patient_id = "p";
    auto sample = preprocess(d, raw, stats);
    CHECK(sample.pixels.sizes() == torch::IntArrayRef{3, kImageSize, kImageSize});
    CHECK(sample.superclass == Superclass::malignant);
    CHECK(sample.stratum_key == "6_200");
    auto resized = resize_to_model(raw);
    CHECK(test::max_abs_diff(denormalize(sample.pixels, stats), resized) < 1e-6);
    for (int c = 0; c < 3; ++c) {
        const auto expect = (resized[c] - stats.mean[static_cast<std::size_t>(c)]) / stats.stddev[static_cast<std::size_t>(c)];
        CHECK(test::max_abs_diff(sample.pixels[c], expect) < 1e-5);
    }
}

TEST_CASE("z-scored training batch has mean ~0 and std ~1 per channel") {
    auto index = generate_synthetic_dataset(2, {40, 400}, 11);
    auto stats = compute_normalization_stats(index);
    auto batch = load_batch(index, stats);
    for (int c = 0; c < 3; ++c) {
        auto ch = batch.select(1, c);
        CHECK(std::abs(ch.mean().item<double>()) < 0.05);
        CHECK(std::abs(ch.std(false).item<double>() - 1.0) < 0.05);
    }
}

TEST_CASE("test data normalized with train stats need not be centred") {
    NormalizationStats stats;
    stats.mean = {0.2, 0.2, 0.2};
    stats.stddev = {0.1, 0.1, 0.1};
    CHECK(normalize(constant_image(0.6), stats).mean().item<double>() == doctest::Approx(4.0));
}

TEST_CASE("stratified split: 80 samples, 8 strata, fraction 0.25") {
    auto index = balanced_index(10, {40});
    auto split = stratified_split(index, {0.25, 5, false});
    CHECK(split.test.size() == 20);
    CHECK(split.train.size() == 60);
    for (const auto& [key, n] : split.test.stratum_counts()) {
        CHECK(n >= 2);
        CHECK(n <= 3);
    }
}

TEST_CASE("stratified split properties over random strata sizes") {
    std::mt19937 gen(17);
    for (int trial = 0; trial < 25; ++trial) {
        DatasetIndex index;
        std::uniform_int_distribution<int> size(2, 23);
        for (int c = 0; c < kNumSubtypes; ++c) {
            for (int m : kMagnifications) {
                const int n = size(gen);
                for (int i = 0; i < n; ++i) {
                    SampleDescriptor s;
                    s.id = stratum_key(c, m) + "#" + std::to_string(i);
                    s.subtype = c;
                    s.magnification = m;
                    s.patient_id = "p";
                    index.samples.push_back(s);
                }
            }
        }
        const double f = 0.05 + 0.9 * (trial / 25.0);
        const auto split = stratified_split(index, {f, static_cast<std::uint64_t>(trial), false});
        CHECK(split.train.size() + split.test.size() == index.size());
        CHECK(static_cast<double>(split.test.size()) == std::round(f * static_cast<double>(index.size())));

        std::set<std::string> ids;
        for (const auto& s : split.train.samples) ids.insert(s.id);
        for (const auto& s : split.test.samples) CHECK(ids.insert(s.id).second);
        CHECK(ids.size() == index.size());

        auto totals = index.stratum_counts();
        auto tests = split.test.stratum_counts();
        for (const auto& [key, total] : totals) {
            const double share = static_cast<double>(tests[key]) / total;
            CHECK(std::abs(share - f) <= 1.0 / total + 1e-12);
        }
        const auto again = stratified_split(index, {f, static_cast<std::uint64_t>(trial), false});
        CHECK((again.test.samples == split.test.samples));
        CHECK((again.train.samples == split.train.samples));
    }
}

TEST_CASE("a single-sample stratum stays in train with a warning") {
    auto index = balanced_index(4, {40});
    index.samples.push_back({"lonely", "lonely", std::nullopt, 2, 400, "p"});
    log::WarningCapture warnings;
    auto split = stratified_split(index, {0.25, 1, false});
    CHECK(warnings.count() == 1);
    CHECK(std::any_of(split.train.samples.begin(), split.train.samples.end(),
                      [](const SampleDescriptor& s) { return s.id == "lonely"; }));
}

TEST_CASE("patient-disjoint split keeps each patient on one side") {
    auto index = balanced_index(6, {40, 100});
    auto split = stratified_split(index, {0.3, 9, true});
    std::set<std::string> train_patients;
    for (const auto& s : split.train.samples) train_patients.insert(s.patient_id);
    for (const auto& s : split.test.samples) CHECK(train_patients.count(s.patient_id) == 0);
    CHECK(split.train.size() + split.test.size() == index.size());
    CHECK_FALSE(split.test.empty());
}

TEST_CASE("split rejects fractions outside (0,1)") {
    auto index = balanced_index(2, {40});
    CHECK_THROWS_AS(stratified_split(index, {0.0, 1, false}), UserError);
    CHECK_THROWS_AS(stratified_split(index, {1.0, 1, false}), UserError);
}

TEST_CASE("k-fold: 100 balanced samples into 5 folds of 20") {
    DatasetIndex index;
    for (int c = 0; c < 4; ++c) {
        for (int i = 0; i < 25; ++i) {
            index.samples.push_back({"c" + std::to_string(c) + "_" + std::to_string(i), "", std::nullopt, c, 40, "p"});
        }
    }
    auto folds = kfold_split(index, 5, 3);
    REQUIRE(folds.size() == 5);
    std::set<std::string> covered;
    for (const auto& fold : folds) {
        CHECK(fold.val.size() == 20);
        CHECK(fold.train.size() == 80);
        for (const auto& s : fold.val.samples) CHECK(covered.insert(s.id).second);
        for (const auto& [key, n] : fold.val.stratum_counts()) CHECK(n == 5);
    }
    CHECK(covered.size() == 100);
    auto again = kfold_split(index, 5, 3);
    for (std::size_t k = 0; k < 5; ++k) CHECK((again[k].val.samples == folds[k].val.samples));
}

TEST_CASE("k-fold: k=2 halves a class of 4") {
    DatasetIndex index;
    for (int i = 0; i < 4; ++i) index.samples.push_back({"a" + std::to_string(i), "", std::nullopt, 1, 40, "p"});
    for (int i = 0; i < 6; ++i) index.samples.push_back({"b" + std::to_string(i), "", std::nullopt, 5, 40, "p"});
    auto folds = kfold_split(index, 2, 0);
    for (const auto& fold : folds) CHECK(fold.val.stratum_counts()["1_40"] == 2);
}

TEST_CASE("k-fold falls back to subtype stratification when strata are small") {
    auto index = balanced_index(2, {40, 100, 200});  // 2 per stratum, 6 per subtype
    log::WarningCapture warnings;
    auto folds = kfold_split(index, 3, 4);
    CHECK(warnings.count() == 1);
    std::set<std::string> covered;
    for (const auto& fold : folds) {
        std::map<int, int> per_subtype;
        for (const auto& s : fold.val.samples) {
            ++per_subtype[s.subtype];
            covered.insert(s.id);
        }
        for (int c = 0; c < kNumSubtypes; ++c) CHECK(per_subtype[c] == 2);
    }
    CHECK(covered.size() == index.size());
    CHECK_THROWS_AS(kfold_split(index, 1, 0), UserError);
}

TEST_CASE("synthetic dataset: counts, determinism and readable parameters") {
    auto index = generate_synthetic_dataset(10, {40, 100, 200, 400}, 3);
    CHECK(index.size() == 320);
    for (const auto& [key, n] : index.stratum_counts()) CHECK(n == 10);
    auto again = generate_synthetic_dataset(10, {40, 100, 200, 400}, 3);
    CHECK((again.samples == index.samples));
    auto a = render_synthetic(index.samples[17]);
    auto b = render_synthetic(again.samples[17]);
    CHECK(torch::equal(a, b));
    CHECK(a.size(0) == 3);
    CHECK(a.min().item<double>() >= 0.0);
    CHECK(a.max().item<double>() <= 1.0);

    // the blob density parameter grows with the class index at every magnification
    for (int m : kMagnifications) {
        for (int c = 1; c < kNumSubtypes; ++c) {
            CHECK(synthetic_texture_params(c, m).blob_count > synthetic_texture_params(c - 1, m).blob_count);
        }
    }
    CHECK_THROWS_AS(generate_synthetic_dataset(0, {40}, 1), UserError);
}

TEST_CASE("manifest round-trip is byte identical") {
    auto index = generate_synthetic_dataset(1, {40, 200}, 5);
    auto split = stratified_split(index, {0.5, 2, false});
    std::vector<ManifestRecord> records;
    for (const auto& s : split.train.samples) records.push_back({s, "train"});
    for (const auto& s : split.test.samples) records.push_back({s, "test"});
    const auto text = format_manifest(records);
    const auto parsed = parse_manifest(text);
    REQUIRE(parsed.size() == records.size());
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        CHECK(parsed[i].sample == records[i].sample);
        CHECK(parsed[i].role == records[i].role);
    }
    CHECK(format_manifest(parsed) == text);
    CHECK_THROWS_AS(parse_manifest("garbage\n"), UserError);
}

TEST_CASE("corrupt image names the file") {
    test::TempDir dir("corrupt");
    write_text_file(dir / "bad.png", "not a png");
    CHECK_THROWS_WITH_AS(image::read_png(dir / "bad.png"), doctest::Contains("bad.png"), UserError);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "espt/episodes.hpp"

using namespace espt;

namespace {

Dataset small_dataset(std::size_t classes = 8, std::size_t samples = 12) {
    SyntheticSpec spec;
    spec.num_classes = classes;
    spec.samples_per_class = samples;
    spec.seed = 3;
    return generate_synthetic(spec);
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    return dir;
}

}  // namespace

TEST(Synthetic, SplitsAreDisjointAndCoverAll) {
    auto data = small_dataset();
    EXPECT_EQ(data.split(Split::Train).size(), 4u);
    EXPECT_EQ(data.split(Split::Val).size(), 2u);
    EXPECT_EQ(data.split(Split::Test).size(), 2u);
    std::set<std::size_t> all;
    for (std::size_t s = 0; s < 3; ++s)
        for (auto id : data.splits[s]) EXPECT_TRUE(all.insert(id).second);
    EXPECT_EQ(all.size(), 8u);
}

TEST(Synthetic, DeterministicInSeed) {
    auto a = small_dataset(), b = small_dataset();
    for (std::size_t c = 0; c < a.classes.size(); ++c) EXPECT_EQ(a.classes[c].images, b.classes[c].images);
}

TEST(Sampler, EpisodeLayoutIsClassMajor) {
    auto data = small_dataset();
    std::mt19937_64 rng(1);
    auto ep = sample_episode(data, Split::Train, 3, 2, 4, rng);
    EXPECT_EQ(ep.support.shape(), (Shape{6, 3, 16, 16}));
    EXPECT_EQ(ep.query.shape(), (Shape{12, 3, 16, 16}));
    EXPECT_EQ(ep.support_labels, (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
    EXPECT_EQ(ep.query_labels[4], 1u);
    std::set<std::size_t> ids(ep.class_ids.begin(), ep.class_ids.end());
    EXPECT_EQ(ids.size(), 3u);
    for (auto id : ep.class_ids)
        EXPECT_NE(std::find(data.split(Split::Train).begin(), data.split(Split::Train).end(), id),
                  data.split(Split::Train).end());
}

TEST(Sampler, SupportAndQueryAreDisjoint) {
    auto data = small_dataset();
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        auto ep = sample_episode(data, Split::Train, 4, 3, 5, rng);
        for (std::size_t c = 0; c < 4; ++c) {
            std::set<std::size_t> seen;
            for (std::size_t j = 0; j < 3; ++j) EXPECT_TRUE(seen.insert(ep.support_samples[c * 3 + j]).second);
            for (std::size_t j = 0; j < 5; ++j) EXPECT_TRUE(seen.insert(ep.query_samples[c * 5 + j]).second);
        }
    }
}

TEST(Sampler, ImagesMatchRecordedIndices) {
    auto data = small_dataset();
    std::mt19937_64 rng(3);
    auto ep = sample_episode(data, Split::Test, 2, 1, 2, rng);
    const std::size_t per = 3 * 16 * 16;
    for (std::size_t i = 0; i < ep.query_samples.size(); ++i) {
        const auto& cls = data.classes[ep.class_ids[ep.query_labels[i]]].images;
        for (std::size_t p = 0; p < per; ++p) ASSERT_EQ(ep.query[i * per + p], cls[ep.query_samples[i] * per + p]);
    }
}

TEST(Sampler, ClassSelectionIsUniform) {
    auto data = small_dataset();
    std::mt19937_64 rng(4);
    std::map<std::size_t, int> counts;
    const int trials = 8000;
    for (int i = 0; i < trials; ++i) ++counts[sample_episode(data, Split::Train, 2, 1, 1, rng).class_ids[0]];
    EXPECT_EQ(counts.size(), 4u);
    for (auto [id, n] : counts) EXPECT_NEAR(n / double(trials), 0.25, 0.03) << "class " << id;
}

TEST(Sampler, SampleSelectionIsUniform) {
    auto data = small_dataset();
    std::mt19937_64 rng(5);
    std::map<std::size_t, int> counts;
    const int trials = 12000;
    for (int i = 0; i < trials; ++i) ++counts[sample_episode(data, Split::Train, 1, 1, 1, rng).support_samples[0]];
    EXPECT_EQ(counts.size(), 12u);
    for (auto [idx, n] : counts) EXPECT_NEAR(n / double(trials), 1.0 / 12, 0.02) << "sample " << idx;
}

TEST(Sampler, ReportsDeficits) {
    auto data = small_dataset(8, 5);
    std::mt19937_64 rng(6);
    try {
        sample_episode(data, Split::Test, 5, 1, 1, rng);
        FAIL();
    } catch (const SamplerError& e) {
        EXPECT_NE(std::string(e.what()).find("short by 3"), std::string::npos) << e.what();
    }
    try {
        sample_episode(data, Split::Train, 2, 3, 3, rng);
        FAIL();
    } catch (const SamplerError& e) {
        EXPECT_NE(std::string(e.what()).find("short by 1"), std::string::npos) << e.what();
    }
    EXPECT_THROW(sample_episode(data, Split::Train, 0, 1, 1, rng), SamplerError);
}

TEST(Sampler, ReproducibleFromSeed) {
    auto data = small_dataset();
    std::mt19937_64 a(10), b(10);
    for (int i = 0; i < 5; ++i) {
        auto x = sample_episode(data, Split::Train, 3, 1, 2, a), y = sample_episode(data, Split::Train, 3, 1, 2, b);
        EXPECT_EQ(x.class_ids, y.class_ids);
        EXPECT_EQ(x.query, y.query);
    }
}

// Nearest-centroid on raw pixels, written independently of the library,
// as a learnability check on the generated classes.
TEST(Synthetic, ClassesAreSeparableByNearestCentroid) {
    SyntheticSpec spec;
    spec.num_classes = 8;
    spec.samples_per_class = 30;
    auto data = generate_synthetic(spec);
    std::mt19937_64 rng(7);
    int correct = 0, total = 0;
    for (int t = 0; t < 200; ++t) {
        auto ep = sample_episode(data, Split::Train, 4, 5, 5, rng);
        const std::size_t per = ep.support.numel() / ep.support.dim(0);
        std::vector<std::vector<double>> centroid(4, std::vector<double>(per, 0.0));
        for (std::size_t i = 0; i < ep.support.dim(0); ++i)
            for (std::size_t p = 0; p < per; ++p) centroid[ep.support_labels[i]][p] += ep.support[i * per + p] / 5.0;
        for (std::size_t i = 0; i < ep.query.dim(0); ++i) {
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t c = 0; c < 4; ++c) {
                double d = 0;
                for (std::size_t p = 0; p < per; ++p) d += std::pow(ep.query[i * per + p] - centroid[c][p], 2);
                if (d < best_d) best_d = d, best = c;
            }
            correct += best == ep.query_labels[i];
            ++total;
        }
    }
    EXPECT_GT(correct / double(total), 0.35);  // chance is 0.25
}

TEST(DatasetIo, ManifestRoundTrip) {
    auto data = small_dataset();
    auto dir = scratch("espt_dataset_rt");
    save_dataset(data, dir);
    auto back = load_dataset(dir / "dataset.ini");
    EXPECT_EQ(back.channels, data.channels);
    EXPECT_EQ(back.side, data.side);
    for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(back.splits[s], data.splits[s]);
    for (std::size_t c = 0; c < data.classes.size(); ++c) {
        EXPECT_EQ(back.classes[c].name, data.classes[c].name);
        EXPECT_EQ(back.classes[c].images, data.classes[c].images);
    }
    std::filesystem::remove_all(dir);
}

TEST(DatasetIo, RejectsOverlappingSplits) {
    auto dir = scratch("espt_dataset_overlap");
    save_dataset(small_dataset(), dir);
    std::string text;
    {
        std::ifstream in(dir / "dataset.ini");
        text.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto pos = text.find("val=");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 4, "val=[0, ");
    text.replace(text.find("[0, [", pos), 5, "[0, ");
    {
        std::ofstream out(dir / "dataset.ini");
        out << text;
    }
    try {
        load_dataset(dir / "dataset.ini");
        FAIL();
    } catch (const DatasetError& e) {
        EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos) << e.what();
    }
    std::filesystem::remove_all(dir);
}

TEST(DatasetIo, RejectsMissingBlobAndUnknownKeys) {
    auto dir = scratch("espt_dataset_missing");
    save_dataset(small_dataset(), dir);
    std::filesystem::remove(dir / "class_3.bin");
    try {
        load_dataset(dir / "dataset.ini");
        FAIL();
    } catch (const DatasetError& e) {
        EXPECT_NE(std::string(e.what()).find("class 3"), std::string::npos) << e.what();
    }
    std::filesystem::remove_all(dir);

    save_dataset(small_dataset(), dir);
    {
        std::ofstream out(dir / "dataset.ini", std::ios::app);
        out << "\n[extra]\nfoo=1\n";
    }
    EXPECT_THROW(load_dataset(dir / "dataset.ini"), DatasetError);
    EXPECT_THROW(load_dataset(dir / "nope.ini"), DatasetError);
    std::filesystem::remove_all(dir);
}

TEST(Synthetic, ReferenceSpecSizes) {
    SyntheticSpec spec;
    spec.num_classes = 8;
    spec.samples_per_class = 40;
    spec.image_side = 16;
    spec.seed = 7;
    auto data = generate_synthetic(spec);
    EXPECT_EQ(data.total_images(), 320u);
    EXPECT_EQ(data.split(Split::Train).size(), 4u);
    EXPECT_EQ(data.split(Split::Val).size(), 2u);
    EXPECT_EQ(data.split(Split::Test).size(), 2u);
    EXPECT_EQ(data.classes[0].images.shape(), (Shape{40, 3, 16, 16}));
}

TEST(Synthetic, DifferentSeedsGiveDifferentPixels) {
    SyntheticSpec spec;
    spec.samples_per_class = 4;
    auto a = generate_synthetic(spec);
    spec.seed = 1;
    auto b = generate_synthetic(spec);
    EXPECT_NE(a.classes[0].images, b.classes[0].images);
}

TEST(Sampler, SmallestEpisodeOnSingleClass) {
    SyntheticSpec spec;
    spec.num_classes = 1;
    spec.samples_per_class = 2;
    spec.train_fraction = 1.0;
    spec.val_fraction = 0.0;
    auto data = generate_synthetic(spec);
    std::mt19937_64 rng(0);
    auto ep = sample_episode(data, Split::Train, 1, 1, 1, rng);
    EXPECT_EQ(ep.support.shape(), (Shape{1, 3, 16, 16}));
    EXPECT_EQ(ep.query.shape(), (Shape{1, 3, 16, 16}));
    EXPECT_NE(ep.support_samples[0], ep.query_samples[0]);
    EXPECT_THROW(sample_episode(data, Split::Train, 1, 2, 1, rng), SamplerError);
}

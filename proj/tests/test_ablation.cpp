#include <gtest/gtest.h>

#include "espt/ablation.hpp"

using namespace espt;

namespace {

Dataset sweep_data() {
    SyntheticSpec spec;
    spec.samples_per_class = 8;
    spec.seed = 3;
    return generate_synthetic(spec);
}

SweepSpec tiny_sweep(SweepAxis axis) {
    SweepSpec s;
    s.base.shape = {2, 1, 2};
    s.base.epochs = 1;
    s.base.episodes_per_epoch = 2;
    s.base.validation_every = 0;
    s.axis = axis;
    s.seeds = {0};
    s.eval_shape = {2, 1, 3};
    s.eval_tasks = 6;
    return s;
}

}  // namespace

TEST(SweepAxis, ParseAndName) {
    EXPECT_EQ(parse_axis("alpha"), SweepAxis::Alpha);
    EXPECT_EQ(parse_axis("transforms"), SweepAxis::Transforms);
    EXPECT_STREQ(axis_name(SweepAxis::Transforms), "transforms");
    EXPECT_THROW(parse_axis("gamma"), ConfigError);
}

TEST(TransformLabels, RoundTripAllSubsets) {
    auto sets = all_transform_subsets();
    ASSERT_EQ(sets.size(), 7u);
    for (const auto& u : sets) EXPECT_EQ(parse_transform_label(transform_label(u)), u);
    EXPECT_EQ(transform_label(TransformSet({1, 2, 3})), "90+180+270");
    EXPECT_THROW(parse_transform_label("45"), ConfigError);
    EXPECT_THROW(parse_transform_label("90+x"), ConfigError);
}

TEST(SweepSpec, ConfigForChangesOnlyTheSweptValue) {
    auto s = tiny_sweep(SweepAxis::Alpha);
    s.alphas = {0.0, 0.7};
    auto c = s.config_for(1, 9);
    TrainConfig expected = s.base;
    expected.seed = 9;
    expected.hyper.alpha = 0.7;
    EXPECT_EQ(c, expected);

    s.axis = SweepAxis::Transforms;
    auto t = s.config_for(3, 9);
    EXPECT_EQ(t.transforms, TransformSet({1, 2}));
    EXPECT_EQ(t.hyper.alpha, s.base.hyper.alpha);
}

TEST(SweepSpec, ValidationAndLongRunningFlag) {
    auto s = tiny_sweep(SweepAxis::Alpha);
    EXPECT_NO_THROW(s.validate());
    EXPECT_FALSE(s.long_running());
    s.alphas.clear();
    EXPECT_THROW(s.validate(), ConfigError);
    s = tiny_sweep(SweepAxis::Alpha);
    s.seeds.clear();
    EXPECT_THROW(s.validate(), ConfigError);
    s = tiny_sweep(SweepAxis::Alpha);
    s.alphas = {-1.0};
    EXPECT_THROW(s.validate(), ConfigError);
    s = tiny_sweep(SweepAxis::Alpha);
    s.base.model = BackboneConfig::resnet12();
    EXPECT_TRUE(s.long_running());
}

TEST(SweepTable, HeaderAndCsv) {
    SweepTable t;
    t.rows.push_back({"alpha", "0.3", 2, 0.5, 0.125});
    EXPECT_EQ(SweepTable::header(), "axis,value,seed,mean_acc,ci");
    EXPECT_EQ(t.to_csv(), "axis,value,seed,mean_acc,ci\nalpha,0.3,2,0.5,0.125\n");
}

TEST(RunSweep, AlphaAxisWithSingleValue) {
    auto data = sweep_data();
    auto s = tiny_sweep(SweepAxis::Alpha);
    s.alphas = {0.0};
    s.seeds = {0, 1};
    std::size_t streamed = 0;
    auto table = run_sweep<double>(s, data, [&](const SweepRow&) { ++streamed; });
    ASSERT_EQ(table.rows.size(), 2u);
    EXPECT_EQ(streamed, 2u);
    for (const auto& r : table.rows) {
        EXPECT_EQ(r.axis, "alpha");
        EXPECT_EQ(r.value, "0");
        EXPECT_GE(r.mean_acc, 0.0);
        EXPECT_LE(r.mean_acc, 1.0);
    }
    EXPECT_EQ(table.rows[0].seed, 0u);
    EXPECT_EQ(table.rows[1].seed, 1u);
}

TEST(RunSweep, TransformAxisGivesSevenRowsPerSeed) {
    auto data = sweep_data();
    auto s = tiny_sweep(SweepAxis::Transforms);
    s.base.episodes_per_epoch = 1;
    s.seeds = {4};
    auto table = run_sweep<float>(s, data);
    ASSERT_EQ(table.rows.size(), 7u);
    std::vector<std::string> labels;
    for (const auto& r : table.rows) {
        EXPECT_EQ(r.axis, "transforms");
        EXPECT_EQ(r.seed, 4u);
        labels.push_back(r.value);
    }
    EXPECT_EQ(labels, (std::vector<std::string>{"90", "180", "270", "90+180", "90+270", "180+270", "90+180+270"}));
}

TEST(RunSweep, RepeatedAxisValuesGiveIdenticalAccuracy) {
    auto data = sweep_data();
    auto s = tiny_sweep(SweepAxis::Alpha);
    s.alphas = {0.3, 0.3};
    auto table = run_sweep<double>(s, data);
    ASSERT_EQ(table.rows.size(), 2u);
    EXPECT_EQ(table.rows[0].mean_acc, table.rows[1].mean_acc);
    EXPECT_EQ(table.rows[0].ci, table.rows[1].ci);
}

TEST(RunSweep, FailuresNameTheCell) {
    auto data = sweep_data();
    auto s = tiny_sweep(SweepAxis::Alpha);
    s.eval_shape = {7, 1, 1};  // test split has 2 classes
    s.alphas = {0.3};
    s.seeds = {2};
    try {
        run_sweep<double>(s, data);
        FAIL() << "expected SweepError";
    } catch (const SweepError& e) {
        EXPECT_NE(std::string(e.what()).find("alpha=0.3 seed=2:"), std::string::npos) << e.what();
    }
}

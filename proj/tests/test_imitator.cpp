#include <gtest/gtest.h>

#include <t2p/imitator.hpp>

#include "test_support.hpp"

using namespace t2p;
using t2p::testing::data_path;

namespace {

struct Mini {
    ParamSchema schema = load_schema(data_path("schemas/mini.schema.json"));
    EngineLayout layout = load_layout(data_path("layouts/mini.layout.json"), schema);
};

const Mini& mini() {
    static const Mini m;
    return m;
}

// 8x8 output, small enough for per-test training.
ImitatorConfig tiny(std::size_t input_dim) {
    ImitatorConfig c;
    c.input_dim = input_dim;
    c.encoder = {32, 128};
    c.seed_channels = 8;
    c.seed_size = 4;
    c.deconv = {3};
    return c;
}

}  // namespace

TEST(Imitator, ConfigPresetsAreConsistent) {
    EXPECT_NO_THROW(ImitatorConfig::mini(24).validate());
    EXPECT_EQ(ImitatorConfig::mini(24).resolution(), 32);
    EXPECT_EQ(ImitatorConfig::full().resolution(), 256);
    ImitatorConfig bad = tiny(4);
    bad.encoder.back() = 100;
    EXPECT_THROW(bad.validate(), ValidationError);
    bad = tiny(4);
    bad.deconv = {4};
    EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Imitator, ForwardShapeAndInputCheck) {
    ImitatorModel m(tiny(24));
    const auto out = m.forward(ad::Tensor::zeros({3, 24}));
    EXPECT_EQ(out.shape(), (ad::Shape{3, 3, 8, 8}));
    EXPECT_THROW(m.forward(ad::Tensor::zeros({3, 23})), ShapeError);
    EXPECT_THROW(imitate(m, ad::Tensor::zeros({5})), ShapeError);
}

TEST(Imitator, SaveLoadRoundTripIsBitwise) {
    for (bool bn : {false, true}) {
        ImitatorConfig c = tiny(6);
        c.encoder = {16, 128};
        c.deconv = {4, 3};
        c.batch_norm = bn;
        ImitatorModel m(c);
        Rng rng(5);
        m.forward(t2p::testing::random_tensor({4, 6}, rng), true);  // moves BN running stats
        const auto dir = t2p::testing::scratch_dir(bn ? "imi_bn" : "imi");
        m.save(dir);
        const ImitatorModel back = ImitatorModel::load(dir);
        const auto x = t2p::testing::random_tensor({2, 6}, rng);
        EXPECT_EQ(back.infer(x).values(), m.infer(x).values());
    }
}

TEST(Imitator, LoadNamesMissingPath) {
    const auto dir = t2p::testing::scratch_dir("imi_missing");
    try {
        ImitatorModel::load(dir);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("imitator.json"), std::string::npos);
    }
}

TEST(Imitator, CompositeGraphMatchesFiniteDifferences) {
    ImitatorConfig c = tiny(5);
    c.encoder = {12, 32};
    c.seed_channels = 2;
    c.deconv = {2, 3};
    c.output_init_scale = 1.0;
    ImitatorModel m(c);
    Rng rng(11);
    const auto x = t2p::testing::random_tensor({2, 5}, rng, 0.5);
    auto f = [&](const std::vector<ad::Tensor>& in) { return t2p::testing::weighted_sum(m.forward(in[0]), 3); };
    EXPECT_LT(t2p::testing::check_gradients(f, {x}).max_rel_error, 1e-3);
}

TEST(Dataset, SplitAndDiscreteSlots) {
    const auto ds = generate_dataset(mini().schema, mini().layout, 10, 0.8, 1, 16);
    EXPECT_EQ(ds.size(), 10u);
    EXPECT_EQ(ds.n_train, 8u);
    EXPECT_EQ(ds.n_val(), 2u);
    for (const auto& p : ds.params)
        for (int d : p.discrete) EXPECT_EQ(d, 0);
    EXPECT_EQ(train_count(2000, 0.8), 1600u);
    EXPECT_THROW(generate_dataset(mini().schema, mini().layout, 1, 0.8, 1, 16), ValidationError);
    EXPECT_THROW(generate_dataset(mini().schema, mini().layout, 10, 1.0, 1, 16), ValidationError);
}

TEST(Dataset, WrittenTwiceIsByteIdenticalAndLoadsBack) {
    const auto a = t2p::testing::scratch_dir("ds_a"), b = t2p::testing::scratch_dir("ds_b");
    const auto ds = generate_dataset(mini().schema, mini().layout, 6, 0.5, 3, 16, a);
    generate_dataset(mini().schema, mini().layout, 6, 0.5, 3, 16, b);
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(entry.path(), a);
        EXPECT_EQ(read_text_file(entry.path()), read_text_file(b / rel)) << rel;
    }
    const auto back = load_dataset(a);
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_EQ(back.n_train, ds.n_train);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.params[i].continuous, ds.params[i].continuous);
        EXPECT_EQ(back.images[i].data, ds.images[i].data);
    }
}

TEST(Dataset, MissingDirectoryNamesManifest) {
    try {
        load_dataset("/nonexistent/t2p_dataset");
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/t2p_dataset/manifest.json"), std::string::npos);
    }
}

TEST(ImitatorTraining, BeatsMeanImageOnTinyData) {
    const auto ds = generate_dataset(mini().schema, mini().layout, 200, 0.8, 2, 8);
    ImitatorModel m(tiny(mini().schema.continuous_count()));
    ImitatorTrainConfig tc;
    tc.optimizer = OptimizerKind::adam;
    tc.epochs = 40;
    tc.batch_size = 8;
    tc.lr = 3e-3;
    const auto res = train_imitator(m, ds, tc);
    ASSERT_EQ(res.history.size(), 40u);
    EXPECT_LT(res.history.back().train_l1, res.history.front().train_l1);
    EXPECT_LT(res.history.back().val_l1, 0.8 * mean_image_baseline(ds, ds.images));
}

TEST(ImitatorTraining, DeterministicGivenSeed) {
    const auto ds = generate_dataset(mini().schema, mini().layout, 24, 0.75, 4, 8);
    ImitatorTrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    ImitatorModel a(tiny(24)), b(tiny(24));
    const auto ha = train_imitator(a, ds, tc), hb = train_imitator(b, ds, tc);
    EXPECT_EQ(ha.history.back().val_l1, hb.history.back().val_l1);
    EXPECT_EQ(a.parameters()[0].values(), b.parameters()[0].values());
}

TEST(ImitatorTraining, RejectsResolutionMismatch) {
    const auto ds = generate_dataset(mini().schema, mini().layout, 8, 0.5, 4, 16);
    ImitatorModel m(tiny(24));
    EXPECT_THROW(train_imitator(m, ds, {}), ShapeError);
}

TEST(ImitatorTraining, ConfigJsonRoundTrip) {
    ImitatorTrainConfig tc;
    tc.optimizer = OptimizerKind::adam;
    tc.lr = 0.123;
    const ImitatorTrainConfig back = nlohmann::json(tc).get<ImitatorTrainConfig>();
    EXPECT_EQ(back.optimizer, OptimizerKind::adam);
    EXPECT_EQ(back.lr, 0.123);
    const ImitatorConfig c = nlohmann::json(ImitatorConfig::full()).get<ImitatorConfig>();
    EXPECT_EQ(c.deconv, ImitatorConfig::full().deconv);
    EXPECT_TRUE(c.batch_norm);
}

#include <gtest/gtest.h>

#include <t2p/optim.hpp>

#include "test_support.hpp"

using namespace t2p;

TEST(Sgd, MomentumAndWeightDecayUpdate) {
    ad::Tensor w = ad::Tensor::parameter({2}, {1.0, -2.0});
    Sgd opt({w}, {0.9, 0.1});
    w.mutable_grad() = {0.5, 0.5};
    opt.step(0.1);
    // v = g + wd w = {0.6, 0.3}; w -= 0.1 v
    EXPECT_DOUBLE_EQ(w.values()[0], 1.0 - 0.06);
    EXPECT_DOUBLE_EQ(w.values()[1], -2.0 - 0.03);
    opt.step(0.1);
    const double v0 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
    EXPECT_DOUBLE_EQ(w.values()[0], 0.94 - 0.1 * v0);
}

TEST(Sgd, NonFiniteGradientLeavesWeightsUntouched) {
    ad::Tensor a = ad::Tensor::parameter({1}, {1.0});
    ad::Tensor b = ad::Tensor::parameter({1}, {2.0});
    Sgd opt({a, b});
    a.mutable_grad() = {0.1};
    b.mutable_grad() = {std::nan("")};
    EXPECT_THROW(opt.step(0.1), DivergenceError);
    EXPECT_EQ(a.values()[0], 1.0);
    EXPECT_EQ(b.values()[0], 2.0);
}

TEST(Sgd, DecayingVelocityNeverGoesSubnormal) {
    ad::Tensor w = ad::Tensor::parameter({1}, {1.0});
    Sgd opt({w}, {0.9, 0.0});
    w.mutable_grad() = {1e-3};
    opt.step(0.1);
    w.mutable_grad() = {0.0};
    for (int i = 0; i < 8000; ++i) {
        opt.step(0.1);
        ASSERT_NE(std::fpclassify(opt.velocity()[0][0]), FP_SUBNORMAL) << "step " << i;
    }
    EXPECT_EQ(opt.velocity()[0][0], 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ad::Tensor w = ad::Tensor::parameter({3}, {0.0, 0.0, 0.0});
    Adam opt({w});
    w.mutable_grad() = {2.0, -0.001, 0.0};
    opt.step(0.01);
    // Bias-corrected first step is lr * sign(g) for non-zero g.
    EXPECT_NEAR(w.values()[0], -0.01, 1e-9);
    EXPECT_NEAR(w.values()[1], 0.01, 1e-5);
    EXPECT_EQ(w.values()[2], 0.0);
}

TEST(Adam, MinimizesQuadratic) {
    ad::Tensor w = ad::Tensor::parameter({2}, {3.0, -4.0});
    Adam opt({w});
    for (int i = 0; i < 2000; ++i) {
        opt.zero_grad();
        ad::sum(ad::mul(w, w)).backward();
        opt.step(0.05);
    }
    EXPECT_NEAR(w.values()[0], 0.0, 1e-2);
    EXPECT_NEAR(w.values()[1], 0.0, 1e-2);
}

TEST(Sgdr, ValuesAtStartMiddleAndEnd) {
    SgdrSchedule s(0.1, 1.0, 10);
    EXPECT_NEAR(s.lr(), 1.0, 1e-12);
    s.set_n_t(5);
    EXPECT_NEAR(s.lr(), 0.55, 1e-12);
    s.set_n_t(10);
    EXPECT_NEAR(s.lr(), 0.1, 1e-12);
    EXPECT_TRUE(s.is_snapshot_point());
}

TEST(Sgdr, WrapsAfterSnapshotPoint) {
    SgdrSchedule s(0.0, 1.0, 3);
    std::vector<int> seen;
    for (int i = 0; i < 9; ++i) {
        seen.push_back(s.n_t());
        s.advance();
    }
    EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3, 0}));
}

TEST(Sgdr, SnapshotCountOverHundredIterations) {
    SgdrSchedule s(0.0, 1.0, 10);
    int snaps = 0;
    for (int i = 0; i < 100; ++i) {
        if (s.is_snapshot_point()) ++snaps;
        s.advance();
    }
    EXPECT_LE(snaps, 10);
    EXPECT_EQ(snaps, 9);  // iterations 10, 21, ..., 98
}

TEST(Sgdr, RejectsBadConfig) {
    EXPECT_THROW(SgdrSchedule(0.0, 1.0, 0), ValidationError);
    EXPECT_THROW(SgdrSchedule(1.0, 0.5, 10), ValidationError);
    SgdrSchedule s(0.0, 1.0, 4);
    EXPECT_THROW(s.set_n_t(5), ValidationError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
    Rng rng(3);
    NamedTensors src = {{"a", t2p::testing::random_tensor({2, 3}, rng)}, {"b", t2p::testing::random_tensor({4}, rng)}};
    const auto dir = t2p::testing::scratch_dir("ckpt");
    save_checkpoint(dir / "m.ckpt", src);
    NamedTensors dst = {{"a", ad::Tensor::zeros({2, 3})}, {"b", ad::Tensor::zeros({4})}};
    load_checkpoint_into(dir / "m.ckpt", dst);
    EXPECT_EQ(dst[0].second.values(), src[0].second.values());
    EXPECT_EQ(dst[1].second.values(), src[1].second.values());
}

TEST(Checkpoint, ReportsMissingAndMismatchedTensors) {
    const auto dir = t2p::testing::scratch_dir("ckpt_bad");
    save_checkpoint(dir / "m.ckpt", {{"a", ad::Tensor::zeros({2})}});
    NamedTensors missing = {{"z", ad::Tensor::zeros({2})}};
    EXPECT_THROW(load_checkpoint_into(dir / "m.ckpt", missing), ParseError);
    NamedTensors shape = {{"a", ad::Tensor::zeros({3})}};
    EXPECT_THROW(load_checkpoint_into(dir / "m.ckpt", shape), ShapeError);
    EXPECT_THROW(decode_checkpoint("not a checkpoint"), ParseError);
    std::string truncated = encode_checkpoint({{"a", ad::Tensor::zeros({8})}});
    truncated.resize(truncated.size() - 5);
    EXPECT_THROW(decode_checkpoint(truncated), ParseError);
}

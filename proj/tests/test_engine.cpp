#include <gtest/gtest.h>

#include <set>

#include <t2p/engine.hpp>

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

bool differs_visibly(const RasterImage& a, const RasterImage& b) { return max_abs_diff(a, b) > 1.0 / 255.0; }

}  // namespace

TEST(Engine, DeterministicFrontAndSide) {
    const auto& m = mini();
    Rng rng(1);
    const auto p = sample_uniform(m.schema, rng);
    EXPECT_EQ(image_hash(render_front(p, m.layout)), image_hash(render_front(p, m.layout)));
    EXPECT_EQ(image_hash(render_side(p, m.layout)), image_hash(render_side(p, m.layout)));
}

TEST(Engine, OutputRangeAndSize) {
    const auto& m = mini();
    Rng rng(2);
    for (int res : {32, 64, 256}) {
        const auto img = render_front(sample_uniform(m.schema, rng), m.layout, res);
        EXPECT_EQ(img.width, res);
        EXPECT_EQ(img.height, res);
        for (double v : img.data) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
    EXPECT_THROW(render_front(neutral_params(m.schema), m.layout, 48), ValidationError);
}

TEST(Engine, HairStyleAppearsWhenNonzero) {
    const auto& m = mini();
    auto p = neutral_params(m.schema);
    const auto bald = render_front(p, m.layout);
    p.discrete[*m.schema.slot_index("hair_style")] = 1;
    EXPECT_TRUE(differs_visibly(bald, render_front(p, m.layout)));
}

TEST(Engine, SweepGivesDistinctImages) {
    const auto& m = mini();
    for (std::size_t c = 0; c < m.schema.continuous_count(); ++c) {
        auto p = neutral_params(m.schema);
        std::set<std::uint64_t> hashes;
        for (int k = 0; k <= 5; ++k) {
            p.continuous[c] = 0.2 * k;
            hashes.insert(image_hash(render_front(p, m.layout)));
        }
        EXPECT_GE(hashes.size(), 5u) << m.schema.continuous[c].name;
    }
}

TEST(Engine, SideDiffersFromFront) {
    const auto& m = mini();
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const auto p = sample_uniform(m.schema, rng);
        EXPECT_NE(image_hash(render_front(p, m.layout)), image_hash(render_side(p, m.layout)));
    }
}

TEST(Engine, BeardVisibleInSideView) {
    const auto& m = mini();
    Rng rng(4);
    const std::size_t beard = *m.schema.slot_index("beard");
    for (int i = 0; i < 20; ++i) {
        auto p = sample_uniform(m.schema, rng);
        p.discrete[beard] = 0;
        const auto base = render_side(p, m.layout);
        for (int v = 1; v < m.schema.discrete[beard].cardinality; ++v) {
            p.discrete[beard] = v;
            EXPECT_TRUE(differs_visibly(base, render_side(p, m.layout))) << "trial " << i << " value " << v;
        }
    }
}

TEST(Engine, ControllerLivenessOnRandomParams) {
    const auto& m = mini();
    Rng rng(5);
    for (int trial = 0; trial < 40; ++trial) {
        const auto p = sample_uniform(m.schema, rng);
        const auto front = render_front(p, m.layout);
        for (std::size_t c = 0; c < m.schema.continuous_count(); ++c) {
            for (double delta : {-0.2, 0.2}) {
                auto q = p;
                q.continuous[c] = std::clamp(p.continuous[c] + delta, 0.0, 1.0);
                if (std::abs(q.continuous[c] - p.continuous[c]) < 0.1) continue;  // clamped away
                EXPECT_TRUE(differs_visibly(front, render_front(q, m.layout)))
                    << m.schema.continuous[c].name << " trial " << trial << " delta " << delta;
            }
        }
    }
}

TEST(Engine, SlotLivenessOnRandomParams) {
    const auto& m = mini();
    Rng rng(6);
    for (int trial = 0; trial < 40; ++trial) {
        const auto p = sample_uniform(m.schema, rng);
        const auto front = render_front(p, m.layout);
        for (std::size_t s = 0; s < m.schema.discrete_count(); ++s) {
            for (int v = 0; v < m.schema.discrete[s].cardinality; ++v) {
                if (v == p.discrete[s]) continue;
                auto q = p;
                q.discrete[s] = v;
                EXPECT_TRUE(differs_visibly(front, render_front(q, m.layout)))
                    << m.schema.discrete[s].name << " trial " << trial << " " << p.discrete[s] << "->" << v;
            }
        }
    }
}

TEST(Engine, LocalContinuity) {
    const auto& m = mini();
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = sample_uniform(m.schema, rng);
        const double base = render_front(p, m.layout).mean();
        for (std::size_t c = 0; c < m.schema.continuous_count(); ++c) {
            auto q = p;
            q.continuous[c] = std::clamp(p.continuous[c] + 0.01, 0.0, 1.0);
            EXPECT_LE(std::abs(render_front(q, m.layout).mean() - base), 0.1);
        }
    }
}

TEST(Engine, ToyLayoutRenders) {
    const auto schema = load_schema(data_path("schemas/toy.schema.json"));
    const auto layout = load_layout(data_path("layouts/toy.layout.json"), schema);
    EXPECT_EQ(schema.continuous_count(), 4u);
    EXPECT_EQ(schema.discrete_count(), 2u);
    auto p = neutral_params(schema);
    const auto a = render_front(p, layout, 32);
    p.discrete[1] = 2;
    EXPECT_TRUE(differs_visibly(a, render_front(p, layout, 32)));
}

TEST(Engine, LayoutMismatchRejected) {
    const auto& m = mini();
    const auto toy = load_schema(data_path("schemas/toy.schema.json"));
    EXPECT_THROW(render_front(neutral_params(toy), m.layout), ValidationError);
    EXPECT_THROW(load_layout(data_path("layouts/toy.layout.json"), m.schema), ValidationError);
}

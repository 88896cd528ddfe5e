#include <gtest/gtest.h>

#include <set>

#include <t2p/param_schema.hpp>

#include "test_support.hpp"

using namespace t2p;
using t2p::testing::data_path;

namespace {

ParamSchema mini() { return load_schema(data_path("schemas/mini.schema.json")); }

}  // namespace

TEST(Schema, ShippedFullSchemaHasPublishedCounts) {
    const auto s = load_schema(data_path("schemas/full.schema.json"));
    EXPECT_EQ(s.continuous_count(), 269u);
    EXPECT_EQ(s.discrete_count(), 62u);
}

TEST(Schema, ShippedMiniSchemaCounts) {
    const auto s = mini();
    EXPECT_EQ(s.continuous_count(), 24u);
    EXPECT_EQ(s.discrete_count(), 8u);
    EXPECT_TRUE(s.slot_index("hair_style").has_value());
}

TEST(Schema, DuplicateSlotNameRejected) {
    const char* text = R"({"id":"x","continuous":[{"name":"a"}],
        "discrete":[{"name":"hair_style","cardinality":3},{"name":"hair_style","cardinality":2}]})";
    try {
        parse_schema(text);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("hair_style"), std::string::npos);
    }
}

TEST(Schema, CardinalityBelowTwoRejected) {
    const char* text = R"({"id":"x","continuous":[],"discrete":[{"name":"s","cardinality":1}]})";
    EXPECT_THROW(parse_schema(text), ValidationError);
}

TEST(Schema, MalformedFileIsParseError) {
    EXPECT_THROW(parse_schema("{\"id\": \"x\", "), ParseError);
    EXPECT_THROW(parse_schema(R"({"id":"x"})"), ParseError);
}

TEST(Schema, MissingFileIsIoError) { EXPECT_THROW(load_schema("/nonexistent/schema.json"), IoError); }

TEST(Sampling, SameSeedSameParams) {
    const auto s = mini();
    Rng a(11), b(11);
    EXPECT_EQ(sample_uniform(s, a), sample_uniform(s, b));
}

TEST(Sampling, ContinuousMeansNearHalf) {
    const auto s = mini();
    Rng rng(2024);
    std::vector<double> sums(s.continuous_count(), 0.0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto p = sample_uniform(s, rng);
        for (std::size_t j = 0; j < sums.size(); ++j) sums[j] += p.continuous[j];
    }
    for (std::size_t j = 0; j < sums.size(); ++j) {
        const double m = sums[j] / n;
        EXPECT_GE(m, 0.48) << s.continuous[j].name;
        EXPECT_LE(m, 0.52) << s.continuous[j].name;
    }
}

TEST(Sampling, EveryDiscreteValueAttained) {
    const auto s = mini();
    Rng rng(5);
    std::vector<std::set<int>> seen(s.discrete_count());
    for (int i = 0; i < 10000; ++i) {
        const auto p = sample_uniform(s, rng);
        ASSERT_TRUE(is_valid(s, p));
        for (std::size_t j = 0; j < seen.size(); ++j) seen[j].insert(p.discrete[j]);
    }
    for (std::size_t j = 0; j < seen.size(); ++j)
        EXPECT_EQ(seen[j].size(), static_cast<std::size_t>(s.discrete[j].cardinality)) << s.discrete[j].name;
}

TEST(Interpolate, EndpointsExact) {
    const auto s = mini();
    Rng rng(3);
    const auto a = sample_uniform(s, rng), b = sample_uniform(s, rng);
    EXPECT_EQ(interpolate(a, b, 1.0), a);
    EXPECT_EQ(interpolate(a, b, 0.0), b);
}

TEST(Interpolate, MidpointIsMean) {
    FacialParams a{"x", {0.2, 0.8}, {1}}, b{"x", {0.6, 0.0}, {2}};
    const auto m = interpolate(a, b, 0.5);
    EXPECT_NEAR(m.continuous[0], 0.4, 1e-12);
    EXPECT_NEAR(m.continuous[1], 0.4, 1e-12);
    EXPECT_EQ(m.discrete[0], 1);  // beta >= 0.5 takes a
    EXPECT_EQ(interpolate(a, b, 0.49).discrete[0], 2);
}

TEST(Interpolate, WithinBoundsAndIdempotentOnEqualInputs) {
    const auto s = mini();
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        const auto a = sample_uniform(s, rng), b = sample_uniform(s, rng);
        const double beta = rng.uniform();
        const auto m = interpolate(a, b, beta);
        for (std::size_t i = 0; i < m.continuous.size(); ++i) {
            EXPECT_GE(m.continuous[i], std::min(a.continuous[i], b.continuous[i]));
            EXPECT_LE(m.continuous[i], std::max(a.continuous[i], b.continuous[i]));
        }
        EXPECT_EQ(interpolate(a, a, beta), a);
    }
}

TEST(Interpolate, Errors) {
    FacialParams a{"x", {0.2}, {}}, b{"y", {0.6}, {}};
    EXPECT_THROW(interpolate(a, b, 0.5), ValidationError);
    b.schema_id = "x";
    EXPECT_THROW(interpolate(a, b, 1.5), ValidationError);
    EXPECT_THROW(interpolate(a, b, -0.1), ValidationError);
}

TEST(Serialize, RoundTripBitExact) {
    const auto s = mini();
    Rng rng(42);
    for (int i = 0; i < 1000; ++i) {
        const auto p = sample_uniform(s, rng);
        EXPECT_EQ(deserialize_params(serialize_params(p), &s), p);
    }
}

TEST(Serialize, TruncatedIsParseError) {
    const auto s = mini();
    Rng rng(1);
    const std::string text = serialize_params(sample_uniform(s, rng));
    EXPECT_THROW(deserialize_params(text.substr(0, text.size() / 2)), ParseError);
}

TEST(Serialize, OutOfRangeValueNamesCoordinate) {
    const auto s = mini();
    auto p = neutral_params(s);
    p.continuous[3] = 1.5;
    try {
        deserialize_params(serialize_params(p), &s);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("continuous[3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find(s.continuous[3].name), std::string::npos) << msg;
    }
}

TEST(Serialize, UnknownSchemaOnlyWhenValidating) {
    const auto s = mini();
    auto p = neutral_params(s);
    p.schema_id = "other";
    const auto text = serialize_params(p);
    EXPECT_NO_THROW(deserialize_params(text));
    EXPECT_THROW(deserialize_params(text, &s), ValidationError);
}

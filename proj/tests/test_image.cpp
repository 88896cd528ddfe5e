#include <gtest/gtest.h>

#include <t2p/image.hpp>

#include "test_support.hpp"

using namespace t2p;

namespace {

RasterImage random_image(int w, std::uint64_t seed) {
    Rng rng(seed);
    RasterImage img(w, w);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

}  // namespace

TEST(Quantize, RoundHalfUp) {
    EXPECT_EQ(quantize(0.0), 0);
    EXPECT_EQ(quantize(1.0), 255);
    EXPECT_EQ(quantize(0.5 / 255.0), 1);
    EXPECT_EQ(quantize(0.49 / 255.0), 0);
    EXPECT_EQ(quantize(-3.0), 0);
    EXPECT_EQ(quantize(7.0), 255);
}

TEST(Ppm, RoundTripMatchesQuantized) {
    const auto img = random_image(16, 4);
    const auto back = decode_ppm(encode_ppm(img));
    EXPECT_EQ(back, quantized(img));
    EXPECT_EQ(encode_ppm(back), encode_ppm(img));
}

TEST(Ppm, HeaderAndErrors) {
    const auto text = encode_ppm(random_image(4, 1));
    EXPECT_EQ(text.substr(0, 11), "P6\n4 4\n255\n");
    EXPECT_THROW(decode_ppm(text.substr(0, text.size() - 1)), ParseError);
    EXPECT_THROW(decode_ppm("P3\n1 1\n255\n"), ParseError);
}

TEST(Png, DecodeMatchesQuantizedPixels) {
    const auto img = random_image(32, 9);
    EXPECT_EQ(decode_png(encode_png(img)), quantized(img));
}

TEST(Png, BadSignature) { EXPECT_THROW(decode_png("not a png"), ParseError); }

TEST(Hash, DistinguishesImages) {
    auto a = random_image(8, 1);
    auto b = a;
    EXPECT_EQ(image_hash(a), image_hash(b));
    b.data[5] += 1e-12;
    EXPECT_NE(image_hash(a), image_hash(b));
}

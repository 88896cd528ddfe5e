#pragma once

// Conversions between HWC RasterImage and CHW tensors.

#include "image.hpp"
#include "tensor.hpp"

namespace t2p {

inline std::vector<double> image_to_chw(const RasterImage& img) {
    const std::size_t hw = static_cast<std::size_t>(img.width) * img.height;
    std::vector<double> out(3 * hw);
    for (std::size_t q = 0; q < hw; ++q)
        for (int c = 0; c < 3; ++c) out[c * hw + q] = img.data[q * 3 + c];
    return out;
}

inline ad::Tensor image_to_tensor(const RasterImage& img) {
    return ad::Tensor::constant({3, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)},
                                image_to_chw(img));
}

/// CHW values starting at `offset` to an image, clamped to [0,1].
inline RasterImage chw_to_image(const std::vector<double>& chw, std::size_t offset, int height, int width) {
    RasterImage img(width, height);
    const std::size_t hw = static_cast<std::size_t>(width) * height;
    for (std::size_t q = 0; q < hw; ++q)
        for (int c = 0; c < 3; ++c) img.data[q * 3 + c] = std::clamp(chw[offset + c * hw + q], 0.0, 1.0);
    return img;
}

}  // namespace t2p

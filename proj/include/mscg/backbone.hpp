#pragma once

#include <cstdint>
#include <vector>

#include "mscg/autograd.hpp"
#include "mscg/rng.hpp"
#include "mscg/scg.hpp"

namespace mscg {

template <typename T>
struct ConvBlock {
    NodePtr<T> w, b;
    NodePtr<T> bn_scale, bn_shift;
    Tensor<T> bn_mean, bn_var;
    std::int64_t stride = 1;
};

template <typename T>
ConvBlock<T> make_conv_block(std::int64_t cin, std::int64_t cout, std::int64_t stride, CounterRng& rng) {
    ConvBlock<T> blk;
    Tensor<T> w({cout, cin, 3, 3});
    rng.fill_normal(w, 0.0, std::sqrt(2.0 / static_cast<double>(cin * 9)));
    blk.w = param(std::move(w));
    blk.b = param(Tensor<T>({cout}));
    blk.bn_scale = param(Tensor<T>::full({cout}, T(1)));
    blk.bn_shift = param(Tensor<T>({cout}));
    blk.bn_mean = Tensor<T>({cout});
    blk.bn_var = Tensor<T>::full({cout}, T(1));
    blk.stride = stride;
    return blk;
}

template <typename T>
NodePtr<T> conv_block_forward(const NodePtr<T>& x, ConvBlock<T>& blk, Mode mode) {
    auto y = conv2d(x, blk.w, blk.b, blk.stride, 1);
    y = batchnorm2d(y, blk.bn_scale, blk.bn_shift, blk.bn_mean, blk.bn_var, T(0.1), static_cast<T>(kEps),
                    mode == Mode::train);
    return relu(y);
}

// Stride-16 feature extractor: four stride-2 stages with channel plan
// 4 -> 32 -> 64 -> 128 -> d_out; stage 1 carries an extra stride-1 block
// after its stride-2 conv.
template <typename T>
struct BackboneParams {
    std::vector<ConvBlock<T>> blocks;

    std::int64_t out_channels() const { return blocks.back().w->value.shape[0]; }
};

template <typename T>
BackboneParams<T> make_backbone(std::int64_t d_out, CounterRng& rng) {
    BackboneParams<T> p;
    p.blocks.push_back(make_conv_block<T>(4, 32, 2, rng));
    p.blocks.push_back(make_conv_block<T>(32, 32, 1, rng));
    p.blocks.push_back(make_conv_block<T>(32, 64, 2, rng));
    p.blocks.push_back(make_conv_block<T>(64, 128, 2, rng));
    p.blocks.push_back(make_conv_block<T>(128, d_out, 2, rng));
    return p;
}

template <typename T>
NodePtr<T> backbone_forward(const NodePtr<T>& x, BackboneParams<T>& params, Mode mode) {
    const Shape& s = x->value.shape;
    if (s.size() != 4 || s[1] != 4) throw contract_violation("backbone expects [b,4,h,w] input, got " + shape_str(s));
    if (s[2] % 16 != 0 || s[3] % 16 != 0) {
        throw contract_violation("backbone input extents must be divisible by 16, got " + shape_str(s));
    }
    auto y = x;
    for (auto& blk : params.blocks) y = conv_block_forward(y, blk, mode);
    return y;
}

// NIR-RGB adaptation of a pretrained RGB first-layer kernel: the new leading
// NIR slice is a copy of the R slice, giving channel order NIR, R, G, B.
template <typename T>
Tensor<T> adapt_rgb_weights_to_nirrgb(const Tensor<T>& w3) {
    if (w3.rank() != 4 || w3.shape[1] != 3) {
        throw contract_violation("adapt_rgb_weights_to_nirrgb expects [cout,3,kh,kw], got " + shape_str(w3.shape));
    }
    const std::int64_t cout = w3.shape[0], kh = w3.shape[2], kw = w3.shape[3];
    const std::int64_t plane = kh * kw;
    Tensor<T> w4({cout, 4, kh, kw});
    for (std::int64_t o = 0; o < cout; ++o) {
        const T* red = &w3.at((o * 3 + 0) * plane);
        T* out = &w4.at(o * 4 * plane);
        for (std::int64_t i = 0; i < plane; ++i) out[i] = red[i]; // NIR = R
        for (std::int64_t c = 0; c < 3; ++c) {
            const T* src = &w3.at((o * 3 + c) * plane);
            T* dst = &w4.at((o * 4 + c + 1) * plane);
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i];
        }
    }
    return w4;
}

} // namespace mscg

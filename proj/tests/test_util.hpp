#pragma once

#include <random>

#include "mipr/datakit.hpp"
#include "mipr/nn/tensor.hpp"

namespace mipr::testing {

inline ImageTensor random_image(int h, int w, int c, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    ImageTensor im(h, w, c);
    for (float& v : im.data()) v = unit(rng);
    return im;
}

inline LabelMask random_mask(int h, int w, std::mt19937_64& rng, double p = 0.5) {
    std::bernoulli_distribution coin(p);
    LabelMask m(h, w);
    for (auto& v : m.data()) v = coin(rng) ? 1 : 0;
    return m;
}

inline nn::Tensor random_tensor(const nn::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    nn::Tensor t(shape);
    for (double& v : t.values()) v = normal(rng);
    return t;
}

/// Disc-shaped lesion mask, the kind of target the segmenter sees.
inline LabelMask disc_mask(int h, int w, double cy, double cx, double r) {
    LabelMask m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.at(y, x) = (y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx) <= r * r;
    return m;
}

}  // namespace mipr::testing

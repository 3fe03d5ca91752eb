#pragma once

// Images generated from a known dictionary, for end-to-end runs.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "warp_lca/dictionary.hpp"

namespace warp_lca::testing {

/// Unit-norm Gabor-like kernels: orientations x two phases.
inline Dictionary gabor_dictionary(std::size_t features, std::size_t kernel, std::size_t stride) {
    Dictionary d;
    d.geom = ConvGeometry::square(kernel, stride);
    d.kernels = Tensor4(Shape4{features, 1, kernel, kernel});
    const std::size_t orientations = (features + 1) / 2;
    const double c = (static_cast<double>(kernel) - 1.0) / 2.0;
    const double sigma = static_cast<double>(kernel) / 4.0;
    for (std::size_t m = 0; m < features; ++m) {
        const double theta = std::numbers::pi * static_cast<double>(m % orientations) / static_cast<double>(orientations);
        const double phase = m < orientations ? 0.0 : std::numbers::pi / 2.0;
        for (std::size_t y = 0; y < kernel; ++y)
            for (std::size_t x = 0; x < kernel; ++x) {
                const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
                const double along = dx * std::cos(theta) + dy * std::sin(theta);
                const double envelope = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                d.kernels(m, 0, y, x) = envelope * std::cos(2.0 * std::numbers::pi * along / static_cast<double>(kernel) + phase);
            }
    }
    return normalize_kernels(std::move(d));
}

/// Pixel images 0.5 + scale * (Phi a) for sparse nonnegative codes a, clamped to [0, 1].
inline std::vector<Tensor4> synthetic_images(const Dictionary& dict, std::size_t count, std::size_t h, std::size_t w,
                                             double density, std::uint64_t seed, double scale = 0.25) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution active(density);
    std::uniform_real_distribution<double> amplitude(0.5, 1.5);
    const Shape4 code = dict.code_shape(Shape4{1, dict.channels(), h, w});
    std::vector<Tensor4> out;
    for (std::size_t i = 0; i < count; ++i) {
        Tensor4 a(code);
        for (double& v : a.data())
            if (active(rng)) v = amplitude(rng);
        Tensor4 img = reconstruct(a, dict, h, w);
        for (double& v : img.data()) v = std::clamp(0.5 + scale * v, 0.0, 1.0);
        out.push_back(std::move(img));
    }
    return out;
}

} // namespace warp_lca::testing

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "json.hpp"

#include "warp_lca/errors.hpp"
#include "warp_lca/tensor.hpp"

namespace warp_lca {

/// Per-channel affine normalisation x' = (x - mean) / std, computed once over
/// a whole dataset in [0, 1] pixel units.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> stddev;

    bool is_identity() const noexcept { return mean.empty(); }
    std::size_t channels() const noexcept { return mean.size(); }

    static Normalization identity() { return {}; }

    /// Dataset-global statistics. Zero-variance channels get std = 1.
    static Normalization fit(std::span<const Tensor4> images) {
        if (images.empty()) return identity();
        const std::size_t channels = images.front().shape().c;
        std::vector<double> sum(channels, 0.0), sum_sq(channels, 0.0);
        std::vector<std::size_t> count(channels, 0);
        for (const auto& img : images) {
            if (img.shape().c != channels) throw ShapeError("channels", channels, img.shape().c, "Normalization::fit");
            for (std::size_t n = 0; n < img.shape().n; ++n) {
                for (std::size_t c = 0; c < channels; ++c) {
                    for (double v : img.plane(n, c)) {
                        sum[c] += v;
                        sum_sq[c] += v * v;
                    }
                    count[c] += img.shape().h * img.shape().w;
                }
            }
        }
        Normalization norm;
        for (std::size_t c = 0; c < channels; ++c) {
            const double m = sum[c] / static_cast<double>(count[c]);
            const double var = std::max(sum_sq[c] / static_cast<double>(count[c]) - m * m, 0.0);
            norm.mean.push_back(m);
            norm.stddev.push_back(var > 1e-24 ? std::sqrt(var) : 1.0);
        }
        return norm;
    }

    Tensor4 apply(const Tensor4& pixels) const {
        if (is_identity()) return pixels;
        check(pixels.shape());
        Tensor4 out = pixels;
        for (std::size_t n = 0; n < out.shape().n; ++n)
            for (std::size_t c = 0; c < out.shape().c; ++c)
                for (double& v : out.plane(n, c)) v = (v - mean[c]) / stddev[c];
        return out;
    }

    Tensor4 invert(const Tensor4& normalized) const {
        if (is_identity()) return normalized;
        check(normalized.shape());
        Tensor4 out = normalized;
        for (std::size_t n = 0; n < out.shape().n; ++n)
            for (std::size_t c = 0; c < out.shape().c; ++c)
                for (double& v : out.plane(n, c)) v = v * stddev[c] + mean[c];
        return out;
    }

    friend bool operator==(const Normalization&, const Normalization&) = default;

private:
    void check(const Shape4& s) const {
        if (s.c != mean.size()) throw ShapeError("channels", mean.size(), s.c, "Normalization");
    }
};

inline void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.stddev}}; }
inline void from_json(const nlohmann::json& j, Normalization& n) {
    n.mean = j.at("mean").get<std::vector<double>>();
    n.stddev = j.at("std").get<std::vector<double>>();
    if (n.mean.size() != n.stddev.size()) throw FormatError("normalization: mean/std length mismatch");
}

} // namespace warp_lca

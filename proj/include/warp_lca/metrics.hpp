#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "warp_lca/errors.hpp"
#include "warp_lca/tensor.hpp"

namespace warp_lca {

/// One row of a solver trajectory. psnr is +inf for a perfect reconstruction;
/// ssim is NaN when the image is smaller than the SSIM window.
struct MetricsRecord {
    std::size_t iter = 0;
    double mse = 0.0;
    std::size_t l0 = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    double energy = 0.0;
};

inline constexpr double kDefaultL0Tolerance = 1e-8;

inline double mse(const Tensor4& a, const Tensor4& b) {
    require_same_shape(a.shape(), b.shape(), "mse");
    if (a.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

inline std::size_t l0_count(const Tensor4& a, double tol = kDefaultL0Tolerance) {
    if (tol < 0.0) throw ConfigError("l0_count: tolerance must be >= 0");
    std::size_t n = 0;
    for (double v : a.data()) n += std::abs(v) > tol ? 1 : 0;
    return n;
}

inline double psnr_from_mse(double mse_value, double data_range = 1.0) {
    if (!(data_range > 0.0)) throw ConfigError("psnr: data_range must be > 0");
    if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse_value);
}

inline double psnr(const Tensor4& a, const Tensor4& b, double data_range = 1.0) {
    return psnr_from_mse(mse(a, b), data_range);
}

namespace detail {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

inline std::vector<double> gaussian_window() {
    std::vector<double> g(kSsimWindow);
    const double centre = (kSsimWindow - 1) / 2.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < kSsimWindow; ++i) {
        const double d = static_cast<double>(i) - centre;
        g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
}

/// Separable Gaussian filtering, 'valid' region only.
inline std::vector<double> filter_valid(std::span<const double> img, std::size_t h, std::size_t w,
                                        const std::vector<double>& g) {
    const std::size_t k = g.size();
    const std::size_t oh = h - k + 1, ow = w - k + 1;
    std::vector<double> tmp(h * ow, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * img[y * w + x + i];
            tmp[y * ow + x] = acc;
        }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}

inline double ssim_plane(std::span<const double> a, std::span<const double> b, std::size_t h, std::size_t w,
                         double data_range) {
    const auto g = gaussian_window();
    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = filter_valid(a, h, w, g);
    const auto mu_b = filter_valid(b, h, w, g);
    const auto e_aa = filter_valid(aa, h, w, g);
    const auto e_bb = filter_valid(bb, h, w, g);
    const auto e_ab = filter_valid(ab, h, w, g);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
        const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
        const double cov = e_ab[i] - mu_a[i] * mu_b[i];
        const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    return total / static_cast<double>(mu_a.size());
}

} // namespace detail

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, averaged over channels and batch.
inline double ssim(const Tensor4& a, const Tensor4& b, double data_range = 1.0) {
    require_same_shape(a.shape(), b.shape(), "ssim");
    if (!(data_range > 0.0)) throw ConfigError("ssim: data_range must be > 0");
    const Shape4 s = a.shape();
    if (s.h < detail::kSsimWindow || s.w < detail::kSsimWindow)
        throw ConfigError("ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                          " is smaller than the 11x11 window");
    double total = 0.0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) total += detail::ssim_plane(a.plane(n, c), b.plane(n, c), s.h, s.w, data_range);
    return total / static_cast<double>(s.n * s.c);
}

inline bool ssim_applicable(const Shape4& s) noexcept {
    return s.h >= detail::kSsimWindow && s.w >= detail::kSsimWindow;
}

/// Per code pixel, the number of channels with |a| > tol. Shape [B, 1, H', W'].
inline Tensor4 activation_count_map(const Tensor4& codes, double tol = kDefaultL0Tolerance) {
    const Shape4 s = codes.shape();
    Tensor4 map(Shape4{s.n, 1, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            auto src = codes.plane(n, c);
            auto dst = map.plane(n, 0);
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += std::abs(src[i]) > tol ? 1.0 : 0.0;
        }
    return map;
}

/// Min-max normalises a set of maps with one shared range so they are
/// directly comparable. A constant set maps to 1 (if positive) or 0.
inline std::vector<Tensor4> normalize_jointly(std::vector<Tensor4> maps) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& m : maps)
        for (double v : m.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (!std::isfinite(lo)) return maps;
    const double range = hi - lo;
    for (auto& m : maps)
        for (double& v : m.data()) v = range > 0.0 ? (v - lo) / range : (hi > 0.0 ? 1.0 : 0.0);
    return maps;
}

/// Accumulated activation map of a single code tensor, normalised to [0, 1].
inline Tensor4 accumulated_activation_map(const Tensor4& codes, double tol = kDefaultL0Tolerance) {
    return normalize_jointly({activation_count_map(codes, tol)}).front();
}

/// Jointly normalised accumulated maps for several code tensors.
inline std::vector<Tensor4> accumulated_activation_maps(std::span<const Tensor4> codes,
                                                        double tol = kDefaultL0Tolerance) {
    std::vector<Tensor4> maps;
    for (const auto& c : codes) maps.push_back(activation_count_map(c, tol));
    return normalize_jointly(std::move(maps));
}

} // namespace warp_lca

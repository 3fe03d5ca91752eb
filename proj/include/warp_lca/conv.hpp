#pragma once

// Strided 2-D correlation with "same" zero padding, its exact adjoint
// (transposed convolution), the kernel-space gradient, and the kernel Gram
// tensor used for lateral inhibition.
//
// Geometry for an input extent H, kernel k and stride s:
//   out   = ceil(H / s)
//   total = max((out - 1) * s + k - H, 0)
//   pad   = total / 2         (extra pixel goes to the bottom/right)
// Output position o reads input pixels o*s - pad + [0, k).

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "warp_lca/errors.hpp"
#include "warp_lca/tensor.hpp"

namespace warp_lca {

enum class Padding { Same };

struct ConvGeometry {
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    Padding padding = Padding::Same;

    static ConvGeometry square(std::size_t kernel, std::size_t stride) { return {kernel, kernel, stride, stride}; }

    void validate() const {
        if (kernel_h == 0 || kernel_w == 0) throw ConfigError("ConvGeometry: kernel dims must be >= 1");
        if (stride_h == 0 || stride_w == 0) throw ConfigError("ConvGeometry: stride must be >= 1");
    }

    static constexpr std::size_t out_extent(std::size_t in, std::size_t stride) noexcept {
        return (in + stride - 1) / stride;
    }
    static constexpr std::size_t pad_before(std::size_t in, std::size_t kernel, std::size_t stride) noexcept {
        const std::size_t out = out_extent(in, stride);
        if (out == 0) return 0;
        const std::size_t needed = (out - 1) * stride + kernel;
        return needed > in ? (needed - in) / 2 : 0;
    }

    std::size_t code_h(std::size_t image_h) const noexcept { return out_extent(image_h, stride_h); }
    std::size_t code_w(std::size_t image_w) const noexcept { return out_extent(image_w, stride_w); }
    std::size_t pad_top(std::size_t image_h) const noexcept { return pad_before(image_h, kernel_h, stride_h); }
    std::size_t pad_left(std::size_t image_w) const noexcept { return pad_before(image_w, kernel_w, stride_w); }

    /// Code-space shape produced by correlating `image` with `features` kernels.
    Shape4 code_shape(const Shape4& image, std::size_t features) const {
        return {image.n, features, code_h(image.h), code_w(image.w)};
    }

    /// Spatial half-extent of the Gram tensor: ceil(k / s) - 1.
    std::size_t gram_radius_h() const noexcept { return (kernel_h + stride_h - 1) / stride_h - 1; }
    std::size_t gram_radius_w() const noexcept { return (kernel_w + stride_w - 1) / stride_w - 1; }

    friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

namespace detail {

/// Range [lo, hi) of output positions o for which o*stride - pad + k lies in [0, in).
struct ValidRange {
    std::size_t lo;
    std::size_t hi;
};

inline ValidRange valid_outputs(std::size_t out, std::size_t in, std::size_t stride, std::size_t pad,
                                std::size_t k) noexcept {
    // o*stride + k - pad >= 0  and  o*stride + k - pad <= in - 1
    const long long off = static_cast<long long>(k) - static_cast<long long>(pad);
    long long lo = 0;
    if (off < 0) lo = (-off + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
    long long hi_incl = (static_cast<long long>(in) - 1 - off);
    if (hi_incl < 0) return {0, 0};
    hi_incl /= static_cast<long long>(stride);
    const long long hi = std::min<long long>(hi_incl + 1, static_cast<long long>(out));
    if (hi <= lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline void check_kernels(const Shape4& kernels, const ConvGeometry& geom, const std::string& context) {
    geom.validate();
    if (kernels.h != geom.kernel_h) throw ShapeError("kernel_height", geom.kernel_h, kernels.h, context);
    if (kernels.w != geom.kernel_w) throw ShapeError("kernel_width", geom.kernel_w, kernels.w, context);
}

} // namespace detail

/// out[b, m, o] = <kernels[m], zero-padded input window at o>.
/// kernels: [M, C, kH, kW]; input: [B, C, H, W]; result: [B, M, ceil(H/sh), ceil(W/sw)].
template <typename T>
BasicTensor4<T> correlate(const BasicTensor4<T>& input, const BasicTensor4<T>& kernels, const ConvGeometry& geom) {
    const Shape4 in = input.shape();
    const Shape4 ks = kernels.shape();
    detail::check_kernels(ks, geom, "correlate");
    if (ks.c != in.c) throw ShapeError("channels", ks.c, in.c, "correlate");

    const std::size_t oh = geom.code_h(in.h), ow = geom.code_w(in.w);
    const std::size_t pt = geom.pad_top(in.h), pl = geom.pad_left(in.w);
    BasicTensor4<T> out(Shape4{in.n, ks.n, oh, ow});

    const long long total = static_cast<long long>(in.n * ks.n);
#pragma omp parallel for schedule(static)
    for (long long bm = 0; bm < total; ++bm) {
        const std::size_t b = static_cast<std::size_t>(bm) / ks.n;
        const std::size_t m = static_cast<std::size_t>(bm) % ks.n;
        std::vector<double> acc(oh * ow, 0.0);
        for (std::size_t c = 0; c < in.c; ++c) {
            const T* src = input.plane(b, c).data();
            for (std::size_t ky = 0; ky < geom.kernel_h; ++ky) {
                const auto ry = detail::valid_outputs(oh, in.h, geom.stride_h, pt, ky);
                for (std::size_t kx = 0; kx < geom.kernel_w; ++kx) {
                    const auto rx = detail::valid_outputs(ow, in.w, geom.stride_w, pl, kx);
                    const double wgt = static_cast<double>(kernels(m, c, ky, kx));
                    if (wgt == 0.0) continue;
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const std::size_t iy = oy * geom.stride_h + ky - pt;
                        const T* row = src + iy * in.w;
                        double* dst = acc.data() + oy * ow;
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                            dst[ox] += wgt * static_cast<double>(row[ox * geom.stride_w + kx - pl]);
                        }
                    }
                }
            }
        }
        auto plane = out.plane(b, m);
        for (std::size_t i = 0; i < acc.size(); ++i) plane[i] = static_cast<T>(acc[i]);
    }
    return out;
}

/// Adjoint of `correlate` for an image of extent out_h x out_w: scatter-adds
/// each kernel scaled by its coefficient.
template <typename T>
BasicTensor4<T> transposed_convolve(const BasicTensor4<T>& coeffs, const BasicTensor4<T>& kernels,
                                    const ConvGeometry& geom, std::size_t out_h, std::size_t out_w) {
    const Shape4 cs = coeffs.shape();
    const Shape4 ks = kernels.shape();
    detail::check_kernels(ks, geom, "transposed_convolve");
    if (cs.c != ks.n) throw ShapeError("features", ks.n, cs.c, "transposed_convolve");
    if (geom.code_h(out_h) != cs.h) throw ShapeError("height", geom.code_h(out_h), cs.h, "transposed_convolve");
    if (geom.code_w(out_w) != cs.w) throw ShapeError("width", geom.code_w(out_w), cs.w, "transposed_convolve");

    const std::size_t pt = geom.pad_top(out_h), pl = geom.pad_left(out_w);
    BasicTensor4<T> out(Shape4{cs.n, ks.c, out_h, out_w});

    const long long total = static_cast<long long>(cs.n * ks.c);
#pragma omp parallel for schedule(static)
    for (long long bc = 0; bc < total; ++bc) {
        const std::size_t b = static_cast<std::size_t>(bc) / ks.c;
        const std::size_t c = static_cast<std::size_t>(bc) % ks.c;
        std::vector<double> acc(out_h * out_w, 0.0);
        for (std::size_t m = 0; m < ks.n; ++m) {
            const T* src = coeffs.plane(b, m).data();
            for (std::size_t ky = 0; ky < geom.kernel_h; ++ky) {
                const auto ry = detail::valid_outputs(cs.h, out_h, geom.stride_h, pt, ky);
                for (std::size_t kx = 0; kx < geom.kernel_w; ++kx) {
                    const auto rx = detail::valid_outputs(cs.w, out_w, geom.stride_w, pl, kx);
                    const double wgt = static_cast<double>(kernels(m, c, ky, kx));
                    if (wgt == 0.0) continue;
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const std::size_t iy = oy * geom.stride_h + ky - pt;
                        const T* row = src + oy * cs.w;
                        double* dst = acc.data() + iy * out_w;
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                            dst[ox * geom.stride_w + kx - pl] += wgt * static_cast<double>(row[ox]);
                        }
                    }
                }
            }
        }
        auto plane = out.plane(b, c);
        for (std::size_t i = 0; i < acc.size(); ++i) plane[i] = static_cast<T>(acc[i]);
    }
    return out;
}

/// Transposed convolution onto the smallest image whose code extent matches.
template <typename T>
BasicTensor4<T> transposed_convolve(const BasicTensor4<T>& coeffs, const BasicTensor4<T>& kernels,
                                    const ConvGeometry& geom) {
    return transposed_convolve(coeffs, kernels, geom, coeffs.shape().h * geom.stride_h,
                               coeffs.shape().w * geom.stride_w);
}

/// Gradient of <out_grad, correlate(input, K)> with respect to K.
/// Shape [M, C, kH, kW] with M = out_grad channels and C = input channels.
template <typename T>
BasicTensor4<T> kernel_gradient(const BasicTensor4<T>& input, const BasicTensor4<T>& out_grad,
                                const ConvGeometry& geom) {
    const Shape4 in = input.shape();
    const Shape4 gs = out_grad.shape();
    geom.validate();
    if (gs.n != in.n) throw ShapeError("batch", in.n, gs.n, "kernel_gradient");
    if (gs.h != geom.code_h(in.h)) throw ShapeError("height", geom.code_h(in.h), gs.h, "kernel_gradient");
    if (gs.w != geom.code_w(in.w)) throw ShapeError("width", geom.code_w(in.w), gs.w, "kernel_gradient");

    const std::size_t pt = geom.pad_top(in.h), pl = geom.pad_left(in.w);
    BasicTensor4<T> grad(Shape4{gs.c, in.c, geom.kernel_h, geom.kernel_w});

    const long long total = static_cast<long long>(gs.c * in.c);
#pragma omp parallel for schedule(static)
    for (long long mc = 0; mc < total; ++mc) {
        const std::size_t m = static_cast<std::size_t>(mc) / in.c;
        const std::size_t c = static_cast<std::size_t>(mc) % in.c;
        for (std::size_t ky = 0; ky < geom.kernel_h; ++ky) {
            const auto ry = detail::valid_outputs(gs.h, in.h, geom.stride_h, pt, ky);
            for (std::size_t kx = 0; kx < geom.kernel_w; ++kx) {
                const auto rx = detail::valid_outputs(gs.w, in.w, geom.stride_w, pl, kx);
                double acc = 0.0;
                for (std::size_t b = 0; b < in.n; ++b) {
                    const T* g = out_grad.plane(b, m).data();
                    const T* src = input.plane(b, c).data();
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const T* row = src + (oy * geom.stride_h + ky - pt) * in.w;
                        const T* grow = g + oy * gs.w;
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                            acc += static_cast<double>(grow[ox]) * static_cast<double>(row[ox * geom.stride_w + kx - pl]);
                        }
                    }
                }
                grad(m, c, ky, kx) = static_cast<T>(acc);
            }
        }
    }
    return grad;
}

/// Gram tensor G[i, j, ry + dy, rx + dx] = sum_{c,y,x} K_i[c,y,x] K_j[c, y - dy*sh, x - dx*sw]
/// for code-space lags |dy| <= ry, |dx| <= rx. Shifts leaving the kernel support contribute zero.
template <typename T>
BasicTensor4<T> kernel_gram(const BasicTensor4<T>& kernels, const ConvGeometry& geom) {
    const Shape4 ks = kernels.shape();
    detail::check_kernels(ks, geom, "kernel_gram");
    const long long ry = static_cast<long long>(geom.gram_radius_h());
    const long long rx = static_cast<long long>(geom.gram_radius_w());
    const long long kh = static_cast<long long>(ks.h), kw = static_cast<long long>(ks.w);
    BasicTensor4<T> gram(Shape4{ks.n, ks.n, static_cast<std::size_t>(2 * ry + 1), static_cast<std::size_t>(2 * rx + 1)});

    for (std::size_t i = 0; i < ks.n; ++i) {
        for (std::size_t j = 0; j < ks.n; ++j) {
            for (long long dy = -ry; dy <= ry; ++dy) {
                const long long sy = dy * static_cast<long long>(geom.stride_h);
                for (long long dx = -rx; dx <= rx; ++dx) {
                    const long long sx = dx * static_cast<long long>(geom.stride_w);
                    double acc = 0.0;
                    for (std::size_t c = 0; c < ks.c; ++c) {
                        for (long long y = std::max(0LL, sy); y < std::min(kh, kh + sy); ++y) {
                            for (long long x = std::max(0LL, sx); x < std::min(kw, kw + sx); ++x) {
                                acc += static_cast<double>(kernels(i, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x))) *
                                       static_cast<double>(kernels(j, c, static_cast<std::size_t>(y - sy),
                                                                   static_cast<std::size_t>(x - sx)));
                            }
                        }
                    }
                    gram(i, j, static_cast<std::size_t>(dy + ry), static_cast<std::size_t>(dx + rx)) = static_cast<T>(acc);
                }
            }
        }
    }
    return gram;
}

/// Lateral term sum_j sum_q <K_i at p, K_j at q> a_j[q] evaluated through the
/// Gram tensor. Code positions whose receptive field is fully inside the image
/// use `gram` directly; positions touching the padded border use the overlap
/// clipped to the image, so the result equals correlate(transposed_convolve(a)).
template <typename T>
BasicTensor4<T> gram_inhibition(const BasicTensor4<T>& coeffs, const BasicTensor4<T>& kernels,
                                const BasicTensor4<T>& gram, const ConvGeometry& geom, std::size_t image_h,
                                std::size_t image_w) {
    const Shape4 cs = coeffs.shape();
    const Shape4 ks = kernels.shape();
    detail::check_kernels(ks, geom, "gram_inhibition");
    if (cs.c != ks.n) throw ShapeError("features", ks.n, cs.c, "gram_inhibition");
    if (cs.h != geom.code_h(image_h)) throw ShapeError("height", geom.code_h(image_h), cs.h, "gram_inhibition");
    if (cs.w != geom.code_w(image_w)) throw ShapeError("width", geom.code_w(image_w), cs.w, "gram_inhibition");

    const long long ry = static_cast<long long>(geom.gram_radius_h());
    const long long rx = static_cast<long long>(geom.gram_radius_w());
    const long long sh = static_cast<long long>(geom.stride_h), sw = static_cast<long long>(geom.stride_w);
    const long long kh = static_cast<long long>(ks.h), kw = static_cast<long long>(ks.w);
    const long long pt = static_cast<long long>(geom.pad_top(image_h));
    const long long pl = static_cast<long long>(geom.pad_left(image_w));
    const long long H = static_cast<long long>(image_h), W = static_cast<long long>(image_w);
    const long long CH = static_cast<long long>(cs.h), CW = static_cast<long long>(cs.w);

    BasicTensor4<T> out(cs);
    for (std::size_t b = 0; b < cs.n; ++b) {
        for (std::size_t i = 0; i < ks.n; ++i) {
            for (long long py = 0; py < CH; ++py) {
                const long long oy = py * sh - pt;
                for (long long px = 0; px < CW; ++px) {
                    const long long ox = px * sw - pl;
                    const bool interior = oy >= 0 && ox >= 0 && oy + kh <= H && ox + kw <= W;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < ks.n; ++j) {
                        for (long long dy = -ry; dy <= ry; ++dy) {
                            const long long qy = py + dy;
                            if (qy < 0 || qy >= CH) continue;
                            for (long long dx = -rx; dx <= rx; ++dx) {
                                const long long qx = px + dx;
                                if (qx < 0 || qx >= CW) continue;
                                const double aq = static_cast<double>(
                                    coeffs(b, j, static_cast<std::size_t>(qy), static_cast<std::size_t>(qx)));
                                if (aq == 0.0) continue;
                                double g = 0.0;
                                if (interior) {
                                    g = static_cast<double>(
                                        gram(i, j, static_cast<std::size_t>(dy + ry), static_cast<std::size_t>(dx + rx)));
                                } else {
                                    // Overlap of K_i at p and K_j at q restricted to image pixels.
                                    const long long sy = dy * sh, sx = dx * sw;
                                    const long long y0 = std::max({0LL, sy, -oy}), y1 = std::min({kh, kh + sy, H - oy});
                                    const long long x0 = std::max({0LL, sx, -ox}), x1 = std::min({kw, kw + sx, W - ox});
                                    for (std::size_t c = 0; c < ks.c; ++c) {
                                        for (long long y = y0; y < y1; ++y) {
                                            for (long long x = x0; x < x1; ++x) {
                                                g += static_cast<double>(kernels(i, c, static_cast<std::size_t>(y),
                                                                                 static_cast<std::size_t>(x))) *
                                                     static_cast<double>(kernels(j, c, static_cast<std::size_t>(y - sy),
                                                                                 static_cast<std::size_t>(x - sx)));
                                            }
                                        }
                                    }
                                }
                                acc += g * aq;
                            }
                        }
                    }
                    out(b, i, static_cast<std::size_t>(py), static_cast<std::size_t>(px)) = static_cast<T>(acc);
                }
            }
        }
    }
    return out;
}

} // namespace warp_lca

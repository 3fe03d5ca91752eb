#pragma once

// Convolutional dictionary: a bank of unit-norm kernels plus the geometry used
// to apply them, and the unsupervised learner that fits it (ISTA codes, then a
// projected gradient step on the kernels, lambda raised once per epoch).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "warp_lca/conv.hpp"
#include "warp_lca/errors.hpp"
#include "warp_lca/normalization.hpp"
#include "warp_lca/tensor.hpp"
#include "warp_lca/thresholds.hpp"

namespace warp_lca {

struct DictionaryMeta {
    std::vector<double> lambda_schedule; // lambda used in each epoch
    std::size_t epochs = 0;
    std::size_t ista_steps = 0;
    double increase_factor = 1.0;
    double eta = 0.0;
    std::size_t batch_size = 0;
    std::uint64_t seed = 0;
    Normalization normalization;
};

struct Dictionary {
    Tensor4 kernels; // [M, C, kH, kW]
    ConvGeometry geom;
    DictionaryMeta meta;

    std::size_t features() const noexcept { return kernels.shape().n; }
    std::size_t channels() const noexcept { return kernels.shape().c; }

    Shape4 code_shape(const Shape4& image) const { return geom.code_shape(image, features()); }

    void validate() const {
        geom.validate();
        if (features() == 0) throw ConfigError("Dictionary: needs at least one kernel");
        if (kernels.shape().h != geom.kernel_h) throw ShapeError("kernel_height", geom.kernel_h, kernels.shape().h, "Dictionary");
        if (kernels.shape().w != geom.kernel_w) throw ShapeError("kernel_width", geom.kernel_w, kernels.shape().w, "Dictionary");
    }
};

inline std::vector<double> kernel_norms(const Tensor4& kernels) {
    const Shape4 s = kernels.shape();
    const std::size_t per = s.c * s.h * s.w;
    std::vector<double> norms(s.n, 0.0);
    for (std::size_t m = 0; m < s.n; ++m) {
        double acc = 0.0;
        for (std::size_t i = 0; i < per; ++i) acc += kernels[m * per + i] * kernels[m * per + i];
        norms[m] = std::sqrt(acc);
    }
    return norms;
}

/// Divides every kernel by its l2 norm. Throws on an all-zero kernel.
inline Dictionary normalize_kernels(Dictionary dict) {
    const Shape4 s = dict.kernels.shape();
    const std::size_t per = s.c * s.h * s.w;
    const auto norms = kernel_norms(dict.kernels);
    for (std::size_t m = 0; m < s.n; ++m) {
        if (!(norms[m] > 0.0) || !std::isfinite(norms[m]))
            throw NumericError("normalize_kernels: kernel " + std::to_string(m) + " has zero or non-finite norm", 0);
        for (std::size_t i = 0; i < per; ++i) dict.kernels[m * per + i] /= norms[m];
    }
    return dict;
}

/// Gaussian(0, std) kernels, normalised.
inline Dictionary random_dictionary(std::size_t features, std::size_t channels, const ConvGeometry& geom,
                                    std::uint64_t seed, double init_std = 0.1) {
    geom.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, init_std);
    Dictionary dict{Tensor4(Shape4{features, channels, geom.kernel_h, geom.kernel_w}), geom, {}};
    for (double& v : dict.kernels.data()) v = normal(rng);
    dict.meta.seed = seed;
    return normalize_kernels(std::move(dict));
}

inline Tensor4 reconstruct(const Tensor4& codes, const Dictionary& dict, std::size_t image_h, std::size_t image_w) {
    return transposed_convolve(codes, dict.kernels, dict.geom, image_h, image_w);
}

/// Largest eigenvalue of Phi^T Phi on images of the given shape, by power iteration.
inline double estimate_lipschitz(const Dictionary& dict, const Shape4& image, std::size_t iterations = 20,
                                 std::uint64_t seed = 7) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor4 v(dict.code_shape(Shape4{1, image.c, image.h, image.w}));
    for (double& x : v.data()) x = normal(rng);
    double eig = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
        const double norm = std::sqrt(squared_norm(v));
        if (norm == 0.0) return 0.0;
        v *= 1.0 / norm;
        Tensor4 w = correlate(reconstruct(v, dict, image.h, image.w), dict.kernels, dict.geom);
        eig = dot(v, w);
        v = std::move(w);
    }
    return eig;
}

/// n steps of a <- soft(a + step * Phi^T (x - Phi a), step * lambda) from a = 0.
inline Tensor4 ista_encode(const Tensor4& x, const Dictionary& dict, double lambda, std::size_t n, double step,
                           bool nonneg = true) {
    if (!(step > 0.0)) throw ConfigError("ista_encode: step must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("ista_encode: lambda must be >= 0");
    if (x.shape().c != dict.channels()) throw ShapeError("channels", dict.channels(), x.shape().c, "ista_encode");
    const ThresholdSpec shrink = ThresholdSpec::soft(step * lambda, nonneg);
    const Tensor4 drive = correlate(x, dict.kernels, dict.geom);
    Tensor4 a(drive.shape());
    for (std::size_t it = 0; it < n; ++it) {
        // a + step * (Phi^T x - Phi^T Phi a)
        Tensor4 grad = drive - correlate(reconstruct(a, dict, x.shape().h, x.shape().w), dict.kernels, dict.geom);
        a.axpy(step, grad);
        a = apply_threshold(a, shrink);
        if (!a.all_finite()) throw NumericError("ista_encode: non-finite code", it + 1);
    }
    return a;
}

/// Mean over the batch of ||x_b - Phi a_b||^2.
inline double reconstruction_loss(const Tensor4& x, const Tensor4& codes, const Dictionary& dict) {
    const Tensor4 residual = x - reconstruct(codes, dict, x.shape().h, x.shape().w);
    return squared_norm(residual) / static_cast<double>(std::max<std::size_t>(x.shape().n, 1));
}

/// Gradient of reconstruction_loss with respect to the kernels.
inline Tensor4 dictionary_gradient(const Tensor4& x, const Tensor4& codes, const Dictionary& dict) {
    require_same_shape(dict.code_shape(x.shape()), codes.shape(), "dictionary_gradient");
    const Tensor4 residual = x - reconstruct(codes, dict, x.shape().h, x.shape().w);
    Tensor4 grad = kernel_gradient(residual, codes, dict.geom);
    grad *= -2.0 / static_cast<double>(std::max<std::size_t>(x.shape().n, 1));
    return grad;
}

/// One projected gradient step: kernels -= eta * grad, then renormalise.
inline Dictionary dict_update(Dictionary dict, const Tensor4& x, const Tensor4& codes, double eta) {
    if (eta != 0.0) dict.kernels.axpy(-eta, dictionary_gradient(x, codes, dict));
    return normalize_kernels(std::move(dict));
}

struct DictLearnConfig {
    std::size_t features = 16;
    ConvGeometry geom = ConvGeometry::square(9, 2);
    std::size_t epochs = 10;
    std::size_t ista_steps = 50;
    double lambda0 = 0.1;
    double increase_factor = 1.0;
    double eta = 0.01;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double init_std = 0.1;
    bool nonneg = true;

    void validate() const {
        geom.validate();
        if (features == 0) throw ConfigError("DictLearnConfig: features must be >= 1");
        if (ista_steps == 0) throw ConfigError("DictLearnConfig: ista_steps must be >= 1");
        if (!(lambda0 > 0.0)) throw ConfigError("DictLearnConfig: lambda0 must be > 0");
        if (!(increase_factor >= 1.0)) throw ConfigError("DictLearnConfig: increase_factor must be >= 1");
        if (!(eta > 0.0)) throw ConfigError("DictLearnConfig: eta must be > 0");
        if (batch_size == 0) throw ConfigError("DictLearnConfig: batch_size must be >= 1");
        if (!(init_std > 0.0)) throw ConfigError("DictLearnConfig: init_std must be > 0");
    }
};

/// Called after every epoch with the 0-based epoch index and current dictionary.
using EpochObserver = std::function<void(std::size_t, const Dictionary&)>;

/// Groups batch-1 samples into stacked batches following `order`.
inline std::vector<Tensor4> make_batches(std::span<const Tensor4> samples, std::span<const std::size_t> order,
                                         std::size_t batch_size) {
    std::vector<Tensor4> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<Tensor4> chunk;
        for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) chunk.push_back(samples[order[i]]);
        batches.push_back(stack(std::span<const Tensor4>(chunk)));
    }
    return batches;
}

/// Alternates ISTA encoding and projected kernel updates over the (already
/// normalised) dataset. Sample order is reshuffled each epoch from `seed`.
inline Dictionary learn_dictionary(std::span<const Tensor4> dataset, const DictLearnConfig& config,
                                   const EpochObserver& observer = {}) {
    config.validate();
    if (dataset.empty()) throw ConfigError("learn_dictionary: dataset is empty");
    const Shape4 first = dataset.front().shape();
    for (const auto& x : dataset) {
        if (x.shape().n != 1) throw ShapeError("batch", 1, x.shape().n, "learn_dictionary");
        require_same_shape(first, x.shape(), "learn_dictionary");
    }

    Dictionary dict = random_dictionary(config.features, first.c, config.geom, config.seed, config.init_std);
    dict.meta.epochs = config.epochs;
    dict.meta.ista_steps = config.ista_steps;
    dict.meta.increase_factor = config.increase_factor;
    dict.meta.eta = config.eta;
    dict.meta.batch_size = config.batch_size;
    dict.meta.seed = config.seed;

    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    double lambda = config.lambda0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double lipschitz = estimate_lipschitz(dict, first);
        const double step = 1.0 / std::max(lipschitz, 1e-12);
        for (const Tensor4& batch : make_batches(dataset, order, config.batch_size)) {
            const Tensor4 codes = ista_encode(batch, dict, lambda, config.ista_steps, step, config.nonneg);
            dict = dict_update(std::move(dict), batch, codes, config.eta);
        }
        dict.meta.lambda_schedule.push_back(lambda);
        if (observer) observer(epoch, dict);
        lambda *= config.increase_factor;
    }
    return dict;
}

inline void to_json(nlohmann::json& j, const ConvGeometry& g) {
    j = {{"kernel_h", g.kernel_h}, {"kernel_w", g.kernel_w}, {"stride_h", g.stride_h},
         {"stride_w", g.stride_w}, {"padding", "same"}};
}
inline void from_json(const nlohmann::json& j, ConvGeometry& g) {
    g.kernel_h = j.at("kernel_h").get<std::size_t>();
    g.kernel_w = j.at("kernel_w").get<std::size_t>();
    g.stride_h = j.at("stride_h").get<std::size_t>();
    g.stride_w = j.at("stride_w").get<std::size_t>();
    if (j.value("padding", std::string("same")) != "same") throw FormatError("ConvGeometry: only 'same' padding is supported");
    g.validate();
}

} // namespace warp_lca

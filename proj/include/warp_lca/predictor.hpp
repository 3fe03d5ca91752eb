#pragma once

// Warm-start predictor. A fully convolutional trunk feeds two branches whose
// outputs meet in the subtractive head
//
//   out = sigmoid(relu(down) - relu(up))
//
// Inputs are the normalised image with one extra constant channel holding
// lambda; outputs live in the LCA code space, scaled to (0, 1). Training uses
// the Laplace-weighted squared error and Adam with hand-written gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "warp_lca/conv.hpp"
#include "warp_lca/dictionary.hpp"
#include "warp_lca/errors.hpp"
#include "warp_lca/tensor.hpp"

namespace warp_lca {

struct ConvLayer {
    Tensor4 weight;            // [out, in, k, k]
    std::vector<double> bias;  // [out]
    ConvGeometry geom;
    bool relu = true;

    std::size_t out_channels() const noexcept { return weight.shape().n; }
    std::size_t in_channels() const noexcept { return weight.shape().c; }
};

/// Layer sizes. `in_channels` counts the lambda channel.
struct PredictorArch {
    std::size_t in_channels = 2;
    std::vector<std::size_t> trunk_widths{64, 64, 64};
    std::size_t branch_width = 32;
    std::size_t features = 16;
    std::size_t kernel = 3;
    std::size_t stride_h = 2;
    std::size_t stride_w = 2;

    /// The "small" preset for a dictionary over `image_channels`-channel images.
    static PredictorArch small(std::size_t image_channels, const Dictionary& dict) {
        PredictorArch a;
        a.in_channels = image_channels + 1;
        a.features = dict.features();
        a.stride_h = dict.geom.stride_h;
        a.stride_w = dict.geom.stride_w;
        return a;
    }

    void validate() const {
        if (in_channels < 2) throw ConfigError("PredictorArch: in_channels must include the lambda channel (>= 2)");
        if (trunk_widths.empty()) throw ConfigError("PredictorArch: trunk needs at least one layer");
        for (auto w : trunk_widths)
            if (w == 0) throw ConfigError("PredictorArch: trunk widths must be >= 1");
        if (branch_width == 0 || features == 0) throw ConfigError("PredictorArch: branch_width and features must be >= 1");
        if (kernel == 0 || stride_h == 0 || stride_w == 0) throw ConfigError("PredictorArch: kernel and strides must be >= 1");
    }

    bool operator==(const PredictorArch&) const = default;
};

/// Affine map between raw states and [0, 1].
struct TargetScaling {
    double t_min = 0.0;
    double t_max = 1.0;

    void validate() const {
        if (!std::isfinite(t_min) || !std::isfinite(t_max) || !(t_max > t_min))
            throw ConfigError("TargetScaling: requires finite t_max > t_min (got " + std::to_string(t_min) + ", " +
                              std::to_string(t_max) + ")");
    }

    /// Global min/max over every value of every tensor.
    static TargetScaling fit(std::span<const Tensor4> states) {
        TargetScaling s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
        for (const auto& t : states) {
            if (t.size() == 0) continue;
            s.t_min = std::min(s.t_min, t.min());
            s.t_max = std::max(s.t_max, t.max());
        }
        s.validate();
        return s;
    }

    Tensor4 scale(const Tensor4& states) const {
        validate();
        Tensor4 out = states;
        const double r = t_max - t_min;
        for (double& v : out.data()) v = (v - t_min) / r;
        return out;
    }

    Tensor4 descale(const Tensor4& scaled) const {
        validate();
        Tensor4 out = scaled;
        const double r = t_max - t_min;
        for (double& v : out.data()) v = v * r + t_min;
        return out;
    }

    bool operator==(const TargetScaling&) const = default;
};

inline Tensor4 scale_targets(const Tensor4& states, const TargetScaling& s) { return s.scale(states); }
inline Tensor4 descale(const Tensor4& scaled, const TargetScaling& s) { return s.descale(scaled); }

struct PredictorModel {
    PredictorArch arch;
    std::vector<ConvLayer> trunk;
    std::vector<ConvLayer> down;
    std::vector<ConvLayer> up;
    TargetScaling scaling;

    /// Every layer in a fixed order: trunk, down branch, up branch.
    template <typename F>
    void for_each_layer(F&& f) {
        for (auto& l : trunk) f(l);
        for (auto& l : down) f(l);
        for (auto& l : up) f(l);
    }
    template <typename F>
    void for_each_layer(F&& f) const {
        for (const auto& l : trunk) f(l);
        for (const auto& l : down) f(l);
        for (const auto& l : up) f(l);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_layer([&](const ConvLayer& l) { n += l.weight.size() + l.bias.size(); });
        return n;
    }

    Shape4 output_shape(const Shape4& image) const {
        return Shape4{image.n, arch.features, down.back().geom.code_h(image.h), down.back().geom.code_w(image.w)};
    }
};

/// Zero-initialised model with the given architecture.
inline PredictorModel make_predictor(const PredictorArch& arch, const TargetScaling& scaling = {}) {
    arch.validate();
    PredictorModel m;
    m.arch = arch;
    m.scaling = scaling;
    const ConvGeometry flat{arch.kernel, arch.kernel, 1, 1, Padding::Same};
    const ConvGeometry strided{arch.kernel, arch.kernel, arch.stride_h, arch.stride_w, Padding::Same};
    auto layer = [&](std::size_t in, std::size_t out, const ConvGeometry& g, bool relu) {
        return ConvLayer{Tensor4(Shape4{out, in, arch.kernel, arch.kernel}), std::vector<double>(out, 0.0), g, relu};
    };
    std::size_t width = arch.in_channels;
    for (auto w : arch.trunk_widths) {
        m.trunk.push_back(layer(width, w, flat, true));
        width = w;
    }
    for (auto* branch : {&m.down, &m.up}) {
        branch->push_back(layer(width, arch.branch_width, flat, true));
        branch->push_back(layer(arch.branch_width, arch.features, strided, false));
    }
    return m;
}

/// Weights N(0, std^2), each zeroed with probability `sparsity`; biases zero.
inline PredictorModel sparse_init(PredictorModel model, double sparsity, double std_dev, std::uint64_t seed) {
    if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ConfigError("sparse_init: sparsity must be in [0, 1)");
    if (!(std_dev >= 0.0)) throw ConfigError("sparse_init: std must be >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    model.for_each_layer([&](ConvLayer& l) {
        for (double& w : l.weight.data()) {
            const double g = normal(rng) * std_dev;
            w = unit(rng) < sparsity ? 0.0 : g;
        }
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    });
    return model;
}

/// Image batch with a constant lambda channel appended per sample.
inline Tensor4 predictor_input(const Tensor4& images, std::span<const double> lambdas) {
    const Shape4 s = images.shape();
    if (lambdas.size() != s.n) throw ShapeError("batch", s.n, lambdas.size(), "predictor_input lambdas");
    Tensor4 out(Shape4{s.n, s.c + 1, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) std::ranges::copy(images.plane(n, c), out.plane(n, c).begin());
        std::ranges::fill(out.plane(n, s.c), lambdas[n]);
    }
    return out;
}

namespace detail {

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

struct LayerCache {
    Tensor4 input;
    Tensor4 pre; // before the optional ReLU
};

inline Tensor4 layer_forward(const ConvLayer& l, const Tensor4& x, LayerCache* cache) {
    Tensor4 z = correlate(x, l.weight, l.geom);
    const Shape4 s = z.shape();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (double& v : z.plane(n, c)) v += l.bias[c];
    if (cache) {
        cache->input = x;
        cache->pre = z;
    }
    if (l.relu)
        for (double& v : z.data()) v = std::max(v, 0.0);
    return z;
}

inline Tensor4 stack_forward(const std::vector<ConvLayer>& layers, Tensor4 x, std::vector<LayerCache>* caches) {
    if (caches) caches->assign(layers.size(), {});
    for (std::size_t i = 0; i < layers.size(); ++i) x = layer_forward(layers[i], x, caches ? &(*caches)[i] : nullptr);
    return x;
}

/// Accumulates parameter gradients into `grads` and returns d loss / d input.
inline Tensor4 stack_backward(const std::vector<ConvLayer>& layers, const std::vector<LayerCache>& caches,
                              Tensor4 dout, std::vector<ConvLayer>& grads) {
    for (std::size_t i = layers.size(); i-- > 0;) {
        const ConvLayer& l = layers[i];
        const LayerCache& c = caches[i];
        if (l.relu)
            for (std::size_t k = 0; k < dout.size(); ++k)
                if (!(c.pre[k] > 0.0)) dout[k] = 0.0;
        grads[i].weight += kernel_gradient(c.input, dout, l.geom);
        const Shape4 s = dout.shape();
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t ch = 0; ch < s.c; ++ch) {
                double acc = 0.0;
                for (double v : dout.plane(n, ch)) acc += v;
                grads[i].bias[ch] += acc;
            }
        dout = transposed_convolve(dout, l.weight, l.geom, c.input.shape().h, c.input.shape().w);
    }
    return dout;
}

} // namespace detail

struct ForwardCache {
    std::vector<detail::LayerCache> trunk, down, up;
    Tensor4 down_out, up_out, output;
};

/// Scaled predictions in (0, 1) for a batch whose lambda channel is already attached.
inline Tensor4 forward_input(const PredictorModel& model, const Tensor4& input, ForwardCache* cache = nullptr) {
    if (input.shape().c != model.arch.in_channels)
        throw ShapeError("channels", model.arch.in_channels, input.shape().c, "predictor forward");
    Tensor4 h = detail::stack_forward(model.trunk, input, cache ? &cache->trunk : nullptr);
    Tensor4 d = detail::stack_forward(model.down, h, cache ? &cache->down : nullptr);
    Tensor4 u = detail::stack_forward(model.up, h, cache ? &cache->up : nullptr);
    Tensor4 out(d.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(std::max(d[i], 0.0) - std::max(u[i], 0.0));
    if (cache) {
        cache->down_out = std::move(d);
        cache->up_out = std::move(u);
        cache->output = out;
    }
    return out;
}

inline Tensor4 forward(const PredictorModel& model, const Tensor4& images, double lambda) {
    const std::vector<double> lambdas(images.shape().n, lambda);
    return forward_input(model, predictor_input(images, lambdas));
}

/// (1/N) sum (o - t)^2 / (1 + eps + gamma |t|).
inline double laplace_weighted_loss(const Tensor4& out, const Tensor4& target, double gamma = 3.0,
                                    double epsilon = 1e-6) {
    require_same_shape(out.shape(), target.shape(), "laplace_weighted_loss");
    if (out.size() == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = out[i] - target[i];
        acc += d * d / (1.0 + epsilon + gamma * std::abs(target[i]));
    }
    return acc / static_cast<double>(out.size());
}

/// Model-shaped container of zeros, used to hold gradients.
inline PredictorModel zeros_like(const PredictorModel& model) {
    PredictorModel g = model;
    g.for_each_layer([](ConvLayer& l) {
        l.weight.fill(0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    });
    return g;
}

struct LossAndGrad {
    double loss = 0.0;
    PredictorModel grad;
};

/// Loss and its exact gradient with respect to every weight and bias.
inline LossAndGrad backward_input(const PredictorModel& model, const Tensor4& input, const Tensor4& target,
                                  double gamma = 3.0, double epsilon = 1e-6) {
    ForwardCache cache;
    const Tensor4 out = forward_input(model, input, &cache);
    require_same_shape(out.shape(), target.shape(), "predictor backward");
    LossAndGrad r{laplace_weighted_loss(out, target, gamma, epsilon), zeros_like(model)};

    const double inv_n = 1.0 / static_cast<double>(std::max<std::size_t>(out.size(), 1));
    Tensor4 d_down(out.shape()), d_up(out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double w = 1.0 / (1.0 + epsilon + gamma * std::abs(target[i]));
        const double dz = 2.0 * w * (out[i] - target[i]) * inv_n * out[i] * (1.0 - out[i]);
        d_down[i] = cache.down_out[i] > 0.0 ? dz : 0.0;
        d_up[i] = cache.up_out[i] > 0.0 ? -dz : 0.0;
    }
    Tensor4 dh = detail::stack_backward(model.down, cache.down, std::move(d_down), r.grad.down);
    dh += detail::stack_backward(model.up, cache.up, std::move(d_up), r.grad.up);
    detail::stack_backward(model.trunk, cache.trunk, std::move(dh), r.grad.trunk);
    return r;
}

inline LossAndGrad backward(const PredictorModel& model, const Tensor4& images, double lambda, const Tensor4& target,
                            double gamma = 3.0, double epsilon = 1e-6) {
    const std::vector<double> lambdas(images.shape().n, lambda);
    return backward_input(model, predictor_input(images, lambdas), target, gamma, epsilon);
}

/// Initial state for the LCA: descale(forward(image, lambda)).
inline Tensor4 warm_start(const PredictorModel& model, const Tensor4& images, double lambda) {
    return model.scaling.descale(forward(model, images, lambda));
}

struct TrainSample {
    Tensor4 image;  // [1, C, H, W], normalised
    double lambda = 0.15;
    Tensor4 target; // [1, M, H', W'], scaled to [0, 1]
};

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch_size = 16;
    std::size_t epochs = 10;
    double gamma_loss = 3.0;
    double epsilon = 1e-6;
    std::uint64_t seed = 0;
    double init_sparsity = 0.9;
    double init_std = 0.01;
    double val_fraction = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
        if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (!(gamma_loss >= 0.0)) throw ConfigError("TrainConfig: gamma_loss must be >= 0");
        if (!(epsilon > 0.0)) throw ConfigError("TrainConfig: epsilon must be > 0");
        if (!(init_sparsity >= 0.0 && init_sparsity < 1.0)) throw ConfigError("TrainConfig: init sparsity must be in [0, 1)");
        if (!(init_std >= 0.0)) throw ConfigError("TrainConfig: init std must be >= 0");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("TrainConfig: val_fraction must be in [0, 1)");
    }
};

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss; // empty when nothing was held out
    std::size_t best_epoch = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t train_size = 0;
    std::size_t val_size = 0;
};

struct TrainResult {
    PredictorModel model;
    TrainHistory history;
};

/// Adam moments for every parameter, in for_each_layer order.
class Adam {
public:
    Adam(const PredictorModel& model, const TrainConfig& cfg)
        : cfg_(cfg), m_(zeros_like(model)), v_(zeros_like(model)) {}

    void step(PredictorModel& model, const PredictorModel& grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        std::vector<std::span<double>> p, m, v;
        std::vector<std::span<const double>> g;
        model.for_each_layer([&](ConvLayer& l) { p.push_back(l.weight.data()); p.push_back(l.bias); });
        m_.for_each_layer([&](ConvLayer& l) { m.push_back(l.weight.data()); m.push_back(l.bias); });
        v_.for_each_layer([&](ConvLayer& l) { v.push_back(l.weight.data()); v.push_back(l.bias); });
        grad.for_each_layer([&](const ConvLayer& l) {
            g.push_back(l.weight.data());
            g.push_back(std::span<const double>(l.bias));
        });
        for (std::size_t k = 0; k < p.size(); ++k)
            for (std::size_t i = 0; i < p[k].size(); ++i) {
                m[k][i] = cfg_.beta1 * m[k][i] + (1.0 - cfg_.beta1) * g[k][i];
                v[k][i] = cfg_.beta2 * v[k][i] + (1.0 - cfg_.beta2) * g[k][i] * g[k][i];
                p[k][i] -= cfg_.lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + cfg_.adam_eps);
            }
    }

private:
    TrainConfig cfg_;
    PredictorModel m_, v_;
    std::size_t t_ = 0;
};

namespace detail {

inline void stack_batch(std::span<const TrainSample> data, std::span<const std::size_t> idx, Tensor4& input,
                        Tensor4& target) {
    std::vector<Tensor4> imgs, tgts;
    std::vector<double> lambdas;
    for (auto i : idx) {
        imgs.push_back(data[i].image);
        tgts.push_back(data[i].target);
        lambdas.push_back(data[i].lambda);
    }
    input = predictor_input(stack(std::span<const Tensor4>(imgs)), lambdas);
    target = stack(std::span<const Tensor4>(tgts));
}

inline double mean_loss(const PredictorModel& model, std::span<const TrainSample> data,
                        std::span<const std::size_t> idx, const TrainConfig& cfg) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
        const auto chunk = idx.subspan(start, std::min(cfg.batch_size, idx.size() - start));
        Tensor4 input, target;
        stack_batch(data, chunk, input, target);
        total += laplace_weighted_loss(forward_input(model, input), target, cfg.gamma_loss, cfg.epsilon) *
                 static_cast<double>(target.size());
        count += target.size();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

} // namespace detail

using TrainObserver = std::function<void(std::size_t epoch, double train_loss, std::optional<double> val_loss)>;

/// Adam on the weighted loss. A seeded `val_fraction` of the samples (at least
/// one once there are two or more) is held out; the returned model is the one
/// with the best validation loss, or the best training loss when nothing was
/// held out. `model` supplies architecture and starting weights.
inline TrainResult train_predictor(std::span<const TrainSample> data, PredictorModel model, const TrainConfig& cfg,
                                   const TrainObserver& observer = {}) {
    cfg.validate();
    if (data.empty()) throw ConfigError("train_predictor: dataset is empty");
    const Shape4 img = data.front().image.shape();
    const Shape4 out = model.output_shape(img);
    for (const auto& s : data) {
        require_same_shape(img, s.image.shape(), "train_predictor image");
        require_same_shape(Shape4{1, out.c, out.h, out.w}, s.target.shape(), "train_predictor target");
        if (s.image.shape().n != 1) throw ShapeError("batch", 1, s.image.shape().n, "train_predictor");
    }

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::ceil(cfg.val_fraction * static_cast<double>(data.size())));
    if (data.size() < 2) n_val = 0;
    n_val = std::min(n_val, data.size() - 1);
    const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<long>(n_val));
    std::vector<std::size_t> train(order.begin() + static_cast<long>(n_val), order.end());

    TrainResult result{model, {}};
    result.history.train_size = train.size();
    result.history.val_size = val.size();
    Adam adam(model, cfg);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(train.begin(), train.end(), rng);
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size, ++batch_index) {
            const auto chunk =
                std::span<const std::size_t>(train).subspan(start, std::min(cfg.batch_size, train.size() - start));
            Tensor4 input, target;
            detail::stack_batch(data, chunk, input, target);
            LossAndGrad lg = backward_input(model, input, target, cfg.gamma_loss, cfg.epsilon);
            if (!std::isfinite(lg.loss))
                throw NumericError("train_predictor: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(batch_index),
                                   epoch);
            adam.step(model, lg.grad);
        }
        // Report the post-epoch loss of the whole training split, so that the
        // curve and model selection refer to the same weights.
        const double train_loss = detail::mean_loss(model, data, train, cfg);
        std::optional<double> val_loss;
        if (!val.empty()) val_loss = detail::mean_loss(model, data, val, cfg);
        if (!std::isfinite(train_loss) || (val_loss && !std::isfinite(*val_loss)))
            throw NumericError("train_predictor: non-finite loss after epoch " + std::to_string(epoch), epoch);
        result.history.train_loss.push_back(train_loss);
        if (val_loss) result.history.val_loss.push_back(*val_loss);
        const double score = val_loss ? *val_loss : train_loss;
        if (score < result.history.best_loss) {
            result.history.best_loss = score;
            result.history.best_epoch = epoch;
            result.model = model;
        }
        if (observer) observer(epoch, train_loss, val_loss);
    }
    return result;
}

inline void to_json(nlohmann::json& j, const PredictorArch& a) {
    j = {{"in_channels", a.in_channels}, {"trunk_widths", a.trunk_widths}, {"branch_width", a.branch_width},
         {"features", a.features},       {"kernel", a.kernel},             {"stride_h", a.stride_h},
         {"stride_w", a.stride_w}};
}
inline void from_json(const nlohmann::json& j, PredictorArch& a) {
    a.in_channels = j.at("in_channels").get<std::size_t>();
    a.trunk_widths = j.at("trunk_widths").get<std::vector<std::size_t>>();
    a.branch_width = j.at("branch_width").get<std::size_t>();
    a.features = j.at("features").get<std::size_t>();
    a.kernel = j.at("kernel").get<std::size_t>();
    a.stride_h = j.at("stride_h").get<std::size_t>();
    a.stride_w = j.at("stride_w").get<std::size_t>();
    a.validate();
}
inline void to_json(nlohmann::json& j, const TargetScaling& s) { j = {{"t_min", s.t_min}, {"t_max", s.t_max}}; }
inline void from_json(const nlohmann::json& j, TargetScaling& s) {
    s.t_min = j.at("t_min").get<double>();
    s.t_max = j.at("t_max").get<double>();
    s.validate();
}
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr", c.lr},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"gamma_loss", c.gamma_loss},
         {"epsilon", c.epsilon},
         {"seed", c.seed},
         {"init_sparsity", c.init_sparsity},
         {"init_std", c.init_std},
         {"val_fraction", c.val_fraction}};
}

} // namespace warp_lca

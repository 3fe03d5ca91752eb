#pragma once

// Central finite differences against the predictor's analytic gradient.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "warp_lca/predictor.hpp"

namespace warp_lca::testing {

struct GroupError {
    std::string name;
    double relative = 0.0; // ||analytic - fd|| / ||fd||
};

/// Small dense model with random weights and biases, so no unit sits on a ReLU kink.
inline PredictorModel toy_predictor(std::uint64_t seed, std::size_t features = 2) {
    PredictorArch arch;
    arch.in_channels = 2;
    arch.trunk_widths = {3, 3};
    arch.branch_width = 3;
    arch.features = features;
    arch.kernel = 3;
    PredictorModel m = sparse_init(make_predictor(arch), 0.0, 0.5, seed);
    std::mt19937_64 rng(seed + 1);
    std::uniform_real_distribution<double> b(-0.2, 0.2);
    m.for_each_layer([&](ConvLayer& l) {
        for (double& v : l.bias) v = b(rng);
    });
    return m;
}

/// Relative error per weight/bias group of every layer.
inline std::vector<GroupError> gradient_check(const PredictorModel& model, const Tensor4& input, const Tensor4& target,
                                              double h = 1e-4, double gamma = 3.0, double epsilon = 1e-6) {
    const LossAndGrad analytic = backward_input(model, input, target, gamma, epsilon);
    std::vector<std::vector<double>> grads;
    analytic.grad.for_each_layer([&](const ConvLayer& l) {
        grads.emplace_back(l.weight.data().begin(), l.weight.data().end());
        grads.emplace_back(l.bias.begin(), l.bias.end());
    });

    auto loss_at = [&](std::size_t group, std::size_t index, double delta) {
        PredictorModel m = model;
        std::size_t g = 0;
        m.for_each_layer([&](ConvLayer& l) {
            if (g == group) l.weight[index] += delta;
            if (g + 1 == group) l.bias[index] += delta;
            g += 2;
        });
        return laplace_weighted_loss(forward_input(m, input), target, gamma, epsilon);
    };

    std::vector<GroupError> out;
    for (std::size_t g = 0; g < grads.size(); ++g) {
        double diff = 0.0, norm = 0.0;
        for (std::size_t i = 0; i < grads[g].size(); ++i) {
            const double fd = (loss_at(g, i, h) - loss_at(g, i, -h)) / (2.0 * h);
            diff += (grads[g][i] - fd) * (grads[g][i] - fd);
            norm += fd * fd;
        }
        const std::string name = "layer" + std::to_string(g / 2) + (g % 2 == 0 ? ".weight" : ".bias");
        out.push_back({name, std::sqrt(diff) / std::max(std::sqrt(norm), 1e-30)});
    }
    return out;
}

} // namespace warp_lca::testing

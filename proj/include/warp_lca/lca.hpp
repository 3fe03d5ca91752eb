#pragma once

// Discretised LCA dynamics (forward Euler, step 1/tau):
//
//   u <- u + (1/tau) * (Phi^T x - Phi^T Phi a + a - u),   a = T(u)
//
// Phi^T Phi a is evaluated either by a correlate/transposed-convolve round
// trip (Residual) or through the kernel Gram tensor (Gram). Both give the same
// numbers up to rounding; Residual is the default.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "warp_lca/conv.hpp"
#include "warp_lca/dictionary.hpp"
#include "warp_lca/errors.hpp"
#include "warp_lca/metrics.hpp"
#include "warp_lca/normalization.hpp"
#include "warp_lca/tensor.hpp"
#include "warp_lca/thresholds.hpp"

namespace warp_lca {

enum class InhibitionMode { Residual, Gram };

inline constexpr double kDivergenceLimit = 1e6;

struct LcaConfig {
    double tau = 200.0;
    std::size_t n_iters = 1000;
    ThresholdSpec threshold = ThresholdSpec::hard(0.15);
    std::size_t track_every = 10;
    InhibitionMode inhibition = InhibitionMode::Residual;

    /// Sparsity weight of the active operator (theta for the l1/2 operator).
    double lambda() const noexcept { return threshold.kind == ThresholdKind::Half ? threshold.theta : threshold.lambda; }

    void validate() const {
        if (!(tau > 0.0)) throw ConfigError("LcaConfig: tau must be > 0");
        if (track_every == 0) throw ConfigError("LcaConfig: track_every must be >= 1");
        threshold.validate();
    }
};

struct LcaState {
    Tensor4 u; // membrane potentials
    Tensor4 a; // activations, a = T(u)
    std::size_t iter = 0;
};

using Trajectory = std::vector<MetricsRecord>;

struct LcaResult {
    LcaState state;
    Trajectory trajectory;
};

enum class Penalty { L0, L1 };

/// ||x - Phi a||^2 + lambda * (nnz(a) or sum |a|).
inline double energy(const Tensor4& x, const Dictionary& dict, const Tensor4& a, double lambda, Penalty p,
                     double l0_tol = kDefaultL0Tolerance) {
    const Tensor4 residual = x - reconstruct(a, dict, x.shape().h, x.shape().w);
    double penalty = 0.0;
    if (p == Penalty::L0) {
        penalty = static_cast<double>(l0_count(a, l0_tol));
    } else {
        for (double v : a.data()) penalty += std::abs(v);
    }
    return squared_norm(residual) + lambda * penalty;
}

inline Penalty penalty_for(const ThresholdSpec& spec) {
    return spec.kind == ThresholdKind::Soft ? Penalty::L1 : Penalty::L0;
}

/// How trajectory metrics are computed. Reconstructions are mapped back to
/// pixel space with `normalization` and compared against `reference` (pixel
/// space, defaults to the de-normalised input).
struct Tracking {
    Normalization normalization;
    std::optional<Tensor4> reference;
    bool enabled = true;
};

/// Solver bound to one dictionary, config and image size. Precomputes the
/// Gram tensor (Gram mode) and per-feature kernel norms (CEL0).
class LcaSolver {
public:
    LcaSolver(const Dictionary& dict, LcaConfig config, std::size_t image_h, std::size_t image_w)
        : dict_(dict), config_(std::move(config)), image_h_(image_h), image_w_(image_w),
          norms_(kernel_norms(dict.kernels)) {
        config_.validate();
        dict_.validate();
        if (config_.inhibition == InhibitionMode::Gram) gram_ = kernel_gram(dict_.kernels, dict_.geom);
    }

    const LcaConfig& config() const noexcept { return config_; }
    const Dictionary& dictionary() const noexcept { return dict_; }

    Tensor4 drive(const Tensor4& x) const {
        check_image(x.shape());
        return correlate(x, dict_.kernels, dict_.geom);
    }

    Tensor4 activate(const Tensor4& u) const {
        return apply_threshold(u, config_.threshold, std::span<const double>(norms_));
    }

    /// Phi^T Phi a.
    Tensor4 inhibition(const Tensor4& a) const {
        if (config_.inhibition == InhibitionMode::Gram)
            return gram_inhibition(a, dict_.kernels, gram_, dict_.geom, image_h_, image_w_);
        return correlate(transposed_convolve(a, dict_.kernels, dict_.geom, image_h_, image_w_), dict_.kernels,
                         dict_.geom);
    }

    LcaState initial_state(const Shape4& code_shape, const std::optional<Tensor4>& init) const {
        LcaState s;
        if (init) {
            require_same_shape(code_shape, init->shape(), "lca_solve init");
            s.u = *init;
        } else {
            s.u = Tensor4(code_shape);
        }
        s.a = activate(s.u);
        return s;
    }

    void step(LcaState& state, const Tensor4& drive) const {
        require_same_shape(drive.shape(), state.u.shape(), "lca_step");
        const double rate = 1.0 / config_.tau;
        Tensor4 du = drive - inhibition(state.a);
        du += state.a;
        du -= state.u;
        state.u.axpy(rate, du);
        state.iter += 1;
        const double peak = state.u.max_abs();
        if (!state.u.all_finite() || !(peak <= kDivergenceLimit))
            throw DivergenceError(state.iter, std::isfinite(peak) ? peak : std::numeric_limits<double>::infinity());
        state.a = activate(state.u);
    }

    MetricsRecord measure(const Tensor4& x, const LcaState& state, const Tracking& tracking) const {
        MetricsRecord r;
        r.iter = state.iter;
        const Tensor4 recon = reconstruct(state.a, dict_, image_h_, image_w_);
        const Tensor4 recon_px = tracking.normalization.invert(recon);
        const Tensor4 ref_px = tracking.reference ? *tracking.reference : tracking.normalization.invert(x);
        r.mse = mse(recon_px, ref_px);
        r.psnr = psnr_from_mse(r.mse, 1.0);
        r.ssim = ssim_applicable(recon_px.shape()) ? ssim(recon_px, ref_px, 1.0)
                                                   : std::numeric_limits<double>::quiet_NaN();
        r.l0 = l0_count(state.a);
        r.energy = energy(x, dict_, state.a, config_.lambda(), penalty_for(config_.threshold));
        return r;
    }

    /// Cold start when `init` is empty, warm start from u0 = *init otherwise.
    /// The trajectory holds iteration 0, every `track_every`-th iteration and
    /// the final iteration.
    LcaResult solve(const Tensor4& x, const std::optional<Tensor4>& init = std::nullopt,
                    const Tracking& tracking = {}) const {
        const Tensor4 b = drive(x);
        LcaResult result{initial_state(b.shape(), init), {}};
        if (tracking.enabled) result.trajectory.push_back(measure(x, result.state, tracking));
        for (std::size_t it = 1; it <= config_.n_iters; ++it) {
            step(result.state, b);
            if (tracking.enabled && (it % config_.track_every == 0 || it == config_.n_iters))
                result.trajectory.push_back(measure(x, result.state, tracking));
        }
        return result;
    }

private:
    void check_image(const Shape4& s) const {
        if (s.c != dict_.channels()) throw ShapeError("channels", dict_.channels(), s.c, "LcaSolver");
        if (s.h != image_h_) throw ShapeError("height", image_h_, s.h, "LcaSolver");
        if (s.w != image_w_) throw ShapeError("width", image_w_, s.w, "LcaSolver");
    }

    Dictionary dict_;
    LcaConfig config_;
    std::size_t image_h_;
    std::size_t image_w_;
    std::vector<double> norms_;
    Tensor4 gram_;
};

/// One Euler step for image x (drive = correlate(x, Phi), precomputed).
inline LcaState lca_step(LcaState state, const Tensor4& drive, const Dictionary& dict, const LcaConfig& config,
                         std::size_t image_h, std::size_t image_w) {
    LcaSolver(dict, config, image_h, image_w).step(state, drive);
    return state;
}

inline LcaResult lca_solve(const Tensor4& x, const Dictionary& dict, const LcaConfig& config,
                           const std::optional<Tensor4>& init = std::nullopt, const Tracking& tracking = {}) {
    return LcaSolver(dict, config, x.shape().h, x.shape().w).solve(x, init, tracking);
}

/// A single LCA iteration from u0.
inline LcaState one_step_refine(const Tensor4& x, const Dictionary& dict, const Tensor4& u0, double tau,
                                const ThresholdSpec& threshold) {
    LcaConfig config;
    config.tau = tau;
    config.n_iters = 1;
    config.threshold = threshold;
    Tracking tracking;
    tracking.enabled = false;
    return lca_solve(x, dict, config, u0, tracking).state;
}

/// CSV with header iter,mse,l0,psnr,ssim,energy.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& trajectory) {
    os << "iter,mse,l0,psnr,ssim,energy\n";
    auto num = [&](double v) -> std::ostream& {
        if (std::isnan(v)) return os << "nan";
        if (std::isinf(v)) return os << (v > 0 ? "inf" : "-inf");
        return os << v;
    };
    const auto old_precision = os.precision(10);
    for (const auto& r : trajectory) {
        os << r.iter << ',';
        num(r.mse) << ',' << r.l0 << ',';
        num(r.psnr) << ',';
        num(r.ssim) << ',';
        num(r.energy) << '\n';
    }
    os.precision(old_precision);
}

} // namespace warp_lca

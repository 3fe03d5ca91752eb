#pragma once

// Elementwise activation / proximal operators mapping membrane potentials to
// activations.
//
//   hard         u - alpha*lambda  if u > lambda, else 0
//   soft         sign(u) * max(|u| - lambda, 0)
//   generalized  (u - alpha*lambda) / (1 + exp(-gamma (u - lambda)))
//   half         l1/2 thresholding with dead zone |r| <= 54^(1/3) theta^(2/3)
//   cel0         continuous exact l0 relaxation, keyed on ||phi_i||^2 mu
//
// With nonneg = true every operator is one-sided: negative inputs map to 0.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>

#include "json.hpp"

#include "warp_lca/errors.hpp"
#include "warp_lca/tensor.hpp"

namespace warp_lca {

enum class ThresholdKind { Hard, Soft, Generalized, Half, Cel0 };

inline const char* to_string(ThresholdKind k) {
    switch (k) {
    case ThresholdKind::Hard: return "hard";
    case ThresholdKind::Soft: return "soft";
    case ThresholdKind::Generalized: return "generalized";
    case ThresholdKind::Half: return "half";
    case ThresholdKind::Cel0: return "cel0";
    }
    return "unknown";
}

inline ThresholdKind threshold_kind_from_string(const std::string& s) {
    if (s == "hard") return ThresholdKind::Hard;
    if (s == "soft") return ThresholdKind::Soft;
    if (s == "generalized") return ThresholdKind::Generalized;
    if (s == "half") return ThresholdKind::Half;
    if (s == "cel0") return ThresholdKind::Cel0;
    throw ConfigError("unknown threshold kind '" + s + "' (expected hard|soft|generalized|half|cel0)");
}

struct ThresholdSpec {
    ThresholdKind kind = ThresholdKind::Hard;
    double lambda = 0.15;
    double alpha = 0.0;
    double gamma_steep = 100.0;
    double theta = 0.15;
    double mu = 1.0;
    bool nonneg = true;

    static ThresholdSpec hard(double lambda, bool nonneg = true) {
        ThresholdSpec s;
        s.kind = ThresholdKind::Hard;
        s.lambda = lambda;
        s.nonneg = nonneg;
        return s;
    }
    static ThresholdSpec soft(double lambda, bool nonneg = true) {
        ThresholdSpec s;
        s.kind = ThresholdKind::Soft;
        s.lambda = lambda;
        s.nonneg = nonneg;
        return s;
    }
    static ThresholdSpec generalized(double lambda, double alpha, double gamma_steep, bool nonneg = true) {
        ThresholdSpec s;
        s.kind = ThresholdKind::Generalized;
        s.lambda = lambda;
        s.alpha = alpha;
        s.gamma_steep = gamma_steep;
        s.nonneg = nonneg;
        return s;
    }
    static ThresholdSpec half(double theta, bool nonneg = true) {
        ThresholdSpec s;
        s.kind = ThresholdKind::Half;
        s.theta = theta;
        s.lambda = theta;
        s.nonneg = nonneg;
        return s;
    }
    static ThresholdSpec cel0(double lambda, double mu, bool nonneg = true) {
        ThresholdSpec s;
        s.kind = ThresholdKind::Cel0;
        s.lambda = lambda;
        s.mu = mu;
        s.nonneg = nonneg;
        return s;
    }

    /// Checks only the parameters the selected kind uses.
    void validate() const {
        auto bad = [](const std::string& m) { throw ConfigError("ThresholdSpec: " + m); };
        switch (kind) {
        case ThresholdKind::Hard:
        case ThresholdKind::Soft:
            if (!(lambda >= 0.0)) bad("lambda must be >= 0");
            break;
        case ThresholdKind::Generalized:
            if (!(lambda >= 0.0)) bad("lambda must be >= 0");
            if (!(gamma_steep > 0.0)) bad("gamma_steep must be > 0");
            break;
        case ThresholdKind::Half:
            if (!(theta >= 0.0)) bad("theta must be >= 0");
            break;
        case ThresholdKind::Cel0:
            if (!(lambda >= 0.0)) bad("lambda must be >= 0");
            if (!(mu > 0.0)) bad("mu must be > 0");
            break;
        }
        if (!std::isfinite(alpha)) bad("alpha must be finite");
    }

    friend bool operator==(const ThresholdSpec&, const ThresholdSpec&) = default;
};

inline void to_json(nlohmann::json& j, const ThresholdSpec& s) {
    j = nlohmann::json{{"kind", to_string(s.kind)}, {"lambda", s.lambda}, {"nonneg", s.nonneg}};
    switch (s.kind) {
    case ThresholdKind::Hard: j["alpha"] = s.alpha; break;
    case ThresholdKind::Soft: break;
    case ThresholdKind::Generalized:
        j["alpha"] = s.alpha;
        j["gamma_steep"] = s.gamma_steep;
        break;
    case ThresholdKind::Half: j["theta"] = s.theta; break;
    case ThresholdKind::Cel0: j["mu"] = s.mu; break;
    }
}

inline void from_json(const nlohmann::json& j, ThresholdSpec& s) {
    s = ThresholdSpec{};
    s.kind = threshold_kind_from_string(j.at("kind").get<std::string>());
    s.lambda = j.value("lambda", s.lambda);
    s.alpha = j.value("alpha", s.alpha);
    s.gamma_steep = j.value("gamma_steep", s.gamma_steep);
    s.theta = j.value("theta", s.kind == ThresholdKind::Half ? s.lambda : s.theta);
    s.mu = j.value("mu", s.mu);
    s.nonneg = j.value("nonneg", s.nonneg);
    s.validate();
}

inline constexpr double kCel0DivisionGuard = 1e-12;

/// Hard threshold. Strict inequality: u == lambda maps to 0.
inline double threshold_hard(double u, const ThresholdSpec& spec) {
    if (spec.nonneg) return u > spec.lambda ? u - spec.alpha * spec.lambda : 0.0;
    const double mag = std::abs(u);
    return mag > spec.lambda ? std::copysign(mag - spec.alpha * spec.lambda, u) : 0.0;
}

inline double threshold_soft(double u, const ThresholdSpec& spec) {
    const double shrunk = std::max(std::abs(u) - spec.lambda, 0.0);
    if (spec.nonneg) return u > 0.0 ? shrunk : 0.0;
    return u >= 0.0 ? shrunk : -shrunk;
}

/// Logistic-gated threshold. Negative outputs clamp to zero; with nonneg =
/// false the operator acts on |u| and the sign is restored.
inline double threshold_generalized(double u, const ThresholdSpec& spec) {
    auto positive = [&](double v) {
        const double gate = 1.0 / (1.0 + std::exp(-spec.gamma_steep * (v - spec.lambda)));
        return std::max((v - spec.alpha * spec.lambda) * gate, 0.0);
    };
    if (spec.nonneg) return u > 0.0 ? positive(u) : 0.0;
    const double mag = positive(std::abs(u));
    return u >= 0.0 ? mag : -mag;
}

/// Dead-zone edge 54^(1/3) theta^(2/3) of the l1/2 operator.
inline double half_threshold_cutoff(double theta) { return std::cbrt(54.0) * std::pow(theta, 2.0 / 3.0); }

/// l1/2 thresholding: (2r/3)(1 + cos(2pi/3 - (2/3) psi(r))) with
/// psi(r) = arccos(theta (|r|/3)^(-3/2)) above the cutoff, 0 at or below it.
/// This is the exact minimiser of 1/2 (x - r)^2 + 4 theta |x|^(1/2).
inline double threshold_half(double r, const ThresholdSpec& spec) {
    if (spec.nonneg && r <= 0.0) return 0.0;
    const double mag = std::abs(r);
    if (!(mag > half_threshold_cutoff(spec.theta))) return 0.0;
    // Above the cutoff the argument is <= 1/sqrt(2); the clamp only absorbs rounding.
    const double arg = spec.theta * std::pow(mag / 3.0, -1.5);
    const double psi = std::acos(std::clamp(arg, -1.0, 1.0));
    return (2.0 * r / 3.0) * (1.0 + std::cos(2.0 * std::numbers::pi / 3.0 - (2.0 / 3.0) * psi));
}

/// CEL0 thresholding for a dictionary column of norm `phi_norm`.
///   ||phi||^2 mu < 1 : sign(r) min(|r|, (|r| - sqrt(2 lambda) ||phi||)_+ / (1 - mu / ||phi||^2))
///   otherwise        : r if |r| > sqrt(2 mu lambda) ||phi||, else 0
/// A denominator that is not safely positive (within the guard of zero, or
/// negative when mu > ||phi||^2) takes the cut-off branch; the literal formula
/// would flip the sign of the output there.
inline double threshold_cel0(double r, double lambda, double mu, double phi_norm) {
    const double norm2 = phi_norm * phi_norm;
    const double mag = std::abs(r);
    const double denom = 1.0 - mu / norm2;
    if (norm2 * mu < 1.0 && denom > kCel0DivisionGuard) {
        const double shrunk = std::max(mag - std::sqrt(2.0 * lambda) * phi_norm, 0.0) / denom;
        return std::copysign(std::min(mag, shrunk), r);
    }
    return mag > std::sqrt(2.0 * mu * lambda) * phi_norm ? r : 0.0;
}

inline double threshold_cel0(double r, const ThresholdSpec& spec, double phi_norm) {
    if (spec.nonneg && r <= 0.0) return 0.0;
    return threshold_cel0(r, spec.lambda, spec.mu, phi_norm);
}

/// Scalar dispatch. `phi_norm` is only read by Cel0.
inline double apply_threshold(double u, const ThresholdSpec& spec, double phi_norm = 1.0) {
    switch (spec.kind) {
    case ThresholdKind::Hard: return threshold_hard(u, spec);
    case ThresholdKind::Soft: return threshold_soft(u, spec);
    case ThresholdKind::Generalized: return threshold_generalized(u, spec);
    case ThresholdKind::Half: return threshold_half(u, spec);
    case ThresholdKind::Cel0: return threshold_cel0(u, spec, phi_norm);
    }
    return 0.0;
}

/// a = T(u) elementwise; channel i of `u` uses phi_norms[i] for Cel0.
template <typename T>
BasicTensor4<T> apply_threshold(const BasicTensor4<T>& u, const ThresholdSpec& spec,
                                std::optional<std::span<const double>> phi_norms = std::nullopt) {
    const Shape4 s = u.shape();
    if (spec.kind == ThresholdKind::Cel0) {
        if (!phi_norms) throw ConfigError("apply_threshold: cel0 requires per-feature kernel norms");
        if (phi_norms->size() != s.c) throw ShapeError("features", s.c, phi_norms->size(), "apply_threshold");
    }
    BasicTensor4<T> a(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const double norm = phi_norms && c < phi_norms->size() ? (*phi_norms)[c] : 1.0;
            auto src = u.plane(n, c);
            auto dst = a.plane(n, c);
            for (std::size_t i = 0; i < src.size(); ++i)
                dst[i] = static_cast<T>(apply_threshold(static_cast<double>(src[i]), spec, norm));
        }
    }
    return a;
}

} // namespace warp_lca

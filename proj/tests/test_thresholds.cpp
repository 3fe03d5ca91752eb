#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "warp_lca/thresholds.hpp"

using namespace warp_lca;
using namespace warp_lca::testing;

TEST(ThresholdSpec, JsonRoundTripUsesLowercaseTags) {
    auto spec = ThresholdSpec::hard(0.15);
    nlohmann::json j = spec;
    EXPECT_EQ(j.dump(), R"({"alpha":0.0,"kind":"hard","lambda":0.15,"nonneg":true})");
    EXPECT_EQ(j.get<ThresholdSpec>(), spec);
    for (auto s : {ThresholdSpec::soft(0.3, false), ThresholdSpec::half(0.5), ThresholdSpec::cel0(0.2, 0.7),
                   ThresholdSpec::generalized(0.15, 1.0, 50.0)}) {
        nlohmann::json js = s;
        EXPECT_EQ(js.get<ThresholdSpec>(), s) << js.dump();
    }
    EXPECT_THROW(nlohmann::json::parse(R"({"kind":"bogus"})").get<ThresholdSpec>(), ConfigError);
    EXPECT_THROW(nlohmann::json::parse(R"({"kind":"cel0","mu":0})").get<ThresholdSpec>(), ConfigError);
}

TEST(Generalized, MidpointOfLogistic) {
    auto spec = ThresholdSpec::generalized(0.15, 0.0, 10.0);
    EXPECT_DOUBLE_EQ(threshold_generalized(0.15, spec), 0.075);
}

TEST(Generalized, ApproachesHardThresholdForSteepGate) {
    auto spec = ThresholdSpec::generalized(0.15, 1.0, 1e6);
    EXPECT_NEAR(threshold_generalized(1.15, spec), 1.0, 1e-12);
    EXPECT_EQ(threshold_generalized(0.1, spec), 0.0);
}

TEST(Generalized, NonnegClampsNegativeInputs) {
    auto spec = ThresholdSpec::generalized(0.15, 0.0, 10.0);
    EXPECT_EQ(threshold_generalized(-5.0, spec), 0.0);
    spec.nonneg = false;
    EXPECT_DOUBLE_EQ(threshold_generalized(-0.15, spec), -0.075);
}

TEST(Hard, CaseSplit) {
    auto spec = ThresholdSpec::hard(0.15);
    EXPECT_EQ(threshold_hard(0.2, spec), 0.2);
    EXPECT_EQ(threshold_hard(0.1, spec), 0.0);
    EXPECT_EQ(threshold_hard(0.15, spec), 0.0);
    EXPECT_EQ(threshold_hard(-3.0, spec), 0.0);
    spec.alpha = 1.0;
    EXPECT_DOUBLE_EQ(threshold_hard(0.5, spec), 0.35);
    spec.nonneg = false;
    EXPECT_DOUBLE_EQ(threshold_hard(-0.5, spec), -0.35);
}

TEST(Hard, IdempotentWithZeroAlpha) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2, 2);
    for (bool nonneg : {true, false}) {
        auto spec = ThresholdSpec::hard(0.3, nonneg);
        for (int i = 0; i < 500; ++i) {
            const double v = u(rng);
            EXPECT_EQ(threshold_hard(threshold_hard(v, spec), spec), threshold_hard(v, spec));
        }
    }
}

TEST(Soft, DirectFormulaAndOddSymmetry) {
    EXPECT_DOUBLE_EQ(threshold_soft(1.0, ThresholdSpec::soft(0.5)), 0.5);
    EXPECT_DOUBLE_EQ(threshold_soft(-1.0, ThresholdSpec::soft(0.5, false)), -0.5);
    EXPECT_EQ(threshold_soft(-1.0, ThresholdSpec::soft(0.5, true)), 0.0);
    EXPECT_EQ(threshold_soft(0.4, ThresholdSpec::soft(0.5)), 0.0);
}

TEST(Soft, MatchesProxOracle) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-2, 2), lam(0.05, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double r = u(rng), l = lam(rng);
        const bool nonneg = i % 2 == 0;
        const double lo = nonneg ? 0.0 : -6.0;
        const double expected = oracle_prox(r, [&](double x) { return l * std::abs(x); }, lo, 6.0);
        EXPECT_NEAR(threshold_soft(r, ThresholdSpec::soft(l, nonneg)), expected, 1e-4) << r << " " << l;
    }
}

TEST(Half, DeadZoneAndBoundary) {
    auto spec = ThresholdSpec::half(1.0);
    EXPECT_EQ(threshold_half(0.0, spec), 0.0);
    const double edge = std::cbrt(54.0);
    EXPECT_EQ(threshold_half(edge, spec), 0.0);
    EXPECT_GT(threshold_half(std::nextafter(edge, 10.0), spec), 0.0);
    EXPECT_DOUBLE_EQ(half_threshold_cutoff(1.0), edge);
}

TEST(Half, ZeroThetaIsIdentity) {
    auto spec = ThresholdSpec::half(0.0, false);
    for (double r : {-2.0, -0.1, 0.3, 4.0}) EXPECT_NEAR(threshold_half(r, spec), r, 1e-12);
}

TEST(Half, MatchesProxOracle) {
    // The operator is the minimiser of 1/2 (x - r)^2 + 4 theta sqrt|x|.
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-4, 4);
    const double theta = 0.5;
    for (int i = 0; i < 1000; ++i) {
        const double r = u(rng);
        const bool nonneg = i % 2 == 0;
        const double expected = oracle_prox(
            r, [&](double x) { return 4.0 * theta * std::sqrt(std::abs(x)); }, nonneg ? 0.0 : -8.0, 8.0);
        EXPECT_NEAR(threshold_half(r, ThresholdSpec::half(theta, nonneg)), expected, 1e-4) << r;
    }
}

TEST(Half, OddWhenSigned) {
    auto spec = ThresholdSpec::half(0.3, false);
    for (double r : {0.1, 1.3, 2.7, 5.0}) EXPECT_DOUBLE_EQ(threshold_half(-r, spec), -threshold_half(r, spec));
}

TEST(Cel0, ZeroMapsToZero) {
    for (double mu : {0.3, 1.0, 2.5})
        for (double phi : {0.5, 1.0, 2.0}) EXPECT_EQ(threshold_cel0(0.0, 0.15, mu, phi), 0.0);
}

TEST(Cel0, SecondBranchPassesLargeInputs) {
    const double lambda = 0.2, mu = 2.0, phi = 1.0;
    EXPECT_EQ(threshold_cel0(5.0, lambda, mu, phi), 5.0);
    EXPECT_EQ(threshold_cel0(-5.0, lambda, mu, phi), -5.0);
    const double cut = std::sqrt(2.0 * mu * lambda) * phi;
    EXPECT_EQ(threshold_cel0(cut, lambda, mu, phi), 0.0);
}

TEST(Cel0, DivisionGuardFallsToSecondBranch) {
    // ||phi||^2 mu < 1 but 1 - mu/||phi||^2 == 0 only when ||phi|| = 1, mu = 1, which is already branch 2;
    // with phi^2 = mu the denominator vanishes and phi^2 mu = phi^4 < 1 for phi < 1.
    const double phi = 0.8, mu = phi * phi;
    EXPECT_EQ(threshold_cel0(3.0, 0.1, mu, phi), 3.0);
    EXPECT_EQ(threshold_cel0(0.1, 0.1, mu, phi), 0.0);
}

TEST(Cel0, NegativeDenominatorUsesCutoff) {
    // phi = 0.5, mu = 1: phi^2 mu < 1 but 1 - mu/phi^2 = -3.
    EXPECT_EQ(threshold_cel0(2.0, 0.1, 1.0, 0.5), 2.0);
    EXPECT_EQ(threshold_cel0(-2.0, 0.1, 1.0, 0.5), -2.0);
    EXPECT_EQ(threshold_cel0(0.1, 0.1, 1.0, 0.5), 0.0);
}

TEST(Cel0, MonotoneForNonUnitNorms) {
    for (double phi : {0.3, 0.7, 1.0, 1.6})
        for (double mu : {0.2, 0.9, 1.5}) {
            double prev = threshold_cel0(-4.0, 0.15, mu, phi);
            for (double r = -4.0; r <= 4.0; r += 1e-3) {
                const double v = threshold_cel0(r, 0.15, mu, phi);
                EXPECT_GE(v, prev - 1e-12) << phi << " " << mu << " " << r;
                prev = v;
            }
        }
}

TEST(Cel0, MatchesStraightLineReimplementation) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> r(-3, 3), lam(0.01, 1.0), mu(0.05, 3.0), phi(0.3, 2.0);
    for (int i = 0; i < 1000; ++i) {
        const double rv = r(rng), l = lam(rng), m = mu(rng), p = phi(rng);
        EXPECT_EQ(threshold_cel0(rv, l, m, p), cel0_reference(rv, l, m, p));
    }
}

TEST(Cel0, MatchesProxOracleForUnitNormColumns) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> r(-3, 3), lam(0.01, 0.5), mu_small(0.05, 0.95), mu_big(1.0, 3.0);
    for (int i = 0; i < 200; ++i) {
        const double rv = r(rng), l = lam(rng);
        const bool first_branch = i % 2 == 0;
        const double m = first_branch ? mu_small(rng) : mu_big(rng);
        // Branch 1 is the prox of (1/mu) CEL0(.; ||a|| = mu); branch 2 the prox of mu CEL0(.; ||a|| = 1).
        auto penalty = first_branch ? std::function<double(double)>([&](double x) { return cel0_penalty(x, l, m) / m; })
                                    : std::function<double(double)>([&](double x) { return m * cel0_penalty(x, l, 1.0); });
        const double expected = oracle_prox(rv, penalty, -6.0, 6.0);
        EXPECT_NEAR(threshold_cel0(rv, l, m, 1.0), expected, 1e-4) << rv << " " << l << " " << m;
    }
}

TEST(AllOperators, MapZeroToZeroAndAreMonotoneOnPositiveAxis) {
    const std::vector<ThresholdSpec> specs{ThresholdSpec::hard(0.15), ThresholdSpec::soft(0.15),
                                           ThresholdSpec::generalized(0.15, 0.5, 30.0), ThresholdSpec::half(0.2),
                                           ThresholdSpec::cel0(0.15, 0.5), ThresholdSpec::cel0(0.15, 2.0)};
    for (const auto& spec : specs) {
        EXPECT_EQ(apply_threshold(0.0, spec, 1.0), 0.0) << to_string(spec.kind);
        double prev = 0.0;
        for (double u = 0.0; u <= 5.0; u += 1e-3) {
            const double v = apply_threshold(u, spec, 1.0);
            EXPECT_GE(v, prev - 1e-15) << to_string(spec.kind) << " at " << u;
            prev = v;
        }
    }
}

TEST(ApplyThreshold, TensorMatchesScalarLoop) {
    std::mt19937_64 rng(6);
    Tensor4 u = random_tensor({2, 3, 4, 5}, rng, -2, 2);
    const std::vector<double> norms{0.5, 1.0, 1.7};
    for (const auto& spec : {ThresholdSpec::hard(0.15), ThresholdSpec::soft(0.2, false), ThresholdSpec::half(0.3),
                             ThresholdSpec::cel0(0.15, 0.6)}) {
        Tensor4 a = apply_threshold(u, spec, std::span<const double>(norms));
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = 0; y < 4; ++y)
                    for (std::size_t x = 0; x < 5; ++x)
                        EXPECT_EQ(a(n, c, y, x), apply_threshold(u(n, c, y, x), spec, norms[c]));
    }
}

TEST(ApplyThreshold, HardOnSmallTensor) {
    Tensor4 u(Shape4{1, 1, 1, 2}, std::vector<double>{0.1, 0.2});
    Tensor4 a = apply_threshold(u, ThresholdSpec::hard(0.15));
    EXPECT_EQ(a[0], 0.0);
    EXPECT_EQ(a[1], 0.2);
}

TEST(ApplyThreshold, ZeroInZeroOut) {
    Tensor4 z(Shape4{1, 2, 3, 3});
    const std::vector<double> norms{1.0, 1.0};
    for (auto kind : {ThresholdKind::Hard, ThresholdKind::Soft, ThresholdKind::Generalized, ThresholdKind::Half,
                      ThresholdKind::Cel0}) {
        ThresholdSpec spec;
        spec.kind = kind;
        EXPECT_EQ(apply_threshold(z, spec, std::span<const double>(norms)).max_abs(), 0.0);
    }
}

TEST(ApplyThreshold, Cel0RequiresNorms) {
    Tensor4 z(Shape4{1, 2, 3, 3});
    EXPECT_THROW(apply_threshold(z, ThresholdSpec::cel0(0.1, 0.5)), ConfigError);
    const std::vector<double> wrong{1.0};
    EXPECT_THROW(apply_threshold(z, ThresholdSpec::cel0(0.1, 0.5), std::span<const double>(wrong)), ShapeError);
}

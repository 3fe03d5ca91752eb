#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "test_util.hpp"
#include "warp_lca/metrics.hpp"
#include "warp_lca/thresholds.hpp"

using namespace warp_lca;
using namespace warp_lca::testing;

namespace {

// Windowed SSIM evaluated window by window with explicit sums.
double ssim_reference(const Tensor4& a, const Tensor4& b) {
    const int win = 11;
    double g[11], gs = 0.0;
    for (int i = 0; i < win; ++i) {
        g[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
        gs += g[i];
    }
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto s = a.shape();
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            double plane = 0.0;
            std::size_t windows = 0;
            for (std::size_t y = 0; y + win <= s.h; ++y)
                for (std::size_t x = 0; x + win <= s.w; ++x) {
                    double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                    for (int i = 0; i < win; ++i)
                        for (int j = 0; j < win; ++j) {
                            const double w = g[i] * g[j] / (gs * gs);
                            const double va = a(n, c, y + i, x + j), vb = b(n, c, y + i, x + j);
                            ma += w * va;
                            mb += w * vb;
                            saa += w * va * va;
                            sbb += w * vb * vb;
                            sab += w * va * vb;
                        }
                    saa -= ma * ma;
                    sbb -= mb * mb;
                    sab -= ma * mb;
                    plane += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
                    ++windows;
                }
            total += plane / static_cast<double>(windows);
            ++count;
        }
    return total / static_cast<double>(count);
}

} // namespace

TEST(Mse, BasicCases) {
    std::mt19937_64 rng(1);
    Tensor4 a = random_tensor({2, 3, 4, 5}, rng);
    EXPECT_EQ(mse(a, a), 0.0);
    Tensor4 b = a;
    for (double& v : b.data()) v += 0.1;
    EXPECT_NEAR(mse(a, b), 0.01, 1e-15);
    Tensor4 c = random_tensor({2, 3, 4, 5}, rng);
    double ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) ref += (a[i] - c[i]) * (a[i] - c[i]);
    EXPECT_NEAR(mse(a, c), ref / static_cast<double>(a.size()), 1e-14);
    EXPECT_THROW(mse(a, Tensor4(Shape4{2, 3, 4, 4})), ShapeError);
}

TEST(L0Count, ToleranceAndMonotonicity) {
    EXPECT_EQ(l0_count(Tensor4(Shape4{1, 2, 3, 3})), 0u);
    Tensor4 t(Shape4{1, 1, 1, 3}, std::vector<double>{0.0, 1e-12, 0.5});
    EXPECT_EQ(l0_count(t, 1e-8), 1u);
    std::mt19937_64 rng(2);
    Tensor4 r = random_tensor({1, 4, 6, 6}, rng);
    std::size_t prev = r.size();
    for (double tol : {0.0, 0.1, 0.3, 0.5, 0.9, 1.0}) {
        const std::size_t n = l0_count(r, tol);
        EXPECT_LE(n, prev);
        prev = n;
    }
}

TEST(L0Count, MatchesHardThresholdSurvivors) {
    std::mt19937_64 rng(3);
    Tensor4 u = random_tensor({1, 4, 6, 6}, rng, -1, 1);
    const auto spec = ThresholdSpec::hard(0.4);
    std::size_t survivors = 0;
    for (double v : u.data()) survivors += v > 0.4 ? 1 : 0;
    EXPECT_EQ(l0_count(apply_threshold(u, spec)), survivors);
}

TEST(Psnr, ClosedForms) {
    EXPECT_DOUBLE_EQ(psnr_from_mse(0.01, 1.0), 20.0);
    EXPECT_EQ(psnr_from_mse(0.0, 1.0), std::numeric_limits<double>::infinity());
    EXPECT_NEAR(psnr_from_mse(0.005, 1.0) - psnr_from_mse(0.01, 1.0), 10.0 * std::log10(2.0), 1e-12);
    EXPECT_NEAR(psnr_from_mse(0.04, 2.0), 20.0, 1e-12);
    Tensor4 a(Shape4{1, 1, 2, 2}, 0.5);
    EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
    EXPECT_THROW(psnr_from_mse(0.1, 0.0), ConfigError);
}

TEST(Psnr, StrictlyDecreasingInMse) {
    double prev = std::numeric_limits<double>::infinity();
    for (double m = 1e-6; m < 10.0; m *= 1.7) {
        const double p = psnr_from_mse(m);
        EXPECT_LT(p, prev);
        prev = p;
    }
}

TEST(Ssim, IdenticalImagesGiveExactlyOne) {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 5; ++i) {
        Tensor4 a = random_tensor({2, 3, 16, 13}, rng, 0, 1);
        EXPECT_EQ(ssim(a, a), 1.0);
    }
}

TEST(Ssim, ConstantVersusRandomIsBelowOne) {
    std::mt19937_64 rng(5);
    Tensor4 a = random_tensor({1, 1, 16, 16}, rng, 0, 1);
    Tensor4 b(a.shape(), 0.5);
    EXPECT_LT(ssim(a, b), 1.0);
}

TEST(Ssim, SymmetricAndBounded) {
    std::mt19937_64 rng(6);
    for (int i = 0; i < 10; ++i) {
        Tensor4 a = random_tensor({1, 2, 14, 12}, rng, 0, 1);
        Tensor4 b = random_tensor({1, 2, 14, 12}, rng, 0, 1);
        const double s = ssim(a, b);
        EXPECT_NEAR(s, ssim(b, a), 1e-10);
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(Ssim, MatchesWindowLoopReference) {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 3; ++i) {
        Tensor4 a = random_tensor({2, 2, 15, 17}, rng, 0, 1);
        Tensor4 b = a;
        for (double& v : b.data()) v += 0.2 * std::uniform_real_distribution<double>(-1, 1)(rng);
        EXPECT_NEAR(ssim(a, b), ssim_reference(a, b), 1e-10);
    }
}

TEST(Ssim, RejectsSmallImages) {
    Tensor4 a(Shape4{1, 1, 10, 16});
    EXPECT_THROW(ssim(a, a), ConfigError);
    EXPECT_FALSE(ssim_applicable(a.shape()));
    EXPECT_TRUE(ssim_applicable(Shape4{1, 1, 11, 11}));
}

TEST(ActivationMap, ZeroCodeGivesZeroMap) {
    Tensor4 z(Shape4{2, 5, 4, 4});
    auto m = accumulated_activation_map(z);
    EXPECT_EQ(m.shape(), (Shape4{2, 1, 4, 4}));
    EXPECT_EQ(m.max_abs(), 0.0);
}

TEST(ActivationMap, SingleActiveChannelIsUniform) {
    Tensor4 a(Shape4{1, 3, 4, 4});
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) a(0, 1, y, x) = 0.7;
    auto m = accumulated_activation_map(a);
    for (double v : m.data()) EXPECT_EQ(v, m[0]);
}

TEST(ActivationMap, MatchesLoopCounting) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor4 a = random_sparse({2, 6, 5, 7}, rng, 0.3);
        Tensor4 counts = activation_count_map(a);
        double lo = 1e300, hi = -1e300;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t y = 0; y < 5; ++y)
                for (std::size_t x = 0; x < 7; ++x) {
                    double c = 0;
                    for (std::size_t m = 0; m < 6; ++m) c += a(n, m, y, x) != 0.0 ? 1 : 0;
                    EXPECT_EQ(counts(n, 0, y, x), c);
                    lo = std::min(lo, c);
                    hi = std::max(hi, c);
                }
        Tensor4 norm = accumulated_activation_map(a);
        for (std::size_t i = 0; i < norm.size(); ++i) {
            const double expected = hi > lo ? (counts[i] - lo) / (hi - lo) : (hi > 0 ? 1.0 : 0.0);
            EXPECT_DOUBLE_EQ(norm[i], expected);
        }
    }
}

TEST(ActivationMap, JointNormalisationSharesRange) {
    Tensor4 a(Shape4{1, 2, 1, 2}), b(Shape4{1, 2, 1, 2});
    a(0, 0, 0, 0) = 1;                         // counts a: [1, 0]
    b(0, 0, 0, 0) = b(0, 1, 0, 0) = 1;         // counts b: [2, 1]
    b(0, 0, 0, 1) = 1;
    std::vector<Tensor4> codes{a, b};
    auto maps = accumulated_activation_maps(codes);
    EXPECT_DOUBLE_EQ(maps[0][0], 0.5);
    EXPECT_DOUBLE_EQ(maps[0][1], 0.0);
    EXPECT_DOUBLE_EQ(maps[1][0], 1.0);
    EXPECT_DOUBLE_EQ(maps[1][1], 0.5);
}

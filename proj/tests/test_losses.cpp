#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hmseg/losses.hpp"

using namespace hmseg;

TEST_CASE("dice_loss hand cases") {
    SUBCASE("perfect binary overlap -> 0") {
        Tensor<double> gt({3, 2, 2, 2});
        for (int64_t i = 0; i < gt.size(); ++i) gt[i] = (i % 3 == 0) ? 1.0 : 0.0;
        CHECK(dice_loss(gt, gt) == doctest::Approx(0.0).epsilon(0).scale(1).epsilon(1e-6));
        CHECK(std::fabs(dice_loss(gt, gt)) < 1e-6);
    }
    SUBCASE("disjoint nonempty supports -> 1") {
        Tensor<double> pred({1, 2, 2, 2});
        Tensor<double> gt({1, 2, 2, 2});
        pred[0] = pred[1] = 1.0;
        gt[6] = gt[7] = 1.0;
        CHECK(std::fabs(dice_loss(pred, gt) - 1.0) < 1e-6);
    }
    SUBCASE("V=1, 8 voxels, 4 ones, pred 0.5 everywhere -> 1/3") {
        Tensor<double> pred({1, 8});
        pred.fill(0.5);
        Tensor<double> gt({1, 8});
        for (int i = 0; i < 4; ++i) gt[i] = 1.0;
        CHECK(std::fabs(dice_loss(pred, gt) - 1.0 / 3.0) < 1e-6);
    }
    SUBCASE("rejects non-binary gt and shape mismatch") {
        Tensor<double> p({1, 4}), g({1, 4});
        g[0] = 0.5;
        CHECK_THROWS_AS(dice_loss(p, g), Error);
        Tensor<double> g2({1, 5});
        CHECK_THROWS_AS(dice_loss(p, g2), Error);
    }
}

TEST_CASE("dice_loss properties") {
    std::mt19937_64 eng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor<double> pred({2, 3, 2, 2});
        Tensor<double> gt({2, 3, 2, 2});
        for (int64_t i = 0; i < pred.size(); ++i) {
            pred[i] = u(eng);
            gt[i] = coin(eng) ? 1.0 : 0.0;
        }
        double d = dice_loss(pred, gt);
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);

        // symmetric under a simultaneous spatial permutation
        std::vector<int> perm(12);
        for (int i = 0; i < 12; ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), eng);
        Tensor<double> pred_p = pred, gt_p = gt;
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 12; ++i) {
                pred_p[c * 12 + i] = pred[c * 12 + perm[i]];
                gt_p[c * 12 + i] = gt[c * 12 + perm[i]];
            }
        CHECK(dice_loss(pred_p, gt_p) == doctest::Approx(d).epsilon(1e-12));
    }
}

TEST_CASE("bce hand cases") {
    SUBCASE("uniform 0.5 gives ln 2 for any target") {
        Tensor<double> p({4});
        p.fill(0.5);
        Tensor<double> t({4}, {1.0, 0.0, 1.0, 0.0});
        CHECK(std::fabs(bce(p, t) - std::log(2.0)) < 1e-6);
        Tensor<double> t2({4}, {1.0, 1.0, 1.0, 1.0});
        CHECK(std::fabs(bce(p, t2) - std::log(2.0)) < 1e-6);
    }
    SUBCASE("pred equal to clamped target is ~0") {
        Tensor<double> p({4}, {1.0 - kBceClamp, kBceClamp, 1.0 - kBceClamp, kBceClamp});
        Tensor<double> t({4}, {1.0, 0.0, 1.0, 0.0});
        CHECK(bce(p, t) < 1e-5);
    }
    SUBCASE("hand arithmetic case") {
        Tensor<double> p({4}, {0.9, 0.1, 0.8, 0.2});
        Tensor<double> t({4}, {1.0, 0.0, 1.0, 0.0});
        const double expected = -(std::log(0.9) + std::log(0.9) + std::log(0.8) + std::log(0.8)) / 4.0;
        CHECK(std::fabs(bce(p, t) - expected) < 1e-6);
        CHECK(expected == doctest::Approx(0.1643).epsilon(1e-3));
    }
    SUBCASE("exact 0/1 predictions survive via the clamp") {
        Tensor<double> p({2}, {0.0, 1.0});
        Tensor<double> t({2}, {0.0, 1.0});
        CHECK(std::isfinite(bce(p, t)));
        CHECK(bce(p, t) < 1e-5);
    }
}

TEST_CASE("discriminator_loss") {
    const LossWeights w;
    SUBCASE("single sample at 0.5 with T_real=(1,1,0,0)") {
        Tensor<double> d({4});
        d.fill(0.5);
        Tensor<double> t({4}, {1.0, 1.0, 0.0, 0.0});
        const double got = discriminator_loss({d}, {t}, w.disc_scale);
        CHECK(std::fabs(got - 0.5 * std::log(2.0)) < 1e-6);
        CHECK(got == doctest::Approx(0.3466).epsilon(1e-3));
    }
    SUBCASE("minimized when predictions match the availability code") {
        Tensor<double> t({4}, {1.0, 1.0, 0.0, 0.0});
        Tensor<double> d({4}, {1.0 - kBceClamp, 1.0 - kBceClamp, kBceClamp, kBceClamp});
        CHECK(discriminator_loss({d}, {t}, w.disc_scale) < 1e-5);
    }
    SUBCASE("two identical samples double the value exactly") {
        Tensor<double> d({4}, {0.7, 0.3, 0.6, 0.4});
        Tensor<double> t({4}, {1.0, 0.0, 1.0, 0.0});
        const double one = discriminator_loss({d}, {t}, w.disc_scale);
        const double two = discriminator_loss({d, d}, {t, t}, w.disc_scale);
        CHECK(two == doctest::Approx(2.0 * one).epsilon(1e-12));
    }
    SUBCASE("batch length mismatch rejected") {
        Tensor<double> d({4});
        CHECK_THROWS_AS(discriminator_loss({d, d}, {d}, 0.5), Error);
    }
}

TEST_CASE("generator_loss") {
    LossWeights w;  // 0.8 / 0.2 / 0.5 defaults
    // construction with dice exactly 0.5 (up to the denominator smoothing)
    Tensor<double> pred({1, 3}, {1.0, 1.0, 1.0});
    Tensor<double> gt({1, 3}, {1.0, 0.0, 0.0});
    REQUIRE(std::fabs(dice_loss(pred, gt) - 0.5) < 1e-6);

    SUBCASE("lambda2 = 0 degenerates to the weighted dice term") {
        LossWeights w0 = w;
        w0.lambda2 = 0.0;
        GeneratorLoss g = generator_loss(pred, gt, {}, w0);
        CHECK(g.total == doctest::Approx(0.8 * 0.5).epsilon(1e-6));
        CHECK(g.adv_term == 0.0);
    }
    SUBCASE("adversarial term vanishes as d_hat -> 1") {
        Tensor<double> d({4});
        d.fill(1.0 - kBceClamp);
        GeneratorLoss g = generator_loss(pred, gt, {d}, w);
        CHECK(g.adv_term < 1e-5);
        CHECK(g.total == doctest::Approx(0.8 * 0.5).epsilon(1e-4));
    }
    SUBCASE("hand value 0.8*0.5 + 0.2*ln2") {
        Tensor<double> d({4});
        d.fill(0.5);
        GeneratorLoss g = generator_loss(pred, gt, {d}, w);
        const double expected = 0.8 * 0.5 + 0.2 * std::log(2.0);
        CHECK(std::fabs(g.total - expected) < 1e-6);
        CHECK(expected == doctest::Approx(0.5386).epsilon(1e-3));
    }
    SUBCASE("decomposition is exact to machine precision") {
        std::mt19937_64 eng(3);
        std::uniform_real_distribution<double> u(0.05, 0.95);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<double> p({2, 4}), g({2, 4});
            for (int64_t i = 0; i < 8; ++i) {
                p[i] = u(eng);
                g[i] = i % 2 ? 1.0 : 0.0;
            }
            Tensor<double> d({4}, {u(eng), u(eng), u(eng), u(eng)});
            GeneratorLoss out = generator_loss(p, g, {d, d}, w);
            CHECK(out.total == out.seg_term + out.adv_term);  // bitwise
        }
    }
}

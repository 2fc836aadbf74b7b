#include <doctest.h>

#include <random>

#include "hmseg/losses.hpp"
#include "hmseg/tape.hpp"

using namespace hmseg;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::mt19937_64 eng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = u(eng);
    return t;
}

// Central finite difference of a scalar-valued graph w.r.t. one leaf tensor,
// rebuilt from scratch for every probe.
template <typename BuildFn>
double max_grad_rel_err(std::vector<Tensor<double>> leaves, BuildFn build, double h = 1e-6) {
    Tape<double> tape;
    std::vector<Tape<double>::Id> ids;
    for (const auto& t : leaves) ids.push_back(tape.leaf(t));
    auto root = build(tape, ids);
    tape.backward(root);
    std::vector<Tensor<double>> analytic;
    for (auto id : ids) analytic.push_back(tape.grad(id));

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        for (int64_t i = 0; i < leaves[li].size(); ++i) {
            auto eval = [&](double delta) {
                std::vector<Tensor<double>> probe = leaves;
                probe[li][i] += delta;
                Tape<double> t2;
                std::vector<Tape<double>::Id> ids2;
                for (const auto& t : probe) ids2.push_back(t2.leaf(t));
                return t2.val(build(t2, ids2))[0];
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            const double a = analytic[li][i];
            const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("conv3d forward matches direct summation on a tiny instance") {
    // 1x2x2x2 input, 1 output channel, kernel 1: y = w*x + b
    Tensor<double> x = random_tensor({1, 2, 2, 2}, 11);
    Tensor<double> w({1, 1, 1, 1, 1}, {2.0});
    Tensor<double> b({1}, {0.5});
    Tape<double> tape;
    auto y = tape.conv3d(tape.leaf(x), tape.leaf(w), tape.leaf(b));
    for (int64_t i = 0; i < 8; ++i) CHECK(tape.val(y)[i] == doctest::Approx(2.0 * x[i] + 0.5));
}

TEST_CASE("conv3d k=3 padding: corner output only sees in-bounds neighbors") {
    // all-ones 1x3x3x3 input, all-ones 3^3 kernel, zero bias: center sees 27,
    // corner sees 8.
    Tensor<double> x({1, 3, 3, 3});
    x.fill(1.0);
    Tensor<double> w({1, 1, 3, 3, 3});
    w.fill(1.0);
    Tensor<double> b({1});
    Tape<double> tape;
    auto y = tape.conv3d(tape.leaf(x), tape.leaf(w), tape.leaf(b));
    CHECK(tape.val(y)[13] == doctest::Approx(27.0));  // center
    CHECK(tape.val(y)[0] == doctest::Approx(8.0));    // corner
}

TEST_CASE("gradients of every op match central finite differences") {
    const double tol = 1e-5;

    SUBCASE("conv3d k=3") {
        auto err = max_grad_rel_err(
            {random_tensor({2, 4, 4, 4}, 1), random_tensor({2, 2, 3, 3, 3}, 2),
             random_tensor({2}, 3)},
            [](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                auto y = t.conv3d(v[0], v[1], v[2]);
                auto g = t.gap(t.activation(y, Activation::Silu));
                auto w = t.leaf(Tensor<double>({2, 1, 1, 1}, {0.3, -0.7}));
                // contract to scalar through a second conv-free path
                auto s = t.affine(g, t.leaf(Tensor<double>({1, 2}, {1.0, 2.0})),
                                  t.leaf(Tensor<double>({1}, {0.0})));
                (void)w;
                return s;
            });
        CHECK(err < tol);
    }

    SUBCASE("pool + upsample + concat + sigmoid") {
        auto err = max_grad_rel_err(
            {random_tensor({2, 4, 4, 4}, 4), random_tensor({1, 2, 2, 2}, 5)},
            [](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                auto p = t.avg_pool2(v[0]);            // (2,2,2,2)
                auto c = t.concat_channels(p, v[1]);   // (3,2,2,2)
                auto u = t.upsample2(c);               // (3,4,4,4)
                auto s = t.sigmoid(u);
                auto g = t.gap(s);
                return t.affine(g, t.leaf(Tensor<double>({1, 3}, {1.0, -2.0, 0.5})),
                                t.leaf(Tensor<double>({1}, {0.1})));
            });
        CHECK(err < tol);
    }

    SUBCASE("activations") {
        for (Activation a : {Activation::Silu, Activation::Tanh}) {
            auto err = max_grad_rel_err(
                {random_tensor({3, 2, 2, 2}, 6)},
                [a](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                    auto y = t.activation(v[0], a);
                    auto g = t.gap(y);
                    return t.affine(g, t.leaf(Tensor<double>({1, 3}, {1.0, 1.0, 1.0})),
                                    t.leaf(Tensor<double>({1}, {0.0})));
                });
            CHECK(err < tol);
        }
    }

    SUBCASE("zero_imputed_concat + affine + weighted_sum") {
        auto err = max_grad_rel_err(
            {random_tensor({2, 2, 2, 2}, 7), random_tensor({2, 2, 2, 2}, 8),
             random_tensor({4, 4}, 9), random_tensor({4}, 10)},
            [](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                std::vector<std::optional<Tape<double>::Id>> slots(2);
                slots[0] = t.gap(v[0]);  // slot 1 missing
                auto gamma = t.zero_imputed_concat(slots, 2);  // (4)
                auto weights = t.sigmoid(t.affine(gamma, v[2], v[3]));
                // two engaged features on slots 0 and 2 of a 4-wide weight vec
                auto fused = t.weighted_sum({v[0], v[1]}, {0, 2}, weights);
                auto g = t.gap(fused);
                return t.affine(g, t.leaf(Tensor<double>({1, 2}, {0.7, -0.3})),
                                t.leaf(Tensor<double>({1}, {0.0})));
            });
        CHECK(err < tol);
    }

    SUBCASE("channel_norm") {
        auto err = max_grad_rel_err(
            {random_tensor({2, 2, 2, 2}, 16)},
            [](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                auto y = t.channel_norm(v[0]);
                auto g = t.gap(t.activation(y, Activation::Silu));
                return t.affine(g, t.leaf(Tensor<double>({1, 2}, {1.0, -0.5})),
                                t.leaf(Tensor<double>({1}, {0.0})));
            });
        CHECK(err < tol);
    }

    SUBCASE("dice loss on 2^3 inputs") {
        Tensor<double> gt({2, 2, 2, 2});
        for (int64_t i = 0; i < 8; ++i) gt[i] = i % 3 == 0 ? 1.0 : 0.0;
        for (int64_t i = 8; i < 16; ++i) gt[i] = i % 2 == 0 ? 1.0 : 0.0;
        auto err = max_grad_rel_err(
            {random_tensor({2, 2, 2, 2}, 12, 0.05, 0.95)},
            [&gt](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                return t.dice_loss(v[0], gt, kDiceEps);
            });
        CHECK(err < tol);
    }

    SUBCASE("bce on a probability vector") {
        Tensor<double> target({4}, {1.0, 0.0, 1.0, 0.0});
        auto err = max_grad_rel_err(
            {random_tensor({4}, 13, 0.05, 0.95)},
            [&target](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                return t.bce_mean(v[0], target, kBceClamp);
            });
        CHECK(err < tol);
    }

    SUBCASE("scalar combinators") {
        auto err = max_grad_rel_err(
            {random_tensor({4}, 14, 0.05, 0.95), random_tensor({4}, 15, 0.05, 0.95)},
            [](Tape<double>& t, const std::vector<Tape<double>::Id>& v) {
                Tensor<double> ones({4});
                ones.fill(1.0);
                auto a = t.bce_mean(v[0], ones, kBceClamp);
                Tensor<double> zeros({4});
                auto b = t.bce_mean(v[1], zeros, kBceClamp);
                return t.axpby(0.8, a, 0.2, t.scale(b, 0.5));
            });
        CHECK(err < tol);
    }
}

TEST_CASE("dual-number sweep reproduces directional derivatives of the gradient") {
    // f(x) = sum silu(w x): compare the Dual tangent of df/dw against a
    // finite difference of the double gradient along the same direction.
    Tensor<double> x = random_tensor({2, 2, 2, 2}, 21);
    Tensor<double> w = random_tensor({2, 2, 1, 1, 1}, 22);
    Tensor<double> b = random_tensor({2}, 23);
    Tensor<double> dir = random_tensor({2, 2, 1, 1, 1}, 24);

    auto grad_w = [&](const Tensor<double>& wt) {
        Tape<double> t;
        auto wi = t.leaf(wt);
        auto y = t.conv3d(t.leaf(x), wi, t.leaf(b));
        auto g = t.gap(t.activation(y, Activation::Silu));
        auto s = t.affine(g, t.leaf(Tensor<double>({1, 2}, {1.0, 1.0})),
                          t.leaf(Tensor<double>({1}, {0.0})));
        t.backward(s);
        return t.grad(wi);
    };

    // dual pass with tangent dir on w
    Tape<Dual> td;
    Tensor<Dual> wd(w.shape);
    for (int64_t i = 0; i < w.size(); ++i) wd[i] = Dual(w[i], dir[i]);
    auto wi = td.leaf(wd);
    Tensor<Dual> xd = tensor_cast<double, Dual>(x);
    Tensor<Dual> bd = tensor_cast<double, Dual>(b);
    auto y = td.conv3d(td.leaf(xd), wi, td.leaf(bd));
    auto g = td.gap(td.activation(y, Activation::Silu));
    Tensor<Dual> a({1, 2});
    a[0] = Dual(1.0);
    a[1] = Dual(1.0);
    auto s = td.affine(g, td.leaf(a), td.leaf(Tensor<Dual>({1})));
    td.backward(s);
    const Tensor<Dual>& gd = td.grad(wi);

    const double h = 1e-6;
    Tensor<double> wp = w, wm = w;
    for (int64_t i = 0; i < w.size(); ++i) {
        wp[i] += h * dir[i];
        wm[i] -= h * dir[i];
    }
    Tensor<double> gp = grad_w(wp), gm = grad_w(wm);
    for (int64_t i = 0; i < w.size(); ++i) {
        const double fd = (gp[i] - gm[i]) / (2.0 * h);
        CHECK(gd[i].t == doctest::Approx(fd).epsilon(1e-4));
    }
}

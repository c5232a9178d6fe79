#include <doctest.h>

#include <cmath>

#include "fencepipe/error.hpp"
#include "fencepipe/grad_check.hpp"
#include "fencepipe/ops.hpp"
#include "helpers.hpp"

using namespace fencepipe;
using testutil::random_tensor;

namespace {

// Straight loops over the definition, zero outside the image.
double conv_ref(const Tensor& in, const Tensor& w, const Tensor& b, long y, long x, std::size_t l, long off) {
    const long H = static_cast<long>(in.dim(0)), W = static_cast<long>(in.dim(1));
    const std::size_t K = in.dim(2), L = w.dim(3);
    double s = b[l];
    for (long i = 0; i < 3; ++i)
        for (long j = 0; j < 3; ++j) {
            const long yy = y + i - off, xx = x + j - off;
            if (yy < 0 || xx < 0 || yy >= H || xx >= W) continue;
            for (std::size_t k = 0; k < K; ++k)
                s += in[(static_cast<std::size_t>(yy) * in.dim(1) + static_cast<std::size_t>(xx)) * K + k] *
                     w[((static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(j)) * K + k) * L + l];
        }
    return s;
}

}  // namespace

TEST_CASE("conv2d identity kernel passes nonnegative input through") {
    Tensor in = random_tensor({5, 5, 1}, 1, 0.0, 1.0);
    Tensor w({3, 3, 1, 1}, 0.0);
    w.mutable_data()[4] = 1.0;
    const Tensor out = conv2d(in, w, Tensor({1}, 0.0), Padding::same, Activation::relu);
    CHECK(out.shape() == Shape{5, 5, 1});
    for (std::size_t i = 0; i < 25; ++i) CHECK(out[i] == in[i]);
}

TEST_CASE("conv2d valid all-ones sums nine") {
    const Tensor out = conv2d(Tensor({3, 3, 1}, 1.0), Tensor({3, 3, 1, 1}, 1.0), Tensor({1}, 0.0), Padding::valid,
                              Activation::none);
    CHECK(out.shape() == Shape{1, 1, 1});
    CHECK(out.item() == 9.0);
}

TEST_CASE("conv2d matches direct evaluation") {
    const Tensor in = random_tensor({6, 7, 2}, 2);
    const Tensor w = random_tensor({3, 3, 2, 3}, 3);
    const Tensor b = random_tensor({3}, 4);
    const Tensor same = conv2d(in, w, b, Padding::same, Activation::none);
    const Tensor valid = conv2d(in, w, b, Padding::valid, Activation::none);
    REQUIRE(valid.shape() == Shape{4, 5, 3});
    for (long y = 0; y < 6; ++y)
        for (long x = 0; x < 7; ++x)
            for (std::size_t l = 0; l < 3; ++l)
                CHECK(same[(static_cast<std::size_t>(y) * 7 + static_cast<std::size_t>(x)) * 3 + l] ==
                      doctest::Approx(conv_ref(in, w, b, y, x, l, 1)).epsilon(1e-12));
    for (long y = 0; y < 4; ++y)
        for (long x = 0; x < 5; ++x)
            for (std::size_t l = 0; l < 3; ++l)
                CHECK(valid[(static_cast<std::size_t>(y) * 5 + static_cast<std::size_t>(x)) * 3 + l] ==
                      doctest::Approx(conv_ref(in, w, b, y, x, l, 0)).epsilon(1e-12));
}

TEST_CASE("conv2d gradients") {
    const Tensor in = random_tensor({6, 6, 2}, 5);
    const Tensor w = random_tensor({3, 3, 2, 3}, 6);
    const Tensor b = random_tensor({3}, 7);
    for (Padding p : {Padding::same, Padding::valid}) {
        for (Activation a : {Activation::none, Activation::relu}) {
            CHECK(grad_check([&](const Tensor& x) { return sum(square(conv2d(x, w, b, p, a))); }, in) <= 1e-6);
            CHECK(grad_check([&](const Tensor& x) { return sum(square(conv2d(in, x, b, p, a))); }, w) <= 1e-6);
            CHECK(grad_check([&](const Tensor& x) { return sum(square(conv2d(in, w, x, p, a))); }, b) <= 1e-6);
        }
    }
}

TEST_CASE("conv2d rejects mismatched channels") {
    CHECK_THROWS_AS(conv2d(Tensor({4, 4, 2}), Tensor({3, 3, 3, 1}), Tensor({1})), DimensionError);
}

TEST_CASE("conv1x1") {
    SUBCASE("identity weights") {
        const Tensor in = random_tensor({3, 4, 2}, 8);
        Tensor w({1, 1, 2, 2}, 0.0);
        w.mutable_data()[0] = 1.0;
        w.mutable_data()[3] = 1.0;
        const Tensor out = conv1x1(in, w, Tensor({2}, 0.0));
        for (std::size_t i = 0; i < in.numel(); ++i) CHECK(out[i] == in[i]);
    }
    SUBCASE("dot product at one pixel") {
        Tensor in({1, 1, 2}, std::vector<double>{1.0, 2.0});
        CHECK(conv1x1(in, Tensor({1, 1, 2, 1}, 1.0), Tensor({1}, 0.0)).item() == 3.0);
    }
    SUBCASE("gradients") {
        const Tensor in = random_tensor({3, 4, 2}, 9);
        const Tensor w = random_tensor({1, 1, 2, 3}, 10);
        const Tensor b = random_tensor({3}, 11);
        CHECK(grad_check([&](const Tensor& x) { return sum(square(conv1x1(x, w, b))); }, in) <= 1e-6);
        CHECK(grad_check([&](const Tensor& x) { return sum(square(conv1x1(in, x, b))); }, w) <= 1e-6);
        CHECK(grad_check([&](const Tensor& x) { return sum(square(conv1x1(in, w, x))); }, b) <= 1e-6);
    }
}

TEST_CASE("maxpool2") {
    SUBCASE("window maximum") {
        const Tensor out = maxpool2(Tensor({2, 2, 1}, std::vector<double>{1, 2, 3, 4}));
        CHECK(out.shape() == Shape{1, 1, 1});
        CHECK(out.item() == 4.0);
    }
    SUBCASE("ties send the gradient to the first cell") {
        Tensor in({4, 4, 1}, 2.0);
        in.set_requires_grad(true);
        const Tensor out = maxpool2(in);
        for (double v : out.data()) CHECK(v == 2.0);
        backward(sum(out));
        const auto g = in.grad();
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) CHECK(g[y * 4 + x] == (y % 2 == 0 && x % 2 == 0 ? 1.0 : 0.0));
    }
    SUBCASE("gradients away from ties") {
        const Tensor in = random_tensor({8, 8, 3}, 12);
        CHECK(grad_check([](const Tensor& x) { return sum(square(maxpool2(x))); }, in) <= 1e-6);
    }
    SUBCASE("odd sizes are rejected") { CHECK_THROWS_AS(maxpool2(Tensor({3, 4, 1})), DimensionError); }
}

TEST_CASE("upconv2") {
    SUBCASE("broadcast by kernel") {
        const Tensor out = upconv2(Tensor({1, 1, 1}, 0.7), Tensor({2, 2, 1, 1}, 1.0), Tensor({1}, 0.0));
        CHECK(out.shape() == Shape{2, 2, 1});
        for (double v : out.data()) CHECK(v == 0.7);
    }
    SUBCASE("zero input") {
        const Tensor out = upconv2(Tensor({2, 3, 2}, 0.0), random_tensor({2, 2, 2, 3}, 13), Tensor({3}, 0.0));
        CHECK(out.shape() == Shape{4, 6, 3});
        for (double v : out.data()) CHECK(v == 0.0);
    }
    SUBCASE("gradients") {
        const Tensor in = random_tensor({3, 3, 2}, 14);
        const Tensor w = random_tensor({2, 2, 2, 1}, 15);
        const Tensor b = random_tensor({1}, 16);
        CHECK(grad_check([&](const Tensor& x) { return sum(square(upconv2(x, w, b))); }, in) <= 1e-6);
        CHECK(grad_check([&](const Tensor& x) { return sum(square(upconv2(in, x, b))); }, w) <= 1e-6);
        CHECK(grad_check([&](const Tensor& x) { return sum(square(upconv2(in, w, x))); }, b) <= 1e-6);
    }
}

TEST_CASE("concat_channels") {
    const Tensor a = random_tensor({2, 3, 2}, 17);
    const Tensor b = random_tensor({2, 3, 3}, 18);
    const Tensor c = concat_channels(a, b);
    REQUIRE(c.shape() == Shape{2, 3, 5});
    for (std::size_t p = 0; p < 6; ++p) {
        CHECK(c[p * 5] == a[p * 2]);
        CHECK(c[p * 5 + 1] == a[p * 2 + 1]);
        CHECK(c[p * 5 + 2] == b[p * 3]);
        CHECK(c[p * 5 + 4] == b[p * 3 + 2]);
    }
    const Tensor same = concat_channels(a, Tensor({2, 3, 0}));
    CHECK(same.shape() == a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(same[i] == a[i]);
    const Tensor w = random_tensor({2, 3, 5}, 19);
    CHECK(grad_check([&](const Tensor& x) { return sum(mul(concat_channels(x, b), w)); }, a) <= 1e-6);
    CHECK(grad_check([&](const Tensor& x) { return sum(square(concat_channels(a, x))); }, b) <= 1e-6);
    CHECK_THROWS_AS(concat_channels(a, Tensor({3, 3, 1})), DimensionError);
}

TEST_CASE("center_crop") {
    const Tensor in = random_tensor({6, 6, 1}, 20);
    const Tensor out = center_crop(in, 2, 4);
    REQUIRE(out.shape() == Shape{2, 4, 1});
    CHECK(out[0] == in[2 * 6 + 1]);
    CHECK(grad_check([](const Tensor& x) { return sum(square(center_crop(x, 3, 3))); }, in) <= 1e-6);
}

TEST_CASE("dense") {
    SUBCASE("arithmetic") {
        const Tensor out = dense(Tensor({2}, 1.0), Tensor({2, 1}, std::vector<double>{2, 3}), Tensor({1}, 1.0));
        CHECK(out.item() == 6.0);
    }
    SUBCASE("identity") {
        const Tensor in = random_tensor({3}, 21);
        Tensor w({3, 3}, 0.0);
        for (std::size_t i = 0; i < 3; ++i) w.mutable_data()[i * 4] = 1.0;
        const Tensor out = dense(in, w, Tensor({3}, 0.0));
        for (std::size_t i = 0; i < 3; ++i) CHECK(out[i] == in[i]);
    }
    SUBCASE("gradients") {
        const Tensor in = random_tensor({4}, 22);
        const Tensor w = random_tensor({4, 3}, 23);
        const Tensor b = random_tensor({3}, 24);
        for (Activation a : {Activation::none, Activation::relu}) {
            CHECK(grad_check([&](const Tensor& x) { return sum(square(dense(x, w, b, a))); }, in) <= 1e-6);
            CHECK(grad_check([&](const Tensor& x) { return sum(square(dense(in, x, b, a))); }, w) <= 1e-6);
            CHECK(grad_check([&](const Tensor& x) { return sum(square(dense(in, w, x, a))); }, b) <= 1e-6);
        }
    }
}

TEST_CASE("activations") {
    CHECK(activate(Tensor::scalar(0.0), ProbabilityMap::sigmoid).item() == 0.5);
    const Tensor s = activate(Tensor({2}, 0.0), ProbabilityMap::softmax);
    CHECK(s[0] == 0.5);
    CHECK(s[1] == 0.5);

    Rng rng(25);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({5}, 100 + static_cast<std::uint64_t>(trial), -3.0, 3.0);
        const double c = rng.uniform(-10.0, 10.0);
        Tensor shifted = x.detach();
        for (double& v : shifted.mutable_data()) v += c;
        const Tensor a = activate(x, ProbabilityMap::softmax);
        const Tensor b = activate(shifted, ProbabilityMap::softmax);
        for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-12);
    }
    const Tensor x = random_tensor({3, 3, 2}, 26);
    const Tensor w = random_tensor({3, 3, 2}, 27);
    CHECK(grad_check([&](const Tensor& v) { return sum(mul(activate(v, ProbabilityMap::sigmoid), w)); }, x) <= 1e-6);
    CHECK(grad_check([&](const Tensor& v) { return sum(mul(activate(v, ProbabilityMap::softmax), w)); }, x) <= 1e-6);
    CHECK(grad_check([&](const Tensor& v) { return sum(mul(relu(v), w)); }, x) <= 1e-6);
    CHECK(grad_check([&](const Tensor& v) { return sum(square(global_avg_pool(v))); }, x) <= 1e-6);
    CHECK(grad_check([&](const Tensor& v) { return sum(square(flatten(v))); }, x) <= 1e-6);
    CHECK(grad_check([&](const Tensor& v) { return mean(square(add(v, w))); }, x) <= 1e-6);
    CHECK(grad_check([&](const Tensor& v) { return sum(scale(mul(v, v), 0.3)); }, x) <= 1e-6);
}

TEST_CASE("cross entropy") {
    const Tensor onehot({2}, std::vector<double>{1.0, 0.0});
    CHECK(cross_entropy_loss(onehot, onehot).item() == 0.0);
    CHECK(cross_entropy_loss(Tensor({2}, 0.5), onehot).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    const Tensor pred = random_tensor({4}, 28, 0.1, 0.9);
    const Tensor target = random_tensor({4}, 29, 0.0, 1.0);
    CHECK(grad_check([&](const Tensor& p) { return cross_entropy_loss(p, target); }, pred) <= 1e-6);
    CHECK(grad_check([&](const Tensor& p) { return binary_cross_entropy(p, target); }, pred) <= 1e-6);
    CHECK(grad_check([&](const Tensor& p) { return mse_loss(p, target); }, pred) <= 1e-6);
}

TEST_CASE("soft dice loss") {
    CHECK(soft_dice_loss(Tensor({2, 2, 1}, 1.0), Tensor({2, 2, 1}, 1.0), 1.0).item() == -1.0);
    CHECK(soft_dice_loss(Tensor({2, 2, 1}, 0.0), Tensor({2, 2, 1}, 1.0), 1.0).item() == doctest::Approx(-0.2));
    const Tensor pred = random_tensor({4, 4, 1}, 30, 0.0, 1.0);
    Rng rng(31);
    Tensor target({4, 4, 1});
    for (double& v : target.mutable_data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double l = soft_dice_loss(pred, target).item();
    CHECK(l >= -1.0);
    CHECK(l <= 0.0);
    CHECK(grad_check([&](const Tensor& p) { return soft_dice_loss(p, target); }, pred) <= 1e-6);
}

TEST_CASE("backward basics") {
    SUBCASE("sum gives ones") {
        Tensor x = random_tensor({2, 3}, 32);
        x.set_requires_grad(true);
        backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares") {
        Tensor x({2}, std::vector<double>{1.0, 2.0});
        x.set_requires_grad(true);
        backward(sum(square(x)));
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
        // Leaf gradients accumulate across calls.
        backward(sum(square(x)));
        CHECK(x.grad()[1] == 8.0);
    }
    SUBCASE("shared subexpression") {
        Tensor x = Tensor::scalar(3.0);
        x.set_requires_grad(true);
        const Tensor y = mul(x, x);
        backward(add(y, y));
        CHECK(x.grad()[0] == 12.0);
    }
    SUBCASE("non-scalar root is rejected") {
        Tensor x({2}, 1.0);
        x.set_requires_grad(true);
        CHECK_THROWS_AS(backward(x), ContractError);
    }
    SUBCASE("no-grad guard records nothing") {
        Tensor x({2}, 1.0);
        x.set_requires_grad(true);
        {
            NoGradGuard guard;
            CHECK_FALSE(NoGradGuard::grad_enabled());
            const Tensor y = sum(square(x));
            CHECK_FALSE(y.requires_grad());
        }
        CHECK(NoGradGuard::grad_enabled());
    }
    SUBCASE("tape lists recorded ops in creation order") {
        Tensor x({2}, 1.0);
        x.set_requires_grad(true);
        const Tensor y = square(x);
        const Tensor z = sum(y);
        const Tape tape = Tape::record(z);
        REQUIRE(tape.size() == 3);
        CHECK(tape.nodes().front() == x.node().get());
        CHECK(tape.nodes().back() == z.node().get());
    }
    SUBCASE("three-layer net") {
        const Tensor in = random_tensor({6, 6, 1}, 33);
        const Tensor w1 = random_tensor({3, 3, 1, 2}, 34);
        const Tensor w2 = random_tensor({3, 3, 2, 2}, 35);
        const Tensor w3 = random_tensor({18, 2}, 36);
        auto net = [&](const Tensor& a, const Tensor& b, const Tensor& c) {
            Tensor h = conv2d(in, a, Tensor({2}, 0.1), Padding::same, Activation::relu);
            h = maxpool2(conv2d(h, b, Tensor({2}, 0.0), Padding::same, Activation::relu));
            return cross_entropy_loss(activate(dense(flatten(h), c, Tensor({2}, 0.0)), ProbabilityMap::softmax),
                                      Tensor({2}, std::vector<double>{0.0, 1.0}));
        };
        CHECK(grad_check([&](const Tensor& x) { return net(x, w2, w3); }, w1) <= 1e-5);
        CHECK(grad_check([&](const Tensor& x) { return net(w1, x, w3); }, w2) <= 1e-5);
        CHECK(grad_check([&](const Tensor& x) { return net(w1, w2, x); }, w3) <= 1e-5);
    }
}

TEST_CASE("grad_check itself") {
    const Tensor x = random_tensor({7}, 37);
    // Exactly zero needs x +- h and the sum to be representable: dyadic
    // inputs and a power-of-two step.
    Tensor dyadic({7});
    for (std::size_t i = 0; i < 7; ++i) dyadic.mutable_data()[i] = std::ldexp(static_cast<double>(i) - 3.0, -2);
    CHECK(grad_check([](const Tensor& v) { return sum(v); }, dyadic, std::ldexp(1.0, -17)) == 0.0);
    CHECK(grad_check([](const Tensor& v) { return sum(v); }, x) <= 1e-10);
    CHECK(grad_check([](const Tensor& v) { return sum(square(v)); }, x, 1e-5) <= 1e-8);
    // A tape that misses a dependency is caught.
    auto lying = [](const Tensor& v) { return add(sum(v), scale(sum(square(v.detach())), 1.0)); };
    CHECK(grad_check(lying, x) > 0.1);
    CHECK_THROWS_AS(grad_check([](const Tensor& v) { return square(v); }, x), ContractError);
}

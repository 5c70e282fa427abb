#include <doctest.h>

#include <cmath>

#include "bsnn/errors.hpp"
#include "bsnn/fixtures.hpp"
#include "bsnn/rng.hpp"
#include "bsnn/tensor.hpp"
#include "oracles.hpp"

using namespace bsnn;

namespace {

bool all_finite(const Tensor& t)
{
    for (float v : t.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("tensor construction checks the element count")
{
    CHECK(Tensor({2, 3}).size() == 6);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
    const Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(t.at(1, 0) == 3.0f);
    CHECK_THROWS_AS(t.reshaped({3}), DimensionError);
    CHECK(t.reshaped({4})[3] == 4.0f);
}

TEST_CASE("dense_forward examples")
{
    SUBCASE("hand arithmetic")
    {
        const Tensor w = Tensor::from({2, 2}, {1, 2, 3, 4});
        const Tensor b = Tensor::from({0, 1});
        const Tensor x = Tensor::from({1, 1});
        const Tensor y = dense_forward(w, b, x);
        CHECK(y == Tensor::from({3, 8}));
        const auto ref = oracle::dense(w, b, x);
        CHECK(y[0] == doctest::Approx(ref[0]));
        CHECK(y[1] == doctest::Approx(ref[1]));
    }
    SUBCASE("identity")
    {
        const Tensor w = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        CHECK(dense_forward(w, Tensor({3}), Tensor::from({5, -2, 0})) == Tensor::from({5, -2, 0}));
    }
    SUBCASE("zero weights pass the bias")
    {
        CHECK(dense_forward(Tensor({1, 4}), Tensor::from({7}), Tensor::from({1, -3, 2, 9})) == Tensor::from({7}));
    }
    SUBCASE("shape mismatch names the operands")
    {
        try {
            dense_forward(Tensor({2, 3}), Tensor({2}), Tensor({2}));
            FAIL("expected DimensionError");
        } catch (const DimensionError& e) {
            CHECK(std::string(e.what()).find("weight") != std::string::npos);
            CHECK(std::string(e.what()).find("input") != std::string::npos);
        }
        CHECK_THROWS_AS(dense_forward(Tensor({2, 3}), Tensor({3}), Tensor({3})), DimensionError);
    }
}

TEST_CASE("conv2d_forward examples")
{
    Rng rng(11);
    SUBCASE("1x1 kernel of weight 2 doubles")
    {
        const Tensor x = random_tensor(rng, {1, 3, 4}, -1, 1);
        const Tensor y = conv2d_forward(Tensor({1, 1, 1, 1}, 2.0f), Tensor({1}), x, 1, 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(y[i] == 2.0f * x[i]);
        }
    }
    SUBCASE("centre-one 3x3 kernel with pad 1 is the identity")
    {
        Tensor w({1, 1, 3, 3});
        w[4] = 1.0f;
        const Tensor x = random_tensor(rng, {1, 5, 4}, -1, 1);
        CHECK(conv2d_forward(w, Tensor({1}), x, 1, 1) == x);
    }
    SUBCASE("2x2 all-ones kernel sums the window")
    {
        const Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
        const Tensor y = conv2d_forward(Tensor({1, 1, 2, 2}, 1.0f), Tensor({1}), x, 1, 0);
        CHECK(y.shape() == Shape{1, 1, 1});
        CHECK(y[0] == 10.0f);
    }
    SUBCASE("random convolutions match the loop oracle")
    {
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3), k = 1 + rng.below(3);
            const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
            const std::size_t h = k + stride * rng.below(4), w = k + stride * rng.below(4);
            const Tensor x = random_tensor(rng, {ci, h, w}, -1, 1);
            const Tensor wt = random_tensor(rng, {co, ci, k, k}, -1, 1);
            const Tensor b = random_tensor(rng, {co}, -1, 1);
            const Tensor y = conv2d_forward(wt, b, x, stride, pad);
            const auto ref = oracle::conv(wt, b, x, stride, pad);
            REQUIRE(y.size() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i) {
                CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-6));
            }
        }
    }
    SUBCASE("non-integral output size is a configuration error")
    {
        CHECK_THROWS_AS(conv2d_forward(Tensor({1, 1, 2, 2}), Tensor({1}), Tensor({1, 5, 5}), 2, 0), ConfigError);
        CHECK_THROWS_AS(conv2d_forward(Tensor({1, 1, 3, 3}), Tensor({1}), Tensor({1, 2, 2}), 1, 0), ConfigError);
    }
}

TEST_CASE("relu_forward examples and idempotence")
{
    CHECK(relu_forward(Tensor::from({-1, 0, 2})) == Tensor::from({0, 0, 2}));
    CHECK(relu_forward(Tensor::from({-1, -5, -0.5f})) == Tensor::from({0, 0, 0}));
    CHECK(relu_forward(Tensor::from({0, 3, 0.25f})) == Tensor::from({0, 3, 0.25f}));
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = random_tensor(rng, {1 + rng.below(40)}, -10, 10);
        const Tensor once = relu_forward(x);
        CHECK(relu_forward(once) == once);
        CHECK(all_finite(once));
    }
}

TEST_CASE("pool2d_forward examples")
{
    const Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(pool2d_forward(x, PoolKind::max, 2, 2)[0] == 4.0f);
    CHECK(pool2d_forward(x, PoolKind::avg, 2, 2)[0] == 2.5f);
    const Tensor c({2, 4, 4}, 0.75f);
    CHECK(pool2d_forward(c, PoolKind::max, 2, 2) == Tensor({2, 2, 2}, 0.75f));
    CHECK(pool2d_forward(c, PoolKind::avg, 2, 2) == Tensor({2, 2, 2}, 0.75f));
    CHECK_THROWS_AS(pool2d_forward(x, PoolKind::max, 3, 3), ConfigError);
}

TEST_CASE("bn_forward examples")
{
    const Tensor x = Tensor::from({1.0f});
    CHECK(bn_forward(Tensor::from({3, -1}), Tensor({2}), Tensor({2}, 1.0f), Tensor({2}, 1.0f), Tensor({2})) ==
          Tensor::from({3, -1}));
    CHECK(bn_forward(x, Tensor::from({0.5f}), Tensor::from({2.0f}), Tensor::from({0.5f}), Tensor::from({0.1f}))[0] ==
          doctest::Approx(0.225));
    const Tensor mu = Tensor::from({0.3f, -2.0f});
    const Tensor beta = Tensor::from({0.7f, 1.5f});
    CHECK(bn_forward(mu, mu, Tensor({2}, 0.4f), Tensor({2}, 3.0f), beta) == beta);
    CHECK_THROWS_AS(bn_forward(x, Tensor({1}), Tensor({1}, 0.0f), Tensor({1}, 1.0f), Tensor({1})), DomainError);
    CHECK_THROWS_AS(bn_forward(x, Tensor({1}), Tensor({1}, -1.0f), Tensor({1}, 1.0f), Tensor({1})), DomainError);
}

TEST_CASE("bn_forward is per channel on [C x H x W]")
{
    const Tensor x = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
    const Tensor y = bn_forward(x, Tensor::from({0, 1}), Tensor::from({1, 2}), Tensor::from({1, 1}), Tensor::from({0, 0}));
    CHECK(y == Tensor::from({2, 1, 2}, {1, 2, 1, 1.5f}));
}

TEST_CASE("property: 1x1 identity convolution returns the input")
{
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t c = 1 + rng.below(4);
        const Tensor x = random_tensor(rng, {c, 1 + rng.below(6), 1 + rng.below(6)}, -5, 5);
        Tensor w({c, c, 1, 1});
        for (std::size_t i = 0; i < c; ++i) {
            w[i * c + i] = 1.0f;
        }
        CHECK(conv2d_forward(w, Tensor({c}), x, 1, 0) == x);
    }
}

TEST_CASE("property: dense_forward without bias is linear")
{
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t in = 1 + rng.below(10), out = 1 + rng.below(10);
        const Tensor w = random_tensor(rng, {out, in}, -1, 1);
        const Tensor zero({out});
        const Tensor x = random_tensor(rng, {in}, -1, 1);
        const Tensor y = random_tensor(rng, {in}, -1, 1);
        const float a = static_cast<float>(rng.uniform(-2, 2));
        const float b = static_cast<float>(rng.uniform(-2, 2));
        const Tensor lhs = dense_forward(w, zero, add(scale(x, a), scale(y, b)));
        const Tensor rhs = add(scale(dense_forward(w, zero, x), a), scale(dense_forward(w, zero, y), b));
        for (std::size_t i = 0; i < out; ++i) {
            CHECK(lhs[i] == doctest::Approx(rhs[i]).epsilon(1e-5).scale(1.0));
        }
    }
}

TEST_CASE("property: bn_forward followed by its inverse recovers x")
{
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t c = 1 + rng.below(5);
        const Tensor x = random_tensor(rng, {c, 3, 2}, -4, 4);
        const Tensor mu = random_tensor(rng, {c}, -1, 1);
        const Tensor theta = random_tensor(rng, {c}, 0.2, 3);
        const Tensor gamma = random_tensor(rng, {c}, 0.2, 3);
        const Tensor beta = random_tensor(rng, {c}, -1, 1);
        const Tensor y = bn_forward(x, mu, theta, gamma, beta);
        CHECK(all_finite(y));
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t k = 0; k < 6; ++k) {
                const double v = y[ch * 6 + k];
                const double back = (v - beta[ch]) * theta[ch] / gamma[ch] + mu[ch];
                const double want = x[ch * 6 + k];
                CHECK(std::abs(back - want) <= 1e-6 * std::max(1.0, std::abs(want)) * 4);
            }
        }
    }
}

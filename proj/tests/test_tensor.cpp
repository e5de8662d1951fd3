#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "trinity/error.hpp"
#include "trinity/random.hpp"
#include "trinity/tensor.hpp"

using namespace trinity;

namespace {

// naive triple-loop reference, independent of the library path
std::vector<double> matmul_reference(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p)
                out[i * n + j] += a.at({i, p}) * b.at({p, j});
    return out;
}

std::vector<double> conv_reference(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::size_t n = x.shape()[0], cin = x.shape()[1];
    const std::size_t k = w.shape()[0], cout = w.shape()[2];
    const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>((k - 1) / 2);
    std::vector<double> out(n * cout, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t co = 0; co < cout; ++co) {
            double acc = b.at({co});
            for (std::size_t t = 0; t < k; ++t)
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(t) - radius;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                    acc += x.at({static_cast<std::size_t>(src), ci}) * w.at({t, ci, co});
                }
            out[i * cout + co] = acc;
        }
    return out;
}

}  // namespace

TEST_CASE("random source is reproducible and serializable") {
    RandomSource a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    RandomSource c(7);
    c.gaussian();
    const RandomState snapshot = c.state();
    std::vector<double> expected;
    for (int i = 0; i < 10; ++i) expected.push_back(c.gaussian());
    c.restore(snapshot);
    for (int i = 0; i < 10; ++i) CHECK(c.gaussian() == expected[static_cast<std::size_t>(i)]);

    RandomSource d(3);
    for (int i = 0; i < 1000; ++i) CHECK(d.uniform_int(17) < 17);
    for (int i = 0; i < 1000; ++i) {
        const double u = d.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("matmul identity and annihilator") {
    RandomSource rng(1);
    Tensor m = Tensor::rand_uniform({3, 3}, rng, -1.0, 1.0);
    Tensor eye = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
    Tensor prod = matmul(eye, m);
    for (std::size_t i = 0; i < prod.size(); ++i) CHECK(prod.data()[i] == m.data()[i]);

    Tensor z = matmul(Tensor::zeros({2, 4}), Tensor::rand_uniform({4, 5}, rng, -1.0, 1.0));
    CHECK(z.shape() == Shape{2, 5});
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    RandomSource rng(2);
    Tensor a = Tensor::rand_uniform({5, 7}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({7, 2}, rng, -1.0, 1.0);
    Tensor c = matmul(a, b);
    const auto expected = matmul_reference(a, b);
    for (std::size_t i = 0; i < c.size(); ++i)
        CHECK(std::abs(c.data()[i] - expected[i]) < 1e-12);
}

TEST_CASE("matmul rejects shape mismatches with both shapes named") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b),
                         doctest::Contains("(2, 3)"), DimensionError);
}

TEST_CASE("batched matmul agrees with per-slice products") {
    RandomSource rng(11);
    Tensor a = Tensor::rand_uniform({3, 4, 5}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({3, 5, 2}, rng, -1.0, 1.0);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{3, 4, 2});
    for (std::size_t t = 0; t < 3; ++t) {
        Tensor as = Tensor::from_data({4, 5}, {a.data() + t * 20, a.data() + (t + 1) * 20});
        Tensor bs = Tensor::from_data({5, 2}, {b.data() + t * 10, b.data() + (t + 1) * 10});
        const auto expected = matmul_reference(as, bs);
        for (std::size_t i = 0; i < 8; ++i)
            CHECK(std::abs(c.data()[t * 8 + i] - expected[i]) < 1e-12);
    }
}

TEST_CASE("conv1d_same identity kernel reproduces the input") {
    const std::size_t n = 9, ch = 4;
    RandomSource rng(3);
    Tensor x = Tensor::rand_uniform({n, ch}, rng, -1.0, 1.0);
    Tensor w = Tensor::zeros({3, ch, ch});
    for (std::size_t c = 0; c < ch; ++c) w.data()[(1 * ch + c) * ch + c] = 1.0;  // center tap
    Tensor out = conv1d_same(x, w, Tensor::zeros({ch}));
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(out.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
}

TEST_CASE("conv1d_same keeps length for every odd kernel") {
    RandomSource rng(4);
    Tensor x = Tensor::rand_uniform({100, 3}, rng, -1.0, 1.0);
    for (std::size_t k : {3u, 5u, 7u}) {
        Tensor w = Tensor::rand_uniform({k, 3, 5}, rng, -1.0, 1.0);
        Tensor out = conv1d_same(x, w, Tensor::zeros({5}));
        CHECK(out.shape() == Shape{100, 5});
    }
}

TEST_CASE("conv1d_same matches the nested-loop oracle") {
    RandomSource rng(5);
    Tensor x = Tensor::rand_uniform({12, 3}, rng, -1.0, 1.0);
    Tensor w = Tensor::rand_uniform({5, 3, 4}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({4}, rng, -1.0, 1.0);
    Tensor out = conv1d_same(x, w, b);
    const auto expected = conv_reference(x, w, b);
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(std::abs(out.data()[i] - expected[i]) < 1e-12);
}

TEST_CASE("conv1d_same rejects even kernels") {
    CHECK_THROWS_AS(conv1d_same(Tensor::zeros({4, 2}), Tensor::zeros({4, 2, 2}),
                                Tensor::zeros({2})),
                    ConfigError);
}

TEST_CASE("masked_softmax basics") {
    Tensor uniform = masked_softmax(Tensor::zeros({1, 3}), Tensor::full({1, 3}, 1.0));
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(uniform.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    Tensor scores = Tensor::from_data({1, 2}, {5.0, 9.0});
    Tensor mask = Tensor::from_data({1, 2}, {1.0, 0.0});
    Tensor renorm = masked_softmax(scores, mask);
    CHECK(renorm.data()[0] == 1.0);
    CHECK(renorm.data()[1] == 0.0);

    Tensor big = masked_softmax(Tensor::full({1, 2}, 1000.0), Tensor::full({1, 2}, 1.0));
    CHECK(big.data()[0] == doctest::Approx(0.5));
    CHECK(big.data()[1] == doctest::Approx(0.5));
    CHECK(big.all_finite());

    CHECK_THROWS_AS(masked_softmax(Tensor::zeros({2, 2}),
                                   Tensor::from_data({2, 2}, {1.0, 1.0, 0.0, 0.0})),
                    ContractError);
}

TEST_CASE("masked_softmax rows are probability distributions over the support") {
    RandomSource rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor scores = Tensor::rand_uniform({4, 9}, rng, -50.0, 50.0);
        Tensor mask = Tensor::zeros({4, 9});
        for (std::size_t r = 0; r < 4; ++r) {
            bool any = false;
            for (std::size_t c = 0; c < 9; ++c) {
                const bool allowed = rng.bernoulli(0.5);
                mask.data()[r * 9 + c] = allowed ? 1.0 : 0.0;
                any = any || allowed;
            }
            if (!any) mask.data()[r * 9] = 1.0;
        }
        Tensor p = masked_softmax(scores, mask);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 9; ++c) {
                const double v = p.data()[r * 9 + c];
                CHECK(v >= 0.0);
                if (mask.data()[r * 9 + c] == 0.0) CHECK(v == 0.0);
                total += v;
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("cross_entropy_masked contract values") {
    // perfect predictor with margin 30
    Tensor logits = Tensor::zeros({3, 5});
    std::vector<int> targets = {2, 0, 4};
    for (std::size_t i = 0; i < 3; ++i)
        logits.data()[i * 5 + static_cast<std::size_t>(targets[i])] = 30.0;
    Tensor loss = cross_entropy_masked(logits, targets, {true, true, true});
    CHECK(loss.item() < 1e-3);

    // uniform logits over V=6
    Tensor uniform = Tensor::zeros({4, 6});
    Tensor uloss = cross_entropy_masked(uniform, {0, 1, 2, 3}, {true, true, true, true});
    CHECK(uloss.item() == doctest::Approx(std::log(6.0)).epsilon(1e-12));

    // single selected position equals the hand-computed value
    Tensor two = Tensor::from_data({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.5, 0.25});
    Tensor single = cross_entropy_masked(two, {0, 2}, {false, true});
    const double z = std::exp(-1.0) + std::exp(0.5) + std::exp(0.25);
    CHECK(single.item() == doctest::Approx(std::log(z) - 0.25).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy_masked(two, {0, 0}, {false, false}), ContractError);
}

TEST_CASE("backward: sum gives an all-ones gradient") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad_data()[i] == 1.0);
}

TEST_CASE("backward: dot product gradient is the other operand") {
    Tensor x = Tensor::from_data({4}, {1.0, -2.0, 3.0, 0.5}, true);
    Tensor y = Tensor::from_data({4}, {2.0, 0.25, -1.0, 4.0});
    backward(sum(mul(x, y)));
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad_data()[i] == y.data()[i]);
}

TEST_CASE("backward accumulates additively until reset") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    backward(sum(x));
    backward(sum(x));
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad_data()[i] == 2.0);
    x.zero_grad();
    backward(sum(x));
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad_data()[i] == 1.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ContractError);
}

TEST_CASE("grad_check on a quadratic and a constant") {
    const double err = grad_check(
        [](const Tensor& x) { return sum(mul(x, x)); }, Tensor::from_data({1}, {3.0}), 1e-5);
    CHECK(err < 1e-8);

    const double cerr = grad_check(
        [](const Tensor& x) { return scale(sum(mul(x, Tensor::zeros(x.shape()))), 1.0); },
        Tensor::from_data({3}, {1.0, 2.0, 3.0}), 1e-5);
    CHECK(cerr == 0.0);
}

TEST_CASE("three-op composites pass finite-difference checks") {
    RandomSource rng(7);
    Tensor w = Tensor::rand_uniform({3, 3}, rng, -1.0, 1.0);
    const double err = grad_check(
        [&w](const Tensor& x) { return sum(mul(gelu(matmul(x, w)), x)); },
        Tensor::rand_uniform({3, 3}, rng, -1.0, 1.0), 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("every differentiable op passes finite differences on random input") {
    RandomSource rng(8);
    Tensor point = Tensor::rand_uniform({4, 6}, rng, -1.0, 1.0);
    Tensor bias6 = Tensor::rand_uniform({6}, rng, -1.0, 1.0);
    Tensor gain = Tensor::rand_uniform({6}, rng, 0.5, 1.5);
    Tensor w = Tensor::rand_uniform({6, 6}, rng, -0.7, 0.7);
    Tensor kernel = Tensor::rand_uniform({3, 6, 6}, rng, -0.5, 0.5);
    Tensor mask = Tensor::full({4, 6}, 1.0);
    std::vector<std::size_t> positions = {0, 1, 2, 3};

    const std::vector<std::function<Tensor(const Tensor&)>> fns = {
        [&](const Tensor& x) { return sum(gelu(x)); },
        [&](const Tensor& x) { return sum(sigmoid(x)); },
        [&](const Tensor& x) { return sum(matmul(x, w)); },
        [&](const Tensor& x) { return sum(matmul_nt(x, w)); },
        [&](const Tensor& x) { return sum(conv1d_same(x, kernel, bias6)); },
        [&](const Tensor& x) { return sum(masked_softmax(x, mask)); },
        [&](const Tensor& x) { return sum(layer_norm(x, gain, bias6)); },
        [&](const Tensor& x) { return sum(add_bias(x, bias6)); },
        [&](const Tensor& x) { return sum(reverse_rows(x)); },
        [&](const Tensor& x) { return row_l2_norm(x, 2); },
        [&](const Tensor& x) { return sum_row(x, 1); },
        [&](const Tensor& x) { return sum(rope_apply(x, positions, 10000.0)); },
        [&](const Tensor& x) {
            return sum(windowed_attention(x, slice_cols(x, 0, 6), reverse_rows(x), 2, 0.4));
        },
        [&](const Tensor& x) { return cross_entropy_masked(x, {1, 0, 5, 3},
                                                           {true, false, true, true}); },
        [&](const Tensor& x) { return sum(concat_cols({slice_cols(x, 0, 2), x})); },
    };
    for (const auto& f : fns) CHECK(grad_check(f, point, 1e-5) < 1e-4);
}

TEST_CASE("operations are deterministic across repeated evaluation") {
    RandomSource rng(9);
    Tensor a = Tensor::rand_uniform({8, 8}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({8, 8}, rng, -1.0, 1.0);
    Tensor first = matmul(gelu(a), b);
    Tensor second = matmul(gelu(a), b);
    for (std::size_t i = 0; i < first.size(); ++i)
        CHECK(first.data()[i] == second.data()[i]);
}

TEST_CASE("parameter store enforces unique names and tracks order") {
    ParameterStore store;
    RandomSource rng(10);
    store.create_randn("w1", {2, 2}, rng, 0.1);
    store.create("b1", {2});
    CHECK_THROWS_AS(store.create("w1", {1}), ConfigError);
    CHECK(store.items()[0].name == "w1");
    CHECK(store.items()[1].name == "b1");
    CHECK(store.total_scalars() == 6);
    CHECK(store.at("b1").requires_grad());
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fusenet/gradcheck.hpp"
#include "fusenet/tensor.hpp"
#include "fusenet/verification.hpp"

using namespace fusenet;

TEST_CASE("grad_check refuses single precision") {
    Rng rng(1);
    auto x = random_tensor<float>(Shape{2, 2}, rng);
    CHECK_THROWS_AS(grad_check<float>([](std::vector<Tensor<float>>& in) { return sum(in[0]); },
                                      {x}),
                    PrecisionError);
}

TEST_CASE("grad_check on sum of squares") {
    Rng rng(2);
    auto x = random_tensor<double>(Shape{3, 4}, rng);
    const double err = grad_check<double>(
        [](std::vector<Tensor<double>>& in) { return sum(mul(in[0], in[0])); }, {x});
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check through a sigmoid matmul chain") {
    Rng rng(3);
    auto a = random_tensor<double>(Shape{3, 4}, rng);
    auto b = random_tensor<double>(Shape{4, 2}, rng);
    const double err = grad_check<double>(
        [](std::vector<Tensor<double>>& in) { return sum(sigmoid(matmul(in[0], in[1]))); },
        {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("inputs that never reach the loss check out at exactly zero") {
    Rng rng(4);
    auto x = random_tensor<double>(Shape{2, 2}, rng);
    Tensor<double> c(Shape{1}, {5.0}, true);
    const double err = grad_check<double>(
        [&c](std::vector<Tensor<double>>&) { return sum(c); }, {x});
    CHECK(err == 0.0);
}

TEST_CASE("a loss with no trainable parameters is rejected") {
    Rng rng(4);
    auto x = random_tensor<double>(Shape{2, 2}, rng);
    Tensor<double> c(Shape{1}, {5.0});
    CHECK_THROWS_AS(grad_check<double>(
                        [&c](std::vector<Tensor<double>>&) { return sum(c); }, {x}),
                    UsageError);
}

TEST_CASE("grad_check rejects non-scalar functions") {
    Rng rng(5);
    auto x = random_tensor<double>(Shape{2, 2}, rng);
    CHECK_THROWS_AS(
        grad_check<double>([](std::vector<Tensor<double>>& in) { return relu(in[0]); }, {x}),
        UsageError);
}

namespace {

// relu with a deliberately broken backward: the gate is inverted. The checker
// must flag it; this guards the checker itself against false negatives.
Tensor<double> bad_relu(const Tensor<double>& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x.values()[i] > 0 ? x.values()[i] : 0.0;
    auto xi = x.impl();
    return detail::make_op_output<double>(
        x.shape(), std::move(out), {x}, [xi](TensorImpl<double>& o) {
            if (double* gx = xi->grad_sink())
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    gx[i] += xi->values[i] > 0 ? 0.0 : o.grad[i]; // wrong side
        });
}

} // namespace

TEST_CASE("grad_check catches a wrong backward") {
    Rng rng(6);
    auto x = random_tensor<double>(Shape{4, 4}, rng);
    for (auto& v : x.values_mut())
        if (std::abs(v) < 1e-2) v += v >= 0 ? 0.5 : -0.5;
    const double err = grad_check<double>(
        [](std::vector<Tensor<double>>& in) { return sum(bad_relu(in[0])); }, {x});
    CHECK(err > 0.5);
}

TEST_CASE("matmul gradient is clean across ten seeds") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        auto a = random_tensor<double>(Shape{3, 4}, rng);
        auto b = random_tensor<double>(Shape{4, 2}, rng);
        auto c = random_tensor<double>(Shape{3, 2}, rng, -1, 1, false);
        const double err = grad_check<double>(
            [&c](std::vector<Tensor<double>>& in) { return sum(mul(matmul(in[0], in[1]), c)); },
            {a, b});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("conv2d gradient is clean across ten seeds") {
    for (std::uint64_t seed = 11; seed <= 20; ++seed) {
        Rng rng(seed);
        auto x = random_tensor<double>(Shape{2, 3, 6, 6}, rng);
        auto w = random_tensor<double>(Shape{4, 3, 3, 3}, rng);
        auto b = random_tensor<double>(Shape{4}, rng);
        auto c = random_tensor<double>(Shape{2, 4, 6, 6}, rng, -1, 1, false);
        const double err = grad_check<double>(
            [&c](std::vector<Tensor<double>>& in) {
                return sum(mul(conv2d(in[0], in[1], in[2], 1, 1), c));
            },
            {x, w, b});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("random_tensor honors range and grad flag") {
    Rng rng(7);
    auto t = random_tensor<double>(Shape{100}, rng, 2.0, 3.0, false);
    CHECK_FALSE(t.requires_grad());
    for (double v : t.values()) {
        CHECK(v >= 2.0);
        CHECK(v < 3.0);
    }
}

TEST_CASE("verification suite passes every entry") {
    const auto entries = run_gradcheck_suite();
    REQUIRE(entries.size() >= 27);
    for (const auto& e : entries) {
        INFO(e.name << " error " << e.error << " tolerance " << e.tolerance << " " << e.note);
        CHECK(e.pass());
    }
}

TEST_CASE("verification suite covers ops blocks and the model") {
    const auto entries = run_gradcheck_suite();
    auto has = [&entries](const std::string& name) {
        for (const auto& e : entries)
            if (e.name == name) return true;
        return false;
    };
    for (const char* name :
         {"conv2d_3x3", "conv2d_grouped", "channel_shuffle", "pool_max", "dropout", "nll_loss",
          "binary_sigmoid_nll", "residual_block", "inception_module", "shuffle_unit_s2",
          "fusion_model"})
        CHECK(has(name));
}

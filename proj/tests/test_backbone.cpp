#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mscg/backbone.hpp"
#include "mscg/gradcheck.hpp"

using namespace mscg;

TEST_CASE("backbone shape contract") {
    CounterRng rng(31);
    auto params = make_backbone<float>(16, rng);
    for (std::int64_t s : {32, 64, 128}) {
        Tensor<float> x({1, 4, s, s});
        rng.fill_uniform(x, 0.0, 1.0);
        auto y = backbone_forward(constant(x), params, Mode::eval);
        CHECK(y->value.shape == Shape{1, 16, s / 16, s / 16});
    }
    CHECK_THROWS_AS(backbone_forward(constant(Tensor<float>({1, 4, 40, 40})), params, Mode::eval),
                    contract_violation);
    CHECK_THROWS_AS(backbone_forward(constant(Tensor<float>({1, 3, 32, 32})), params, Mode::eval),
                    contract_violation);
}

TEST_CASE("backbone maps 512x512 to the 32x32 node grid") {
    CounterRng rng(32);
    auto params = make_backbone<float>(8, rng);
    Tensor<float> x({1, 4, 512, 512});
    auto y = backbone_forward(constant(x), params, Mode::eval);
    CHECK(y->value.shape == Shape{1, 8, 32, 32});
}

TEST_CASE("zero input with zero biases gives zero output") {
    CounterRng rng(33);
    auto params = make_backbone<float>(16, rng);
    Tensor<float> x({2, 4, 32, 32});
    for (auto mode : {Mode::train, Mode::eval}) {
        auto y = backbone_forward(constant(x), params, mode);
        for (auto v : y->value.data) CHECK(v == 0.f);
    }
}

TEST_CASE("nir-rgb weight adaptation") {
    // R slice all 1s, G all 2s, B all 3s
    Tensor<float> w3({2, 3, 3, 3});
    for (std::int64_t o = 0; o < 2; ++o)
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 9; ++i) w3.at((o * 3 + c) * 9 + i) = static_cast<float>(c + 1);
    auto w4 = adapt_rgb_weights_to_nirrgb(w3);
    REQUIRE(w4.shape == Shape{2, 4, 3, 3});
    for (std::int64_t o = 0; o < 2; ++o)
        for (std::int64_t i = 0; i < 9; ++i) {
            CHECK(w4.at((o * 4 + 0) * 9 + i) == 1.f); // NIR copy of R
            CHECK(w4.at((o * 4 + 1) * 9 + i) == 1.f);
            CHECK(w4.at((o * 4 + 2) * 9 + i) == 2.f);
            CHECK(w4.at((o * 4 + 3) * 9 + i) == 3.f);
        }

    // output NIR slice == R slice bit-exact, and the arithmetic identity
    // sum(w4) = sum(w3) + sum(R slice) on random weights
    CounterRng rng(34);
    Tensor<float> r({3, 3, 2, 2});
    rng.fill_uniform(r, -1.0, 1.0);
    auto a = adapt_rgb_weights_to_nirrgb(r);
    double sum3 = 0, sum4 = 0, sumr = 0;
    for (auto v : r.data) sum3 += v;
    for (auto v : a.data) sum4 += v;
    for (std::int64_t o = 0; o < 3; ++o)
        for (std::int64_t i = 0; i < 4; ++i) {
            CHECK(a.at((o * 4 + 0) * 4 + i) == a.at((o * 4 + 1) * 4 + i));
            sumr += r.at((o * 3 + 0) * 4 + i);
        }
    CHECK(sum4 == doctest::Approx(sum3 + sumr).epsilon(1e-6));

    CHECK_THROWS_AS(adapt_rgb_weights_to_nirrgb(Tensor<float>({2, 4, 3, 3})), contract_violation);
}

TEST_CASE("backbone backward matches finite differences") {
    CounterRng rng(35);
    auto params = make_backbone<double>(8, rng);
    Tensor<double> xv({1, 4, 32, 32});
    rng.fill_uniform(xv, -1.0, 1.0);
    auto x = param(xv);

    std::vector<NodePtr<double>> probes = {x, params.blocks[0].w, params.blocks[1].b, params.blocks[2].bn_scale,
                                           params.blocks[4].w};
    GradChecker checker;
    auto res = checker.run(
        probes,
        [&] {
            auto y = backbone_forward(x, params, Mode::train);
            Tensor<double> mix(y->value.shape);
            CounterRng mr(1);
            mr.fill_uniform(mix, -1.0, 1.0);
            return mean_all(mul(y, constant(mix)));
        },
        /*max_coords_per_probe=*/24);
    CHECK(res.max_rel_error < 1e-4);
}

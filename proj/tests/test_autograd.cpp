#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mscg/autograd.hpp"
#include "mscg/gradcheck.hpp"
#include "mscg/rng.hpp"

using namespace mscg;

namespace {

Tensor<float> random_tensor(Shape s, CounterRng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor<float> t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

Tensor<double> random_tensor64(Shape s, CounterRng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor<double> t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

// independent oracle: triple-loop matrix product
Tensor<float> matmul_oracle(const Tensor<float>& a, const Tensor<float>& b) {
    const auto m = a.shape[0], k = a.shape[1], p = b.shape[1];
    Tensor<float> out({m, p});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < p; ++j) {
            float acc = 0.f;
            for (std::int64_t t = 0; t < k; ++t) acc += a.at2(i, t) * b.at2(t, j);
            out.at2(i, j) = acc;
        }
    return out;
}

// independent oracle: direct 6-loop convolution (cross-correlation)
Tensor<float> conv2d_oracle(const Tensor<float>& x, const Tensor<float>& w, std::int64_t stride, std::int64_t pad) {
    const auto B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const auto O = w.shape[0], KH = w.shape[2], KW = w.shape[3];
    const auto HO = (H + 2 * pad - KH) / stride + 1;
    const auto WO = (W + 2 * pad - KW) / stride + 1;
    Tensor<float> out({B, O, HO, WO});
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t ho = 0; ho < HO; ++ho)
                for (std::int64_t wo = 0; wo < WO; ++wo) {
                    float acc = 0.f;
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t kh = 0; kh < KH; ++kh)
                            for (std::int64_t kw = 0; kw < KW; ++kw) {
                                const auto hi = ho * stride - pad + kh;
                                const auto wi = wo * stride - pad + kw;
                                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                                acc += x.at(((n * C + c) * H + hi) * W + wi) * w.at(((o * C + c) * KH + kh) * KW + kw);
                            }
                    out.at(((n * O + o) * HO + ho) * WO + wo) = acc;
                }
    return out;
}

} // namespace

TEST_CASE("matmul basics and loop oracle") {
    auto eye = constant(Tensor<float>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    auto b = constant(Tensor<float>({3, 2}, {1, 2, 3, 4, 5, 6}));
    auto r = matmul(eye, b);
    for (int i = 0; i < 6; ++i) CHECK(r->value.at(i) == b->value.at(i));

    auto one = matmul(constant(Tensor<float>({1, 1}, {2.f})), constant(Tensor<float>({1, 1}, {3.f})));
    CHECK(one->value.item() == 6.f);

    CounterRng rng(1);
    auto a45 = random_tensor({4, 5}, rng);
    auto b53 = random_tensor({5, 3}, rng);
    auto got = matmul(constant(a45), constant(b53));
    auto want = matmul_oracle(a45, b53);
    for (int i = 0; i < 12; ++i) CHECK(std::abs(got->value.at(i) - want.at(i)) < 1e-6);

    CHECK_THROWS_AS(matmul(constant(a45), constant(a45)), contract_violation);
}

TEST_CASE("elementwise basics") {
    auto r = relu(constant(Tensor<float>({3}, {-1, 0, 2})));
    CHECK(r->value.at(0) == 0.f);
    CHECK(r->value.at(1) == 0.f);
    CHECK(r->value.at(2) == 2.f);

    auto s = add(constant(Tensor<float>({2}, {1, 2})), constant(Tensor<float>({2}, {3, 4})));
    CHECK(s->value.at(0) == 4.f);
    CHECK(s->value.at(1) == 6.f);

    CounterRng rng(2);
    auto x = random_tensor({100}, rng, 0.1, 10.0);
    auto roundtrip = exp_(log_(constant(x)));
    for (int i = 0; i < 100; ++i) CHECK(std::abs(roundtrip->value.at(i) - x.at(i)) / x.at(i) < 1e-6);

    CHECK_THROWS_AS(log_(constant(Tensor<float>({1}, {-1.f})), /*floor=*/false), numeric_fault);
    CHECK_THROWS_AS(add(constant(Tensor<float>({2})), constant(Tensor<float>({3}))), contract_violation);
}

TEST_CASE("broadcast add/mul with gradient reduction") {
    auto a = param(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto b = param(Tensor<double>({1, 3}, {10, 20, 30}));
    auto out = mul(a, b);
    CHECK(out->value.at2(1, 2) == 180.0);
    backward(sum_all(out));
    CHECK(b->grad.at(0) == 1.0 + 4.0); // column sums of a
    CHECK(b->grad.at(2) == 3.0 + 6.0);

    auto sc = add(constant(Tensor<double>::scalar(1.0)), constant(Tensor<double>({2, 2}, {1, 2, 3, 4})));
    CHECK(sc->value.at(3) == 5.0);
}

TEST_CASE("reductions") {
    auto s = sum_all(constant(Tensor<float>({3}, {1, 2, 3})));
    CHECK(s->value.item() == 6.f);

    auto t = constant(Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto rows = reduce(t, Reduce::sum, {1});
    CHECK(rows->value.shape == Shape{2});
    CHECK(rows->value.at(0) == 6.f);
    CHECK(rows->value.at(1) == 15.f);

    auto cols = reduce(t, Reduce::mean, {0}, /*keepdims=*/true);
    CHECK(cols->value.shape == Shape{1, 3});
    CHECK(cols->value.at(1) == 3.5f);

    auto mx = reduce(t, Reduce::max, {});
    CHECK(mx->value.item() == 6.f);

    CHECK_THROWS_AS(sum_all(constant(Tensor<float>({0}))), contract_violation);
}

TEST_CASE("conv2d equals oracles") {
    CounterRng rng(3);

    // 1x1 kernel, stride 1: per-pixel linear map over channels == matmul
    auto x = random_tensor({1, 3, 4, 4}, rng);
    auto w = random_tensor({2, 3, 1, 1}, rng);
    auto conv = conv2d(constant(x), constant(w), NodePtr<float>{}, 1, 0);
    Tensor<float> xm({16, 3}); // pixels x channels
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 16; ++i) xm.at2(i, c) = x.at(c * 16 + i);
    Tensor<float> wm({3, 2});
    for (int o = 0; o < 2; ++o)
        for (int c = 0; c < 3; ++c) wm.at2(c, o) = w.at(o * 3 + c);
    auto mm = matmul_oracle(xm, wm);
    for (int o = 0; o < 2; ++o)
        for (int i = 0; i < 16; ++i) CHECK(std::abs(conv->value.at(o * 16 + i) - mm.at2(i, o)) < 1e-6);

    // all-zero weight
    auto zw = conv2d(constant(x), constant(Tensor<float>({2, 3, 3, 3})), NodePtr<float>{}, 1, 1);
    for (auto v : zw->value.data) CHECK(v == 0.f);

    // random case vs 6-loop oracle, with stride and padding
    auto x2 = random_tensor({1, 2, 5, 5}, rng);
    auto w2 = random_tensor({3, 2, 3, 3}, rng);
    for (auto [stride, pad] : {std::pair<int, int>{1, 0}, {1, 1}, {2, 1}}) {
        auto got = conv2d(constant(x2), constant(w2), NodePtr<float>{}, stride, pad);
        auto want = conv2d_oracle(x2, w2, stride, pad);
        REQUIRE(got->value.shape == want.shape);
        for (std::int64_t i = 0; i < want.numel(); ++i) CHECK(std::abs(got->value.at(i) - want.at(i)) < 1e-6);
    }

    // bias
    auto bias = constant(Tensor<float>({2}, {1.f, -1.f}));
    auto withb = conv2d(constant(x), constant(Tensor<float>({2, 3, 1, 1})), bias, 1, 0);
    CHECK(withb->value.at(0) == 1.f);
    CHECK(withb->value.at(16) == -1.f);

    CHECK_THROWS_AS(conv2d(constant(Tensor<float>({1, 2, 2, 2})), constant(Tensor<float>({1, 2, 3, 3})),
                           NodePtr<float>{}, 1, 0),
                    contract_violation);
}

TEST_CASE("adaptive_avg_pool windows") {
    // identity when extents match
    CounterRng rng(4);
    auto x = random_tensor({1, 2, 3, 3}, rng);
    auto id = adaptive_avg_pool(constant(x), 3, 3);
    for (int i = 0; i < 18; ++i) CHECK(id->value.at(i) == x.at(i));

    auto c = adaptive_avg_pool(constant(Tensor<float>::full({1, 1, 4, 4}, 5.f)), 2, 2);
    for (auto v : c->value.data) CHECK(v == doctest::Approx(5.f));

    // 5x5 ramp vs explicit window oracle
    Tensor<float> ramp({1, 1, 5, 5});
    for (int i = 0; i < 25; ++i) ramp.at(i) = static_cast<float>(i);
    auto pooled = adaptive_avg_pool(constant(ramp), 3, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const int hs = i * 5 / 3, he = (i + 1) * 5 % 3 == 0 ? (i + 1) * 5 / 3 : (i + 1) * 5 / 3 + 1;
            const int ws = j * 5 / 3, we = (j + 1) * 5 % 3 == 0 ? (j + 1) * 5 / 3 : (j + 1) * 5 / 3 + 1;
            float acc = 0.f;
            for (int h = hs; h < he; ++h)
                for (int w = ws; w < we; ++w) acc += ramp.at(h * 5 + w);
            acc /= static_cast<float>((he - hs) * (we - ws));
            CHECK(pooled->value.at(i * 3 + j) == doctest::Approx(acc));
        }

    CHECK_THROWS_AS(adaptive_avg_pool(constant(x), 0, 1), contract_violation);
    CHECK_THROWS_AS(adaptive_avg_pool(constant(x), 4, 4), contract_violation);
}

TEST_CASE("upsample_bilinear") {
    auto c = upsample_bilinear(constant(Tensor<float>::full({1, 1, 3, 3}, 3.f)), 6, 6);
    for (auto v : c->value.data) CHECK(v == doctest::Approx(3.f));

    CounterRng rng(5);
    auto x = random_tensor({1, 2, 4, 4}, rng);
    auto id = upsample_bilinear(constant(x), 4, 4);
    for (int i = 0; i < 32; ++i) CHECK(id->value.at(i) == doctest::Approx(x.at(i)));

    // 2x2 -> 4x4 hand-computed (align_corners=false): inner taps at
    // src = (o+0.5)/2 - 0.5 = {-0.25, 0.25, 0.75, 1.25}
    Tensor<float> q({1, 1, 2, 2}, {0.f, 1.f, 2.f, 3.f});
    auto up = upsample_bilinear(constant(q), 4, 4);
    auto ref1d = [](float a, float b, double src) {
        const double f = std::max(0.0, std::min(1.0, src));
        return static_cast<float>(a * (1.0 - f) + b * f);
    };
    const double taps[4] = {-0.25, 0.25, 0.75, 1.25};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            const float top = ref1d(0.f, 1.f, taps[j]);
            const float bot = ref1d(2.f, 3.f, taps[j]);
            const float want = ref1d(top, bot, taps[i]);
            CHECK(up->value.at(i * 4 + j) == doctest::Approx(want).epsilon(1e-6));
        }

    CHECK_THROWS_AS(upsample_bilinear(constant(x), 2, 2), contract_violation);
}

TEST_CASE("rot90 permutation") {
    auto x = constant(Tensor<float>({2, 2}, {1, 2, 3, 4}));
    auto r0 = rot90(x, 0);
    for (int i = 0; i < 4; ++i) CHECK(r0->value.at(i) == x->value.at(i));

    auto r1 = rot90(x, 1);
    CHECK(r1->value.data == std::vector<float>{2, 4, 1, 3});

    auto r4 = rot90(x, 4);
    for (int i = 0; i < 4; ++i) CHECK(r4->value.at(i) == x->value.at(i));

    CounterRng rng(6);
    auto big = random_tensor({2, 3, 4, 4}, rng);
    for (int k = -3; k <= 3; ++k) {
        auto back = rot90(rot90(constant(big), k), -k);
        for (std::int64_t i = 0; i < big.numel(); ++i) CHECK(back->value.at(i) == big.at(i));
    }

    // non-square trailing axes round-trip too
    auto ns = random_tensor({1, 1, 2, 5}, rng);
    auto nsr = rot90(rot90(constant(ns), 1), -1);
    for (std::int64_t i = 0; i < ns.numel(); ++i) CHECK(nsr->value.at(i) == ns.at(i));
}

TEST_CASE("backward basics") {
    auto x = param(Tensor<double>({4}, {1, -2, 3, 0.5}));
    auto root = sum_all(x);
    backward(root);
    for (int i = 0; i < 4; ++i) CHECK(x->grad.at(i) == 1.0);

    auto y = param(Tensor<double>({3}, {1, -2, 3}));
    auto root2 = sum_all(mul(y, y));
    backward(root2);
    for (int i = 0; i < 3; ++i) CHECK(y->grad.at(i) == 2.0 * y->value.at(i));

    // repeated calls accumulate until zeroed
    backward(root2);
    CHECK(y->grad.at(0) == 4.0);
    zero_grads(root2);
    CHECK(y->grad.at(0) == 0.0);

    CHECK_THROWS_AS(backward(x), contract_violation);
}

TEST_CASE("finite differences validate every op family") {
    CounterRng rng(7);
    GradChecker checker;

    auto check = [&](const char* name, const std::vector<NodePtr<double>>& probes,
                     const std::function<NodePtr<double>()>& build) {
        auto res = checker.run(probes, build);
        INFO(std::string(name) << " worst " << res.worst);
        CHECK(res.max_rel_error < 1e-4);
    };

    {
        auto a = param(random_tensor64({3, 4}, rng));
        auto b = param(random_tensor64({4, 2}, rng));
        check("matmul", {a, b}, [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); });
    }
    {
        auto a = param(random_tensor64({2, 3}, rng));
        auto b = param(random_tensor64({1, 3}, rng));
        check("broadcast chain", {a, b}, [&] {
            auto z = mul(add(a, b), sub(a, scale(b, 0.5)));
            return sum_all(div(z, add_scalar(square(b), 1.5)));
        });
    }
    {
        auto a = param(random_tensor64({10}, rng, 0.1, 3.0));
        check("exp/log/sqrt/clamp", {a}, [&] {
            auto z = add(log_(a), exp_(scale(a, -0.7)));
            return sum_all(add(mul(sqrt_(a), clamp(a, 0.3, 2.0)), z));
        });
    }
    {
        auto a = param(random_tensor64({6}, rng));
        check("relu composite", {a}, [&] { return sum_all(mul(relu(a), a)); });
    }
    {
        auto a = param(random_tensor64({2, 3, 4}, rng));
        check("reductions", {a}, [&] {
            auto m = reduce(a, Reduce::mean, {1}, true);
            auto s = reduce(square(a), Reduce::sum, {0, 2});
            return add(sum_all(mul(a, m)), mean_all(s));
        });
    }
    {
        auto a = param(random_tensor64({3, 5}, rng));
        check("max reduction", {a}, [&] { return sum_all(reduce(a, Reduce::max, {1})); });
    }
    {
        auto x = param(random_tensor64({2, 3, 6, 6}, rng));
        auto w = param(random_tensor64({2, 3, 3, 3}, rng, -0.5, 0.5));
        auto b = param(random_tensor64({2}, rng, -0.5, 0.5));
        check("conv2d", {x, w, b}, [&] { return sum_all(square(conv2d(x, w, b, 2, 1))); });
    }
    {
        auto x = param(random_tensor64({1, 2, 5, 5}, rng));
        check("adaptive pool", {x}, [&] { return sum_all(square(adaptive_avg_pool(x, 2, 2))); });
    }
    {
        auto x = param(random_tensor64({1, 2, 3, 3}, rng));
        check("bilinear", {x}, [&] { return sum_all(square(upsample_bilinear(x, 7, 7))); });
    }
    {
        auto x = param(random_tensor64({1, 2, 4, 4}, rng));
        check("rot90+slice+concat", {x}, [&] {
            auto r = rot90(x, 1);
            auto parts = concat0(std::vector<NodePtr<double>>{slice0(r, 0), slice0(r, 0)});
            return sum_all(mul(parts, parts));
        });
    }
    {
        auto x = param(random_tensor64({5, 4}, rng));
        auto g = param(random_tensor64({4}, rng, 0.5, 1.5));
        auto b = param(random_tensor64({4}, rng, -0.5, 0.5));
        Tensor<double> rm({4}), rv = Tensor<double>::full({4}, 1.0);
        // bn output is multiplied by x so the root is not nearly
        // scale-invariant (which would leave only fd roundoff noise)
        check("batchnorm1d train", {x, g, b}, [&] {
            return mean_all(mul(batchnorm1d(x, g, b, rm, rv, 0.1, 1e-5, true), x));
        });
        check("batchnorm1d eval", {x, g, b}, [&] {
            return mean_all(mul(batchnorm1d(x, g, b, rm, rv, 0.1, 1e-5, false), x));
        });
    }
    {
        auto x = param(random_tensor64({2, 3, 4, 4}, rng));
        auto g = param(random_tensor64({3}, rng, 0.5, 1.5));
        auto b = param(random_tensor64({3}, rng, -0.5, 0.5));
        Tensor<double> rm({3}), rv = Tensor<double>::full({3}, 1.0);
        check("batchnorm2d train", {x, g, b}, [&] {
            return mean_all(mul(batchnorm2d(x, g, b, rm, rv, 0.1, 1e-5, true), x));
        });
    }
    {
        auto x = param(random_tensor64({1, 4, 3, 3}, rng));
        check("softmax", {x}, [&] {
            auto y = softmax_channels(x);
            return sum_all(mul(y, log_(y)));
        });
    }
    {
        auto a = param(random_tensor64({4, 4}, rng, 0.1, 2.0));
        check("diag ops", {a}, [&] { return sum_all(square(diag_embed(diag_part(matmul(a, transpose2(a)))))); });
    }
}

TEST_CASE("gradcheck flags a corrupted backward rule") {
    // negative control: an op whose backward rule is deliberately wrong
    auto broken_square = [](const NodePtr<double>& a) {
        return detail::unary_op(
            "broken_square", a, [](double x) { return x * x; }, [](double x, double) { return x; }); // missing 2x
    };
    auto a = param(Tensor<double>({3}, {0.7, -1.2, 1.9}));
    GradChecker checker;
    auto res = checker.run({a}, [&] { return sum_all(broken_square(a)); });
    CHECK(res.max_rel_error > 1e-2);
}

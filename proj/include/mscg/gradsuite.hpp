#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mscg/acw.hpp"
#include "mscg/gradcheck.hpp"
#include "mscg/model.hpp"

namespace mscg {

struct GradSuiteRow {
    std::string name;
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
    bool pass = false;
};

// Finite-difference verification of every differentiable operation family and
// the full composed pipeline, at 64-bit. `selector` filters rows by substring
// ("" runs everything).
inline std::vector<GradSuiteRow> run_gradient_suite(const std::string& selector, std::uint64_t seed,
                                                    double threshold = 1e-4) {
    std::vector<GradSuiteRow> rows;
    GradChecker checker;
    CounterRng rng(seed);

    auto rand64 = [&rng](Shape s, double lo = -1.5, double hi = 1.5) {
        Tensor<double> t(std::move(s));
        rng.fill_uniform(t, lo, hi);
        return t;
    };
    auto add_row = [&](const std::string& name, const std::vector<NodePtr<double>>& probes,
                       const std::function<NodePtr<double>()>& build, std::int64_t max_coords = -1) {
        if (!selector.empty() && name.find(selector) == std::string::npos) return;
        auto res = checker.run(probes, build, max_coords);
        rows.push_back({name, res.max_rel_error, res.checked, res.max_rel_error < threshold});
    };

    {
        auto a = param(rand64({3, 4}));
        auto b = param(rand64({4, 2}));
        add_row("numerics/matmul", {a, b}, [&] { return sum_all(square(matmul(a, b))); });
    }
    {
        auto a = param(rand64({2, 5}));
        auto b = param(rand64({1, 5}, 0.2, 1.8));
        add_row("numerics/elementwise", {a, b}, [&] {
            auto z = mul(add(a, b), sub(relu(a), scale(b, 0.3)));
            return sum_all(add(div(z, add_scalar(square(b), 1.0)), add(exp_(scale(a, -0.5)), log_(b))));
        });
    }
    {
        auto a = param(rand64({2, 3, 4}));
        add_row("numerics/reductions", {a}, [&] {
            auto m = reduce(a, Reduce::mean, {1}, true);
            auto mx = reduce(a, Reduce::max, {2});
            return add(sum_all(mul(a, m)), mean_all(square(mx)));
        });
    }
    {
        auto x = param(rand64({1, 3, 6, 6}));
        auto w = param(rand64({2, 3, 3, 3}, -0.5, 0.5));
        auto b = param(rand64({2}, -0.5, 0.5));
        add_row("numerics/conv2d", {x, w, b}, [&] { return sum_all(square(conv2d(x, w, b, 2, 1))); });
    }
    {
        auto x = param(rand64({1, 2, 5, 5}));
        add_row("numerics/adaptive_pool", {x}, [&] { return sum_all(square(adaptive_avg_pool(x, 3, 3))); });
    }
    {
        auto x = param(rand64({1, 2, 3, 3}));
        add_row("numerics/upsample_bilinear", {x}, [&] { return sum_all(square(upsample_bilinear(x, 6, 6))); });
    }
    {
        auto x = param(rand64({1, 2, 4, 4}));
        add_row("numerics/rot90", {x}, [&] { return sum_all(mul(rot90(x, 1), rot90(x, 3))); });
    }
    {
        auto x = param(rand64({6, 4}));
        auto g = param(rand64({4}, 0.5, 1.5));
        auto b = param(rand64({4}, -0.5, 0.5));
        add_row("numerics/batchnorm", {x, g, b}, [&] {
            Tensor<double> rm({4}), rv = Tensor<double>::full({4}, 1.0);
            return mean_all(mul(batchnorm1d(x, g, b, rm, rv, 0.1, 1e-5, true), x));
        });
    }
    {
        auto x = param(rand64({1, 4, 3, 3}));
        add_row("numerics/softmax", {x}, [&] {
            auto y = softmax_channels(x);
            return sum_all(mul(y, log_(y)));
        });
    }
    {
        auto mu = param(rand64({4, 3}));
        auto ls = param(rand64({4, 3}, -0.8, 0.8));
        add_row("scg/kl_divergence", {mu, ls}, [&] { return kl_divergence(mu, ls); });
    }
    {
        auto z = param(rand64({4, 3}));
        add_row("scg/diagonal_loss", {z}, [&] { return diagonal_loss(relu(matmul(z, transpose2(z)))).first; });
        add_row("scg/normalize_adjacency", {z}, [&] {
            auto ap = relu(matmul(z, transpose2(z)));
            return sum_all(square(normalize_adjacency(ap)));
        });
    }
    {
        CounterRng init(seed + 1);
        auto params = make_scg_params<double>(3, 2, 2, init);
        auto x = param(rand64({1, 3, 4, 4}));
        add_row("scg/pipeline",
                {x, params.conv_mu_w, params.conv_mu_b, params.conv_logsigma_w, params.conv_logsigma_b}, [&] {
                    CounterRng noise(seed + 2);
                    auto bundles = scg_forward(x, params, Mode::train, noise);
                    const auto& b = bundles[0];
                    return add(add(sum_all(square(b.a_hat)), sum_all(square(b.residual))),
                               add(b.kl_loss, b.dl_loss));
                });
    }
    {
        CounterRng init(seed + 3);
        auto params = make_gcn_params<double>(3, 4, 2, init);
        Tensor<double> a = rand64({3, 3}, 0.0, 1.0);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < i; ++j) a.at2(i, j) = a.at2(j, i);
        auto an = constant(a);
        auto xn = constant(rand64({3, 3}));
        add_row("gcn/forward", {params.theta1, params.theta2, params.bn_scale, params.bn_shift},
                [&] { return mean_all(square(gcn_forward(an, xn, params, Mode::train))); });
    }
    {
        CounterRng init(seed + 4);
        auto bb = make_backbone<double>(8, init);
        auto x = param(rand64({1, 4, 32, 32}));
        Tensor<double> mix({1, 8, 2, 2});
        init.fill_uniform(mix, -1.0, 1.0);
        add_row(
            "backbone/forward", {x, bb.blocks[0].w, bb.blocks[2].w, bb.blocks[4].bn_scale},
            [&] { return mean_all(mul(backbone_forward(x, bb, Mode::train), constant(mix))); },
            /*max_coords=*/16);
    }
    {
        CounterRng init(seed + 5);
        auto head = make_head<double>(3, 4, 2, 2, init);
        auto x = param(rand64({1, 3, 4, 4}));
        add_row("multiview/head", {x, head.scg.conv_mu_w, head.gcn.theta1, head.gcn.theta2}, [&] {
            CounterRng noise(seed + 6);
            auto h = head.forward(x, Mode::train, noise);
            return add(mean_all(square(project(h.fused, 8, 8))), add(h.kl, h.dl));
        });
    }
    {
        CounterRng init(seed + 7);
        ClassFrequencyState<double> freq(3);
        Tensor<double> y({1, 3, 2, 2});
        y.at(0) = y.at(1) = 1.0;
        y.at(4 + 2) = 1.0;
        y.at(8 + 3) = 1.0;
        Tensor<double> valid = Tensor<double>::full({1, 1, 2, 2}, 1.0);
        update_frequency(freq, y, valid);
        auto logits = param(rand64({1, 3, 2, 2}));
        auto kl = constant(Tensor<double>::scalar(0.07));
        auto dl = constant(Tensor<double>::scalar(0.01));
        add_row("acw/total", {logits}, [&] {
            return acw_total(y, softmax_channels(logits), freq, kl, dl, valid).total_node;
        });
    }
    {
        // full composed pipeline on a 2-image 32x32 batch
        TrainConfig cfg;
        cfg.seed = seed + 8;
        cfg.feat_dim = 32;
        cfg.hidden_dim = 16;
        cfg.node_grid = 4; // 2x2 grid
        cfg.classes = 7;
        CounterRng init(cfg.seed);
        auto net = make_model<double>(cfg, init);
        Tensor<double> images({2, 4, 32, 32});
        init.fill_uniform(images, 0.0, 1.0);
        Tensor<double> labels({2, 7, 32, 32});
        Tensor<double> valid = Tensor<double>::full({2, 1, 32, 32}, 1.0);
        for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t i = 0; i < 32 * 32; ++i) {
                const auto cls = static_cast<std::int64_t>(init.next_below(7));
                labels.at((n * 7 + cls) * 32 * 32 + i) = 1.0;
            }
        ClassFrequencyState<double> freq(7);
        update_frequency(freq, labels, valid);
        std::vector<NodePtr<double>> probes = {net.backbone.blocks[0].w, net.backbone.blocks[4].w,
                                               net.head.scg.conv_mu_w,  net.head.scg.conv_logsigma_w,
                                               net.head.gcn.theta1,     net.head.gcn.theta2};
        add_row(
            "pipeline/full", probes,
            [&] {
                CounterRng noise(seed + 9);
                auto fwd = net.forward(images, Mode::train, noise);
                auto breakdown = acw_total(labels, softmax_channels(fwd.logits), freq, fwd.kl, fwd.dl, valid);
                return breakdown.total_node;
            },
            /*max_coords=*/6);
    }

    return rows;
}

} // namespace mscg

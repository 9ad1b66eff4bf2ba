#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mscg/autograd.hpp"
#include "mscg/rng.hpp"

namespace mscg {

enum class Mode { train, eval };

template <typename T>
void require_finite(const NodePtr<T>& n, const char* stage) {
    if (!n->value.all_finite()) throw numeric_fault(std::string("non-finite value at stage ") + stage);
}

// Latent-graph construction parameters: two 3x3 convolutions (padding 1)
// mapping the pooled d-channel map to per-node mean and log-stddev, plus the
// node grid. The grid must be square so node maps can rotate.
template <typename T>
struct ScgParams {
    NodePtr<T> conv_mu_w, conv_mu_b;
    NodePtr<T> conv_logsigma_w, conv_logsigma_b;
    std::int64_t grid_h = 0, grid_w = 0;

    std::int64_t node_count() const { return grid_h * grid_w; }
    std::int64_t class_count() const { return conv_mu_w->value.shape[0]; }
    std::int64_t feature_dim() const { return conv_mu_w->value.shape[1]; }
};

template <typename T>
ScgParams<T> make_scg_params(std::int64_t feature_dim, std::int64_t class_count, std::int64_t grid, CounterRng& rng) {
    if (grid <= 0) throw contract_violation("node grid extent must be positive");
    ScgParams<T> p;
    p.grid_h = p.grid_w = grid;
    const double std = std::sqrt(2.0 / static_cast<double>(feature_dim * 9));
    Tensor<T> w({class_count, feature_dim, 3, 3});
    rng.fill_normal(w, 0.0, std);
    p.conv_mu_w = param(w);
    p.conv_mu_b = param(Tensor<T>({class_count}));
    rng.fill_normal(w, 0.0, 0.1 * std);
    p.conv_logsigma_w = param(w);
    // start near-deterministic: large sigma at init makes the sampled A'
    // differ wildly from its zero-noise eval counterpart
    p.conv_logsigma_b = param(Tensor<T>::full({class_count}, T(-3)));
    return p;
}

// Per-item output of the SCG module.
template <typename T>
struct GraphBundle {
    NodePtr<T> a_hat;         // n x n normalized adjacency
    NodePtr<T> node_features; // n x d pooled features X'
    NodePtr<T> residual;      // n x c adaptive residual
    NodePtr<T> kl_loss;       // scalar
    NodePtr<T> dl_loss;       // scalar
    NodePtr<T> gamma;         // scalar, >= 1
    NodePtr<T> a_prime;       // n x n raw similarity, kept for inspection
};

// -(1/2n) * sum(1 + 2*log_sigma - mu^2 - sigma^2); the sum runs over all n*c
// entries and is divided by 2n.
template <typename T>
NodePtr<T> kl_divergence(const NodePtr<T>& mu, const NodePtr<T>& log_sigma) {
    if (mu->value.shape != log_sigma->value.shape) {
        throw contract_violation("kl_divergence shapes differ: " + shape_str(mu->value.shape) + " vs " +
                                 shape_str(log_sigma->value.shape));
    }
    const std::int64_t n = mu->value.shape[0];
    auto sigma = exp_(log_sigma);
    auto term = sub(add_scalar(scale(log_sigma, T(2)), T(1)), add(square(mu), square(sigma)));
    return scale(sum_all(term), T(-0.5) / static_cast<T>(n));
}

// gamma = sqrt(1 + n / (sum_i A'_ii + eps));
// loss  = -(gamma / n^2) * sum_i log(clamp(A'_ii, 0, 1) + eps), eps = 1e-5.
template <typename T>
std::pair<NodePtr<T>, NodePtr<T>> diagonal_loss(const NodePtr<T>& a_prime) {
    const Shape& s = a_prime->value.shape;
    if (s.size() != 2 || s[0] != s[1]) throw contract_violation("diagonal_loss expects a square matrix, got " + shape_str(s));
    const T n = static_cast<T>(s[0]);
    const T eps = static_cast<T>(kEps);
    auto diag = diag_part(a_prime);
    auto trace = sum_all(diag);
    auto gamma = sqrt_(add_scalar(scale(pow_scalar(add_scalar(trace, eps), T(-1)), n), T(1)));
    auto logs = sum_all(log_(add_scalar(clamp(diag, T(0), T(1)), eps)));
    auto loss = mul(scale(gamma, T(-1) / (n * n)), logs);
    return {loss, gamma};
}

// A_hat = D^{-1/2} (A* + I) D^{-1/2} with D_ii = sum_j (A* + I)_ij.
template <typename T>
NodePtr<T> normalize_adjacency(const NodePtr<T>& a_star) {
    const Shape& s = a_star->value.shape;
    if (s.size() != 2 || s[0] != s[1]) {
        throw contract_violation("normalize_adjacency expects a square matrix, got " + shape_str(s));
    }
    const std::int64_t n = s[0];
    auto with_loops = add(a_star, constant([&] {
                              Tensor<T> eye({n, n});
                              for (std::int64_t i = 0; i < n; ++i) eye.at2(i, i) = T(1);
                              return eye;
                          }()));
    auto degree = reduce(with_loops, Reduce::sum, {1}, /*keepdims=*/true); // n x 1
    auto dinv = pow_scalar(degree, T(-0.5));
    return mul(mul(with_loops, dinv), reshape(dinv, {1, n}));
}

// SCG pipeline for one batch of feature maps; one GraphBundle per item.
// Train mode draws the reparameterization noise from `rng`; eval uses zero
// noise and is deterministic.
template <typename T>
std::vector<GraphBundle<T>> scg_forward(const NodePtr<T>& x, const ScgParams<T>& params, Mode mode, CounterRng& rng) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw contract_violation("scg_forward expects [b,d,h,w], got " + shape_str(xs));
    const std::int64_t b = xs[0], d = xs[1];
    if (d != params.feature_dim()) {
        throw contract_violation("scg_forward feature dim " + std::to_string(d) + " != params dim " +
                                 std::to_string(params.feature_dim()));
    }
    if (params.grid_h > xs[2] || params.grid_w > xs[3]) {
        throw contract_violation("node grid " + std::to_string(params.grid_h) + "x" + std::to_string(params.grid_w) +
                                 " larger than input map " + shape_str(xs));
    }
    const std::int64_t hp = params.grid_h, wp = params.grid_w;
    const std::int64_t n = hp * wp;
    const std::int64_t c = params.class_count();

    std::vector<GraphBundle<T>> bundles;
    bundles.reserve(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        auto pooled = adaptive_avg_pool(slice0(x, i), hp, wp);
        require_finite(pooled, "scg/pool");
        auto x_nodes = transpose2(reshape(pooled, {d, n}));

        auto mu_map = conv2d(pooled, params.conv_mu_w, params.conv_mu_b, 1, 1);
        auto mu = transpose2(reshape(mu_map, {c, n}));
        auto logs_map = conv2d(pooled, params.conv_logsigma_w, params.conv_logsigma_b, 1, 1);
        auto log_sigma = transpose2(reshape(logs_map, {c, n}));
        require_finite(mu, "scg/mu");
        require_finite(log_sigma, "scg/log_sigma");

        NodePtr<T> z;
        if (mode == Mode::train) {
            Tensor<T> noise({n, c});
            rng.fill_normal(noise);
            z = add(mu, mul(exp_(log_sigma), constant(std::move(noise))));
        } else {
            z = mu;
        }
        require_finite(z, "scg/reparameterize");

        auto a_prime = relu(matmul(z, transpose2(z)));
        require_finite(a_prime, "scg/similarity");

        auto [dl, gamma] = diagonal_loss(a_prime);
        require_finite(gamma, "scg/gamma");
        require_finite(dl, "scg/diagonal_loss");

        auto a_star = add(a_prime, mul(gamma, diag_embed(diag_part(a_prime))));
        auto a_hat = normalize_adjacency(a_star);
        require_finite(a_hat, "scg/normalize");

        auto residual = mul(mul(gamma, mu), add_scalar(neg(log_sigma), T(1)));
        require_finite(residual, "scg/residual");

        auto kl = kl_divergence(mu, log_sigma);
        require_finite(kl, "scg/kl");

        bundles.push_back(GraphBundle<T>{a_hat, x_nodes, residual, kl, dl, gamma, a_prime});
    }
    return bundles;
}

// Two-layer GCN; ReLU and batchnorm on the first layer only.
template <typename T>
struct GcnParams {
    NodePtr<T> theta1; // d x hidden
    NodePtr<T> theta2; // hidden x c
    NodePtr<T> bn_scale, bn_shift;
    Tensor<T> bn_running_mean, bn_running_var;

    std::int64_t hidden_dim() const { return theta1->value.shape[1]; }
};

template <typename T>
GcnParams<T> make_gcn_params(std::int64_t feature_dim, std::int64_t hidden, std::int64_t class_count, CounterRng& rng) {
    GcnParams<T> p;
    Tensor<T> t1({feature_dim, hidden});
    rng.fill_normal(t1, 0.0, std::sqrt(2.0 / static_cast<double>(feature_dim)));
    p.theta1 = param(std::move(t1));
    Tensor<T> t2({hidden, class_count});
    rng.fill_normal(t2, 0.0, std::sqrt(2.0 / static_cast<double>(hidden)));
    p.theta2 = param(std::move(t2));
    p.bn_scale = param(Tensor<T>::full({hidden}, T(1)));
    p.bn_shift = param(Tensor<T>({hidden}));
    p.bn_running_mean = Tensor<T>({hidden});
    p.bn_running_var = Tensor<T>::full({hidden}, T(1));
    return p;
}

template <typename T>
NodePtr<T> gcn_forward(const NodePtr<T>& a_hat, const NodePtr<T>& x_nodes, GcnParams<T>& params, Mode mode) {
    if (a_hat->value.rank() != 2 || x_nodes->value.rank() != 2 || a_hat->value.shape[1] != x_nodes->value.shape[0]) {
        throw contract_violation("gcn_forward shape mismatch: " + shape_str(a_hat->value.shape) + " vs " +
                                 shape_str(x_nodes->value.shape));
    }
    auto z1 = batchnorm1d(relu(matmul(matmul(a_hat, x_nodes), params.theta1)), params.bn_scale, params.bn_shift,
                          params.bn_running_mean, params.bn_running_var, T(0.1), static_cast<T>(kEps),
                          mode == Mode::train);
    return matmul(matmul(a_hat, z1), params.theta2);
}

} // namespace mscg

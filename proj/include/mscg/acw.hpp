#pragma once

#include <cstdint>
#include <vector>

#include "mscg/autograd.hpp"
#include "mscg/tensor.hpp"

namespace mscg {

// Streaming per-class pixel-frequency state: f is the running mean of the
// per-batch frequency vectors seen so far, t counts applied updates.
template <typename T>
struct ClassFrequencyState {
    std::int64_t t = 0;
    Tensor<T> f;

    explicit ClassFrequencyState(std::int64_t class_count = 7) : f(Shape{class_count}) {}
    std::int64_t class_count() const { return f.shape[0]; }
};

// f_t = (f_hat + (t-1) f_{t-1}) / t over valid pixels only. Returns false and
// leaves the state untouched when the batch carries no valid labeled pixels.
template <typename T>
bool update_frequency(ClassFrequencyState<T>& state, const Tensor<T>& labels, const Tensor<T>& valid) {
    const Shape& ls = labels.shape;
    if (ls.size() != 4 || ls[1] != state.class_count()) {
        throw contract_violation("update_frequency labels must be [b,C,h,w], got " + shape_str(ls));
    }
    if (valid.shape != Shape{ls[0], 1, ls[2], ls[3]}) {
        throw contract_violation("update_frequency mask shape " + shape_str(valid.shape) + " does not align with " +
                                 shape_str(ls));
    }
    const std::int64_t B = ls[0], C = ls[1], HW = ls[2] * ls[3];
    std::vector<double> class_sum(static_cast<std::size_t>(C), 0.0);
    double total = 0.0;
    for (std::int64_t n = 0; n < B; ++n) {
        const T* vp = &valid.at(n * HW);
        for (std::int64_t c = 0; c < C; ++c) {
            const T* lp = &labels.at((n * C + c) * HW);
            double acc = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) {
                if (vp[i] != T(0)) acc += static_cast<double>(lp[i]);
            }
            class_sum[static_cast<std::size_t>(c)] += acc;
            total += acc;
        }
    }
    if (total == 0.0) return false;

    const double t_new = static_cast<double>(state.t + 1);
    for (std::int64_t c = 0; c < C; ++c) {
        const double f_hat = class_sum[static_cast<std::size_t>(c)] / total;
        state.f.at(c) = static_cast<T>((f_hat + (t_new - 1.0) * static_cast<double>(state.f.at(c))) / t_new);
    }
    state.t += 1;
    return true;
}

// w_j = median({f_j}) / (f_j + eps), eps = 1e-5.
template <typename T>
Tensor<T> median_weights(const ClassFrequencyState<T>& state) {
    if (state.t < 1) throw contract_violation("median_weights requires at least one frequency update");
    const T med = median(state.f);
    Tensor<T> w(state.f.shape);
    for (std::int64_t c = 0; c < state.class_count(); ++c) w.at(c) = med / (state.f.at(c) + static_cast<T>(kEps));
    return w;
}

// w~_ij = (w_j / sum_j w_j) * (1 + y_ij + y~_ij), broadcast to pixel level.
template <typename T>
NodePtr<T> pixel_weights(const Tensor<T>& w_t, const Tensor<T>& y, const NodePtr<T>& y_tilde) {
    T wsum = T(0);
    for (auto v : w_t.data) wsum += v;
    Tensor<T> norm({w_t.shape[0], 1, 1});
    for (std::int64_t c = 0; c < w_t.shape[0]; ++c) norm.at(c) = w_t.at(c) / wsum;
    auto factor = add_scalar(add(constant(y), y_tilde), T(1));
    return mul(constant(std::move(norm)), factor);
}

// p = e - log((1 - e) / (1 + e)) with e = (y - y~)^2.
template <typename T>
NodePtr<T> pnc(const Tensor<T>& y, const NodePtr<T>& y_tilde) {
    auto e = square(sub(constant(y), y_tilde));
    auto ratio = div(add_scalar(neg(e), T(1)), add_scalar(e, T(1)));
    return sub(e, log_(ratio));
}

// d_j = 2 sum_i y y~ / (sum_i y + sum_i y~ + eps_d) over valid pixels.
template <typename T>
NodePtr<T> dice_coefficients(const Tensor<T>& y, const NodePtr<T>& y_tilde, const Tensor<T>& valid) {
    auto ym = mul(constant(y), constant(valid));
    auto pm = mul(y_tilde, constant(valid));
    auto inter = reduce(mul(ym, pm), Reduce::sum, {0, 2, 3});
    auto denom = add_scalar(add(reduce(ym, Reduce::sum, {0, 2, 3}), reduce(pm, Reduce::sum, {0, 2, 3})),
                            static_cast<T>(kEps));
    return div(scale(inter, T(2)), denom);
}

struct AcwOptions {
    // Eq. 12 mean: include classes absent from both y and y~ (their dice is
    // ~0) or skip them.
    bool skip_absent_classes_in_dice_mean = false;
};

template <typename T>
struct LossBreakdown {
    T acw = T(0), kl = T(0), dl = T(0), total = T(0);
    Tensor<T> dice;
    Tensor<T> weights;
    NodePtr<T> total_node; // differentiable Eq. 13 objective
    bool skipped = false;
};

// L_acw = (1/|Y|) sum_{i in Y} sum_j w~_ij p_ij - log(mean_j d_j);
// total = L_acw + L_kl + L_dl. |Y| counts valid pixels. The state must have
// been updated for this batch before weights are read.
template <typename T>
LossBreakdown<T> acw_total(const Tensor<T>& y, const NodePtr<T>& y_tilde, const ClassFrequencyState<T>& state,
                           const NodePtr<T>& kl, const NodePtr<T>& dl, const Tensor<T>& valid,
                           const AcwOptions& opts = {}) {
    LossBreakdown<T> out;
    double valid_count = 0.0;
    for (auto v : valid.data) {
        if (v != T(0)) valid_count += 1.0;
    }
    if (valid_count == 0.0) {
        out.skipped = true;
        return out;
    }

    out.weights = median_weights(state);
    auto w_pix = pixel_weights(out.weights, y, y_tilde);
    auto p = pnc(y, y_tilde);
    auto weighted = mul(mul(w_pix, p), constant(valid));
    auto pixel_term = scale(sum_all(weighted), T(1) / static_cast<T>(valid_count));

    auto d = dice_coefficients(y, y_tilde, valid);
    NodePtr<T> mean_dice;
    if (opts.skip_absent_classes_in_dice_mean) {
        const std::int64_t C = d->value.shape[0];
        Tensor<T> present({C});
        std::int64_t kept = 0;
        // absent = no mass in either the labels or the prediction
        auto ym = mul(constant(y), constant(valid));
        auto pm = mul(y_tilde, constant(valid));
        auto ysum = reduce(ym, Reduce::sum, {0, 2, 3});
        auto psum = reduce(pm, Reduce::sum, {0, 2, 3});
        for (std::int64_t c = 0; c < C; ++c) {
            if (ysum->value.at(c) != T(0) || psum->value.at(c) != T(0)) {
                present.at(c) = T(1);
                ++kept;
            }
        }
        if (kept == 0) kept = 1;
        mean_dice = scale(sum_all(mul(d, constant(std::move(present)))), T(1) / static_cast<T>(kept));
    } else {
        mean_dice = mean_all(d);
    }
    auto dice_term = neg(log_(clamp(mean_dice, static_cast<T>(kLogFloor), std::numeric_limits<T>::max()),
                              /*floor=*/false));

    auto acw = add(pixel_term, dice_term);
    out.total_node = add(add(acw, kl), dl);
    out.acw = acw->value.item();
    out.kl = kl->value.item();
    out.dl = dl->value.item();
    out.total = out.total_node->value.item();
    out.dice = d->value;
    return out;
}

// Reference objectives for the ablation harness.

// Soft dice loss: 1 - mean_j d_j.
template <typename T>
NodePtr<T> dice_loss(const Tensor<T>& y, const NodePtr<T>& y_tilde, const Tensor<T>& valid) {
    return add_scalar(neg(mean_all(dice_coefficients(y, y_tilde, valid))), T(1));
}

// Masked multi-hot cross-entropy: -(1/|Y|) sum_{i in Y} sum_j y log y~.
template <typename T>
NodePtr<T> cross_entropy_loss(const Tensor<T>& y, const NodePtr<T>& y_tilde, const Tensor<T>& valid) {
    double valid_count = 0.0;
    for (auto v : valid.data) {
        if (v != T(0)) valid_count += 1.0;
    }
    if (valid_count == 0.0) valid_count = 1.0;
    auto ce = mul(mul(constant(y), log_(y_tilde)), constant(valid));
    return scale(sum_all(ce), T(-1) / static_cast<T>(valid_count));
}

} // namespace mscg

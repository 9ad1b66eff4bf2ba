#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mscg/scg.hpp"

namespace mscg {

// The rotated feature-map views the head runs on. Default turn set is
// {0, 1, 2} quarter turns; tests may build degenerate sets.
template <typename T>
struct ViewBundle {
    std::vector<std::int64_t> turns;
    std::vector<NodePtr<T>> views;
};

template <typename T>
ViewBundle<T> augment_views(const NodePtr<T>& x, std::vector<std::int64_t> turns = {0, 1, 2}) {
    const Shape& s = x->value.shape;
    if (s.size() != 4) throw contract_violation("augment_views expects [b,d,h,w], got " + shape_str(s));
    if (s[2] != s[3]) throw contract_violation("augment_views needs a square spatial map, got " + shape_str(s));
    ViewBundle<T> out;
    out.turns = std::move(turns);
    out.views.reserve(out.turns.size());
    for (auto t : out.turns) out.views.push_back(rot90(x, t));
    return out;
}

// One view's head output: the per-item n x c node predictions (already
// residual + GCN output) plus the view's rotation and an optional weight
// used by equivariance tests.
template <typename T>
struct ViewNodeOutputs {
    std::int64_t quarter_turns = 0;
    std::vector<NodePtr<T>> per_item;
    T weight = T(1);
};

// Reshape each view's node predictions onto its h' x w' grid, rotate back by
// the inverse of the view rotation, and add element-wise (view order fixed).
template <typename T>
NodePtr<T> fuse(const std::vector<ViewNodeOutputs<T>>& views) {
    if (views.empty()) throw contract_violation("fuse needs at least one view");
    const std::size_t batch = views[0].per_item.size();
    const Shape& nc = views[0].per_item[0]->value.shape;
    if (nc.size() != 2) throw contract_violation("fuse expects n x c node tensors, got " + shape_str(nc));
    const std::int64_t n = nc[0], c = nc[1];
    const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) {
        throw contract_violation("fuse needs a perfect-square node count, got n = " + std::to_string(n));
    }
    for (const auto& v : views) {
        if (v.per_item.size() != batch) throw contract_violation("fuse views disagree on batch size");
        for (const auto& item : v.per_item) {
            if (item->value.shape != nc) {
                throw contract_violation("fuse view shape mismatch: " + shape_str(item->value.shape) + " vs " +
                                         shape_str(nc));
            }
        }
    }

    std::vector<NodePtr<T>> fused_items;
    fused_items.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        NodePtr<T> acc;
        for (const auto& v : views) {
            // n x c -> c x n -> 1 x c x h' x w', then reverse the view rotation
            auto grid = reshape(transpose2(v.per_item[i]), {1, c, side, side});
            auto back = rot90(grid, -v.quarter_turns);
            if (v.weight != T(1)) back = scale(back, v.weight);
            acc = acc ? add(acc, back) : back;
        }
        fused_items.push_back(acc);
    }
    return batch == 1 ? fused_items[0] : concat0(fused_items);
}

// Bilinear projection of the fused grid back to image resolution; the
// outputs are raw class scores.
template <typename T>
NodePtr<T> project(const NodePtr<T>& fused, std::int64_t out_h, std::int64_t out_w) {
    return upsample_bilinear(fused, out_h, out_w);
}

template <typename T>
struct HeadOutput {
    NodePtr<T> fused; // b x c x h' x w'
    NodePtr<T> kl;    // batch-mean KL, summed over views
    NodePtr<T> dl;    // batch-mean diagonal loss, summed over views
};

// Full multi-view head: shared SCG and GCN parameters applied to each rotated
// view, fused by reversed rotation and element-wise addition.
template <typename T>
struct MultiViewHead {
    ScgParams<T> scg;
    GcnParams<T> gcn;
    std::vector<std::int64_t> view_turns = {0, 1, 2};
    std::vector<T> view_weights; // empty = all ones; sized like view_turns otherwise

    HeadOutput<T> forward(const NodePtr<T>& features, Mode mode, CounterRng& rng) {
        auto bundle = augment_views(features, view_turns);
        const std::int64_t b = features->value.shape[0];

        std::vector<ViewNodeOutputs<T>> outputs;
        outputs.reserve(bundle.views.size());
        NodePtr<T> kl, dl;
        for (std::size_t v = 0; v < bundle.views.size(); ++v) {
            auto graphs = scg_forward(bundle.views[v], scg, mode, rng);
            ViewNodeOutputs<T> vo;
            vo.quarter_turns = bundle.turns[v];
            if (!view_weights.empty()) vo.weight = view_weights[v];
            NodePtr<T> kl_view, dl_view;
            for (std::int64_t i = 0; i < b; ++i) {
                auto z2 = gcn_forward(graphs[static_cast<std::size_t>(i)].a_hat,
                                      graphs[static_cast<std::size_t>(i)].node_features, gcn, mode);
                vo.per_item.push_back(add(graphs[static_cast<std::size_t>(i)].residual, z2));
                kl_view = kl_view ? add(kl_view, graphs[static_cast<std::size_t>(i)].kl_loss)
                                  : graphs[static_cast<std::size_t>(i)].kl_loss;
                dl_view = dl_view ? add(dl_view, graphs[static_cast<std::size_t>(i)].dl_loss)
                                  : graphs[static_cast<std::size_t>(i)].dl_loss;
            }
            kl_view = scale(kl_view, T(1) / static_cast<T>(b));
            dl_view = scale(dl_view, T(1) / static_cast<T>(b));
            kl = kl ? add(kl, kl_view) : kl_view;
            dl = dl ? add(dl, dl_view) : dl_view;
            outputs.push_back(std::move(vo));
        }
        return HeadOutput<T>{fuse(outputs), kl, dl};
    }

    // Per-view fused contributions (for the equivariance property test).
    std::vector<NodePtr<T>> per_view_contributions(const NodePtr<T>& features, Mode mode, CounterRng& rng) {
        auto bundle = augment_views(features, view_turns);
        const std::int64_t b = features->value.shape[0];
        std::vector<NodePtr<T>> result;
        for (std::size_t v = 0; v < bundle.views.size(); ++v) {
            auto graphs = scg_forward(bundle.views[v], scg, mode, rng);
            ViewNodeOutputs<T> vo;
            vo.quarter_turns = bundle.turns[v];
            for (std::int64_t i = 0; i < b; ++i) {
                auto z2 = gcn_forward(graphs[static_cast<std::size_t>(i)].a_hat,
                                      graphs[static_cast<std::size_t>(i)].node_features, gcn, mode);
                vo.per_item.push_back(add(graphs[static_cast<std::size_t>(i)].residual, z2));
            }
            result.push_back(fuse(std::vector<ViewNodeOutputs<T>>{vo}));
        }
        return result;
    }
};

template <typename T>
MultiViewHead<T> make_head(std::int64_t feature_dim, std::int64_t hidden, std::int64_t class_count, std::int64_t grid,
                           CounterRng& rng) {
    MultiViewHead<T> head;
    head.scg = make_scg_params<T>(feature_dim, class_count, grid, rng);
    head.gcn = make_gcn_params<T>(feature_dim, hidden, class_count, rng);
    return head;
}

} // namespace mscg

#pragma once

#include <string>
#include <vector>

#include "mscg/backbone.hpp"
#include "mscg/config.hpp"
#include "mscg/multiview.hpp"
#include "mscg/optim.hpp"

namespace mscg {

// Full network: backbone -> rotated views -> SCG-GCN head -> fusion ->
// projection back to image resolution.
template <typename T>
struct MscgNet {
    BackboneParams<T> backbone;
    MultiViewHead<T> head;

    struct Output {
        NodePtr<T> logits; // b x C x h x w
        NodePtr<T> kl, dl;
    };

    Output forward(const Tensor<T>& images, Mode mode, CounterRng& rng) {
        auto x = constant(images);
        auto features = backbone_forward(x, backbone, mode);
        auto h = head.forward(features, mode, rng);
        auto logits = project(h.fused, images.shape[2], images.shape[3]);
        return Output{logits, h.kl, h.dl};
    }

    std::vector<NamedParam<T>> named_params() {
        std::vector<NamedParam<T>> out;
        for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
            auto& blk = backbone.blocks[i];
            const std::string base = "backbone.block" + std::to_string(i);
            out.push_back({base + ".w", blk.w, ParamKind::weight});
            out.push_back({base + ".b", blk.b, ParamKind::bias});
            out.push_back({base + ".bn_scale", blk.bn_scale, ParamKind::bn_scale});
            out.push_back({base + ".bn_shift", blk.bn_shift, ParamKind::bn_shift});
        }
        out.push_back({"scg.mu.w", head.scg.conv_mu_w, ParamKind::weight});
        out.push_back({"scg.mu.b", head.scg.conv_mu_b, ParamKind::bias});
        out.push_back({"scg.logsigma.w", head.scg.conv_logsigma_w, ParamKind::weight});
        out.push_back({"scg.logsigma.b", head.scg.conv_logsigma_b, ParamKind::bias});
        out.push_back({"gcn.theta1", head.gcn.theta1, ParamKind::weight});
        out.push_back({"gcn.theta2", head.gcn.theta2, ParamKind::weight});
        out.push_back({"gcn.bn_scale", head.gcn.bn_scale, ParamKind::bn_scale});
        out.push_back({"gcn.bn_shift", head.gcn.bn_shift, ParamKind::bn_shift});
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
            auto& blk = backbone.blocks[i];
            const std::string base = "backbone.block" + std::to_string(i);
            out.emplace_back(base + ".bn_mean", &blk.bn_mean);
            out.emplace_back(base + ".bn_var", &blk.bn_var);
        }
        out.emplace_back("gcn.bn_mean", &head.gcn.bn_running_mean);
        out.emplace_back("gcn.bn_var", &head.gcn.bn_running_var);
        return out;
    }

    void zero_grads() {
        for (auto& p : named_params()) p.node->grad.fill(T(0));
    }
};

template <typename T>
MscgNet<T> make_model(const TrainConfig& cfg, CounterRng& rng) {
    MscgNet<T> net;
    net.backbone = make_backbone<T>(cfg.feat_dim, rng);
    net.head = make_head<T>(cfg.feat_dim, cfg.hidden_dim, cfg.classes, cfg.grid_side(), rng);
    if (!cfg.multiview) net.head.view_turns = {0};
    return net;
}

} // namespace mscg

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mscg/autograd.hpp"

namespace mscg {

// Central finite differences against the analytic backward pass, at 64-bit.
// `build` must construct a fresh scalar graph from the current values of
// `probes`; it is re-evaluated with single coordinates perturbed in place.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
    std::string worst; // "probe[i]"
};

class GradChecker {
  public:
    explicit GradChecker(double step = 1e-5, double mask_eps = 1e-8) : step_(step), mask_eps_(mask_eps) {}

    GradCheckResult run(const std::vector<NodePtr<double>>& probes,
                        const std::function<NodePtr<double>()>& build,
                        std::int64_t max_coords_per_probe = -1) const {
        GradCheckResult res;
        auto root = build();
        zero_grads(root);
        backward(root);
        std::vector<Tensor<double>> analytic;
        analytic.reserve(probes.size());
        for (const auto& p : probes) analytic.push_back(p->grad);

        for (std::size_t pi = 0; pi < probes.size(); ++pi) {
            auto& p = probes[pi];
            const std::int64_t n = p->value.numel();
            std::int64_t stride = 1;
            if (max_coords_per_probe > 0 && n > max_coords_per_probe) stride = n / max_coords_per_probe;
            for (std::int64_t i = 0; i < n; i += stride) {
                const double saved = p->value.at(i);
                p->value.at(i) = saved + step_;
                const double fp = build()->value.item();
                p->value.at(i) = saved - step_;
                const double fm = build()->value.item();
                p->value.at(i) = saved;
                const double numeric = (fp - fm) / (2.0 * step_);
                const double a = analytic[pi].at(i);
                const double denom = std::abs(a) + std::abs(numeric);
                ++res.checked;
                if (denom < mask_eps_) continue;
                const double rel = std::abs(a - numeric) / denom;
                if (rel > res.max_rel_error) {
                    res.max_rel_error = rel;
                    res.worst = "probe" + std::to_string(pi) + "[" + std::to_string(i) + "]";
                }
            }
        }
        return res;
    }

  private:
    double step_;
    double mask_eps_;
};

} // namespace mscg

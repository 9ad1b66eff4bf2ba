#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mscg/tensor.hpp"

namespace mscg {

// Per-class confusion counters under the overlapping-annotation rule: an
// argmax prediction matching any of a pixel's labels counts as correct for
// that label and charges no false negatives elsewhere.
struct ConfusionState {
    std::vector<std::int64_t> tp, fp, fn;
    std::int64_t num_classes = 0;
    bool include_background_in_miou = true;
    // Open conventions, flag-gated: how to charge FN on a multi-label miss,
    // and whether 0/0 classes count as zero instead of leaving the mean.
    bool fn_one_per_label = true;
    bool undefined_iou_as_zero = false;

    explicit ConfusionState(std::int64_t classes = 7)
        : tp(static_cast<std::size_t>(classes), 0),
          fp(static_cast<std::size_t>(classes), 0),
          fn(static_cast<std::size_t>(classes), 0),
          num_classes(classes) {}

    std::int64_t total() const {
        std::int64_t s = 0;
        for (std::size_t c = 0; c < tp.size(); ++c) s += tp[c] + fp[c];
        return s;
    }

    void merge(const ConfusionState& other) {
        if (other.num_classes != num_classes) throw contract_violation("confusion merge class count mismatch");
        for (std::size_t c = 0; c < tp.size(); ++c) {
            tp[c] += other.tp[c];
            fp[c] += other.fp[c];
            fn[c] += other.fn[c];
        }
    }
};

// Argmax over class scores per valid pixel; ties break to the lowest index.
template <typename T>
void accumulate(ConfusionState& state, const Tensor<T>& pred_logits, const Tensor<T>& labels,
                const Tensor<T>& valid) {
    const Shape& s = pred_logits.shape;
    if (s.size() != 4 || s[1] != state.num_classes || labels.shape != s) {
        throw contract_violation("accumulate expects aligned [b,C,h,w] logits/labels, got " + shape_str(s) + " and " +
                                 shape_str(labels.shape));
    }
    if (valid.shape != Shape{s[0], 1, s[2], s[3]}) {
        throw contract_violation("accumulate mask shape " + shape_str(valid.shape) + " does not align");
    }
    const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    for (std::int64_t n = 0; n < B; ++n) {
        const T* vp = &valid.at(n * HW);
        const T* lp = &pred_logits.at(n * C * HW);
        const T* yp = &labels.at(n * C * HW);
        for (std::int64_t i = 0; i < HW; ++i) {
            if (vp[i] == T(0)) continue;
            std::int64_t k = 0;
            T best = lp[i];
            for (std::int64_t c = 1; c < C; ++c) {
                const T v = lp[c * HW + i];
                if (v > best) {
                    best = v;
                    k = c;
                }
            }
            if (yp[k * HW + i] != T(0)) {
                state.tp[static_cast<std::size_t>(k)] += 1;
            } else {
                state.fp[static_cast<std::size_t>(k)] += 1;
                for (std::int64_t c = 0; c < C; ++c) {
                    if (yp[c * HW + i] != T(0)) {
                        state.fn[static_cast<std::size_t>(c)] += 1;
                        if (!state.fn_one_per_label) break;
                    }
                }
            }
        }
    }
}

struct MiouReport {
    std::vector<double> iou; // NaN where undefined (0/0)
    double miou = 0.0;       // over all classes (minus background when flagged off)
    double miou_star = 0.0;  // always excludes the background class
};

inline MiouReport miou(const ConfusionState& state) {
    if (state.total() == 0) throw contract_violation("miou on an empty confusion state");
    MiouReport r;
    r.iou.resize(static_cast<std::size_t>(state.num_classes), std::nan(""));
    auto mean_over = [&](std::int64_t first) {
        double sum = 0.0;
        int counted = 0;
        for (std::int64_t c = first; c < state.num_classes; ++c) {
            const auto cs = static_cast<std::size_t>(c);
            const std::int64_t denom = state.tp[cs] + state.fp[cs] + state.fn[cs];
            if (denom == 0) {
                if (state.undefined_iou_as_zero) {
                    ++counted; // contributes zero
                }
                continue;
            }
            sum += static_cast<double>(state.tp[cs]) / static_cast<double>(denom);
            ++counted;
        }
        return counted ? sum / counted : 0.0;
    };
    for (std::int64_t c = 0; c < state.num_classes; ++c) {
        const auto cs = static_cast<std::size_t>(c);
        const std::int64_t denom = state.tp[cs] + state.fp[cs] + state.fn[cs];
        if (denom > 0) r.iou[cs] = static_cast<double>(state.tp[cs]) / static_cast<double>(denom);
    }
    r.miou = mean_over(state.include_background_in_miou ? 0 : 1);
    r.miou_star = mean_over(1);
    return r;
}

// CSV: one row per class, then mIoU / mIoU* footer rows.
inline void write_report_csv(const ConfusionState& state, const MiouReport& report,
                             const std::vector<std::string>& names, std::ostream& os) {
    os << "class,tp,fp,fn,iou\n";
    for (std::int64_t c = 0; c < state.num_classes; ++c) {
        const auto cs = static_cast<std::size_t>(c);
        const std::string name = cs < names.size() ? names[cs] : ("class_" + std::to_string(c));
        os << name << ',' << state.tp[cs] << ',' << state.fp[cs] << ',' << state.fn[cs] << ',';
        if (std::isnan(report.iou[cs])) {
            os << "undefined";
        } else {
            os << report.iou[cs];
        }
        os << '\n';
    }
    os << "mIoU,,,," << report.miou << '\n';
    os << "mIoU*,,,," << report.miou_star << '\n';
}

} // namespace mscg

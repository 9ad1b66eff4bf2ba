#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mscg/common.hpp"
#include "mscg/tensor.hpp"

namespace mscg {

// Node of the reverse-mode differentiation graph: a value, matching gradient
// storage, parent links, and the backward rule that pulls this node's grad
// into its parents.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_step;
    const char* op = "leaf";
    bool requires_grad = false;

    explicit Node(Tensor<T> v) : value(std::move(v)), grad(value.shape) {}
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    n->op = "const";
    return n;
}

template <typename T>
NodePtr<T> param(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    n->op = "param";
    n->requires_grad = true;
    return n;
}

namespace detail {

template <typename T>
NodePtr<T> make_result(Tensor<T> v, std::vector<NodePtr<T>> parents, const char* op) {
    auto n = std::make_shared<Node<T>>(std::move(v));
    n->op = op;
    n->parents = std::move(parents);
    for (const auto& p : n->parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    return n;
}

// Strides of `in` right-aligned against `out`, 0 on broadcast axes.
inline Shape aligned_strides(const Shape& in, const Shape& out) {
    const Shape st = row_strides(in);
    Shape r(out.size(), 0);
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        r[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    }
    return r;
}

// Row-major walk of `full`; fn(linear index, offset into a, offset into b)
// where a/b follow the given aligned strides.
template <typename Fn>
void visit2(const Shape& full, const Shape& sa, const Shape& sb, Fn&& fn) {
    const std::int64_t total = shape_numel(full);
    const std::size_t r = full.size();
    if (r == 0) {
        fn(std::int64_t(0), std::int64_t(0), std::int64_t(0));
        return;
    }
    Shape cnt(r, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t t = 0; t < total; ++t) {
        fn(t, ia, ib);
        for (std::int64_t ax = static_cast<std::int64_t>(r) - 1; ax >= 0; --ax) {
            const auto axs = static_cast<std::size_t>(ax);
            ia += sa[axs];
            ib += sb[axs];
            if (++cnt[axs] < full[axs]) break;
            cnt[axs] = 0;
            ia -= sa[axs] * full[axs];
            ib -= sb[axs] * full[axs];
        }
    }
}

template <typename T, typename FwdFn, typename BwdFn>
NodePtr<T> binary_op(const char* name, const NodePtr<T>& a, const NodePtr<T>& b, FwdFn f, BwdFn df) {
    // df(av, bv, g, &ga, &gb) adds the two partials.
    const Shape out_shape = broadcast_shape(a->value.shape, b->value.shape);
    Tensor<T> out(out_shape);
    const Shape sa = aligned_strides(a->value.shape, out_shape);
    const Shape sb = aligned_strides(b->value.shape, out_shape);
    if (a->value.shape == out_shape && b->value.shape == out_shape) {
        const std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) out.at(i) = f(a->value.at(i), b->value.at(i));
    } else {
        visit2(out_shape, sa, sb,
               [&](std::int64_t io, std::int64_t ia, std::int64_t ib) { out.at(io) = f(a->value.at(ia), b->value.at(ib)); });
    }
    auto n = make_result(std::move(out), {a, b}, name);
    if (n->requires_grad) {
        n->backward_step = [a, b, sa, sb, df](Node<T>& self) {
            const bool ga = a->requires_grad;
            const bool gb = b->requires_grad;
            visit2(self.value.shape, sa, sb, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                T da = T(0), db = T(0);
                df(a->value.at(ia), b->value.at(ib), self.grad.at(io), da, db);
                if (ga) a->grad.at(ia) += da;
                if (gb) b->grad.at(ib) += db;
            });
        };
    }
    return n;
}

template <typename T, typename FwdFn, typename BwdFn>
NodePtr<T> unary_op(const char* name, const NodePtr<T>& a, FwdFn f, BwdFn df) {
    // df(x, y) is d out / d x at that element.
    const std::int64_t count = a->value.numel();
    Tensor<T> out(a->value.shape);
    for (std::int64_t i = 0; i < count; ++i) out.at(i) = f(a->value.at(i));
    auto n = make_result(std::move(out), {a}, name);
    if (n->requires_grad) {
        n->backward_step = [a, df](Node<T>& self) {
            const std::int64_t m = self.value.numel();
            for (std::int64_t i = 0; i < m; ++i) {
                a->grad.at(i) += df(a->value.at(i), self.value.at(i)) * self.grad.at(i);
            }
        };
    }
    return n;
}

} // namespace detail

// ---- elementwise -----------------------------------------------------------

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
    return detail::binary_op(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& da, T& db) {
            da = g;
            db = g;
        });
}

template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b) {
    return detail::binary_op(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& da, T& db) {
            da = g;
            db = -g;
        });
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
    return detail::binary_op(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& da, T& db) {
            da = g * y;
            db = g * x;
        });
}

template <typename T>
NodePtr<T> div(const NodePtr<T>& a, const NodePtr<T>& b) {
    return detail::binary_op(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T g, T& da, T& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

template <typename T>
NodePtr<T> add_scalar(const NodePtr<T>& a, T c) {
    return detail::unary_op(
        "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T c) {
    return detail::unary_op(
        "scale", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
NodePtr<T> neg(const NodePtr<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
NodePtr<T> relu(const NodePtr<T>& a) {
    return detail::unary_op(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
NodePtr<T> exp_(const NodePtr<T>& a) {
    return detail::unary_op(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// log(x + 1e-12) by default; with the floor disabled, nonpositive input faults.
template <typename T>
NodePtr<T> log_(const NodePtr<T>& a, bool floor = true) {
    if (!floor) {
        for (T v : a->value.data) {
            if (!(v > T(0))) throw numeric_fault("log of nonpositive value without floor flag");
        }
        return detail::unary_op(
            "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
    }
    const T eps = static_cast<T>(kLogFloor);
    return detail::unary_op(
        "log", a, [eps](T x) { return std::log(x + eps); }, [eps](T x, T) { return T(1) / (x + eps); });
}

template <typename T>
NodePtr<T> square(const NodePtr<T>& a) {
    return detail::unary_op(
        "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
NodePtr<T> pow_scalar(const NodePtr<T>& a, T p) {
    return detail::unary_op(
        "pow", a, [p](T x) { return std::pow(x, p); }, [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

template <typename T>
NodePtr<T> sqrt_(const NodePtr<T>& a) {
    return pow_scalar(a, T(0.5));
}

template <typename T>
NodePtr<T> clamp(const NodePtr<T>& a, T lo, T hi) {
    return detail::unary_op(
        "clamp", a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---- reductions -------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdims) {
    std::vector<bool> red(in.size(), false);
    for (int ax : axes) {
        if (ax < 0 || static_cast<std::size_t>(ax) >= in.size()) {
            throw contract_violation("reduction axis " + std::to_string(ax) + " out of range for " + shape_str(in));
        }
        red[static_cast<std::size_t>(ax)] = true;
    }
    Shape out;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (red[i]) {
            if (keepdims) out.push_back(1);
        } else {
            out.push_back(in[i]);
        }
    }
    return out;
}

} // namespace detail

enum class Reduce { sum, mean, max };

template <typename T>
NodePtr<T> reduce(const NodePtr<T>& a, Reduce kind, std::vector<int> axes, bool keepdims = false) {
    const Shape& in = a->value.shape;
    if (axes.empty()) {
        axes.resize(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) axes[i] = static_cast<int>(i);
    }
    if (a->value.numel() == 0) throw contract_violation("empty reduction");
    std::int64_t window = 1;
    for (int ax : axes) {
        if (ax < 0 || static_cast<std::size_t>(ax) >= in.size()) {
            throw contract_violation("reduction axis " + std::to_string(ax) + " out of range for " + shape_str(in));
        }
        window *= in[static_cast<std::size_t>(ax)];
    }
    if (window == 0) throw contract_violation("empty reduction");

    const Shape keep = detail::reduced_shape(in, axes, /*keepdims=*/true);
    const Shape out_shape = detail::reduced_shape(in, axes, keepdims);
    const Shape sout = detail::aligned_strides(keep, in);
    const Shape sin = row_strides(in);

    Tensor<T> out(keep);
    std::vector<std::int64_t> winner;
    if (kind == Reduce::max) {
        winner.assign(static_cast<std::size_t>(out.numel()), -1);
        out.fill(std::numeric_limits<T>::lowest());
        detail::visit2(in, sin, sout, [&](std::int64_t, std::int64_t ii, std::int64_t io) {
            if (a->value.at(ii) > out.at(io)) {
                out.at(io) = a->value.at(ii);
                winner[static_cast<std::size_t>(io)] = ii;
            }
        });
    } else {
        detail::visit2(in, sin, sout,
                       [&](std::int64_t, std::int64_t ii, std::int64_t io) { out.at(io) += a->value.at(ii); });
        if (kind == Reduce::mean) {
            const T inv = T(1) / static_cast<T>(window);
            for (auto& v : out.data) v *= inv;
        }
    }
    out.shape = out_shape; // same row-major layout with or without kept axes

    auto n = detail::make_result(std::move(out), {a}, kind == Reduce::sum ? "sum" : (kind == Reduce::mean ? "mean" : "max"));
    if (n->requires_grad) {
        const T inv = kind == Reduce::mean ? T(1) / static_cast<T>(window) : T(1);
        n->backward_step = [a, kind, sin, sout, in, inv, winner = std::move(winner)](Node<T>& self) {
            if (kind == Reduce::max) {
                for (std::size_t io = 0; io < winner.size(); ++io) {
                    a->grad.at(winner[io]) += self.grad.at(static_cast<std::int64_t>(io));
                }
                return;
            }
            detail::visit2(in, sin, sout,
                           [&](std::int64_t, std::int64_t ii, std::int64_t io) { a->grad.at(ii) += inv * self.grad.at(io); });
        };
    }
    return n;
}

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& a) {
    return reduce(a, Reduce::sum, {});
}

template <typename T>
NodePtr<T> mean_all(const NodePtr<T>& a) {
    return reduce(a, Reduce::mean, {});
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
NodePtr<T> reshape(const NodePtr<T>& a, Shape s) {
    Tensor<T> out = a->value.reshaped(std::move(s));
    auto n = detail::make_result(std::move(out), {a}, "reshape");
    if (n->requires_grad) {
        n->backward_step = [a](Node<T>& self) {
            const std::int64_t m = self.value.numel();
            for (std::int64_t i = 0; i < m; ++i) a->grad.at(i) += self.grad.at(i);
        };
    }
    return n;
}

template <typename T>
NodePtr<T> transpose2(const NodePtr<T>& a) {
    if (a->value.rank() != 2) throw contract_violation("transpose expects a 2-D tensor, got " + shape_str(a->value.shape));
    const std::int64_t m = a->value.shape[0], k = a->value.shape[1];
    Tensor<T> out({k, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < k; ++j) out.at2(j, i) = a->value.at2(i, j);
    auto n = detail::make_result(std::move(out), {a}, "transpose");
    if (n->requires_grad) {
        n->backward_step = [a, m, k](Node<T>& self) {
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < k; ++j) a->grad.at2(i, j) += self.grad.at2(j, i);
        };
    }
    return n;
}

// Batch item i as a leading-1 slice.
template <typename T>
NodePtr<T> slice0(const NodePtr<T>& a, std::int64_t i) {
    if (a->value.rank() < 1 || i < 0 || i >= a->value.shape[0]) {
        throw contract_violation("slice0 index " + std::to_string(i) + " out of range for " + shape_str(a->value.shape));
    }
    Shape s = a->value.shape;
    s[0] = 1;
    const std::int64_t stride = shape_numel(s);
    Tensor<T> out(s);
    std::copy(a->value.data.begin() + static_cast<std::ptrdiff_t>(i * stride),
              a->value.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride), out.data.begin());
    auto n = detail::make_result(std::move(out), {a}, "slice0");
    if (n->requires_grad) {
        n->backward_step = [a, i, stride](Node<T>& self) {
            for (std::int64_t j = 0; j < stride; ++j) a->grad.at(i * stride + j) += self.grad.at(j);
        };
    }
    return n;
}

template <typename T>
NodePtr<T> concat0(const std::vector<NodePtr<T>>& parts) {
    if (parts.empty()) throw contract_violation("concat0 of zero tensors");
    Shape s = parts[0]->value.shape;
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        Shape ps = p->value.shape;
        if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1)) {
            throw contract_violation("concat0 shape mismatch: " + shape_str(s) + " vs " + shape_str(ps));
        }
        rows += ps[0];
    }
    s[0] = rows;
    Tensor<T> out(s);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->value.numel();
    }
    auto n = detail::make_result(std::move(out), parts, "concat0");
    if (n->requires_grad) {
        n->backward_step = [parts](Node<T>& self) {
            std::int64_t pos = 0;
            for (const auto& p : parts) {
                const std::int64_t m = p->value.numel();
                if (p->requires_grad) {
                    for (std::int64_t j = 0; j < m; ++j) p->grad.at(j) += self.grad.at(pos + j);
                }
                pos += m;
            }
        };
    }
    return n;
}

// ---- linear algebra ---------------------------------------------------------

template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.shape[1] != b->value.shape[0]) {
        throw contract_violation("matmul shape mismatch: " + shape_str(a->value.shape) + " x " + shape_str(b->value.shape));
    }
    const std::int64_t m = a->value.shape[0], k = a->value.shape[1], p = b->value.shape[1];
    Tensor<T> out({m, p});
    for (std::int64_t i = 0; i < m; ++i) {
        T* orow = &out.at(i * p);
        for (std::int64_t t = 0; t < k; ++t) {
            const T av = a->value.at(i * k + t);
            const T* brow = &b->value.at(t * p);
            for (std::int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
    }
    auto n = detail::make_result(std::move(out), {a, b}, "matmul");
    if (n->requires_grad) {
        n->backward_step = [a, b, m, k, p](Node<T>& self) {
            if (a->requires_grad) { // da = g * b^T
                for (std::int64_t i = 0; i < m; ++i) {
                    const T* grow = &self.grad.at(i * p);
                    for (std::int64_t t = 0; t < k; ++t) {
                        const T* brow = &b->value.at(t * p);
                        T acc = T(0);
                        for (std::int64_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                        a->grad.at(i * k + t) += acc;
                    }
                }
            }
            if (b->requires_grad) { // db = a^T * g
                for (std::int64_t t = 0; t < k; ++t) {
                    T* brow = &b->grad.at(t * p);
                    for (std::int64_t i = 0; i < m; ++i) {
                        const T av = a->value.at(i * k + t);
                        const T* grow = &self.grad.at(i * p);
                        for (std::int64_t j = 0; j < p; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        };
    }
    return n;
}

template <typename T>
NodePtr<T> diag_part(const NodePtr<T>& a) {
    if (a->value.rank() != 2 || a->value.shape[0] != a->value.shape[1]) {
        throw contract_violation("diag_part expects a square matrix, got " + shape_str(a->value.shape));
    }
    const std::int64_t m = a->value.shape[0];
    Tensor<T> out({m});
    for (std::int64_t i = 0; i < m; ++i) out.at(i) = a->value.at2(i, i);
    auto n = detail::make_result(std::move(out), {a}, "diag_part");
    if (n->requires_grad) {
        n->backward_step = [a, m](Node<T>& self) {
            for (std::int64_t i = 0; i < m; ++i) a->grad.at2(i, i) += self.grad.at(i);
        };
    }
    return n;
}

template <typename T>
NodePtr<T> diag_embed(const NodePtr<T>& v) {
    if (v->value.rank() != 1) throw contract_violation("diag_embed expects a vector, got " + shape_str(v->value.shape));
    const std::int64_t m = v->value.shape[0];
    Tensor<T> out({m, m});
    for (std::int64_t i = 0; i < m; ++i) out.at2(i, i) = v->value.at(i);
    auto n = detail::make_result(std::move(out), {v}, "diag_embed");
    if (n->requires_grad) {
        n->backward_step = [v, m](Node<T>& self) {
            for (std::int64_t i = 0; i < m; ++i) v->grad.at(i) += self.grad.at2(i, i);
        };
    }
    return n;
}

// ---- spatial ops ------------------------------------------------------------

// Cross-correlation convention; optional bias of shape (c_out).
template <typename T>
NodePtr<T> conv2d(const NodePtr<T>& x, const NodePtr<T>& w, const NodePtr<T>& bias, std::int64_t stride,
                  std::int64_t padding) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1]) {
        throw contract_violation("conv2d shape mismatch: x " + shape_str(xs) + " w " + shape_str(ws));
    }
    if (stride <= 0 || padding < 0) throw contract_violation("conv2d needs stride > 0 and padding >= 0");
    const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::int64_t O = ws[0], KH = ws[2], KW = ws[3];
    const std::int64_t HO = (H + 2 * padding - KH) / stride + 1;
    const std::int64_t WO = (W + 2 * padding - KW) / stride + 1;
    if (HO <= 0 || WO <= 0) {
        throw contract_violation("conv2d output extent is non-positive for x " + shape_str(xs) + " w " + shape_str(ws));
    }
    if (bias && bias->value.shape != Shape{O}) {
        throw contract_violation("conv2d bias shape " + shape_str(bias->value.shape) + " != [" + std::to_string(O) + "]");
    }

    // For a fixed kw, the output columns whose input column lands in bounds.
    auto col_range = [stride, padding, W, WO](std::int64_t kw, std::int64_t& lo, std::int64_t& hi) {
        lo = 0;
        while (lo < WO && lo * stride - padding + kw < 0) ++lo;
        hi = WO - 1;
        while (hi >= 0 && hi * stride - padding + kw >= W) --hi;
    };

    Tensor<T> out({B, O, HO, WO});
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t o = 0; o < O; ++o) {
            const T bv = bias ? bias->value.at(o) : T(0);
            T* obase = &out.at(((n * O + o) * HO) * WO);
            for (std::int64_t i = 0; i < HO * WO; ++i) obase[i] = bv;
            for (std::int64_t c = 0; c < C; ++c) {
                for (std::int64_t kh = 0; kh < KH; ++kh) {
                    for (std::int64_t kw = 0; kw < KW; ++kw) {
                        const T wv = w->value.at(((o * C + c) * KH + kh) * KW + kw);
                        std::int64_t lo, hi;
                        col_range(kw, lo, hi);
                        for (std::int64_t ho = 0; ho < HO; ++ho) {
                            const std::int64_t hi_in = ho * stride - padding + kh;
                            if (hi_in < 0 || hi_in >= H) continue;
                            const T* xrow = &x->value.at(((n * C + c) * H + hi_in) * W);
                            T* orow = obase + ho * WO;
                            for (std::int64_t wo = lo; wo <= hi; ++wo) orow[wo] += wv * xrow[wo * stride - padding + kw];
                        }
                    }
                }
            }
        }
    }

    std::vector<NodePtr<T>> parents = {x, w};
    if (bias) parents.push_back(bias);
    auto node = detail::make_result(std::move(out), std::move(parents), "conv2d");
    if (node->requires_grad) {
        node->backward_step = [x, w, bias, stride, padding, B, C, H, W, O, KH, KW, HO, WO, col_range](Node<T>& self) {
            if (bias && bias->requires_grad) {
                for (std::int64_t n = 0; n < B; ++n)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* grow = &self.grad.at(((n * O + o) * HO) * WO);
                        T acc = T(0);
                        for (std::int64_t i = 0; i < HO * WO; ++i) acc += grow[i];
                        bias->grad.at(o) += acc;
                    }
            }
            const bool need_x = x->requires_grad;
            const bool need_w = w->requires_grad;
            if (!need_x && !need_w) return;
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t o = 0; o < O; ++o) {
                    const T* gbase = &self.grad.at(((n * O + o) * HO) * WO);
                    for (std::int64_t c = 0; c < C; ++c) {
                        for (std::int64_t kh = 0; kh < KH; ++kh) {
                            for (std::int64_t kw = 0; kw < KW; ++kw) {
                                const std::int64_t widx = ((o * C + c) * KH + kh) * KW + kw;
                                const T wv = w->value.at(widx);
                                std::int64_t lo, hi;
                                col_range(kw, lo, hi);
                                T wacc = T(0);
                                for (std::int64_t ho = 0; ho < HO; ++ho) {
                                    const std::int64_t hi_in = ho * stride - padding + kh;
                                    if (hi_in < 0 || hi_in >= H) continue;
                                    const std::int64_t xrow = ((n * C + c) * H + hi_in) * W;
                                    const T* grow = gbase + ho * WO;
                                    if (need_x) {
                                        for (std::int64_t wo = lo; wo <= hi; ++wo)
                                            x->grad.at(xrow + wo * stride - padding + kw) += wv * grow[wo];
                                    }
                                    if (need_w) {
                                        const T* xv = &x->value.at(xrow);
                                        for (std::int64_t wo = lo; wo <= hi; ++wo)
                                            wacc += xv[wo * stride - padding + kw] * grow[wo];
                                    }
                                }
                                if (need_w) w->grad.at(widx) += wacc;
                            }
                        }
                    }
                }
            }
        };
    }
    return node;
}

// Window bounds: start = floor(i*in/out), end = ceil((i+1)*in/out).
template <typename T>
NodePtr<T> adaptive_avg_pool(const NodePtr<T>& x, std::int64_t oh, std::int64_t ow) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw contract_violation("adaptive_avg_pool expects [b,c,h,w], got " + shape_str(xs));
    if (oh <= 0 || ow <= 0) throw contract_violation("adaptive_avg_pool target extent must be positive");
    const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (oh > H || ow > W) {
        throw contract_violation("adaptive_avg_pool target " + std::to_string(oh) + "x" + std::to_string(ow) +
                                 " exceeds input " + shape_str(xs));
    }
    auto win = [](std::int64_t i, std::int64_t in, std::int64_t out, std::int64_t& s, std::int64_t& e) {
        s = (i * in) / out;
        e = ((i + 1) * in + out - 1) / out;
    };
    Tensor<T> out({B, C, oh, ow});
    for (std::int64_t nc = 0; nc < B * C; ++nc) {
        const T* xp = &x->value.at(nc * H * W);
        T* op = &out.at(nc * oh * ow);
        for (std::int64_t i = 0; i < oh; ++i) {
            std::int64_t hs, he;
            win(i, H, oh, hs, he);
            for (std::int64_t j = 0; j < ow; ++j) {
                std::int64_t ws, we;
                win(j, W, ow, ws, we);
                T acc = T(0);
                for (std::int64_t h = hs; h < he; ++h)
                    for (std::int64_t u = ws; u < we; ++u) acc += xp[h * W + u];
                op[i * ow + j] = acc / static_cast<T>((he - hs) * (we - ws));
            }
        }
    }
    auto node = detail::make_result(std::move(out), {x}, "adaptive_avg_pool");
    if (node->requires_grad) {
        node->backward_step = [x, oh, ow, B, C, H, W, win](Node<T>& self) {
            for (std::int64_t nc = 0; nc < B * C; ++nc) {
                T* gx = &x->grad.at(nc * H * W);
                const T* go = &self.grad.at(nc * oh * ow);
                for (std::int64_t i = 0; i < oh; ++i) {
                    std::int64_t hs, he;
                    win(i, H, oh, hs, he);
                    for (std::int64_t j = 0; j < ow; ++j) {
                        std::int64_t ws, we;
                        win(j, W, ow, ws, we);
                        const T g = go[i * ow + j] / static_cast<T>((he - hs) * (we - ws));
                        for (std::int64_t h = hs; h < he; ++h)
                            for (std::int64_t u = ws; u < we; ++u) gx[h * W + u] += g;
                    }
                }
            }
        };
    }
    return node;
}

// align_corners=false; out extents must be >= in extents.
template <typename T>
NodePtr<T> upsample_bilinear(const NodePtr<T>& x, std::int64_t oh, std::int64_t ow) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw contract_violation("upsample_bilinear expects [b,c,h,w], got " + shape_str(xs));
    const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (oh < H || ow < W) {
        throw contract_violation("upsample target " + std::to_string(oh) + "x" + std::to_string(ow) +
                                 " smaller than input " + shape_str(xs));
    }
    struct Tap {
        std::int64_t i0, i1;
        T w0, w1;
    };
    auto taps = [](std::int64_t in, std::int64_t out) {
        std::vector<Tap> v(static_cast<std::size_t>(out));
        const double s = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t o = 0; o < out; ++o) {
            const double src = (static_cast<double>(o) + 0.5) * s - 0.5;
            const double f = std::floor(src);
            const double frac = src - f;
            std::int64_t i0 = static_cast<std::int64_t>(f);
            std::int64_t i1 = i0 + 1;
            i0 = std::min(in - 1, std::max<std::int64_t>(0, i0));
            i1 = std::min(in - 1, std::max<std::int64_t>(0, i1));
            v[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(1.0 - frac), static_cast<T>(frac)};
        }
        return v;
    };
    const auto th = taps(H, oh);
    const auto tw = taps(W, ow);
    Tensor<T> out({B, C, oh, ow});
    for (std::int64_t nc = 0; nc < B * C; ++nc) {
        const T* xp = &x->value.at(nc * H * W);
        T* op = &out.at(nc * oh * ow);
        for (std::int64_t i = 0; i < oh; ++i) {
            const Tap& a = th[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < ow; ++j) {
                const Tap& b = tw[static_cast<std::size_t>(j)];
                op[i * ow + j] = a.w0 * (b.w0 * xp[a.i0 * W + b.i0] + b.w1 * xp[a.i0 * W + b.i1]) +
                                 a.w1 * (b.w0 * xp[a.i1 * W + b.i0] + b.w1 * xp[a.i1 * W + b.i1]);
            }
        }
    }
    auto node = detail::make_result(std::move(out), {x}, "upsample_bilinear");
    if (node->requires_grad) {
        node->backward_step = [x, th, tw, oh, ow, B, C, H, W](Node<T>& self) {
            for (std::int64_t nc = 0; nc < B * C; ++nc) {
                T* gx = &x->grad.at(nc * H * W);
                const T* go = &self.grad.at(nc * oh * ow);
                for (std::int64_t i = 0; i < oh; ++i) {
                    const auto& a = th[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < ow; ++j) {
                        const auto& b = tw[static_cast<std::size_t>(j)];
                        const T g = go[i * ow + j];
                        gx[a.i0 * W + b.i0] += a.w0 * b.w0 * g;
                        gx[a.i0 * W + b.i1] += a.w0 * b.w1 * g;
                        gx[a.i1 * W + b.i0] += a.w1 * b.w0 * g;
                        gx[a.i1 * W + b.i1] += a.w1 * b.w1 * g;
                    }
                }
            }
        };
    }
    return node;
}

// Counter-clockwise quarter turns of the trailing two axes. Exact permutation,
// so rot90(rot90(x, k), -k) is the identity bit for bit.
template <typename T>
NodePtr<T> rot90(const NodePtr<T>& x, std::int64_t quarter_turns) {
    const Shape& xs = x->value.shape;
    if (xs.size() < 2) throw contract_violation("rot90 expects rank >= 2, got " + shape_str(xs));
    const std::int64_t k = ((quarter_turns % 4) + 4) % 4;
    const std::int64_t H = xs[xs.size() - 2], W = xs[xs.size() - 1];
    std::int64_t lead = 1;
    for (std::size_t i = 0; i + 2 < xs.size(); ++i) lead *= xs[i];
    Shape os = xs;
    if (k % 2 == 1) {
        os[os.size() - 2] = W;
        os[os.size() - 1] = H;
    }
    const std::int64_t OH = os[os.size() - 2], OW = os[os.size() - 1];
    auto src_of = [k, H, W](std::int64_t r, std::int64_t c) -> std::int64_t {
        switch (k) {
            case 1: return c * W + (W - 1 - r);
            case 2: return (H - 1 - r) * W + (W - 1 - c);
            case 3: return (H - 1 - c) * W + r;
            default: return r * W + c;
        }
    };
    Tensor<T> out(os);
    for (std::int64_t l = 0; l < lead; ++l) {
        const T* xp = &x->value.at(l * H * W);
        T* op = &out.at(l * OH * OW);
        for (std::int64_t r = 0; r < OH; ++r)
            for (std::int64_t c = 0; c < OW; ++c) op[r * OW + c] = xp[src_of(r, c)];
    }
    auto node = detail::make_result(std::move(out), {x}, "rot90");
    if (node->requires_grad) {
        node->backward_step = [x, lead, OH, OW, H, W, src_of](Node<T>& self) {
            for (std::int64_t l = 0; l < lead; ++l) {
                T* gx = &x->grad.at(l * H * W);
                const T* go = &self.grad.at(l * OH * OW);
                for (std::int64_t r = 0; r < OH; ++r)
                    for (std::int64_t c = 0; c < OW; ++c) gx[src_of(r, c)] += go[r * OW + c];
            }
        };
    }
    return node;
}

// ---- normalization & softmax --------------------------------------------------

// Batchnorm over the leading axis of an (n, f) matrix, one statistic per
// feature. Training uses batch statistics and updates the running buffers
// (new = (1-momentum)*old + momentum*batch); eval reads the buffers.
template <typename T>
NodePtr<T> batchnorm1d(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps, bool training) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 2) throw contract_violation("batchnorm1d expects [n,f], got " + shape_str(xs));
    const std::int64_t N = xs[0], F = xs[1];
    if (gamma->value.shape != Shape{F} || beta->value.shape != Shape{F}) {
        throw contract_violation("batchnorm1d scale/shift must have shape [" + std::to_string(F) + "]");
    }
    std::vector<T> mean(static_cast<std::size_t>(F), T(0)), var(static_cast<std::size_t>(F), T(0));
    if (training) {
        for (std::int64_t i = 0; i < N; ++i)
            for (std::int64_t f = 0; f < F; ++f) mean[static_cast<std::size_t>(f)] += x->value.at2(i, f);
        for (auto& v : mean) v /= static_cast<T>(N);
        for (std::int64_t i = 0; i < N; ++i)
            for (std::int64_t f = 0; f < F; ++f) {
                const T d = x->value.at2(i, f) - mean[static_cast<std::size_t>(f)];
                var[static_cast<std::size_t>(f)] += d * d;
            }
        for (auto& v : var) v /= static_cast<T>(N);
        for (std::int64_t f = 0; f < F; ++f) {
            running_mean.at(f) = (T(1) - momentum) * running_mean.at(f) + momentum * mean[static_cast<std::size_t>(f)];
            running_var.at(f) = (T(1) - momentum) * running_var.at(f) + momentum * var[static_cast<std::size_t>(f)];
        }
    } else {
        for (std::int64_t f = 0; f < F; ++f) {
            mean[static_cast<std::size_t>(f)] = running_mean.at(f);
            var[static_cast<std::size_t>(f)] = running_var.at(f);
        }
    }
    std::vector<T> invstd(static_cast<std::size_t>(F));
    for (std::int64_t f = 0; f < F; ++f) invstd[static_cast<std::size_t>(f)] = T(1) / std::sqrt(var[static_cast<std::size_t>(f)] + eps);

    Tensor<T> out(xs);
    Tensor<T> xhat(xs);
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t f = 0; f < F; ++f) {
            const T xn = (x->value.at2(i, f) - mean[static_cast<std::size_t>(f)]) * invstd[static_cast<std::size_t>(f)];
            xhat.at2(i, f) = xn;
            out.at2(i, f) = xn * gamma->value.at(f) + beta->value.at(f);
        }
    auto node = detail::make_result(std::move(out), {x, gamma, beta}, "batchnorm1d");
    if (node->requires_grad) {
        node->backward_step = [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), N, F,
                               training](Node<T>& self) {
            std::vector<T> sum_dy(static_cast<std::size_t>(F), T(0)), sum_dy_xhat(static_cast<std::size_t>(F), T(0));
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t f = 0; f < F; ++f) {
                    const T dy = self.grad.at2(i, f);
                    sum_dy[static_cast<std::size_t>(f)] += dy;
                    sum_dy_xhat[static_cast<std::size_t>(f)] += dy * xhat.at2(i, f);
                }
            if (beta->requires_grad)
                for (std::int64_t f = 0; f < F; ++f) beta->grad.at(f) += sum_dy[static_cast<std::size_t>(f)];
            if (gamma->requires_grad)
                for (std::int64_t f = 0; f < F; ++f) gamma->grad.at(f) += sum_dy_xhat[static_cast<std::size_t>(f)];
            if (x->requires_grad) {
                const T n = static_cast<T>(N);
                for (std::int64_t i = 0; i < N; ++i)
                    for (std::int64_t f = 0; f < F; ++f) {
                        const auto fs = static_cast<std::size_t>(f);
                        const T dy = self.grad.at2(i, f);
                        if (training) {
                            x->grad.at2(i, f) += gamma->value.at(f) * invstd[fs] / n *
                                                 (n * dy - sum_dy[fs] - xhat.at2(i, f) * sum_dy_xhat[fs]);
                        } else {
                            x->grad.at2(i, f) += gamma->value.at(f) * invstd[fs] * dy;
                        }
                    }
            }
        };
    }
    return node;
}

// Per-channel batchnorm over (b, c, h, w).
template <typename T>
NodePtr<T> batchnorm2d(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps, bool training) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw contract_violation("batchnorm2d expects [b,c,h,w], got " + shape_str(xs));
    const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::int64_t HW = H * W;
    if (gamma->value.shape != Shape{C} || beta->value.shape != Shape{C}) {
        throw contract_violation("batchnorm2d scale/shift must have shape [" + std::to_string(C) + "]");
    }
    const T m = static_cast<T>(B * HW);
    std::vector<T> mean(static_cast<std::size_t>(C), T(0)), var(static_cast<std::size_t>(C), T(0));
    if (training) {
        for (std::int64_t n = 0; n < B; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xp = &x->value.at(((n * C + c) * HW));
                T acc = T(0);
                for (std::int64_t i = 0; i < HW; ++i) acc += xp[i];
                mean[static_cast<std::size_t>(c)] += acc;
            }
        for (auto& v : mean) v /= m;
        for (std::int64_t n = 0; n < B; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xp = &x->value.at(((n * C + c) * HW));
                const T mu = mean[static_cast<std::size_t>(c)];
                T acc = T(0);
                for (std::int64_t i = 0; i < HW; ++i) {
                    const T d = xp[i] - mu;
                    acc += d * d;
                }
                var[static_cast<std::size_t>(c)] += acc;
            }
        for (auto& v : var) v /= m;
        for (std::int64_t c = 0; c < C; ++c) {
            running_mean.at(c) = (T(1) - momentum) * running_mean.at(c) + momentum * mean[static_cast<std::size_t>(c)];
            running_var.at(c) = (T(1) - momentum) * running_var.at(c) + momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean.at(c);
            var[static_cast<std::size_t>(c)] = running_var.at(c);
        }
    }
    std::vector<T> invstd(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

    Tensor<T> out(xs);
    Tensor<T> xhat(xs);
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const auto cs = static_cast<std::size_t>(c);
            const T* xp = &x->value.at(((n * C + c) * HW));
            T* op = &out.at(((n * C + c) * HW));
            T* hp = &xhat.at(((n * C + c) * HW));
            const T mu = mean[cs], is = invstd[cs], g = gamma->value.at(c), b = beta->value.at(c);
            for (std::int64_t i = 0; i < HW; ++i) {
                const T xn = (xp[i] - mu) * is;
                hp[i] = xn;
                op[i] = xn * g + b;
            }
        }
    auto node = detail::make_result(std::move(out), {x, gamma, beta}, "batchnorm2d");
    if (node->requires_grad) {
        node->backward_step = [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), B, C, HW, m,
                               training](Node<T>& self) {
            std::vector<T> sum_dy(static_cast<std::size_t>(C), T(0)), sum_dy_xhat(static_cast<std::size_t>(C), T(0));
            for (std::int64_t n = 0; n < B; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* gp = &self.grad.at(((n * C + c) * HW));
                    const T* hp = &xhat.at(((n * C + c) * HW));
                    T s1 = T(0), s2 = T(0);
                    for (std::int64_t i = 0; i < HW; ++i) {
                        s1 += gp[i];
                        s2 += gp[i] * hp[i];
                    }
                    sum_dy[static_cast<std::size_t>(c)] += s1;
                    sum_dy_xhat[static_cast<std::size_t>(c)] += s2;
                }
            if (beta->requires_grad)
                for (std::int64_t c = 0; c < C; ++c) beta->grad.at(c) += sum_dy[static_cast<std::size_t>(c)];
            if (gamma->requires_grad)
                for (std::int64_t c = 0; c < C; ++c) gamma->grad.at(c) += sum_dy_xhat[static_cast<std::size_t>(c)];
            if (x->requires_grad) {
                for (std::int64_t n = 0; n < B; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const auto cs = static_cast<std::size_t>(c);
                        const T* gp = &self.grad.at(((n * C + c) * HW));
                        const T* hp = &xhat.at(((n * C + c) * HW));
                        T* xg = &x->grad.at(((n * C + c) * HW));
                        const T g = gamma->value.at(c), is = invstd[cs];
                        for (std::int64_t i = 0; i < HW; ++i) {
                            if (training) {
                                xg[i] += g * is / m * (m * gp[i] - sum_dy[cs] - hp[i] * sum_dy_xhat[cs]);
                            } else {
                                xg[i] += g * is * gp[i];
                            }
                        }
                    }
            }
        };
    }
    return node;
}

// Softmax over the channel axis of (b, c, h, w); max-shifted for stability.
template <typename T>
NodePtr<T> softmax_channels(const NodePtr<T>& x) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw contract_violation("softmax_channels expects [b,c,h,w], got " + shape_str(xs));
    const std::int64_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor<T> out(xs);
    for (std::int64_t n = 0; n < B; ++n) {
        const T* xp = &x->value.at(n * C * HW);
        T* op = &out.at(n * C * HW);
        for (std::int64_t i = 0; i < HW; ++i) {
            T mx = xp[i];
            for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, xp[c * HW + i]);
            T z = T(0);
            for (std::int64_t c = 0; c < C; ++c) {
                const T e = std::exp(xp[c * HW + i] - mx);
                op[c * HW + i] = e;
                z += e;
            }
            const T inv = T(1) / z;
            for (std::int64_t c = 0; c < C; ++c) op[c * HW + i] *= inv;
        }
    }
    auto node = detail::make_result(std::move(out), {x}, "softmax");
    if (node->requires_grad) {
        node->backward_step = [x, B, C, HW](Node<T>& self) {
            for (std::int64_t n = 0; n < B; ++n) {
                const T* yp = &self.value.at(n * C * HW);
                const T* gp = &self.grad.at(n * C * HW);
                T* xg = &x->grad.at(n * C * HW);
                for (std::int64_t i = 0; i < HW; ++i) {
                    T dot = T(0);
                    for (std::int64_t c = 0; c < C; ++c) dot += gp[c * HW + i] * yp[c * HW + i];
                    for (std::int64_t c = 0; c < C; ++c) xg[c * HW + i] += yp[c * HW + i] * (gp[c * HW + i] - dot);
                }
            }
        };
    }
    return node;
}

// ---- graph traversal ----------------------------------------------------------

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order; // parents before children
}

} // namespace detail

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
// calls until zeroed; interior scratch gradients reset at the start of each
// sweep so a repeated call adds exactly one more d(root)/d(leaf).
template <typename T>
void backward(const NodePtr<T>& root) {
    if (root->value.numel() != 1) {
        throw contract_violation("backward requires a scalar root, got " + shape_str(root->value.shape));
    }
    auto order = detail::topo_order(root.get());
    for (Node<T>* n : order) {
        if (n->backward_step) n->grad.fill(T(0));
    }
    root->grad.at(0) += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->requires_grad && n->backward_step) n->backward_step(*n);
    }
}

template <typename T>
void zero_grads(const NodePtr<T>& root) {
    for (Node<T>* n : detail::topo_order(root.get())) n->grad.fill(T(0));
}

} // namespace mscg

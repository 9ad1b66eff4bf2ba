#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mscg/autograd.hpp"

namespace mscg {

enum class ParamKind { weight, bias, bn_scale, bn_shift };

template <typename T>
struct NamedParam {
    std::string name;
    NodePtr<T> node;
    ParamKind kind = ParamKind::weight;
};

// Schedule rules: weights carry the decay, biases (incl. batchnorm shifts)
// run at bias_lr_multiplier with no decay, batchnorm scales at 1x no decay.
struct GroupRule {
    const char* group;
    double lr_mult;
    double weight_decay;
};

inline GroupRule group_rule(ParamKind kind, double weight_decay, double bias_lr_multiplier) {
    switch (kind) {
        case ParamKind::weight: return {"weights", 1.0, weight_decay};
        case ParamKind::bn_scale: return {"bn_scale", 1.0, 0.0};
        case ParamKind::bias:
        case ParamKind::bn_shift: return {"biases", bias_lr_multiplier, 0.0};
    }
    return {"weights", 1.0, weight_decay};
}

// lr = base * 0.5 * (1 + cos(pi * iter / total)).
inline double cosine_lr(std::int64_t iter, std::int64_t total_iters, double base_lr) {
    if (total_iters <= 0 || iter < 0 || iter > total_iters) {
        throw contract_violation("cosine_lr needs 0 <= iter <= total_iters");
    }
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(iter) /
                                           static_cast<double>(total_iters)));
}

template <typename T>
class Optimizer {
  public:
    virtual ~Optimizer() = default;
    virtual void step(double lr) = 0;
    virtual const char* name() const = 0;
    // mutable state exposed for checkpointing, keyed "slot/param"
    virtual std::vector<std::pair<std::string, Tensor<T>*>> state_entries() = 0;
    virtual std::int64_t step_count() const = 0;
    virtual void set_step_count(std::int64_t t) = 0;
};

template <typename T>
class SgdOptimizer final : public Optimizer<T> {
  public:
    SgdOptimizer(std::vector<NamedParam<T>> params, double momentum, double weight_decay, double bias_lr_multiplier)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay),
          bias_lr_multiplier_(bias_lr_multiplier) {
        for (const auto& p : params_) velocity_.emplace_back(p.node->value.shape);
    }

    void step(double lr) override {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i].node;
            const auto rule = group_rule(params_[i].kind, weight_decay_, bias_lr_multiplier_);
            const T eff_lr = static_cast<T>(lr * rule.lr_mult);
            const T wd = static_cast<T>(rule.weight_decay);
            auto& v = velocity_[i];
            const std::int64_t n = p.value.numel();
            for (std::int64_t j = 0; j < n; ++j) {
                const T g = p.grad.at(j) + wd * p.value.at(j);
                v.at(j) = static_cast<T>(momentum_) * v.at(j) + g;
                p.value.at(j) -= eff_lr * v.at(j);
            }
        }
        ++t_;
    }

    const char* name() const override { return "sgd"; }

    std::vector<std::pair<std::string, Tensor<T>*>> state_entries() override {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (std::size_t i = 0; i < params_.size(); ++i) out.emplace_back("v/" + params_[i].name, &velocity_[i]);
        return out;
    }

    std::int64_t step_count() const override { return t_; }
    void set_step_count(std::int64_t t) override { t_ = t; }

  private:
    std::vector<NamedParam<T>> params_;
    std::vector<Tensor<T>> velocity_;
    double momentum_, weight_decay_, bias_lr_multiplier_;
    std::int64_t t_ = 0;
};

template <typename T>
class AdamOptimizer final : public Optimizer<T> {
  public:
    AdamOptimizer(std::vector<NamedParam<T>> params, double weight_decay, double bias_lr_multiplier,
                  double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), weight_decay_(weight_decay), bias_lr_multiplier_(bias_lr_multiplier),
          beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.node->value.shape);
            v_.emplace_back(p.node->value.shape);
        }
    }

    void step(double lr) override {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i].node;
            const auto rule = group_rule(params_[i].kind, weight_decay_, bias_lr_multiplier_);
            const double eff_lr = lr * rule.lr_mult;
            const T wd = static_cast<T>(rule.weight_decay);
            const std::int64_t n = p.value.numel();
            for (std::int64_t j = 0; j < n; ++j) {
                const double g = static_cast<double>(p.grad.at(j) + wd * p.value.at(j));
                const double m = beta1_ * static_cast<double>(m_[i].at(j)) + (1.0 - beta1_) * g;
                const double v = beta2_ * static_cast<double>(v_[i].at(j)) + (1.0 - beta2_) * g * g;
                m_[i].at(j) = static_cast<T>(m);
                v_[i].at(j) = static_cast<T>(v);
                p.value.at(j) -= static_cast<T>(eff_lr * (m / bc1) / (std::sqrt(v / bc2) + eps_));
            }
        }
    }

    const char* name() const override { return "adam"; }

    std::vector<std::pair<std::string, Tensor<T>*>> state_entries() override {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.emplace_back("m/" + params_[i].name, &m_[i]);
            out.emplace_back("v/" + params_[i].name, &v_[i]);
        }
        return out;
    }

    std::int64_t step_count() const override { return t_; }
    void set_step_count(std::int64_t t) override { t_ = t; }

  private:
    std::vector<NamedParam<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    double weight_decay_, bias_lr_multiplier_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

} // namespace mscg

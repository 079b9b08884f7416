#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tuni/layers.hpp"

namespace tuni {

/// lr = base * (1 - iter/max_iter)^power; iter past max_iter clamps to 0.
inline double poly_lr(double base_lr, std::int64_t iter, std::int64_t max_iter, double power) {
    if (iter < 0) throw ContractError("poly_lr: iter must be >= 0");
    if (max_iter < 1) throw ContractError("poly_lr: max_iter must be >= 1");
    if (iter >= max_iter) return 0.0;
    return base_lr * std::pow(1.0 - double(iter) / double(max_iter), power);
}

/// AdamW with decoupled weight decay: w <- w*(1 - lr*wd) before the
/// bias-corrected moment update. State is keyed by registry position.
template <typename T>
class AdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    explicit AdamW(double wd = 0.0) : weight_decay(wd) {}

    void step(ParamRegistry<T>& reg, double lr) {
        if (slots_.empty()) {
            slots_.resize(reg.size());
            for (std::size_t i = 0; i < reg.size(); ++i) {
                const auto n = reg.item(i).second.data.size();
                slots_[i].m.assign(n, T(0));
                slots_[i].v.assign(n, T(0));
            }
        }
        if (slots_.size() != reg.size())
            throw ContractError("adamw: registry size changed under the optimizer");
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1, double(step_count_));
        const double bc2 = 1.0 - std::pow(beta2, double(step_count_));
        for (std::size_t i = 0; i < reg.size(); ++i) {
            Tensor<T>& p = reg.item(i).second;
            Slot& s = slots_[i];
            if (s.m.size() != p.data.size())
                throw DimensionError("adamw: parameter shape changed under the optimizer");
            const bool has_grad = p.grad.size() == p.data.size();
            for (std::size_t j = 0; j < p.data.size(); ++j) {
                const double grad = has_grad ? double(p.grad[j]) : 0.0;
                double w = double(p.data[j]) * (1.0 - lr * weight_decay);
                double m = beta1 * double(s.m[j]) + (1.0 - beta1) * grad;
                double v = beta2 * double(s.v[j]) + (1.0 - beta2) * grad * grad;
                s.m[j] = T(m);
                s.v[j] = T(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                w -= lr * mhat / (std::sqrt(vhat) + eps);
                p.data[j] = T(w);
            }
        }
    }

    std::int64_t step_count() const { return step_count_; }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    std::vector<Slot> slots_;
    std::int64_t step_count_ = 0;
};

} // namespace tuni

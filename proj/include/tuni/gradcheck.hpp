#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tuni/tensor.hpp"

namespace tuni {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst; // "input 2, coord 17" of the worst coordinate
};

/// Central-difference gradient check, run at 64-bit.
///
/// `eval(want_grads)` must compute the scalar loss from the current contents
/// of `inputs`; when want_grads is true it must also fill each input's .grad.
/// Relative error per coordinate: |a - n| / max(1, |a|, |n|).
inline GradCheckReport gradcheck(const std::function<double(bool)>& eval,
                                 const std::vector<Tensor<double>*>& inputs,
                                 double h = 1e-5, double tol = 1e-4) {
    for (auto* t : inputs) t->requires_grad = true;
    eval(true);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto* t : inputs) {
        if (t->grad.size() != t->data.size())
            throw ContractError("gradcheck: eval(true) did not populate input gradients");
        analytic.push_back(t->grad);
    }

    GradCheckReport rep;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor<double>& t = *inputs[ti];
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double saved = t.data[i];
            t.data[i] = saved + h;
            const double fp = eval(false);
            t.data[i] = saved - h;
            const double fm = eval(false);
            t.data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[ti][i];
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = "input " + std::to_string(ti) + ", coord " + std::to_string(i);
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

} // namespace tuni

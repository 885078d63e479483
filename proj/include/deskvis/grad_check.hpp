#pragma once

// Central finite-difference verification of tape gradients.

#include "deskvis/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace deskvis {

struct GradCheckInput {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckInput> inputs;
    bool passed = true;
    double max_rel_err = 0.0;

    std::string summary() const {
        std::string s;
        for (const auto& in : inputs) {
            s += in.name + ": max_rel_err=" + std::to_string(in.max_rel_err) +
                 (in.passed ? " ok" : " FAIL") + "\n";
        }
        return s;
    }
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Checks d f / d inputs against central differences (f(x+h)-f(x-h)) / 2h.
// rel err = |a - n| / max(1, |a|, |n|); passes iff every coordinate of every
// input stays within tol. Inputs are deep-copied, so callers may pass live
// parameters.
inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                  double h = 1e-6, double tol = 1e-5,
                                  const std::vector<std::string>& names = {}) {
    std::vector<Tensor> xs;
    xs.reserve(inputs.size());
    for (const Tensor& t : inputs) xs.push_back(t.clone().set_requires_grad(true));

    std::vector<Tensor> grads(xs.size());
    {
        Tape tape;
        Tensor y = f(xs);
        if (y.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
        if (!std::isfinite(y.value())) throw std::domain_error("grad_check: f evaluated non-finite");
        tape.backward(y);
        for (std::size_t i = 0; i < xs.size(); ++i) grads[i] = tape.grad(xs[i]);
    }

    auto eval = [&]() {
        Tensor y = f(xs);
        const double v = y.value();
        if (!std::isfinite(v)) throw std::domain_error("grad_check: f evaluated non-finite");
        return v;
    };

    GradCheckReport report;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        GradCheckInput res;
        res.name = i < names.size() ? names[i] : "input" + std::to_string(i);
        Tensor& x = xs[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double orig = x[j];
            x[j] = orig + h;
            const double fp = eval();
            x[j] = orig - h;
            const double fm = eval();
            x[j] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = grads[i][j];
            const double rel = std::fabs(analytic - numeric) /
                               std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_index = j;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
        res.passed = res.max_rel_err <= tol;
        report.passed = report.passed && res.passed;
        report.max_rel_err = std::max(report.max_rel_err, res.max_rel_err);
        report.inputs.push_back(std::move(res));
    }
    return report;
}

}  // namespace deskvis

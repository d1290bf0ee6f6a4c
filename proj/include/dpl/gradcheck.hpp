#pragma once

#include <dpl/ops.hpp>
#include <dpl/tape.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace dpl {

/// Builds a scalar loss on `tape` from leaf Vars holding the checked inputs.
using TapeFunction = std::function<Var(Tape& tape, const std::vector<Var>& inputs)>;

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
    double relative_floor = 1e-6;
    /// Skip coordinates whose perturbation straddles a non-differentiable point (ReLU kink),
    /// detected by disagreeing one-sided differences.
    bool skip_kinks = false;
    double kink_threshold = 1e-3;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::string worst; // "input i, coordinate j: analytic a vs numeric n"

    bool passed(double tolerance) const { return max_relative_error <= tolerance && checked > 0; }
};

inline double evaluate_scalar(const TapeFunction& f, const std::vector<Tensor>& inputs)
{
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs)
        vars.push_back(tape.constant(t));
    return f(tape, vars).value().item();
}

inline std::vector<Tensor> analytic_gradients(const TapeFunction& f, const std::vector<Tensor>& inputs)
{
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs)
        vars.push_back(tape.input(t));
    Var loss = f(tape, vars);
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (const Var& v : vars)
        grads.push_back(tape.has_grad(v.id()) ? tape.grad(v.id()) : Tensor(v.shape()));
    return grads;
}

/// Compares reverse-mode gradients of `f` with central finite differences on every coordinate.
inline GradCheckResult gradcheck(const TapeFunction& f, std::vector<Tensor> inputs, const GradCheckOptions& opt = {})
{
    const std::vector<Tensor> analytic = analytic_gradients(f, inputs);
    const double f0 = opt.skip_kinks ? evaluate_scalar(f, inputs) : 0.0;
    GradCheckResult res;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double orig = inputs[i][j];
            inputs[i][j] = orig + opt.step;
            const double fp = evaluate_scalar(f, inputs);
            inputs[i][j] = orig - opt.step;
            const double fm = evaluate_scalar(f, inputs);
            inputs[i][j] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.step);
            if (opt.skip_kinks) {
                const double fwd = (fp - f0) / opt.step;
                const double bwd = (f0 - fm) / opt.step;
                if (std::abs(fwd - bwd) > opt.kink_threshold * std::max(1.0, std::abs(numeric))) {
                    ++res.skipped;
                    continue;
                }
            }
            const double a = analytic[i][j];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.relative_floor});
            ++res.checked;
            if (err > res.max_relative_error || res.worst.empty()) {
                res.max_relative_error = std::max(res.max_relative_error, err);
                if (err >= res.max_relative_error) {
                    std::ostringstream os;
                    os << "input " << i << ", coordinate " << j << ": analytic " << a << " vs numeric " << numeric;
                    res.worst = os.str();
                }
            }
        }
    }
    return res;
}

} // namespace dpl

#pragma once

#include <dpl/model.hpp>
#include <dpl/tape.hpp>
#include <dpl/tensor.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace dpl {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd-momentum"; }

inline OptimizerKind optimizer_kind_from_string(const std::string& s)
{
    if (s == "adam")
        return OptimizerKind::adam;
    if (s == "sgd-momentum" || s == "sgd")
        return OptimizerKind::sgd_momentum;
    throw ContractError("unknown optimizer '" + s + "'");
}

struct OptimizerSpec {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 5e-5;
    double momentum = 0.9; // sgd-momentum
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First-order optimizer over a fixed parameter view. Updates happen outside any tape.
class Optimizer {
public:
    Optimizer(std::vector<Parameter*> params, OptimizerSpec spec) : params_(std::move(params)), spec_(spec) { reset(); }

    const OptimizerSpec& spec() const noexcept { return spec_; }
    const std::vector<Parameter*>& params() const noexcept { return params_; }
    std::size_t steps() const noexcept { return steps_; }

    void reset()
    {
        steps_ = 0;
        first_.clear();
        second_.clear();
        for (Parameter* p : params_) {
            first_.emplace_back(p->value.shape());
            second_.emplace_back(p->value.shape());
        }
    }

    /// sgd-momentum: v <- m v + g, p <- p - lr v.
    /// adam: bias-corrected first/second moments, p <- p - lr m^ / (sqrt(v^) + eps).
    void step()
    {
        ++steps_;
        const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            if (p.grad.shape() != p.value.shape())
                throw ContractError("parameter '" + p.name + "' has no gradient");
            auto w = p.value.data();
            auto g = p.grad.data();
            auto m = first_[i].data();
            if (spec_.kind == OptimizerKind::sgd_momentum) {
                for (std::size_t k = 0; k < w.size(); ++k) {
                    m[k] = spec_.momentum * m[k] + g[k];
                    w[k] -= spec_.lr * m[k];
                }
            } else {
                auto v = second_[i].data();
                for (std::size_t k = 0; k < w.size(); ++k) {
                    m[k] = spec_.beta1 * m[k] + (1.0 - spec_.beta1) * g[k];
                    v[k] = spec_.beta2 * v[k] + (1.0 - spec_.beta2) * g[k] * g[k];
                    w[k] -= spec_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + spec_.eps);
                }
            }
        }
    }

    /// Moment buffers in parameter order: first moments, then second moments.
    std::vector<NamedTensor> state() const
    {
        std::vector<NamedTensor> out;
        for (std::size_t i = 0; i < params_.size(); ++i)
            out.push_back({params_[i]->name + ".m", first_[i]});
        for (std::size_t i = 0; i < params_.size(); ++i)
            out.push_back({params_[i]->name + ".v", second_[i]});
        return out;
    }

    void load_state(const std::vector<NamedTensor>& state, std::size_t steps)
    {
        if (state.size() != 2 * params_.size())
            throw ContractError("optimizer state size mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (state[i].value.shape() != first_[i].shape() || state[i + params_.size()].value.shape() != second_[i].shape())
                throw ContractError("optimizer state shape mismatch for '" + params_[i]->name + "'");
            first_[i] = state[i].value;
            second_[i] = state[i + params_.size()].value;
        }
        steps_ = steps;
    }

private:
    std::vector<Parameter*> params_;
    OptimizerSpec spec_;
    std::vector<Tensor> first_, second_;
    std::size_t steps_ = 0;
};

} // namespace dpl

#pragma once

#include <dpl/tensor.hpp>

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace dpl {

/// A named trainable tensor. `grad` accumulates across backward passes until zeroed.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const
    {
        if (!tape_)
            throw ContractError("use of an unbound Var");
        return *tape_;
    }
    std::size_t id() const noexcept { return id_; }
    bool bound() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Records operations in execution order and replays them in reverse to compute gradients.
///
/// Nodes are appended strictly after their inputs, so a reverse sweep over node ids is a
/// valid topological order and visits every node once.
class Tape {
public:
    /// Backward closure: reads grad(self) and accumulates into its inputs.
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value)
    {
        nodes_.push_back(Node{std::move(value), Tensor(), {}, nullptr, false});
        return Var(this, nodes_.size() - 1);
    }

    /// Leaf bound to a parameter; backward adds into `p.grad`.
    Var param(Parameter& p)
    {
        if (p.grad.shape() != p.value.shape())
            p.zero_grad();
        nodes_.push_back(Node{p.value, Tensor(), {}, &p, true});
        return Var(this, nodes_.size() - 1);
    }

    /// Leaf that collects a gradient but is not bound to a Parameter (used by gradient checks).
    Var input(Tensor value)
    {
        nodes_.push_back(Node{std::move(value), Tensor(), {}, nullptr, true});
        return Var(this, nodes_.size() - 1);
    }

    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn)
    {
        bool needs = false;
        for (const Var& v : inputs) {
            check_owner(v);
            needs = needs || nodes_[v.id()].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), Tensor(), needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
        return Var(this, nodes_.size() - 1);
    }

    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn)
    {
        bool needs = false;
        for (const Var& v : inputs) {
            check_owner(v);
            needs = needs || nodes_[v.id()].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), Tensor(), needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Gradient buffer for a node, allocated as zeros on first access.
    Tensor& grad(std::size_t id)
    {
        Node& n = nodes_.at(id);
        if (n.grad.shape() != n.value.shape())
            n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    bool has_grad(std::size_t id) const
    {
        const Node& n = nodes_.at(id);
        return n.grad.shape() == n.value.shape() && !n.grad.empty();
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Parameter leaves add into their Parameter::grad.
    void backward(const Var& loss)
    {
        check_owner(loss);
        if (loss.value().size() != 1)
            throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
        if (swept_)
            throw ContractError("backward() already ran on this tape");
        swept_ = true;
        if (!nodes_[loss.id()].requires_grad)
            return;
        grad(loss.id())[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !has_grad(i))
                continue;
            if (n.backward)
                n.backward(*this, i);
            if (n.param) {
                auto dst = n.param->grad.data();
                auto src = n.grad.data();
                for (std::size_t k = 0; k < dst.size(); ++k)
                    dst[k] += src[k];
            }
        }
    }

    void check_owner(const Var& v) const
    {
        if (&v.tape() != this)
            throw ContractError("Var belongs to a different tape");
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        Parameter* param;
        bool requires_grad;
    };

    std::vector<Node> nodes_;
    bool swept_ = false;
};

inline const Tensor& Var::value() const { return tape().value(id_); }

} // namespace dpl

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dpnet/tensor.hpp"

namespace dpnet {

// A named trainable tensor with its gradient accumulator and SGD momentum
// buffer. Parameters are owned by a ParamSet and referenced by model modules;
// they are read-only during forward/backward and mutated only by the
// optimizer step.
struct Parameter {
    std::string name;
    Tensor4 value;
    Tensor4 grad;
    Tensor4 momentum;
    bool backbone = false;  // learning-rate group (encoder vs rest)
};

class ParamSet {
public:
    Parameter& add(std::string name, Tensor4 init, bool backbone = false);

    std::size_t count() const { return items_.size(); }
    Parameter& at(std::size_t i) { return *items_[i]; }
    const Parameter& at(std::size_t i) const { return *items_[i]; }
    Parameter* find(const std::string& name);

    void zero_grad();
    std::int64_t scalar_count() const;

private:
    std::vector<std::unique_ptr<Parameter>> items_;
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; invalid (default) handles are
// used for optional values such as absent biases.
struct Value {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr; }
    const Tensor4& val() const;
    const Tensor4& grad() const;  // defined after Tape::backward()
    const Dims4& dims() const { return val().dims(); }
};

// Inputs handed to a node's backward function. in_grads[i] is nullptr when
// input i does not require a gradient.
struct BackwardCtx {
    const Tensor4& out_val;
    const Tensor4& out_grad;
    std::span<const Tensor4* const> in_vals;
    std::span<Tensor4* const> in_grads;
};

using BackwardFn = std::function<void(const BackwardCtx&)>;

// Reverse-mode computation graph. Nodes are appended in construction order,
// which is a topological order by definition; backward() sweeps the node list
// in reverse, so gradient accumulation order is fixed and deterministic.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Constant or differentiable leaf.
    Value leaf(Tensor4 v, bool needs_grad = false);
    // Differentiable leaf bound to a Parameter; accumulate_param_grads() adds
    // this node's gradient into p.grad.
    Value param(Parameter& p);

    // Generic node. The extension point all ops (and the loss functions) are
    // built on; also usable from tests to inject deliberately wrong rules.
    Value make_node(Tensor4 value, std::vector<Value> inputs, BackwardFn back);

    // Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. loss must be a
    // 1x1x1x1 scalar node of this tape.
    void backward(Value loss);

    // Adds every bound leaf's gradient into its Parameter::grad, in node order.
    void accumulate_param_grads();

    // Bound-parameter gradients held by this tape, in node order. Lets batch
    // workers keep per-sample gradients local so the final accumulation order
    // is fixed by sample index regardless of scheduling.
    std::vector<std::pair<Parameter*, const Tensor4*>> param_grads() const;

    const Tensor4& value_of(int id) const { return nodes_[id].val; }
    const Tensor4& grad_of(int id) const;
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor4 val;
        Tensor4 grad;  // allocated lazily during backward
        std::vector<int> inputs;
        BackwardFn back;
        Parameter* origin = nullptr;
        bool needs_grad = false;
    };

    void ensure_grad(int id);

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

}  // namespace dpnet

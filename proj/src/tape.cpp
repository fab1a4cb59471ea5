#include "dpnet/tape.hpp"

#include <algorithm>

namespace dpnet {

Parameter& ParamSet::add(std::string name, Tensor4 init, bool backbone) {
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->grad = Tensor4::zeros(init.dims());
    p->momentum = Tensor4::zeros(init.dims());
    p->value = std::move(init);
    p->backbone = backbone;
    items_.push_back(std::move(p));
    return *items_.back();
}

Parameter* ParamSet::find(const std::string& name) {
    for (auto& p : items_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

void ParamSet::zero_grad() {
    for (auto& p : items_) p->grad.fill(0.0);
}

std::int64_t ParamSet::scalar_count() const {
    std::int64_t total = 0;
    for (const auto& p : items_) total += p->value.size();
    return total;
}

const Tensor4& Value::val() const { return tape->value_of(id); }
const Tensor4& Value::grad() const { return tape->grad_of(id); }

Value Tape::leaf(Tensor4 v, bool needs_grad) {
    Node node;
    node.val = std::move(v);
    node.needs_grad = needs_grad;
    nodes_.push_back(std::move(node));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::param(Parameter& p) {
    Node node;
    node.val = p.value;
    node.needs_grad = true;
    node.origin = &p;
    nodes_.push_back(std::move(node));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::make_node(Tensor4 value, std::vector<Value> inputs, BackwardFn back) {
    Node node;
    node.val = std::move(value);
    node.inputs.reserve(inputs.size());
    for (const Value& in : inputs) {
        if (!in.valid() || in.tape != this) {
            throw ShapeError("make_node: input value does not belong to this tape");
        }
        node.inputs.push_back(in.id);
        node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
    }
    if (node.needs_grad) node.back = std::move(back);
    nodes_.push_back(std::move(node));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor4& Tape::grad_of(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) {
        throw ShapeError("grad_of: no gradient at node " + std::to_string(id) +
                         " (run backward first; node must require grad)");
    }
    return n.grad;
}

void Tape::ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor4::zeros(n.val.dims());
}

void Tape::backward(Value loss) {
    if (!loss.valid() || loss.tape != this) {
        throw ShapeError("backward: loss node does not belong to this tape");
    }
    const Dims4 scalar{1, 1, 1, 1};
    if (!(nodes_[loss.id].val.dims() == scalar)) {
        throw ShapeError("backward: loss must be a 1x1x1x1 scalar, got " +
                         nodes_[loss.id].val.dims().str());
    }
    ensure_grad(loss.id);
    nodes_[loss.id].grad.flat(0) = 1.0;

    std::vector<char> active(nodes_.size(), 0);
    active[loss.id] = 1;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!active[id] || !n.needs_grad) continue;
        for (int in : n.inputs) active[in] = 1;
        if (!n.back) continue;

        std::vector<const Tensor4*> in_vals(n.inputs.size());
        std::vector<Tensor4*> in_grads(n.inputs.size(), nullptr);
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            Node& src = nodes_[n.inputs[i]];
            in_vals[i] = &src.val;
            if (src.needs_grad) {
                ensure_grad(n.inputs[i]);
                in_grads[i] = &nodes_[n.inputs[i]].grad;
            }
        }
        ensure_grad(id);
        BackwardCtx ctx{n.val, nodes_[id].grad, in_vals, in_grads};
        n.back(ctx);
    }
    ran_backward_ = true;
}

void Tape::accumulate_param_grads() {
    for (Node& n : nodes_) {
        if (n.origin == nullptr || n.grad.empty()) continue;
        Tensor4& dst = n.origin->grad;
        for (std::int64_t i = 0; i < dst.size(); ++i) {
            dst.flat(i) += n.grad.flat(i);
        }
    }
}

std::vector<std::pair<Parameter*, const Tensor4*>> Tape::param_grads() const {
    std::vector<std::pair<Parameter*, const Tensor4*>> out;
    for (const Node& n : nodes_) {
        if (n.origin == nullptr || n.grad.empty()) continue;
        out.emplace_back(n.origin, &n.grad);
    }
    return out;
}

}  // namespace dpnet
